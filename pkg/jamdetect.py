"""
Jamdetect - Command Line Interface
==================================

Subcommands for the whole pipeline:
- synth     write a CP-OFDM capture (preamble + frame) as an I/Q CSV
- sync      timing + CFO estimation on an I/Q CSV, M(t) curve CSV
- build     materialize a femtocell profile dataset
- augment   train CWGAN-GP and write the balanced dataset
- train     train one detector variant (CAE / CDAE / CSAE)
- evaluate  score a detector checkpoint on a test CSV
- report    run the full experiment from a key=value config file

Usage:
    python jamdetect.py build --profile 1 --seed 7
    python jamdetect.py report --config experiment.conf --jobs 4
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import psutil
from pydantic import ValidationError

from cwgan_gp import GanConfig, augment_to_balance, save_gan, save_history, train as train_gan
from dataset import build_profile, normalize, profile_by_id, split_train_test
from dataset_store import load_csv, save_csv
from detectors import (VARIANTS, VariantConfig, evaluate as evaluate_detector, load_detector,
                       save_detector, train_autoencoder, train_classifier, transfer_weights)
from iq_files import params_from_meta, read_iq_csv, write_iq_csv, write_metric_curve
from metrics_harness import confusion, metrics, run_experiment
from phy_sync import OfdmParams, default_cfo_grid, gen_pss, synchronize, synth_capture
from run_config import load_run_config
from settings import CHECK, CROSS, WARN, DomainError, JamDetectError, configure_logging, output_dir_default

logger = logging.getLogger(__name__)


def _banner(title: str) -> None:
    print("=" * 70)
    print(title)
    print("=" * 70)


def _ofdm_from_args(args) -> OfdmParams:
    return OfdmParams(fft_size=args.fft_size, cp_len=args.cp_len, num_symbols=args.num_symbols,
                      ssb_symbol_index=args.ssb_symbol_index, ssb_num_symbols=args.ssb_num_symbols,
                      ssb_num_subcarriers=args.ssb_num_subcarriers, sample_rate_hz=args.sample_rate_hz,
                      nid2=args.nid2)


def _add_ofdm_args(parser: argparse.ArgumentParser) -> None:
    defaults = OfdmParams()
    group = parser.add_argument_group('numerology')
    group.add_argument('--fft-size', type=int, default=defaults.fft_size,
                       help=f'FFT size (default: {defaults.fft_size})')
    group.add_argument('--cp-len', type=int, default=defaults.cp_len,
                       help=f'Cyclic prefix length (default: {defaults.cp_len})')
    group.add_argument('--num-symbols', type=int, default=defaults.num_symbols,
                       help=f'OFDM symbols per frame (default: {defaults.num_symbols})')
    group.add_argument('--ssb-symbol-index', type=int, default=defaults.ssb_symbol_index,
                       help=f'First SSB symbol (default: {defaults.ssb_symbol_index})')
    group.add_argument('--ssb-num-symbols', type=int, default=defaults.ssb_num_symbols,
                       help=f'SSB symbols (default: {defaults.ssb_num_symbols})')
    group.add_argument('--ssb-num-subcarriers', type=int, default=defaults.ssb_num_subcarriers,
                       help=f'SSB subcarriers (default: {defaults.ssb_num_subcarriers})')
    group.add_argument('--sample-rate-hz', type=float, default=defaults.sample_rate_hz,
                       help=f'Sample rate (default: {defaults.sample_rate_hz:g})')
    group.add_argument('--nid2', type=int, default=defaults.nid2, choices=[0, 1, 2],
                       help='PSS sequence index (default: 0)')


# ============================================================================
# SUBCOMMANDS
# ============================================================================

def cmd_synth(args) -> int:
    params = _ofdm_from_args(args)
    buf = synth_capture(params, gen_pss(params.nid2), args.payload_seed, offset=args.offset,
                        snr_db=args.snr_db, cfo_hz=args.cfo_hz, noise_seed=args.noise_seed)
    output = args.output or args.output_dir / "capture.csv"
    write_iq_csv(output, buf, params)
    print(f"{CHECK} Wrote {len(buf)} samples to {output} (offset {args.offset}, "
          f"CFO {args.cfo_hz:g} Hz, SNR {args.snr_db if args.snr_db is not None else 'clean'})")
    return 0


def cmd_sync(args) -> int:
    buf, meta = read_iq_csv(args.input)
    params = params_from_meta(meta, _ofdm_from_args(args))
    grid = default_cfo_grid(args.cfo_span_hz, args.cfo_step_hz)
    result = synchronize(buf, params, gen_pss(params.nid2), grid, args.cfo_reference)
    curve = args.curve or args.output_dir / "metric_curve.csv"
    write_metric_curve(curve, result)

    _banner(f"Synchronization: {args.input}")
    print(f"t_off={result.t_off}")
    print(f"cfo_hz={result.cfo_hz:g}")
    print(f"peak_metric={result.metric_curve[result.t_off]:.6f}")
    print(f"{CHECK} M(t) curve written to {curve}")
    return 0


def cmd_build(args) -> int:
    profile = profile_by_id(args.profile)
    ds = build_profile(profile, _ofdm_from_args(args), (args.snr_low_db, args.snr_high_db),
                       seed=args.seed, progress=args.progress)
    if args.normalize:
        ds = normalize(ds)
    output = args.output or args.output_dir / f"dataset_{profile.id:02d}.csv"
    save_csv(ds, output)
    jammed, non_jammed = ds.counts()
    print(f"{CHECK} {profile.name}: {jammed} jammed + {non_jammed} non-jammed (Q={ds.q}) -> {output}")
    return 0


def cmd_augment(args) -> int:
    ds = load_csv(args.input)
    if not ds.normalized:
        print(f"{WARN} {args.input} is not normalized; normalizing with its own statistics")
        ds = normalize(ds)
    overrides = {'seed': args.seed, 'per_class': args.per_class, 'round_size': args.round_size}
    if args.epochs is not None:
        overrides['epochs'] = args.epochs
    config = GanConfig.desk(**overrides) if args.desk else GanConfig(**overrides)

    result = train_gan(config, ds, progress=args.progress)
    augmented = augment_to_balance(result.generator, ds, config.per_class, config.round_size, seed=args.seed)

    out_dir = args.output_dir
    output = args.output or out_dir / "augmented.csv"
    save_csv(augmented, output)
    save_history(Path(output).with_name("gan_history.csv"), result.history)
    save_gan(Path(output).with_name("gan.npz"), result.generator, result.critic, config)
    jammed, non_jammed = augmented.counts()
    print(f"{CHECK} {len(augmented)} rows ({jammed} jammed + {non_jammed} non-jammed) -> {output}")
    return 0


def cmd_train(args) -> int:
    ds = load_csv(args.input)
    if not ds.normalized:
        raise DomainError(f"{args.input} is not normalized; run build --normalize or augment first")
    if args.holdout:
        ds, test = split_train_test(ds, args.train_frac, seed=args.seed)
        save_csv(test, args.holdout)
        print(f"{CHECK} Held out {len(test)} rows -> {args.holdout}")

    overrides = {'seed': args.seed}
    for key in ('ae_epochs', 'clf_epochs', 'lr', 'batch_size'):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    cfg = VariantConfig.for_variant(args.variant, **overrides)

    ae = train_autoencoder(cfg, ds)
    model = transfer_weights(ae.model, cfg)
    clf = train_classifier(model, cfg, ds, cfg.classifier_input, ae.model)

    output = Path(args.output or args.output_dir / f"{cfg.kind}.npz")
    save_detector(output, ae.model, model, cfg)
    save_history(output.with_name(f"{cfg.kind}_autoencoder_history.csv"), ae.history)
    save_history(output.with_name(f"{cfg.kind}_classifier_history.csv"), clf.history)
    print(f"{CHECK} {cfg.kind.upper()} checkpoint -> {output} "
          f"(final validation accuracy {clf.history['val_accuracy'].iloc[-1]:.4f})")
    return 0


def cmd_evaluate(args) -> int:
    ae, model, cfg = load_detector(args.checkpoint)
    ds = load_csv(args.input)
    if not ds.normalized:
        raise DomainError(f"{args.input} is not normalized")
    gamma = cfg.threshold if args.gamma is None else args.gamma
    _, predictions = evaluate_detector(model, ds, cfg.classifier_input, ae, gamma)
    counts = confusion(ds.labels, predictions)
    row = metrics(counts)

    _banner(f"{cfg.kind.upper()} on {args.input} (gamma {gamma:g})")
    print(f"tp={counts.tp} fp={counts.fp} tn={counts.tn} fn={counts.fn}")
    for name, value in row.percent().items():
        flag = " (undefined)" if name in row.undefined else ""
        print(f"{name:>10}: {value:6.2f}%{flag}")
    return 0


def cmd_report(args) -> int:
    config = load_run_config(args.config)
    target = args.output_dir if args.explicit_output_dir else Path(config.output_dir or args.output_dir)
    report = run_experiment(config, jobs=args.jobs, output_dir=target, progress=args.progress)
    _banner(f"Experiment report (seed {report.seed})")
    for kind, row in report.averages.items():
        pct = row.percent()
        print(f"  {kind.upper():<5} P {pct['precision']:6.2f}  R {pct['recall']:6.2f}  "
              f"F1 {pct['f1']:6.2f}  Acc {pct['accuracy']:6.2f}")
    for failed in report.failures:
        print(f"  {CROSS} {failed.profile_name} / {failed.variant}: {failed.error}")
    print(f"{CHECK} Report written to {target}")
    return 1 if report.all_failed else 0


# ============================================================================
# PARSER
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='jamdetect',
        description="5G SSB jamming detection: synthesis, sync, augmentation, detectors, reports"
    )
    parser.add_argument('--log-level', default=None,
                        help='Log level (default: JAMDETECT_LOG_LEVEL or INFO)')
    parser.add_argument('--log-file', default=None,
                        help='Also write the log to this file')
    parser.add_argument('--output-dir', type=Path, default=None,
                        help='Output directory (default: JAMDETECT_OUTPUT_DIR or ./runs)')
    parser.add_argument('--jobs', type=int, default=1,
                        help='Parallel experiment workers (default: 1, capped at the CPU count)')
    parser.add_argument('--progress', action='store_true',
                        help='Show progress bars')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('synth', help='Write a synthesized capture as an I/Q CSV')
    _add_ofdm_args(p)
    p.add_argument('--output', type=Path, help='CSV path (default: <output-dir>/capture.csv)')
    p.add_argument('--payload-seed', type=int, default=0, help='Payload seed (default: 0)')
    p.add_argument('--offset', type=int, default=0, help='Noise lead-in samples (default: 0)')
    p.add_argument('--snr-db', type=float, default=None, help='AWGN SNR (default: clean)')
    p.add_argument('--cfo-hz', type=float, default=0.0, help='Carrier frequency offset (default: 0)')
    p.add_argument('--noise-seed', type=int, default=0, help='Noise seed (default: 0)')
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser('sync', help='Estimate timing and CFO of an I/Q CSV')
    _add_ofdm_args(p)
    p.add_argument('--input', type=Path, required=True, help='I/Q CSV')
    p.add_argument('--curve', type=Path, help='M(t) CSV (default: <output-dir>/metric_curve.csv)')
    p.add_argument('--cfo-span-hz', type=float, default=3000.0, help='CFO search span (default: 3000)')
    p.add_argument('--cfo-step-hz', type=float, default=100.0, help='CFO grid step (default: 100)')
    p.add_argument('--cfo-reference', choices=('capture', 'pss'), default='capture',
                   help='Correlate the preamble and PSS, or the PSS alone (default: capture)')
    p.set_defaults(func=cmd_sync)

    p = sub.add_parser('build', help='Materialize a femtocell profile dataset')
    _add_ofdm_args(p)
    p.add_argument('--profile', type=int, required=True, help='Profile id 1..12')
    p.add_argument('--seed', type=int, default=0, help='Build seed (default: 0)')
    p.add_argument('--snr-low-db', type=float, default=0.0, help='Lowest jamming SNR (default: 0)')
    p.add_argument('--snr-high-db', type=float, default=15.0, help='Highest jamming SNR (default: 15)')
    p.add_argument('--normalize', action='store_true', help='Write min-max normalized features')
    p.add_argument('--output', type=Path, help='CSV path (default: <output-dir>/dataset_<id>.csv)')
    p.set_defaults(func=cmd_build)

    p = sub.add_parser('augment', help='Train CWGAN-GP and balance a dataset')
    p.add_argument('--input', type=Path, required=True, help='Dataset CSV')
    p.add_argument('--output', type=Path, help='CSV path (default: <output-dir>/augmented.csv)')
    p.add_argument('--seed', type=int, default=0, help='GAN seed (default: 0)')
    p.add_argument('--epochs', type=int, default=None, help='GAN epochs (default: 20)')
    p.add_argument('--per-class', type=int, default=2500, help='Rows per label (default: 2500)')
    p.add_argument('--round-size', type=int, default=250, help='Rows per sampling round (default: 250)')
    p.add_argument('--desk', action='store_true', help='Small networks for quick runs')
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser('train', help='Train one detector variant')
    p.add_argument('--input', type=Path, required=True, help='Normalized training CSV')
    p.add_argument('--variant', choices=VARIANTS, default='cae', help='Detector (default: cae)')
    p.add_argument('--output', type=Path, help='Checkpoint (default: <output-dir>/<variant>.npz)')
    p.add_argument('--holdout', type=Path, help='Split off a test set and write it here')
    p.add_argument('--train-frac', type=float, default=0.8, help='Train share for --holdout (default: 0.8)')
    p.add_argument('--seed', type=int, default=0, help='Seed (default: 0)')
    p.add_argument('--ae-epochs', type=int, default=None, help='Autoencoder epochs')
    p.add_argument('--clf-epochs', type=int, default=None, help='Classifier epochs')
    p.add_argument('--lr', type=float, default=None, help='Learning rate (default: 1e-4)')
    p.add_argument('--batch-size', type=int, default=None, help='Batch size (default: 200)')
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('evaluate', help='Score a detector checkpoint on a test CSV')
    p.add_argument('--checkpoint', type=Path, required=True, help='Detector .npz')
    p.add_argument('--input', type=Path, required=True, help='Normalized test CSV')
    p.add_argument('--gamma', type=float, default=None, help='Decision threshold (default: checkpoint)')
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser('report', help='Run the full experiment from a config file')
    p.add_argument('--config', type=Path, required=True, help='key=value run config')
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point; returns the process exit status"""
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(level=args.log_level, log_file=args.log_file)

    args.explicit_output_dir = args.output_dir is not None
    if args.output_dir is None:
        args.output_dir = output_dir_default()
    cpus = psutil.cpu_count(logical=True) or 1
    if args.jobs < 1:
        parser.error("--jobs must be at least 1")
    if args.jobs > cpus:
        logger.warning(f"--jobs {args.jobs} exceeds {cpus} CPUs; using {cpus}")
        args.jobs = cpus

    try:
        return args.func(args)
    except (JamDetectError, ValidationError, OSError) as e:
        logger.debug("command failed", exc_info=True)
        print(f"{CROSS} {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
