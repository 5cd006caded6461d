"""
Metrics Harness - Detection Metrics and Experiment Runs
=======================================================

Scores detectors and runs the full study:
- Confusion counts (positive class = jammed) and the six report metrics
  (precision, recall, F1, accuracy, FAR, MDR)
- Averages over datasets
- run_experiment: build -> normalize -> CWGAN-GP -> augment -> split ->
  autoencoder -> transfer -> classifier -> evaluate, per profile x variant
- Report emission: CSV, text summary next to the published numbers, JSON
"""

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from tqdm import tqdm

from cwgan_gp import augment_to_balance, save_history, train as train_gan
from dataset import Dataset, DatasetProfile, build_profile, normalize, split_train_test
from detectors import (VARIANTS, evaluate, train_autoencoder, train_classifier, transfer_weights)
from run_config import RunConfig, dump_run_config, load_run_config
from settings import CROSS, DomainError, JamDetectError, stage_seed

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

METRIC_FIELDS = ('precision', 'recall', 'f1', 'accuracy', 'far', 'mdr')

# Per-dataset results of the source study (percent, datasets 1..12)
PUBLISHED_RESULTS: Dict[str, Dict[str, Tuple[float, ...]]] = {
    'cae': {
        'precision': (100, 97, 97, 97, 100, 92, 100, 99, 92, 98, 100, 96),
        'recall': (82, 92, 81, 95, 99, 95, 99, 92, 68, 97, 99, 97),
        'f1': (90, 95, 88, 96, 99, 94, 99, 95, 78, 98, 100, 97),
        'far': (0, 2.5, 2.7, 3.1, 0.4, 8.1, 0.4, 1.1, 6.4, 1.6, 0.1, 4.3),
        'mdr': (17.8, 8, 19, 5, 1, 5, 1, 8, 32, 3, 1, 3),
    },
    'cdae': {
        'precision': (83, 64, 85, 91, 84, 98, 94, 97, 97, 99, 92, 92),
        'recall': (98, 88, 96, 97, 98, 82, 90, 84, 95, 86, 91, 96),
        'f1': (90, 74, 90, 94, 91, 90, 92, 90, 96, 92, 91, 94),
        'far': (19.9, 47.6, 15.5, 10.6, 18, 1.8, 6.2, 2.7, 2.6, 1, 7.6, 9.5),
        'mdr': (2, 12, 4, 3, 2, 18, 10, 16, 5, 14, 9, 4),
    },
    'csae': {
        'precision': (97, 88, 93, 93, 94, 87, 98, 90, 95, 51, 98, 95),
        'recall': (95, 98, 92, 89, 97, 88, 98, 94, 97, 65, 95, 93),
        'f1': (96, 93, 92, 91, 96, 87, 98, 92, 96, 57, 96, 94),
        'far': (2.7, 12.5, 7, 7.2, 6, 14.1, 2, 9.9, 5.1, 68.6, 1.9, 5.21),
        'mdr': (5, 2, 8, 11, 3, 12, 2, 6, 3, 35, 5, 7),
    },
}

# Published averages over the twelve datasets (percent)
PUBLISHED_AVERAGES: Dict[str, Dict[str, float]] = {
    'cae': {'precision': 97.33, 'recall': 91.33, 'f1': 94.08, 'accuracy': 94.35},
    'cdae': {'precision': 89.67, 'recall': 91.75, 'f1': 90.33, 'accuracy': 89.93},
    'csae': {'precision': 89.92, 'recall': 91.75, 'f1': 90.67, 'accuracy': 89.92},
}


# ============================================================================
# METRICS
# ============================================================================

class Confusion(BaseModel):
    model_config = ConfigDict(frozen=True)

    tp: int = Field(default=0, ge=0)
    fp: int = Field(default=0, ge=0)
    tn: int = Field(default=0, ge=0)
    fn: int = Field(default=0, ge=0)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


class MetricRow(BaseModel):
    """Fractions in [0, 1]; metrics with a zero denominator are 0 and listed in `undefined`"""
    model_config = ConfigDict(frozen=True)

    precision: float = Field(ge=0.0, le=1.0)
    recall: float = Field(ge=0.0, le=1.0)
    f1: float = Field(ge=0.0, le=1.0)
    accuracy: float = Field(ge=0.0, le=1.0)
    far: float = Field(ge=0.0, le=1.0)
    mdr: float = Field(ge=0.0, le=1.0)
    undefined: Tuple[str, ...] = ()

    def percent(self) -> Dict[str, float]:
        return {name: round(100.0 * getattr(self, name), 2) for name in METRIC_FIELDS}


def confusion(labels: Sequence[int], predictions: Sequence[int]) -> Confusion:
    """Counts over paired label / prediction vectors"""
    y = np.asarray(labels).reshape(-1)
    p = np.asarray(predictions).reshape(-1)
    if y.shape != p.shape:
        raise DomainError(f"labels ({y.size}) and predictions ({p.size}) differ in length")
    for name, values in (('labels', y), ('predictions', p)):
        if not np.all(np.isin(values, (0, 1))):
            raise DomainError(f"{name} must be 0/1")
    return Confusion(tp=int(np.sum((y == 1) & (p == 1))), fp=int(np.sum((y == 0) & (p == 1))),
                     tn=int(np.sum((y == 0) & (p == 0))), fn=int(np.sum((y == 1) & (p == 0))))


def _ratio(num: int, den: int, name: str, undefined: List[str]) -> float:
    if den == 0:
        undefined.append(name)
        return 0.0
    return num / den


def metrics(c: Confusion) -> MetricRow:
    """
    precision = tp/(tp+fp), recall = tp/(tp+fn), accuracy = (tp+tn)/total,
    far = fp/(fp+tn), mdr = fn/(tp+fn), f1 = harmonic mean of precision and recall
    """
    if c.total == 0:
        raise DomainError("cannot score an empty confusion matrix")
    undefined: List[str] = []
    precision = _ratio(c.tp, c.tp + c.fp, 'precision', undefined)
    recall = _ratio(c.tp, c.tp + c.fn, 'recall', undefined)
    mdr = _ratio(c.fn, c.tp + c.fn, 'mdr', undefined)
    far = _ratio(c.fp, c.fp + c.tn, 'far', undefined)
    if 'precision' in undefined or 'recall' in undefined or precision + recall == 0:
        undefined.append('f1')
        f1 = 0.0
    else:
        f1 = 2.0 * precision * recall / (precision + recall)
    return MetricRow(precision=precision, recall=recall, f1=f1, accuracy=(c.tp + c.tn) / c.total,
                     far=far, mdr=mdr, undefined=tuple(undefined))


def aggregate(rows: Sequence[MetricRow]) -> MetricRow:
    """Arithmetic mean per metric; a metric is undefined if any row had it undefined"""
    if not rows:
        raise DomainError("aggregate needs at least one row")
    means = {name: float(np.mean([getattr(r, name) for r in rows])) for name in METRIC_FIELDS}
    undefined = tuple(name for name in METRIC_FIELDS if any(name in r.undefined for r in rows))
    return MetricRow(**means, undefined=undefined)


# ============================================================================
# REPORT
# ============================================================================

class ReportRow(BaseModel):
    """One (profile, variant) cell"""
    model_config = ConfigDict(frozen=True)

    profile_id: int
    profile_name: str
    variant: str
    status: str = 'ok'
    error: str = ''
    test_rows: int = 0
    confusion: Optional[Confusion] = None
    metrics: Optional[MetricRow] = None

    @property
    def ok(self) -> bool:
        return self.status == 'ok'

    @classmethod
    def failed(cls, profile: DatasetProfile, variant: str, error: str) -> 'ReportRow':
        return cls(profile_id=profile.id, profile_name=profile.name, variant=variant,
                   status='failed', error=error)


class Report(BaseModel):
    model_config = ConfigDict(frozen=True)

    seed: int = 0
    config: Dict[str, Any] = Field(default_factory=dict)
    rows: List[ReportRow] = Field(default_factory=list)
    averages: Dict[str, MetricRow] = Field(default_factory=dict)

    @model_validator(mode='after')
    def _ordered(self) -> 'Report':
        keys = [(r.profile_id, VARIANTS.index(r.variant)) for r in self.rows]
        if keys != sorted(keys):
            raise ValueError("report rows must be ordered by (profile id, variant)")
        return self

    @classmethod
    def assemble(cls, rows: Sequence[ReportRow], seed: int = 0,
                 config: Optional[Dict[str, Any]] = None) -> 'Report':
        """Sort rows and compute per-variant averages over successful cells"""
        rows = sorted(rows, key=lambda r: (r.profile_id, VARIANTS.index(r.variant)))
        averages = {}
        for kind in VARIANTS:
            scored = [r.metrics for r in rows if r.variant == kind and r.ok]
            if scored:
                averages[kind] = aggregate(scored)
        return cls(seed=seed, config=config or {}, rows=rows, averages=averages)

    @property
    def failures(self) -> List[ReportRow]:
        return [r for r in self.rows if not r.ok]

    @property
    def all_failed(self) -> bool:
        return bool(self.rows) and len(self.failures) == len(self.rows)

    def to_frame(self) -> pd.DataFrame:
        """One row per cell, metrics in percent with 2 decimals"""
        records = []
        for r in self.rows:
            record = {'profile_id': r.profile_id, 'profile': r.profile_name, 'variant': r.variant,
                      'status': r.status, 'test_rows': r.test_rows}
            values = r.metrics.percent() if r.metrics else {name: np.nan for name in METRIC_FIELDS}
            record.update(values)
            record['undefined'] = ";".join(r.metrics.undefined) if r.metrics else ""
            record['error'] = r.error
            records.append(record)
        columns = ['profile_id', 'profile', 'variant', 'status', 'test_rows', *METRIC_FIELDS,
                   'undefined', 'error']
        return pd.DataFrame(records, columns=columns)

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)

    @classmethod
    def from_json(cls, text: str) -> 'Report':
        return cls.model_validate_json(text)


def _fmt(value: Optional[float]) -> str:
    return f"{value:6.2f}" if value is not None else "     -"


def render_text(report: Report) -> str:
    """Per-variant tables of the reproduced metrics with the published values alongside"""
    lines = ["=" * 70, f"Jamming detection report (seed {report.seed})", "=" * 70]
    for kind in VARIANTS:
        rows = [r for r in report.rows if r.variant == kind]
        if not rows:
            continue
        lines += ["", kind.upper(),
                  f"{'id':>3} {'dataset':<12} {'P':>6} {'R':>6} {'F1':>6} {'Acc':>6} {'FAR':>6} {'MDR':>6}"
                  f" | {'pub P':>6} {'pub R':>6} {'pub F1':>6}"]
        published = PUBLISHED_RESULTS[kind]
        for r in rows:
            pct = r.metrics.percent() if r.metrics else {}
            pub = [published[m][r.profile_id - 1] if 1 <= r.profile_id <= 12 else None
                   for m in ('precision', 'recall', 'f1')]
            cells = " ".join(_fmt(pct.get(m)) for m in METRIC_FIELDS)
            lines.append(f"{r.profile_id:>3} {r.profile_name:<12} {cells} | "
                         + " ".join(_fmt(v) for v in pub))
        avg = report.averages.get(kind)
        pub_avg = PUBLISHED_AVERAGES[kind]
        cells = " ".join(_fmt(avg.percent()[m] if avg else None) for m in METRIC_FIELDS)
        lines.append(f"{'':>3} {'average':<12} {cells} | "
                     + " ".join(_fmt(pub_avg[m]) for m in ('precision', 'recall', 'f1')))

    if report.failures:
        lines += ["", "Failed cells:"]
        lines += [f"  {CROSS} {r.profile_name} / {r.variant}: {r.error}" for r in report.failures]
    return "\n".join(lines) + "\n"


def write_report(report: Report, output_dir: PathLike) -> Dict[str, Path]:
    """report.csv, report.txt and report.json under output_dir"""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        'csv': output_dir / "report.csv",
        'txt': output_dir / "report.txt",
        'json': output_dir / "report.json",
    }
    report.to_frame().to_csv(paths['csv'], index=False, float_format='%.2f', lineterminator='\n')
    paths['txt'].write_text(render_text(report), encoding='utf-8')
    paths['json'].write_text(report.to_json(), encoding='utf-8')
    logger.info(f"Report written to {output_dir}")
    return paths


def load_report(path: PathLike) -> Report:
    return Report.from_json(Path(path).read_text(encoding='utf-8'))


# ============================================================================
# EXPERIMENT
# ============================================================================

def _profile_dir(output_dir: Optional[Path], profile: DatasetProfile) -> Optional[Path]:
    if output_dir is None:
        return None
    path = output_dir / f"profile_{profile.id:02d}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def prepare_profile(config: RunConfig, profile_id: int,
                    output_dir: Optional[Path] = None) -> Tuple[Dataset, Dataset]:
    """build -> normalize -> CWGAN-GP -> augment -> stratified split"""
    profile = config.profile(profile_id)
    raw = build_profile(profile, config.ofdm_params(), config.snr_range_db,
                        seed=stage_seed(config.seed, 'build', profile_id))
    ds = normalize(raw)
    gan_cfg = config.gan_config(profile_id)
    gan = train_gan(gan_cfg, ds)
    augmented = augment_to_balance(gan.generator, ds, gan_cfg.per_class, gan_cfg.round_size,
                                   seed=stage_seed(config.seed, 'augment', profile_id))
    folder = _profile_dir(output_dir, profile)
    if folder is not None:
        save_history(folder / "gan_history.csv", gan.history)
    return split_train_test(augmented, config.train_frac, seed=stage_seed(config.seed, 'split', profile_id))


def run_cell(config: RunConfig, profile: DatasetProfile, kind: str, train_ds: Dataset,
             test_ds: Dataset, output_dir: Optional[Path] = None) -> ReportRow:
    """Train and score one detector variant on a prepared split"""
    stage = 'autoencoder'
    try:
        cfg = config.variant_config(kind, profile.id)
        ae = train_autoencoder(cfg, train_ds)
        stage = 'classifier'
        model = transfer_weights(ae.model, cfg)
        clf = train_classifier(model, cfg, train_ds, cfg.classifier_input, ae.model)
        stage = 'evaluate'
        _, predictions = evaluate(model, test_ds, cfg.classifier_input, ae.model)
        counts = confusion(test_ds.labels, predictions)
        row = ReportRow(profile_id=profile.id, profile_name=profile.name, variant=kind,
                        test_rows=len(test_ds), confusion=counts, metrics=metrics(counts))
    except (JamDetectError, ValueError, ArithmeticError) as e:
        logger.error(f"{profile.name} / {kind} failed during {stage}: {e}", exc_info=True)
        return ReportRow.failed(profile, kind, f"{stage}: {e}")

    folder = _profile_dir(output_dir, profile)
    if folder is not None:
        save_history(folder / f"{kind}_autoencoder_history.csv", ae.history)
        save_history(folder / f"{kind}_classifier_history.csv", clf.history)
    logger.info(f"{profile.name} / {kind}: F1 {row.metrics.f1:.4f}, accuracy {row.metrics.accuracy:.4f}")
    return row


def run_profile(config: RunConfig, profile_id: int,
                output_dir: Optional[PathLike] = None) -> List[ReportRow]:
    """All variant cells of one profile; they share one GAN and one split"""
    output_dir = Path(output_dir) if output_dir is not None else None
    profile = config.profile(profile_id)
    try:
        train_ds, test_ds = prepare_profile(config, profile_id, output_dir)
    except (JamDetectError, ValueError, ArithmeticError) as e:
        logger.error(f"{profile.name}: data preparation failed: {e}", exc_info=True)
        return [ReportRow.failed(profile, kind, f"prepare: {e}") for kind in config.variants]
    return [run_cell(config, profile, kind, train_ds, test_ds, output_dir) for kind in config.variants]


def run_experiment(config: Union[RunConfig, PathLike], jobs: int = 1,
                   output_dir: Optional[PathLike] = None, progress: bool = False) -> Report:
    """
    Run every (profile, variant) cell and assemble the report

    A failing cell is recorded and the others proceed. Profiles run in a
    process pool when jobs > 1; the report order does not depend on it.

    Args:
        config: RunConfig or path of a key=value config file
        jobs: Worker processes
        output_dir: Where histories and report files go (default config.output_dir;
            nothing is written when both are None)
        progress: Show a tqdm bar over profiles

    Returns:
        Report
    """
    if not isinstance(config, RunConfig):
        config = load_run_config(config)
    if jobs < 1:
        raise DomainError(f"jobs must be >= 1, got {jobs}")
    target = output_dir if output_dir is not None else config.output_dir
    target = Path(target) if target is not None else None

    logger.info(f"Running {len(config.profiles)} profile(s) x {len(config.variants)} variant(s) "
                f"with {jobs} job(s)")
    rows: List[ReportRow] = []
    if jobs == 1 or len(config.profiles) == 1:
        for pid in tqdm(config.profiles, desc="profiles", disable=not progress):
            rows.extend(run_profile(config, pid, target))
    else:
        with ProcessPoolExecutor(max_workers=min(jobs, len(config.profiles))) as pool:
            futures = [pool.submit(run_profile, config, pid, target) for pid in config.profiles]
            for future in tqdm(futures, desc="profiles", disable=not progress):
                rows.extend(future.result())

    report = Report.assemble(rows, seed=config.seed, config=json.loads(config.model_dump_json()))
    if target is not None:
        write_report(report, target)
        (target / "run.conf").write_text(dump_run_config(config), encoding='utf-8')
    if report.all_failed:
        logger.error("Every experiment cell failed")
    return report
