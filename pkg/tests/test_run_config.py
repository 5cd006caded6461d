"""Tests for key=value experiment configs"""

import pytest

from cwgan_gp import GanConfig
from detectors import VARIANTS
from run_config import RunConfig, dump_run_config, load_run_config, make_run_config, parse_run_config
from settings import DomainError, ParseError, stage_seed

EXAMPLE = """\
# desk-scale run
profiles=3,1
variants=CSAE, cae
seed=11
snr_range_db=5,15
train_frac=0.75
output_dir=runs/desk

ofdm.fft_size=512
ofdm.cp_len=36
gan.preset=desk
gan.epochs=5
gan.generator_channels=32,16
detector.lr=0.001
detector.cdae.noise_factor=0.1
"""


# ============================================================================
# PARSING
# ============================================================================

def test_parse_example():
    config = parse_run_config(EXAMPLE)
    assert config.profiles == (1, 3)
    assert config.variants == ('cae', 'csae')
    assert config.seed == 11
    assert config.snr_range_db == (5.0, 15.0)
    assert config.train_frac == 0.75
    assert config.output_dir == "runs/desk"
    assert config.ofdm == {'fft_size': 512, 'cp_len': 36}
    assert config.gan_preset == 'desk'
    assert config.gan == {'epochs': 5, 'generator_channels': (32, 16)}
    assert config.detector == {'lr': 0.001}
    assert config.detector_variants == {'cdae': {'noise_factor': 0.1}}


def test_defaults_and_all_profiles():
    config = parse_run_config("# nothing but a comment\n\nprofiles=all\n")
    assert config.profiles == tuple(range(1, 13))
    assert config.variants == VARIANTS
    assert config.train_frac == 0.8
    assert config.gan_preset == 'full'


@pytest.mark.parametrize("text,line", [
    ("seed=1\nseed=2\n", 2),
    ("profiles=1\nbogus=3\n", 2),
    ("profiles=1\n\njust words\n", 3),
    ("detector.vae.lr=0.1\n", 1),
    ("profiles=1,x\n", 1),
    ("# c\nsnr_range_db=5\n", 2),
    ("ofdm.fft_size.extra=1\n", 1),
])
def test_malformed_lines_report_line_number(text, line):
    with pytest.raises(ParseError) as info:
        parse_run_config(text, "exp.conf")
    assert info.value.line == line
    assert str(info.value).startswith(f"exp.conf:{line}:")


@pytest.mark.parametrize("text", [
    "profiles=13\n",
    "train_frac=1.5\n",
    "snr_range_db=15,5\n",
    "variants=cae,vae\n",
    "gan.nonsense=1\n",
    "ofdm.cp_len=2048\n",
    "detector.seed=3\n",
    "detector.csae.kind=cae\n",
    "gan.preset=huge\n",
])
def test_invalid_values_are_domain_errors(text):
    with pytest.raises(DomainError):
        parse_run_config(text)


def test_make_run_config_wraps_validation():
    assert make_run_config(profiles=(2,)).profiles == (2,)
    with pytest.raises(DomainError):
        make_run_config(profiles=())
    with pytest.raises(DomainError):
        make_run_config(profiles=(1, 1))
    with pytest.raises(DomainError):
        make_run_config(unknown_field=1)


def test_load_from_file(tmp_path):
    path = tmp_path / "exp.conf"
    path.write_text(EXAMPLE)
    assert load_run_config(path) == parse_run_config(EXAMPLE)


# ============================================================================
# DUMPING
# ============================================================================

def test_dump_parses_back():
    config = parse_run_config(EXAMPLE)
    assert parse_run_config(dump_run_config(config)) == config


def test_dump_keeps_single_element_lists():
    config = RunConfig(profiles=(4,), variants=('csae',), gan={'generator_channels': (32,)},
                       detector={'freeze_encoder': True}, detector_variants={'cae': {'dropout': 0.1}})
    text = dump_run_config(config)
    assert "profiles=4,\n" in text
    assert "detector.freeze_encoder=true\n" in text
    assert parse_run_config(text) == config


# ============================================================================
# STAGE CONFIGS
# ============================================================================

def test_gan_config_uses_preset_and_stage_seed():
    config = parse_run_config(EXAMPLE)
    gan = config.gan_config(3)
    desk = GanConfig.desk()
    assert gan.epochs == 5
    assert gan.generator_channels == (32, 16)
    assert gan.latent_dim == desk.latent_dim and gan.lr == desk.lr
    assert gan.seed == stage_seed(11, 'gan', 3)
    assert config.gan_config(1).seed != gan.seed

    full = RunConfig(seed=11).gan_config(3)
    assert full.latent_dim == GanConfig().latent_dim
    assert full.seed == gan.seed


def test_variant_config_merges_overrides():
    config = parse_run_config(EXAMPLE)
    cdae = config.variant_config('cdae', 1)
    csae = config.variant_config('csae', 1)
    assert cdae.kind == 'cdae' and cdae.noise_factor == 0.1 and cdae.lr == 0.001
    assert cdae.ae_epochs == 15
    assert csae.noise_factor == 0.0 and csae.lr == 0.001 and csae.beta == 0.01
    assert cdae.seed == stage_seed(11, 'autoencoder', 1, VARIANTS.index('cdae'))
    assert cdae.seed != csae.seed


def test_ofdm_params_apply_overrides():
    params = parse_run_config(EXAMPLE).ofdm_params()
    assert (params.fft_size, params.cp_len, params.num_symbols) == (512, 36, 14)
