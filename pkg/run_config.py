"""
Run Config - Experiment Configuration Files
===========================================

Flat key=value experiment files:
- `profiles`, `variants`, `seed`, `snr_range_db`, `train_frac`, `output_dir`
- Dotted overrides checked against the module schemas:
  `ofdm.<field>`, `gan.<field>` (plus `gan.preset=desk`),
  `detector.<field>`, `detector.<variant>.<field>`
- `#` comments and blank lines ignored, unknown keys rejected
- Per-stage configs derived from the global seed
"""

import logging
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Tuple, Type, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from cwgan_gp import GanConfig
from dataset import DEFAULT_SNR_RANGE_DB, DatasetProfile, profile_by_id, femtocell_profiles
from detectors import VARIANTS, VariantConfig
from phy_sync import OfdmParams
from settings import DomainError, ParseError, stage_seed

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

N_PROFILES = 12

# Fields set by the harness itself, never by overrides
_RESERVED = {'seed', 'kind'}


def _checked_overrides(model: Type[BaseModel], values: Dict[str, Any], section: str) -> Dict[str, Any]:
    """Validate overrides against `model` and return them in their parsed types"""
    unknown = sorted(set(values) - set(model.model_fields))
    reserved = sorted(set(values) & _RESERVED)
    if unknown:
        raise ValueError(f"unknown {section} key(s): {', '.join(unknown)}")
    if reserved:
        raise ValueError(f"{section} key(s) set by the harness: {', '.join(reserved)}")
    try:
        parsed = model(**values)
    except ValidationError as e:
        raise ValueError(f"invalid {section} override: {e}") from e
    return {key: getattr(parsed, key) for key in values}


class RunConfig(BaseModel):
    """One experiment: profiles x variants plus hyperparameter overrides"""
    model_config = ConfigDict(frozen=True, extra='forbid')

    profiles: Tuple[int, ...] = tuple(range(1, N_PROFILES + 1))
    variants: Tuple[Literal['cae', 'cdae', 'csae'], ...] = VARIANTS
    seed: int = 0
    snr_range_db: Tuple[float, float] = DEFAULT_SNR_RANGE_DB
    train_frac: float = Field(default=0.8, gt=0.0, lt=1.0)
    output_dir: Optional[str] = None
    ofdm: Dict[str, Any] = Field(default_factory=dict)
    gan_preset: Literal['full', 'desk'] = 'full'
    gan: Dict[str, Any] = Field(default_factory=dict)
    detector: Dict[str, Any] = Field(default_factory=dict)
    detector_variants: Dict[str, Dict[str, Any]] = Field(default_factory=dict)

    @field_validator('profiles')
    @classmethod
    def _known_profiles(cls, value):
        if not value:
            raise ValueError("at least one profile is required")
        bad = [p for p in value if not 1 <= p <= N_PROFILES]
        if bad:
            raise ValueError(f"profile ids must lie in 1..{N_PROFILES}, got {bad}")
        if len(set(value)) != len(value):
            raise ValueError(f"duplicate profile ids in {value}")
        return tuple(sorted(value))

    @field_validator('variants')
    @classmethod
    def _ordered_variants(cls, value):
        if not value:
            raise ValueError("at least one variant is required")
        return tuple(v for v in VARIANTS if v in value)

    @field_validator('snr_range_db')
    @classmethod
    def _ordered_range(cls, value):
        if value[0] > value[1]:
            raise ValueError(f"snr_range_db must be (low, high), got {value}")
        return value

    @field_validator('ofdm')
    @classmethod
    def _ofdm(cls, value):
        return _checked_overrides(OfdmParams, value, 'ofdm')

    @field_validator('gan')
    @classmethod
    def _gan(cls, value):
        return _checked_overrides(GanConfig, value, 'gan')

    @field_validator('detector')
    @classmethod
    def _detector(cls, value):
        return _checked_overrides(VariantConfig, value, 'detector')

    @field_validator('detector_variants')
    @classmethod
    def _variant_overrides(cls, value):
        unknown = sorted(set(value) - set(VARIANTS))
        if unknown:
            raise ValueError(f"unknown detector variant(s): {', '.join(unknown)}")
        return {kind: _checked_overrides(VariantConfig, value[kind], f"detector.{kind}")
                for kind in VARIANTS if kind in value}

    # ------------------------------------------------------------------
    # derived stage configs
    # ------------------------------------------------------------------

    def ofdm_params(self) -> OfdmParams:
        return OfdmParams(**self.ofdm)

    def profile(self, profile_id: int) -> DatasetProfile:
        return profile_by_id(profile_id)

    def gan_config(self, profile_id: int) -> GanConfig:
        seed = stage_seed(self.seed, 'gan', profile_id)
        if self.gan_preset == 'desk':
            return GanConfig.desk(**self.gan, seed=seed)
        return GanConfig(**self.gan, seed=seed)

    def variant_config(self, kind: str, profile_id: int) -> VariantConfig:
        overrides = {**self.detector, **self.detector_variants.get(kind, {})}
        seed = stage_seed(self.seed, 'autoencoder', profile_id, VARIANTS.index(kind))
        return VariantConfig.for_variant(kind, **overrides, seed=seed)


def make_run_config(**values) -> RunConfig:
    """RunConfig(**values) with validation failures raised as DomainError"""
    try:
        return RunConfig(**values)
    except ValidationError as e:
        raise DomainError(f"invalid run configuration: {e}") from e


# ============================================================================
# KEY=VALUE FILES
# ============================================================================

def _split_list(value: str):
    return [item.strip() for item in value.split(',') if item.strip()]


def _override_value(value: str):
    """Comma lists become lists; everything else is left for pydantic to coerce"""
    return _split_list(value) if ',' in value else value


def parse_run_config(text: str, path: PathLike = "<config>") -> RunConfig:
    """
    Parse key=value configuration text

    Raises:
        ParseError: malformed line, unknown or duplicate key (with line number)
        DomainError: values rejected by the schemas
    """
    values: Dict[str, Any] = {'ofdm': {}, 'gan': {}, 'detector': {}, 'detector_variants': {}}
    seen = set()

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith('#'):
            continue
        if '=' not in line:
            raise ParseError(path, line_no, f"expected key=value, got '{line}'")
        key, value = (part.strip() for part in line.split('=', 1))
        if key in seen:
            raise ParseError(path, line_no, f"duplicate key '{key}'")
        seen.add(key)

        parts = key.split('.')
        if key == 'profiles':
            try:
                values['profiles'] = ([p.id for p in femtocell_profiles()] if value == 'all'
                                      else [int(v) for v in _split_list(value)])
            except ValueError as e:
                raise ParseError(path, line_no, f"bad profile list '{value}'") from e
        elif key == 'variants':
            values['variants'] = [v.lower() for v in _split_list(value)]
        elif key == 'snr_range_db':
            bounds = _split_list(value)
            if len(bounds) != 2:
                raise ParseError(path, line_no, f"snr_range_db needs 'low,high', got '{value}'")
            values['snr_range_db'] = bounds
        elif key in ('seed', 'train_frac', 'output_dir'):
            values[key] = value
        elif key == 'gan.preset':
            values['gan_preset'] = value
        elif len(parts) == 2 and parts[0] in ('ofdm', 'gan', 'detector'):
            values[parts[0]][parts[1]] = _override_value(value)
        elif len(parts) == 3 and parts[0] == 'detector' and parts[1] in VARIANTS:
            values['detector_variants'].setdefault(parts[1], {})[parts[2]] = _override_value(value)
        else:
            raise ParseError(path, line_no, f"unknown key '{key}'")

    try:
        return RunConfig(**values)
    except ValidationError as e:
        raise DomainError(f"{path}: invalid run configuration: {e}") from e


def load_run_config(path: PathLike) -> RunConfig:
    path = Path(path)
    config = parse_run_config(path.read_text(encoding='utf-8'), path)
    logger.info(f"Loaded run config {path}: profiles {list(config.profiles)}, "
                f"variants {list(config.variants)}, seed {config.seed}")
    return config


def _format_value(value) -> str:
    if isinstance(value, (list, tuple)):
        text = ",".join(_format_value(v) for v in value)
        return text + "," if len(value) == 1 else text
    if isinstance(value, bool):
        return str(value).lower()
    return str(value)


def dump_run_config(config: RunConfig) -> str:
    """key=value text that parses back into an equal RunConfig"""
    lines = [
        f"profiles={_format_value(config.profiles)}",
        f"variants={_format_value(config.variants)}",
        f"seed={config.seed}",
        f"snr_range_db={_format_value(config.snr_range_db)}",
        f"train_frac={config.train_frac!r}",
    ]
    if config.output_dir is not None:
        lines.append(f"output_dir={config.output_dir}")
    if config.gan_preset != 'full':
        lines.append(f"gan.preset={config.gan_preset}")
    for section in ('ofdm', 'gan', 'detector'):
        for key, value in getattr(config, section).items():
            lines.append(f"{section}.{key}={_format_value(value)}")
    for kind, overrides in config.detector_variants.items():
        for key, value in overrides.items():
            lines.append(f"detector.{kind}.{key}={_format_value(value)}")
    return "\n".join(lines) + "\n"
