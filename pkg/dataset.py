"""
Dataset - Labeled SSB Feature Sets
==================================

From SSB I/Q blocks to normalized jamming-detection datasets:
- |I/Q| featurization and seeded AWGN jamming
- The twelve non-IID femtocell profiles (counts, locations, propagation)
- Per-dataset min-max normalization and its inverse
- Stratified, seed-deterministic train/test splits
- Two-Gaussian benchmark used to check the oversampler
"""

import logging
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from tqdm import tqdm

from phy_sync import OfdmParams, SyncResult, complex_awgn, extract_ssb, gen_pss, synth_frame
from settings import DomainError, StateError

logger = logging.getLogger(__name__)

SeedLike = Union[int, np.random.Generator]

DEFAULT_SNR_RANGE_DB = (0.0, 15.0)
PROCESSING_ORDER = "inject_awgn>featurize>normalize"

# Receiver noise floor per propagation class (dB above noise)
NOISE_FLOOR_DB = {'LOS': 30.0, 'MIXED': 27.0, 'NLOS': 24.0}


def _rng(seed: SeedLike) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


# ============================================================================
# TYPES
# ============================================================================

class DatasetProfile(BaseModel):
    """One femtocell dataset; id 0 is reserved for custom / benchmark sets"""
    model_config = ConfigDict(frozen=True)

    id: int = Field(ge=0)
    name: str
    total: int
    jammed: int = Field(ge=1)
    non_jammed: int = Field(ge=1)
    location: str = "Outdoor"
    propagation: str = "LOS"
    noise_floor_db: float = NOISE_FLOOR_DB['LOS']

    @model_validator(mode='after')
    def _counts_add_up(self) -> 'DatasetProfile':
        if self.jammed + self.non_jammed != self.total:
            raise ValueError(f"jammed {self.jammed} + non_jammed {self.non_jammed} != total {self.total}")
        return self


class SSBObservation(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    features: np.ndarray
    label: int = Field(ge=0, le=1)
    synthetic: bool = False


class Dataset(BaseModel):
    """
    P x Q feature matrix with binary labels (1 = jammed)

    Arrays are read-only; every transformation returns a new Dataset.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    features: np.ndarray
    labels: np.ndarray
    synthetic: Optional[np.ndarray] = None
    profile: DatasetProfile
    normalized: bool = False
    norm_min: Optional[np.ndarray] = None
    norm_max: Optional[np.ndarray] = None
    seed: Optional[int] = None
    snr_range_db: Tuple[float, float] = DEFAULT_SNR_RANGE_DB

    @field_validator('features', mode='before')
    @classmethod
    def _matrix(cls, value):
        arr = np.array(value, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] < 1:
            raise ValueError(f"features must be a P x Q matrix, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)) or np.any(arr < 0):
            raise ValueError("features must be finite and non-negative")
        arr.setflags(write=False)
        return arr

    @field_validator('labels', mode='before')
    @classmethod
    def _binary(cls, value):
        arr = np.array(value, dtype=np.int64).reshape(-1)
        if np.any((arr != 0) & (arr != 1)):
            raise ValueError("labels must be 0 or 1")
        arr.setflags(write=False)
        return arr

    @field_validator('synthetic', 'norm_min', 'norm_max', mode='before')
    @classmethod
    def _optional_vector(cls, value, info):
        if value is None:
            return None
        arr = np.array(value, dtype=bool if info.field_name == 'synthetic' else np.float64).reshape(-1)
        arr.setflags(write=False)
        return arr

    @model_validator(mode='after')
    def _consistent(self) -> 'Dataset':
        p, q = self.features.shape
        if self.labels.size != p:
            raise ValueError(f"{self.labels.size} labels for {p} rows")
        if self.synthetic is not None and self.synthetic.size != p:
            raise ValueError(f"{self.synthetic.size} provenance flags for {p} rows")
        for name in ('norm_min', 'norm_max'):
            stats = getattr(self, name)
            if stats is not None and stats.size != q:
                raise ValueError(f"{name} has {stats.size} entries for Q={q}")
        if self.normalized and np.any(self.features > 1.0):
            raise ValueError("normalized features must lie in [0, 1]")
        return self

    def __len__(self) -> int:
        return int(self.features.shape[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return np.array_equal(a, b)

        return (same(self.features, other.features) and same(self.labels, other.labels)
                and np.array_equal(self.provenance, other.provenance)
                and same(self.norm_min, other.norm_min) and same(self.norm_max, other.norm_max)
                and self.profile == other.profile and self.normalized == other.normalized
                and self.seed == other.seed and tuple(self.snr_range_db) == tuple(other.snr_range_db))

    @property
    def q(self) -> int:
        return int(self.features.shape[1])

    @property
    def provenance(self) -> np.ndarray:
        """Per-row synthetic flag (all False for purely real data)"""
        return self.synthetic if self.synthetic is not None else np.zeros(len(self), dtype=bool)

    def counts(self) -> Tuple[int, int]:
        """(jammed, non_jammed)"""
        jammed = int(np.sum(self.labels == 1))
        return jammed, len(self) - jammed

    def observation(self, index: int) -> SSBObservation:
        return SSBObservation(features=self.features[index], label=int(self.labels[index]),
                              synthetic=bool(self.provenance[index]))

    def observations(self) -> Iterator[SSBObservation]:
        for i in range(len(self)):
            yield self.observation(i)

    def subset(self, indices: Sequence[int]) -> 'Dataset':
        indices = np.asarray(indices, dtype=np.int64)
        return self.model_copy(update={
            'features': _frozen(self.features[indices]),
            'labels': _frozen(self.labels[indices]),
            'synthetic': None if self.synthetic is None else _frozen(self.synthetic[indices]),
        })

    def with_rows(self, features: np.ndarray, labels: np.ndarray,
                  synthetic: np.ndarray) -> 'Dataset':
        """Same metadata, new rows (validated)"""
        return Dataset(**{**self._metadata(), 'features': features, 'labels': labels,
                          'synthetic': synthetic if np.any(synthetic) else None})

    def _metadata(self) -> dict:
        return {
            'profile': self.profile, 'normalized': self.normalized,
            'norm_min': self.norm_min, 'norm_max': self.norm_max,
            'seed': self.seed, 'snr_range_db': self.snr_range_db,
        }


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr)
    arr.setflags(write=False)
    return arr


# ============================================================================
# FEATURES AND JAMMING
# ============================================================================

def featurize(ssb: Sequence[complex]) -> np.ndarray:
    """Element-wise modulus of an SSB block"""
    arr = np.asarray(ssb, dtype=np.complex128).reshape(-1)
    if arr.size == 0:
        raise DomainError("cannot featurize an empty SSB block")
    return np.abs(arr)


def inject_awgn(obs_complex: Sequence[complex], snr_db: float, seed: SeedLike) -> np.ndarray:
    """
    Add circular complex Gaussian noise at snr_db relative to the block's own power

    Args:
        obs_complex: Complex SSB samples
        snr_db: Target signal-to-noise ratio in dB
        seed: Seed or Generator of the noise stream

    Returns:
        Noisy copy with per-sample noise variance signal_power / 10^(snr_db/10)
    """
    x = np.asarray(obs_complex, dtype=np.complex128).reshape(-1)
    if not np.isfinite(snr_db):
        raise DomainError(f"snr_db must be finite, got {snr_db}")
    power = float(np.mean(np.abs(x) ** 2)) if x.size else 0.0
    if power <= 0.0:
        raise DomainError("cannot set an SNR on a zero-power block")
    return x + complex_awgn(_rng(seed), x.size, noise_power(power, snr_db))


def noise_power(signal_power: float, snr_db: float) -> float:
    return signal_power / 10.0 ** (snr_db / 10.0)


# ============================================================================
# PROFILES
# ============================================================================

# id: (location, propagation, jammed, non_jammed). Totals are derived from the
# class counts; the published totals of ids 3 (971) and 11 (664) disagree with them.
_PROFILES = {
    1: ("Banchory", "Outdoor, NLOS/LOS", 793, 33),
    2: ("Legget", "Outdoor, LOS", 518, 26),
    3: ("Indoor_2", "Indoor, LOS", 933, 32),
    4: ("Indoor_3", "Indoor, NLOS", 998, 40),
    5: ("Indoor_4", "Indoor, NLOS", 839, 38),
    6: ("Indoor_5", "Indoor, NLOS", 945, 44),
    7: ("Neighbor_2", "Outdoor, LOS/NLOS", 771, 34),
    8: ("Neighbor_3", "Outdoor, NLOS", 886, 37),
    9: ("Neighbor_1", "Outdoor, LOS", 719, 30),
    10: ("Park Shirley", "Outdoor, LOS/NLOS", 799, 34),
    11: ("Shirin Market", "Outdoor, LOS", 638, 27),
    12: ("Stop Sign", "Outdoor, LOS", 937, 41),
}


def propagation_class(propagation: str) -> str:
    """'LOS', 'NLOS' or 'MIXED' from a free-text propagation label"""
    text = propagation.upper()
    has_nlos = 'NLOS' in text
    has_los = 'LOS' in text.replace('NLOS', '')
    if has_nlos and has_los:
        return 'MIXED'
    return 'NLOS' if has_nlos else 'LOS'


def femtocell_profiles() -> List[DatasetProfile]:
    """The twelve femtocell datasets with their jammed / non-jammed counts"""
    profiles = []
    for pid, (location, propagation, jammed, non_jammed) in _PROFILES.items():
        profiles.append(DatasetProfile(
            id=pid,
            name=f"dataset_{pid}",
            total=jammed + non_jammed,
            jammed=jammed,
            non_jammed=non_jammed,
            location=location,
            propagation=propagation,
            noise_floor_db=NOISE_FLOOR_DB[propagation_class(propagation)],
        ))
    return profiles


def profile_by_id(profile_id: int) -> DatasetProfile:
    for profile in femtocell_profiles():
        if profile.id == profile_id:
            return profile
    raise DomainError(f"Unknown profile id {profile_id} (known: 1..{len(_PROFILES)})")


def build_profile(profile: DatasetProfile, gen_params: Optional[OfdmParams] = None,
                  snr_range_db: Tuple[float, float] = DEFAULT_SNR_RANGE_DB,
                  seed: int = 0, progress: bool = False) -> Dataset:
    """
    Synthesize one femtocell dataset

    Every observation is a fresh frame's SSB seen through the profile's
    receiver noise floor; `jammed` of them also get AWGN with an SNR drawn
    uniformly from snr_range_db before featurization.

    Args:
        profile: Counts and propagation of the dataset
        gen_params: Frame numerology (Q = ssb_num_symbols * ssb_num_subcarriers)
        snr_range_db: (low, high) jamming SNR range
        seed: Build seed
        progress: Show a tqdm progress bar

    Returns:
        Raw (unnormalized) Dataset, rows in seeded random order
    """
    low, high = map(float, snr_range_db)
    if not (np.isfinite(low) and np.isfinite(high)) or low > high:
        raise DomainError(f"snr_range_db must be an ordered finite pair, got {snr_range_db}")
    params = gen_params or OfdmParams()
    pss = gen_pss(params.nid2)
    rng = np.random.default_rng(seed)

    labels = rng.permutation(np.r_[np.ones(profile.jammed, dtype=np.int64),
                                   np.zeros(profile.non_jammed, dtype=np.int64)])
    payload_seeds = rng.integers(0, 2**63 - 1, size=profile.total)
    noise_seeds = rng.integers(0, 2**63 - 1, size=(profile.total, 2))
    snrs = rng.uniform(low, high, size=profile.total)

    aligned = SyncResult.known(0)
    rows = np.empty((profile.total, params.ssb_len))
    for i in tqdm(range(profile.total), desc=f"build {profile.name}", disable=not progress):
        ssb = extract_ssb(synth_frame(params, pss, int(payload_seeds[i])), aligned, params)
        ssb = inject_awgn(ssb, profile.noise_floor_db, int(noise_seeds[i, 0]))
        if labels[i] == 1:
            ssb = inject_awgn(ssb, snrs[i], int(noise_seeds[i, 1]))
        rows[i] = featurize(ssb)

    logger.info(f"Built {profile.name} ({profile.location}): {profile.jammed} jammed + "
                f"{profile.non_jammed} non-jammed, Q={params.ssb_len}")
    return Dataset(features=rows, labels=labels, profile=profile, seed=seed,
                   snr_range_db=(low, high))


# ============================================================================
# NORMALIZATION AND SPLITS
# ============================================================================

def apply_normalization(ds: Dataset, norm_min: np.ndarray, norm_max: np.ndarray) -> Dataset:
    """Min-max scale with given statistics; constant columns map to 0, results clipped to [0, 1]"""
    if ds.normalized:
        raise StateError(f"dataset {ds.profile.name} is already normalized")
    lo = np.asarray(norm_min, dtype=np.float64)
    hi = np.asarray(norm_max, dtype=np.float64)
    if lo.shape != (ds.q,) or hi.shape != (ds.q,):
        raise DomainError(f"normalization stats do not match Q={ds.q}")
    span = hi - lo
    live = span > 0
    scaled = np.zeros_like(ds.features)
    scaled[:, live] = (ds.features[:, live] - lo[live]) / span[live]
    return ds.model_copy(update={
        'features': _frozen(np.clip(scaled, 0.0, 1.0)),
        'normalized': True,
        'norm_min': _frozen(lo),
        'norm_max': _frozen(hi),
    })


def normalize(ds: Dataset) -> Dataset:
    """Per-feature min-max scaling to [0, 1] with statistics of this dataset"""
    if ds.normalized:
        raise StateError(f"dataset {ds.profile.name} is already normalized")
    return apply_normalization(ds, ds.features.min(axis=0), ds.features.max(axis=0))


def denormalize(ds: Dataset) -> Dataset:
    """Undo normalize with the stored statistics (constant columns come back as their value)"""
    if not ds.normalized or ds.norm_min is None or ds.norm_max is None:
        raise StateError(f"dataset {ds.profile.name} carries no normalization statistics")
    restored = ds.features * (ds.norm_max - ds.norm_min) + ds.norm_min
    return ds.model_copy(update={
        'features': _frozen(restored),
        'normalized': False,
        'norm_min': None,
        'norm_max': None,
    })


def stratified_indices(labels: np.ndarray, holdout_frac: float,
                       seed: SeedLike) -> Tuple[np.ndarray, np.ndarray]:
    """
    (keep, holdout) index arrays, stratified by label

    Each class sends round(n_c * holdout_frac) rows to the holdout but always
    keeps at least one row.
    """
    rng = _rng(seed)
    keep, holdout = [], []
    for label in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == label))
        n_out = int(np.floor(members.size * holdout_frac + 0.5))
        n_out = min(n_out, members.size - 1)
        holdout.append(members[:n_out])
        keep.append(members[n_out:])
    return np.sort(np.concatenate(keep)), np.sort(np.concatenate(holdout))


def split_train_test(ds: Dataset, train_frac: float = 0.8, seed: SeedLike = 0) -> Tuple[Dataset, Dataset]:
    """Stratified split; per-class test count = round(n_c * (1 - train_frac))"""
    if not 0.0 < train_frac < 1.0:
        raise DomainError(f"train_frac must lie in (0, 1), got {train_frac}")
    train_idx, test_idx = stratified_indices(ds.labels, 1.0 - train_frac, seed)
    return ds.subset(train_idx), ds.subset(test_idx)


def two_gaussian_benchmark(n_per_class: int = 256, q: int = 16, seed: int = 0,
                           means: Tuple[float, float] = (0.35, 0.65),
                           sigma: float = 0.025) -> Dataset:
    """
    Normalized two-class Gaussian dataset

    The defaults are the means -0.3 / +0.3 with sigma 0.05 of the [-1, 1]
    generator domain, mapped into [0, 1]. Label 0 sits at the lower mean.
    """
    if n_per_class < 1 or q < 1:
        raise DomainError(f"need n_per_class >= 1 and q >= 1, got {n_per_class}, {q}")
    rng = np.random.default_rng(seed)
    labels = np.r_[np.zeros(n_per_class, dtype=np.int64), np.ones(n_per_class, dtype=np.int64)]
    centres = np.where(labels == 1, means[1], means[0])[:, None]
    features = np.clip(centres + sigma * rng.standard_normal((2 * n_per_class, q)), 0.0, 1.0)
    profile = DatasetProfile(id=0, name="two_gaussian", total=2 * n_per_class,
                             jammed=n_per_class, non_jammed=n_per_class, location="benchmark")
    return Dataset(features=features, labels=labels, profile=profile, normalized=True,
                   norm_min=np.zeros(q), norm_max=np.ones(q), seed=seed, snr_range_db=(0.0, 0.0))
