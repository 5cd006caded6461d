"""
Dataset Store - CSV + Manifest Persistence
==========================================

Saves and loads Dataset objects:
- CSV header f0..f{Q-1},label[,synthetic], reals with 17 significant digits
- Line-numbered ParseError on malformed rows
- key=value manifest (<csv>.manifest) with profile, seed, SNR range, Q,
  normalization flag/statistics and the processing order
"""

import csv
import logging
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from dataset import PROCESSING_ORDER, Dataset, DatasetProfile
from iq_files import read_key_values, write_key_values
from settings import ParseError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def manifest_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest")


def _format_vector(values: Optional[np.ndarray]) -> str:
    if values is None:
        return ""
    return ",".join(f"{v:.17g}" for v in values)


def save_csv(ds: Dataset, path: PathLike) -> Path:
    """
    Write the dataset CSV and its manifest

    A trailing `synthetic` column is written only when some row is synthetic.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with_provenance = bool(np.any(ds.provenance))

    header = [f"f{j}" for j in range(ds.q)] + ['label']
    columns = [ds.features, ds.labels[:, None]]
    fmt = ['%.17g'] * ds.q + ['%d']
    if with_provenance:
        header.append('synthetic')
        columns.append(ds.provenance.astype(np.int64)[:, None])
        fmt.append('%d')

    table = np.hstack([c.astype(np.float64) for c in columns])
    with open(path, 'w', encoding='utf-8', newline='') as f:
        f.write(",".join(header) + "\n")
        np.savetxt(f, table, fmt=fmt, delimiter=',', newline='\n')

    write_manifest(ds, manifest_path(path))
    logger.info(f"Saved {len(ds)} rows (Q={ds.q}) to {path}")
    return path


def write_manifest(ds: Dataset, path: PathLike) -> Path:
    jammed, non_jammed = ds.counts()
    profile = ds.profile
    values: Dict[str, object] = {
        'profile_id': profile.id,
        'profile_name': profile.name,
        'location': profile.location,
        'propagation': profile.propagation,
        'noise_floor_db': f"{profile.noise_floor_db:.17g}",
        'profile_total': profile.total,
        'profile_jammed': profile.jammed,
        'profile_non_jammed': profile.non_jammed,
        'rows': len(ds),
        'jammed': jammed,
        'non_jammed': non_jammed,
        'seed': '' if ds.seed is None else ds.seed,
        'snr_low_db': f"{ds.snr_range_db[0]:.17g}",
        'snr_high_db': f"{ds.snr_range_db[1]:.17g}",
        'q': ds.q,
        'normalized': str(ds.normalized).lower(),
        'processing_order': PROCESSING_ORDER,
        'norm_min': _format_vector(ds.norm_min),
        'norm_max': _format_vector(ds.norm_max),
    }
    return write_key_values(path, values)


def _parse_vector(text: str, path: Path, key: str) -> Optional[np.ndarray]:
    if not text:
        return None
    try:
        return np.array([float(v) for v in text.split(',')])
    except ValueError as e:
        raise ParseError(path, 1, f"bad {key}: {e}") from e


def _read_manifest(path: Path) -> Dict[str, object]:
    raw = read_key_values(path)
    try:
        profile = DatasetProfile(
            id=int(raw['profile_id']),
            name=raw['profile_name'],
            total=int(raw['profile_total']),
            jammed=int(raw['profile_jammed']),
            non_jammed=int(raw['profile_non_jammed']),
            location=raw['location'],
            propagation=raw['propagation'],
            noise_floor_db=float(raw['noise_floor_db']),
        )
        return {
            'profile': profile,
            'seed': int(raw['seed']) if raw.get('seed') else None,
            'snr_range_db': (float(raw['snr_low_db']), float(raw['snr_high_db'])),
            'normalized': raw['normalized'] == 'true',
            'norm_min': _parse_vector(raw.get('norm_min', ''), path, 'norm_min'),
            'norm_max': _parse_vector(raw.get('norm_max', ''), path, 'norm_max'),
        }
    except KeyError as e:
        raise ParseError(path, 1, f"manifest lacks key {e}") from e
    except ValueError as e:
        raise ParseError(path, 1, f"invalid manifest value: {e}") from e


def _parse_flag(text: str, path: Path, line_no: int, column: str) -> int:
    if text not in ('0', '1'):
        raise ParseError(path, line_no, f"{column} must be 0 or 1, got '{text}'")
    return int(text)


def load_csv(path: PathLike) -> Dataset:
    """
    Read a dataset CSV (and its manifest when present)

    Without a manifest the profile is inferred from the row counts.

    Raises:
        ParseError: malformed header or row, naming path and line number
    """
    path = Path(path)
    rows: List[List[float]] = []
    labels: List[int] = []
    synthetic: List[int] = []

    with open(path, 'r', encoding='utf-8', newline='') as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or len(header) < 2:
            raise ParseError(path, 1, "missing header")
        with_provenance = header[-1] == 'synthetic'
        feature_cols = header[:-2] if with_provenance else header[:-1]
        label_col = header[-2] if with_provenance else header[-1]
        if label_col != 'label' or feature_cols != [f"f{j}" for j in range(len(feature_cols))] \
                or not feature_cols:
            raise ParseError(path, 1, "header must read f0..f{Q-1},label[,synthetic]")
        q = len(feature_cols)
        width = len(header)

        for row in reader:
            line_no = reader.line_num
            if len(row) != width:
                raise ParseError(path, line_no, f"expected {width} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row[:q]])
            except ValueError as e:
                raise ParseError(path, line_no, f"non-numeric feature: {e}") from e
            labels.append(_parse_flag(row[q], path, line_no, 'label'))
            if with_provenance:
                synthetic.append(_parse_flag(row[q + 1], path, line_no, 'synthetic'))

    if not rows:
        raise ParseError(path, 2, "no data rows")

    meta_file = manifest_path(path)
    if meta_file.exists():
        meta = _read_manifest(meta_file)
    else:
        jammed = sum(labels)
        try:
            profile = DatasetProfile(id=0, name=path.stem, total=len(labels), jammed=jammed,
                                     non_jammed=len(labels) - jammed)
        except ValueError as e:
            raise ParseError(path, 2, f"cannot infer a profile without a manifest: {e}") from e
        meta = {'profile': profile}

    try:
        return Dataset(features=np.array(rows), labels=np.array(labels),
                       synthetic=np.array(synthetic, dtype=bool) if with_provenance else None,
                       **meta)
    except ValueError as e:
        raise ParseError(path, 2, f"invalid dataset: {e}") from e
