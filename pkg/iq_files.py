"""
IQ Files - I/Q Capture CSV Codec
================================

Persistence for phy_sync buffers:
- `i,q` CSV, one complex sample per row, 17 significant digits
- key=value sidecar (<csv>.meta) with sample_rate_hz, fft_size, cp_len
- M(t) curve CSV emitted by the `sync` subcommand
"""

import csv
import logging
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import pandas as pd

from phy_sync import IQBuffer, OfdmParams, SyncResult
from settings import DomainError, ParseError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# Numeric sidecar keys and their types
SIDECAR_FIELDS = {'sample_rate_hz': float, 'fft_size': int, 'cp_len': int}


def sidecar_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta")


def write_key_values(path: PathLike, values: Dict[str, object]) -> Path:
    path = Path(path)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for key, value in values.items():
            f.write(f"{key}={value}\n")
    return path


def read_key_values(path: PathLike) -> Dict[str, str]:
    """Parse a key=value file; blank lines and # comments are skipped"""
    return {key: value for key, (value, _) in read_key_value_lines(path).items()}


def read_key_value_lines(path: PathLike) -> Dict[str, Tuple[str, int]]:
    """key -> (value, line number) of a key=value file"""
    values: Dict[str, Tuple[str, int]] = {}
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith('#'):
                continue
            if '=' not in line:
                raise ParseError(path, line_no, f"expected key=value, got '{line}'")
            key, value = line.split('=', 1)
            key = key.strip()
            if not key:
                raise ParseError(path, line_no, "empty key")
            if key in values:
                raise ParseError(path, line_no, f"duplicate key '{key}'")
            values[key] = (value.strip(), line_no)
    return values


def write_iq_csv(path: PathLike, buf: IQBuffer, params: Optional[OfdmParams] = None) -> Path:
    """
    Write samples as `i,q` rows plus the sidecar metadata

    Args:
        path: CSV destination
        buf: Samples to write
        params: Numerology recorded in the sidecar (fft_size, cp_len)
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['i', 'q'])
        for s in buf.samples:
            writer.writerow([f"{s.real:.17g}", f"{s.imag:.17g}"])

    meta = {'sample_rate_hz': f"{buf.sample_rate_hz:.17g}"}
    if params is not None:
        meta['fft_size'] = params.fft_size
        meta['cp_len'] = params.cp_len
    write_key_values(sidecar_path(path), meta)
    logger.info(f"Wrote {len(buf)} I/Q samples to {path}")
    return path


def _read_sidecar(path: Path) -> Dict[str, str]:
    entries = read_key_value_lines(path)
    for key, cast in SIDECAR_FIELDS.items():
        if key not in entries:
            continue
        value, line_no = entries[key]
        try:
            cast(value)
        except ValueError as e:
            raise ParseError(path, line_no, f"{key} must be {cast.__name__}, got '{value}'") from e
    return {key: value for key, (value, _) in entries.items()}


def read_iq_csv(path: PathLike) -> Tuple[IQBuffer, Dict[str, str]]:
    """
    Read an `i,q` CSV and its sidecar (when present)

    Returns:
        (buffer, sidecar key/values)
    """
    path = Path(path)
    meta_file = sidecar_path(path)
    meta = _read_sidecar(meta_file) if meta_file.exists() else {}

    values = []
    with open(path, 'r', encoding='utf-8', newline='') as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ['i', 'q']:
            raise ParseError(path, 1, f"expected header 'i,q', got {header}")
        for row in reader:
            line_no = reader.line_num
            if len(row) != 2:
                raise ParseError(path, line_no, f"expected 2 fields, got {len(row)}")
            try:
                values.append(complex(float(row[0]), float(row[1])))
            except ValueError as e:
                raise ParseError(path, line_no, f"non-numeric sample: {e}") from e
    if not values:
        raise ParseError(path, 2, "no samples")

    rate = float(meta.get('sample_rate_hz', IQBuffer.model_fields['sample_rate_hz'].default))
    return IQBuffer(samples=np.array(values), sample_rate_hz=rate), meta


def params_from_meta(meta: Dict[str, str], base: Optional[OfdmParams] = None) -> OfdmParams:
    """OfdmParams updated with whatever numerology the sidecar carries"""
    base = base or OfdmParams()
    update = {}
    for key in ('fft_size', 'cp_len'):
        if key in meta:
            try:
                update[key] = int(meta[key])
            except ValueError as e:
                raise DomainError(f"sidecar {key} '{meta[key]}' is not an integer") from e
    if 'sample_rate_hz' in meta:
        try:
            update['sample_rate_hz'] = float(meta['sample_rate_hz'])
        except ValueError as e:
            raise DomainError(f"sidecar sample_rate_hz '{meta['sample_rate_hz']}' is not a number") from e
    return OfdmParams(**{**base.model_dump(), **update})


def write_metric_curve(path: PathLike, sync: SyncResult) -> Path:
    """t, M(t), |P(t)|, R(t) per row"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame({
        't': np.arange(sync.metric_curve.size),
        'metric': sync.metric_curve,
        'p_abs': sync.p_curve,
        'r': sync.r_curve,
    })
    frame.to_csv(path, index=False, float_format='%.17g', lineterminator='\n')
    return path
