"""
PHY Sync - CP-OFDM Frames, PSS and Timing/CFO Recovery
======================================================

Synthetic 5G-NR style downlink captures and the receiver chain that
recovers aligned SSB blocks from them:
- PSS m-sequence generation (3GPP-style, cyclic shift 43*NID2)
- Resource grid / CP-OFDM frame synthesis with an SSB
- Repeated-half timing preamble and full capture synthesis (offset, CFO, AWGN)
- Schmidl & Cox timing metric, blind grid-search CFO estimation on the PSS
  alone or on the preamble and PSS together
- SSB extraction and a presentation-only spectrogram
"""

import logging
from typing import Literal, NamedTuple, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy import signal

from settings import DomainError

logger = logging.getLogger(__name__)

PSS_LENGTH = 127
DEFAULT_SAMPLE_RATE_HZ = 15.36e6


def default_cfo_grid(span_hz: float = 3000.0, step_hz: float = 100.0) -> np.ndarray:
    """Symmetric CFO search grid -span..+span (default +-3 kHz, 100 Hz step)"""
    if span_hz < 0 or step_hz <= 0:
        raise DomainError(f"invalid CFO grid span={span_hz} step={step_hz}")
    n = int(round(span_hz / step_hz))
    return np.arange(-n, n + 1) * step_hz


# ============================================================================
# TYPES
# ============================================================================

class IQBuffer(BaseModel):
    """Complex baseband sample stream y(t) sampled at sample_rate_hz"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    samples: np.ndarray
    sample_rate_hz: float = Field(default=DEFAULT_SAMPLE_RATE_HZ, gt=0)

    @field_validator('samples', mode='before')
    @classmethod
    def _complex_vector(cls, value):
        arr = np.array(value, dtype=np.complex128).reshape(-1)
        if arr.size < 1:
            raise ValueError("IQBuffer needs at least one sample")
        if not np.all(np.isfinite(arr)):
            raise ValueError("IQBuffer samples must be finite")
        arr.setflags(write=False)
        return arr

    def __len__(self) -> int:
        return int(self.samples.size)

    @property
    def power(self) -> float:
        return float(np.mean(np.abs(self.samples) ** 2))


class OfdmParams(BaseModel):
    """CP-OFDM numerology and SSB placement"""
    model_config = ConfigDict(frozen=True)

    fft_size: int = Field(default=1024, gt=0)
    cp_len: int = Field(default=72, gt=0)
    num_symbols: int = Field(default=14, gt=0)
    ssb_symbol_index: int = Field(default=2, ge=0)
    ssb_num_symbols: int = Field(default=4, gt=0)
    ssb_num_subcarriers: int = Field(default=240, gt=0)
    sample_rate_hz: float = Field(default=DEFAULT_SAMPLE_RATE_HZ, gt=0)
    center_freq_hz: float = 632e6
    nid2: int = Field(default=0, ge=0, le=2)

    @model_validator(mode='after')
    def _check_layout(self) -> 'OfdmParams':
        if self.cp_len >= self.fft_size:
            raise ValueError(f"cp_len {self.cp_len} must be smaller than fft_size {self.fft_size}")
        if self.fft_size % 2:
            raise ValueError(f"fft_size {self.fft_size} must be even (repeated-half preamble)")
        if self.ssb_symbol_index + self.ssb_num_symbols > self.num_symbols:
            raise ValueError("SSB does not fit in the frame "
                             f"({self.ssb_symbol_index}+{self.ssb_num_symbols} > {self.num_symbols})")
        if self.ssb_num_subcarriers > self.fft_size:
            raise ValueError(f"ssb_num_subcarriers {self.ssb_num_subcarriers} exceeds fft_size {self.fft_size}")
        if self.ssb_num_subcarriers < PSS_LENGTH:
            raise ValueError(f"ssb_num_subcarriers {self.ssb_num_subcarriers} cannot hold the {PSS_LENGTH}-chip PSS")
        return self

    @property
    def symbol_len(self) -> int:
        return self.fft_size + self.cp_len

    @property
    def frame_len(self) -> int:
        return self.num_symbols * self.symbol_len

    @property
    def half_len(self) -> int:
        return self.fft_size // 2

    @property
    def ssb_len(self) -> int:
        """Q, the number of SSB resource elements"""
        return self.ssb_num_symbols * self.ssb_num_subcarriers

    def band_bins(self) -> np.ndarray:
        """FFT bins of the centred SSB band, lowest subcarrier first"""
        k = np.arange(self.ssb_num_subcarriers)
        return (k - self.ssb_num_subcarriers // 2) % self.fft_size

    def pss_bins(self) -> np.ndarray:
        start = (self.ssb_num_subcarriers - PSS_LENGTH) // 2
        return self.band_bins()[start:start + PSS_LENGTH]


class PssSequence(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    nid2: int = Field(ge=0, le=2)
    chips: np.ndarray

    @field_validator('chips', mode='before')
    @classmethod
    def _bpsk(cls, value):
        arr = np.array(value, dtype=np.float64).reshape(-1)
        if arr.size != PSS_LENGTH:
            raise ValueError(f"PSS must have {PSS_LENGTH} chips, got {arr.size}")
        if not np.all(np.abs(arr) == 1.0):
            raise ValueError("PSS chips must be +1 or -1")
        arr.setflags(write=False)
        return arr


class SyncResult(BaseModel):
    """
    Receiver synchronization outcome

    t_off is the start of the repeated-half preamble (argmax of M(t)); the
    frame itself starts preamble_len samples later. cfo_grid is None on a
    timing-only result.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    t_off: int = Field(ge=0)
    cfo_hz: float = 0.0
    metric_curve: np.ndarray = Field(default_factory=lambda: np.zeros(0))
    p_curve: np.ndarray = Field(default_factory=lambda: np.zeros(0))
    r_curve: np.ndarray = Field(default_factory=lambda: np.zeros(0))
    cfo_grid: Optional[np.ndarray] = None
    half_len: int = 0
    preamble_len: int = Field(default=0, ge=0)

    @model_validator(mode='after')
    def _cfo_on_grid(self) -> 'SyncResult':
        if self.cfo_grid is not None and not np.any(self.cfo_grid == self.cfo_hz):
            raise ValueError(f"cfo_hz {self.cfo_hz} is not a member of the CFO grid")
        return self

    @classmethod
    def known(cls, t_off: int, cfo_hz: float = 0.0, preamble_len: int = 0) -> 'SyncResult':
        """Synchronization from ground truth (no metric curve)"""
        return cls(t_off=t_off, cfo_hz=cfo_hz, cfo_grid=np.array([cfo_hz]), preamble_len=preamble_len)

    @property
    def frame_start(self) -> int:
        return self.t_off + self.preamble_len


class Spectrogram(NamedTuple):
    freqs: np.ndarray
    times: np.ndarray
    power: np.ndarray


# ============================================================================
# PSS AND FRAME SYNTHESIS
# ============================================================================

def gen_pss(nid2: int) -> PssSequence:
    """
    Length-127 BPSK m-sequence (x^7 + x^4 + 1, init 1110110)

    Args:
        nid2: Cell ID within the group, 0..2 (cyclic shift 43*nid2)
    """
    if nid2 not in (0, 1, 2):
        raise DomainError(f"nid2 must be 0, 1 or 2, got {nid2}")

    x = np.zeros(PSS_LENGTH, dtype=np.int64)
    x[:7] = [0, 1, 1, 0, 1, 1, 1]
    for i in range(PSS_LENGTH - 7):
        x[i + 7] = (x[i + 4] + x[i]) % 2
    n = np.arange(PSS_LENGTH)
    chips = 1 - 2 * x[(n + 43 * nid2) % PSS_LENGTH]
    return PssSequence(nid2=nid2, chips=chips)


def _qpsk(rng: np.random.Generator, n: int) -> np.ndarray:
    bits = rng.integers(0, 2, size=(n, 2))
    return ((1 - 2 * bits[:, 0]) + 1j * (1 - 2 * bits[:, 1])) / np.sqrt(2.0)


def _modulate(grid: np.ndarray, params: OfdmParams) -> np.ndarray:
    """IFFT every symbol row and prepend its cyclic prefix"""
    body = np.fft.ifft(grid, axis=1, norm='ortho')
    with_cp = np.concatenate([body[:, -params.cp_len:], body], axis=1)
    return with_cp.reshape(-1)


def resource_grid(params: OfdmParams, pss: PssSequence, payload_seed: int) -> np.ndarray:
    """
    Frequency-domain grid (num_symbols, fft_size) behind synth_frame

    The first SSB symbol carries the PSS on the central 127 subcarriers of
    the band with the remaining band subcarriers left empty; every other
    symbol loads the band with seeded QPSK. The grid is scaled so the
    modulated frame has unit mean power.
    """
    rng = np.random.default_rng(payload_seed)
    grid = np.zeros((params.num_symbols, params.fft_size), dtype=np.complex128)
    band = params.band_bins()
    for s in range(params.num_symbols):
        if s == params.ssb_symbol_index:
            grid[s, params.pss_bins()] = pss.chips
        else:
            grid[s, band] = _qpsk(rng, band.size)

    frame = _modulate(grid, params)
    return grid / np.sqrt(np.mean(np.abs(frame) ** 2))


def ssb_grid(grid: np.ndarray, params: OfdmParams) -> np.ndarray:
    """SSB resource elements of a grid, symbol-major"""
    rows = grid[params.ssb_symbol_index:params.ssb_symbol_index + params.ssb_num_symbols]
    return rows[:, params.band_bins()].reshape(-1)


def synth_frame(params: OfdmParams, pss: PssSequence, payload_seed: int) -> IQBuffer:
    """One CP-OFDM frame (num_symbols * (fft_size + cp_len) samples) with unit mean power"""
    grid = resource_grid(params, pss, payload_seed)
    return IQBuffer(samples=_modulate(grid, params), sample_rate_hz=params.sample_rate_hz)


def synth_preamble(params: OfdmParams, root: int = 25, boost_db: float = 3.0) -> IQBuffer:
    """
    Schmidl & Cox training block: two identical Zadoff-Chu halves of
    fft_size/2 samples followed by a cp_len zero guard

    The halves are constant-modulus and sent boost_db above the unit frame
    power, the way NR boosts its synchronization signals.
    """
    half = params.half_len
    n = np.arange(half)
    if half % 2:
        zc = np.exp(-1j * np.pi * root * n * (n + 1) / half)
    else:
        zc = np.exp(-1j * np.pi * root * n * n / half)
    amplitude = 10.0 ** (boost_db / 20.0)
    samples = np.concatenate([zc, zc, np.zeros(params.cp_len)]) * amplitude
    return IQBuffer(samples=samples, sample_rate_hz=params.sample_rate_hz)


def preamble_len(params: OfdmParams) -> int:
    return params.fft_size + params.cp_len


def complex_awgn(rng: np.random.Generator, n: int, noise_power: float) -> np.ndarray:
    """Circular complex Gaussian noise with E|w|^2 = noise_power"""
    scale = np.sqrt(noise_power / 2.0)
    return scale * (rng.standard_normal(n) + 1j * rng.standard_normal(n))


def synth_capture(params: OfdmParams, pss: PssSequence, payload_seed: int, offset: int = 0,
                  snr_db: Optional[float] = None, cfo_hz: float = 0.0,
                  noise_seed: int = 0) -> IQBuffer:
    """
    Receiver capture: `offset` idle samples, the timing preamble, one frame

    Args:
        offset: Preamble start (sample index of the ground-truth t_off)
        snr_db: AWGN level relative to the unit frame power; None = clean
        cfo_hz: Carrier offset applied to the whole capture
        noise_seed: Seed of the AWGN stream
    """
    if offset < 0:
        raise DomainError(f"offset must be >= 0, got {offset}")
    frame = synth_frame(params, pss, payload_seed)
    preamble = synth_preamble(params)
    samples = np.concatenate([np.zeros(offset), preamble.samples, frame.samples])

    samples = samples * np.exp(2j * np.pi * cfo_hz * np.arange(samples.size) / params.sample_rate_hz)
    if snr_db is not None:
        rng = np.random.default_rng(noise_seed)
        samples = samples + complex_awgn(rng, samples.size, 10.0 ** (-snr_db / 10.0))
    return IQBuffer(samples=samples, sample_rate_hz=params.sample_rate_hz)


# ============================================================================
# RECEIVER
# ============================================================================

def apply_cfo(buf: IQBuffer, cfo_hz: float) -> IQBuffer:
    """Multiply sample n by exp(j*2*pi*cfo_hz*n/fs)"""
    if not np.isfinite(cfo_hz):
        raise DomainError(f"cfo_hz must be finite, got {cfo_hz}")
    if cfo_hz == 0:
        return buf
    n = np.arange(len(buf))
    rotated = buf.samples * np.exp(2j * np.pi * cfo_hz * n / buf.sample_rate_hz)
    return IQBuffer(samples=rotated, sample_rate_hz=buf.sample_rate_hz)


def pss_replica(params: OfdmParams, pss: PssSequence) -> np.ndarray:
    """Time-domain PSS symbol (no CP), the matched filter of estimate_cfo"""
    grid = np.zeros(params.fft_size, dtype=np.complex128)
    grid[params.pss_bins()] = pss.chips
    return np.fft.ifft(grid, norm='ortho')


def capture_replica(params: OfdmParams, pss: PssSequence) -> np.ndarray:
    """
    Known content of a synth_capture from the preamble start onwards: the
    timing preamble, zeros over the unknown payload, then the PSS symbol

    The PSS is scaled by the frame normalization so both pilots keep their
    transmitted weights.
    """
    gap = params.ssb_symbol_index * params.symbol_len + params.cp_len
    grid = resource_grid(params, pss, payload_seed=0)
    gain = float(np.abs(grid[params.ssb_symbol_index, params.pss_bins()[0]]))
    return np.concatenate([synth_preamble(params).samples, np.zeros(gap),
                           gain * pss_replica(params, pss)])


CfoReference = Literal['pss', 'capture']


def estimate_cfo(buf: IQBuffer, pss: PssSequence, grid: Sequence[float],
                 params: Optional[OfdmParams] = None, reference: CfoReference = 'pss') -> float:
    """
    Blind CFO search: derotate by each candidate and correlate with a known
    replica over every lag, keeping the candidate with the largest peak

    Ties go to the candidate with the smallest absolute frequency.

    Args:
        buf: Capture to search
        pss: PSS the cell transmits
        grid: Candidate offsets in Hz
        params: Numerology (default: OfdmParams at the buffer's rate)
        reference: 'pss' correlates the PSS symbol alone and works on a bare
            frame. 'capture' correlates the preamble and the PSS together;
            the longer span resolves 100 Hz steps at 10 dB where the PSS
            symbol alone cannot.
    """
    grid = np.asarray(grid, dtype=np.float64).reshape(-1)
    if grid.size == 0:
        raise DomainError("CFO grid is empty")
    params = params or OfdmParams(sample_rate_hz=buf.sample_rate_hz)
    if reference == 'pss':
        replica = pss_replica(params, pss)
    elif reference == 'capture':
        replica = capture_replica(params, pss)
    else:
        raise DomainError(f"unknown CFO reference '{reference}' (known: pss, capture)")
    if len(buf) < replica.size:
        raise DomainError(f"buffer of {len(buf)} samples is shorter than the "
                          f"{replica.size}-sample {reference} replica")

    n = np.arange(len(buf))
    order = sorted(range(grid.size), key=lambda i: (abs(grid[i]), grid[i]))
    best, best_score = None, -np.inf
    for i in order:
        derotated = buf.samples * np.exp(-2j * np.pi * grid[i] * n / buf.sample_rate_hz)
        corr = signal.correlate(derotated, replica, mode='valid', method='fft')
        score = float(np.max(np.abs(corr)))
        if best is None or score > best_score * (1.0 + 1e-12):
            best, best_score = i, score
        logger.debug(f"CFO candidate {grid[i]:+.1f} Hz: peak {score:.6g}")
    return float(grid[best])


def _window_sum(x: np.ndarray, length: int) -> np.ndarray:
    return np.convolve(x, np.ones(length), mode='valid')


def schmidl_cox(buf: IQBuffer, half_len: int,
                normalization: Literal['geometric', 'second_half'] = 'geometric') -> SyncResult:
    """
    Schmidl & Cox timing metric M(t) = |P(t)|^2 / R(t)^2

    P(t) correlates the two half windows of length half_len starting at t.
    With the default "geometric" normalization R(t) = sqrt(E1(t) E2(t)), the
    geometric mean of both half energies, so M(t) <= 1 on every buffer;
    "second_half" uses R(t) = E2(t), the second half energy alone.
    Windows with R(t) = 0 get M(t) = 0.

    Args:
        buf: Capture to scan
        half_len: Half preamble length L
        normalization: Energy term used for R(t)

    Returns:
        SyncResult with t_off = argmax M(t) and the M, |P| and R curves
    """
    if half_len < 1:
        raise DomainError(f"half_len must be >= 1, got {half_len}")
    if len(buf) < 2 * half_len + 1:
        raise DomainError(f"buffer of {len(buf)} samples too short for half_len {half_len} "
                          f"(need {2 * half_len + 1})")
    if normalization not in ('geometric', 'second_half'):
        raise DomainError(f"unknown normalization '{normalization}'")

    y = buf.samples
    span = len(y) - 2 * half_len + 1
    p = _window_sum(np.conj(y[:-half_len]) * y[half_len:], half_len)[:span]
    energy = _window_sum(np.abs(y) ** 2, half_len)
    e1, e2 = energy[:span], energy[half_len:half_len + span]
    r = np.sqrt(e1 * e2) if normalization == 'geometric' else e2

    metric = np.zeros(span)
    live = r > 0
    metric[live] = np.abs(p[live]) ** 2 / r[live] ** 2
    t_off = int(np.argmax(metric))
    logger.debug(f"Schmidl-Cox peak M={metric[t_off]:.4f} at t={t_off}")
    return SyncResult(t_off=t_off, metric_curve=metric, p_curve=np.abs(p), r_curve=r,
                      half_len=half_len)


def synchronize(buf: IQBuffer, params: OfdmParams, pss: PssSequence,
                grid: Optional[Sequence[float]] = None,
                reference: CfoReference = 'capture') -> SyncResult:
    """Timing on the repeated-half preamble, then blind CFO search on the known pilots"""
    grid = default_cfo_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    timing = schmidl_cox(buf, params.half_len)
    cfo = estimate_cfo(buf, pss, grid, params, reference)
    logger.info(f"Synchronized: t_off={timing.t_off} M={timing.metric_curve[timing.t_off]:.3f} "
                f"cfo={cfo:+.1f} Hz")
    return timing.model_copy(update={
        'cfo_hz': cfo,
        'cfo_grid': grid,
        'preamble_len': preamble_len(params),
    })


def extract_ssb(buf: IQBuffer, sync: SyncResult, params: OfdmParams) -> np.ndarray:
    """
    Remove CP, FFT every SSB symbol and gather the SSB subcarriers

    The buffer is derotated by sync.cfo_hz first. The frame starts at
    sync.t_off + sync.preamble_len.

    Returns:
        Complex vector of ssb_num_symbols * ssb_num_subcarriers values, symbol-major
    """
    start = sync.frame_start + params.ssb_symbol_index * params.symbol_len
    stop = start + params.ssb_num_symbols * params.symbol_len
    if sync.t_off >= len(buf) or stop > len(buf):
        raise DomainError(f"SSB span [{start}, {stop}) runs past the {len(buf)}-sample buffer")

    if sync.cfo_hz:
        buf = apply_cfo(buf, -sync.cfo_hz)
    symbols = buf.samples[start:stop].reshape(params.ssb_num_symbols, params.symbol_len)
    spectra = np.fft.fft(symbols[:, params.cp_len:], axis=1, norm='ortho')
    return spectra[:, params.band_bins()].reshape(-1)


def spectrogram(buf: IQBuffer, nperseg: int = 256) -> Spectrogram:
    """Two-sided power spectrogram with DC centred (display only)"""
    if nperseg < 1 or nperseg > len(buf):
        raise DomainError(f"nperseg {nperseg} outside 1..{len(buf)}")
    freqs, times, power = signal.spectrogram(buf.samples, fs=buf.sample_rate_hz, nperseg=nperseg,
                                             return_onesided=False, mode='psd')
    return Spectrogram(np.fft.fftshift(freqs), times, np.fft.fftshift(power, axes=0))
