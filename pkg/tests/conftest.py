"""Shared fixtures: a small OFDM grid and finite-difference helpers"""

import logging

import numpy as np
import pytest

from phy_sync import OfdmParams

logging.basicConfig(level=logging.INFO)

# 256-point grid, one SSB symbol of 160 subcarriers: Q = 160 features
SMALL_OFDM = dict(fft_size=256, cp_len=18, num_symbols=4, ssb_symbol_index=1,
                  ssb_num_symbols=1, ssb_num_subcarriers=160)


@pytest.fixture
def small_params() -> OfdmParams:
    return OfdmParams(**SMALL_OFDM)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def numeric_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar f at x (x is perturbed in place and restored)"""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=['multi_index'])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        up = f()
        x[idx] = orig - h
        down = f()
        x[idx] = orig
        g[idx] = (up - down) / (2 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


@pytest.fixture
def small_ofdm() -> dict:
    """SMALL_OFDM as run-config overrides"""
    return dict(SMALL_OFDM)
