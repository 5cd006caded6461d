"""Tests for dataset CSV + manifest persistence"""

import numpy as np
import pytest

from dataset import Dataset, DatasetProfile, normalize, two_gaussian_benchmark
from dataset_store import load_csv, manifest_path, save_csv
from iq_files import read_key_values
from settings import ParseError


def _raw(seed=0) -> Dataset:
    rng = np.random.default_rng(seed)
    profile = DatasetProfile(id=5, name="dataset_5", total=6, jammed=4, non_jammed=2,
                             location="Indoor_4", propagation="Indoor, NLOS", noise_floor_db=24.0)
    return Dataset(features=rng.gamma(2.0, 0.3, size=(6, 5)), labels=[1, 0, 1, 1, 0, 1],
                   profile=profile, seed=seed, snr_range_db=(5.0, 15.0))


def test_raw_dataset_round_trip(tmp_path):
    ds = _raw()
    path = save_csv(ds, tmp_path / "ds.csv")
    assert load_csv(path) == ds
    header = path.read_text().splitlines()[0]
    assert header == "f0,f1,f2,f3,f4,label"


def test_normalized_dataset_round_trip(tmp_path):
    ds = normalize(_raw(1))
    back = load_csv(save_csv(ds, tmp_path / "norm.csv"))
    assert back == ds
    assert back.normalized
    np.testing.assert_array_equal(back.norm_max, ds.norm_max)


def test_synthetic_column_only_when_needed(tmp_path):
    ds = two_gaussian_benchmark(4, 3, seed=0)
    grown = ds.with_rows(np.vstack([ds.features, ds.features[:2]]), np.r_[ds.labels, 0, 0],
                         np.r_[np.zeros(len(ds), dtype=bool), True, True])
    path = save_csv(grown, tmp_path / "aug.csv")
    assert path.read_text().splitlines()[0].endswith(",label,synthetic")
    back = load_csv(path)
    assert back == grown
    assert int(back.provenance.sum()) == 2


def test_manifest_contents(tmp_path):
    path = save_csv(_raw(), tmp_path / "ds.csv")
    meta = read_key_values(manifest_path(path))
    assert meta['profile_id'] == '5'
    assert meta['q'] == '5'
    assert meta['jammed'] == '4' and meta['non_jammed'] == '2'
    assert meta['normalized'] == 'false'
    assert meta['processing_order'] == "inject_awgn>featurize>normalize"


def test_load_without_manifest_infers_profile(tmp_path):
    path = tmp_path / "bare.csv"
    path.write_text("f0,f1,label\n0.5,1,1\n0.25,2,0\n0.75,3,1\n")
    ds = load_csv(path)
    assert ds.profile.id == 0
    assert ds.counts() == (2, 1)
    assert ds.q == 2


@pytest.mark.parametrize("body,line", [
    ("a,b,label\n1,2,1\n", 1),
    ("f0,f1,label\n1,2,1\n1,2\n", 3),
    ("f0,f1,label\n1,x,1\n", 2),
    ("f0,f1,label\n1,2,1\n1,2,2\n", 3),
    ("f0,label,synthetic\n1,1,1\n1,0,5\n", 3),
    ("f0,label\n", 2),
])
def test_malformed_rows_name_the_line(tmp_path, body, line):
    path = tmp_path / "bad.csv"
    path.write_text(body)
    with pytest.raises(ParseError) as info:
        load_csv(path)
    assert info.value.line == line
    assert str(path) in str(info.value)
