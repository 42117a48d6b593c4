import json

import numpy as np
import pytest

from geoscene.dataset import (from_model_scale, generate_dataset, load_dataset, read_manifest,
                              to_model_scale)
from geoscene.errors import DataError
from geoscene.scenegen import SAMPLE_FILES


def test_generate_layout_and_manifest(tmp_path):
    m = generate_dataset(tmp_path / "d", seed=3, count=4)
    ids = [s["id"] for s in m["samples"]]
    assert len(ids) == 4
    for sid in ids:
        for f in SAMPLE_FILES:
            assert (tmp_path / "d" / sid / f).is_file()
    on_disk = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert on_disk == m
    assert m["hash"] == "sha256" and m["config"]["patch"] == 8


def test_same_seed_same_hashes(tmp_path):
    a = generate_dataset(tmp_path / "a", seed=9, count=3)
    b = generate_dataset(tmp_path / "b", seed=9, count=3)
    c = generate_dataset(tmp_path / "c", seed=10, count=3)
    assert a["samples"] == b["samples"]
    assert a["samples"] != c["samples"]


def test_parallel_generation_matches_serial(tmp_path):
    a = generate_dataset(tmp_path / "a", seed=2, count=4, workers=1)
    b = generate_dataset(tmp_path / "b", seed=2, count=4, workers=2)
    assert a == b


def test_non_empty_directory_needs_force(tmp_path):
    generate_dataset(tmp_path, seed=0, count=1)
    with pytest.raises(DataError, match="not empty"):
        generate_dataset(tmp_path, seed=0, count=1)
    generate_dataset(tmp_path, seed=0, count=1, force=True)


def test_manifest_detects_tampering(tmp_path):
    generate_dataset(tmp_path, seed=0, count=2)
    read_manifest(tmp_path)
    target = tmp_path / "000001" / "mask0.gamk"
    target.write_bytes(target.read_bytes()[:-1] + b"\x01")
    with pytest.raises(DataError, match="hash mismatch"):
        read_manifest(tmp_path)
    (tmp_path / "000000" / "matches.jsonl").unlink()
    with pytest.raises(DataError, match="lacks matches.jsonl"):
        read_manifest(tmp_path, verify=False)


def test_manifest_round_trip_bit_exact(tmp_path):
    m = generate_dataset(tmp_path, seed=5, count=2)
    raw = (tmp_path / "manifest.json").read_bytes()
    assert read_manifest(tmp_path) == m
    assert (tmp_path / "manifest.json").read_bytes() == raw


def test_load_dataset_arrays(tmp_path):
    generate_dataset(tmp_path, seed=1, count=3)
    ds = load_dataset(tmp_path)
    assert len(ds) == 3
    assert ds.targets.shape == (3, 64, 64, 3) and ds.targets.dtype == np.float32
    assert ds.masks0.shape == (3, 8, 8)
    assert ds.targets.min() >= -1 and ds.targets.max() <= 1
    s = ds.sample(2)
    np.testing.assert_array_equal(ds.conditions[2], s.condition_tokens)


def test_model_scale_round_trip():
    u = np.arange(256, dtype=np.uint8)
    np.testing.assert_array_equal(from_model_scale(to_model_scale(u)), u)
    assert from_model_scale(np.array([-3.0, 3.0])).tolist() == [0, 255]
