"""On-disk datasets of generated pairs.

Layout::

    <root>/manifest.json
    <root>/<sample_id>/{target.png, reference.png, condition.json,
                        matches.jsonl, mask0.gamk, mask1.gamk, scene.json}

``manifest.json`` echoes the generation config and lists every sample with
its seed and the SHA-256 of each of its files.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .scenegen import SAMPLE_FILES, PairConfig, make_pair, read_sample, write_sample

MANIFEST = "manifest.json"
HASH_NAME = "sha256"

__all__ = ["generate_dataset", "load_dataset", "read_manifest", "sample_seed",
           "ArrayDataset", "to_model_scale", "from_model_scale"]


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _generate_one(args):
    root, sample_id, seed, config = args
    write_sample(Path(root) / sample_id, make_pair(seed, config))
    return sample_id


def generate_dataset(root, seed: int, count: int, config: PairConfig | None = None,
                     force: bool = False, workers: int = 1) -> dict:
    """Write ``count`` samples under ``root`` and return the manifest."""
    config = config or PairConfig()
    config.validate()
    root = Path(root)
    if root.exists() and any(root.iterdir()) and not force:
        raise DataError(f"{root} exists and is not empty (use force to overwrite)")
    root.mkdir(parents=True, exist_ok=True)
    jobs = [(str(root), f"{i:06d}", sample_seed(seed, i), config) for i in range(count)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_generate_one, jobs))
    else:
        for job in jobs:
            _generate_one(job)
    samples = []
    for _, sid, s, _ in jobs:
        files = {name: _sha256(root / sid / name) for name in SAMPLE_FILES}
        samples.append({"id": sid, "seed": s, "files": files})
    manifest = {
        "format": "geoscene-dataset",
        "version": 1,
        "seed": int(seed),
        "count": int(count),
        "hash": HASH_NAME,
        "config": asdict(config),
        "samples": samples,
    }
    text = json.dumps(manifest, indent=1, sort_keys=True) + "\n"
    (root / MANIFEST).write_text(text, encoding="utf-8")
    return json.loads(text)


def read_manifest(root, verify: bool = True) -> dict:
    root = Path(root)
    path = root / MANIFEST
    if not path.is_file():
        raise DataError(f"{root}: no {MANIFEST}")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: {exc}") from None
    if manifest.get("format") != "geoscene-dataset":
        raise DataError(f"{path}: not a geoscene dataset manifest")
    for entry in manifest["samples"]:
        d = root / entry["id"]
        for name, digest in entry["files"].items():
            f = d / name
            if not f.is_file():
                raise DataError(f"{root}: sample {entry['id']} lacks {name}")
            if verify and _sha256(f) != digest:
                raise DataError(f"{root}: hash mismatch for {entry['id']}/{name}")
    return manifest


def to_model_scale(image_u8) -> np.ndarray:
    return (np.asarray(image_u8, dtype=np.float32) / np.float32(127.5)) - np.float32(1.0)


def from_model_scale(x) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
    return np.floor((x + 1.0) * 127.5 + 0.5).astype(np.uint8)


@dataclass
class ArrayDataset:
    """Stacked arrays of a dataset; images in model scale ``[-1, 1]``."""

    targets: np.ndarray
    references: np.ndarray
    conditions: np.ndarray
    masks0: np.ndarray
    masks1: np.ndarray
    ids: list
    root: Path | None = None
    config: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.ids)

    def sample(self, i: int):
        if self.root is None:
            raise DataError("dataset has no backing directory")
        return read_sample(self.root / self.ids[i])

    @classmethod
    def from_samples(cls, samples, config: dict | None = None) -> "ArrayDataset":
        return cls(
            targets=np.stack([to_model_scale(s.target_image) for s in samples]),
            references=np.stack([to_model_scale(s.reference_image) for s in samples]),
            conditions=np.stack([s.condition_tokens for s in samples]).astype(np.int64),
            masks0=np.stack([s.masks[0] for s in samples]).astype(np.float32),
            masks1=np.stack([s.masks[1] for s in samples]).astype(np.float32),
            ids=[f"{i:06d}" for i in range(len(samples))],
            config=config or {},
        )


def load_dataset(root, verify: bool = True) -> ArrayDataset:
    root = Path(root)
    manifest = read_manifest(root, verify=verify)
    samples = [read_sample(root / e["id"]) for e in manifest["samples"]]
    if not samples:
        raise DataError(f"{root}: dataset is empty")
    ds = ArrayDataset.from_samples(samples, manifest["config"])
    ds.ids = [e["id"] for e in manifest["samples"]]
    ds.root = root
    return ds
