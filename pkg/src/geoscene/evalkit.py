"""Offline evaluation: attention/mask agreement, scene PSNR, relation checks,
metric-vs-human pairwise accuracy and temperature-scaled vote aggregation."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, EmptyInputError

PSNR_CAP = 99.0
COLOR_TOLERANCE = 60.0
MIN_DETECT_PIXELS = 4

__all__ = [
    "UndefinedCorrelation", "attention_agreement", "agreement_or_none", "scene_error",
    "relation_accuracy", "classify_palette", "VoteRecord", "read_votes", "read_scores",
    "human_preferences", "pairwise_accuracy", "vote_weight", "aggregate_votes",
    "VoteSummary", "AgreementReport",
]


class UndefinedCorrelation(DataError):
    """Pearson correlation is undefined because an input is constant."""


def attention_agreement(attn, mask) -> float:
    """Pearson correlation between two grids, computed in float64."""
    a = np.asarray(attn, dtype=np.float64).ravel()
    m = np.asarray(mask, dtype=np.float64).ravel()
    if a.shape != m.shape:
        raise DataError(f"grid sizes differ: {np.shape(attn)} vs {np.shape(mask)}")
    a = a - a.mean()
    m = m - m.mean()
    na = np.sqrt(np.dot(a, a))
    nm = np.sqrt(np.dot(m, m))
    if na == 0 or nm == 0:
        raise UndefinedCorrelation("correlation undefined for a constant grid")
    return float(np.clip(np.dot(a, m) / (na * nm), -1.0, 1.0))


def agreement_or_none(attn, mask) -> float | None:
    try:
        return attention_agreement(attn, mask)
    except UndefinedCorrelation:
        return None


def _as_255(img) -> np.ndarray:
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64)
    return arr.astype(np.float64) * 255.0


def scene_error(generated, target, footprint) -> float:
    """PSNR in dB over pixels outside ``footprint``; 99.0 for an exact match.

    uint8 images are taken on the 0..255 scale, float images as 0..1.
    """
    g, t = _as_255(generated), _as_255(target)
    if g.shape != t.shape:
        raise DataError(f"image shapes differ: {g.shape} vs {t.shape}")
    keep = ~np.asarray(footprint, dtype=bool)
    if keep.shape != g.shape[:2]:
        raise DataError(f"footprint shape {keep.shape} does not match image {g.shape[:2]}")
    if not keep.any():
        raise EmptyInputError("footprint covers every pixel; nothing to score")
    mse = float(np.mean((g[keep] - t[keep]) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(255.0 ** 2 / mse)))


def classify_palette(image) -> np.ndarray:
    """Index of the nearest palette colour per pixel, or -1 when none is close."""
    from .scenegen import PALETTE

    img = _as_255(image)
    pal = np.array(list(PALETTE.values()), dtype=np.float64)
    d = np.linalg.norm(img[..., None, :] - pal, axis=-1)
    idx = d.argmin(axis=-1)
    idx[d.min(axis=-1) > COLOR_TOLERANCE] = -1
    return idx


def relation_accuracy(image, entity, scene) -> bool | None:
    """Check the entity/anchor spatial relation on rendered pixels.

    Returns ``None`` (a detection failure, which counts as incorrect) when
    either colour has fewer than four pixels in the image.
    """
    from .scenegen import COLORS

    cls = classify_palette(image)
    anchor_color = scene.objects[entity.anchor].color
    ent = np.argwhere(cls == COLORS.index(entity.color))
    anc = np.argwhere(cls == COLORS.index(anchor_color))
    if len(ent) < MIN_DETECT_PIXELS or len(anc) < MIN_DETECT_PIXELS:
        return None
    ey, ex = ent.mean(axis=0)
    ay, ax = anc.mean(axis=0)
    rel = entity.relation
    if rel == "left-of":
        return bool(ex < ax)
    if rel == "right-of":
        return bool(ex > ax)
    if rel == "above":
        return bool(ey < ay)
    if rel == "below":
        return bool(ey > ay)
    if rel == "on":
        a_top, a_bottom = anc[:, 0].min(), anc[:, 0].max()
        height = a_bottom - a_top + 1
        overlap = ent[:, 1].min() <= anc[:, 1].max() and anc[:, 1].min() <= ent[:, 1].max()
        adjacent = ent[:, 0].max() >= a_top - height / 4
        return bool(ey < ay and overlap and adjacent)
    raise DataError(f"unknown relation {rel!r}")


# -- human preference bookkeeping -----------------------------------------------
@dataclass(frozen=True)
class VoteRecord:
    pair_id: str
    annotator_id: str
    method: str
    selected: bool


def read_votes(path) -> list[VoteRecord]:
    """Read a CSV with header ``pair_id,annotator_id,method,selected``."""
    out = []
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = {"pair_id", "annotator_id", "method", "selected"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise DataError(f"{path}: header must contain {sorted(need)}")
        for lineno, row in enumerate(reader, start=2):
            sel = row["selected"].strip()
            if sel not in ("0", "1"):
                raise DataError(f"{path}:{lineno}: selected must be 0 or 1, got {sel!r}")
            rec = VoteRecord(row["pair_id"], row["annotator_id"], row["method"], sel == "1")
            key = (rec.pair_id, rec.annotator_id, rec.method)
            if key in seen:
                raise DataError(f"{path}:{lineno}: duplicate vote {key}")
            seen.add(key)
            out.append(rec)
    return out


def read_scores(path) -> dict[str, dict[str, float]]:
    """Read ``pair_id,method,score`` rows into ``{pair_id: {method: score}}``."""
    table: dict[str, dict[str, float]] = defaultdict(dict)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, start=2):
            try:
                score = float(row["score"])
            except (KeyError, TypeError, ValueError):
                raise DataError(f"{path}:{lineno}: bad score row {row}") from None
            if not np.isfinite(score):
                raise DataError(f"{path}:{lineno}: non-finite score")
            if row["method"] in table[row["pair_id"]]:
                raise DataError(f"{path}:{lineno}: duplicate score for "
                                f"({row['pair_id']}, {row['method']})")
            table[row["pair_id"]][row["method"]] = score
    return dict(table)


def _group(votes) -> dict[str, list[VoteRecord]]:
    pairs: dict[str, list[VoteRecord]] = {}
    for v in votes:
        pairs.setdefault(v.pair_id, []).append(v)
    return pairs


def _majority(records: list[VoteRecord], n_annotators: int = 3) -> list[str]:
    annotators = {r.annotator_id for r in records}
    if len(annotators) != n_annotators:
        raise DataError(f"pair {records[0].pair_id}: expected {n_annotators} annotators, "
                        f"got {len(annotators)}")
    counts: dict[str, int] = {}
    for r in records:
        counts[r.method] = counts.get(r.method, 0) + int(r.selected)
    need = n_annotators // 2 + 1
    return sorted(m for m, c in counts.items() if c >= need)


def human_preferences(votes) -> dict[str, str]:
    """Pairs with a clear preference: exactly one method has a 2-of-3 majority."""
    prefs = {}
    for pair_id, records in _group(votes).items():
        kept = _majority(records)
        if len(kept) == 1:
            prefs[pair_id] = kept[0]
    return prefs


def pairwise_accuracy(scores: dict, preferences: dict) -> float:
    """Percentage of preference pairs where the metric's unique best method
    is the human choice. A tie at the top counts as disagreement."""
    if not preferences:
        raise EmptyInputError("no pairs with a clear human preference")
    hits = 0
    for pair_id, choice in preferences.items():
        row = scores.get(pair_id)
        if not row or choice not in row:
            raise DataError(f"pair {pair_id}: missing score for method {choice!r}")
        best = max(row.values())
        top = [m for m, s in row.items() if s == best]
        hits += int(top == [choice])
    return 100.0 * hits / len(preferences)


def vote_weight(k: int, alpha: float = 0.8) -> float:
    return 1.0 / k ** alpha


@dataclass
class VoteSummary:
    percentages: dict
    valid_pairs: int
    skipped_pairs: int
    totals: dict = field(default_factory=dict)


def aggregate_votes(votes, alpha: float = 0.8) -> VoteSummary:
    """Majority-filter each pair, weight each kept method by 1/k**alpha, normalise to %."""
    if alpha <= 0:
        raise DataError(f"alpha must be positive, got {alpha}")
    totals: dict[str, float] = {}
    valid = skipped = 0
    for pair_id, records in sorted(_group(votes).items()):
        for m in {r.method for r in records}:
            totals.setdefault(m, 0.0)
        kept = _majority(records)
        if not kept:
            skipped += 1
            continue
        valid += 1
        w = vote_weight(len(kept), alpha)
        for m in kept:
            totals[m] += w
    grand = sum(totals.values())
    if valid == 0 or grand == 0:
        raise EmptyInputError("no pair survived majority filtering")
    pct = {m: 100.0 * v / grand for m, v in sorted(totals.items())}
    return VoteSummary(pct, valid, skipped, dict(sorted(totals.items())))


@dataclass
class AgreementReport:
    preferences: dict
    pairwise_accuracy: dict
    valid_pairs: int
    skipped_pairs: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def write(self, json_path, csv_path=None) -> None:
        Path(json_path).write_text(self.to_json() + "\n", encoding="utf-8")
        if csv_path is not None:
            with open(csv_path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["kind", "name", "value"])
                for m, v in self.preferences.items():
                    w.writerow(["preference_pct", m, f"{v:.6f}"])
                for m, v in self.pairwise_accuracy.items():
                    w.writerow(["pairwise_accuracy_pct", m, f"{v:.6f}"])
