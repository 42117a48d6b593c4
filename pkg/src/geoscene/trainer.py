"""Deterministic training loop for the diffusion + attention objective.

Every random draw comes from a generator keyed by ``(seed, stream name,
counter)``: the batch order of epoch ``e`` from ``("data", e)``, the
timesteps and noise of step ``s`` from ``("noise", s)``. Two runs that
share a seed therefore see identical batches and noise whatever their
lambda, and a resumed run continues exactly where the checkpoint stopped.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import gamk
from .dataset import ArrayDataset, load_dataset
from .errors import DataError, FormatError, ParameterError, TrainingError
from .evalkit import agreement_or_none
from .model import DiffusionTransformer, ModelConfig, patchify
from .objective import LossBreakdown, NoiseSchedule, add_noise, attention_loss, \
    diffusion_loss, total_loss

log = logging.getLogger(__name__)

METRICS_HEADER = ["step", "l_diff", "l_attn0", "l_attn1", "l_attn", "total", "attn_agreement"]

__all__ = ["TrainConfig", "TrainResult", "Checkpoint", "train", "train_on_arrays",
           "save_checkpoint", "load_checkpoint", "model_from_checkpoint",
           "read_config_file", "named_rng", "evaluate_attention", "read_metrics"]


@dataclass
class TrainConfig:
    seed: int = 0
    dataset: str = ""
    steps: int = 100
    batch_size: int = 8
    lr: float = 1e-3
    lam: float = 3.0
    supervised_block: int | None = None
    normalize: bool = True
    height: int = 64
    width: int = 64
    patch: int = 8
    dim: int = 64
    heads: int = 4
    blocks: int = 4
    t_train: int = 1000
    schedule: str = "cosine"
    eval_interval: int = 50
    checkpoint_interval: int = 0
    out_dir: str = "runs/default"
    grad_clip: float = 1.0
    probe_size: int = 8
    detach_capture: bool = False

    def validate(self) -> None:
        if self.steps < 1:
            raise ParameterError("steps must be at least 1")
        if self.lam < 0:
            raise ParameterError("lam must be non-negative")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be at least 1")
        if self.height % self.patch or self.width % self.patch:
            raise ParameterError(f"image {self.height}x{self.width} not divisible by "
                                 f"patch {self.patch}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(height=self.height, width=self.width, patch=self.patch,
                           dim=self.dim, heads=self.heads, blocks=self.blocks,
                           supervised_block=self.supervised_block, t_train=self.t_train)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        """Build a config from string (or typed) values keyed by field name."""
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ParameterError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(known[key].type, raw, key)
        return cls(**kwargs)


def _coerce(type_name: str, raw, key: str):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if "None" in type_name and text.lower() in ("", "none"):
            return None
        if type_name.startswith("bool"):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if type_name.startswith("int"):
            return int(text)
        if type_name.startswith("float"):
            return float(text)
    except ValueError:
        raise ParameterError(f"config key {key!r}: cannot parse {raw!r} as {type_name}") from None
    return text


def read_config_file(path) -> dict:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParameterError(f"{path}:{lineno}: expected key=value")
            key, val = line.split("=", 1)
            values[key.strip()] = val.strip()
    return values


def named_rng(seed: int, name: str, counter: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), int(counter)])


# -- checkpoints -------------------------------------------------------------------
@dataclass
class Checkpoint:
    params: dict
    step: int
    config: dict
    model_config: dict
    adam: ag.AdamState | None = None


def save_checkpoint(path, model: DiffusionTransformer, step: int, config: dict | None = None,
                    adam: ag.AdamState | None = None) -> None:
    tensors = {f"param/{k}": v for k, v in model.state_dict().items()}
    meta = {"format": "geoscene-checkpoint", "step": int(step),
            "config": config or {}, "model_config": model.config.to_dict()}
    if adam is not None:
        for k in model.params:
            if k in adam.m:
                tensors[f"adam.m/{k}"] = adam.m[k]
                tensors[f"adam.v/{k}"] = adam.v[k]
        meta["adam"] = {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
                        "eps": adam.eps, "step": adam.step}
    gamk.write_container(path, tensors, meta)


def load_checkpoint(path) -> Checkpoint:
    tensors, meta = gamk.read_container(path)
    if meta.get("format") != "geoscene-checkpoint":
        raise FormatError(f"{path}: not a geoscene checkpoint")
    params = {k[6:]: v for k, v in tensors.items() if k.startswith("param/")}
    adam = None
    if "adam" in meta:
        a = meta["adam"]
        adam = ag.AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"],
                            step=a["step"])
        adam.m = {k[7:]: v for k, v in tensors.items() if k.startswith("adam.m/")}
        adam.v = {k[7:]: v for k, v in tensors.items() if k.startswith("adam.v/")}
    return Checkpoint(params, int(meta["step"]), meta.get("config", {}),
                      meta["model_config"], adam)


def model_from_checkpoint(ckpt: Checkpoint | str | Path) -> DiffusionTransformer:
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    mc = dict(ckpt.model_config)
    mc["extra_supervised_blocks"] = tuple(mc.get("extra_supervised_blocks", ()))
    model = DiffusionTransformer(ModelConfig(**mc))
    model.load_state_dict(ckpt.params)
    return model


# -- evaluation ----------------------------------------------------------------------
def _capture_grids(model, ds: ArrayDataset, idx, t, eps, schedule):
    xt = add_noise(ds.targets[idx], eps, t, schedule)
    with ag.no_grad():
        _, cap = model.forward(xt, ds.references[idx], ds.conditions[idx], t)
    return cap.a0.data, cap.a1.data


def evaluate_attention(model: DiffusionTransformer, ds: ArrayDataset, seed: int = 0,
                       batch_size: int = 16, schedule: NoiseSchedule | None = None,
                       indices=None) -> float:
    """Mean Pearson agreement between captured attention and masks over both views.

    Timesteps and noise come from the ``"eval"`` stream of ``seed`` so that
    different models are scored on identical inputs. Undefined correlations
    (constant grids) are skipped.
    """
    schedule = schedule or NoiseSchedule.make("cosine", model.config.t_train)
    indices = np.arange(len(ds)) if indices is None else np.asarray(indices)
    rng = named_rng(seed, "eval")
    t_all = rng.integers(0, schedule.T, size=len(indices))
    eps_all = rng.standard_normal(ds.targets[indices].shape).astype(np.float32)
    scores = []
    for start in range(0, len(indices), batch_size):
        sl = slice(start, start + batch_size)
        a0, a1 = _capture_grids(model, ds, indices[sl], t_all[sl], eps_all[sl], schedule)
        if a0.ndim == 4:  # per-head maps
            a0, a1 = a0.mean(axis=1), a1.mean(axis=1)
        for j, i in enumerate(indices[sl]):
            for a, m in ((a0[j], ds.masks0[i]), (a1[j], ds.masks1[i])):
                r = agreement_or_none(a, m)
                if r is not None:
                    scores.append(r)
    return float(np.mean(scores)) if scores else float("nan")


# -- training --------------------------------------------------------------------------
@dataclass
class TrainResult:
    model: DiffusionTransformer
    adam: ag.AdamState
    history: list
    checkpoint_path: Path | None
    metrics_path: Path | None


def _batch_indices(seed: int, step: int, n: int, batch: int) -> np.ndarray:
    """Indices for 1-based ``step``; epochs are seeded permutations of the data."""
    start = (step - 1) * batch
    out = []
    while len(out) < batch:
        epoch, pos = divmod(start + len(out), n)
        perm = named_rng(seed, "data", epoch).permutation(n)
        take = min(batch - len(out), n - pos)
        out.extend(perm[pos:pos + take])
    return np.array(out, dtype=np.int64)


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def read_metrics(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRICS_HEADER:
            raise FormatError(f"{path}: unexpected metrics header {reader.fieldnames}")
        return list(reader)


def train_step(model, adam, ds, config: TrainConfig, schedule, step: int) -> LossBreakdown:
    ag.reset_tape()
    idx = _batch_indices(config.seed, step, len(ds), config.batch_size)
    rng = named_rng(config.seed, "noise", step)
    t = rng.integers(0, schedule.T, size=len(idx))
    eps = rng.standard_normal(ds.targets[idx].shape).astype(np.float32)
    xt = add_noise(ds.targets[idx], eps, t, schedule)
    eps_hat, cap = model.forward(xt, ds.references[idx], ds.conditions[idx], t,
                                 detach_capture=config.detach_capture)
    l_diff = diffusion_loss(eps_hat, patchify(eps, config.patch), t, schedule)
    l0 = l1 = None
    for c in cap.all():
        a, b, _ = attention_loss(c.a0, ds.masks0[idx], c.a1, ds.masks1[idx], config.normalize)
        l0 = a if l0 is None else l0 + a
        l1 = b if l1 is None else l1 + b
    l_attn = l0 + l1
    total = total_loss(l_diff, l_attn, config.lam)
    if not np.isfinite(total.data).all():
        raise TrainingError("non-finite loss", step=step)
    model.zero_grad()
    ag.backward(total)
    if config.grad_clip > 0:
        ag.clip_grad_norm(model.params, config.grad_clip)
    ag.adam_step(model.params, adam)
    return LossBreakdown(l_diff.item(), l0.item(), l1.item(), l_attn.item(), total.item(),
                         float(config.lam))


def train_on_arrays(ds: ArrayDataset, config: TrainConfig, out_dir=None, resume=None,
                    progress=None) -> TrainResult:
    """Run ``config.steps`` optimisation steps on an in-memory dataset.

    With ``out_dir`` the metrics CSV and checkpoints are written there.
    ``resume`` is a checkpoint path; training continues at its step + 1.
    """
    config.validate()
    if ds.targets.shape[1:3] != (config.height, config.width):
        raise DataError(f"dataset images {ds.targets.shape[1:3]} do not match config "
                        f"{(config.height, config.width)}")
    schedule = NoiseSchedule.make(config.schedule, config.t_train)
    model = DiffusionTransformer(config.model_config(), seed=int(named_rng(config.seed, "init")
                                                                 .integers(0, 2 ** 31)))
    adam = ag.AdamState(lr=config.lr)
    start = 0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        model.load_state_dict(ckpt.params)
        if ckpt.adam is not None:
            adam = ckpt.adam
            adam.lr = config.lr
        start = ckpt.step

    out = Path(out_dir) if out_dir is not None else None
    metrics_path = ckpt_path = None
    fh = writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.csv"
        kept = []
        if start > 0 and metrics_path.exists():
            kept = [r for r in read_metrics(metrics_path) if int(r["step"]) <= start]
        fh = open(metrics_path, "w", newline="", encoding="utf-8")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for r in kept:
            writer.writerow([r[k] for k in METRICS_HEADER])

    probe = np.arange(min(config.probe_size, len(ds)))
    history = []
    try:
        for step in range(start + 1, config.steps + 1):
            losses = train_step(model, adam, ds, config, schedule, step)
            agree = None
            is_eval = step % max(config.eval_interval, 1) == 0 or step == config.steps
            if is_eval:
                agree = evaluate_attention(model, ds, config.seed, schedule=schedule,
                                           indices=probe)
            history.append((step, losses, agree))
            if writer is not None:
                writer.writerow([_fmt(v) for v in losses.row(step)] + [_fmt(agree)])
                if is_eval:
                    fh.flush()
            if progress is not None and is_eval:
                progress(step, losses, agree)
            if out is not None and config.checkpoint_interval > 0 \
                    and step % config.checkpoint_interval == 0 and step != config.steps:
                save_checkpoint(out / f"checkpoint_{step:06d}.gamk", model, step,
                                config.to_dict(), adam)
    finally:
        if fh is not None:
            fh.close()
    if out is not None:
        ckpt_path = out / "checkpoint.gamk"
        save_checkpoint(ckpt_path, model, config.steps, config.to_dict(), adam)
    return TrainResult(model, adam, history, ckpt_path, metrics_path)


def train(config: TrainConfig, resume=None, progress=None) -> TrainResult:
    """Train on ``config.dataset`` and write outputs to ``config.out_dir``."""
    if not config.dataset:
        raise DataError("config.dataset is empty")
    ds = load_dataset(config.dataset)
    cfg = ds.config
    if cfg and (cfg.get("height"), cfg.get("width"), cfg.get("patch")) != \
            (config.height, config.width, config.patch):
        raise DataError(f"dataset was generated at {cfg.get('height')}x{cfg.get('width')} "
                        f"patch {cfg.get('patch')}, config asks for "
                        f"{config.height}x{config.width} patch {config.patch}")
    return train_on_arrays(ds, config, config.out_dir, resume, progress)
