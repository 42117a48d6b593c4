"""Deterministic denoising inference and attention heatmap export.

The default update rule is the eta = 0 implicit sampler over ``steps``
timesteps spread evenly from ``T - 1`` down to ``0``::

    x0_hat = (x_t - sigma_t * eps_hat) / sqrt(abar_t)
    x_prev = sqrt(abar_prev) * x0_hat + sigma_prev * eps_hat

After the last step the ``x0_hat`` estimate is returned. The latent is kept
in float64 throughout; only the network runs in its own precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import autograd as ag
from .dataset import from_model_scale, to_model_scale
from .errors import DataError, DimensionError, ParameterError
from .model import DiffusionTransformer, unpatchify
from .objective import NoiseSchedule, add_noise
from .scenegen import EntitySpec, TrainingSample, encode_condition
from .trainer import model_from_checkpoint, named_rng

DEFAULT_STEPS = 28

__all__ = ["SampleRequest", "SampleResult", "generate", "sample_timesteps", "ddim_closed_form",
           "attention_heatmap", "export_attention", "write_png", "write_pgm", "DEFAULT_STEPS"]


@dataclass
class SampleRequest:
    """What to generate: a checkpoint (path or loaded model), a reference and a condition."""

    checkpoint: object
    reference: np.ndarray            # uint8 (H, W, 3)
    condition: object                # EntitySpec or 4 token ids
    steps: int = DEFAULT_STEPS
    seed: int = 0
    stochastic: bool = False
    schedule: str = "cosine"

    def condition_ids(self) -> np.ndarray:
        if isinstance(self.condition, EntitySpec):
            return encode_condition(self.condition)
        return np.asarray(self.condition, dtype=np.int64).reshape(-1)


@dataclass
class SampleResult:
    image: np.ndarray                # uint8 (H, W, 3)
    x0: np.ndarray                   # float64 (H, W, 3), clamped to [-1, 1]
    timesteps: np.ndarray
    trajectory: list = field(default_factory=list)


def _load_model(checkpoint) -> DiffusionTransformer:
    if isinstance(checkpoint, DiffusionTransformer):
        return checkpoint
    return model_from_checkpoint(checkpoint)


def sample_timesteps(steps: int, T: int) -> np.ndarray:
    if steps < 1:
        raise ParameterError("steps must be at least 1")
    if steps > T:
        raise ParameterError(f"steps {steps} exceed the {T} training timesteps")
    return np.round(np.linspace(T - 1, 0, steps)).astype(np.int64)


def ddim_closed_form(x_T, timesteps, schedule: NoiseSchedule) -> np.ndarray:
    """Result of the implicit sampler when the network always predicts zero noise.

    Each step multiplies by ``sqrt(abar_prev / abar_t)`` and the final
    estimate divides by ``sqrt(abar_last)``, so the product telescopes to
    ``x_T / sqrt(abar_first)``.
    """
    return np.asarray(x_T, dtype=np.float64) / np.sqrt(schedule.alpha_bar[int(timesteps[0])])


def _initial_noise(seed: int, shape) -> np.ndarray:
    return named_rng(seed, "sample").standard_normal(shape)


def generate(request: SampleRequest, return_trajectory: bool = False) -> SampleResult:
    model = _load_model(request.checkpoint)
    cfg = model.config
    ref = np.asarray(request.reference)
    if ref.shape != (cfg.height, cfg.width, cfg.channels):
        raise DimensionError(f"reference {ref.shape} does not match model "
                             f"{(cfg.height, cfg.width, cfg.channels)}")
    ids = request.condition_ids()
    schedule = NoiseSchedule.make(request.schedule, cfg.t_train)
    ts = sample_timesteps(request.steps, schedule.T)
    ref_model = to_model_scale(ref)[None]
    ids = ids[None]
    abar = schedule.alpha_bar
    x = _initial_noise(request.seed, (1,) + ref.shape)
    noise_rng = named_rng(request.seed, "sample-step")
    traj = [x[0].copy()] if return_trajectory else []
    x0 = x
    with ag.no_grad():
        for i, t in enumerate(ts):
            eps_tok, _ = model.forward(x, ref_model, ids, np.array([t]))
            eps = unpatchify(eps_tok.data, cfg.height, cfg.width, cfg.patch,
                             cfg.channels).astype(np.float64)
            a_t = abar[t]
            x0 = (x - np.sqrt(1.0 - a_t) * eps) / np.sqrt(a_t)
            if i + 1 == len(ts):
                break
            a_prev = abar[ts[i + 1]]
            if request.stochastic:
                # ancestral variance, eta = 1
                var = (1.0 - a_prev) / (1.0 - a_t) * (1.0 - a_t / a_prev)
                dir_scale = np.sqrt(max(1.0 - a_prev - var, 0.0))
                x = np.sqrt(a_prev) * x0 + dir_scale * eps \
                    + np.sqrt(var) * noise_rng.standard_normal(x.shape)
            else:
                x = np.sqrt(a_prev) * x0 + np.sqrt(1.0 - a_prev) * eps
            if return_trajectory:
                traj.append(x[0].copy())
    if return_trajectory:
        traj.append(x0[0].copy())
    out = np.clip(x0[0], -1.0, 1.0)
    return SampleResult(from_model_scale(out), out, ts, traj)


# -- image files ------------------------------------------------------------------
def write_png(path, image) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def write_pgm(path, gray) -> None:
    """8-bit binary PGM (P5)."""
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def attention_heatmap(grid, height: int, width: int) -> np.ndarray:
    """Min-max scale one grid to 0..255 and upscale by nearest neighbour.

    A constant grid has no range to scale and becomes uniform mid-gray.
    """
    grid = np.asarray(grid, dtype=np.float64)
    gh, gw = grid.shape
    if height % gh or width % gw:
        raise DimensionError(f"grid {grid.shape} does not tile {height}x{width}")
    lo, hi = grid.min(), grid.max()
    if hi - lo <= 0:
        scaled = np.full(grid.shape, 128, dtype=np.uint8)
    else:
        scaled = np.floor((grid - lo) / (hi - lo) * 255.0 + 0.5).astype(np.uint8)
    return np.repeat(np.repeat(scaled, height // gh, axis=0), width // gw, axis=1)


def export_attention(request: SampleRequest, sample: TrainingSample, out_dir=None,
                     sample_id: str = "sample", t: int | None = None):
    """Capture the supervised block's cross-view grids for one pair.

    The target view is noised to timestep ``t`` (mid-schedule by default)
    with noise drawn from ``request.seed``. Returns ``(grid0, grid1, heat0,
    heat1)`` and, with ``out_dir``, writes ``<id>_attn0.pgm``/``<id>_attn1.pgm``.
    """
    for name in ("target_image", "reference_image", "condition_tokens"):
        if getattr(sample, name, None) is None:
            raise DataError(f"sample lacks {name}")
    model = _load_model(request.checkpoint)
    cfg = model.config
    schedule = NoiseSchedule.make(request.schedule, cfg.t_train)
    t = schedule.T // 2 if t is None else int(t)
    target = to_model_scale(sample.target_image)[None]
    if target.shape[1:] != (cfg.height, cfg.width, cfg.channels):
        raise DimensionError(f"sample images {target.shape[1:]} do not match model")
    eps = named_rng(request.seed, "attn-noise").standard_normal(target.shape).astype(np.float32)
    xt = add_noise(target, eps, np.array([t]), schedule)
    with ag.no_grad():
        _, cap = model.forward(xt, to_model_scale(sample.reference_image)[None],
                               np.asarray(sample.condition_tokens)[None], np.array([t]))
    g0, g1 = cap.a0.data[0], cap.a1.data[0]
    if g0.ndim == 3:
        g0, g1 = g0.mean(axis=0), g1.mean(axis=0)
    h0 = attention_heatmap(g0, cfg.height, cfg.width)
    h1 = attention_heatmap(g1, cfg.height, cfg.width)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_pgm(out / f"{sample_id}_attn0.pgm", h0)
        write_pgm(out / f"{sample_id}_attn1.pgm", h1)
    return g0, g1, h0, h1
