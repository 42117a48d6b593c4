"""Toy double-stream joint-attention diffusion transformer.

Two token streams share every attention operation:

* the image stream carries the noisy target view (``L0`` patch tokens);
* the context stream carries the clean reference view (``L1`` patch tokens)
  followed by the condition tokens.

Each stream has its own normalisation, QKV, output and MLP weights; the
queries, keys and values of both streams are concatenated into one joint
sequence ``[target; reference; condition]`` before the softmax. Timestep
information enters through adaptive layer-norm modulation (shift, scale,
gate), zero-initialised so every block starts as the identity. The output
projection is zero-initialised too, so an untrained model predicts zero
noise.

At the supervised block the head-averaged attention matrix is reduced to
one cross-view score per token (:func:`aggregate_cross_view`); condition
tokens take part in the softmax but not in that reduction.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import DimensionError, ParameterError
from .scenegen import CONDITION_LENGTH, VOCAB_SIZE

__all__ = [
    "ModelConfig", "DiffusionTransformer", "AttentionCapture", "TokenLayout",
    "patchify", "unpatchify", "compute_joint_attention", "aggregate_cross_view",
    "timestep_embedding", "sincos_2d",
]


@dataclass
class ModelConfig:
    height: int = 64
    width: int = 64
    patch: int = 8
    channels: int = 3
    dim: int = 64
    heads: int = 4
    blocks: int = 4
    supervised_block: int | None = None
    extra_supervised_blocks: tuple = ()
    head_mode: str = "mean"          # "mean": average heads; "each": one map per head
    mlp_ratio: int = 4
    t_train: int = 1000
    vocab: int = VOCAB_SIZE
    cond_len: int = CONDITION_LENGTH

    def __post_init__(self):
        if self.supervised_block is None:
            self.supervised_block = self.blocks // 2
        self.extra_supervised_blocks = tuple(self.extra_supervised_blocks)

    def validate(self) -> None:
        if self.height % self.patch or self.width % self.patch:
            raise DimensionError(f"image {self.height}x{self.width} not divisible by patch {self.patch}")
        if self.dim % self.heads:
            raise ParameterError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.dim % 4:
            raise ParameterError("dim must be a multiple of 4 for the 2-d positional code")
        for b in (self.supervised_block, *self.extra_supervised_blocks):
            if not 0 <= b < self.blocks:
                raise ParameterError(f"supervised block {b} outside [0, {self.blocks})")
        if self.head_mode not in ("mean", "each"):
            raise ParameterError(f"unknown head_mode {self.head_mode!r}")

    @property
    def grid(self) -> tuple:
        return self.height // self.patch, self.width // self.patch

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TokenLayout:
    grid: tuple
    cond_len: int

    @property
    def L0(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def L1(self) -> int:
        return self.L0

    @property
    def total(self) -> int:
        return self.L0 + self.L1 + self.cond_len

    @property
    def I0(self) -> range:
        return range(0, self.L0)

    @property
    def I1(self) -> range:
        return range(self.L0, self.L0 + self.L1)


@dataclass
class AttentionCapture:
    """Aggregated cross-view attention grids ``(A~0, A~1)`` of one block."""

    a0: Tensor
    a1: Tensor
    block: int
    others: list = field(default_factory=list)

    def all(self) -> list:
        return [self, *self.others]


# -- token grid helpers ------------------------------------------------------
def patchify(image, patch: int, embed=None) -> np.ndarray:
    """Split ``(..., H, W, C)`` images into raster-ordered ``P*P*C`` patch vectors.

    Token 0 covers pixels ``[0, P) x [0, P)``; inside a token values run over
    (row, column, channel). ``embed`` is an optional ``(P*P*C, d)`` matrix.
    """
    x = np.asarray(image)
    *lead, h, w, c = x.shape
    if h % patch or w % patch:
        raise DimensionError(f"image {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = x.reshape(*lead, gh, patch, gw, patch, c)
    n = len(lead)
    x = x.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    tokens = x.reshape(*lead, gh * gw, patch * patch * c)
    if embed is not None:
        tokens = tokens @ np.asarray(embed)
    return tokens


def unpatchify(tokens, height: int, width: int, patch: int, channels: int = 3) -> np.ndarray:
    x = np.asarray(tokens)
    *lead, n_tok, pd = x.shape
    gh, gw = height // patch, width // patch
    if n_tok != gh * gw or pd != patch * patch * channels:
        raise DimensionError(f"tokens {x.shape[-2:]} do not tile a {height}x{width} image "
                             f"with patch {patch}")
    x = x.reshape(*lead, gh, gw, patch, patch, channels)
    n = len(lead)
    x = x.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, height, width, channels)


def sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2))
    out = pos.reshape(-1)[:, None] * omega[None, :]
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_2d(dim: int, grid: tuple) -> np.ndarray:
    """Fixed 2-d sinusoidal code for a raster-ordered ``grid``: (L, dim)."""
    gh, gw = grid
    ys, xs = np.mgrid[0:gh, 0:gw].astype(np.float64)
    return np.concatenate([sincos_1d(dim // 2, ys), sincos_1d(dim // 2, xs)], axis=1)


def timestep_embedding(t, dim: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


# -- attention reductions ------------------------------------------------------
def compute_joint_attention(X) -> Tensor:
    """``softmax(X X^T / sqrt(d))`` for tokens used as both queries and keys."""
    X = X if isinstance(X, Tensor) else ag.tensor(X)
    ag.check_finite(X, "joint token sequence")
    d = X.shape[-1]
    scores = ag.matmul(X, ag.transpose(X, (*range(X.ndim - 2), X.ndim - 1, X.ndim - 2)))
    return ag.softmax(scores * (1.0 / math.sqrt(d)), axis=-1)


def aggregate_cross_view(A, L0: int, L1: int, grid: tuple | None = None):
    """Symmetrised cross-view attention per token.

    For a view-0 token ``p``: half the mean attention ``p`` pays to view-1
    tokens plus half the mean attention it receives from them; view-1
    tokens mirror this with ``1/L0``. Rows and columns beyond ``L0 + L1``
    (condition tokens) are ignored. Leading axes of ``A`` are kept.
    """
    A = A if isinstance(A, Tensor) else ag.tensor(A)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2] or A.shape[-1] < L0 + L1:
        raise DimensionError(f"attention of shape {A.shape} cannot hold {L0}+{L1} tokens")
    lead = (slice(None),) * (A.ndim - 2)
    to1 = A[lead + (slice(0, L0), slice(L0, L0 + L1))]        # view0 rows -> view1 cols
    to0 = A[lead + (slice(L0, L0 + L1), slice(0, L0))]        # view1 rows -> view0 cols
    a0 = (ag.tsum(to1, -1) + ag.tsum(to0, -2)) * (0.5 / L1)
    a1 = (ag.tsum(to0, -1) + ag.tsum(to1, -2)) * (0.5 / L0)
    if grid is not None:
        lead_shape = A.shape[:-2]
        a0 = a0.reshape(*lead_shape, *grid)
        a1 = a1.reshape(*lead_shape, *grid)
    return a0, a1


# -- the network -------------------------------------------------------------------
def _xavier(rng, fan_in, fan_out):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


class DiffusionTransformer:
    """Noise predictor ``eps(x_t, reference, condition, t)`` with attention capture."""

    STREAMS = ("x", "c")

    def __init__(self, config: ModelConfig | None = None, seed: int = 0, dtype=np.float32):
        self.config = config or ModelConfig()
        self.config.validate()
        self.dtype = np.dtype(dtype).type
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(seed))
        cfg = self.config
        self.layout = TokenLayout(cfg.grid, cfg.cond_len)
        self._pos = sincos_2d(cfg.dim, cfg.grid).astype(self.dtype)

    def _add(self, name, value):
        self.params[name] = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True)

    def _init_params(self, rng):
        cfg = self.config
        d, pd, hid = cfg.dim, cfg.patch_dim, cfg.dim * cfg.mlp_ratio
        self._add("patch.w", _xavier(rng, pd, d))
        self._add("patch.b", np.zeros(d))
        self._add("view_embed", rng.normal(0, 0.02, size=(3, d)))
        self._add("cond_embed", rng.normal(0, 0.02, size=(cfg.vocab, d)))
        self._add("time.w1", rng.normal(0, 0.02, size=(d, d)))
        self._add("time.b1", np.zeros(d))
        self._add("time.w2", rng.normal(0, 0.02, size=(d, d)))
        self._add("time.b2", np.zeros(d))
        for b in range(cfg.blocks):
            for s in self.STREAMS:
                p = f"block{b}.{s}."
                self._add(p + "mod.w", np.zeros((d, 6 * d)))
                self._add(p + "mod.b", np.zeros(6 * d))
                self._add(p + "qkv.w", _xavier(rng, d, 3 * d))
                self._add(p + "qkv.b", np.zeros(3 * d))
                self._add(p + "proj.w", _xavier(rng, d, d))
                self._add(p + "proj.b", np.zeros(d))
                self._add(p + "mlp.w1", _xavier(rng, d, hid))
                self._add(p + "mlp.b1", np.zeros(hid))
                self._add(p + "mlp.w2", _xavier(rng, hid, d))
                self._add(p + "mlp.b2", np.zeros(d))
        self._add("final.mod.w", np.zeros((d, 2 * d)))
        self._add("final.mod.b", np.zeros(2 * d))
        self._add("final.w", np.zeros((d, pd)))
        self._add("final.b", np.zeros(pd))

    # -- state -------------------------------------------------------------
    def state_dict(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        from .errors import FormatError

        for name, p in self.params.items():
            if name not in state:
                raise FormatError(f"checkpoint lacks parameter {name!r}")
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise FormatError(f"parameter {name!r}: checkpoint shape {arr.shape} "
                                  f"!= model shape {p.shape}")
            p.data = arr.astype(self.dtype)
        extra = set(state) - set(self.params)
        if extra:
            raise FormatError(f"checkpoint has unknown parameters {sorted(extra)}")

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- forward -------------------------------------------------------------
    def _linear(self, x, name):
        return ag.matmul(x, self.params[name + ".w"]) + self.params[name + ".b"]

    def _time_mlp(self, temb):
        h = ag.silu(ag.matmul(temb, self.params["time.w1"]) + self.params["time.b1"])
        return ag.matmul(h, self.params["time.w2"]) + self.params["time.b2"]

    def _mlp(self, x, p):
        h = ag.gelu(ag.matmul(x, self.params[p + "mlp.w1"]) + self.params[p + "mlp.b1"])
        return ag.matmul(h, self.params[p + "mlp.w2"]) + self.params[p + "mlp.b2"]

    @staticmethod
    def _modulate(x, shift, scale):
        return ag.layer_norm(x) * (scale + 1.0) + shift

    def _block(self, b, xs: dict, cond_vec, batch):
        cfg = self.config
        d, nh = cfg.dim, cfg.heads
        dh = d // nh
        mods, qkv = {}, {}
        for s in self.STREAMS:
            p = f"block{b}.{s}."
            m = self._linear(cond_vec, p + "mod").reshape(batch, 1, 6 * d)
            mods[s] = [m[:, :, i * d:(i + 1) * d] for i in range(6)]
            shift, scale = mods[s][0], mods[s][1]
            qkv[s] = self._linear(self._modulate(xs[s], shift, scale), p + "qkv")
        joint = ag.concat([qkv["x"], qkv["c"]], axis=1)          # (B, L, 3d)
        L = joint.shape[1]
        heads = joint.reshape(batch, L, 3, nh, dh).transpose(2, 0, 3, 1, 4)  # (3, B, h, L, dh)
        q, k, v = heads[0], heads[1], heads[2]
        scores = ag.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        attn = ag.softmax(scores, axis=-1)                        # (B, h, L, L)
        out = ag.matmul(attn, v).transpose(0, 2, 1, 3).reshape(batch, L, d)
        L0 = xs["x"].shape[1]
        outs = {"x": out[:, :L0], "c": out[:, L0:]}
        new = {}
        for s in self.STREAMS:
            p = f"block{b}.{s}."
            _, _, gate_a, shift_m, scale_m, gate_m = mods[s]
            h = xs[s] + gate_a * self._linear(outs[s], p + "proj")
            new[s] = h + gate_m * self._mlp(self._modulate(h, shift_m, scale_m), p)
        return new, attn

    def _capture(self, attn, b, detach):
        lay = self.layout
        A = attn.mean(axis=1) if self.config.head_mode == "mean" else attn
        if detach:
            A = A.detach()
        a0, a1 = aggregate_cross_view(A, lay.L0, lay.L1, lay.grid)
        return AttentionCapture(a0, a1, b)

    def embed_inputs(self, noisy_target, reference, condition_ids):
        cfg = self.config
        pos = self._pos
        xt = patchify(np.asarray(noisy_target, dtype=self.dtype), cfg.patch)
        ref = patchify(np.asarray(reference, dtype=self.dtype), cfg.patch)
        view = self.params["view_embed"]
        x = self._linear(ag.Tensor(xt), "patch") + pos + view[0]
        r = self._linear(ag.Tensor(ref), "patch") + pos + view[1]
        c = ag.embedding(self.params["cond_embed"], condition_ids) + view[2]
        return x, ag.concat([r, c], axis=1)

    def forward(self, noisy_target, reference, condition_ids, t, detach_capture: bool = False):
        """Predict noise for a batch.

        ``noisy_target`` and ``reference`` are ``(B, H, W, C)`` arrays in the
        model's pixel scale, ``condition_ids`` is ``(B, 4)`` and ``t`` holds
        integer timesteps. Returns ``(eps_hat, capture)`` where ``eps_hat``
        has the patchified target layout ``(B, L0, P*P*C)``.
        """
        cfg = self.config
        noisy_target = np.asarray(noisy_target)
        reference = np.asarray(reference)
        condition_ids = np.asarray(condition_ids, dtype=np.int64)
        if noisy_target.ndim == 3:
            noisy_target, reference = noisy_target[None], reference[None]
            condition_ids = condition_ids.reshape(1, -1)
        batch = noisy_target.shape[0]
        expect = (cfg.height, cfg.width, cfg.channels)
        if noisy_target.shape[1:] != expect or reference.shape != noisy_target.shape:
            raise DimensionError(f"expected images of shape (B, {expect}), got "
                                 f"{noisy_target.shape} and {reference.shape}")
        if condition_ids.shape != (batch, cfg.cond_len):
            raise DimensionError(f"condition ids shape {condition_ids.shape} != {(batch, cfg.cond_len)}")
        if condition_ids.min() < 0 or condition_ids.max() >= cfg.vocab:
            raise ParameterError("condition id outside the vocabulary")
        t = np.broadcast_to(np.asarray(t), (batch,))
        if np.any(t < 0) or np.any(t >= cfg.t_train) or np.any(t != np.floor(t)):
            raise ParameterError(f"timesteps must be integers in [0, {cfg.t_train})")

        temb = self._time_mlp(ag.Tensor(timestep_embedding(t, cfg.dim).astype(self.dtype)))
        cond_vec = ag.silu(temb)

        x, c = self.embed_inputs(noisy_target, reference, condition_ids)
        xs = {"x": x, "c": c}
        captures = {}
        wanted = (cfg.supervised_block, *cfg.extra_supervised_blocks)
        for b in range(cfg.blocks):
            xs, attn = self._block(b, xs, cond_vec, batch)
            if b in wanted:
                captures[b] = self._capture(attn, b, detach_capture)
        d = cfg.dim
        fm = self._linear(cond_vec, "final.mod").reshape(batch, 1, 2 * d)
        h = self._modulate(xs["x"], fm[:, :, :d], fm[:, :, d:])
        eps = self._linear(h, "final")
        main = captures[cfg.supervised_block]
        main.others = [captures[b] for b in cfg.extra_supervised_blocks]
        return eps, main

    __call__ = forward
