"""Noise-prediction network with hand-written backpropagation.

The network sees ``(z_t, t, content, f0, speaker)``:

* ``t`` enters through sinusoidal features of ``t/T`` and a learned projection.
* F0 bin indices are looked up in a 256-row melody table and averaged over frames.
* The content vector is projected and normalized with speaker-conditioned layer
  norm (SCLN): the speaker vector predicts the affine scale and shift.
* The null condition swaps the whole ``(content, f0 embedding, speaker)`` block for
  a single learned vector, so dropout and guidance drop all conditioning at once.

Everything is float64 and batched along the first axis.
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from .f0 import N_BINS

LN_EPS = 1e-5


class DivergenceError(FloatingPointError):
    """A loss or gradient went non-finite."""


class StaleCacheError(RuntimeError):
    pass


@dataclass
class Condition:
    """A batch of conditioning bundles, one row per latent.

    ``f0_bins`` holds quantized log-F0 indices per frame (bin 0 = unvoiced).
    Rows with ``is_null`` set are evaluated with the learned null embedding and
    their other fields are ignored.
    """

    content: np.ndarray
    f0_bins: np.ndarray
    speaker: np.ndarray
    is_null: np.ndarray

    def __post_init__(self):
        self.content = np.atleast_2d(np.asarray(self.content, dtype=np.float64))
        self.speaker = np.atleast_2d(np.asarray(self.speaker, dtype=np.float64))
        self.f0_bins = np.atleast_2d(np.asarray(self.f0_bins, dtype=np.int64))
        self.is_null = np.atleast_1d(np.asarray(self.is_null, dtype=bool))
        n = len(self.content)
        if not (len(self.speaker) == len(self.f0_bins) == len(self.is_null) == n):
            raise ValueError("condition fields disagree on batch size")
        if self.f0_bins.size and (self.f0_bins.min() < 0 or self.f0_bins.max() >= N_BINS):
            raise ValueError(f"f0 bins must lie in [0, {N_BINS - 1}]")

    @classmethod
    def single(cls, content, f0_bins, speaker, is_null: bool = False) -> "Condition":
        return cls(
            np.asarray(content, dtype=np.float64)[None],
            np.atleast_1d(np.asarray(f0_bins, dtype=np.int64))[None],
            np.asarray(speaker, dtype=np.float64)[None],
            np.array([is_null]),
        )

    def __len__(self) -> int:
        return len(self.content)

    def __getitem__(self, idx) -> "Condition":
        if isinstance(idx, (int, np.integer)):
            idx = [idx]
        return Condition(self.content[idx], self.f0_bins[idx], self.speaker[idx], self.is_null[idx])

    def repeat(self, n: int) -> "Condition":
        if len(self) != 1:
            raise ValueError("repeat() expects a single-row condition")
        return self[np.zeros(n, dtype=np.int64)]

    def as_null(self, mask=None) -> "Condition":
        """Copy with ``is_null`` set on all rows (or on rows where ``mask`` is true)."""
        flags = np.ones(len(self), bool) if mask is None else self.is_null | np.asarray(mask, bool)
        return replace(self, is_null=flags)

    def to_dict(self) -> dict:
        return {
            "content": self.content.tolist(),
            "f0_bins": self.f0_bins.tolist(),
            "speaker": self.speaker.tolist(),
            "is_null": self.is_null.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Condition":
        return cls(d["content"], d["f0_bins"], d["speaker"], d["is_null"])

    @staticmethod
    def concat(conds) -> "Condition":
        conds = list(conds)
        return Condition(
            np.concatenate([c.content for c in conds]),
            np.concatenate([c.f0_bins for c in conds]),
            np.concatenate([c.speaker for c in conds]),
            np.concatenate([c.is_null for c in conds]),
        )


@dataclass(frozen=True)
class ModelConfig:
    dim: int
    content_dim: int = 4
    speaker_dim: int = 4
    f0_emb_dim: int = 8
    t_freqs: int = 8
    t_emb_dim: int = 16
    cond_width: int = 32
    width: int = 128
    depth: int = 2

    def __post_init__(self):
        for name in ("dim", "content_dim", "speaker_dim", "f0_emb_dim", "t_freqs", "t_emb_dim", "cond_width", "width"):
            if getattr(self, name) < 1:
                raise ValueError(f"model.{name} must be >= 1")
        if not 1 <= self.depth <= 4:
            raise ValueError("model.depth must be in 1..4")

    @property
    def block_dim(self) -> int:
        return self.content_dim + self.f0_emb_dim + self.speaker_dim

    @property
    def input_dim(self) -> int:
        return self.dim + self.t_emb_dim + self.cond_width + self.f0_emb_dim + self.speaker_dim


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {
        "t_proj.w": (2 * cfg.t_freqs, cfg.t_emb_dim),
        "t_proj.b": (cfg.t_emb_dim,),
        "f0_table": (N_BINS, cfg.f0_emb_dim),
        "null_embed": (cfg.block_dim,),
        "content_proj.w": (cfg.content_dim, cfg.cond_width),
        "content_proj.b": (cfg.cond_width,),
        "scln.scale.w": (cfg.speaker_dim, cfg.cond_width),
        "scln.scale.b": (cfg.cond_width,),
        "scln.shift.w": (cfg.speaker_dim, cfg.cond_width),
        "scln.shift.b": (cfg.cond_width,),
    }
    fan_in = cfg.input_dim
    for i in range(cfg.depth):
        shapes[f"layers.{i}.w"] = (fan_in, cfg.width)
        shapes[f"layers.{i}.b"] = (cfg.width,)
        fan_in = cfg.width
    shapes["out.w"] = (cfg.width, cfg.dim)
    shapes["out.b"] = (cfg.dim,)
    return shapes


def time_frequencies(cfg: ModelConfig) -> np.ndarray:
    return np.geomspace(1.0, 64.0, cfg.t_freqs)


_model_ids = itertools.count()


class DenoiserModel:
    """Parameters of the noise predictor plus the schedule length it was built for."""

    def __init__(self, cfg: ModelConfig, T: int, params: dict[str, np.ndarray]):
        shapes = param_shapes(cfg)
        if set(params) != set(shapes):
            raise ValueError(f"parameter names mismatch: {sorted(set(params) ^ set(shapes))}")
        for name, shape in shapes.items():
            if params[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {params[name].shape}")
        self.cfg = cfg
        self.T = int(T)
        self.params = {name: np.array(params[name], dtype=np.float64) for name in shapes}
        self.freqs = time_frequencies(cfg)
        self.version = 0
        self.uid = next(_model_ids)

    @classmethod
    def init(cls, cfg: ModelConfig, T: int, seed: int = 0) -> "DenoiserModel":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in param_shapes(cfg).items():
            if name.startswith(("out.", "scln.")) or name.endswith(".b"):
                params[name] = np.zeros(shape)
            elif name in ("f0_table", "null_embed"):
                params[name] = rng.standard_normal(shape)
            else:
                params[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
        return cls(cfg, T, params)

    def copy(self) -> "DenoiserModel":
        return DenoiserModel(self.cfg, self.T, self.params)

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        return h.hexdigest()

    @property
    def dim(self) -> int:
        return self.cfg.dim

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def predict(self, z_t, t, c: Condition) -> np.ndarray:
        return eval_model(self, z_t, t, c)[0]


@dataclass
class ActivationCache:
    model_uid: int
    version: int
    feats: np.ndarray
    bins: np.ndarray
    null: np.ndarray
    block: np.ndarray
    nhat: np.ndarray
    inv_std: np.ndarray
    scale: np.ndarray
    x: np.ndarray
    pre: list = field(default_factory=list)
    post: list = field(default_factory=list)


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _broadcast_t(t, n: int, T: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    if t.ndim == 0:
        t = np.full(n, int(t))
    if t.shape != (n,):
        raise ValueError(f"t must be scalar or shape ({n},), got {t.shape}")
    if t.min() < 0 or t.max() > T:
        raise IndexError(f"step out of range [0, {T}]")
    return t


def _layer_norm(p):
    mu = p.mean(axis=-1, keepdims=True)
    d = p - mu
    inv_std = 1.0 / np.sqrt((d * d).mean(axis=-1, keepdims=True) + LN_EPS)
    return d * inv_std, inv_std


def _layer_norm_backward(dnhat, nhat, inv_std):
    return inv_std * (
        dnhat - dnhat.mean(axis=-1, keepdims=True) - nhat * (dnhat * nhat).mean(axis=-1, keepdims=True)
    )


def scln_forward(h, speaker, params: dict[str, np.ndarray], prefix: str = "scln.") -> np.ndarray:
    """Speaker-conditioned layer norm: ``(1 + scale(e)) * LN(h) + shift(e)``."""
    nhat, _ = _layer_norm(np.asarray(h, dtype=np.float64))
    e = np.asarray(speaker, dtype=np.float64)
    scale = e @ params[prefix + "scale.w"] + params[prefix + "scale.b"]
    shift = e @ params[prefix + "shift.w"] + params[prefix + "shift.b"]
    return (1.0 + scale) * nhat + shift


def scln_backward(h, speaker, params, dout, prefix: str = "scln."):
    """Gradients of ``sum(dout * scln_forward(h, speaker))`` w.r.t. h, speaker and params."""
    h = np.asarray(h, dtype=np.float64)
    e = np.asarray(speaker, dtype=np.float64)
    nhat, inv_std = _layer_norm(h)
    scale = e @ params[prefix + "scale.w"] + params[prefix + "scale.b"]
    dscale = dout * nhat
    dh = _layer_norm_backward(dout * (1.0 + scale), nhat, inv_std)
    de = dscale @ params[prefix + "scale.w"].T + dout @ params[prefix + "shift.w"].T
    grads = {
        prefix + "scale.w": np.atleast_2d(e).T @ np.atleast_2d(dscale),
        prefix + "scale.b": np.atleast_2d(dscale).sum(axis=0),
        prefix + "shift.w": np.atleast_2d(e).T @ np.atleast_2d(dout),
        prefix + "shift.b": np.atleast_2d(dout).sum(axis=0),
    }
    return dh, de, grads


def eval_model(m: DenoiserModel, z_t, t, c: Condition) -> tuple[np.ndarray, ActivationCache]:
    """Predict the noise in ``z_t``; returns ``(eps_hat, cache)`` for :func:`backward`."""
    cfg, P = m.cfg, m.params
    z = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
    n = len(z)
    if z.shape[1] != cfg.dim:
        raise ValueError(f"latent dim {z.shape[1]} does not match model dim {cfg.dim}")
    if len(c) != n:
        raise ValueError(f"condition batch {len(c)} does not match latent batch {n}")
    if c.content.shape[1] != cfg.content_dim or c.speaker.shape[1] != cfg.speaker_dim:
        raise ValueError("condition dimensions do not match the model")
    t = _broadcast_t(t, n, m.T)

    arg = (t / m.T)[:, None] * m.freqs[None, :]
    feats = np.concatenate([np.sin(arg), np.cos(arg)], axis=1)
    temb = feats @ P["t_proj.w"] + P["t_proj.b"]

    f0e = P["f0_table"][c.f0_bins].mean(axis=1)
    block = np.concatenate([c.content, f0e, c.speaker], axis=1)
    null = c.is_null
    if null.any():
        block[null] = P["null_embed"]
    cd, fd = cfg.content_dim, cfg.f0_emb_dim
    b_content, b_f0, b_spk = block[:, :cd], block[:, cd:cd + fd], block[:, cd + fd:]

    p = b_content @ P["content_proj.w"] + P["content_proj.b"]
    nhat, inv_std = _layer_norm(p)
    scale = b_spk @ P["scln.scale.w"] + P["scln.scale.b"]
    shift = b_spk @ P["scln.shift.w"] + P["scln.shift.b"]
    q = (1.0 + scale) * nhat + shift

    x = np.concatenate([z, temb, q, b_f0, b_spk], axis=1)
    cache = ActivationCache(m.uid, m.version, feats, c.f0_bins, null, block, nhat, inv_std, scale, x)
    h = x
    for i in range(cfg.depth):
        a = h @ P[f"layers.{i}.w"] + P[f"layers.{i}.b"]
        h = a * _sigmoid(a)
        cache.pre.append(a)
        cache.post.append(h)
    out = h @ P["out.w"] + P["out.b"]
    return out, cache


def backward(m: DenoiserModel, cache: ActivationCache, grad_out) -> dict[str, np.ndarray]:
    """Parameter gradients of a scalar loss whose gradient w.r.t. ``eps_hat`` is ``grad_out``."""
    if cache.model_uid != m.uid or cache.version != m.version:
        raise StaleCacheError("activation cache does not belong to this model state")
    cfg, P = m.cfg, m.params
    g = np.atleast_2d(np.asarray(grad_out, dtype=np.float64))
    if g.shape != (len(cache.x), cfg.dim):
        raise ValueError(f"grad_out shape {g.shape} does not match cached batch")
    grads: dict[str, np.ndarray] = {}

    h_last = cache.post[-1]
    grads["out.w"] = h_last.T @ g
    grads["out.b"] = g.sum(axis=0)
    dh = g @ P["out.w"].T
    for i in reversed(range(cfg.depth)):
        a = cache.pre[i]
        s = _sigmoid(a)
        da = dh * (s + a * s * (1.0 - s))
        h_prev = cache.post[i - 1] if i > 0 else cache.x
        grads[f"layers.{i}.w"] = h_prev.T @ da
        grads[f"layers.{i}.b"] = da.sum(axis=0)
        dh = da @ P[f"layers.{i}.w"].T

    dx = dh
    o = cfg.dim
    dtemb = dx[:, o:o + cfg.t_emb_dim]
    o += cfg.t_emb_dim
    dq = dx[:, o:o + cfg.cond_width]
    o += cfg.cond_width
    db_f0 = dx[:, o:o + cfg.f0_emb_dim].copy()
    o += cfg.f0_emb_dim
    db_spk = dx[:, o:o + cfg.speaker_dim].copy()

    grads["t_proj.w"] = cache.feats.T @ dtemb
    grads["t_proj.b"] = dtemb.sum(axis=0)

    cd, fd = cfg.content_dim, cfg.f0_emb_dim
    b_content, b_spk = cache.block[:, :cd], cache.block[:, cd + fd:]
    dscale = dq * cache.nhat
    grads["scln.scale.w"] = b_spk.T @ dscale
    grads["scln.scale.b"] = dscale.sum(axis=0)
    grads["scln.shift.w"] = b_spk.T @ dq
    grads["scln.shift.b"] = dq.sum(axis=0)
    db_spk += dscale @ P["scln.scale.w"].T + dq @ P["scln.shift.w"].T
    dp = _layer_norm_backward(dq * (1.0 + cache.scale), cache.nhat, cache.inv_std)
    grads["content_proj.w"] = b_content.T @ dp
    grads["content_proj.b"] = dp.sum(axis=0)
    db_content = dp @ P["content_proj.w"].T

    null = cache.null
    dblock = np.concatenate([db_content, db_f0, db_spk], axis=1)
    grads["null_embed"] = dblock[null].sum(axis=0) if null.any() else np.zeros(cfg.block_dim)

    table = np.zeros_like(P["f0_table"])
    live = ~null
    if live.any():
        bins = cache.bins[live]
        frames = bins.shape[1]
        contrib = np.repeat(db_f0[live] / frames, frames, axis=0)
        np.add.at(table, bins.reshape(-1), contrib)
    grads["f0_table"] = table
    return grads


def assert_finite(m: DenoiserModel) -> None:
    for name, p in m.params.items():
        if not np.all(np.isfinite(p)):
            raise DivergenceError(f"parameter {name} is non-finite")
