"""Two-encoder, multi-decoder segmentation network.

Layout for ``L`` levels with widths ``w[0] < ... < w[L-1]``:

* two encoders (T1, T2), level ``l``: conv3x3 -> lrelu -> conv3x3 -> lrelu
  (skip feature ``f_l``), then 2x2 max-pool;
* a shared bottleneck on the concatenated deepest pooled features:
  conv3x3 -> lrelu -> conv3x3 -> lrelu, ``2 * w[L-1]`` channels;
* one decoder per output track, level ``l = L-1 .. 0``: nearest 2x
  upsample, concatenate with both encoders' ``f_l``, conv3x3 -> lrelu
  (``w[l]`` channels); then conv1x1 -> sigmoid.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..volcore import TISSUES
from . import layers as L

AXES = ("axial", "sagittal", "coronal")
#: Output-track code of the optional whole-head decoder.
HEAD_TRACK = 16


def tissue_groups(group_size: int = 4, include_head: bool = True) -> list[tuple[int, ...]]:
    """Split the 15 tissues into decoder groups in code order.

    The whole-head track, when requested, is appended to the last group.
    """
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    codes = [int(t) for t in TISSUES]
    groups = [tuple(codes[i:i + group_size]) for i in range(0, len(codes), group_size)]
    if include_head:
        groups[-1] = groups[-1] + (HEAD_TRACK,)
    return groups


@dataclass
class NetworkConfig:
    slice_edge: int = 64
    levels: int = 3
    widths: tuple[int, ...] = (8, 16, 32)
    tracks: tuple[int, ...] = (6, 7, 10)
    axis: str = "axial"
    slope: float = 0.01
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.tracks = tuple(int(t) for t in self.tracks)
        if len(self.tracks) < 1:
            raise ValueError("need at least one decoder track")
        if len(set(self.tracks)) != len(self.tracks):
            raise ValueError(f"duplicate decoder tracks {self.tracks}")
        valid = {int(t) for t in TISSUES} | {HEAD_TRACK}
        bad = [t for t in self.tracks if t not in valid]
        if bad:
            raise ValueError(f"invalid decoder tracks {bad}")
        if self.levels < 1 or len(self.widths) != self.levels:
            raise ValueError(f"widths {self.widths} must have one entry per level ({self.levels})")
        if any(b <= a for a, b in zip(self.widths, self.widths[1:])) or self.widths[0] < 1:
            raise ValueError(f"widths must be positive and strictly increasing, got {self.widths}")
        if self.slice_edge % (2 ** self.levels):
            raise ValueError(f"slice edge {self.slice_edge} is not divisible by 2**{self.levels}")
        if self.axis not in AXES:
            raise ValueError(f"axis must be one of {AXES}, got {self.axis!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def n_decoders(self) -> int:
        return len(self.tracks)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["tracks"] = list(self.tracks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


def _param_shapes(cfg: NetworkConfig) -> dict[str, tuple[int, ...]]:
    w = cfg.widths
    shapes = {}
    for e in ("t1", "t2"):
        cin = 1
        for lev in range(cfg.levels):
            shapes[f"enc_{e}.{lev}.conv0.w"] = (3, 3, cin, w[lev])
            shapes[f"enc_{e}.{lev}.conv0.b"] = (w[lev],)
            shapes[f"enc_{e}.{lev}.conv1.w"] = (3, 3, w[lev], w[lev])
            shapes[f"enc_{e}.{lev}.conv1.b"] = (w[lev],)
            cin = w[lev]
    wb = 2 * w[-1]
    shapes["bottleneck.conv0.w"] = (3, 3, 2 * w[-1], wb)
    shapes["bottleneck.conv0.b"] = (wb,)
    shapes["bottleneck.conv1.w"] = (3, 3, wb, wb)
    shapes["bottleneck.conv1.b"] = (wb,)
    for d in range(cfg.n_decoders):
        cin = wb
        for lev in reversed(range(cfg.levels)):
            shapes[f"dec{d}.{lev}.conv.w"] = (3, 3, cin + 2 * w[lev], w[lev])
            shapes[f"dec{d}.{lev}.conv.b"] = (w[lev],)
            cin = w[lev]
        shapes[f"dec{d}.out.w"] = (w[0], 1)
        shapes[f"dec{d}.out.b"] = (1,)
    return shapes


@dataclass
class NetworkModel:
    config: NetworkConfig
    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        shapes = _param_shapes(self.config)
        if set(shapes) != set(self.params):
            missing = sorted(set(shapes) - set(self.params))
            extra = sorted(set(self.params) - set(shapes))
            raise ValueError(f"parameter set mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        dt = np.dtype(self.config.dtype)
        for store in (self.m, self.v):
            for name in shapes:
                store.setdefault(name, np.zeros(shapes[name], dtype=dt))
        for name, shape in shapes.items():
            for store in (self.params, self.m, self.v):
                if store[name].shape != shape:
                    raise ValueError(f"{name}: shape {store[name].shape} does not match config {shape}")

    @classmethod
    def init(cls, config: NetworkConfig) -> "NetworkModel":
        """Fan-in scaled uniform weights (limit sqrt(6 / fan_in)), zero biases."""
        rng = np.random.default_rng(config.seed)
        dt = np.dtype(config.dtype)
        params = {}
        for name, shape in _param_shapes(config).items():
            if name.endswith(".b"):
                params[name] = np.zeros(shape, dtype=dt)
            else:
                fan_in = int(np.prod(shape[:-1]))
                lim = np.sqrt(6.0 / fan_in)
                params[name] = rng.uniform(-lim, lim, size=shape).astype(dt)
        return cls(config, params)

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


def _check_inputs(model, t1, t2):
    cfg = model.config
    for name, x in (("t1", t1), ("t2", t2)):
        if x.ndim != 3 or x.shape[1:] != (cfg.slice_edge, cfg.slice_edge):
            raise ValueError(
                f"input layer enc_{name}: expected slices of shape (N, {cfg.slice_edge}, {cfg.slice_edge}), got {x.shape}")
    if t1.shape != t2.shape:
        raise ValueError(f"input layer: T1 {t1.shape} and T2 {t2.shape} stacks differ")


def forward(model: NetworkModel, t1: np.ndarray, t2: np.ndarray, keep_cache: bool = False):
    """Per-decoder probabilities for a stack of slice pairs.

    ``t1`` and ``t2`` are ``(N, H, W)``; the result is ``(N, H, W, D)`` with
    ``D`` decoder tracks in config order. With ``keep_cache`` the tuple
    ``(probs, cache)`` is returned for :func:`backward`.
    """
    cfg = model.config
    p = model.params
    dt = np.dtype(cfg.dtype)
    t1 = np.asarray(t1, dtype=dt)
    t2 = np.asarray(t2, dtype=dt)
    _check_inputs(model, t1, t2)
    cache = {}
    skips = {}
    pooled = {}
    for e, x in (("t1", t1[..., None]), ("t2", t2[..., None])):
        for lev in range(cfg.levels):
            for k in range(2):
                key = f"enc_{e}.{lev}.conv{k}"
                x, cache[key] = L.conv3x3_forward(x, p[key + ".w"], p[key + ".b"])
                x, cache[key + ".act"] = L.lrelu_forward(x, cfg.slope)
            skips[(e, lev)] = x
            x, cache[f"enc_{e}.{lev}.pool"] = L.maxpool_forward(x)
        pooled[e] = x
    x = np.concatenate([pooled["t1"], pooled["t2"]], axis=-1)
    for k in range(2):
        key = f"bottleneck.conv{k}"
        x, cache[key] = L.conv3x3_forward(x, p[key + ".w"], p[key + ".b"])
        x, cache[key + ".act"] = L.lrelu_forward(x, cfg.slope)
    bott = x
    skip_cat = {lev: np.concatenate([skips[("t1", lev)], skips[("t2", lev)]], axis=-1)
                for lev in range(cfg.levels)}
    outs = []
    for d in range(cfg.n_decoders):
        x = bott
        for lev in reversed(range(cfg.levels)):
            x, cache[f"dec{d}.{lev}.up"] = L.upsample_forward(x)
            cache[f"dec{d}.{lev}.split"] = x.shape[-1]
            x = np.concatenate([x, skip_cat[lev]], axis=-1)
            key = f"dec{d}.{lev}.conv"
            x, cache[key] = L.conv3x3_forward(x, p[key + ".w"], p[key + ".b"])
            x, cache[key + ".act"] = L.lrelu_forward(x, cfg.slope)
        z, cache[f"dec{d}.out"] = L.conv1x1_forward(x, p[f"dec{d}.out.w"], p[f"dec{d}.out.b"])
        outs.append(z[..., 0])
    probs = L.sigmoid(np.stack(outs, axis=-1))
    if keep_cache:
        cache["probs"] = probs
        return probs, cache
    return probs


def loss(pred: np.ndarray, target: np.ndarray):
    """Mean binary cross-entropy over all decoders and pixels, with gradient."""
    return L.bce_loss(pred, target)


def backward(model: NetworkModel, cache: dict, targets: np.ndarray):
    """Loss and parameter gradients for the batch cached by :func:`forward`.

    The sigmoid and cross-entropy are differentiated jointly, giving
    ``(p - t) / count`` at the logits; this equals the chain rule through
    :func:`loss` wherever predictions are not clamped.
    """
    cfg = model.config
    p = model.params
    probs = cache["probs"]
    targets = np.asarray(targets, dtype=probs.dtype)
    if targets.shape != probs.shape:
        raise ValueError(f"targets shape {targets.shape} does not match predictions {probs.shape}")
    value, _ = L.bce_loss(probs, targets)
    dz = (probs - targets) / probs.size
    grads = {}
    dskip = {lev: 0.0 for lev in range(cfg.levels)}
    dbott = 0.0
    for d in range(cfg.n_decoders):
        dx, grads[f"dec{d}.out.w"], grads[f"dec{d}.out.b"] = L.conv1x1_backward(
            dz[..., d:d + 1], cache[f"dec{d}.out"])
        for lev in range(cfg.levels):
            key = f"dec{d}.{lev}.conv"
            dx = L.lrelu_backward(dx, cache[key + ".act"])
            dx, grads[key + ".w"], grads[key + ".b"] = L.conv3x3_backward(dx, cache[key])
            split = cache[f"dec{d}.{lev}.split"]
            dskip[lev] = dskip[lev] + dx[..., split:]
            dx = L.upsample_backward(dx[..., :split], cache[f"dec{d}.{lev}.up"])
        dbott = dbott + dx
    dx = dbott
    for k in (1, 0):
        key = f"bottleneck.conv{k}"
        dx = L.lrelu_backward(dx, cache[key + ".act"])
        dx, grads[key + ".w"], grads[key + ".b"] = L.conv3x3_backward(dx, cache[key])
    half = dx.shape[-1] // 2
    dpooled = {"t1": dx[..., :half], "t2": dx[..., half:]}
    for ei, e in enumerate(("t1", "t2")):
        dx = dpooled[e]
        for lev in reversed(range(cfg.levels)):
            dx = L.maxpool_backward(dx, cache[f"enc_{e}.{lev}.pool"])
            w = cfg.widths[lev]
            dx = dx + dskip[lev][..., ei * w:(ei + 1) * w]
            for k in (1, 0):
                key = f"enc_{e}.{lev}.conv{k}"
                dx = L.lrelu_backward(dx, cache[key + ".act"])
                dx, grads[key + ".w"], grads[key + ".b"] = L.conv3x3_backward(dx, cache[key])
    return value, {name: grads[name].astype(p[name].dtype, copy=False) for name in p}


class NonFiniteGradientError(FloatingPointError):
    pass


def adam_step(model: NetworkModel, grads: dict, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> NetworkModel:
    """Bias-corrected ADAM update, applied in place; returns ``model``."""
    if model.step < 0:
        raise ValueError("step counter must be >= 0")
    bad = [n for n, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradientError(
            f"non-finite gradient in {len(bad)} tensor(s): {', '.join(bad[:5])}; step {model.step} aborted")
    t = model.step + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        m = model.m[name]
        v = model.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        model.params[name] -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(m.dtype, copy=False)
    model.step = t
    return model
