"""Small convolutional noise predictor with forward-mode tangents.

Layout (channels-last internally, ``W`` = width)::

    h1 = silu(conv3x3(x) + b1 + time_proj1)            side x side, W
    h2 = silu(conv3x3/2(h1) + b2 + time_proj2)         side/2,      2W
    g  = silu(dense(flatten(h2)) + bg1 + time_proj3)   hidden
    h3 = upsample2(silu(conv3x3(h2) + b3 + dense(g)))  side,        W
    out = conv3x3(h3 + h1) + b4                        side,        C

The dense bottleneck ``g`` (absent when ``hidden`` is 0) sees the whole
image, which the convolutions alone cannot at 16 x 16.

Every layer is written once over :class:`Dual` values, so the plain
prediction and the primal half of a tangent prediction execute the same
floating-point operations.  Batch rows never interact: each matmul sees a
fixed per-row shape, which keeps outputs identical whatever the batch size.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .._util import make_rng, record
from ..errors import ConfigError


@dataclass(frozen=True)
class Architecture:
    channels: int = 1
    side: int = 16
    width: int = 16
    n_freqs: int = 16
    hidden: int = 128

    def __post_init__(self):
        if self.side % 2:
            raise ConfigError(f"image side must be even, got {self.side}")
        if min(self.channels, self.width, self.n_freqs) < 1 or self.hidden < 0:
            raise ConfigError("architecture sizes must be positive")

    def shapes(self):
        C, W, E, G = self.channels, self.width, 2 * self.n_freqs, self.hidden
        half = (self.side // 2) ** 2
        glob = ()
        if G:
            glob = (
                ("wt3", (E, G)),
                ("wg1", (half * 2 * W, G)),
                ("bg1", (G,)),
                ("wg2", (G, half * W)),
                ("bg2", (half * W,)),
            )
        return glob + (
            ("wt1", (E, W)),
            ("wt2", (E, 2 * W)),
            ("k1", (3, 3, C, W)),
            ("b1", (W,)),
            ("k2", (3, 3, W, 2 * W)),
            ("b2", (2 * W,)),
            ("k3", (3, 3, 2 * W, W)),
            ("b3", (W,)),
            ("k4", (3, 3, W, C)),
            ("b4", (C,)),
        )

    @property
    def n_params(self):
        return sum(int(np.prod(s)) for _, s in self.shapes())

    def to_json(self):
        return {"channels": self.channels, "side": self.side, "width": self.width, "n_freqs": self.n_freqs,
                "hidden": self.hidden}


@dataclass(frozen=True, eq=False)
class DenoiserParams:
    arch: Architecture
    flat: np.ndarray  # float32, length arch.n_params

    def __post_init__(self):
        flat = np.ascontiguousarray(self.flat, dtype=np.float32)
        if flat.shape != (self.arch.n_params,):
            raise ConfigError(f"parameter vector has {flat.size} entries, architecture needs {self.arch.n_params}")
        if not np.all(np.isfinite(flat)):
            raise ConfigError("parameters must be finite")
        flat.setflags(write=False)
        object.__setattr__(self, "flat", flat)

    def tensors(self, dtype=np.float32):
        flat = self.flat if dtype == np.float32 else self.flat.astype(dtype)
        return unflatten(self.arch, flat)

    @cached_property
    def f64(self):
        return self.tensors(np.float64)

    def __eq__(self, other):
        return (isinstance(other, DenoiserParams) and self.arch == other.arch
                and np.array_equal(self.flat, other.flat))

    __hash__ = None


def unflatten(arch, flat):
    out, pos = {}, 0
    for name, shape in arch.shapes():
        size = int(np.prod(shape))
        out[name] = flat[pos:pos + size].reshape(shape)
        pos += size
    return out


def flatten(arch, tensors):
    return np.concatenate([np.asarray(tensors[name], dtype=np.float32).ravel() for name, _ in arch.shapes()])


def init_params(arch, seed):
    rng = make_rng(seed, "init")
    tensors = {}
    for name, shape in arch.shapes():
        if name.startswith("b"):
            tensors[name] = np.zeros(shape)
        elif name.startswith("wt"):
            tensors[name] = rng.standard_normal(shape) * (0.5 / np.sqrt(shape[0]))
        elif name == "wg1":
            tensors[name] = rng.standard_normal(shape) * (np.sqrt(2.0) / np.sqrt(shape[0]))
        elif name == "wg2":
            tensors[name] = rng.standard_normal(shape) * (0.5 / np.sqrt(shape[0]))
        else:
            fan_in = 9 * shape[2]
            gain = 0.5 if name == "k4" else np.sqrt(2.0)
            tensors[name] = rng.standard_normal(shape) * (gain / np.sqrt(fan_in))
    return DenoiserParams(arch, flatten(arch, tensors))


# -- building blocks ------------------------------------------------------------


def time_embedding(t, n_freqs, dtype=np.float64):
    freqs = np.exp(-np.log(10000.0) * np.arange(n_freqs) / n_freqs)
    arg = np.multiply.outer(np.asarray(t, dtype=np.float64), freqs)
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1).astype(dtype)


def _dense(e, w):
    # einsum without optimize stays off BLAS, so a single row is computed
    # exactly as it would be inside a larger batch
    return np.einsum("...f,fw->...w", e, w)


def _conv(x, k, stride=1):
    """3x3 'same' convolution (zero padded) on NHWC input, no bias."""
    B, H, W, _ = x.shape
    Ho, Wo = H // stride, W // stride
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = None
    for i in range(3):
        for j in range(3):
            part = xp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :] @ k[i, j]
            out = part if out is None else out + part
    return out


def _conv_backward(x, k, dy, stride=1, need_dx=True):
    B, H, W, _ = x.shape
    Ho, Wo = dy.shape[1:3]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    dk = np.empty_like(k)
    dxp = np.zeros_like(xp) if need_dx else None
    for i in range(3):
        for j in range(3):
            sl = (slice(None), slice(i, i + stride * Ho, stride), slice(j, j + stride * Wo, stride))
            dk[i, j] = np.tensordot(xp[sl], dy, axes=([0, 1, 2], [0, 1, 2]))
            if need_dx:
                dxp[sl] += dy @ k[i, j].T
    dx = dxp[:, 1:1 + H, 1:1 + W, :] if need_dx else None
    return dk, dx


def _sigmoid(a):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-a))


def _upsample(x):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def _downsample_sum(x):
    B, H, W, C = x.shape
    return x.reshape(B, H // 2, 2, W // 2, 2, C).sum(axis=(2, 4))


class Dual:
    """Primal value with an optional tangent (None means identically zero)."""

    __slots__ = ("v", "d")

    def __init__(self, v, d=None):
        self.v = v
        self.d = d

    def __add__(self, other):
        if isinstance(other, Dual):
            if self.d is None:
                d = other.d
            elif other.d is None:
                d = self.d
            else:
                d = self.d + other.d
            return Dual(self.v + other.v, d)
        return Dual(self.v + other, self.d)

    def conv(self, k, stride=1):
        return Dual(_conv(self.v, k, stride), None if self.d is None else _conv(self.d, k, stride))

    def silu(self):
        s = _sigmoid(self.v)
        d = None if self.d is None else self.d * (s * (1.0 + self.v * (1.0 - s)))
        return Dual(self.v * s, d)

    def upsample(self):
        return Dual(_upsample(self.v), None if self.d is None else _upsample(self.d))

    def scale(self, m):
        return Dual(self.v * m, None if self.d is None else self.d * m)

    def dense(self, w):
        return Dual(_dense(self.v, w), None if self.d is None else _dense(self.d, w))

    def reshape(self, shape):
        return Dual(self.v.reshape(shape), None if self.d is None else self.d.reshape(shape))


def _time_terms(p, t, n_freqs, dtype):
    e = time_embedding(t, n_freqs, dtype)
    p1, p2 = _dense(e, p["wt1"]), _dense(e, p["wt2"])
    p3 = _dense(e, p["wt3"]) if "wt3" in p else None
    if p1.ndim == 2:  # per-row timesteps
        return e, p1[:, None, None, :], p2[:, None, None, :], p3
    return e, p1, p2, p3


def _network(p, x, t, n_freqs, x_dot=None, drop=None, keep=False):
    """Run the network on NHWC ``x``; returns (out Dual, cache or None)."""
    _, tp1, tp2, tp3 = _time_terms(p, t, n_freqs, x.dtype)
    xin = Dual(x, x_dot)
    a1 = xin.conv(p["k1"]) + (p["b1"] + tp1)
    h1 = a1.silu()
    a2 = h1.conv(p["k2"], stride=2) + (p["b2"] + tp2)
    h2 = a2.silu()
    if drop is not None:
        h2 = h2.scale(drop)
    a3 = h2.conv(p["k3"]) + p["b3"]
    gin = ag = gh = None
    if tp3 is not None:
        B, hh, ww, _ = h2.v.shape
        gin = h2.reshape((B, -1))
        ag = gin.dense(p["wg1"]) + (p["bg1"] + tp3)
        gh = ag.silu()
        go = gh.dense(p["wg2"]) + p["bg2"]
        a3 = a3 + go.reshape((B, hh, ww, -1))
    h3 = a3.silu().upsample()
    h4 = h3 + h1
    out = h4.conv(p["k4"]) + p["b4"]
    cache = None
    if keep:
        cache = {"x": x, "a1": a1.v, "h1": h1.v, "a2": a2.v, "h2": h2.v, "a3": a3.v, "h4": h4.v}
        if gin is not None:
            cache.update(gin=gin.v, ag=ag.v, gh=gh.v)
    return out, cache


def _nchw_to_nhwc(x):
    return np.ascontiguousarray(np.moveaxis(x, 1, -1))


def _nhwc_to_nchw(x):
    return np.ascontiguousarray(np.moveaxis(x, -1, 1))


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    return (x[None] if single else x), single


def predict(params, x, t):
    """Predicted noise for ``x`` (C,H,W or B,C,H,W) at timestep ``t`` (float64)."""
    xb, single = _as_batch(x)
    record(calls=xb.shape[0])
    out, _ = _network(params.f64, _nchw_to_nhwc(xb), t, params.arch.n_freqs)
    y = _nhwc_to_nchw(out.v)
    return y[0] if single else y


def tangent_predict(params, x, x_dot, t):
    """Prediction and its directional derivative along ``x_dot``.

    The primal output is bit-identical to :func:`predict`.
    """
    xb, single = _as_batch(x)
    db, _ = _as_batch(x_dot)
    if db.shape != xb.shape:
        raise ConfigError(f"tangent shape {db.shape} does not match input {xb.shape}")
    record(tangent_calls=xb.shape[0])
    out, _ = _network(params.f64, _nchw_to_nhwc(xb), t, params.arch.n_freqs, x_dot=_nchw_to_nhwc(db))
    y = _nhwc_to_nchw(out.v)
    dy = np.zeros_like(y) if out.d is None else _nhwc_to_nchw(out.d)
    return (y[0], dy[0]) if single else (y, dy)


def loss_and_grad(p, n_freqs, x, t, target, drop=None):
    """Mean squared error of the prediction and its parameter gradient.

    ``x`` and ``target`` are NHWC; ``t`` holds one timestep per row.
    """
    out, c = _network(p, x, t, n_freqs, drop=drop, keep=True)
    diff = out.v - target
    loss = float(np.mean(diff * diff, dtype=np.float64))
    dout = diff * (2.0 / diff.size)
    g = {"b4": dout.sum(axis=(0, 1, 2))}
    g["k4"], dh4 = _conv_backward(c["h4"], p["k4"], dout)
    dh1 = dh4
    s3 = _sigmoid(c["a3"])
    da3 = _downsample_sum(dh4) * (s3 * (1.0 + c["a3"] * (1.0 - s3)))
    g["b3"] = da3.sum(axis=(0, 1, 2))
    g["k3"], dh2 = _conv_backward(c["h2"], p["k3"], da3)
    e = time_embedding(t, n_freqs, x.dtype)
    if "gin" in c:
        dgo = da3.reshape(da3.shape[0], -1)
        g["bg2"] = dgo.sum(axis=0)
        g["wg2"] = c["gh"].T @ dgo
        sg = _sigmoid(c["ag"])
        dag = (dgo @ p["wg2"].T) * (sg * (1.0 + c["ag"] * (1.0 - sg)))
        g["bg1"] = dag.sum(axis=0)
        g["wg1"] = c["gin"].T @ dag
        g["wt3"] = e.T @ dag
        dh2 = dh2 + (dag @ p["wg1"].T).reshape(dh2.shape)
    if drop is not None:
        dh2 = dh2 * drop
    s2 = _sigmoid(c["a2"])
    da2 = dh2 * (s2 * (1.0 + c["a2"] * (1.0 - s2)))
    g["b2"] = da2.sum(axis=(0, 1, 2))
    g["k2"], dh1_from2 = _conv_backward(c["h1"], p["k2"], da2, stride=2)
    dh1 = dh1 + dh1_from2
    s1 = _sigmoid(c["a1"])
    da1 = dh1 * (s1 * (1.0 + c["a1"] * (1.0 - s1)))
    g["b1"] = da1.sum(axis=(0, 1, 2))
    g["k1"], _ = _conv_backward(c["x"], p["k1"], da1, need_dx=False)
    g["wt1"] = e.T @ da1.sum(axis=(1, 2))
    g["wt2"] = e.T @ da2.sum(axis=(1, 2))
    return loss, g
