"""Differential ablation.

The sample G(f.c, eps) is differentiated with respect to the ensemble
coefficients c at c = u (all ones) by pushing forward-mode tangents through
the whole sampling trajectory, one pass per coefficient.  Any ablation is
then approximated as y + J (c - u).
"""

import math
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import stats
from ._util import parallel_map, record
from .diffusion import tangent_predict, update
from .diffusion.sampler import _check_mode, initial_state, step_coefficients
from .ensemble import accumulate, finish, mask_to_coefficients
from .errors import (BadMagic, ChecksumMismatch, ComputeError, ConfigError, DataError, NonFiniteError,
                     TruncatedFile)
from .landscape import CounterfactualLandscape, generate_factual, get_metric

MAGIC = b"ABCJ"
VERSION = 1
MODE_FLAGS = {"deterministic": 0, "ancestral": 1}


@dataclass(frozen=True, eq=False)
class SampleJacobian:
    J: np.ndarray  # (m, n)
    y: np.ndarray  # base sample, image shaped
    eps_seed: int
    mode: str = "deterministic"

    def __post_init__(self):
        if self.J.ndim != 2 or self.J.shape[0] != self.y.size:
            raise ConfigError(f"Jacobian shape {self.J.shape} does not fit a sample of {self.y.size} values")
        if not np.all(np.isfinite(self.J)):
            raise DataError("Jacobian has non-finite entries")

    @property
    def n(self):
        return self.J.shape[1]

    @property
    def m(self):
        return self.J.shape[0]


def _column(e, noise, mode, j):
    """Primal trajectory and its tangent along c_j, at c = u."""
    n = e.n
    u = np.ones(n)
    x = initial_state(noise, 1)
    xd = np.zeros_like(x)
    for k, t in enumerate(e.schedule.ladder):
        m = total = None
        ed = np.zeros_like(x)
        fj = None
        for i, member in enumerate(e.members):
            f, fd = tangent_predict(member, x, xd, t)
            # same fold as predict_rows so the primal stays bit-identical
            m, total = accumulate(m, 0.0 if total is None else total, f[0], u[i])
            ed = ed + fd * (1.0 / n)
            if i == j:
                fj = f
        eps_hat = finish(m, u, n)[None]
        ed = ed + fj * (1.0 / n)
        ab_t, ab_prev, sigma = step_coefficients(e.schedule, k, mode)
        z = noise.z[k] if mode == "ancestral" else None
        x = update(x, eps_hat, ab_t, ab_prev, sigma, z)
        # injected noise is a constant, so its tangent is zero
        xd = update(xd, ed, ab_t, ab_prev, sigma, None)
        if not np.all(np.isfinite(xd)):
            raise NonFiniteError(f"tangent column {j}", k)
    return x[0], xd[0]


def jacobian(e, noise, mode=None, threads=None):
    """Jacobian of the final sample with respect to c at the all-ones point.

    Runs one factual sampling pass plus ``n`` tangent passes (each
    evaluating every member at every step).  Every tangent pass rebuilds
    the primal trajectory and is checked against the factual bit for bit.
    """
    mode = _check_mode(mode or noise.mode)
    y = generate_factual(e, noise, mode)
    cols = parallel_map(lambda j: _column(e, noise, mode, j), range(e.n), threads)
    for j, (primal, _) in enumerate(cols):
        if not np.array_equal(primal, y):
            raise ComputeError(f"tangent pass {j} drifted from the factual trajectory")
    J = np.stack([d.ravel() for _, d in cols], axis=1)
    return SampleJacobian(J, y, noise.seed, mode)


def _displacement(J, c):
    """J (c - u), summing positive and negative parts separately.

    For mask coefficients with half the members kept, identical columns
    then cancel exactly.
    """
    d = np.asarray(c, dtype=np.float64) - 1.0
    pos = np.zeros(J.shape[0])
    neg = np.zeros(J.shape[0])
    for i in range(J.shape[1]):
        if d[i] > 0:
            pos = pos + d[i] * J[:, i]
        elif d[i] < 0:
            neg = neg + (-d[i]) * J[:, i]
    return pos - neg


def approx_counterfactual(jac, c):
    c = np.asarray(c, dtype=np.float64)
    if c.shape != (jac.n,):
        raise ConfigError(f"coefficient vector has length {c.size}, Jacobian has {jac.n} columns")
    record(matvecs=1)
    J = np.asarray(jac.J, dtype=np.float64)
    return jac.y + _displacement(J, c).reshape(jac.y.shape)


def approx_landscape(jac, cb, metric="euclidean", keep_images=False):
    """First-order landscape: one matrix-vector product per source."""
    if cb.n != jac.n:
        raise ConfigError(f"codebook is for {cb.n} members, Jacobian has {jac.n} columns")
    metric = get_metric(metric)
    J = np.asarray(jac.J, dtype=np.float64)
    cfs = np.empty((cb.N,) + jac.y.shape)
    for s in range(cb.N):
        c = mask_to_coefficients(cb.words[s] == 0)
        cfs[s] = jac.y + _displacement(J, c).reshape(jac.y.shape)
    record(matvecs=cb.N)
    dist = metric(jac.y, cfs)
    return CounterfactualLandscape(
        factual=jac.y,
        source_ids=np.arange(cb.N),
        distances=np.asarray(dist, dtype=np.float64),
        metric=metric.name,
        eps_seed=jac.eps_seed,
        mode=jac.mode,
        canonical=metric.canonical,
        counterfactuals=cfs if keep_images else None,
        approximate=True,
    )


@dataclass(frozen=True)
class FidelityReport:
    spearman: float
    per_pixel_pearson: np.ndarray = field(repr=False)

    @property
    def defined(self):
        return ~np.isnan(self.per_pixel_pearson)

    @property
    def median_pearson(self):
        vals = self.per_pixel_pearson[self.defined]
        return float(np.median(vals)) if vals.size else math.nan


def fidelity_report(exact, approx):
    """Rank agreement of distances plus per-source Pearson of difference images.

    NaN marks an undefined correlation (a constant difference image).  The
    per-pixel list is empty when either landscape was built without images.
    """
    if not np.array_equal(exact.source_ids, approx.source_ids):
        raise ConfigError("landscapes cover different sources")
    rho = stats.spearman(exact.distances, approx.distances)
    pix = []
    if exact.counterfactuals is not None and approx.counterfactuals is not None:
        for a, b in zip(exact.counterfactuals, approx.counterfactuals):
            pix.append(stats.pearson(a - exact.factual, b - approx.factual))
    return FidelityReport(rho, np.array(pix, dtype=np.float64))


# ABCJ layout, little-endian:
#   b"ABCJ" | u32 version | u32 m | u32 n | f32[m*n] J row-major | f32[m] y
#   | u64 eps seed | u32 mode flag | u32 crc32(all preceding bytes)
_HEAD = struct.Struct("<4s3I")
_TAIL = struct.Struct("<QI")


def jacobian_bytes(jac):
    body = _HEAD.pack(MAGIC, VERSION, jac.m, jac.n)
    body += np.ascontiguousarray(jac.J, dtype="<f4").tobytes()
    body += np.ascontiguousarray(jac.y, dtype="<f4").ravel().tobytes()
    body += _TAIL.pack(int(jac.eps_seed) & ((1 << 64) - 1), MODE_FLAGS[jac.mode])
    return body + struct.pack("<I", zlib.crc32(body))


def save_jacobian(path, jac):
    with open(path, "wb") as fh:
        fh.write(jacobian_bytes(jac))


def parse_jacobian(raw, name="jacobian"):
    if raw[:4] != MAGIC:
        raise BadMagic(f"{name}: not an ABCJ file")
    if len(raw) < _HEAD.size:
        raise TruncatedFile(f"{name}: header truncated")
    _, version, m, n = _HEAD.unpack(raw[:_HEAD.size])
    if version != VERSION:
        raise DataError(f"{name}: unsupported version {version}")
    end = _HEAD.size + 4 * (m * n + m) + _TAIL.size
    if len(raw) != end + 4:
        raise TruncatedFile(f"{name}: expected {end + 4} bytes, found {len(raw)}")
    (crc,) = struct.unpack("<I", raw[end:])
    if zlib.crc32(raw[:end]) != crc:
        raise ChecksumMismatch(f"{name}: CRC32 mismatch")
    off = _HEAD.size
    J = np.frombuffer(raw, "<f4", m * n, off).reshape(m, n).astype(np.float64)
    y = np.frombuffer(raw, "<f4", m, off + 4 * m * n).astype(np.float64)
    seed, flag = _TAIL.unpack(raw[end - _TAIL.size:end])
    modes = {v: k for k, v in MODE_FLAGS.items()}
    if flag not in modes:
        raise DataError(f"{name}: unknown mode flag {flag}")
    side = math.isqrt(m)
    if side * side == m:
        y = y.reshape(1, side, side)
    return SampleJacobian(J, y, seed, modes[flag])


def load_jacobian(path):
    with open(path, "rb") as fh:
        return parse_jacobian(fh.read(), str(path))
