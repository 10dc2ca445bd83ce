"""Deterministic and ancestral samplers that replay recorded exogenous noise."""

from dataclasses import dataclass

import numpy as np

from .._util import make_rng
from ..errors import ConfigError, NonFiniteError

MODES = ("deterministic", "ancestral")


def _check_mode(mode):
    aliases = {"det": "deterministic", "anc": "ancestral"}
    mode = aliases.get(mode, mode)
    if mode not in MODES:
        raise ConfigError(f"unknown sampling mode {mode!r}")
    return mode


@dataclass(frozen=True, eq=False)
class ExogenousNoise:
    """Every random draw one sampling trajectory consumes.

    ``x_T`` is the starting latent; ``z`` holds one injected-noise tensor
    per ladder step in ancestral mode and is empty in deterministic mode.
    """

    seed: int
    mode: str
    x_T: np.ndarray
    z: np.ndarray

    def __eq__(self, other):
        return (isinstance(other, ExogenousNoise) and self.seed == other.seed and self.mode == other.mode
                and np.array_equal(self.x_T, other.x_T) and np.array_equal(self.z, other.z))

    __hash__ = None


def draw_exogenous(seed, sched, mode="deterministic", shape=(1, 16, 16)):
    mode = _check_mode(mode)
    rng = make_rng(seed, "exogenous")
    x_T = rng.standard_normal(shape)
    if mode == "ancestral":
        z = rng.standard_normal((len(sched.ladder),) + tuple(shape))
    else:
        z = np.zeros((0,) + tuple(shape))
    for arr in (x_T, z):
        arr.setflags(write=False)
    return ExogenousNoise(int(seed), mode, x_T, z)


def step_coefficients(sched, k, mode):
    """(ab_t, ab_prev, sigma) for ladder step ``k``."""
    t, prev = sched.ladder[k], sched.prev(k)
    ab_t, ab_prev = sched.alphas_bar[t], sched.alphas_bar[prev]
    sigma = 0.0
    if mode == "ancestral":
        sigma = float(np.sqrt((1 - ab_prev) / (1 - ab_t)) * np.sqrt(1 - ab_t / ab_prev))
    return float(ab_t), float(ab_prev), sigma


def update(x, eps_hat, ab_t, ab_prev, sigma=0.0, z=None):
    """One ladder step: estimate the clean image, then re-noise to ``ab_prev``.

    Linear in (x, eps_hat) when ``z`` is None, which is what tangents use.
    """
    x0 = (x - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    out = np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev - sigma * sigma) * eps_hat
    if z is not None and sigma:
        out = out + sigma * z
    return out


def initial_state(noise, batch=None):
    x = np.array(noise.x_T, dtype=np.float64)
    if batch is not None:
        x = np.broadcast_to(x, (batch,) + x.shape).copy()
    return x


def sample(predict, sched, noise, mode=None, batch=None):
    """Run the sampler from ``noise.x_T`` along the schedule's ladder.

    ``predict(x, t)`` returns the predicted noise for ``x`` at timestep
    ``t``.  With ``batch`` set, the same exogenous noise is broadcast to
    ``batch`` rows (one per ablation, say) and a (batch, ...) array comes
    back.  Nothing is drawn here: ancestral noise comes from ``noise.z``.
    """
    mode = _check_mode(mode or noise.mode)
    if mode == "ancestral" and noise.z.shape[0] < len(sched.ladder):
        raise ConfigError(f"ancestral sampling needs {len(sched.ladder)} injected-noise draws, "
                          f"record has {noise.z.shape[0]}")
    x = initial_state(noise, batch)
    for k, t in enumerate(sched.ladder):
        eps_hat = predict(x, t)
        if not np.all(np.isfinite(eps_hat)):
            raise NonFiniteError("prediction", k)
        ab_t, ab_prev, sigma = step_coefficients(sched, k, mode)
        x = update(x, eps_hat, ab_t, ab_prev, sigma, noise.z[k] if mode == "ancestral" else None)
        if not np.all(np.isfinite(x)):
            raise NonFiniteError("sample", k)
    return x
