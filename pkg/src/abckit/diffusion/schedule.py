from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError


@dataclass(frozen=True)
class Schedule:
    """Linear-beta noise schedule plus the descending sampling ladder.

    ``alphas_bar`` has ``T_train + 1`` entries and is indexed by timestep:
    entry 0 is 1.0 (clean data), entry t is prod(1 - beta_1..beta_t).
    """

    T_train: int
    K: int
    beta_lo: float
    beta_hi: float
    betas: np.ndarray
    alphas_bar: np.ndarray
    ladder: tuple

    def to_json(self):
        return {"T_train": self.T_train, "K": self.K, "beta_lo": self.beta_lo, "beta_hi": self.beta_hi}

    @classmethod
    def from_json(cls, obj):
        return make_schedule(int(obj["T_train"]), int(obj["K"]), float(obj["beta_lo"]), float(obj["beta_hi"]))

    def prev(self, k):
        """Timestep the k-th ladder step moves to (0 after the last)."""
        return self.ladder[k + 1] if k + 1 < len(self.ladder) else 0


def make_schedule(T_train=200, K=20, beta_lo=1e-4, beta_hi=0.1):
    if not 1 <= K <= T_train:
        raise ConfigError(f"need 1 <= K <= T_train, got K={K}, T_train={T_train}")
    if not 0 < beta_lo <= beta_hi < 1:
        raise ConfigError(f"need 0 < beta_lo <= beta_hi < 1, got ({beta_lo}, {beta_hi})")
    betas = np.linspace(beta_lo, beta_hi, T_train, dtype=np.float64)
    alphas_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    # step (T-1)/(K-1) >= 1, so rounding never merges neighbours
    ladder = np.unique(np.rint(np.linspace(T_train, 1, K)).astype(np.int64))[::-1]
    for arr in (betas, alphas_bar):
        arr.setflags(write=False)
    return Schedule(T_train, K, float(beta_lo), float(beta_hi), betas, alphas_bar, tuple(int(t) for t in ladder))


def forward_noising(x0, t, eps, sched):
    """sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps, with ``t`` scalar or per-row."""
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t > sched.T_train):
        raise ConfigError(f"timestep out of range [0, {sched.T_train}]")
    ab = sched.alphas_bar[t]
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (np.ndim(x0) - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
