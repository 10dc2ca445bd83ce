from dataclasses import asdict, dataclass

import numpy as np

from .._util import make_rng
from ..errors import ConfigError, DataError, TrainingDiverged
from .denoiser import Architecture, DenoiserParams, flatten, init_params, loss_and_grad


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    optimizer: str = "adam"  # or "sgd" (with momentum)
    momentum: float = 0.9
    dropout: float = 0.0
    width: int = 16
    hidden: int = 128  # global bottleneck size, 0 disables it
    steps: int | None = None  # if set, overrides epochs with an exact step count

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.width < 1 or self.hidden < 0:
            raise ConfigError("epochs must be >= 0, batch_size and width >= 1")
        if self.steps is not None and self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if not self.learning_rate > 0:
            raise ConfigError("learning rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")

    def to_json(self):
        return asdict(self)


class _Adam:
    def __init__(self, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = np.float32(lr), np.float32(b1), np.float32(b2), np.float32(eps)
        self.m = self.v = None
        self.t = 0

    def step(self, p, g):
        if self.m is None:
            self.m, self.v = np.zeros_like(p), np.zeros_like(p)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / np.float32(1 - float(self.b1) ** self.t)
        vhat = self.v / np.float32(1 - float(self.b2) ** self.t)
        return p - self.lr * mhat / (np.sqrt(vhat) + self.eps)


class _Momentum:
    def __init__(self, lr, momentum):
        self.lr, self.mu = np.float32(lr), np.float32(momentum)
        self.buf = None

    def step(self, p, g):
        self.buf = g if self.buf is None else self.mu * self.buf + g
        return p - self.lr * self.buf


def minibatch_plan(n_items, cfg):
    """Yield (epoch, index array) for every optimizer step.

    The plan depends only on the item count and the seed, never on the data,
    so two runs over equally sized sets see identical batch positions.
    """
    rng = make_rng(cfg.seed, "batches")
    if cfg.steps is not None:
        total, epoch = cfg.steps, 0
        while total > 0:
            perm = rng.permutation(n_items)
            for start in range(0, n_items, cfg.batch_size):
                if total == 0:
                    break
                yield epoch, perm[start:start + cfg.batch_size]
                total -= 1
            epoch += 1
        return
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n_items)
        for start in range(0, n_items, cfg.batch_size):
            yield epoch, perm[start:start + cfg.batch_size]


def train_denoiser(split, cfg, sched, member=None):
    """Fit a noise predictor to ``split`` by minimising the DDPM objective.

    Timesteps are uniform on 1..T_train.  Returns ``(params, losses)`` with
    one loss per optimizer step.  Deterministic in ``cfg.seed``.
    """
    images = np.asarray(split.images, dtype=np.float32)
    if images.shape[0] == 0:
        raise DataError("cannot train on an empty split")
    n, C, H, W = images.shape
    if H != W:
        raise ConfigError("images must be square")
    arch = Architecture(C, H, cfg.width, hidden=cfg.hidden)
    params = init_params(arch, cfg.seed)
    x_all = np.ascontiguousarray(np.moveaxis(images, 1, -1))
    p = {k: v.copy() for k, v in params.tensors(np.float32).items()}
    flat = flatten(arch, p)
    opt = _Adam(cfg.learning_rate) if cfg.optimizer == "adam" else _Momentum(cfg.learning_rate, cfg.momentum)
    noise_rng = make_rng(cfg.seed, "noise")
    drop_rng = make_rng(cfg.seed, "dropout")
    ab = sched.alphas_bar.astype(np.float32)
    losses = []
    for epoch, idx in minibatch_plan(n, cfg):
        b = idx.size
        t = noise_rng.integers(1, sched.T_train + 1, size=b)
        eps = noise_rng.standard_normal((b, H, W, C), dtype=np.float32)
        a = ab[t].reshape(b, 1, 1, 1)
        xt = np.sqrt(a) * x_all[idx] + np.sqrt(1 - a) * eps
        drop = None
        if cfg.dropout > 0:
            keep = drop_rng.random((b, H // 2, W // 2, 2 * cfg.width)) >= cfg.dropout
            drop = keep.astype(np.float32) / np.float32(1 - cfg.dropout)
        loss, grads = loss_and_grad(p, arch.n_freqs, xt, t, eps, drop)
        if not np.isfinite(loss):
            raise TrainingDiverged(epoch, member)
        losses.append(loss)
        flat = opt.step(flat, flatten(arch, grads))
        p = {k: v for k, v in zip(p, _split(arch, flat))}
    if not np.all(np.isfinite(flat)):
        raise TrainingDiverged(cfg.epochs, member)
    return DenoiserParams(arch, flat), np.array(losses)


def _split(arch, flat):
    out, pos = [], 0
    for _, shape in arch.shapes():
        size = int(np.prod(shape))
        out.append(flat[pos:pos + size].reshape(shape))
        pos += size
    return out
