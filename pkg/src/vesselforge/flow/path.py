"""Linear probability path, target velocities, batches and the CFM objective."""

from dataclasses import dataclass

import numpy as np

EPS = 1e-5


class FlowError(RuntimeError):
    def __init__(self, code, message, trace=None):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.trace = trace


def _check_shapes(*arrays):
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def forward_interpolate(x0, x1, t):
    """``t * x1 + (1 - t) * x0``."""
    _check_shapes(x0, x1)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return t * np.asarray(x1, dtype=np.float64) + (1.0 - t) * np.asarray(x0, dtype=np.float64)


def target_velocity(x_t, x1, t):
    """Conditional velocity ``(x1 - x_t) / (1 - t)``; raises ``time-singularity`` near t = 1."""
    _check_shapes(x_t, x1)
    if t >= 1.0 - EPS:
        raise FlowError("time-singularity", f"t={t} is within {EPS} of 1")
    return (np.asarray(x1, dtype=np.float64) - np.asarray(x_t, dtype=np.float64)) / (1.0 - t)


@dataclass
class PathSample:
    x0: np.ndarray
    x1: np.ndarray
    t: float
    x_t: np.ndarray
    u_t: np.ndarray


@dataclass
class Conditioning:
    mask: np.ndarray
    cls: int
    tilde: bool = False


def path_sample(x0, x1, t):
    x_t = forward_interpolate(x0, x1, t)
    return PathSample(np.asarray(x0, dtype=np.float64), np.asarray(x1, dtype=np.float64), float(t), x_t, target_velocity(x_t, x1, t))


@dataclass
class Batch:
    """Stacked path samples with their conditioning; arrays are ``(B, *shape)``."""

    x_t: np.ndarray
    u_t: np.ndarray
    mask: np.ndarray
    cls: np.ndarray
    t: np.ndarray

    def __len__(self):
        return self.x_t.shape[0]


def make_batch(samples, conds):
    if not samples:
        raise ValueError("empty batch")
    if len(samples) != len(conds):
        raise ValueError("one conditioning record per path sample")
    for s, c in zip(samples, conds):
        _check_shapes(s.x_t, c.mask)
    return Batch(
        x_t=np.stack([s.x_t for s in samples]),
        u_t=np.stack([s.u_t for s in samples]),
        mask=np.stack([np.asarray(c.mask, dtype=np.float64) for c in conds]),
        cls=np.array([int(c.cls) for c in conds], dtype=np.int64),
        t=np.array([s.t for s in samples], dtype=np.float64),
    )


def draw_batch(dataset, batch_size, rng):
    """Random path samples from ``(x1, mask, cls)`` items: t ~ U[0, 1 - eps], x0 ~ N(0, 1)."""
    if not dataset:
        raise ValueError("empty dataset")
    idx = rng.integers(len(dataset), size=batch_size)
    samples, conds = [], []
    for i in idx:
        x1, m, c = dataset[int(i)]
        t = float(rng.uniform(0.0, 1.0 - EPS))
        x0 = rng.standard_normal(np.shape(x1))
        samples.append(path_sample(x0, x1, t))
        conds.append(Conditioning(m, c))
    return make_batch(samples, conds)


def _as_batch(batch):
    if isinstance(batch, Batch):
        return batch
    batch = list(batch)
    if not batch:
        raise ValueError("empty batch")
    return make_batch([s for s, _ in batch], [c for _, c in batch])


def cfm_loss(field, batch):
    """Mean over samples and voxels of the squared velocity error."""
    batch = _as_batch(batch)
    pred = field.predict(batch)
    return float(np.mean((pred - batch.u_t) ** 2))


def loss_gradient_check(field, batch, h=1e-3, coords=None, floor=1e-8):
    """Max relative error between ``field.loss_gradient`` and central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``, so
    coordinates whose true gradient vanishes compare absolutely against ``floor``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    batch = _as_batch(batch)
    theta = field.params.copy()
    if not np.all(np.isfinite(theta)):
        raise FlowError("non-finite", "field parameters are not finite")
    analytic = field.loss_gradient(batch)
    if theta.size == 0:
        return 0.0
    coords = np.arange(theta.size) if coords is None else np.asarray(coords)
    worst = 0.0
    try:
        for i in coords:
            probe = theta.copy()
            probe[i] = theta[i] + h
            field.set_params(probe)
            up = cfm_loss(field, batch)
            probe[i] = theta[i] - h
            field.set_params(probe)
            down = cfm_loss(field, batch)
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FlowError("non-finite", f"loss is not finite at coordinate {i}")
            numeric = (up - down) / (2.0 * h)
            a = analytic[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    finally:
        field.set_params(theta)
    return worst
