"""Toy dataset, SGD training on the CFM loss, Euler sampling and flow-pair generation."""

import csv
from dataclasses import dataclass

import numpy as np

from vesselforge.flow.path import FlowError, draw_batch
from vesselforge.rng import Rng

# class id -> foreground intensity of the two-class toy set
TOY_CLASSES = {1: 0.9, 2: 0.5}
TOY_BACKGROUND = 0.1
TOY_NOISE = 0.02


def toy_mask(shape, rng):
    """A few random straight tubes (radius 1.5 to 2.5) through a small volume."""
    from vesselforge import kernels

    mask = np.zeros(shape, dtype=np.uint8)
    for _ in range(int(rng.integers(1, 4))):
        a = rng.uniform(0, np.asarray(shape) - 1)
        b = rng.uniform(0, np.asarray(shape) - 1)
        n = int(np.ceil(np.linalg.norm(b - a))) + 1
        pts = a + np.linspace(0.0, 1.0, n)[:, None] * (b - a)
        r = np.full(n, rng.uniform(1.5, 2.5))
        kernels.paint_balls(mask, np.floor(pts + 0.5), r, np.ones(n, dtype=np.uint8))
    if not mask.any():
        mask[tuple(s // 2 for s in shape)] = 1
    return mask.astype(bool)


def toy_dataset(n=32, shape=(16, 16, 16), seed=0):
    """Items ``(x1, mask, cls)``: bright (class 1) or dim (class 2) tubes on a dark background."""
    rng = np.random.default_rng(seed)
    classes = sorted(TOY_CLASSES)
    items = []
    for i in range(n):
        m = toy_mask(shape, rng)
        c = classes[i % len(classes)]
        x1 = np.where(m, TOY_CLASSES[c], TOY_BACKGROUND) + rng.normal(0.0, TOY_NOISE, size=shape)
        items.append((x1, m, c))
    return items


def dataset_stats(dataset):
    """Mean foreground, mean background, and their gap, per class and overall."""
    out = {}
    for c in sorted({c for _, _, c in dataset}):
        fg = np.concatenate([x[m] for x, m, cc in dataset if cc == c])
        bg = np.concatenate([x[~m] for x, m, cc in dataset if cc == c])
        out[c] = {"fg": float(fg.mean()), "bg": float(bg.mean()), "gap": float(fg.mean() - bg.mean())}
    gaps = [v["gap"] for v in out.values()]
    out["gap"] = float(np.mean(gaps))
    return out


def train_toy(field, dataset, steps, lr, rng, batch_size=4, smooth=50, trace_path=None):
    """Plain SGD on the CFM loss. Returns ``(field, trace)``; ``trace`` holds one loss per step.

    Aborts with ``divergence`` when a loss exceeds 1e6 or turns non-finite.
    """
    if not dataset:
        raise ValueError("empty dataset")
    trace = []
    for step in range(int(steps)):
        batch = draw_batch(dataset, batch_size, rng)
        loss, grad = field.loss_and_gradient(batch)
        trace.append(loss)
        if not np.isfinite(loss) or loss > 1e6:
            if trace_path:
                write_trace(trace_path, trace)
            raise FlowError("divergence", f"loss {loss} at step {step}", trace=trace)
        if lr != 0 and grad.size:
            field.set_params(field.params - lr * grad)
    if trace_path:
        write_trace(trace_path, trace)
    return field, trace


def smoothed(trace, window=50):
    trace = np.asarray(trace, dtype=np.float64)
    window = max(1, min(window, len(trace)))
    return float(trace[:window].mean()), float(trace[-window:].mean())


def write_trace(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, loss in enumerate(trace):
            w.writerow([i, repr(float(loss))])


@dataclass
class EulerSchedule:
    n: int = 100

    def __post_init__(self):
        if int(self.n) < 1:
            raise ValueError("Euler schedule needs at least one step")
        self.n = int(self.n)

    @property
    def dt(self):
        return 1.0 / self.n

    def times(self):
        return np.arange(self.n) / self.n


def euler_sample(field, x0, m, c, schedule=None):
    """Integrate ``x <- x + v(x, m, c, t_k) * dt`` for ``t_k = k / N``, ``k = 0..N-1``."""
    schedule = schedule if isinstance(schedule, EulerSchedule) else EulerSchedule(100 if schedule is None else schedule)
    x = np.asarray(x0, dtype=np.float64).copy()
    m = np.asarray(m, dtype=np.float64)
    for t in schedule.times():
        x = x + field.eval(x, m, c, t) * schedule.dt
        if not np.all(np.isfinite(x)):
            raise FlowError("non-finite", f"state became non-finite at t={t}")
    return x


@dataclass
class FlowPair:
    image: np.ndarray
    label: np.ndarray
    cls: int
    tilde: bool = True


def generate_dflow(field, masks, classes, count, schedule=100, seed=0, clip=True):
    """Sample ``count`` images conditioned on ``masks[i % len]`` and ``classes[i % len]``.

    Pair ``i`` draws its noise from stream ``(seed, i)``. The label is the
    conditioning mask; pairs carry the synthetic-origin (tilde) flag.
    """
    if count == 0:
        return []
    if not masks or len(masks) != len(classes):
        raise ValueError("need one class per mask and at least one mask")
    out = []
    for i in range(int(count)):
        m = np.asarray(masks[i % len(masks)]).astype(bool)
        c = int(classes[i % len(classes)])
        x0 = Rng(int(seed), i).generator(0).standard_normal(m.shape)
        x = euler_sample(field, x0, m, c, schedule)
        if clip:
            x = np.clip(x, 0.0, 1.0)
        out.append(FlowPair(x.astype(np.float32), m, c, True))
    return out


def foreground_gap(image, mask):
    mask = np.asarray(mask, dtype=bool)
    return float(image[mask].mean() - image[~mask].mean())

