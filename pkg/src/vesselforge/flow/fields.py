"""Velocity fields ``v(x_t, m, c, t)`` with hand-written parameter gradients of the CFM loss."""

import numpy as np

from vesselforge import kernels


class VelocityField:
    """Base: flat float64 parameter vector, per-sample ``eval`` and batched ``predict``."""

    kind = "base"

    def __init__(self):
        self._params = np.zeros(0)

    @property
    def params(self):
        return self._params

    def set_params(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != self._params.shape:
            raise ValueError(f"expected {self._params.shape} parameters, got {theta.shape}")
        self._params = theta.copy()

    def eval(self, x_t, m, c, t):
        x_t = np.asarray(x_t, dtype=np.float64)
        return self._eval(x_t, np.asarray(m, dtype=np.float64), int(c), float(t))

    def predict(self, batch):
        return np.stack([self._eval(batch.x_t[b], batch.mask[b], int(batch.cls[b]), float(batch.t[b])) for b in range(len(batch))])

    def loss_gradient(self, batch):
        return self.loss_and_gradient(batch)[1]

    def loss_and_gradient(self, batch):
        pred = self.predict(batch)
        return float(np.mean((pred - batch.u_t) ** 2)), np.zeros(0)

    def header(self):
        return {"kind": self.kind}


class AnalyticField(VelocityField):
    """Conditional oracle ``(target - x) / (1 - t)`` for one fixed target."""

    kind = "analytic"

    def __init__(self, target):
        super().__init__()
        self.target = np.asarray(target, dtype=np.float64)

    def _eval(self, x, m, c, t):
        return (self.target - x) / (1.0 - t)

    def header(self):
        return {"kind": self.kind, "target_shape": list(self.target.shape)}


class ConstantField(VelocityField):
    kind = "constant"

    def __init__(self, value):
        super().__init__()
        self.value = float(value)

    def _eval(self, x, m, c, t):
        return np.full(x.shape, self.value)

    def header(self):
        return {"kind": self.kind, "value": self.value}


class LinearField(VelocityField):
    """``a*x + b*m + d*t + e + class_bias[c]``; linear in its parameters."""

    kind = "linear"

    def __init__(self, n_classes=24, rng=None):
        super().__init__()
        self.n_classes = int(n_classes)
        self._params = np.zeros(4 + self.n_classes)
        if rng is not None:
            self._params = rng.normal(0.0, 0.1, size=self._params.shape)

    def _eval(self, x, m, c, t):
        a, b, d, e = self._params[:4]
        return a * x + b * m + d * t + e + self._params[4 + c]

    def loss_and_gradient(self, batch):
        pred = self.predict(batch)
        n = pred.size
        g = 2.0 * (pred - batch.u_t) / n
        grad = np.zeros_like(self._params)
        grad[0] = np.sum(g * batch.x_t)
        grad[1] = np.sum(g * batch.mask)
        per_sample = g.reshape(len(batch), -1).sum(axis=1)
        grad[2] = np.sum(per_sample * batch.t)
        grad[3] = per_sample.sum()
        np.add.at(grad, 4 + batch.cls, per_sample)
        return float(np.mean((pred - batch.u_t) ** 2)), grad

    def header(self):
        return {"kind": self.kind, "n_classes": self.n_classes}


def time_embedding(t, dim):
    """Sinusoidal embedding ``[sin(w_k t), cos(w_k t)]`` with log-spaced frequencies in [1, 100]."""
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, np.log(100.0), half)) if half > 1 else np.ones(half)
    ang = np.asarray(t, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def neighbourhood_features(x, m, radius):
    """Per-voxel features ``(V, F)``: the ``(2r+1)^3`` neighbourhoods of ``x`` then ``m`` (reflect)."""
    if radius == 0:
        return np.stack([x.ravel(), m.ravel()], axis=1)
    cols = []
    for vol in (x, m):
        idx = [kernels.reflect_indices(np.arange(-radius, n + radius), n) for n in vol.shape]
        padded = vol[np.ix_(*idx)]
        d, h, w = vol.shape
        k = 2 * radius + 1
        for dz in range(k):
            for dy in range(k):
                for dx in range(k):
                    cols.append(padded[dz : dz + d, dy : dy + h, dx : dx + w].ravel())
    return np.stack(cols, axis=1)


class MLPField(VelocityField):
    """One-hidden-layer tanh network applied voxelwise.

    Input features are the voxel value of ``x_t`` and of the mask (channel
    concatenation), or their 3x3x3 neighbourhoods when ``radius=1`` (the
    convolutional variant). The projected sinusoidal time embedding plus the
    class embedding is added to the hidden pre-activation:

        h = tanh(W1 f + b1 + Wt emb(t) + E[c]),   v = w2 . h + b2
    """

    kind = "mlp"

    def __init__(self, hidden=32, time_dim=8, n_classes=24, radius=0, rng=None, scale=0.5):
        super().__init__()
        self.hidden, self.time_dim, self.n_classes, self.radius = int(hidden), int(time_dim), int(n_classes), int(radius)
        self.n_features = 2 * (2 * self.radius + 1) ** 3
        self._shapes = [
            ("W1", (self.hidden, self.n_features)),
            ("b1", (self.hidden,)),
            ("Wt", (self.hidden, self.time_dim)),
            ("E", (self.n_classes, self.hidden)),
            ("w2", (self.hidden,)),
            ("b2", (1,)),
        ]
        size = sum(int(np.prod(s)) for _, s in self._shapes)
        self._params = np.zeros(size)
        if rng is not None:
            parts = []
            for name, shape in self._shapes:
                fan_in = {"W1": self.n_features, "Wt": self.time_dim, "w2": self.hidden}.get(name, 1)
                parts.append(rng.normal(0.0, scale / np.sqrt(fan_in), size=shape).ravel())
            self._params = np.concatenate(parts)

    def unpack(self, theta=None):
        theta = self._params if theta is None else theta
        out, pos = {}, 0
        for name, shape in self._shapes:
            n = int(np.prod(shape))
            out[name] = theta[pos : pos + n].reshape(shape)
            pos += n
        return out

    def _hidden(self, feats, c, t, p):
        cond = p["Wt"] @ time_embedding(t, self.time_dim) + p["E"][c]
        return np.tanh(feats @ p["W1"].T + p["b1"] + cond)

    def _eval(self, x, m, c, t):
        p = self.unpack()
        h = self._hidden(neighbourhood_features(x, m, self.radius), c, t, p)
        return (h @ p["w2"] + p["b2"][0]).reshape(x.shape)

    def predict(self, batch):
        p = self.unpack()
        out = np.empty(batch.x_t.shape)
        for b in range(len(batch)):
            feats = neighbourhood_features(batch.x_t[b], batch.mask[b], self.radius)
            h = self._hidden(feats, int(batch.cls[b]), float(batch.t[b]), p)
            out[b] = (h @ p["w2"] + p["b2"][0]).reshape(out.shape[1:])
        return out

    def loss_and_gradient(self, batch):
        p = self.unpack()
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        n_total = batch.x_t.size
        loss = 0.0
        for b in range(len(batch)):
            feats = neighbourhood_features(batch.x_t[b], batch.mask[b], self.radius)
            c, t = int(batch.cls[b]), float(batch.t[b])
            emb = time_embedding(t, self.time_dim)
            h = self._hidden(feats, c, t, p)
            v = h @ p["w2"] + p["b2"][0]
            r = v - batch.u_t[b].ravel()
            loss += float(r @ r)
            g = 2.0 * r / n_total  # dL/dv
            grads["w2"] += h.T @ g
            grads["b2"][0] += g.sum()
            gpre = np.outer(g, p["w2"]) * (1.0 - h * h)  # (V, H)
            grads["W1"] += gpre.T @ feats
            col = gpre.sum(axis=0)
            grads["b1"] += col
            grads["Wt"] += np.outer(col, emb)
            grads["E"][c] += col
        grad = np.concatenate([grads[name].ravel() for name, _ in self._shapes])
        return loss / n_total, grad

    def header(self):
        return {
            "kind": self.kind,
            "hidden": self.hidden,
            "time_dim": self.time_dim,
            "n_classes": self.n_classes,
            "radius": self.radius,
            "layers": [self.n_features, self.hidden, 1],
        }


def make_field(kind, rng=None, **kwargs):
    if kind == "mlp":
        return MLPField(rng=rng, **kwargs)
    if kind == "conv":
        return MLPField(radius=1, rng=rng, **kwargs)
    if kind == "linear":
        return LinearField(n_classes=kwargs.get("n_classes", 24), rng=rng)
    raise ValueError(f"unknown trainable field kind {kind!r}")
