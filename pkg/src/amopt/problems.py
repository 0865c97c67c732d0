"""Test problems behind a common gradient-oracle interface.

An oracle exposes the empirical risk f(x) = (1/T) sum_i f_i(x) through
loss / full_gradient / sample_gradient / minibatch_gradient, where the
mini-batch gradient is always the arithmetic mean over the index set.
All constructors are seeded and bitwise deterministic.
"""

import csv

import numpy as np

from .krylov import LinearSystem


class GradientOracle:
    """Interface base: finite-sum objective with per-sample gradients."""

    dim = 0
    num_samples = 0

    def loss(self, x):
        raise NotImplementedError

    def full_gradient(self, x):
        raise NotImplementedError

    def sample_gradient(self, x, i):
        raise NotImplementedError

    def minibatch_gradient(self, x, idx):
        """Mean of sample gradients over idx; subclasses vectorize."""
        idx = np.asarray(idx)
        if idx.size == 0:
            raise ValueError("empty mini-batch")
        g = np.zeros(self.dim)
        for i in idx:
            g += self.sample_gradient(x, int(i))
        return g / idx.size


def _rng_of(seed):
    return np.random.default_rng(seed)


def _random_orthogonal(rng, d):
    # QR of a gaussian matrix; fix column signs so the factorization is unique
    M = rng.standard_normal((d, d))
    Q, R = np.linalg.qr(M)
    return Q * np.sign(np.diag(R))


class QuadraticOracle(GradientOracle):
    """f_i(x) = x'Ax/2 - b_i'x with the b_i recentered around b exactly.

    Gradient noise lives in the linear term only: b_i = b + e_i with
    e_i ~ N(0, (sigma^2/d) I) re-centered to zero mean, so the per-sample
    deviation from the full gradient has second moment sigma^2 at any x.
    """

    def __init__(self, A, b, noise_sigma, num_samples, rng):
        self.A = A
        self.b = b
        self.dim = b.size
        self.num_samples = int(num_samples)
        if noise_sigma > 0.0 and num_samples > 1:
            e = rng.standard_normal((num_samples, self.dim))
            e -= e.mean(axis=0)
            e *= noise_sigma / np.sqrt(self.dim)
            self.b_i = self.b + e
        else:
            self.b_i = np.tile(self.b, (num_samples, 1))

    def loss(self, x):
        return float(0.5 * x @ self.A @ x - self.b @ x)

    def full_gradient(self, x):
        return self.A @ x - self.b

    def sample_gradient(self, x, i):
        return self.A @ x - self.b_i[i]

    def minibatch_gradient(self, x, idx):
        idx = np.asarray(idx)
        if idx.size == 0:
            raise ValueError("empty mini-batch")
        return self.A @ x - self.b_i[idx].mean(axis=0)


def make_quadratic(dim, cond, num_samples=1, noise_sigma=0.0, seed=0):
    """Seeded quadratic with log-spaced spectrum in [1, cond].

    Returns (oracle, LinearSystem): the system's solution is the oracle's
    minimizer, which is what the GMRES equivalence checks consume.
    """
    if cond < 1.0:
        raise ValueError("cond must be >= 1")
    rng = _rng_of(seed)
    if cond == 1.0:
        A = np.eye(dim)
        rng.standard_normal((dim, dim))  # keep the stream layout fixed
    else:
        Q = _random_orthogonal(rng, dim)
        lam = np.logspace(0.0, np.log10(cond), dim)
        A = Q @ np.diag(lam) @ Q.T
        A = (A + A.T) / 2.0
    b = rng.standard_normal(dim)
    b /= np.linalg.norm(b)
    oracle = QuadraticOracle(A, b, noise_sigma, num_samples, rng)
    return oracle, LinearSystem(A, b)


class LogisticOracle(GradientOracle):
    """Binary logistic regression with an l2 ridge term.

    Labels are +-1; per-sample loss is log(1 + exp(-y w'z)) + l2/2 ||w||^2,
    so the regularizer survives mini-batch averaging unchanged.
    """

    def __init__(self, Z, y, l2):
        self.Z = Z
        self.y = y
        self.l2 = float(l2)
        self.num_samples, self.dim = Z.shape

    def _margins(self, x, idx=None):
        Z = self.Z if idx is None else self.Z[idx]
        y = self.y if idx is None else self.y[idx]
        return y * (Z @ x), Z, y

    def loss(self, x):
        m, _, _ = self._margins(x)
        return float(np.mean(np.logaddexp(0.0, -m)) + 0.5 * self.l2 * x @ x)

    def full_gradient(self, x):
        m, Z, y = self._margins(x)
        s = 1.0 / (1.0 + np.exp(m))  # sigmoid(-margin)
        return -(Z.T @ (y * s)) / self.num_samples + self.l2 * x

    def sample_gradient(self, x, i):
        m = self.y[i] * (self.Z[i] @ x)
        s = 1.0 / (1.0 + np.exp(m))
        return -self.y[i] * s * self.Z[i] + self.l2 * x

    def minibatch_gradient(self, x, idx):
        idx = np.asarray(idx)
        if idx.size == 0:
            raise ValueError("empty mini-batch")
        m, Z, y = self._margins(x, idx)
        s = 1.0 / (1.0 + np.exp(m))
        return -(Z.T @ (y * s)) / idx.size + self.l2 * x


def make_logistic(num_samples=None, dim=None, separation=2.0, l2=0.0, seed=0, data=None):
    """Logistic regression on seeded two-class data, or on supplied (Z, y).

    Synthetic blobs sit at +-separation along a random unit direction with
    unit-variance gaussian spread. Supplied labels may be any two values;
    the larger maps to +1.
    """
    if data is not None:
        Z, y = data
        Z = np.asarray(Z, dtype=float)
        y = np.asarray(y, dtype=float)
        classes = np.unique(y)
        if classes.size != 2:
            raise ValueError(f"need exactly two label values, got {classes}")
        y = np.where(y == classes[1], 1.0, -1.0)
        return LogisticOracle(Z, y, l2)
    if num_samples is None or dim is None:
        raise ValueError("num_samples and dim are required without data")
    rng = _rng_of(seed)
    y = np.where(rng.random(num_samples) < 0.5, 1.0, -1.0)
    u = rng.standard_normal(dim)
    u /= np.linalg.norm(u)
    Z = rng.standard_normal((num_samples, dim)) + np.outer(y * separation, u)
    return LogisticOracle(Z, y, l2)


class RosenbrockOracle(GradientOracle):
    """Chained Rosenbrock, a deterministic nonconvex sanity problem (T=1)."""

    def __init__(self, dim):
        if dim < 2:
            raise ValueError("rosenbrock needs dim >= 2")
        self.dim = dim
        self.num_samples = 1

    def loss(self, x):
        return float(np.sum(100.0 * (x[1:] - x[:-1] ** 2) ** 2 + (1.0 - x[:-1]) ** 2))

    def full_gradient(self, x):
        g = np.zeros(self.dim)
        t = x[1:] - x[:-1] ** 2
        g[:-1] = -400.0 * x[:-1] * t - 2.0 * (1.0 - x[:-1])
        g[1:] += 200.0 * t
        return g

    def sample_gradient(self, x, i):
        return self.full_gradient(x)

    def minibatch_gradient(self, x, idx):
        if np.asarray(idx).size == 0:
            raise ValueError("empty mini-batch")
        return self.full_gradient(x)


def make_rosenbrock(dim):
    return RosenbrockOracle(dim)


class MlpOracle(GradientOracle):
    """One-hidden-layer tanh network with softmax cross-entropy, 2 classes.

    Parameters are flattened as [W1 (h x in), b1 (h), W2 (2 x h), b2 (2)];
    gradients come from hand-written backprop.
    """

    def __init__(self, Z, labels, hidden):
        self.Z = Z
        self.labels = labels
        self.hidden = int(hidden)
        self.in_dim = Z.shape[1]
        self.num_samples = Z.shape[0]
        h, di = self.hidden, self.in_dim
        self._shapes = [(h, di), (h,), (2, h), (2,)]
        self.dim = h * di + h + 2 * h + 2

    def _unpack(self, x):
        out, off = [], 0
        for shp in self._shapes:
            n = int(np.prod(shp))
            out.append(x[off : off + n].reshape(shp))
            off += n
        return out

    def _forward(self, x, idx):
        W1, b1, W2, b2 = self._unpack(x)
        Z = self.Z[idx]
        H = np.tanh(Z @ W1.T + b1)
        logits = H @ W2.T + b2
        return Z, H, logits

    def _batch_loss(self, x, idx):
        _, _, logits = self._forward(x, idx)
        c = self.labels[idx]
        lse = np.logaddexp(logits[:, 0], logits[:, 1])
        return float(np.mean(lse - logits[np.arange(len(c)), c]))

    def _batch_gradient(self, x, idx):
        W1, b1, W2, b2 = self._unpack(x)
        Z, H, logits = self._forward(x, idx)
        n = len(idx)
        c = self.labels[idx]
        shifted = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), c] -= 1.0
        p /= n
        dW2 = p.T @ H
        db2 = p.sum(axis=0)
        dH = p @ W2
        dpre = dH * (1.0 - H * H)
        dW1 = dpre.T @ Z
        db1 = dpre.sum(axis=0)
        return np.concatenate([dW1.ravel(), db1, dW2.ravel(), db2])

    def loss(self, x):
        return self._batch_loss(x, np.arange(self.num_samples))

    def full_gradient(self, x):
        return self._batch_gradient(x, np.arange(self.num_samples))

    def sample_gradient(self, x, i):
        return self._batch_gradient(x, np.array([i]))

    def minibatch_gradient(self, x, idx):
        idx = np.asarray(idx)
        if idx.size == 0:
            raise ValueError("empty mini-batch")
        return self._batch_gradient(x, idx)


def make_mlp(hidden, num_samples, dim=2, seed=0):
    """MLP on seeded two-arm spiral data embedded in `dim` features."""
    if hidden < 1:
        raise ValueError("hidden must be >= 1")
    rng = _rng_of(seed)
    n = num_samples
    labels = np.arange(n) % 2
    theta = rng.random(n) * 3.0 * np.pi
    radius = 0.2 + theta / (3.0 * np.pi)
    angle = theta + np.pi * labels
    pts = np.column_stack([radius * np.cos(angle), radius * np.sin(angle)])
    pts += 0.05 * rng.standard_normal((n, 2))
    if dim < 2:
        raise ValueError("mlp input dim must be >= 2")
    Z = np.zeros((n, dim))
    Z[:, :2] = pts
    if dim > 2:
        Z[:, 2:] = 0.1 * rng.standard_normal((n, dim - 2))
    return MlpOracle(Z, labels, hidden)


def load_csv(path, label_col=0, header=False):
    """Read "label,f1,f2,..." rows into (features, labels).

    Raises ValueError naming the 1-based file row for ragged or
    non-numeric rows; an empty file (or header-only file) is an error.
    """
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for line_no, row in enumerate(reader, start=1):
            if header and line_no == 1:
                continue
            if not row or all(not c.strip() for c in row):
                continue
            try:
                rows.append((line_no, [float(c) for c in row]))
            except ValueError:
                raise ValueError(f"non-numeric value at row {line_no} of {path}")
    if not rows:
        raise ValueError(f"no data rows in {path}")
    width = len(rows[0][1])
    if width < 2:
        raise ValueError(f"rows need a label and at least one feature ({path})")
    for line_no, vals in rows:
        if len(vals) != width:
            raise ValueError(
                f"row {line_no} of {path} has {len(vals)} columns, expected {width}"
            )
    M = np.array([vals for _, vals in rows])
    if not 0 <= label_col < width:
        raise ValueError(f"label_col {label_col} out of range for {width} columns")
    y = M[:, label_col]
    Z = np.delete(M, label_col, axis=1)
    return Z, y
