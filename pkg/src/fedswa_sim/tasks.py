"""Synthetic federated objectives and their client shards.

Three task families share one interface: a per-client dataset of exactly
``n`` samples and a mean-loss/mean-gradient oracle over any batch of them.

``quadratic``
    Client ``i`` draws samples ``x = b_i + noise_sigma * A_i^{-1} xi`` with
    ``xi ~ N(0, I)`` and scores them with ``0.5 (theta - x)^T A_i (theta - x)``.
    The per-sample gradient noise around the shard mean is therefore exactly
    ``noise_sigma * xi``. Centres ``b_i = c_0 + hetero_knob * xi_i`` move
    apart as the knob grows. An optional ``clip`` radius makes the loss
    Huber-like so it is globally Lipschitz.
``logreg`` / ``mlp``
    Client ``i`` draws a label distribution ``p_i ~ Dir(concentration)``,
    labels from ``p_i`` and features from ``N(mu_y, I)``. ``logreg`` is binary
    logistic regression with a bias column, ``mlp`` a one-hidden-layer tanh
    network with softmax output.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .numkit import DimensionError, as_vec

KINDS = ("quadratic", "logreg", "mlp")
MAX_HIDDEN = 64


class TaskError(ValueError):
    pass


@dataclass
class Sample:
    x: np.ndarray
    y: float
    id: int


@dataclass(eq=False)
class TaskSpec:
    kind: str
    dim: int
    clients: int
    samples_per_client: int
    X: np.ndarray  # (m, n, p) features
    y: np.ndarray  # (m, n) labels; zeros for quadratic
    ids: np.ndarray  # (m, n) globally unique sample ids
    seed: int = 0
    hetero_knob: float = 0.0
    noise_sigma: float = 0.0
    # quadratic
    A: Optional[np.ndarray] = None
    centers: Optional[np.ndarray] = None
    clip: float = 0.0
    mu: float = 0.0
    beta: float = 0.0
    optimum: Optional[np.ndarray] = None
    # logreg / mlp
    concentration: float = 0.0
    label_probs: Optional[np.ndarray] = None
    class_means: Optional[np.ndarray] = None
    classes: int = 0
    hidden: int = 0
    reg: float = 0.0
    theta0: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.clients

    @property
    def n(self) -> int:
        return self.samples_per_client

    # -- per-client oracles ---------------------------------------------

    def loss_grad_rows(self, i: int, theta: np.ndarray, rows: np.ndarray):
        """Mean loss and gradient of client ``i`` over shard rows ``rows``."""
        if self.kind == "quadratic":
            return kernels.quad_loss_grad(self.A[i], self.X[i], rows, theta, self.clip)
        if self.kind == "logreg":
            return kernels.logreg_loss_grad(self.X[i], self.y[i], rows, theta, self.reg)
        return kernels.mlp_loss_grad(self.X[i], self.y[i], rows, theta, self.hidden, self.classes)

    def full_loss_grad(self, i: int, theta: np.ndarray):
        return self.loss_grad_rows(i, theta, self._all_rows)

    def global_loss_grad(self, theta: np.ndarray):
        """Empirical risk F_S and its gradient (mean over clients, client order)."""
        loss = 0.0
        grad = np.zeros(self.dim)
        for i in range(self.m):
            li, gi = self.full_loss_grad(i, theta)
            loss += li
            grad += gi
        return loss / self.m, grad / self.m

    def rows_for_ids(self, i: int, sample_ids) -> np.ndarray:
        sample_ids = np.asarray(sample_ids, dtype=np.int64).ravel()
        lo = self.ids[i, 0]
        rows = sample_ids - lo
        if sample_ids.size == 0:
            raise TaskError("empty batch")
        bad = (rows < 0) | (rows >= self.n)
        if not bad.any():
            bad = self.ids[i, rows] != sample_ids
        if bad.any():
            raise TaskError(f"sample id(s) {sample_ids[bad].tolist()} not in client {i}'s shard")
        return rows

    def sample(self, i: int, sample_id: int) -> Sample:
        (row,) = self.rows_for_ids(i, [sample_id])
        return Sample(self.X[i, row].copy(), float(self.y[i, row]), int(sample_id))

    @property
    def _all_rows(self) -> np.ndarray:
        rows = self.extra.get("_rows")
        if rows is None:
            rows = np.arange(self.n, dtype=np.int64)
            self.extra["_rows"] = rows
        return rows

    def initial_theta(self) -> np.ndarray:
        if self.theta0 is not None:
            return self.theta0.copy()
        return np.zeros(self.dim)

    # -- generators -----------------------------------------------------

    def draw_samples(self, i: int, count: int, rng: np.random.Generator):
        """Fresh ``(x, y)`` draws from client ``i``'s generating distribution."""
        if self.kind == "quadratic":
            if self.noise_sigma == 0.0:
                xs = np.repeat(self.centers[i][None, :], count, axis=0)
            else:
                xi = rng.standard_normal((count, self.dim))
                xs = self.centers[i] + self.noise_sigma * np.linalg.solve(self.A[i], xi.T).T
            return xs, np.zeros(count)
        C = self.classes
        labels = rng.choice(C, size=count, p=self.label_probs[i])
        feats = self.class_means[labels] + rng.standard_normal((count, self.class_means.shape[1]))
        if self.kind == "logreg":
            feats = np.hstack([feats, np.ones((count, 1))])
            return feats, labels.astype(np.float64)
        return feats, labels.astype(np.int64)


# ---------------------------------------------------------------- builders


def _check_sizes(dim, m, n):
    if dim < 1:
        raise TaskError("dim must be >= 1")
    if m < 1 or n < 1:
        raise TaskError("clients and samples_per_client must be >= 1")


def _sample_ids(m, n):
    return np.arange(m * n, dtype=np.int64).reshape(m, n)


def quadratic_optimum(A, X, clip=0.0, tol=1e-13, max_iter=200):
    """Minimiser of the empirical quadratic risk.

    Closed form without clipping; with clipping, Newton iterations started
    from the unclipped solution (the clipped risk is convex).
    """
    m, n, d = X.shape
    xbar = X.mean(axis=1)
    Asum = A.sum(axis=0)
    theta = np.linalg.solve(Asum, np.einsum("ijk,ik->j", A, xbar))
    if clip <= 0.0:
        return theta
    for _ in range(max_iter):
        g = np.zeros(d)
        H = np.zeros((d, d))
        for i in range(m):
            R = theta[None, :] - X[i]
            AR = R @ A[i].T
            q = np.einsum("bj,bj->b", R, AR)
            big = q > clip * clip
            r = np.sqrt(np.where(big, q, 1.0))
            s = np.where(big, clip / r, 1.0)
            g += (s[:, None] * AR).sum(axis=0)
            H += s[~big].size * A[i]
            for b in np.flatnonzero(big):
                u = AR[b] / r[b]
                H += s[b] * (A[i] - np.outer(u, u))
        g /= m * n
        H /= m * n
        step = np.linalg.solve(H + 1e-15 * np.eye(d), g)
        theta = theta - step
        if np.linalg.norm(step) < tol * (1.0 + np.linalg.norm(theta)):
            break
    return theta


def quadratic_task(A, X, *, seed=0, hetero_knob=0.0, noise_sigma=0.0, centers=None,
                   clip=0.0, mu=None, beta=None) -> TaskSpec:
    """Quadratic task from explicit curvatures ``A`` (m, d, d) and samples ``X`` (m, n, d)."""
    A = np.asarray(A, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or A.ndim != 3 or A.shape[0] != X.shape[0] or A.shape[1:] != (X.shape[2],) * 2:
        raise DimensionError(f"incompatible shapes A{A.shape} X{X.shape}")
    m, n, d = X.shape
    _check_sizes(d, m, n)
    eig = np.linalg.eigvalsh(A)
    if eig.min() <= 0.0:
        raise TaskError("curvature matrices must be positive definite")
    if centers is None:
        centers = X.mean(axis=1)
    task = TaskSpec(
        kind="quadratic", dim=d, clients=m, samples_per_client=n,
        X=np.ascontiguousarray(X), y=np.zeros((m, n)), ids=_sample_ids(m, n),
        seed=seed, hetero_knob=hetero_knob, noise_sigma=noise_sigma,
        A=np.ascontiguousarray(A), centers=np.asarray(centers, dtype=np.float64), clip=float(clip),
        mu=float(eig.min() if mu is None else mu), beta=float(eig.max() if beta is None else beta),
    )
    task.optimum = quadratic_optimum(task.A, task.X, task.clip)
    return task


def make_quadratic(dim, m, n, hetero_knob=1.0, noise_sigma=0.0, seed=0, *,
                   mu=0.5, beta=2.0, clip=0.0, identity_curvature=False) -> TaskSpec:
    """Heterogeneous quadratic task with eigenvalues of every A_i in [mu, beta]."""
    _check_sizes(dim, m, n)
    if hetero_knob < 0 or noise_sigma < 0:
        raise TaskError("hetero_knob and noise_sigma must be >= 0")
    if not 0 < mu <= beta:
        raise TaskError("need 0 < mu <= beta")
    ss_curv, ss_centre, ss_data = np.random.SeedSequence(seed).spawn(3)
    rc = np.random.default_rng(ss_curv)
    A = np.empty((m, dim, dim))
    for i in range(m):
        if identity_curvature:
            A[i] = np.eye(dim)
            continue
        Q, _ = np.linalg.qr(rc.standard_normal((dim, dim)))
        lam = rc.uniform(mu, beta, size=dim)
        if dim >= 2:
            lam[0], lam[1] = mu, beta
        Ai = (Q * lam) @ Q.T
        A[i] = 0.5 * (Ai + Ai.T)
    rb = np.random.default_rng(ss_centre)
    c0 = rb.standard_normal(dim)
    centers = c0 + hetero_knob * rb.standard_normal((m, dim))
    task = TaskSpec(
        kind="quadratic", dim=dim, clients=m, samples_per_client=n,
        X=np.empty((m, n, dim)), y=np.zeros((m, n)), ids=_sample_ids(m, n),
        seed=seed, hetero_knob=float(hetero_knob), noise_sigma=float(noise_sigma),
        A=A, centers=centers, clip=float(clip),
        mu=1.0 if identity_curvature else float(mu), beta=1.0 if identity_curvature else float(beta),
    )
    for i, ss in enumerate(ss_data.spawn(m)):
        task.X[i], _ = task.draw_samples(i, n, np.random.default_rng(ss))
    task.optimum = quadratic_optimum(task.A, task.X, task.clip)
    return task


def _classification_task(kind, features, m, n, classes, concentration, seed, hidden=0,
                         separation=2.0, reg=0.0):
    _check_sizes(features, m, n)
    if concentration <= 0:
        raise TaskError("concentration must be > 0")
    ss_probs, ss_means, ss_data, ss_init = np.random.SeedSequence(seed).spawn(4)
    probs = np.random.default_rng(ss_probs).dirichlet(np.full(classes, float(concentration)), size=m)
    means = separation * np.random.default_rng(ss_means).standard_normal((classes, features))
    if kind == "logreg":
        dim = features + 1
        p = features + 1
    else:
        if not 1 <= hidden <= MAX_HIDDEN:
            raise TaskError(f"hidden units must be in [1, {MAX_HIDDEN}]")
        dim = hidden * features + hidden + classes * hidden + classes
        p = features
    task = TaskSpec(
        kind=kind, dim=dim, clients=m, samples_per_client=n,
        X=np.empty((m, n, p)), y=np.empty((m, n), dtype=np.float64 if kind == "logreg" else np.int64),
        ids=_sample_ids(m, n), seed=seed, concentration=float(concentration),
        label_probs=probs, class_means=means, classes=classes, hidden=hidden, reg=reg,
    )
    for i, ss in enumerate(ss_data.spawn(m)):
        task.X[i], task.y[i] = task.draw_samples(i, n, np.random.default_rng(ss))
    if kind == "mlp":
        task.theta0 = 0.1 * np.random.default_rng(ss_init).standard_normal(dim)
    return task


def make_logreg(features, m, n, concentration=0.3, seed=0, *, separation=2.0, reg=1e-3) -> TaskSpec:
    """Binary logistic regression; parameter dim is ``features + 1`` (bias column)."""
    return _classification_task("logreg", features, m, n, 2, concentration, seed,
                                separation=separation, reg=reg)


def make_mlp(features, m, n, classes=4, hidden=16, concentration=0.3, seed=0, *,
             separation=2.0) -> TaskSpec:
    return _classification_task("mlp", features, m, n, classes, concentration, seed,
                                hidden=hidden, separation=separation)


def make_task(kind, **kw) -> TaskSpec:
    if kind == "quadratic":
        return make_quadratic(**kw)
    if kind == "logreg":
        return make_logreg(**kw)
    if kind == "mlp":
        return make_mlp(**kw)
    raise TaskError(f"unknown task kind {kind!r}; expected one of {KINDS}")


# ------------------------------------------------------------- operations


def loss_grad(task: TaskSpec, client_i: int, theta, sample_ids):
    """Mean loss and gradient of ``client_i`` over the samples named by id."""
    if not 0 <= client_i < task.m:
        raise TaskError(f"client {client_i} out of range")
    theta = as_vec(theta)
    if theta.shape[0] != task.dim:
        raise DimensionError(f"theta has length {theta.shape[0]}, task dim is {task.dim}")
    rows = task.rows_for_ids(client_i, sample_ids)
    loss, grad = task.loss_grad_rows(client_i, theta, rows)
    return float(loss), grad


def measure_sigma_g(task: TaskSpec, theta) -> float:
    """Mean over clients of ||grad F_i(theta) - grad F_S(theta)|| (full-batch)."""
    theta = as_vec(theta)
    if theta.shape[0] != task.dim:
        raise DimensionError("theta dimension mismatch")
    grads = [task.full_loss_grad(i, theta)[1] for i in range(task.m)]
    gbar = np.zeros(task.dim)
    for g in grads:
        gbar += g
    gbar /= task.m
    return float(sum(np.linalg.norm(g - gbar) for g in grads) / task.m)


def perturb_one_sample(task: TaskSpec, client_j: int, sample_id: int, seed: int,
                       replacement: Optional[Sample] = None) -> TaskSpec:
    """Copy of ``task`` with one sample of ``client_j`` redrawn from its distribution.

    ``replacement`` overrides the draw (used to build S' = S).
    """
    (row,) = task.rows_for_ids(client_j, [sample_id])
    new = copy.deepcopy(task)
    new.extra.pop("_rows", None)
    if replacement is None:
        xs, ys = task.draw_samples(client_j, 1, np.random.default_rng(seed))
        x_new, y_new = xs[0], ys[0]
    else:
        x_new, y_new = replacement.x, replacement.y
    new.X[client_j, row] = x_new
    new.y[client_j, row] = y_new
    if new.kind == "quadratic":
        new.optimum = quadratic_optimum(new.A, new.X, new.clip)
    return new


# -------------------------------------------------------------- partition


@dataclass
class DirichletPartition:
    concentration: float
    assignment: np.ndarray  # client index per sample id

    def client_indices(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == i)

    def counts(self, m: int) -> np.ndarray:
        return np.bincount(self.assignment, minlength=m)


def dirichlet_partition(labels, m: int, concentration: float, seed: int,
                        max_tries: int = 1000) -> DirichletPartition:
    """Label-skewed split: each class is divided among clients by Dir(concentration).

    Redraws until every client holds at least one sample.
    """
    labels = np.asarray(labels)
    if concentration <= 0:
        raise TaskError("concentration must be > 0")
    if m < 1:
        raise TaskError("need at least one client")
    if labels.size < m:
        raise TaskError(f"{labels.size} samples cannot cover {m} clients")
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    for _ in range(max_tries):
        assignment = np.empty(labels.size, dtype=np.int64)
        for c in classes:
            idx = np.flatnonzero(labels == c)
            rng.shuffle(idx)
            props = rng.dirichlet(np.full(m, float(concentration)))
            cuts = (np.cumsum(props)[:-1] * idx.size).astype(np.int64)
            for i, part in enumerate(np.split(idx, cuts)):
                assignment[part] = i
        if np.bincount(assignment, minlength=m).min() >= 1:
            return DirichletPartition(float(concentration), assignment)
    raise TaskError(f"could not give every client a sample in {max_tries} draws")


# ---------------------------------------------------------- held-out pool


@dataclass
class HeldOutPool:
    client: np.ndarray
    X: np.ndarray
    y: np.ndarray


def draw_pool(task: TaskSpec, size: int, seed: int) -> HeldOutPool:
    """Fresh samples spread round-robin over the clients' distributions."""
    client = np.arange(size) % task.m
    rng = np.random.default_rng(seed)
    X = np.empty((size,) + task.X.shape[2:])
    y = np.empty(size, dtype=task.y.dtype)
    for i in range(task.m):
        sel = np.flatnonzero(client == i)
        if sel.size:
            X[sel], y[sel] = task.draw_samples(i, sel.size, rng)
    return HeldOutPool(client, X, y)


def pool_losses(task: TaskSpec, theta: np.ndarray, pool: HeldOutPool) -> np.ndarray:
    """Per-sample losses of ``theta`` on every pool sample."""
    out = np.empty(pool.client.size)
    one = np.zeros(1, dtype=np.int64)
    for s in range(out.size):
        i = pool.client[s]
        if task.kind == "quadratic":
            out[s], _ = kernels.quad_loss_grad(task.A[i], pool.X[s : s + 1], one, theta, task.clip)
        elif task.kind == "logreg":
            out[s], _ = kernels.logreg_loss_grad(pool.X[s : s + 1], pool.y[s : s + 1], one, theta, 0.0)
        else:
            out[s], _ = kernels.mlp_loss_grad(pool.X[s : s + 1], pool.y[s : s + 1], one, theta,
                                              task.hidden, task.classes)
    return out


def lipschitz_constant(task: TaskSpec) -> float:
    """Per-sample Lipschitz constant of the loss in theta (quadratic with clip only)."""
    if task.kind != "quadratic" or task.clip <= 0:
        raise TaskError("a finite Lipschitz constant needs a clipped quadratic task")
    return task.clip * float(np.sqrt(task.beta))


# ------------------------------------------------------------ snapshots

_ARRAYS = ("X", "y", "ids", "A", "centers", "optimum", "label_probs", "class_means", "theta0")
_SCALARS = ("kind", "dim", "clients", "samples_per_client", "seed", "hetero_knob", "noise_sigma",
            "clip", "mu", "beta", "concentration", "classes", "hidden", "reg")


def task_to_dict(task: TaskSpec) -> dict:
    doc = {k: getattr(task, k) for k in _SCALARS}
    doc["shards"] = {}
    for k in _ARRAYS:
        v = getattr(task, k)
        doc["shards"][k] = None if v is None else {"dtype": str(v.dtype), "data": v.tolist()}
    return doc


def task_from_dict(doc: dict) -> TaskSpec:
    kw = {k: doc[k] for k in _SCALARS}
    for k, v in doc["shards"].items():
        kw[k] = None if v is None else np.asarray(v["data"], dtype=v["dtype"])
    return TaskSpec(**kw)


def save_task(task: TaskSpec, path) -> None:
    with open(path, "w") as fh:
        json.dump(task_to_dict(task), fh)


def load_task(path) -> TaskSpec:
    with open(path) as fh:
        return task_from_dict(json.load(fh))
