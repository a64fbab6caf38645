"""Coordinate-MLP signed distance field trained with the pulling loss.

The network is evaluated in forward mode for the spatial gradient: every
layer carries its value together with the three input tangents, stacked as a
``(4, B, width)`` array so each layer is a single matmul. The pulling loss
depends on ``grad_q f``, so its parameter gradient is obtained by a reverse
sweep over that augmented forward pass (second-order terms enter through the
activation's second derivative).
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional

import numpy as np
from scipy.spatial import cKDTree

from .cloud import PointCloud, UnitTransform
from .geometry import DomainError

log = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)


class NumericError(FloatingPointError):
    pass


class DegenerateBatchError(RuntimeError):
    """Every sample in a batch had a vanishing field gradient."""


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, model: "MlpSdf", step: int):
        super().__init__(msg)
        self.model = model
        self.step = step


# --------------------------------------------------------------------------
# activations: (value, first derivative, second derivative)


def _softplus(z, beta):
    e = np.exp(-beta * np.abs(z))
    inv = 1.0 / (1.0 + e)
    val = np.maximum(z, 0.0) + np.log1p(e) / beta
    sig = np.where(z >= 0, inv, e * inv)
    return val, sig, (beta * e) * (inv * inv)


def _softplus_value(z, beta):
    return np.maximum(z, 0.0) + np.log1p(np.exp(-beta * np.abs(z))) / beta


def _relu(z, beta):
    # derivative defined a.e.; second derivative taken as 0
    pos = z > 0
    return np.where(pos, z, 0.0), pos.astype(z.dtype), np.zeros_like(z)


_ACTIVATIONS = {"softplus": _softplus, "relu": _relu}
_VALUE_ONLY = {"softplus": _softplus_value, "relu": lambda z, beta: np.maximum(z, 0.0)}


@dataclass(frozen=True)
class Architecture:
    hidden: tuple = (128,) * 8
    skip: Optional[int] = 4
    activation: str = "softplus"
    beta: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.skip is not None and not 0 < self.skip <= len(self.hidden):
            raise ValueError("skip must index a layer in 1..len(hidden)")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        """(in, out) of every affine layer; the skip layer gets 3 extra inputs."""
        widths = [3, *self.hidden, 1]
        dims = []
        for i in range(len(widths) - 1):
            n_in = widths[i] + (3 if i == self.skip else 0)
            dims.append((n_in, widths[i + 1]))
        return dims

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


class MlpSdf:
    """Signed distance MLP ``f(q)`` on unit-space points with a mm transform attached."""

    def __init__(self, arch: Architecture, params: list, transform: UnitTransform | None = None):
        self.arch = arch
        dims = arch.layer_dims
        if len(params) != 2 * len(dims):
            raise ValueError("parameter list does not match architecture")
        self.params = [np.array(p, dtype=float) for p in params]
        for k, (n_in, n_out) in enumerate(dims):
            if self.params[2 * k].shape != (n_out, n_in) or self.params[2 * k + 1].shape != (n_out,):
                raise ValueError(f"layer {k} parameter shapes mismatch")
        self.transform = transform if transform is not None else UnitTransform.identity()
        self._act = _ACTIVATIONS[arch.activation]
        self._act_value = _VALUE_ONLY[arch.activation]

    # ---------------------------------------------------------------- init

    @classmethod
    def geometric_init(cls, arch: Architecture, rng: np.random.Generator, radius: float = 0.5,
                       transform: UnitTransform | None = None) -> "MlpSdf":
        """Initialize so that ``f(q) ~ |q| - radius``."""
        params = []
        dims = arch.layer_dims
        for k, (n_in, n_out) in enumerate(dims):
            if k == len(dims) - 1:
                w = rng.normal(math.sqrt(math.pi) / math.sqrt(n_in), 1e-4, size=(n_out, n_in))
                b = np.full(n_out, -radius)
            else:
                w = rng.normal(0.0, math.sqrt(2.0) / math.sqrt(n_out), size=(n_out, n_in))
                b = np.zeros(n_out)
            params += [w, b]
        return cls(arch, params, transform)

    # ---------------------------------------------------------------- params

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.n_params:
            raise ValueError("flat parameter vector has the wrong size")
        i = 0
        for p in self.params:
            p[...] = flat[i:i + p.size].reshape(p.shape)
            i += p.size

    def copy(self) -> "MlpSdf":
        return copy.deepcopy(self)

    # ---------------------------------------------------------------- evaluation

    def __call__(self, q, chunk: int = 32768) -> np.ndarray:
        """Signed distance (unit space) at unit-space points ``q`` of shape ``(..., 3)``."""
        q = np.asarray(q, dtype=float)
        flat = q.reshape(-1, 3)
        out = np.empty(len(flat))
        for s in range(0, len(flat), chunk):
            out[s:s + chunk] = self._value(flat[s:s + chunk])
        return out.reshape(q.shape[:-1])

    def _value(self, x: np.ndarray) -> np.ndarray:
        h = x
        last = len(self.params) // 2 - 1
        for k in range(last + 1):
            if k == self.arch.skip:
                h = np.concatenate([h, x], axis=1) / SQRT2
            w, b = self.params[2 * k], self.params[2 * k + 1]
            h = h @ w.T + b
            if k < last:
                h = self._act_value(h, self.arch.beta)
        return h[:, 0]

    def world(self, p, chunk: int = 32768) -> np.ndarray:
        """Signed distance in mm at world points."""
        return self(self.transform.to_unit(p), chunk) * self.transform.scale

    def _forward(self, x: np.ndarray, keep: bool, dtype=np.float64):
        """Value + input-tangent forward pass; optionally keeps the tape for reversal."""
        nb = len(x)
        xs = np.zeros((4, nb, 3), dtype=dtype)
        xs[0] = x
        for j in range(3):
            xs[1 + j, :, j] = 1.0
        tape = []
        h = xs
        last = len(self.params) // 2 - 1
        for k in range(last + 1):
            if k == self.arch.skip:
                h = np.concatenate([h, xs], axis=2) / SQRT2
            w = self.params[2 * k].astype(dtype, copy=False)
            b = self.params[2 * k + 1].astype(dtype, copy=False)
            z = h @ w.T
            z[0] += b
            if not np.all(np.isfinite(z)):
                raise NumericError(f"non-finite pre-activation at layer {k}")
            if k < last:
                a, d1, d2 = self._act(z[0], self.arch.beta)
                nh = np.empty_like(z)
                nh[0] = a
                nh[1:] = d1 * z[1:]
                if keep:
                    tape.append((h, z, d1, d2))
                h = nh
            else:
                if keep:
                    tape.append((h, None, None, None))
                h = z
        s = h[0, :, 0].astype(np.float64)
        g = h[1:, :, 0].T.astype(np.float64)
        return s, g, tape

    def eval_with_gradient(self, q) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(f(q), grad_q f(q))`` for unit-space points ``q`` of shape ``(B, 3)``."""
        q = np.atleast_2d(np.asarray(q, dtype=float))
        s, g, _ = self._forward(q, keep=False)
        return s, g

    def _backward(self, tape, s_bar: np.ndarray, g_bar: np.ndarray) -> list[np.ndarray]:
        """Reverse sweep given adjoints of ``s`` (B,) and ``g`` (B, 3)."""
        nb = len(s_bar)
        dtype = tape[0][0].dtype
        zbar = np.empty((4, nb, 1), dtype=dtype)
        zbar[0, :, 0] = s_bar
        zbar[1:, :, 0] = g_bar.T
        grads = [None] * len(self.params)
        last = len(tape) - 1
        for k in range(last, -1, -1):
            h = tape[k][0]
            w = self.params[2 * k].astype(dtype, copy=False)
            n_out, n_in = w.shape
            grads[2 * k] = (zbar.reshape(-1, n_out).T @ h.reshape(-1, n_in)).astype(np.float64)
            grads[2 * k + 1] = zbar[0].sum(axis=0, dtype=np.float64)
            if k == 0:
                break
            hbar = zbar @ w
            if k == self.arch.skip:
                hbar = hbar[:, :, : n_in - 3] / SQRT2
            _, z, d1, d2 = tape[k - 1]
            nz = np.empty_like(hbar)
            nz[1:] = hbar[1:] * d1
            nz[0] = hbar[0] * d1 + d2 * np.einsum("cbn,cbn->bn", hbar[1:], z[1:])
            zbar = nz
        return grads

    def input_gradient_only(self, q) -> np.ndarray:
        return self.eval_with_gradient(q)[1]


# --------------------------------------------------------------------------
# pulling


def pull(q, s, g, eps_g: float = 1e-8):
    """Move queries onto the zero level set: ``q - s * g / |g|``.

    Returns ``(pulled, valid)``; rows with ``|g| <= eps_g`` are marked invalid
    and left at ``q``.
    """
    q = np.atleast_2d(np.asarray(q, dtype=float))
    g = np.atleast_2d(np.asarray(g, dtype=float))
    s = np.atleast_1d(np.asarray(s, dtype=float))
    norm = np.sqrt((g * g).sum(axis=1))
    valid = norm > eps_g
    safe = np.where(valid, norm, 1.0)
    out = q - np.where(valid, s / safe, 0.0)[:, None] * g
    return out, valid


@dataclass
class QueryBatch:
    queries: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.queries)


def pull_loss(net: MlpSdf, batch: QueryBatch, eps_g: float = 1e-8, with_grad: bool = True,
              dtype=np.float64):
    """Mean squared distance between pulled queries and their target cloud points.

    Returns ``(loss, grads, n_skipped)`` where ``grads`` matches ``net.params``
    (None when ``with_grad`` is False).
    """
    q = np.asarray(batch.queries, dtype=float)
    t = np.asarray(batch.targets, dtype=float)
    s, g, tape = net._forward(q.astype(dtype), keep=with_grad, dtype=dtype)
    norm = np.sqrt((g * g).sum(axis=1))
    valid = norm > eps_g
    n_valid = int(valid.sum())
    skipped = len(q) - n_valid
    if n_valid == 0:
        raise DegenerateBatchError("all samples in the batch have a vanishing gradient")
    safe = np.where(valid, norm, 1.0)
    u = g / safe[:, None]
    resid = q - s[:, None] * u - t
    resid[~valid] = 0.0
    loss = float((resid * resid).sum() / n_valid)
    if not with_grad:
        return loss, None, skipped
    r_bar = 2.0 * resid / n_valid
    s_bar = -(r_bar * u).sum(axis=1)
    u_bar = -s[:, None] * r_bar
    # d(g/|g|)/dg = (I - u u^T) / |g|
    g_bar = (u_bar - (u_bar * u).sum(axis=1, keepdims=True) * u) / safe[:, None]
    g_bar[~valid] = 0.0
    grads = net._backward(tape, s_bar.astype(dtype), g_bar.astype(dtype))
    return loss, grads, skipped


# --------------------------------------------------------------------------
# query sampling


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 10000
    compute_dtype: str = "float32"
    batch_size: int = 512
    lr: float = 1e-3
    lr_final: float = 0.0
    lr_schedule: str = "cosine"
    queries_per_point: int = 8
    knn_k: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    eps_g: float = 1e-8
    init_radius: float = 0.5
    seed: int = 0
    log_every: int = 1

    def diagnostics(self) -> list[str]:
        out = []
        if self.steps < 0:
            out.append("steps must be >= 0")
        if self.batch_size < 1:
            out.append("batch_size must be >= 1")
        if self.knn_k < 1:
            out.append("knn_k must be >= 1")
        if self.queries_per_point < 1:
            out.append("queries_per_point must be >= 1")
        if not self.lr > 0:
            out.append("lr must be > 0")
        if self.compute_dtype not in ("float32", "float64"):
            out.append("compute_dtype must be float32 or float64")
        if self.lr_schedule not in ("cosine", "constant"):
            out.append(f"unknown lr_schedule {self.lr_schedule!r}")
        return out

    def learning_rate(self, step: int) -> float:
        if self.lr_schedule == "constant" or self.steps <= 1:
            return self.lr
        frac = step / self.steps
        return self.lr_final + 0.5 * (self.lr - self.lr_final) * (1.0 + math.cos(math.pi * frac))


class QueryPool:
    """Gaussian queries around every cloud point paired with their nearest cloud point."""

    def __init__(self, points: np.ndarray, queries_per_point: int, knn_k: int,
                 rng: np.random.Generator):
        points = np.asarray(points, dtype=float)
        if len(points) < 2:
            raise DomainError("need at least 2 cloud points to sample queries")
        k = min(knn_k, len(points) - 1)
        tree = cKDTree(points)
        dist, _ = tree.query(points, k=k + 1)
        self.sigma = dist[:, -1]
        qpp = queries_per_point
        noise = rng.normal(size=(len(points) * qpp, 3))
        self.queries = np.repeat(points, qpp, axis=0) + noise * np.repeat(self.sigma, qpp)[:, None]
        self.targets = nearest_points(tree, points, self.queries)
        self.points = points

    def __len__(self) -> int:
        return len(self.queries)

    def batches(self, batch_size: int, rng: np.random.Generator) -> Iterator[QueryBatch]:
        while True:
            idx = rng.integers(0, len(self.queries), size=batch_size)
            yield QueryBatch(self.queries[idx], self.targets[idx])


def nearest_points(tree: cKDTree, points: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Exact nearest cloud point per query (ties resolved to the lowest index)."""
    dist, idx = tree.query(queries, k=2)
    # the tree may order equidistant neighbours arbitrarily; pin the lower index
    tie = dist[:, 0] == dist[:, 1]
    first = np.where(tie, np.minimum(idx[:, 0], idx[:, 1]), idx[:, 0])
    return points[first]


def sample_queries(points: np.ndarray, cfg: TrainConfig, rng: np.random.Generator) -> QueryPool:
    if len(points) < min(cfg.knn_k, 1) + 1:
        raise DomainError("cloud too small for query sampling")
    return QueryPool(points, cfg.queries_per_point, cfg.knn_k, rng)


# --------------------------------------------------------------------------
# optimizer + training


class Adam:
    def __init__(self, params: list, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, params: list, grads: list, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    def append(self, step, loss, lr, skipped):
        self.steps.append(step)
        self.loss.append(loss)
        self.lr.append(lr)
        self.skipped.append(skipped)

    @property
    def total_skipped(self) -> int:
        return int(sum(self.skipped))


def train(cloud: PointCloud | np.ndarray, cfg: TrainConfig = TrainConfig(),
          arch: Architecture = Architecture(), transform: UnitTransform | None = None,
          net: MlpSdf | None = None, progress=None) -> tuple[MlpSdf, TrainLog]:
    """Fit a field to a unit-space cloud with the pulling loss."""
    problems = cfg.diagnostics()
    if problems:
        raise ValueError("; ".join(problems))
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
    rng = np.random.default_rng(cfg.seed)
    if net is None:
        net = MlpSdf.geometric_init(arch, rng, cfg.init_radius, transform)
    elif transform is not None:
        net.transform = transform
    tlog = TrainLog()
    if cfg.steps == 0:
        return net, tlog
    pool = sample_queries(pts, cfg, rng)
    dtype = np.dtype(cfg.compute_dtype)
    opt = Adam(net.params, cfg.beta1, cfg.beta2, cfg.adam_eps)
    last_good = net.copy()
    for step, batch in zip(range(cfg.steps), pool.batches(cfg.batch_size, rng)):
        lr = cfg.learning_rate(step)
        try:
            loss, grads, skipped = pull_loss(net, batch, cfg.eps_g, dtype=dtype)
        except NumericError as exc:
            raise TrainingDiverged(f"step {step}: {exc}", last_good, step) from exc
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
            raise TrainingDiverged(f"non-finite loss at step {step}", last_good, step)
        if cfg.log_every and step % cfg.log_every == 0:
            tlog.append(step, loss, lr, skipped)
        if step % 500 == 0:
            last_good = net.copy()
            if progress is not None:
                progress(step, loss)
        opt.step(net.params, grads, lr)
    return net, tlog
