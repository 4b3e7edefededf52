"""l2 projected gradient descent and random probing for empirical robustness."""

from __future__ import annotations

import csv
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .exceptions import AttackError, ContractError
from .tensor import Tensor

CSV_HEADER = ["sample_id", "clean_correct", "attack_success", "final_margin"]


@dataclass
class AttackConfig:
    eps: float = 36 / 255
    steps: int = 100
    step_size: float | None = None  # defaults to min(2.5 * eps / steps, eps)
    restarts: int = 5
    seed: int = 0
    clip: tuple[float, float] | None = (0.0, 1.0)

    def __post_init__(self):
        if self.step_size is None:
            self.step_size = min(2.5 * self.eps / self.steps, self.eps) if self.steps > 0 else 0.0
        self.validate()

    def validate(self) -> "AttackConfig":
        if self.eps < 0:
            raise ContractError(f"eps: must be >= 0, got {self.eps}")
        if self.steps < 1:
            raise ContractError(f"steps: must be >= 1, got {self.steps}")
        if self.restarts < 1:
            raise ContractError(f"restarts: must be >= 1, got {self.restarts}")
        if self.step_size < 0 or self.step_size > self.eps:
            raise ContractError(f"step_size: must lie in [0, eps], got {self.step_size}")
        return self


@contextmanager
def frozen(model):
    """Temporarily stop tracking parameter gradients."""
    params = list(model.parameters().values()) if hasattr(model, "parameters") else []
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, s in zip(params, saved):
            p.requires_grad = s


def _flat_norm(a: np.ndarray) -> np.ndarray:
    return np.sqrt((a.reshape(len(a), -1) ** 2).sum(axis=1))


def _per_sample(v: np.ndarray, like: np.ndarray) -> np.ndarray:
    return v.reshape((len(like),) + (1,) * (like.ndim - 1))


def project(x_adv: np.ndarray, x: np.ndarray, eps: float, clip=(0.0, 1.0)) -> np.ndarray:
    """Radial projection onto the l2 ball around ``x``, then the box.

    Clipping to a box that contains ``x`` can only shorten the perturbation,
    so the result stays inside the ball.
    """
    delta = x_adv - x
    norms = _flat_norm(delta)
    factor = np.where(norms > eps, eps / np.maximum(norms, 1e-300), 1.0)
    out = x + delta * _per_sample(factor, delta)
    if clip is not None:
        out = np.clip(out, clip[0], clip[1])
    return out


def _logits(model, x: np.ndarray) -> np.ndarray:
    with T.no_grad():
        return np.asarray(model.forward(Tensor(x)).data, dtype=np.float64)


def margins(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``z_y - max_{j != y} z_j``; negative means misclassified."""
    z = np.array(logits, dtype=np.float64)
    n = len(z)
    zy = z[np.arange(n), y].copy()
    z[np.arange(n), y] = -np.inf
    return zy - z.max(axis=1)


def _input_grad(model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    xt = Tensor(x, requires_grad=True)
    logits = model.forward(xt)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(y)), y] = 1.0
    # summed (not averaged) cross-entropy keeps per-sample gradients independent of batch size
    ce = T.tsum(T.sub(T.logsumexp(logits, axis=1), T.tsum(T.mul(logits, Tensor(onehot, dtype=logits.dtype)), 1)))
    T.backward(ce)
    if xt.grad is None:  # logits do not depend on the input
        return np.zeros(x.shape)
    g = np.asarray(xt.grad, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise AttackError("non-finite input gradient during PGD")
    return g


def pgd_l2(model, x, y, cfg: AttackConfig) -> tuple[np.ndarray, np.ndarray]:
    """Multi-restart l2 PGD on cross-entropy.

    Returns ``(x_adv, success)`` per sample.  ``success`` means some iterate
    was classified differently from ``y``; ``x_adv`` is the first such
    iterate, or else the lowest-margin final iterate.  The first restart
    starts at ``x``, later ones at a uniform random point in the ball.
    """
    cfg.validate()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n = len(x)
    dtype = T.get_default_dtype()
    best = x.copy()
    best_margin = margins(_logits(model, x.astype(dtype)), y)
    success = best_margin < 0
    if cfg.eps == 0 or n == 0:
        return best, success
    rng = np.random.default_rng(cfg.seed)
    dim = x[0].size
    with frozen(model):
        for r in range(cfg.restarts):
            todo = ~success
            if not todo.any():
                break
            xs, ys = x[todo], y[todo]
            if r == 0:
                cur = xs.copy()
            else:
                d = rng.standard_normal(xs.shape)
                d /= _per_sample(_flat_norm(d), d)
                radius = cfg.eps * rng.random(len(xs)) ** (1.0 / dim)
                cur = project(xs + d * _per_sample(radius, d), xs, cfg.eps, cfg.clip)
            done = np.zeros(len(xs), dtype=bool)
            found = cur.copy()
            for _ in range(cfg.steps):
                g = _input_grad(model, cur.astype(dtype), ys)
                gn = _flat_norm(g)
                step = g / _per_sample(np.where(gn > 0, gn, 1.0), g)
                nxt = project(cur + cfg.step_size * step, xs, cfg.eps, cfg.clip)
                cur = np.where(_per_sample(done, cur), cur, nxt)
                m = margins(_logits(model, cur.astype(dtype)), ys)
                newly = (m < 0) & ~done
                found[newly] = cur[newly]
                done |= newly
                if done.all():
                    break
            m = margins(_logits(model, cur.astype(dtype)), ys)
            idx = np.flatnonzero(todo)
            for k, i in enumerate(idx):
                if done[k]:
                    best[i], success[i] = found[k], True
                elif m[k] < best_margin[i]:
                    best[i], best_margin[i] = cur[k], m[k]
    return best, success


def random_probe(model, x, y, eps: float, n_probes: int = 1000, seed: int = 0, clip=(0.0, 1.0), chunk: int = 250) -> np.ndarray:
    """Whether any of ``n_probes`` points on the radius-``eps`` sphere flips the label."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    dtype = T.get_default_dtype()
    out = np.zeros(len(x), dtype=bool)
    for i in range(len(x)):
        left = n_probes
        while left > 0 and not out[i]:
            k = min(chunk, left)
            d = rng.standard_normal((k,) + x[i].shape)
            d *= eps / _per_sample(_flat_norm(d), d)
            pts = x[i][None] + d
            if clip is not None:
                pts = np.clip(pts, clip[0], clip[1])
            m = margins(_logits(model, pts.astype(dtype)), np.full(k, y[i]))
            out[i] = bool((m < 0).any())
            left -= k
    return out


@dataclass
class AttackResult:
    clean_correct: np.ndarray
    success: np.ndarray
    final_margin: np.ndarray
    x_adv: np.ndarray

    @property
    def robust_accuracy(self) -> float:
        return float((self.clean_correct & ~self.success).mean())

    @property
    def clean_accuracy(self) -> float:
        return float(self.clean_correct.mean())


def attack_dataset(model, dataset, cfg: AttackConfig, batch_size: int = 256) -> AttackResult:
    if len(dataset) == 0:
        raise ContractError("cannot attack an empty dataset")
    x = dataset.images.astype(np.float64)
    y = dataset.labels
    clean = margins(_logits(model, x.astype(T.get_default_dtype())), y) > 0
    advs, succ = [], []
    for i in range(0, len(x), batch_size):
        a, s = pgd_l2(model, x[i : i + batch_size], y[i : i + batch_size], cfg)
        advs.append(a)
        succ.append(s)
    x_adv = np.concatenate(advs)
    success = np.concatenate(succ)
    final = margins(_logits(model, x_adv.astype(T.get_default_dtype())), y)
    return AttackResult(clean, success, final, x_adv)


def empirical_robust_acc(model, dataset, cfg: AttackConfig) -> float:
    """Fraction of samples classified correctly and not broken by any restart."""
    return attack_dataset(model, dataset, cfg).robust_accuracy


def write_attack_report(path, result: AttackResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for i in range(len(result.success)):
            w.writerow([i, int(result.clean_correct[i]), int(result.success[i]), repr(float(result.final_margin[i]))])
