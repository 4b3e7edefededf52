"""Largest-singular-value machinery.

``power_iteration`` is the estimator used by the layers and the Lipschitz
report.  ``svd_oracle`` is an independent exact reference (cyclic Jacobi on
the Gram matrix) used only to check it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .exceptions import ContractError, DimensionError
from .tensor import Tensor

# Multiplier applied to an estimate when a certified upper bound is needed.
SAFETY_FACTOR = 1.001


@dataclass(frozen=True)
class LinearOperator:
    """A linear map given by its action and the action of its adjoint."""

    apply: Callable[[np.ndarray], np.ndarray]
    apply_transpose: Callable[[np.ndarray], np.ndarray]
    input_shape: tuple[int, ...]
    output_shape: tuple[int, ...]

    @property
    def input_size(self) -> int:
        return math.prod(self.input_shape)

    @property
    def output_size(self) -> int:
        return math.prod(self.output_shape)

    @classmethod
    def from_matrix(cls, m) -> "LinearOperator":
        m = np.asarray(m, dtype=np.float64)
        if m.ndim != 2:
            raise DimensionError(f"expected a matrix, got shape {m.shape}")
        return cls(
            apply=lambda x: m @ x,
            apply_transpose=lambda u: m.T @ u,
            input_shape=(m.shape[1],),
            output_shape=(m.shape[0],),
        )

    @classmethod
    def identity(cls, shape) -> "LinearOperator":
        shape = tuple(shape)
        return cls(lambda x: x.copy(), lambda u: u.copy(), shape, shape)


@dataclass(frozen=True)
class SigmaEstimate:
    value: float
    iterations_used: int
    converged: bool
    tolerance: float

    def bound(self) -> float:
        """Estimate inflated by :data:`SAFETY_FACTOR` (power iteration underestimates)."""
        return self.value * SAFETY_FACTOR


def _checked_apply(fn, x, expected, what):
    y = np.asarray(fn(x), dtype=np.float64)
    if y.shape != expected:
        raise DimensionError(f"{what} returned shape {y.shape}, expected {expected}")
    return y


def power_iteration(
    op: LinearOperator,
    max_iters: int = 100,
    tol: float = 1e-6,
    seed: int = 0,
    v0: np.ndarray | None = None,
) -> SigmaEstimate:
    """Estimate the largest singular value of ``op``.

    Alternates ``apply`` and ``apply_transpose`` from a seeded Gaussian start
    (or ``v0``) and stops once the relative change of the estimate drops to
    ``tol``.  The estimate approaches the true value from below.
    """
    if max_iters < 1:
        raise ContractError("max_iters must be >= 1")
    if tol <= 0:
        raise ContractError("tol must be > 0")
    if v0 is None:
        v = np.random.default_rng(seed).standard_normal(op.input_shape)
    else:
        v = np.asarray(v0, dtype=np.float64)
        if v.shape != tuple(op.input_shape):
            raise DimensionError(f"start vector shape {v.shape} != operator input {op.input_shape}")
    norm = np.linalg.norm(v)
    if norm == 0:
        raise ContractError("start vector is zero")
    v = v / norm
    sigma = 0.0
    for it in range(1, max_iters + 1):
        u = _checked_apply(op.apply, v, tuple(op.output_shape), "apply")
        un = np.linalg.norm(u)
        if un == 0.0:
            return SigmaEstimate(0.0, it, True, tol)
        u /= un
        w = _checked_apply(op.apply_transpose, u, tuple(op.input_shape), "apply_transpose")
        new_sigma = float(np.linalg.norm(w))
        if new_sigma == 0.0:
            return SigmaEstimate(0.0, it, True, tol)
        v = w / new_sigma
        if abs(new_sigma - sigma) <= tol * new_sigma:
            return SigmaEstimate(new_sigma, it, True, tol)
        sigma = new_sigma
    return SigmaEstimate(sigma, max_iters, False, tol)


def _jacobi_max_eigenvalue(a: np.ndarray, max_sweeps: int = 60) -> float:
    """Largest eigenvalue of a symmetric matrix by parallel-order Jacobi."""
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if n == 1:
        return float(a[0, 0])
    m = n + (n % 2)
    if m != n:
        padded = np.zeros((m, m))
        padded[:n, :n] = a
        a = padded
    scale = np.abs(a).max()
    if scale == 0.0:
        return 0.0
    # round-robin tournament: m-1 rounds of m/2 disjoint pairs
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        half = m // 2
        p = np.array(players[:half])
        q = np.array(players[half:][::-1])
        rounds.append((np.minimum(p, q), np.maximum(p, q)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    for _ in range(max_sweeps):
        off = np.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0))
        if off <= 1e-15 * np.linalg.norm(a):
            break
        for p, q in rounds:
            apq = a[p, q]
            active = np.abs(apq) > 1e-300
            if not active.any():
                continue
            p, q, apq = p[active], q[active], apq[active]
            tau = (a[q, q] - a[p, p]) / (2.0 * apq)
            t = np.sign(tau) / (np.abs(tau) + np.hypot(1.0, tau))
            t[tau == 0] = 1.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            rp, rq = a[p, :].copy(), a[q, :].copy()
            a[p, :] = c[:, None] * rp - s[:, None] * rq
            a[q, :] = s[:, None] * rp + c[:, None] * rq
            cp, cq = a[:, p].copy(), a[:, q].copy()
            a[:, p] = cp * c - cq * s
            a[:, q] = cp * s + cq * c
    return float(np.max(np.diag(a)[:n]))


def svd_oracle(m) -> float:
    """Exact largest singular value of a small matrix (64-bit Jacobi)."""
    if isinstance(m, Tensor):
        m = m.data
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"svd_oracle expects a matrix, got shape {m.shape}")
    if m.size > 16384:
        raise ContractError(f"svd_oracle limited to 16384 entries, got {m.shape}")
    if m.size == 0:
        return 0.0
    gram = m.T @ m if m.shape[1] <= m.shape[0] else m @ m.T
    return math.sqrt(max(_jacobi_max_eigenvalue(gram), 0.0))


def spectral_normalized_init(rows: int, cols: int, seed: int) -> np.ndarray:
    """Gaussian matrix divided by its largest singular value."""
    if rows < 1 or cols < 1:
        raise ContractError(f"invalid shape ({rows}, {cols})")
    w = np.random.default_rng(seed).standard_normal((rows, cols))
    return w / np.linalg.norm(w, ord=2)


def materialize(op: LinearOperator) -> np.ndarray:
    """Explicit matrix of ``op`` acting on the flattened input."""
    n = op.input_size
    if n > 4096:
        raise ContractError(f"materialize limited to 4096 inputs, got {n}")
    out = np.empty((op.output_size, n))
    basis = np.zeros(n)
    for i in range(n):
        basis[i] = 1.0
        out[:, i] = np.asarray(op.apply(basis.reshape(op.input_shape)), dtype=np.float64).reshape(-1)
        basis[i] = 0.0
    return out
