"""Squared-exponential kernel, Gram matrices, and jitter safeguards."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

# Jitter escalation policy, relative to the signal variance: start at
# JITTER_START, multiply by 10 on Cholesky failure, give up past JITTER_CAP.
JITTER_START = 1e-6
JITTER_CAP = 1e-2


class FactorizationError(RuntimeError):
    """Cholesky factorization failed even after jitter escalation."""


@dataclass(frozen=True)
class KernelSpec:
    """Isotropic squared-exponential kernel hyperparameters.

    ``jitter`` is added to the Gram diagonal; None selects the default
    ``JITTER_START * signal_variance``. The prior mean is fixed at zero.
    """

    signal_variance: float = 1.0
    length_scale: float = 1.0
    jitter: float | None = None

    def __post_init__(self):
        if not (self.signal_variance > 0):
            raise ValueError(f"signal_variance must be > 0, got {self.signal_variance}")
        if not (self.length_scale > 0):
            raise ValueError(f"length_scale must be > 0, got {self.length_scale}")
        if self.jitter is not None and not (self.jitter >= 0):
            raise ValueError(f"jitter must be >= 0, got {self.jitter}")

    @property
    def effective_jitter(self):
        if self.jitter is None:
            return JITTER_START * self.signal_variance
        return float(self.jitter)


@dataclass(frozen=True)
class GramMatrix:
    """Training Gram matrix K + jitter*I with its lower Cholesky factor."""

    matrix: np.ndarray
    spec: KernelSpec
    jitter: float
    chol: np.ndarray

    @property
    def n(self):
        return self.matrix.shape[0]


def kernel_eval(x, x_other, spec):
    """Evaluate k(x, x') = signal_variance * exp(-||x - x'||^2 / (2 l^2))."""
    x = np.asarray(x, dtype=np.float64)
    x_other = np.asarray(x_other, dtype=np.float64)
    if x.shape != x_other.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {x_other.shape}")
    sq = float(np.sum((x - x_other) ** 2))
    return spec.signal_variance * np.exp(-0.5 * sq / spec.length_scale**2)


def _sq_dists(A, B):
    """Pairwise squared Euclidean distances via the expanded-norms form."""
    a2 = np.einsum("ij,ij->i", A, A)
    b2 = np.einsum("ij,ij->i", B, B)
    sq = a2[:, None] + b2[None, :] - 2.0 * (A @ B.T)
    np.maximum(sq, 0.0, out=sq)
    return sq


def cross_gram(X_test, X_train, spec):
    """Kernel matrix k(test_i, train_j) with no jitter, shape (n_test, n_train).

    Passing value-identical matrices reproduces the symmetric self-Gram
    (before jitter) bit-for-bit.
    """
    X_test = np.ascontiguousarray(X_test, dtype=np.float64)
    X_train = np.ascontiguousarray(X_train, dtype=np.float64)
    if X_test.shape[1] != X_train.shape[1]:
        raise ValueError(
            f"dimension mismatch: test has {X_test.shape[1]} cols, train has {X_train.shape[1]}"
        )
    same = X_test is X_train or (
        X_test.shape == X_train.shape and np.array_equal(X_test, X_train)
    )
    sq = _sq_dists(X_test, X_train)
    if same:
        # exact symmetry and exact zero self-distances
        sq = 0.5 * (sq + sq.T)
        np.fill_diagonal(sq, 0.0)
    return spec.signal_variance * np.exp(-0.5 * sq / spec.length_scale**2)


def gram(X, spec):
    """Build the jittered training Gram matrix and verify positive definiteness.

    The configured jitter is tried first; on Cholesky failure it escalates
    tenfold per attempt (never below ``JITTER_START * signal_variance``) up
    to ``JITTER_CAP * signal_variance`` before raising FactorizationError.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError(f"feature matrix must be 2-D and nonempty, got shape {X.shape}")
    base = cross_gram(X, X, spec)
    floor = JITTER_START * spec.signal_variance
    cap = JITTER_CAP * spec.signal_variance * (1 + 1e-12)
    eps = spec.effective_jitter
    while True:
        K = base.copy()
        K[np.diag_indices_from(K)] += eps
        try:
            L = np.linalg.cholesky(K)
        except np.linalg.LinAlgError:
            nxt = floor if eps < floor else eps * 10.0
            if nxt > cap:
                raise FactorizationError(
                    f"Gram matrix of {X.shape[0]} points not positive definite; "
                    f"final jitter tried {eps:g}"
                ) from None
            eps = nxt
            continue
        return GramMatrix(matrix=K, spec=spec, jitter=eps, chol=L)


def with_jitter(spec, jitter):
    """Copy of ``spec`` with an explicit jitter value."""
    return replace(spec, jitter=float(jitter))
