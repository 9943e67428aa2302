"""Multi-class GP classification with a softmax likelihood, via the
Laplace approximation.

The latent function is a stacked (n, C) matrix with one column per class;
all classes share the same training Gram matrix. Mode finding is a block
Newton iteration that only ever factorizes n x n matrices: the negative
likelihood Hessian decomposes per data point as diag(pi) minus the outer
product of the class probabilities, which turns the (nC)-dimensional solve
into C small Cholesky factorizations plus one n x n coupling solve.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import logsumexp

from .dataset import LabelVector, decode_pnf1, encode_pnf1
from .kernels import FactorizationError, GramMatrix, KernelSpec, cross_gram, gram

NEWTON_MAX_ITER = 100
NEWTON_TOL = 1e-9
NEWTON_MAX_HALVINGS = 20

EXPERT_MAGIC = b"GPEX"
EXPERT_VERSION = 1


class ConvergenceError(RuntimeError):
    """Newton mode finding failed to converge."""


def softmax(f):
    """Row-wise softmax with max-subtraction for overflow safety."""
    f = np.asarray(f, dtype=np.float64)
    shifted = f - f.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def one_hot(labels, num_classes):
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def log_likelihood(latents, labels):
    """log p(y | f) for the softmax observation model."""
    latents = np.asarray(latents, dtype=np.float64)
    picked = latents[np.arange(labels.size), labels]
    return float(picked.sum() - logsumexp(latents, axis=1).sum())


def likelihood_gradient(latents, targets):
    """Gradient of log p(y | f): one-hot targets minus softmax probabilities."""
    return targets - softmax(latents)


@dataclass(frozen=True)
class LaplaceFactors:
    """Per-class solve factors at the posterior mode.

    ``class_solves`` stacks E_c = (K + inv(D_c))^{-1} for each class
    (computed in square-root form, so vanishing probabilities are safe) and
    ``coupling_chol`` is the lower Cholesky factor of their sum, which ties
    the classes together through the shared per-point probability simplex.
    ``half_logdet`` is half the log-determinant of (I + K W).
    """

    probs: np.ndarray
    class_solves: np.ndarray
    coupling_chol: np.ndarray
    half_logdet: float


@dataclass(frozen=True)
class LatentPrediction:
    """Per-test-point latent mean and variance for every class."""

    mean: np.ndarray
    var: np.ndarray

    @property
    def num_points(self):
        return self.mean.shape[0]

    @property
    def num_classes(self):
        return self.mean.shape[1]


@dataclass(frozen=True)
class ModeResult:
    mode: np.ndarray
    grad_at_mode: np.ndarray
    factors: LaplaceFactors
    log_marginal: float
    iterations: int


def _compute_factors(K, probs):
    """Build the per-class solve factors and coupling Cholesky at ``probs``.

    Everything runs through batched (C, n, n) LAPACK calls; per-class
    Python-level solves are far slower for the class counts involved.
    """
    n, _ = probs.shape
    sqrt_p = np.sqrt(probs)
    scol = sqrt_p.T[:, :, None]  # (C, n, 1)
    inner = scol * K[None, :, :] * sqrt_p.T[:, None, :]
    idx = np.arange(n)
    inner[:, idx, idx] += 1.0  # B_c = I + sqrt(D_c) K sqrt(D_c)
    try:
        chols = np.linalg.cholesky(inner)
    except np.linalg.LinAlgError:
        raise FactorizationError(
            "per-class solve matrix not positive definite during mode finding"
        ) from None
    half_logdet = float(np.log(chols[:, idx, idx]).sum())
    rhs = np.zeros_like(inner)
    rhs[:, idx, idx] = sqrt_p.T
    sol = np.linalg.solve(inner, rhs)  # B_c^{-1} sqrt(D_c), batched
    class_solves = scol * sol
    class_solves = 0.5 * (class_solves + class_solves.transpose(0, 2, 1))
    coupling = class_solves.sum(axis=0)
    try:
        coupling_chol = np.linalg.cholesky(coupling)
    except np.linalg.LinAlgError:
        raise FactorizationError(
            "class-coupling matrix not positive definite during mode finding"
        ) from None
    half_logdet += float(np.log(coupling_chol[idx, idx]).sum())
    return LaplaceFactors(
        probs=probs,
        class_solves=class_solves,
        coupling_chol=coupling_chol,
        half_logdet=half_logdet,
    )


def find_mode(K, y, max_iter=NEWTON_MAX_ITER, tol=NEWTON_TOL):
    """Find the posterior mode of the stacked latents by Newton iteration.

    Starts from zero latents and takes damped Newton steps (step-halving
    line search on the exact unnormalized log posterior, up to
    ``NEWTON_MAX_HALVINGS`` halvings). Converged when the objective improves
    by less than ``tol``. Returns the mode, the likelihood gradient there,
    the solve factors, and the Laplace-approximate log marginal likelihood.
    """
    if isinstance(K, GramMatrix):
        K = K.matrix
    K = np.asarray(K, dtype=np.float64)
    n = K.shape[0]
    if len(y) != n:
        raise ValueError(f"Gram matrix is {n}x{n} but labels have length {len(y)}")
    labels = y.labels
    num_classes = y.num_classes
    targets = one_hot(labels, num_classes)

    latents = np.zeros((n, num_classes))
    alpha = np.zeros_like(latents)  # alpha = K^{-1} latents, maintained exactly
    objective = log_likelihood(latents, labels)

    def psi(lat, alp):
        return log_likelihood(lat, labels) - 0.5 * float(np.sum(alp * lat))

    delta = np.inf
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        probs = softmax(latents)
        factors = _compute_factors(K, probs)
        weighted = probs * latents
        hess_times_f = weighted - probs * weighted.sum(axis=1, keepdims=True)
        b = hess_times_f + targets - probs
        Kb = K @ b
        c_mat = np.einsum("cij,jc->ic", factors.class_solves, Kb)
        w = cho_solve((factors.coupling_chol, True), c_mat.sum(axis=1))
        alpha_new = b - c_mat + np.einsum("cij,j->ic", factors.class_solves, w)
        latents_new = K @ alpha_new

        step = 1.0
        accepted = None
        d_lat = latents_new - latents
        d_alp = alpha_new - alpha
        for _ in range(NEWTON_MAX_HALVINGS + 1):
            cand_lat = latents + step * d_lat
            cand_alp = alpha + step * d_alp
            cand_obj = psi(cand_lat, cand_alp)
            if cand_obj > objective:
                accepted = (cand_lat, cand_alp, cand_obj)
                break
            step *= 0.5
        if accepted is None:
            converged = True  # no ascent left: already at the mode numerically
            break
        delta = accepted[2] - objective
        latents, alpha, objective = accepted
        if delta < tol:
            converged = True
            break

    if not converged:
        raise ConvergenceError(
            f"mode finding did not converge in {max_iter} iterations "
            f"(last objective delta {delta:.3e})"
        )

    probs = softmax(latents)
    factors = _compute_factors(K, probs)
    grad = targets - probs
    log_marginal = (
        -0.5 * float(np.sum(alpha * latents))
        + log_likelihood(latents, labels)
        - factors.half_logdet
    )
    return ModeResult(
        mode=latents,
        grad_at_mode=grad,
        factors=factors,
        log_marginal=log_marginal,
        iterations=iterations,
    )


@dataclass(frozen=True)
class ExpertModel:
    """A trained Laplace-GP expert over one training subset."""

    indices: np.ndarray
    features: np.ndarray
    labels: LabelVector
    spec: KernelSpec
    mode: np.ndarray
    grad_at_mode: np.ndarray
    log_marginal: float
    factors: LaplaceFactors = field(repr=False, compare=False)

    @property
    def num_classes(self):
        return self.labels.num_classes

    @property
    def num_train(self):
        return self.features.shape[0]


def train_expert(features, labels, spec, indices=None):
    """Fit one Laplace-GP expert on a (sub)set of training data."""
    features = np.ascontiguousarray(features, dtype=np.float64)
    if indices is None:
        indices = np.arange(features.shape[0], dtype=np.int64)
    K = gram(features, spec)
    result = find_mode(K, labels)
    return ExpertModel(
        indices=np.asarray(indices, dtype=np.int64),
        features=features,
        labels=labels,
        spec=spec,
        mode=result.mode,
        grad_at_mode=result.grad_at_mode,
        log_marginal=result.log_marginal,
        factors=result.factors,
    )


def latent_predict(model, X_test):
    """Posterior latent mean and variance per class at the test points.

    The mean is the cross-kernel applied to the likelihood gradient at the
    mode; the variance subtracts the standard positive-semidefinite
    contraction term, so it never exceeds the prior variance.
    """
    X_test = np.ascontiguousarray(X_test, dtype=np.float64)
    if X_test.shape[1] != model.features.shape[1]:
        raise ValueError(
            f"dimension mismatch: test has {X_test.shape[1]} cols, "
            f"model was trained on {model.features.shape[1]}"
        )
    Ks = cross_gram(X_test, model.features, model.spec)
    mean = Ks @ model.grad_at_mode
    prior_var = model.spec.signal_variance
    num_classes = model.num_classes
    num_test = X_test.shape[0]
    n = model.num_train
    tmp = model.factors.class_solves @ Ks.T[None, :, :]  # (C, n, m)
    quad = np.einsum("ij,cji->ci", Ks, tmp)
    flat = np.ascontiguousarray(tmp.transpose(1, 0, 2)).reshape(n, num_classes * num_test)
    q = solve_triangular(model.factors.coupling_chol, flat, lower=True)
    corr = np.einsum("ji,ji->i", q, q).reshape(num_classes, num_test)
    var = (prior_var - quad + corr).T
    return LatentPrediction(mean=mean, var=np.ascontiguousarray(var))


def predictive_density(pred, num_samples=1000, seed=0):
    """Class probabilities by Monte Carlo integration of the softmax.

    Draws ``num_samples`` independent per-class Gaussian latents for each
    test point and averages the softmax. Each point uses its own RNG stream
    derived from (seed, point index), so results do not depend on evaluation
    order or parallelism. Points whose variances are all zero reduce to the
    exact softmax of the mean.
    """
    if num_samples < 1:
        raise ValueError(f"num_samples must be >= 1, got {num_samples}")
    mean = np.asarray(pred.mean, dtype=np.float64)
    var = np.asarray(pred.var, dtype=np.float64)
    probs = np.empty_like(mean)
    for i in range(mean.shape[0]):
        if not var[i].any():
            probs[i] = softmax(mean[i])
            continue
        rng = np.random.default_rng([seed, i])
        draws = mean[i] + rng.standard_normal((num_samples, mean.shape[1])) * np.sqrt(var[i])
        probs[i] = softmax(draws).mean(axis=0)
    return probs


def log_marginal_likelihood(model):
    """Laplace-approximate log marginal likelihood of a trained expert."""
    return float(model.log_marginal)


@dataclass(frozen=True)
class HyperGrid:
    """Search grid over (length_scale, signal_variance) pairs."""

    length_scales: tuple
    signal_variances: tuple

    @classmethod
    def default(cls):
        return cls(
            length_scales=tuple(float(2.0**e) for e in range(-2, 7)),
            signal_variances=tuple(float(2.0**e) for e in range(-2, 5)),
        )

    def points(self):
        """Candidate pairs in deterministic tie-break order (smallest first)."""
        return [
            (ls, sv)
            for ls in sorted(self.length_scales)
            for sv in sorted(self.signal_variances)
        ]


def fit_hyperparameters(X, y, grid=None, seed=0, subsets=None, jitter=None):
    """Pick the grid point maximizing the summed expert marginal likelihood.

    With ``subsets`` (index arrays) the objective is the sum of per-expert
    Laplace log marginal likelihoods over the subsets, matching how the
    experts will later be trained; otherwise a single expert on all of
    ``X``. Exact ties resolve to the smallest length scale, then the
    smallest signal variance. ``seed`` is accepted for interface symmetry;
    the exhaustive grid evaluation is deterministic and never consumes it.
    """
    del seed
    X = np.ascontiguousarray(X, dtype=np.float64)
    if grid is None:
        grid = HyperGrid.default()
    points = grid.points()
    if not points:
        raise ValueError("hyperparameter grid is empty")
    if subsets is None:
        subsets = [np.arange(X.shape[0], dtype=np.int64)]

    best = None
    failures = []
    for ls, sv in points:
        spec = KernelSpec(signal_variance=sv, length_scale=ls, jitter=jitter)
        try:
            total = 0.0
            for idx in subsets:
                sub_labels = LabelVector(y.labels[idx], y.num_classes)
                K = gram(X[idx], spec)
                total += find_mode(K, sub_labels).log_marginal
        except FactorizationError as exc:
            failures.append((ls, sv, str(exc)))
            continue
        if best is None or total > best[0]:
            best = (total, spec)
    if best is None:
        raise FactorizationError(
            f"every grid point failed to factorize ({len(failures)} tried)"
        )
    return best[1]


def expert_to_bytes(model):
    """Serialize an expert to the self-describing binary container.

    Layout (little-endian): magic ``GPEX``, version byte, kernel
    hyperparameters (3 x f64), class count (u32), index count (u32),
    indices (i64 each), features as an embedded PNF1 block (length-prefixed
    u64), labels (i32 each), mode and likelihood gradient (f64, row-major
    n x C), log marginal likelihood (f64). Round-trips bit-exactly.
    """
    n = model.num_train
    C = model.num_classes
    parts = [
        EXPERT_MAGIC,
        struct.pack("<B", EXPERT_VERSION),
        struct.pack(
            "<ddd",
            model.spec.signal_variance,
            model.spec.length_scale,
            model.spec.effective_jitter,
        ),
        struct.pack("<II", C, n),
        np.ascontiguousarray(model.indices, dtype="<i8").tobytes(),
    ]
    pnf1 = encode_pnf1(model.features)
    parts.append(struct.pack("<Q", len(pnf1)))
    parts.append(pnf1)
    parts.append(np.ascontiguousarray(model.labels.labels, dtype="<i4").tobytes())
    parts.append(np.ascontiguousarray(model.mode, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(model.grad_at_mode, dtype="<f8").tobytes())
    parts.append(struct.pack("<d", model.log_marginal))
    return b"".join(parts)


class ExpertFormatError(ValueError):
    """A serialized expert container is malformed."""


class _Reader:
    def __init__(self, blob, source):
        self.blob = blob
        self.pos = 0
        self.source = source

    def take(self, count, what):
        if self.pos + count > len(self.blob):
            raise ExpertFormatError(
                f"{self.source}: truncated while reading {what} (byte offset {self.pos})"
            )
        out = self.blob[self.pos : self.pos + count]
        self.pos += count
        return out


def expert_from_bytes(blob, source="<bytes>"):
    """Deserialize an expert container, recomputing its solve factors."""
    r = _Reader(blob, source)
    magic = r.take(4, "magic")
    if magic != EXPERT_MAGIC:
        raise ExpertFormatError(f"{source}: bad magic {magic!r}, expected {EXPERT_MAGIC!r}")
    (version,) = struct.unpack("<B", r.take(1, "version"))
    if version != EXPERT_VERSION:
        raise ExpertFormatError(f"{source}: unsupported container version {version}")
    sv, ls, jitter = struct.unpack("<ddd", r.take(24, "kernel hyperparameters"))
    C, n = struct.unpack("<II", r.take(8, "dimensions"))
    indices = np.frombuffer(r.take(8 * n, "indices"), dtype="<i8").copy()
    (pnf1_len,) = struct.unpack("<Q", r.take(8, "feature block length"))
    features = decode_pnf1(r.take(pnf1_len, "feature block"), source=source)
    if features.shape[0] != n:
        raise ExpertFormatError(
            f"{source}: feature block has {features.shape[0]} rows, header says {n}"
        )
    labels = np.frombuffer(r.take(4 * n, "labels"), dtype="<i4").astype(np.int64)
    mode = np.frombuffer(r.take(8 * n * C, "mode"), dtype="<f8").reshape(n, C).copy()
    grad = np.frombuffer(r.take(8 * n * C, "gradient"), dtype="<f8").reshape(n, C).copy()
    (log_marginal,) = struct.unpack("<d", r.take(8, "log marginal"))
    if r.pos != len(blob):
        raise ExpertFormatError(
            f"{source}: {len(blob) - r.pos} trailing bytes (byte offset {r.pos})"
        )
    spec = KernelSpec(signal_variance=sv, length_scale=ls, jitter=jitter)
    label_vec = LabelVector(labels, C)
    K = gram(features, spec)
    factors = _compute_factors(K.matrix, softmax(mode))
    return ExpertModel(
        indices=indices,
        features=features,
        labels=label_vec,
        spec=spec,
        mode=mode,
        grad_at_mode=grad,
        log_marginal=log_marginal,
        factors=factors,
    )


def save_expert(model, path):
    with open(str(path), "wb") as fh:
        fh.write(expert_to_bytes(model))


def load_expert(path):
    with open(str(path), "rb") as fh:
        return expert_from_bytes(fh.read(), source=str(path))
