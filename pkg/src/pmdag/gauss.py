"""Dense symmetric-matrix kernel: covariances, Gaussian divergences, SPD utilities.

Divergences are computed through Cholesky factorizations and triangular
solves; explicit inverses appear only where a gradient formula returns an
inverse matrix by definition.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la


class GaussError(ValueError):
    """Base class for covariance and divergence errors."""


class TooFewRows(GaussError):
    pass


class SingularQ(GaussError):
    """The reference (second-argument) covariance is not invertible."""


class SingularTarget(GaussError):
    pass


class SingularModel(GaussError):
    pass


class SingularSum(GaussError):
    pass


class NotPositiveDefinite(GaussError):
    pass


class LabelMismatch(GaussError):
    pass


class CovMatrix:
    """A labeled symmetric positive-semidefinite matrix.

    Symmetry is required to 1e-12 (relative to the largest entry) and
    eigenvalues may not drop below -1e-10 * trace.
    """

    __slots__ = ("labels", "data")

    def __init__(self, labels, data):
        labels = tuple(labels)
        data = np.array(data, dtype=float)
        if data.shape != (len(labels), len(labels)):
            raise GaussError(f"matrix shape {data.shape} does not match {len(labels)} labels")
        if len(set(labels)) != len(labels):
            raise GaussError("labels must be unique")
        scale = max(1.0, float(np.abs(data).max())) if data.size else 1.0
        if data.size and float(np.abs(data - data.T).max()) > 1e-12 * scale:
            raise GaussError("matrix is not symmetric")
        data = (data + data.T) / 2.0
        if data.size:
            min_eig = float(la.eigvalsh(data).min())
            if min_eig < -1e-10 * max(float(np.trace(data)), 1.0):
                raise NotPositiveDefinite(f"minimum eigenvalue {min_eig:g} is too negative")
        self.labels = labels
        self.data = data
        self.data.setflags(write=False)

    @property
    def dim(self) -> int:
        return len(self.labels)

    def get(self, a: str, b: str) -> float:
        return float(self.data[self.labels.index(a), self.labels.index(b)])

    def restrict(self, labels) -> "CovMatrix":
        """Sub-matrix over the given labels, in the given order."""
        labels = tuple(labels)
        try:
            idx = [self.labels.index(name) for name in labels]
        except ValueError as exc:
            raise LabelMismatch(str(exc)) from None
        return CovMatrix(labels, self.data[np.ix_(idx, idx)])

    def __repr__(self):
        return f"CovMatrix({self.labels}, dim={self.dim})"


@dataclass(frozen=True)
class GaussianDist:
    """A multivariate normal given by mean vector and covariance."""

    mean: np.ndarray
    cov: CovMatrix

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        if mean.shape != (self.cov.dim,):
            raise GaussError("mean dimension does not match covariance dimension")
        object.__setattr__(self, "mean", mean)


def sample_covariance(observations, labels) -> CovMatrix:
    """Biased sample covariance (normalized by the row count) of row observations."""
    obs = np.asarray(observations, dtype=float)
    if obs.ndim != 2 or obs.shape[0] < 2:
        raise TooFewRows("need a 2-d array with at least two rows")
    centered = obs - obs.mean(axis=0)
    return CovMatrix(labels, centered.T @ centered / obs.shape[0])


def spd_factor(sigma: np.ndarray) -> tuple[np.ndarray, float]:
    """Cholesky factor and log-determinant, escalating diagonal jitter if needed.

    Jitter starts at 1e-12 * trace/n and grows tenfold up to 1e-6 * trace/n
    before giving up; sample covariances are routinely semidefinite at
    round-off scale.
    """
    sigma = np.asarray(sigma, dtype=float)
    n = sigma.shape[0]
    try:
        lower = la.cholesky(sigma, lower=True)
        return lower, 2.0 * float(np.log(np.diag(lower)).sum())
    except la.LinAlgError:
        pass
    base = max(float(np.trace(sigma)), 0.0) / max(n, 1)
    jitter = 1e-12 * base
    while jitter <= 1e-6 * base and jitter > 0.0:
        try:
            lower = la.cholesky(sigma + jitter * np.eye(n), lower=True)
            return lower, 2.0 * float(np.log(np.diag(lower)).sum())
        except la.LinAlgError:
            jitter *= 10.0
    raise NotPositiveDefinite("matrix is not positive definite, even with maximum jitter")


def _chol_or(sigma, exc_type):
    try:
        return spd_factor(sigma)
    except NotPositiveDefinite as exc:
        raise exc_type(str(exc)) from None


def _solve_spd(lower, rhs):
    return la.cho_solve((lower, True), rhs)


def kl_gaussian(p: GaussianDist, q: GaussianDist) -> float:
    """KL divergence of p from q in closed form; +inf when p is singular."""
    if p.cov.dim != q.cov.dim:
        raise GaussError("dimension mismatch")
    n = p.cov.dim
    lq, logdet_q = _chol_or(q.cov.data, SingularQ)
    sign_p, logdet_p = np.linalg.slogdet(p.cov.data)
    if sign_p <= 0:
        return math.inf
    diff = q.mean - p.mean
    trace = float(np.trace(_solve_spd(lq, p.cov.data)))
    maha = float(diff @ _solve_spd(lq, diff))
    return 0.5 * (trace + maha - n + logdet_q - logdet_p)


def err_kl(sigma: np.ndarray, target: np.ndarray) -> float:
    """tr(target^-1 sigma) - ln|sigma|: the divergence surrogate the solver minimizes."""
    lt, _ = _chol_or(target, SingularTarget)
    _, logdet_s = _chol_or(sigma, SingularModel)
    return float(np.trace(_solve_spd(lt, sigma))) - logdet_s


def grad_err_kl(sigma: np.ndarray, target: np.ndarray) -> np.ndarray:
    """target^-1 - sigma^-1, the entrywise derivative of err_kl in sigma."""
    n = sigma.shape[0]
    lt, _ = _chol_or(target, SingularTarget)
    ls, _ = _chol_or(sigma, SingularModel)
    eye = np.eye(n)
    g = _solve_spd(lt, eye) - _solve_spd(ls, eye)
    return (g + g.T) / 2.0


def err_bha(sigma: np.ndarray, target: np.ndarray) -> float:
    """(1/2)^n |sigma + target| / |sigma|^(1/2): the Bhattacharyya-style surrogate."""
    n = sigma.shape[0]
    _, logdet_sum = _chol_or(sigma + target, SingularSum)
    _, logdet_s = _chol_or(sigma, SingularModel)
    return float(np.exp(n * math.log(0.5) + logdet_sum - 0.5 * logdet_s))


def log_err_bha(sigma: np.ndarray, target: np.ndarray) -> float:
    """ln err_bha; the solver optimizes the logarithm for numerical range."""
    n = sigma.shape[0]
    _, logdet_sum = _chol_or(sigma + target, SingularSum)
    _, logdet_s = _chol_or(sigma, SingularModel)
    return n * math.log(0.5) + logdet_sum - 0.5 * logdet_s


def grad_err_bha(sigma: np.ndarray, target: np.ndarray) -> np.ndarray:
    """(sigma + target)^-1 - sigma^-1 / 2: the gradient of ln err_bha in sigma.

    This matches err_bha's own gradient up to the positive factor err_bha
    itself, which the learning rate absorbs.
    """
    n = sigma.shape[0]
    lsum, _ = _chol_or(sigma + target, SingularSum)
    ls, _ = _chol_or(sigma, SingularModel)
    eye = np.eye(n)
    g = _solve_spd(lsum, eye) - 0.5 * _solve_spd(ls, eye)
    return (g + g.T) / 2.0


# --- CSV covariance format ----------------------------------------------


def save_cov_csv(cov: CovMatrix, path) -> None:
    """First row: labels; following rows: the matrix."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(cov.labels)
        for row in cov.data:
            writer.writerow([repr(float(x)) for x in row])


def load_cov_csv(path) -> CovMatrix:
    """Load a labeled covariance, rejecting asymmetry beyond 1e-9 relative."""
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        rows = [row for row in reader if row]
    if not rows:
        raise GaussError(f"empty covariance file: {path}")
    labels = [cell.strip() for cell in rows[0]]
    data = np.array([[float(cell) for cell in row] for row in rows[1:]], dtype=float)
    if data.shape != (len(labels), len(labels)):
        raise GaussError(f"covariance file {path} is not a {len(labels)}x{len(labels)} matrix")
    scale = max(1.0, float(np.abs(data).max()))
    if float(np.abs(data - data.T).max()) > 1e-9 * scale:
        raise GaussError(f"covariance file {path} is not symmetric within 1e-9 relative tolerance")
    return CovMatrix(labels, (data + data.T) / 2.0)
