"""Iterative Gaussian-process model of a road boundary ``y = f(x)``.

Exact GP regression with a squared-exponential kernel. The filter refits on
the surviving points and drops those whose residual exceeds
``outlier_sigma`` posterior standard deviations, until nothing changes.

A gross outlier drags the fit at its neighbours past the threshold too, so by
default each violation is confirmed against a second fit that leaves all
current violators out; points that sit on that cleaner fit stay.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

log = logging.getLogger(__name__)


class GprError(ValueError):
    pass


@dataclass(frozen=True)
class GprHyperparams:
    length_scale: float = 4.0
    signal_variance: float = 1.0
    noise_variance: float = 0.01
    outlier_sigma: float = 3.0
    max_iterations: int = 5
    # re-test violators against a fit without them; False removes all at once
    confirm_violations: bool = True

    def __post_init__(self) -> None:
        if min(self.length_scale, self.signal_variance, self.noise_variance) <= 0:
            raise ValueError("GP hyperparameters must be positive")
        if self.outlier_sigma < 1 or self.max_iterations < 1:
            raise ValueError("outlier_sigma must be >= 1 and max_iterations >= 1")


def se_kernel(a, b, length_scale: float, signal_variance: float) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 1)
    b = np.asarray(b, dtype=np.float64).reshape(1, -1)
    return signal_variance * np.exp(-((a - b) ** 2) / (2 * length_scale**2))


@dataclass(frozen=True, eq=False)
class BoundaryModel:
    x: np.ndarray
    y: np.ndarray
    factor: tuple
    alpha: np.ndarray  # (K + noise I)^-1 y
    hyper: GprHyperparams
    noise_used: float

    @property
    def kernel_matrix(self) -> np.ndarray:
        h = self.hyper
        return se_kernel(self.x, self.x, h.length_scale, h.signal_variance) + self.noise_used * np.eye(len(self.x))


def gpr_fit(points, hyper: GprHyperparams = GprHyperparams()) -> BoundaryModel:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 2:
        raise GprError(f"need at least 2 points to fit a boundary, got {len(pts)}")
    x, y = pts[:, 0].copy(), pts[:, 1].copy()
    K = se_kernel(x, x, hyper.length_scale, hyper.signal_variance)
    noise = hyper.noise_variance
    for attempt in range(4):
        try:
            factor = cho_factor(K + noise * np.eye(len(x)), lower=True, check_finite=False)
            if not np.all(np.isfinite(factor[0])):
                raise LinAlgError("non-finite factor")
            break
        except LinAlgError:
            if attempt == 3:
                raise GprError("kernel matrix not positive definite after 3 noise escalations") from None
            noise *= 10
            log.warning("Cholesky failed; retrying with noise variance %g", noise)
    alpha = cho_solve(factor, y, check_finite=False)
    return BoundaryModel(x, y, factor, alpha, hyper, noise)


def gpr_predict(model: BoundaryModel, x_query) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and (clamped) variance at each query location."""
    h = model.hyper
    xq = np.atleast_1d(np.asarray(x_query, dtype=np.float64))
    Ks = se_kernel(model.x, xq, h.length_scale, h.signal_variance)
    mean = Ks.T @ model.alpha
    v = cho_solve(model.factor, Ks, check_finite=False)
    var = h.signal_variance - np.einsum("ij,ij->j", Ks, v)
    return mean, np.maximum(var, 0.0)


@dataclass(frozen=True, eq=False)
class FilterResult:
    inliers: np.ndarray  # indices into the input
    outliers: np.ndarray
    iterations: int
    warning: str | None = None


def _violations(pts: np.ndarray, keep: np.ndarray, hyper: GprHyperparams) -> np.ndarray:
    # zero-mean prior: fit residuals about the median lateral offset
    offset = np.median(pts[keep, 1])
    model = gpr_fit(np.column_stack([pts[keep, 0], pts[keep, 1] - offset]), hyper)
    mean, var = gpr_predict(model, pts[:, 0])
    return np.abs(pts[:, 1] - offset - mean) > hyper.outlier_sigma * np.sqrt(var + hyper.noise_variance)


def iterative_filter(points, hyper: GprHyperparams = GprHyperparams()) -> FilterResult:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    if n < 4:
        return FilterResult(np.arange(n), np.zeros(0, np.int64), 0, "fewer than 4 points; filter skipped")
    keep = np.ones(n, bool)
    it = 0
    warning = None
    while it < hyper.max_iterations:
        it += 1
        bad = keep & _violations(pts, keep, hyper)
        clean = keep & ~bad
        if hyper.confirm_violations and bad.any() and clean.sum() >= 2:
            bad &= _violations(pts, clean, hyper)
        if not bad.any():
            break
        if keep.sum() - bad.sum() < 2:
            warning = "inlier set would drop below 2 points; stopped early"
            break
        keep &= ~bad
    return FilterResult(np.flatnonzero(keep), np.flatnonzero(~keep), it, warning)
