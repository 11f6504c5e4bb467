"""Tractable generation distributions with closed-form transport quantities.

Two families are provided:

* :class:`GaussianMixture` -- the workhorse.  Because the linear
  interpolation ``X_t = (1 - t) X + t Z`` of a Gaussian mixture with an
  independent standard Gaussian ``Z`` is itself a Gaussian mixture, the
  time marginal, the velocity field ``v(x, t) = E[Z - X | X_t = x]`` and
  its spatial Jacobian all have exact expressions.  Every flow, Jacobian
  and divergence computation in this package rests on these closed forms.

* :class:`NeighborMixture` -- a mixture of cube-uniform densities
  convolved with isotropic Gaussian kernels.  The convolution is
  separable across axes, so the density is exact.  It models sparse
  targets (small high-density islands, near-empty elsewhere) and is used
  by the probability-bound experiments.  It carries no velocity field;
  flows over neighbor-style targets use :meth:`NeighborMixture.gaussian_surrogate`.

All evaluation routines accept a single point of shape ``(n,)`` or a
batch of shape ``(B, n)`` and are deterministic pure functions; samplers
take an explicit ``numpy.random.Generator``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import erf, log_ndtr, logsumexp

__all__ = ["GaussianMixture", "NeighborMixture", "TimeMarginal"]

_LOG_2PI = float(np.log(2.0 * np.pi))
_WEIGHT_TOL = 1e-12


def _as_batch(x: np.ndarray, dim: int, name: str = "x") -> tuple[np.ndarray, bool]:
    """Promote x to shape (B, n), checking the trailing dimension."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        if arr.shape[0] != dim:
            raise ValueError(f"{name} has dimension {arr.shape[0]}, expected {dim}")
        return arr[None, :], True
    if arr.ndim == 2:
        if arr.shape[1] != dim:
            raise ValueError(f"{name} has dimension {arr.shape[1]}, expected {dim}")
        return arr, False
    raise ValueError(f"{name} must be a vector or a batch of vectors, got ndim={arr.ndim}")


def _check_time(t: float) -> float:
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    return t


def _log_ndtr_diff(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """log(Phi(a) - Phi(b)) for a > b elementwise, stable in both tails.

    Right tail uses survival functions, left tail uses CDFs, and the
    straddling case uses the error function directly (no cancellation
    near zero since erf is odd).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    out = np.empty(np.broadcast(a, b).shape)
    a, b = np.broadcast_arrays(a, b)

    right = b >= 0.0
    left = a <= 0.0
    mid = ~(right | left)

    if np.any(right):
        lo = log_ndtr(-a[right])  # log Q(a) <= log Q(b)
        hi = log_ndtr(-b[right])
        out[right] = hi + np.log(-np.expm1(lo - hi))
    if np.any(left):
        lo = log_ndtr(b[left])
        hi = log_ndtr(a[left])
        out[left] = hi + np.log(-np.expm1(lo - hi))
    if np.any(mid):
        s = np.sqrt(2.0)
        out[mid] = np.log(0.5 * (erf(a[mid] / s) - erf(b[mid] / s)))
    return out


class GaussianMixture:
    """Mixture of multivariate Gaussians with cached Cholesky factors.

    Parameters
    ----------
    weights : (K,) positive, summing to one
    means : (K, n)
    covariances : (K, n, n) symmetric positive definite

    Covariance factors are computed once at construction; all solves go
    through triangular solves rather than explicit inverses, which stays
    stable for very small component widths.
    """

    def __init__(self, weights, means, covariances):
        self.weights = np.asarray(weights, dtype=float)
        self.means = np.atleast_2d(np.asarray(means, dtype=float))
        self.covariances = np.asarray(covariances, dtype=float)

        if self.weights.ndim != 1 or self.weights.size == 0:
            raise ValueError("weights must be a non-empty 1-D sequence")
        if np.any(self.weights <= 0.0):
            raise ValueError("weights must be strictly positive")
        if abs(self.weights.sum() - 1.0) > _WEIGHT_TOL:
            raise ValueError(f"weights sum to {self.weights.sum()!r}, not 1")

        k = self.weights.shape[0]
        if self.means.shape[0] != k:
            raise ValueError("means and weights disagree on component count")
        n = self.means.shape[1]
        if self.covariances.ndim == 2:
            self.covariances = self.covariances[None, :, :]
        if self.covariances.shape != (k, n, n):
            raise ValueError(
                f"covariances must have shape {(k, n, n)}, got {self.covariances.shape}"
            )
        sym_err = np.max(np.abs(self.covariances - np.swapaxes(self.covariances, 1, 2)))
        if sym_err > 1e-10:
            raise ValueError("covariances must be symmetric")

        try:
            self._chols = np.linalg.cholesky(self.covariances)
        except np.linalg.LinAlgError as exc:
            raise ValueError("every covariance must be positive definite") from exc

        self.dim = n
        self.n_components = k
        self._log_weights = np.log(self.weights)

        # isotropic components admit scalar solves; detected once here
        diag = np.einsum("kii->ki", self.covariances)
        iso = np.all(np.abs(self.covariances - diag[:, :, None] * np.eye(n)) == 0.0) and np.all(
            diag == diag[:, :1]
        )
        self._iso_variances = diag[:, 0].copy() if iso else None

    # -- constructors ---------------------------------------------------

    @classmethod
    def standard_normal(cls, dim: int) -> "GaussianMixture":
        """Single-component N(0, I) in the given dimension."""
        return cls([1.0], np.zeros((1, dim)), np.eye(dim)[None, :, :])

    @classmethod
    def isotropic(cls, means, variances, weights=None) -> "GaussianMixture":
        """Components with covariance ``variances[k] * I``."""
        means = np.atleast_2d(np.asarray(means, dtype=float))
        k, n = means.shape
        variances = np.broadcast_to(np.asarray(variances, dtype=float), (k,))
        if weights is None:
            weights = np.full(k, 1.0 / k)
        covs = variances[:, None, None] * np.eye(n)[None, :, :]
        return cls(weights, means, covs)

    # -- density ----------------------------------------------------------

    def _component_log_pdf(self, x2d: np.ndarray, means: np.ndarray, chols: np.ndarray) -> np.ndarray:
        """Per-component Gaussian log pdfs, shape (B, K)."""
        b = x2d.shape[0]
        k = means.shape[0]
        out = np.empty((b, k))
        for i in range(k):
            diff = x2d - means[i]
            y = solve_triangular(chols[i], diff.T, lower=True)
            maha = np.einsum("ij,ij->j", y, y)
            logdet = np.sum(np.log(np.diag(chols[i])))
            out[:, i] = -0.5 * (self.dim * _LOG_2PI + maha) - logdet
        return out

    def _component_log_pdf_iso(self, x2d: np.ndarray, means: np.ndarray, variances: np.ndarray) -> np.ndarray:
        diff = x2d[:, None, :] - means[None, :, :]
        maha = np.einsum("bki,bki->bk", diff, diff) / variances[None, :]
        return -0.5 * (self.dim * _LOG_2PI + maha) - 0.5 * self.dim * np.log(variances)[None, :]

    def log_density(self, x) -> np.ndarray | float:
        """log sum_k pi_k N(x; mu_k, Sigma_k), via max-subtracted logsumexp."""
        x2d, single = _as_batch(x, self.dim)
        if self._iso_variances is not None:
            logs = self._component_log_pdf_iso(x2d, self.means, self._iso_variances)
        else:
            logs = self._component_log_pdf(x2d, self.means, self._chols)
        lp = logsumexp(logs + self._log_weights, axis=1)
        return float(lp[0]) if single else lp

    def density(self, x) -> np.ndarray | float:
        out = np.exp(self.log_density(x))
        return float(out) if np.isscalar(out) or out.ndim == 0 else out

    # -- sampling ---------------------------------------------------------

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """Draw ``count`` i.i.d. points: categorical component, then mu + L eps."""
        if count < 1:
            raise ValueError("count must be >= 1")
        idx = rng.choice(self.n_components, size=count, p=self.weights)
        eps = rng.standard_normal((count, self.dim))
        return self.means[idx] + np.einsum("cij,cj->ci", self._chols[idx], eps)

    # -- linear interpolation marginal -------------------------------------

    def marginal_at_time(self, t: float) -> "TimeMarginal":
        """Law of (1 - t) X + t Z: component k becomes N((1-t) mu_k, (1-t)^2 Sigma_k + t^2 I)."""
        t = _check_time(t)
        s = 1.0 - t
        covs = s * s * self.covariances + (t * t) * np.eye(self.dim)[None, :, :]
        return TimeMarginal(t, GaussianMixture(self.weights, s * self.means, covs))

    def _responsibilities_and_solves(self, x2d, t):
        """Shared core: responsibilities r_k(x, t) and solves y_k = C_k^{-1}(x - m_k).

        Returns (means, resp, solves) with solves shaped (K, B, n).
        Responsibilities are formed in log space with max subtraction.
        """
        s = 1.0 - t
        means = s * self.means
        k = self.n_components
        b = x2d.shape[0]

        if self._iso_variances is not None:
            cvars = s * s * self._iso_variances + t * t  # (K,)
            logp = self._component_log_pdf_iso(x2d, means, cvars)
            diff = x2d[:, None, :] - means[None, :, :]
            solves = (diff / cvars[None, :, None]).transpose(1, 0, 2)
        else:
            covs = s * s * self.covariances + (t * t) * np.eye(self.dim)[None, :, :]
            chols = np.linalg.cholesky(covs)
            logp = self._component_log_pdf(x2d, means, chols)
            solves = np.empty((k, b, self.dim))
            for i in range(k):
                z = solve_triangular(chols[i], (x2d - means[i]).T, lower=True)
                solves[i] = solve_triangular(chols[i].T, z, lower=False).T

        logp = logp + self._log_weights
        shifted = np.exp(logp - logp.max(axis=1, keepdims=True))
        resp = shifted / shifted.sum(axis=1, keepdims=True)
        return means, resp, solves

    # -- transport quantities ----------------------------------------------

    def velocity(self, x, t: float):
        """Flow-matching velocity E[Z - X | X_t = x] in closed form.

        With m_k = (1-t) mu_k and C_k = (1-t)^2 Sigma_k + t^2 I the
        conditional expectation per component is
        ``t C_k^{-1}(x - m_k) - mu_k - (1-t) Sigma_k C_k^{-1}(x - m_k)``,
        combined with log-space responsibilities.
        """
        t = _check_time(t)
        x2d, single = _as_batch(x, self.dim)
        _, resp, solves = self._responsibilities_and_solves(x2d, t)

        if self._iso_variances is not None:
            coeff = t - (1.0 - t) * self._iso_variances  # A_k(x - m_k) = coeff_k y_k
            terms = coeff[:, None, None] * solves - self.means[:, None, :]
            v = np.einsum("bk,kbi->bi", resp, terms)
        else:
            v = np.zeros_like(x2d)
            for k in range(self.n_components):
                term = t * solves[k] - (1.0 - t) * solves[k] @ self.covariances[k] - self.means[k]
                v += resp[:, k, None] * term
        return v[0] if single else v

    def velocity_jacobian(self, x, t: float):
        """Spatial Jacobian of the velocity field, shape (n, n) or (B, n, n).

        J = sum_k r_k A_k + sum_k (A_k (x - m_k) - mu_k) grad(r_k)^T with
        A_k = t C_k^{-1} - (1-t) Sigma_k C_k^{-1} and
        grad(r_k) = r_k (s_k - sum_j r_j s_j), s_k = -C_k^{-1}(x - m_k).
        """
        t = _check_time(t)
        x2d, single = _as_batch(x, self.dim)
        _, resp, solves = self._responsibilities_and_solves(x2d, t)
        b = x2d.shape[0]
        n = self.dim
        kk = self.n_components
        eye = np.eye(n)
        s = 1.0 - t

        if self._iso_variances is not None:
            cvars = s * s * self._iso_variances + t * t
            a_diag = (t - s * self._iso_variances) / cvars  # A_k = a_k I
            u = (t - s * self._iso_variances)[:, None, None] * solves - self.means[:, None, :]
            jac = np.einsum("bk,k->b", resp, a_diag)[:, None, None] * eye[None, :, :]
        else:
            a_mats = np.empty((kk, n, n))
            covs = s * s * self.covariances + (t * t) * eye[None, :, :]
            chols = np.linalg.cholesky(covs)
            for k in range(kk):
                z = solve_triangular(chols[k], eye, lower=True)
                cinv = solve_triangular(chols[k].T, z, lower=False)
                a_mats[k] = t * cinv - s * self.covariances[k] @ cinv
            u = np.empty((kk, b, n))
            for k in range(kk):
                u[k] = t * solves[k] - s * solves[k] @ self.covariances[k] - self.means[k]
            jac = np.einsum("bk,kij->bij", resp, a_mats)

        s_bar = -np.einsum("bk,kbi->bi", resp, solves)
        grad_r = resp.T[:, :, None] * (-solves - s_bar[None, :, :])  # (K, B, n)
        jac = jac + np.einsum("kbi,kbj->bij", u, grad_r)
        return jac[0] if single else jac

    def divergence(self, x, t: float):
        """Divergence of the velocity field: the trace of its Jacobian."""
        jac = self.velocity_jacobian(x, t)
        return np.trace(jac, axis1=-2, axis2=-1)


@dataclass(frozen=True)
class TimeMarginal:
    """Law of the linear interpolation at a fixed time, as a Gaussian mixture."""

    time: float
    mixture: GaussianMixture

    def log_density(self, x):
        return self.mixture.log_density(x)

    def density(self, x):
        return self.mixture.density(x)

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return self.mixture.sample(rng, count)


class NeighborMixture:
    """Mixture of cube-uniform densities smoothed by Gaussian kernels.

    Component i is the uniform density on an axis-aligned cube, center
    ``cube_centers[i]`` and half-width ``cube_half_widths[i]``, convolved
    with N(0, kernel_widths[i]^2 I).  Axis alignment plus isotropic
    kernels keep the convolution separable, so the density is a product
    of 1-D normal-CDF differences per axis and is evaluated exactly in
    log space.

    Cubes must be pairwise disjoint; the minimum pairwise gap between
    cubes is recorded as ``d_min`` and ``dbar_min = d_min / sqrt(n)``.
    """

    def __init__(self, weights, cube_centers, cube_half_widths, kernel_widths):
        self.weights = np.asarray(weights, dtype=float)
        self.cube_centers = np.atleast_2d(np.asarray(cube_centers, dtype=float))
        self.cube_half_widths = np.asarray(cube_half_widths, dtype=float)
        self.kernel_widths = np.asarray(kernel_widths, dtype=float)

        if np.any(self.weights <= 0.0):
            raise ValueError("weights must be strictly positive")
        if abs(self.weights.sum() - 1.0) > _WEIGHT_TOL:
            raise ValueError(f"weights sum to {self.weights.sum()!r}, not 1")
        m, n = self.cube_centers.shape
        if not (self.weights.shape == self.cube_half_widths.shape == self.kernel_widths.shape == (m,)):
            raise ValueError("weights, half-widths and kernel widths must all have one entry per cube")
        if np.any(self.cube_half_widths <= 0.0):
            raise ValueError("cube half-widths must be positive")
        if np.any(self.kernel_widths <= 0.0):
            raise ValueError("kernel widths must be strictly positive")

        self.dim = n
        self.n_components = m
        self._log_weights = np.log(self.weights)

        # pairwise gap between axis-aligned cubes; disjointness means gap > 0
        d_min = np.inf
        for i in range(m):
            for j in range(i + 1, m):
                gap = np.abs(self.cube_centers[i] - self.cube_centers[j]) - (
                    self.cube_half_widths[i] + self.cube_half_widths[j]
                )
                dist = float(np.linalg.norm(np.maximum(gap, 0.0)))
                if dist <= 0.0:
                    raise ValueError(f"cubes {i} and {j} overlap")
                d_min = min(d_min, dist)
        self.d_min = d_min
        self.dbar_min = d_min / np.sqrt(n)

    def log_density(self, x):
        """Exact log density of sum_i a_i (uniform cube_i convolved with Gaussian_i).

        Per axis d the component factor is
        ``[Phi((x_d - lo)/w) - Phi((x_d - hi)/w)] / (hi - lo)``.
        """
        x2d, single = _as_batch(x, self.dim)
        b = x2d.shape[0]
        logs = np.empty((b, self.n_components))
        for i in range(self.n_components):
            h = self.cube_half_widths[i]
            w = self.kernel_widths[i]
            lo = self.cube_centers[i] - h
            hi = self.cube_centers[i] + h
            axis_log = _log_ndtr_diff((x2d - lo) / w, (x2d - hi) / w) - np.log(hi - lo)
            logs[:, i] = axis_log.sum(axis=1)
        lp = logsumexp(logs + self._log_weights, axis=1)
        return float(lp[0]) if single else lp

    def density(self, x):
        out = np.exp(self.log_density(x))
        return float(out) if np.isscalar(out) or out.ndim == 0 else out

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """Cube-uniform point plus Gaussian kernel noise."""
        if count < 1:
            raise ValueError("count must be >= 1")
        idx = rng.choice(self.n_components, size=count, p=self.weights)
        u = rng.uniform(-1.0, 1.0, size=(count, self.dim))
        base = self.cube_centers[idx] + self.cube_half_widths[idx, None] * u
        return base + self.kernel_widths[idx, None] * rng.standard_normal((count, self.dim))

    def component_mass_inside_cube(self, i: int) -> float:
        """Mass component i assigns to its own cube, kernel-at-center approximation.

        Per axis the kernel centered at the cube center leaves mass
        ``Phi(h/w) - Phi(-h/w) = erf(h / (w sqrt 2))`` inside; the product
        over axes lower-bounds the mass at any interior kernel center up
        to the edge correction.  Certifies the per-component inside-mass
        level alpha_i.
        """
        h = self.cube_half_widths[i]
        w = self.kernel_widths[i]
        per_axis = float(erf(h / (w * np.sqrt(2.0))))
        return per_axis ** self.dim

    def gaussian_surrogate(self) -> GaussianMixture:
        """Isotropic Gaussian mixture at the cube centers (small-cube limit).

        No closed-form velocity exists for cube-uniform bases, so flows
        over neighbor-style targets run on this surrogate instead.
        """
        return GaussianMixture.isotropic(self.cube_centers, self.kernel_widths**2, self.weights)
