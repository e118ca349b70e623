"""Closed-form ground-truth distributions.

The isotropic Gaussian scale mixture admits exact energies, scores,
posteriors, and optimal denoisers at every noise level, which makes it the
reference against which trained models and Monte-Carlo estimators are
validated. The spherical-exponential model and linear score fields are
fixtures for the distribution-shape diagnostics and for the inner-product
energy construction.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import radial


@dataclass(frozen=True)
class IsotropicGaussianMixture:
    """Mixture of zero-mean isotropic Gaussians with distinct variances.

    At noise variance t the noisy density x + N(0, tI) is again such a
    mixture with component variances sigma_i^2 + t, so all quantities below
    are exact at every t >= 0.
    """

    dim: int
    weights: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weights", np.atleast_1d(np.asarray(self.weights, float)))
        object.__setattr__(self, "variances", np.atleast_1d(np.asarray(self.variances, float)))
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.weights.shape != self.variances.shape:
            raise ValueError("weights and variances must have equal length")
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to 1")
        if np.any(self.variances <= 0):
            raise ValueError("variances must be strictly positive")

    @classmethod
    def from_sigmas(cls, dim, sigmas, weights=None):
        sigmas = np.asarray(sigmas, dtype=float)
        if weights is None:
            weights = np.full(sigmas.shape, 1.0 / sigmas.size)
        return cls(dim=dim, weights=np.asarray(weights, float), variances=sigmas**2)

    @property
    def n_components(self) -> int:
        return self.weights.size

    # -- quadratic-mixture coefficients at noise level t ----------------------

    def coeff_arrays(self, t):
        """(a, b, adot, bdot) of the noisy energy; t scalar or (...,)."""
        t = np.asarray(t, dtype=float)
        v = self.variances + t[..., None]
        a = 0.5 / v
        b = 0.5 * self.dim * np.log(2.0 * np.pi * v) - np.log(self.weights)
        adot = -0.5 / v**2
        bdot = 0.5 * self.dim / v
        return a, b, adot, bdot

    def responsibilities(self, q, t):
        a, b, _, _ = self.coeff_arrays(t)
        return radial.responsibilities(q, a, b)

    # -- energies, scores, denoiser ------------------------------------------

    def energy_q(self, q, t):
        a, b, _, _ = self.coeff_arrays(t)
        return radial.energy(q, a, b)

    def energy(self, y, t):
        """Exact normalized negative log density of x + N(0, tI) at y."""
        y = np.asarray(y, dtype=float)
        return self.energy_q((y * y).sum(axis=-1), t)

    def score_coeff_q(self, q, t):
        a, b, _, _ = self.coeff_arrays(t)
        return radial.score_coeff(q, a, b)

    def space_score(self, y, t):
        """grad_y U = (sum_i pi_i / (sigma_i^2 + t)) y, radial by symmetry."""
        y = np.asarray(y, dtype=float)
        kappa = self.score_coeff_q((y * y).sum(axis=-1), t)
        return np.asarray(kappa)[..., None] * y

    def time_score_q(self, q, t):
        a, b, adot, bdot = self.coeff_arrays(t)
        return radial.time_score(q, a, b, adot, bdot)

    def time_score(self, y, t):
        """dU/dt = sum_i pi_i (d / 2v_i - ||y||^2 / 2v_i^2), v_i = sigma_i^2 + t."""
        y = np.asarray(y, dtype=float)
        return self.time_score_q((y * y).sum(axis=-1), t)

    def laplacian_q(self, q, t):
        a, b, _, _ = self.coeff_arrays(t)
        return radial.laplacian(q, a, b, self.dim)

    def laplacian(self, y, t):
        y = np.asarray(y, dtype=float)
        return self.laplacian_q((y * y).sum(axis=-1), t)

    def denoise_coeff_q(self, q, t):
        """Shrinkage factor: E[x | y] = (sum_i pi_i sigma_i^2 / v_i) y."""
        pi = self.responsibilities(q, np.asarray(t, dtype=float))
        shrink = self.variances / (self.variances + np.asarray(t, float)[..., None])
        return (pi * shrink).sum(axis=-1)

    def denoise(self, y, t):
        """Optimal denoiser E[x | y]; equals y - t * space_score(y, t)."""
        y = np.asarray(y, dtype=float)
        c = self.denoise_coeff_q((y * y).sum(axis=-1), t)
        return np.asarray(c)[..., None] * y

    # -- sampling --------------------------------------------------------------

    def sample(self, rng, n=None):
        """Exact prior draws, shape (d,) or (n, d)."""
        count = 1 if n is None else int(n)
        labels = rng.choice(self.n_components, size=count, p=self.weights)
        x = np.sqrt(self.variances[labels])[:, None] * rng.standard_normal(
            (count, self.dim)
        )
        return x[0] if n is None else x

    def sample_radii(self, rng, n):
        """Radii with the exact law of ||x||, plus component labels."""
        labels = rng.choice(self.n_components, size=int(n), p=self.weights)
        r = np.sqrt(self.variances[labels] * rng.chisquare(self.dim, size=int(n)))
        return r, labels

    def posterior_sample(self, y, t, rng, n=None):
        """Draws of x | y at noise level t: component pi_i, then a Gaussian."""
        y = np.asarray(y, dtype=float)
        count = 1 if n is None else int(n)
        pi = self.responsibilities((y * y).sum(), float(t))
        labels = rng.choice(self.n_components, size=count, p=pi)
        v = self.variances[labels] + t
        mean = (self.variances[labels] / v)[:, None] * y
        std = np.sqrt(self.variances[labels] * t / v)
        x = mean + std[:, None] * rng.standard_normal((count, self.dim))
        return x[0] if n is None else x


@dataclass(frozen=True)
class SphericalExponential:
    """Spherically-symmetric density with Exponential(rate) radial marginal."""

    dim: int
    rate: float

    def __post_init__(self):
        if self.dim < 1 or self.rate <= 0:
            raise ValueError("dim >= 1 and rate > 0 required")

    @property
    def log_sphere_area(self) -> float:
        # surface area of the unit (d-1)-sphere
        return math.log(2.0) + 0.5 * self.dim * math.log(math.pi) - math.lgamma(
            self.dim / 2.0
        )

    def sample(self, rng, n=None):
        count = 1 if n is None else int(n)
        u = rng.standard_normal((count, self.dim))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        r = rng.exponential(1.0 / self.rate, size=count)
        x = r[:, None] * u
        return x[0] if n is None else x

    def log_density_radius(self, r):
        r = np.asarray(r, dtype=float)
        if np.any(r <= 0) and self.dim > 1:
            raise ValueError("log density undefined at the origin for dim > 1")
        return (
            math.log(self.rate)
            - self.rate * r
            - (self.dim - 1) * np.log(r)
            - self.log_sphere_area
        )

    def log_density(self, x):
        x = np.asarray(x, dtype=float)
        return self.log_density_radius(np.linalg.norm(x, axis=-1))


@dataclass(frozen=True)
class LinearScoreField:
    """s(y) = A y; homogeneous by construction, conservative iff A symmetric."""

    matrix: np.ndarray
    symmetric: bool = False

    def __post_init__(self):
        object.__setattr__(self, "matrix", np.asarray(self.matrix, dtype=float))
        a = self.matrix
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("matrix must be square")
        if self.symmetric and np.abs(a - a.T).max() > 1e-12:
            raise ValueError("matrix marked symmetric is not")

    def __call__(self, y, t=0.0):
        y = np.asarray(y, dtype=float)
        if y.shape[-1] != self.matrix.shape[1]:
            raise ValueError("dimension mismatch")
        return y @ self.matrix.T
