"""Shared math for radial quadratic-mixture energies.

Both the trainable model and the Gaussian-scale-mixture ground truth have
energies of the form

    U(y, t) = -log sum_i exp(-a_i(t) ||y||^2 - b_i(t)) + offset,

so everything downstream (scores, Laplacian, denoisers) reduces to a few
component-weighted sums over q = ||y||^2. Coefficient arrays have shape (K,)
or (..., K) and broadcast against q of shape (...).
"""

import numpy as np


def exponents(q, a, b):
    q = np.asarray(q, dtype=float)
    return -(a * q[..., None]) - b


def logsumexp_softmax(e):
    """Stable (logsumexp, softmax) along the last axis."""
    m = e.max(axis=-1, keepdims=True)
    z = np.exp(e - m)
    s = z.sum(axis=-1, keepdims=True)
    return (m + np.log(s)).squeeze(-1), z / s


def responsibilities(q, a, b):
    return logsumexp_softmax(exponents(q, a, b))[1]


def energy(q, a, b, offset=0.0):
    lse, _ = logsumexp_softmax(exponents(q, a, b))
    return -lse + offset


def score_coeff(q, a, b):
    """kappa(q, t) such that grad_y U = kappa * y."""
    w = responsibilities(q, a, b)
    return 2.0 * (w * a).sum(axis=-1)


def time_score(q, a, b, adot, bdot):
    """dU/dt = sum_i w_i (adot_i q + bdot_i)."""
    q = np.asarray(q, dtype=float)
    w = responsibilities(q, a, b)
    return (w * (adot * q[..., None] + bdot)).sum(axis=-1)


def laplacian(q, a, b, dim):
    """Delta_y U = 2 d <a> - 4 q Var_w(a) with <.> the w-weighted mean."""
    q = np.asarray(q, dtype=float)
    w = responsibilities(q, a, b)
    mean_a = (w * a).sum(axis=-1)
    var_a = (w * a * a).sum(axis=-1) - mean_a**2
    return 2.0 * dim * mean_a - 4.0 * q * var_a
