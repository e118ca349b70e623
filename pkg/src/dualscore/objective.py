"""The dual score matching loss and its single-score baseline.

Per sample, with y = x + sqrt(t) z and d the data dimension, the loss is the
unitless two-term expression

    || sqrt(t/d) grad_y U(y,t) - z/sqrt(d) ||^2
      + ( (t/d) dU/dt(y,t) - (1 - ||z||^2/d)/2 )^2,

whose expectation over log-uniform t equals the noise-level-weighted sum of
the denoising and time score matching objectives. Because the model is
radial, the loss depends on the sample only through q = ||y||^2,
p = <y, z>, m = ||z||^2, and t; the vectorized engine works directly on
those statistics while the tape engine records the identical scalar
expression per sample.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import radial
from .tape import NodeId, Tape


@dataclass
class NoisySample:
    """Clean point, noise draw, and noise variance; y = x + sqrt(t) z."""

    x: np.ndarray
    z: np.ndarray
    t: float

    @property
    def y(self) -> np.ndarray:
        return self.x + math.sqrt(self.t) * self.z

    def stats(self):
        """(q, p, m) = (||y||^2, <y, z>, ||z||^2)."""
        y = self.y
        return float(y @ y), float(y @ self.z), float(self.z @ self.z)


@dataclass
class LossBreakdown:
    dsm: float
    tsm: float
    batch_size: int

    @property
    def total(self) -> float:
        return self.dsm + self.tsm


@dataclass
class TapeLoss:
    """A per-sample loss recorded on its own tape, ready for backward."""

    tape: Tape
    node: NodeId
    dsm_node: NodeId
    tsm_node: "NodeId | None"
    theta_leaves: list


def sample_noise_level(rng, t_min, t_max, size=None):
    """log t ~ Uniform(log t_min, log t_max)."""
    if not (0.0 < t_min <= t_max):
        raise ValueError("need 0 < t_min <= t_max")
    return np.exp(rng.uniform(math.log(t_min), math.log(t_max), size=size))


def stats_from_samples(samples):
    q = np.empty(len(samples))
    p = np.empty(len(samples))
    m = np.empty(len(samples))
    t = np.empty(len(samples))
    for j, s in enumerate(samples):
        q[j], p[j], m[j] = s.stats()
        t[j] = s.t
    return q, p, m, t


def stats_loss(model, q, p, m, t, kind="dual", with_grad=True):
    """Batched loss (and flat parameter gradient) from sample statistics."""
    if kind not in ("dual", "single"):
        raise ValueError(f"unknown objective kind {kind!r}")
    q, p, m, t = (np.asarray(v, dtype=float) for v in (q, p, m, t))
    n = q.size
    if n == 0:
        raise ValueError("empty batch")
    d = float(model.dim)
    dual = kind == "dual"

    a, b, adot, bdot, aux = model.coeffs_batch_cached(t, with_tangent=dual)
    e = -(a * q[:, None]) - b
    _, w = radial.logsumexp_softmax(e)
    kappa = 2.0 * (w * a).sum(axis=1)
    sqrt_t = np.sqrt(t)
    dsm_j = (t * kappa**2 * q - 2.0 * sqrt_t * kappa * p + m) / d
    if dual:
        tsc = (w * (adot * q[:, None] + bdot)).sum(axis=1)
        res = (t / d) * tsc - 0.5 * (1.0 - m / d)
        tsm_j = res**2
    else:
        tsm_j = np.zeros(n)

    breakdown = LossBreakdown(
        dsm=float(dsm_j.mean()), tsm=float(tsm_j.mean()), batch_size=n
    )
    if not with_grad:
        return breakdown, None

    u = 1.0 / n
    d_kappa = u * (2.0 * t * kappa * q - 2.0 * sqrt_t * p) / d
    psi = d_kappa[:, None] * (2.0 * a)
    if dual:
        d_tsc = u * 2.0 * res * (t / d)
        psi = psi + d_tsc[:, None] * (adot * q[:, None] + bdot)
    e_bar = w * (psi - (w * psi).sum(axis=1, keepdims=True))
    a_bar = d_kappa[:, None] * (2.0 * w) - e_bar * q[:, None]
    b_bar = -e_bar
    if dual:
        adot_bar = d_tsc[:, None] * w * q[:, None]
        bdot_bar = d_tsc[:, None] * w
    else:
        adot_bar = bdot_bar = None
    grad = model.backward_from_coeff_grads(aux, a_bar, b_bar, adot_bar, bdot_bar)
    return breakdown, grad


def _per_sample_tape_loss(model, sample, kind) -> TapeLoss:
    dual = kind == "dual"
    tape = Tape(with_tangent=dual)
    theta_nodes, flat = model.tape_theta_leaves(tape)
    t = float(sample.t)
    a, b, adot, bdot = model.tape_coeff_nodes(tape, theta_nodes, t)
    q, p, m = sample.stats()
    d = float(model.dim)

    es = [-(ai * q + bi) for ai, bi in zip(a, b)]
    lse = tape.logsumexp(es)
    ws = [(ei - lse).exp() for ei in es]
    kappa = None
    for wi, ai in zip(ws, a):
        term = wi * ai
        kappa = term if kappa is None else kappa + term
    kappa = kappa * 2.0
    dsm = (kappa.square() * (t * q) - kappa * (2.0 * math.sqrt(t) * p) + m) * (1.0 / d)
    if not dual:
        return TapeLoss(tape, dsm, dsm, None, flat)

    tsc = None
    for wi, adi, bdi in zip(ws, adot, bdot):
        term = wi * (adi * q + bdi)
        tsc = term if tsc is None else tsc + term
    res = tsc * (t / d) - 0.5 * (1.0 - m / d)
    tsm = res.square()
    total = dsm + tsm
    return TapeLoss(tape, total, dsm, tsm, flat)


def per_sample_dual_loss(model, sample: NoisySample) -> TapeLoss:
    """Record the two-term unitless loss of one sample on a fresh tape."""
    return _per_sample_tape_loss(model, sample, "dual")


def per_sample_single_loss(model, sample: NoisySample) -> TapeLoss:
    """Denoising term only; the baseline with no time-score constraint."""
    return _per_sample_tape_loss(model, sample, "single")


def batch_loss(model, samples, kind="dual", engine="vectorized"):
    """Mean per-sample loss over a batch plus the flat parameter gradient.

    The vectorized engine is the production path; the tape engine replays the
    identical expressions sample by sample and is retained as the exactness
    oracle (the two agree to float roundoff).
    """
    samples = list(samples)
    if not samples:
        raise ValueError("empty batch")
    if engine == "vectorized":
        q, p, m, t = stats_from_samples(samples)
        return stats_loss(model, q, p, m, t, kind=kind)
    if engine != "tape":
        raise ValueError(f"unknown engine {engine!r}")
    n = len(samples)
    dsm = tsm = 0.0
    grad = np.zeros(model.mlp.n_params)
    for sample in samples:
        loss = _per_sample_tape_loss(model, sample, kind)
        dsm += loss.dsm_node.value
        tsm += 0.0 if loss.tsm_node is None else loss.tsm_node.value
        grad += model.theta_gradient(loss)
    return LossBreakdown(dsm=dsm / n, tsm=tsm / n, batch_size=n), grad / n
