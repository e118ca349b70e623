"""Negative-log-likelihood estimators and effective dimensionality.

Four routes to -log p(x) from an energy model U(y, t):

* direct: a single evaluation U(x, t=0) (one-shot, deterministic);
* ode: integrate the probability-flow ODE dx/dt = grad_y U / 2 forward to
  t_hi and accumulate the Laplacian along the way (deterministic; uses the
  radial family's closed-form Laplacian, no stochastic trace estimation);
* mmse: integrate the denoising mean squared error over noise levels
  (Monte Carlo per noise level; an upper bound for suboptimal denoisers);
* ito: average a stochastic estimate along Brownian paths with left-point
  score evaluation (its trajectory average converges to the mmse bound).

All four agree on a model that satisfies the diffusion equation, which makes
their concordance a consistency diagnostic for trained models.
"""

import math
from dataclasses import dataclass

import numpy as np

from .threads import limited_workers

LOG10E_X10 = 10.0 * math.log10(math.e)


@dataclass(frozen=True)
class Schedule:
    """Noise-level grid t_0 < ... < t_n spanning [t_lo, t_hi]."""

    t_lo: float
    t_hi: float
    n: int = 256
    spacing: str = "log"

    def __post_init__(self):
        if not (0.0 < self.t_lo < self.t_hi):
            raise ValueError("need 0 < t_lo < t_hi")
        if self.n < 2:
            raise ValueError("need at least 2 intervals")
        if self.spacing not in ("log", "linear"):
            raise ValueError(f"unknown spacing {self.spacing!r}")

    def points(self) -> np.ndarray:
        if self.spacing == "log":
            return np.geomspace(self.t_lo, self.t_hi, self.n + 1)
        return np.linspace(self.t_lo, self.t_hi, self.n + 1)

    def describe(self) -> str:
        return f"{self.spacing}[{self.t_lo:.3g},{self.t_hi:.3g}]x{self.n}"


@dataclass
class EnergyEstimate:
    """An NLL value in nats with estimator provenance and MC diagnostics."""

    value: float
    kind: str
    schedule: str
    mc_std: float = 0.0
    trajectories: int = 0

    def db_per_dim(self, dim: int) -> float:
        return -LOG10E_X10 * self.value / dim


@dataclass
class DimEstimate:
    value: float
    t: float
    method: str
    mc_std: float = 0.0


def _gaussian_reference(q_end, t_hi, dim):
    return q_end / (2.0 * t_hi) + 0.5 * dim * math.log(2.0 * math.pi * t_hi)


def direct_nll(model, x, t: float = 0.0) -> EnergyEstimate:
    """U(x, t), by default at t = 0; requires a normalized model."""
    value = float(model.energy(np.asarray(x, dtype=float), t))
    return EnergyEstimate(value=value, kind="direct", schedule=f"t={t:g}")


def ode_nll_batch(model, xs, schedule: Schedule):
    """Probability-flow estimates for each row of xs over a shared schedule.

    The flow is integrated in log t with the explicit midpoint rule and the
    (closed-form) Laplacian accumulated by the trapezoid rule in log t. The
    [0, t_lo) head of the integral is dropped; t_lo should be small.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    d = model.dim
    ts = schedule.points()
    taus = np.log(ts)

    with limited_workers():
        x = xs.copy()
        q = (x * x).sum(axis=1)
        g_prev = model.laplacian_q(q, ts[0]) * ts[0]
        integral = np.zeros(xs.shape[0])
        for k in range(schedule.n):
            h = taus[k + 1] - taus[k]
            f0 = 0.5 * ts[k] * model.score_coeff_q(q, ts[k])
            x_mid = x * (1.0 + 0.5 * h * f0)[:, None]
            t_mid = math.exp(0.5 * (taus[k] + taus[k + 1]))
            q_mid = (x_mid * x_mid).sum(axis=1)
            f_mid = 0.5 * t_mid * model.score_coeff_q(q_mid, t_mid)
            x = x + h * f_mid[:, None] * x_mid
            q = (x * x).sum(axis=1)
            g_next = model.laplacian_q(q, ts[k + 1]) * ts[k + 1]
            integral += 0.5 * h * (g_prev + g_next)
            g_prev = g_next

    desc = schedule.describe()
    return [
        EnergyEstimate(
            value=float(_gaussian_reference(q[i], schedule.t_hi, d) - 0.5 * integral[i]),
            kind="ode",
            schedule=desc,
        )
        for i in range(xs.shape[0])
    ]


def ode_nll(model, x, schedule: Schedule) -> EnergyEstimate:
    return ode_nll_batch(model, x, schedule)[0]


def mmse_nll(model, x, schedule: Schedule, rng, samples_per_t=64) -> EnergyEstimate:
    """Denoising-MSE bound: (d/2)log(2 pi e t_hi) - integral of
    (t d - E||x - denoise(y,t)||^2) dt / (2 t^2), Monte Carlo per t node.

    Below t_lo the integrand is extrapolated as zero (perfect denoising).
    For the exact model this reproduces the true NLL; for any other model it
    is an upper bound in expectation.
    """
    x = np.asarray(x, dtype=float)
    d = model.dim
    ts = schedule.points()
    taus = np.log(ts)
    n_nodes = ts.size

    g = np.zeros(n_nodes)
    g_var = np.zeros(n_nodes)
    with limited_workers():
        for k, t in enumerate(ts):
            z = rng.standard_normal((samples_per_t, d))
            y = x + math.sqrt(t) * z
            q = (y * y).sum(axis=1)
            kappa = model.score_coeff_q(q, t)
            resid = x - y + (t * kappa)[:, None] * y
            mse = (resid * resid).sum(axis=1)
            # integrand in tau: (t d - mse) / (2 t^2) * t = (d - mse/t) / 2
            vals = 0.5 * (d - mse / t)
            g[k] = vals.mean()
            g_var[k] = vals.var(ddof=1) / samples_per_t

    weights = np.zeros(n_nodes)
    dtau = np.diff(taus)
    weights[:-1] += 0.5 * dtau
    weights[1:] += 0.5 * dtau
    integral = float(weights @ g)
    mc_std = float(math.sqrt((weights**2) @ g_var))
    value = 0.5 * d * math.log(2.0 * math.pi * math.e * schedule.t_hi) - integral
    return EnergyEstimate(
        value=value,
        kind="mmse",
        schedule=schedule.describe() + "+zero-below-t_lo",
        mc_std=mc_std,
    )


def ito_nll(model, x, rng, schedule: Schedule, trajectories=64) -> EnergyEstimate:
    """Stochastic estimate along Brownian paths, left-point score evaluation.

    Single trajectories are biased estimates of the mmse bound; their mean
    over many trajectories converges to it.
    """
    if trajectories < 1:
        raise ValueError("need at least one trajectory")
    x = np.asarray(x, dtype=float)
    d = model.dim
    ts = schedule.points()

    with limited_workers():
        cur = np.tile(x, (trajectories, 1))
        acc = np.zeros(trajectories)
        for k in range(schedule.n):
            t0 = ts[k]
            dt = ts[k + 1] - t0
            q = (cur * cur).sum(axis=1)
            kappa = model.score_coeff_q(q, t0)
            dw = math.sqrt(dt) * rng.standard_normal((trajectories, d))
            # <grad U, dx> - 0.5 ||grad U||^2 dt with grad U = kappa * x_t
            acc += kappa * (cur * dw).sum(axis=1) - 0.5 * kappa**2 * q * dt
            cur += dw
        q_end = (cur * cur).sum(axis=1)
        vals = _gaussian_reference(q_end, schedule.t_hi, d) - acc

    return EnergyEstimate(
        value=float(vals.mean()),
        kind="ito",
        schedule=schedule.describe(),
        mc_std=float(vals.std(ddof=1) / math.sqrt(trajectories)),
        trajectories=trajectories,
    )


def deff_mse(model, x, t, rng, samples=256) -> DimEstimate:
    """Effective dimensionality as denoising MSE over t; non-negative.

    `model` may be the trained energy model (Tweedie denoiser, an upper
    bound) or the analytic mixture (optimal denoiser, the exact value).
    """
    if t <= 0:
        raise ValueError("need t > 0")
    x = np.asarray(x, dtype=float)
    z = rng.standard_normal((samples, x.size))
    y = x + math.sqrt(t) * z
    err = x - model.denoise(y, t)
    vals = (err * err).sum(axis=1) / t
    return DimEstimate(
        value=float(vals.mean()),
        t=float(t),
        method="mse",
        mc_std=float(vals.std(ddof=1) / math.sqrt(samples)),
    )


def deff_energy(model, x, t, rng, samples=256, half_log_step=0.05) -> DimEstimate:
    """Effective dimensionality as d minus the half-log-t slope of the
    effective energy, central difference with shared noise draws."""
    if t <= 0:
        raise ValueError("need t > 0")
    x = np.asarray(x, dtype=float)
    d = model.dim
    z = rng.standard_normal((samples, x.size))
    t_up = t * math.exp(2.0 * half_log_step)
    t_dn = t * math.exp(-2.0 * half_log_step)
    u_up = model.energy((x + math.sqrt(t_up) * z), t_up)
    u_dn = model.energy((x + math.sqrt(t_dn) * z), t_dn)
    slopes = (u_up - u_dn) / (2.0 * half_log_step)
    return DimEstimate(
        value=float(d - slopes.mean()),
        t=float(t),
        method="energy",
        mc_std=float(slopes.std(ddof=1) / math.sqrt(samples)),
    )


def estimate_nll(model, x, kind, schedule=None, rng=None, samples_per_t=64,
                 trajectories=64, direct_t=0.0) -> EnergyEstimate:
    """Dispatch helper used by the command-line front end."""
    if kind == "direct":
        return direct_nll(model, x, t=direct_t)
    if kind == "ode":
        return ode_nll(model, x, schedule)
    if kind == "mmse":
        return mmse_nll(model, x, schedule, rng, samples_per_t)
    if kind == "ito":
        return ito_nll(model, x, rng, schedule, trajectories)
    raise ValueError(f"unknown estimator kind {kind!r}")
