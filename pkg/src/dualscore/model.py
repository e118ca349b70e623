"""Trainable radial energy family and the inner-product energy construction.

The energy is a mixture of quadratics in ||y||^2 whose coefficients are a
smooth function of the log noise level:

    U(y, t) = -log sum_i exp(-a_i(t) ||y||^2 - b_i(t)) + c,
    (a_i, b_i) = heads of an MLP evaluated at s = log(t + t_min_offset).

Two coefficient sources implement the same evaluation surface: a trainable
:class:`TimeMlp` (``QuadMixEnergy``) and the closed-form coefficients of a
Gaussian scale mixture (``ExactGsmEnergy``, the "hand-set" reference model).

Time derivatives of the coefficients are propagated as forward tangents with
respect to s. The vectorized numpy passes here are the production path; the
same computation can be recorded on a scalar :class:`~dualscore.tape.Tape`
(see ``tape_coeff_nodes``), which is the exactness oracle for all gradients,
including the mixed second-order paths through the tangent outputs.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import radial
from .tape import NodeId, Tape


@dataclass
class TimeMlp:
    """Fully-connected tanh network from the scalar s to 2K coefficient heads."""

    weights: list
    biases: list

    @classmethod
    def create(cls, rng, depth=5, width=256, out_dim=4):
        """Weights ~ N(0, 1/fan_in), zero biases, last layer scaled by 0.01."""
        sizes = [1] + [width] * (depth - 1) + [out_dim]
        weights, biases = [], []
        for k in range(depth):
            fan_in = sizes[k]
            w = rng.standard_normal((fan_in, sizes[k + 1])) / math.sqrt(fan_in)
            if k == depth - 1:
                w *= 0.01
            weights.append(w)
            biases.append(np.zeros(sizes[k + 1]))
        return cls(weights=weights, biases=biases)

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def set_flat(self, theta: np.ndarray):
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.n_params:
            raise ValueError("parameter vector has wrong length")
        pos = 0
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[k] = theta[pos : pos + w.size].reshape(w.shape).copy()
            pos += w.size
            self.biases[k] = theta[pos : pos + b.size].copy()
            pos += b.size

    def shapes(self):
        return [(w.shape, b.shape) for w, b in zip(self.weights, self.biases)]

    # -- vectorized passes ---------------------------------------------------

    def forward(self, s: np.ndarray):
        """Values only. Returns (out, cache) with out of shape (B, out_dim)."""
        h = np.asarray(s, dtype=float)[:, None]
        hs = [h]
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.tanh(h @ w + b)
            hs.append(h)
        out = h @ self.weights[-1] + self.biases[-1]
        return out, {"hs": hs}

    def forward_tangent(self, s: np.ndarray):
        """Values and d/ds tangents. Returns (out, out_dot, cache)."""
        h = np.asarray(s, dtype=float)[:, None]
        hdot = np.ones_like(h)
        hs, hdots, zdots = [h], [hdot], [None]
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            zdot = hdot @ w
            h = np.tanh(h @ w + b)
            hdot = (1.0 - h * h) * zdot
            hs.append(h)
            hdots.append(hdot)
            zdots.append(zdot)
        out = h @ self.weights[-1] + self.biases[-1]
        out_dot = hdot @ self.weights[-1]
        return out, out_dot, {"hs": hs, "hdots": hdots, "zdots": zdots}

    def backward(self, cache, dout, ddout=None):
        """Reverse pass for a loss with upstream gradients on the outputs.

        `dout` is dL/dout; `ddout`, when given, is dL/dout_dot and requires a
        tangent cache. Includes the exact second-order paths created by the
        tangent propagation. Returns a flat gradient over the parameters.
        """
        hs = cache["hs"]
        tangent = ddout is not None
        if tangent:
            hdots, zdots = cache["hdots"], cache["zdots"]
        n_layers = self.depth
        g_w = [None] * n_layers
        g_b = [None] * n_layers

        g_w[-1] = hs[-1].T @ dout
        g_b[-1] = dout.sum(axis=0)
        d_h = dout @ self.weights[-1].T
        d_hdot = None
        if tangent:
            g_w[-1] = g_w[-1] + hdots[-1].T @ ddout
            d_hdot = ddout @ self.weights[-1].T

        for k in range(n_layers - 2, -1, -1):
            h_out = hs[k + 1]
            sech2 = 1.0 - h_out * h_out
            if tangent:
                d_zdot = d_hdot * sech2
                d_h = d_h - 2.0 * d_hdot * h_out * zdots[k + 1]
            d_z = d_h * sech2
            g_w[k] = hs[k].T @ d_z
            g_b[k] = d_z.sum(axis=0)
            if tangent:
                g_w[k] = g_w[k] + hdots[k].T @ d_zdot
            if k > 0:
                d_h = d_z @ self.weights[k].T
                if tangent:
                    d_hdot = d_zdot @ self.weights[k].T

        parts = []
        for gw, gb in zip(g_w, g_b):
            parts.append(gw.ravel())
            parts.append(gb)
        return np.concatenate(parts)


@dataclass
class CoeffBundle:
    """Per-component quadratic coefficients and t-derivatives at one noise level.

    (adot, bdot) are the tangent outputs of the coefficient source times
    ds/dt = 1 / (t + t_min_offset).
    """

    a: np.ndarray
    b: np.ndarray
    adot: np.ndarray
    bdot: np.ndarray


class _RadialEnergyBase:
    """Evaluation surface shared by trainable and hand-set models."""

    def coeffs_batch(self, t):
        raise NotImplementedError

    def coeffs(self, t: float) -> CoeffBundle:
        a, b, adot, bdot = self.coeffs_batch(np.array([float(t)]))
        return CoeffBundle(a=a[0], b=b[0], adot=adot[0], bdot=bdot[0])

    def energy_q(self, q, t):
        a, b, _, _ = self.coeffs_batch(np.asarray(t, dtype=float))
        return radial.energy(q, a, b, self.norm_offset)

    def score_coeff_q(self, q, t):
        a, b, _, _ = self.coeffs_batch(np.asarray(t, dtype=float))
        return radial.score_coeff(q, a, b)

    def time_score_q(self, q, t):
        a, b, adot, bdot = self.coeffs_batch(np.asarray(t, dtype=float))
        return radial.time_score(q, a, b, adot, bdot)

    def laplacian_q(self, q, t):
        a, b, _, _ = self.coeffs_batch(np.asarray(t, dtype=float))
        return radial.laplacian(q, a, b, self.dim)

    def energy(self, y, t):
        y = np.asarray(y, dtype=float)
        return self.energy_q((y * y).sum(axis=-1), t)

    def space_score(self, y, t):
        y = np.asarray(y, dtype=float)
        kappa = self.score_coeff_q((y * y).sum(axis=-1), t)
        return np.asarray(kappa)[..., None] * y

    def time_score(self, y, t):
        y = np.asarray(y, dtype=float)
        return self.time_score_q((y * y).sum(axis=-1), t)

    def laplacian(self, y, t):
        y = np.asarray(y, dtype=float)
        return self.laplacian_q((y * y).sum(axis=-1), t)

    def denoise(self, y, t):
        """Tweedie denoiser y - t grad_y U."""
        y = np.asarray(y, dtype=float)
        kappa = self.score_coeff_q((y * y).sum(axis=-1), t)
        return (1.0 - np.asarray(t) * np.asarray(kappa))[..., None] * y


@dataclass
class QuadMixEnergy(_RadialEnergyBase):
    """Mixture-of-quadratics energy with MLP-of-log-noise-level coefficients.

    Head scales map the O(1) MLP outputs onto the natural magnitudes of the
    coefficients: b grows like (d/2) log(2 pi (sigma^2 + t)), so its head is
    scaled by dim/2 to keep raw outputs and optimizer steps well-conditioned.
    """

    dim: int
    n_components: int
    mlp: TimeMlp
    t_min_offset: float
    norm_offset: float = 0.0
    a_scale: float = 1.0
    b_scale: float = 1.0

    @classmethod
    def create(cls, dim, rng, n_components=2, depth=5, width=256, t_min_offset=1e-2):
        mlp = TimeMlp.create(rng, depth=depth, width=width, out_dim=2 * n_components)
        return cls(
            dim=dim,
            n_components=n_components,
            mlp=mlp,
            t_min_offset=float(t_min_offset),
            a_scale=1.0,
            b_scale=dim / 2.0,
        )

    @property
    def theta(self) -> np.ndarray:
        return self.mlp.flat()

    def set_theta(self, theta: np.ndarray):
        self.mlp.set_flat(theta)

    def log_noise_input(self, t):
        return np.log(np.asarray(t, dtype=float) + self.t_min_offset)

    def coeffs_batch(self, t):
        scalar = np.ndim(t) == 0
        a, b, adot, bdot, _ = self.coeffs_batch_cached(t)
        if scalar:
            return a[0], b[0], adot[0], bdot[0]
        return a, b, adot, bdot

    def coeffs_batch_cached(self, t, with_tangent=True):
        """Coefficients plus the pieces needed for the parameter backward."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        k = self.n_components
        dsdt = 1.0 / (t + self.t_min_offset)
        if with_tangent:
            out, out_dot, cache = self.mlp.forward_tangent(self.log_noise_input(t))
            adot = self.a_scale * out_dot[:, :k] * dsdt[:, None]
            bdot = self.b_scale * out_dot[:, k:] * dsdt[:, None]
        else:
            out, cache = self.mlp.forward(self.log_noise_input(t))
            adot = bdot = None
        a = self.a_scale * out[:, :k]
        b = self.b_scale * out[:, k:]
        return a, b, adot, bdot, (cache, dsdt)

    def backward_from_coeff_grads(self, aux, a_bar, b_bar, adot_bar=None, bdot_bar=None):
        """Flat parameter gradient from upstream gradients on (a, b, adot, bdot)."""
        cache, dsdt = aux
        dout = np.concatenate(
            [self.a_scale * a_bar, self.b_scale * b_bar], axis=1
        )
        ddout = None
        if adot_bar is not None:
            ddout = np.concatenate(
                [
                    self.a_scale * adot_bar * dsdt[:, None],
                    self.b_scale * bdot_bar * dsdt[:, None],
                ],
                axis=1,
            )
        return self.mlp.backward(cache, dout, ddout)

    # -- tape path -------------------------------------------------------------

    def tape_theta_leaves(self, tape: Tape):
        """One leaf per parameter, in flat order; returns (structured, flat)."""
        structured, flat = [], []
        for w, b in zip(self.mlp.weights, self.mlp.biases):
            w_nodes = [[tape.leaf(float(v)) for v in row] for row in w]
            b_nodes = [tape.leaf(float(v)) for v in b]
            structured.append((w_nodes, b_nodes))
            for row in w_nodes:
                flat.extend(row)
            flat.extend(b_nodes)
        return structured, flat

    def tape_coeff_nodes(self, tape: Tape, theta_nodes, t: float):
        """Record the MLP at s = log(t + t_min_offset) with s as tangent seed.

        Returns (a, b, adot, bdot) lists of NodeIds; the tangent channel must
        be active for adot/bdot (pass with_tangent=True at tape creation).
        """
        s_val = math.log(t + self.t_min_offset)
        s = tape.leaf(s_val, tangent=1.0 if tape.with_tangent else None)
        h = [s]
        for layer, (w_nodes, b_nodes) in enumerate(theta_nodes):
            last = layer == len(theta_nodes) - 1
            outs = []
            for j in range(len(b_nodes)):
                acc = b_nodes[j]
                for i, h_i in enumerate(h):
                    acc = acc + w_nodes[i][j] * h_i
                outs.append(acc if last else acc.tanh())
            h = outs
        k = self.n_components
        a = [h_j * self.a_scale for h_j in h[:k]]
        b = [h_j * self.b_scale for h_j in h[k:]]
        if not tape.with_tangent:
            return a, b, None, None
        dsdt = 1.0 / (t + self.t_min_offset)
        adot = [node.tangent * dsdt for node in a]
        bdot = [node.tangent * dsdt for node in b]
        return a, b, adot, bdot

    def theta_gradient(self, loss) -> np.ndarray:
        """Exact reverse-mode gradient of a tape loss over the flat parameters."""
        grads = loss.tape.backward(loss.node)
        return np.array([grads[leaf] for leaf in loss.theta_leaves])


@dataclass
class ExactGsmEnergy(_RadialEnergyBase):
    """Hand-set model with the closed-form coefficients of a Gaussian mixture."""

    mix: "object"
    norm_offset: float = 0.0

    @property
    def dim(self) -> int:
        return self.mix.dim

    @property
    def n_components(self) -> int:
        return self.mix.n_components

    def coeffs_batch(self, t):
        return self.mix.coeff_arrays(np.asarray(t, dtype=float))

    def coeffs_batch_cached(self, t, with_tangent=True):
        """Evaluation-only counterpart of the trainable model's interface."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        a, b, adot, bdot = self.mix.coeff_arrays(t)
        return a, b, adot, bdot, None

    def backward_from_coeff_grads(self, aux, *args, **kwargs):
        raise TypeError("closed-form models have no trainable parameters")


def inner_product_energy(score_field, y, t=0.0) -> float:
    """U = 0.5 <y, s(y, t)>; gradient equals s for conservative homogeneous s."""
    y = np.asarray(y, dtype=float)
    s = np.asarray(score_field(y, t), dtype=float)
    if s.shape != y.shape:
        raise ValueError("score field output has mismatched shape")
    return 0.5 * float(y @ s)
