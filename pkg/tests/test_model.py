"""Coefficient, score, and parameter-gradient checks for the energy models."""

import math
from types import SimpleNamespace

import numpy as np
import pytest

from dualscore.analytic import IsotropicGaussianMixture, LinearScoreField
from dualscore.model import (
    ExactGsmEnergy,
    QuadMixEnergy,
    TimeMlp,
    inner_product_energy,
)
from dualscore.rng import stream
from dualscore.tape import Tape


def toy_model(seed=0, dim=5, width=8, depth=3, k=2, t_min=1e-2):
    model = QuadMixEnergy.create(
        dim=dim,
        rng=stream(seed, "toy"),
        n_components=k,
        depth=depth,
        width=width,
        t_min_offset=t_min,
    )
    # move away from the near-zero init so derivative checks are non-trivial
    theta = model.theta
    theta += 0.3 * stream(seed, "toy-jitter").standard_normal(theta.size)
    model.set_theta(theta)
    return model


def test_dead_network_gives_flat_coefficients():
    model = toy_model()
    model.set_theta(np.zeros(model.mlp.n_params))
    c = model.coeffs(0.5)
    assert np.all(c.a == 0) and np.all(c.b == 0)
    assert np.all(c.adot == 0) and np.all(c.bdot == 0)


def test_coefficient_tangents_match_finite_differences():
    model = toy_model()
    for t in (0.0, 0.03, 1.0, 40.0):
        h = 1e-6 * (t + model.t_min_offset)
        up = model.coeffs(t + h)
        dn = model.coeffs(max(t - h, 0.0) if t > 0 else t)
        denom = h + min(h, t)  # one-sided at t == 0
        fd_a = (up.a - dn.a) / denom
        fd_b = (up.b - dn.b) / denom
        c = model.coeffs(t)
        assert np.abs(fd_a - c.adot).max() / max(1.0, np.abs(c.adot).max()) < 1e-5
        assert np.abs(fd_b - c.bdot).max() / max(1.0, np.abs(c.bdot).max()) < 1e-5


def test_tangent_chain_factor_at_zero_noise():
    model = toy_model()
    out, out_dot, _ = model.mlp.forward_tangent(model.log_noise_input(np.array([0.0])))
    c = model.coeffs(0.0)
    k = model.n_components
    assert np.allclose(c.adot, out_dot[0, :k] / model.t_min_offset, atol=1e-14)
    assert np.allclose(
        c.bdot, model.b_scale * out_dot[0, k:] / model.t_min_offset, atol=1e-12
    )


def test_exact_model_reproduces_single_gaussian():
    sigma2, d = 2.25, 6
    mix = IsotropicGaussianMixture.from_sigmas(d, [math.sqrt(sigma2)])
    exact = ExactGsmEnergy(mix)
    rng = stream(1, "exact")
    for t in (0.0, 0.4, 7.0):
        y = rng.standard_normal(d) * 1.7
        q = float((y * y).sum())
        v = sigma2 + t
        assert exact.energy(y, t) == pytest.approx(
            q / (2 * v) + 0.5 * d * math.log(2 * math.pi * v), rel=1e-14
        )
        assert np.allclose(exact.space_score(y, t), y / v, atol=1e-14)
        assert exact.time_score(y, t) == pytest.approx(
            d / (2 * v) - q / (2 * v * v), rel=1e-13
        )
        assert exact.laplacian(y, t) == pytest.approx(d / v, rel=1e-13)
        assert np.allclose(exact.denoise(y, t), sigma2 / v * y, atol=1e-13)


def test_model_derivatives_match_finite_differences():
    model = toy_model()
    rng = stream(2, "fd")
    h = 1e-4
    for trial in range(3):
        y = rng.standard_normal(5) * rng.uniform(0.5, 2.0)
        t = rng.uniform(0.05, 5.0)
        grad = model.space_score(y, t)
        lap_fd = 0.0
        for i in range(5):
            e = np.zeros(5)
            e[i] = h
            fd = (model.energy(y + e, t) - model.energy(y - e, t)) / (2 * h)
            assert abs(fd - grad[i]) / max(1.0, abs(grad[i])) < 1e-6
            lap_fd += (
                model.energy(y + e, t) - 2 * model.energy(y, t) + model.energy(y - e, t)
            ) / h**2
        assert abs(lap_fd - model.laplacian(y, t)) / max(
            1.0, abs(lap_fd)
        ) < 1e-6
        ht = 1e-6 * t
        fd_t = (model.energy(y, t + ht) - model.energy(y, t - ht)) / (2 * ht)
        assert abs(fd_t - model.time_score(y, t)) / max(1.0, abs(fd_t)) < 1e-5


def test_laplacian_at_origin():
    model = toy_model()
    t = 0.7
    c = model.coeffs(t)
    w = np.exp(-c.b - max(-c.b))  # softmax at q = 0
    w = w / w.sum()
    assert model.laplacian(np.zeros(5), t) == pytest.approx(
        2 * 5 * (w * c.a).sum(), rel=1e-12
    )


def test_energy_is_rotation_invariant():
    model = toy_model()
    rng = stream(3, "rot")
    y = rng.standard_normal(5) * 2.0
    mat = rng.standard_normal((5, 5))
    r, _ = np.linalg.qr(mat)
    for t in (0.0, 1.0):
        assert model.energy(r @ y, t) == pytest.approx(model.energy(y, t), rel=1e-12)


def test_norm_offset_shifts_energy_only():
    model = toy_model()
    y = stream(4, "off").standard_normal(5)
    t = 0.3
    base = model.energy(y, t), model.space_score(y, t), model.laplacian(y, t)
    model.norm_offset += 2.5
    assert model.energy(y, t) == pytest.approx(base[0] + 2.5, rel=1e-14)
    assert np.allclose(model.space_score(y, t), base[1], atol=0)
    assert model.laplacian(y, t) == base[2]


# -- inner-product energy ----------------------------------------------------


def test_inner_product_energy_gradient_symmetric_field():
    rng = stream(5, "ip")
    a = rng.standard_normal((4, 4))
    sym = LinearScoreField((a + a.T) / 2, symmetric=True)
    y = rng.standard_normal(4)
    h = 1e-5
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        fd = (
            inner_product_energy(sym, y + e) - inner_product_energy(sym, y - e)
        ) / (2 * h)
        assert abs(fd - sym(y)[i]) / max(1.0, abs(fd)) < 1e-6


def test_inner_product_energy_symmetrizes_general_field():
    rng = stream(6, "ip2")
    a = rng.standard_normal((4, 4))
    field = LinearScoreField(a)
    y = rng.standard_normal(4)
    h = 1e-5
    expected = 0.5 * (a + a.T) @ y
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        fd = (
            inner_product_energy(field, y + e) - inner_product_energy(field, y - e)
        ) / (2 * h)
        assert abs(fd - expected[i]) / max(1.0, abs(fd)) < 1e-6


def test_inner_product_energy_quadratic_homogeneity():
    # homogeneous fields give exactly quadratically-homogeneous energies
    y = stream(7, "ip3").standard_normal(5)
    field = LinearScoreField(np.diag([1.0, 2.0, 0.5, -1.0, 3.0]), symmetric=True)
    for lam in (0.0, 0.5, 2.0):
        assert inner_product_energy(field, lam * y) == pytest.approx(
            lam * lam * inner_product_energy(field, y), abs=1e-12
        )


# -- tape path cross-checks -----------------------------------------------------


def tape_energy_loss(model, y, t, with_tangent=False):
    """Record U(y, t) (and optionally its t-derivative) on a fresh tape."""
    tape = Tape(with_tangent=with_tangent)
    theta_nodes, flat = model.tape_theta_leaves(tape)
    a, b, adot, bdot = model.tape_coeff_nodes(tape, theta_nodes, t)
    q = float(np.dot(y, y))
    es = [-(ai * q + bi) for ai, bi in zip(a, b)]
    u = -tape.logsumexp(es) + model.norm_offset
    return tape, u, flat


def test_tape_coeffs_match_vectorized_path():
    model = toy_model()
    t = 0.37
    tape = Tape(with_tangent=True)
    theta_nodes, _ = model.tape_theta_leaves(tape)
    a, b, adot, bdot = model.tape_coeff_nodes(tape, theta_nodes, t)
    c = model.coeffs(t)
    assert np.allclose([n.value for n in a], c.a, rtol=1e-13, atol=1e-15)
    assert np.allclose([n.value for n in b], c.b, rtol=1e-13, atol=1e-13)
    assert np.allclose([n.value for n in adot], c.adot, rtol=1e-12, atol=1e-15)
    assert np.allclose([n.value for n in bdot], c.bdot, rtol=1e-12, atol=1e-13)


def test_theta_gradient_of_energy_matches_finite_differences():
    model = toy_model(width=6, depth=3)
    y = stream(8, "tg").standard_normal(5)
    t = 0.9
    tape, u, flat = tape_energy_loss(model, y, t)
    loss = SimpleNamespace(tape=tape, node=u, theta_leaves=flat)
    grad = model.theta_gradient(loss)
    assert u.value == pytest.approx(model.energy(y, t), rel=1e-12)

    theta0 = model.theta
    h = 1e-6
    for i in range(0, theta0.size, 7):
        th = theta0.copy()
        th[i] += h
        model.set_theta(th)
        up = model.energy(y, t)
        th[i] -= 2 * h
        model.set_theta(th)
        dn = model.energy(y, t)
        fd = (up - dn) / (2 * h)
        assert abs(fd - grad[i]) / max(1.0, abs(fd)) < 1e-4
    model.set_theta(theta0)


def test_theta_gradient_of_squared_time_score_matches_finite_differences():
    # exercises reverse mode through the tangent channel (mixed second order)
    model = toy_model(width=6, depth=3)
    y = stream(9, "tg2").standard_normal(5)
    t = 0.6
    q = float(np.dot(y, y))

    tape = Tape(with_tangent=True)
    theta_nodes, flat = model.tape_theta_leaves(tape)
    a, b, _, _ = model.tape_coeff_nodes(tape, theta_nodes, t)
    es = [-(ai * q + bi) for ai, bi in zip(a, b)]
    u = -tape.logsumexp(es)
    dudt = u.tangent * (1.0 / (t + model.t_min_offset))
    assert dudt.value == pytest.approx(float(model.time_score(y, t)), rel=1e-10)
    loss_node = dudt.square()
    grad = model.theta_gradient(
        SimpleNamespace(tape=tape, node=loss_node, theta_leaves=flat)
    )

    theta0 = model.theta
    h = 1e-6
    for i in range(0, theta0.size, 11):
        th = theta0.copy()
        th[i] += h
        model.set_theta(th)
        up = float(model.time_score(y, t)) ** 2
        th[i] -= 2 * h
        model.set_theta(th)
        dn = float(model.time_score(y, t)) ** 2
        fd = (up - dn) / (2 * h)
        assert abs(fd - grad[i]) / max(1.0, abs(fd)) < 1e-4
    model.set_theta(theta0)


def test_vectorized_backward_matches_tape_on_random_upstream():
    # loss = sum r_a.a + r_b.b + r_ad.adot + r_bd.bdot, same upstream both paths
    model = toy_model(width=6, depth=3)
    rng = stream(10, "up")
    t = 1.3
    k = model.n_components
    r_a, r_b = rng.standard_normal(k), rng.standard_normal(k)
    r_ad, r_bd = rng.standard_normal(k), rng.standard_normal(k)

    tape = Tape(with_tangent=True)
    theta_nodes, flat = model.tape_theta_leaves(tape)
    a, b, adot, bdot = model.tape_coeff_nodes(tape, theta_nodes, t)
    loss = None
    for nodes, coeffs in ((a, r_a), (b, r_b), (adot, r_ad), (bdot, r_bd)):
        for node, cc in zip(nodes, coeffs):
            term = node * float(cc)
            loss = term if loss is None else loss + term
    tape_grad = model.theta_gradient(
        SimpleNamespace(tape=tape, node=loss, theta_leaves=flat)
    )

    _, _, _, _, aux = model.coeffs_batch_cached(np.array([t]))
    fast_grad = model.backward_from_coeff_grads(
        aux, r_a[None, :], r_b[None, :], r_ad[None, :], r_bd[None, :]
    )
    assert np.abs(tape_grad - fast_grad).max() < 1e-10


def test_zero_upstream_gives_zero_gradient():
    model = toy_model(width=6, depth=3)
    _, _, _, _, aux = model.coeffs_batch_cached(np.array([0.5]))
    zero = np.zeros((1, model.n_components))
    grad = model.backward_from_coeff_grads(aux, zero, zero, zero, zero)
    assert np.all(grad == 0.0)


def test_flat_roundtrip_and_mlp_shapes():
    mlp = TimeMlp.create(stream(11, "mlp"), depth=4, width=5, out_dim=6)
    theta = mlp.flat()
    mlp.set_flat(theta)
    assert np.array_equal(mlp.flat(), theta)
    assert mlp.out_dim == 6 and mlp.depth == 4
    with pytest.raises(ValueError):
        mlp.set_flat(theta[:-1])
