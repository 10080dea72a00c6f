import numpy as np
import pytest

from n2nsdf import diffkit as dk
from n2nsdf.field import FieldParams, MlpConfig, init_field, sdf
from n2nsdf.objective import (Batch, DegenerateGradient, LossWeights, eikonal_loss, gc_penalty, noise2noise_term,
                              pull, pull_loss, record_emd, record_gc, record_pull, total_loss)
from n2nsdf.shapes import Sphere
from n2nsdf.surfacing import project_to_zero_set
from n2nsdf.transport import emd_loss


def plane_field(normal=(0.0, 0.0, 1.0), offset=0.0, scale=1.0):
    """f(q) = scale * (n . q - offset), exact: every softplus unit sits deep in its linear regime."""
    n = np.asarray(normal, dtype=np.float64)
    n /= np.linalg.norm(n)
    arrays = {
        "mlp.W0": np.tile(n[:, None], (1, 4)), "mlp.b0": np.full(4, 10.0),
        "mlp.W1": np.array([[scale], [0.0], [0.0], [0.0]]), "mlp.b1": np.array([-scale * (10.0 + offset)]),
    }
    return FieldParams(MlpConfig(hidden_layers=1, width=4), None, arrays)


def constant_field(value):
    params = init_field(MlpConfig(hidden_layers=1, width=4), seed=0, dtype=np.float64)
    params.arrays["mlp.W1"][:] = 0.0
    params.arrays["mlp.b1"][:] = value
    return params


def fd_check(params, loss_fn, grads, h=1e-6):
    flat_a, flat_f = [], []
    for k, v in params.arrays.items():
        g = grads[k].to_dense() if isinstance(grads[k], dk.SparseRows) else grads[k]
        for idx in np.ndindex(v.shape):
            old = v[idx]
            v[idx] = old + h
            up = loss_fn()
            v[idx] = old - h
            dn = loss_fn()
            v[idx] = old
            flat_f.append((up - dn) / (2 * h))
            flat_a.append(g[idx])
    a, f = np.array(flat_a), np.array(flat_f)
    return np.linalg.norm(a - f) / np.linalg.norm(f)


def test_pull_of_fitted_sphere_field(sphere_field):
    np.testing.assert_allclose(pull(sphere_field, np.array([1.0, 0.0, 0.0])), [0.5, 0.0, 0.0], atol=1e-2)


def test_zero_set_points_are_fixed_points(sphere_field):
    q = np.random.default_rng(0).normal(size=(50, 3)) * 0.6
    on = project_to_zero_set(sphere_field, q, steps=12)
    assert np.abs(sdf(sphere_field, on)).max() < 1e-9
    np.testing.assert_allclose(pull(sphere_field, on), on, atol=1e-9)


def test_second_pull_moves_less(sphere_field):
    q = np.random.default_rng(1).uniform(-0.9, 0.9, (300, 3))
    q = q[np.linalg.norm(q, axis=1) > 0.1]
    p1 = pull(sphere_field, q)
    p2 = pull(sphere_field, p1)
    assert np.all(np.linalg.norm(p2 - p1, axis=1) <= np.linalg.norm(p1 - q, axis=1) + 1e-12)


def test_pull_onto_plane_is_orthogonal_projection():
    params = plane_field(offset=0.2)
    q = np.random.default_rng(2).uniform(-1, 1, (20, 3))
    expect = q.copy()
    expect[:, 2] = 0.2
    np.testing.assert_allclose(pull(params, q), expect, atol=1e-12)


def test_pull_commutes_with_rotation_on_sphere():
    sphere = Sphere(0.5)
    rng = np.random.default_rng(3)
    q = rng.normal(size=(40, 3))
    R, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    np.testing.assert_allclose(project_to_zero_set(sphere, q @ R.T), project_to_zero_set(sphere, q) @ R.T,
                               atol=1e-12)


def test_degenerate_gradient_is_reported():
    with pytest.raises(DegenerateGradient):
        pull(constant_field(0.3), np.zeros((2, 3)))


def test_noise2noise_term_vanishes_on_pulled_targets(tiny_params):
    params = tiny_params(0)
    q = np.random.default_rng(0).uniform(-1, 1, (12, 3))
    assert noise2noise_term(params, q, pull(params, q)) == 0.0


def test_noise2noise_term_vanishes_for_permuted_surface_points():
    params = plane_field()
    q = np.random.default_rng(1).uniform(-1, 1, (10, 3))
    q[:, 2] = 0.0
    assert noise2noise_term(params, q, q[::-1]) == pytest.approx(0.0, abs=1e-12)


def test_noise2noise_term_is_permutation_invariant(tiny_params):
    params = tiny_params(1, beta=10.0)
    rng = np.random.default_rng(1)
    q, t = rng.uniform(-1, 1, (9, 3)), rng.uniform(-1, 1, (9, 3))
    base = noise2noise_term(params, q, t)
    p = rng.permutation(9)
    assert noise2noise_term(params, q[p], t) == pytest.approx(base, rel=1e-12)
    assert noise2noise_term(params, q, t[p]) == pytest.approx(base, rel=1e-12)
    assert base == pytest.approx(emd_loss(pull(params, q), t)[0], rel=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_noise2noise_parameter_gradient(tiny_params, seed):
    params = tiny_params(seed, beta=10.0)
    rng = np.random.default_rng(seed)
    q, t = rng.uniform(-1, 1, (4, 3)), rng.uniform(-1, 1, (4, 3))
    tape = dk.Tape()
    loss = record_emd(record_pull(tape, params, q).pulled, t)
    assert fd_check(params, lambda: noise2noise_term(params, q, t), tape.backward(loss)) < 1e-3


def test_gc_is_zero_for_zero_field():
    q = np.random.default_rng(0).normal(size=(10, 3))
    assert gc_penalty(constant_field(0.0), q, q + 0.1) == 0.0


def test_gc_is_zero_when_inequality_holds():
    q = np.random.default_rng(0).normal(size=(10, 3)) * 0.1
    assert gc_penalty(constant_field(0.05), q, q + 5.0) == 0.0


def test_gc_hinge_arithmetic():
    value = gc_penalty(constant_field(0.5), np.zeros((1, 3)), np.array([[0.2, 0.0, 0.0]]))
    assert value == pytest.approx(0.3, abs=1e-12)


def test_gc_has_zero_gradient_where_inactive():
    params = plane_field(offset=0.0)
    q = np.random.default_rng(0).uniform(-0.5, 0.5, (20, 3))
    tape = dk.Tape()
    rec = record_pull(tape, params, q)
    far = rec.pulled.value + 3.0
    grads = tape.backward(record_gc(rec.d, q, far))
    assert all(np.all(g == 0) for g in grads.values())


def test_pull_loss_arithmetic(tiny_params):
    params = tiny_params(2)
    q = np.array([[0.1, 0.2, 0.3]])
    target = pull(params, q) + [[0.1, 0.0, 0.0]]
    assert pull_loss(params, q, target) == pytest.approx(0.01, rel=1e-9)
    assert pull_loss(params, q, pull(params, q)) == 0.0


def test_pull_loss_gradient(tiny_params):
    params = tiny_params(3, beta=10.0)
    rng = np.random.default_rng(3)
    q, t = rng.uniform(-1, 1, (5, 3)), rng.uniform(-1, 1, (5, 3))
    tape = dk.Tape()
    rec = record_pull(tape, params, q)
    loss = dk.mean(dk.sum(dk.square(rec.pulled - t), axis=1))
    assert fd_check(params, lambda: pull_loss(params, q, t), tape.backward(loss)) < 1e-3


def test_eikonal_on_exact_plane_and_its_double():
    q = np.random.default_rng(0).uniform(-1, 1, (100, 3))
    assert eikonal_loss(plane_field(), q) == pytest.approx(0.0, abs=1e-12)
    assert eikonal_loss(plane_field(scale=2.0), q) == pytest.approx(1.0, abs=1e-12)


def test_zero_gc_weight_leaves_pure_emd(tiny_params):
    params = tiny_params(4)
    rng = np.random.default_rng(4)
    batch = Batch(rng.uniform(-1, 1, (16, 3)), rng.uniform(-1, 1, (16, 3)))
    rec = total_loss("mlp", params, batch, LossWeights(lam=0.0), it=0)
    assert float(rec.loss.value) == pytest.approx(noise2noise_term(params, batch.queries, batch.targets), abs=1e-12)
    rec = total_loss("mlp", params, batch, LossWeights(lam=0.1), it=0)
    expect = float(rec.terms["emd"].value) + 0.1 * float(rec.terms["gc"].value)
    assert float(rec.loss.value) == pytest.approx(expect, abs=1e-12)


def test_default_gc_weight():
    assert LossWeights().lam == 0.1
    assert LossWeights().lam2 == 0.001


def test_pull_weight_ramps_to_exact_zero():
    w = LossWeights()
    assert w.lam1(0) == 1.0
    assert w.lam1(500) == 0.5
    assert all(w.lam1(it) == 0.0 for it in (1000, 1001, 50_000))


def test_fast_mode_drops_pull_term_after_ramp(tiny_params):
    params = tiny_params(5)
    rng = np.random.default_rng(5)
    batch = Batch(rng.uniform(-1, 1, (8, 3)), rng.uniform(-1, 1, (8, 3)),
                  rng.uniform(-1, 1, (8, 3)), rng.uniform(-1, 1, (8, 3)))
    w = LossWeights()
    early = total_loss("fast", params, batch, w, it=10)
    late = total_loss("fast", params, batch, w, it=1001)
    assert float(late.terms["pull"].value) == 0.0
    emd, eik = float(late.terms["emd"].value), float(late.terms["eik"].value)
    assert float(late.loss.value) == pytest.approx(emd + 0.001 * eik, abs=1e-12)
    pl = float(early.terms["pull"].value)
    assert float(early.loss.value) == pytest.approx(emd + 0.99 * pl + 0.001 * eik, abs=1e-12)


def test_total_loss_vanishes_on_exact_field_and_clean_matched_batch():
    params = plane_field(offset=0.1)
    q = np.random.default_rng(6).uniform(-1, 1, (30, 3))
    targets = q.copy()
    targets[:, 2] = 0.1
    rec = total_loss("mlp", params, Batch(q, targets), LossWeights(), it=0)
    assert float(rec.loss.value) == pytest.approx(0.0, abs=1e-12)


def test_degenerate_queries_are_dropped_with_matching_targets():
    params = constant_field(0.2)
    params.arrays["mlp.W1"][0, 0] = 1.0
    params.arrays["mlp.W0"][:] = 0.0
    params.arrays["mlp.W0"][0, 0] = 1.0  # f depends on x only through softplus(100 x): flat for x << 0
    q = np.array([[-5.0, 0, 0], [0.3, 0, 0], [0.5, 0.1, 0]])
    rec = total_loss("mlp", params, Batch(q, q + 0.01), LossWeights(), it=0)
    assert rec.skipped == 1
