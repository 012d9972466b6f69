import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from radiprior.autodiff import GradientTape, finite_diff_gradient, value_of
from radiprior.materials import (BurleyParams, ConstantField, GridField, Material, NeuralField, burley_eval,
                                 eval_brdf, field_from_json, field_query, logit, sample_brdf)
from radiprior.neuralfield import HashGridConfig

INV_PI = 1 / np.pi

# Independent arbitrary-precision evaluations of the Burley diffuse formula
# (40-digit mpmath scratch computation, frozen here).
GOLDEN_GRAZING_RETRO = 0.3963014004614147   # albedo 0.5, roughness 1, theta_i = theta_o = 80 deg, w_i = w_o
# hemispherical albedo / albedo by 2D adaptive quadrature, keyed (roughness, theta_o in degrees)
QUAD_ALBEDO = {(0.0, 0): 0.97619048, (0.0, 60): 0.9609375, (0.5, 80): 1.0253878, (1.0, 0): 1.0357143,
               (1.0, 60): 1.0569041, (1.0, 80): 1.2767314, (1.0, 89): 1.5236104}


def _dir(theta_deg, phi_deg=0.0):
    t, p = np.radians(theta_deg), np.radians(phi_deg)
    return np.array([[np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)]])


def _f(albedo, rough, wi, wo):
    return value_of(eval_brdf(BurleyParams(np.array(albedo, float), np.array(rough, float)), wi, wo))


# ---------------------------------------------------------------------------
# fields


def test_constant_field_returns_value():
    fld = ConstantField(0.7)
    x = np.random.default_rng(0).uniform(-5, 5, (20, 3))
    np.testing.assert_allclose(value_of(field_query(fld, x)), 0.7)
    opt = ConstantField(0.7, optimize=True)
    np.testing.assert_allclose(value_of(field_query(opt, x)), 0.7, rtol=1e-12)


def test_grid_midpoint_interpolation():
    g = GridField((2, 1, 1), values=np.array([0.0, 1.0]).reshape(2, 1, 1, 1))
    g.bounds = (np.zeros(3), np.ones(3))
    raw = value_of(g.raw_query(np.array([[0.5, 0.5, 0.5]])))
    assert raw[0, 0] == pytest.approx(0.5)


def test_grid_gradient_equals_interpolation_weights():
    rng = np.random.default_rng(1)
    g = GridField((3, 2, 4), channels=1, values=rng.normal(size=(3, 2, 4, 1)))
    g.bounds = (np.zeros(3), np.ones(3))
    x = np.array([[0.3, 0.8, 0.55]])
    tape = GradientTape()
    grad = tape.backward(g.raw_query(x, tape))[g.name].reshape(-1)
    idx, wts = g.corner_weights(x)
    expect = np.zeros(grad.size)
    np.add.at(expect, idx[0], wts[0])
    np.testing.assert_allclose(grad, expect, atol=1e-14)
    base = g.param.data.copy()

    def f(v, k):
        d = base.copy().reshape(-1)
        d[k] = v[0]
        g.param.data = d.reshape(base.shape)
        return float(value_of(g.raw_query(x))[0, 0])
    for k in np.unique(idx[0]):
        fd = finite_diff_gradient(lambda v: f(v, k), np.array([base.reshape(-1)[k]]), 1e-6)[0]
        assert grad[k] == pytest.approx(fd, abs=1e-8)
    g.param.data = base


def test_grid_queries_clamp_outside_bounds():
    g = GridField((2, 2, 2), values=np.arange(8.0).reshape(2, 2, 2, 1))
    g.bounds = (np.zeros(3), np.ones(3))
    inside = value_of(g.raw_query(np.array([[1.0, 1.0, 1.0], [0.0, 0.0, 0.0]])))
    outside = value_of(g.raw_query(np.array([[3.0, 7.0, 1.5], [-2.0, -1.0, -9.0]])))
    np.testing.assert_allclose(inside, outside)


def test_grid_resolution_validated():
    with pytest.raises(ValueError):
        GridField((0, 2, 2))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=8, max_size=8), st.integers(0, 2 ** 31))
def test_squashed_fields_stay_in_unit_interval(raw, seed):
    g = GridField((2, 2, 2), values=np.array(raw).reshape(2, 2, 2, 1))
    x = np.random.default_rng(seed).uniform(-1, 2, (16, 3))
    v = value_of(g.query(x))
    assert np.all((v >= 0) & (v <= 1))


def test_neural_field_initial_value_and_range():
    f = NeuralField(channels=3, init=0.3, hash_config=HashGridConfig.desk(levels=2, table_size=64), hidden_width=8)
    x = np.random.default_rng(2).uniform(0, 1, (64, 3))
    v = value_of(f.query(x))
    np.testing.assert_allclose(v, 0.3, atol=0.02)
    assert np.all((v > 0) & (v < 1))
    assert len(f.parameters()) > 0


def test_field_from_json_kinds():
    assert isinstance(field_from_json(0.4, "a", 3), ConstantField)
    g = field_from_json({"kind": "grid", "resolution": [4, 4, 4]}, "g", 3)
    assert g.param.data.shape == (4, 4, 4, 3) and g.optimize
    with pytest.raises(ValueError):
        field_from_json({"kind": "voxels"}, "x", 1)


def test_logit_inverts_sigmoid():
    p = np.linspace(0.01, 0.99, 17)
    np.testing.assert_allclose(1 / (1 + np.exp(-logit(p))), p, rtol=1e-12)


# ---------------------------------------------------------------------------
# BRDF


def test_normal_incidence_value():
    n = np.array([[0.0, 0.0, 1.0]])
    for r in (0.0, 0.3, 1.0):
        np.testing.assert_allclose(_f([0.5, 0.5, 0.5], r, n, n), 0.5 / np.pi, rtol=1e-14)


def test_zero_albedo_is_black():
    rng = np.random.default_rng(3)
    wi = rng.normal(size=(50, 3)); wi[:, 2] = np.abs(wi[:, 2])
    wo = rng.normal(size=(50, 3)); wo[:, 2] = np.abs(wo[:, 2])
    wi /= np.linalg.norm(wi, axis=1, keepdims=True)
    wo /= np.linalg.norm(wo, axis=1, keepdims=True)
    np.testing.assert_array_equal(_f([0, 0, 0], 0.7, wi, wo), 0.0)


def test_grazing_retroreflection_golden():
    w = _dir(80.0)
    np.testing.assert_allclose(_f([0.5, 0.5, 0.5], 1.0, w, w), GOLDEN_GRAZING_RETRO, rtol=1e-13)


def test_below_horizon_is_zero():
    assert np.all(_f([0.8] * 3, 0.5, _dir(100.0), _dir(10.0)) == 0)
    assert np.all(_f([0.8] * 3, 0.5, _dir(10.0), _dir(95.0)) == 0)


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 89.9), st.floats(0, 360), st.floats(0, 89.9), st.floats(0, 360), st.floats(0, 1))
def test_helmholtz_reciprocity(ti, pi_, to, po, r):
    wi, wo = _dir(ti, pi_), _dir(to, po)
    np.testing.assert_allclose(_f([0.6, 0.4, 0.2], r, wi, wo), _f([0.6, 0.4, 0.2], r, wo, wi), rtol=1e-14, atol=0)


def test_roughness_derivative_matches_fd():
    rng = np.random.default_rng(4)
    a = np.array([[0.7, 0.5, 0.3]])

    def sample_dir(k):
        d = rng.normal(size=(k, 3)); d[:, 2] = np.abs(d[:, 2]) + 0.05
        return d / np.linalg.norm(d, axis=1, keepdims=True)
    wi, wo = sample_dir(100), sample_dir(100)
    h = wi + wo
    h /= np.linalg.norm(h, axis=1, keepdims=True)
    cos_d = np.einsum("ij,ij->i", wi, h)
    from radiprior.autodiff import Parameter
    for r0 in (0.2, 0.5, 0.9):
        p = Parameter("r", np.full((100, 1), r0))
        tape = GradientTape()
        out = burley_eval(a, tape.watch(p), wi[:, 2], wo[:, 2], cos_d)
        g = tape.backward(out.sum(axis=1))["r"][:, 0]
        h_ = 1e-4
        fp = value_of(burley_eval(a, np.full((100, 1), r0 + h_), wi[:, 2], wo[:, 2], cos_d)).sum(axis=1)
        fm = value_of(burley_eval(a, np.full((100, 1), r0 - h_), wi[:, 2], wo[:, 2], cos_d)).sum(axis=1)
        fd = (fp - fm) / (2 * h_)
        np.testing.assert_allclose(g, fd, rtol=1e-3, atol=1e-12)


def test_sample_brdf_pdf_and_support():
    params = BurleyParams(np.array([0.8, 0.8, 0.8]), np.array(0.0))
    wi, pdf, val = sample_brdf(params, np.array([0.0, 0.0, 1.0]), np.random.default_rng(5), n=10 ** 5)
    assert np.all(wi[:, 2] >= 0)
    np.testing.assert_allclose(pdf, wi[:, 2] / np.pi)
    # density 1/pi at the normal: frequency of a small polar cap is sin^2(cap angle)
    cap = np.mean(wi[:, 2] > np.cos(np.radians(8.0)))
    expect = np.sin(np.radians(8.0)) ** 2
    assert abs(cap - expect) < 3 * np.sqrt(expect * (1 - expect) / len(wi))
    assert pdf.max() <= 1 / np.pi
    # MC hemispherical albedo vs quadrature (closed form 0.8 * (1 - 1/42) for normal w_o, roughness 0)
    est = value_of(val)[:, 0] * wi[:, 2] / pdf
    mean, err = est.mean(), est.std() / np.sqrt(len(est))
    assert abs(mean - 0.8 * QUAD_ALBEDO[(0.0, 0)]) < 3 * err


@pytest.mark.parametrize("rough,theta_o", [(0.0, 0), (0.0, 60), (0.5, 80), (1.0, 0), (1.0, 60), (1.0, 80)])
def test_energy_bound(rough, theta_o):
    params = BurleyParams(np.ones(3), np.array(rough))
    wo = _dir(theta_o)
    wi, pdf, val = sample_brdf(params, wo, np.random.default_rng(6), n=10 ** 5)
    est = value_of(val)[:, 0] * wi[:, 2] / pdf
    mean, err = est.mean(), est.std() / np.sqrt(len(est))
    assert abs(mean - QUAD_ALBEDO[(rough, theta_o)]) < 3 * err
    assert mean <= 1.3


def test_grazing_energy_exceeds_loose_bound():
    # At nearly grazing exit with roughness 1 the retro-reflection lobe reaches ~1.52x albedo.
    params = BurleyParams(np.ones(3), np.array(1.0))
    wi, pdf, val = sample_brdf(params, _dir(89.0), np.random.default_rng(7), n=10 ** 5)
    est = value_of(val)[:, 0] * wi[:, 2] / pdf
    assert abs(est.mean() - QUAD_ALBEDO[(1.0, 89)]) < 3 * est.std() / np.sqrt(len(est))


def test_diffuse_kind_is_lambertian():
    m = Material("m", "diffuse")
    assert not m.retro and m.fields() == [m.albedo]
    w = _dir(75.0)
    val = value_of(burley_eval(np.full((1, 3), 0.5), np.ones((1, 1)), w[:, 2], w[:, 2], np.ones(1), retro=False))
    np.testing.assert_allclose(val, 0.5 / np.pi)
    with pytest.raises(ValueError):
        Material("m", "glass")
