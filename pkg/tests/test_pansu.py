from types import SimpleNamespace

import numpy as np
import pytest

from carnot_kit.algebra import load_group
from carnot_kit.group import (
    ExtensionError,
    HomogeneousHom,
    HomogeneousNorm,
    bch_coords,
    dilate_coords,
    hom_from_horizontal,
    identity_hom,
    sample_box_coords,
    unit_norm,
)
from carnot_kit.pansu import (
    MapSampler,
    ResidualCurve,
    assemble_differential,
    check_horizontal_differential,
    constant_sampler,
    default_directions,
    estimate_pansu_derivative,
    fragment_derivative,
    pansu_residual,
    sampler_from_hom,
)

H1 = load_group("heisenberg1")
R2 = load_group("euclidean2")


def dyadic(rng, shape, denom=8, span=16):
    return rng.integers(-span, span + 1, size=shape) / denom


def exp_flow(spec, x0, v_horizontal, times):
    full = np.zeros(spec.n)
    full[spec.stratum_slice(1)] = v_horizontal
    pts = np.stack([bch_coords(spec, x0, dilate_coords(spec, full, t)) for t in times])
    return SimpleNamespace(spec=spec, times=np.asarray(times, float), points=pts)


def test_residual_translation_identity_zero():
    g = np.array([0.5, -1.25, 2.0])
    f = sampler_from_hom(identity_hom(H1), translation=g)
    rng = np.random.default_rng(0)
    x0 = dyadic(rng, 3)
    x = x0 + np.array([0.25, 0.0, 0.0])
    r = pansu_residual(f, identity_hom(H1), x0, x[None, :])
    assert r[0] == 0.0


def test_residual_dilation_hom_zero_and_identity_mismatch():
    two = HomogeneousHom(H1, H1, (2.0 * np.eye(2), 4.0 * np.eye(1)))
    f = sampler_from_hom(two)
    x0 = np.array([0.5, 0.25, -0.125])
    sphere = np.stack([
        bch_coords(H1, x0, np.array([np.cos(a), np.sin(a), 0.0]))
        for a in np.linspace(0, 2 * np.pi, 17)[:-1]
    ])
    assert pansu_residual(f, two, x0, sphere).max() < 1e-12
    # measured against the identity the defect stays of unit size
    assert pansu_residual(f, identity_hom(H1), x0, sphere).min() > 0.3


def test_estimate_recovers_dilation_exactly():
    two = HomogeneousHom(H1, H1, (2.0 * np.eye(2), 4.0 * np.eye(1)))
    f = sampler_from_hom(two)
    hom, curve = estimate_pansu_derivative(f, np.array([0.125, -0.5, 0.25]))
    assert np.array_equal(hom.blocks[0], 2.0 * np.eye(2))
    assert np.array_equal(hom.blocks[1], 4.0 * np.eye(1))
    assert curve.residuals.max() < 1e-8
    assert curve.scales[0] > curve.scales[-1]


def test_estimate_constant_map():
    f = constant_sampler(H1, H1, value=np.array([1.0, 2.0, 3.0]))
    hom, curve = estimate_pansu_derivative(f, np.zeros(3))
    assert np.array_equal(hom.blocks[0], np.zeros((2, 2)))
    assert curve.residuals.max() == 0.0


@pytest.mark.parametrize("target_name", ["heisenberg1", "euclidean2"])
def test_estimate_recovers_random_dyadic_homs(target_name):
    target = load_group(target_name)
    rng = np.random.default_rng(42)
    for trial in range(6):
        a1 = dyadic(rng, (2, 2))
        while abs(np.linalg.det(a1)) < 1e-9:
            a1 = dyadic(rng, (2, 2))
        hom = hom_from_horizontal(H1, target, a1)
        g = dyadic(rng, target.n)
        f = sampler_from_hom(hom, translation=g)
        x0 = dyadic(rng, 3)
        fitted, curve = estimate_pansu_derivative(f, x0)
        for got, want in zip(fitted.blocks, hom.blocks):
            assert np.abs(got - want).max() < 1e-6
        assert curve.residuals.max() < 1e-8


def test_estimate_smooth_nonmorphism_slope():
    def fn(p):
        out = p.copy()
        out[..., 0] = np.sin(p[..., 0])
        return out

    f = MapSampler(H1, H1, fn, name="sin-bend")
    hom, curve = estimate_pansu_derivative(f, np.zeros(3))
    assert np.abs(hom.blocks[0] - np.eye(2)).max() < 1e-6
    slope = curve.finest_decade_slope()
    assert 0.9 <= slope <= 1.5


def test_estimate_rejects_nonextendable_block():
    spec = load_group("heisenberg2")
    rng = np.random.default_rng(3)
    mat = rng.normal(size=(5, 5))
    mat[4, :4] = 0.0
    mat[:4, 4] = 0.0

    def fn(p):
        return p @ mat.T

    f = MapSampler(spec, spec, fn, name="graded-linear")
    with pytest.raises(ExtensionError) as info:
        estimate_pansu_derivative(f, rng.normal(size=5))
    assert info.value.defect > 1e-6


def test_estimate_requires_three_decades_and_directions():
    f = sampler_from_hom(identity_hom(H1))
    with pytest.raises(Exception):
        estimate_pansu_derivative(f, np.zeros(3), scales=np.array([1.0, 0.5, 0.25]))
    with pytest.raises(Exception):
        estimate_pansu_derivative(f, np.zeros(3), directions=np.array([[1.0, 0.0]]))


def test_residual_curve_validates_scales():
    with pytest.raises(Exception):
        ResidualCurve(np.array([1.0, 1.0]), np.array([0.1, 0.1]),
                      np.zeros((2, 1)))


COMMUTATOR_WORD = [(1, 1.0), (2, 1.0), (1, -1.0), (2, -1.0)]
COMMUTATOR_WORD_ALT = [(1, 2.0), (2, 0.5), (1, -2.0), (2, -0.5)]


def test_assemble_differential_commutator():
    partials = [np.array([1.0, 0.0]), np.array([0.0, 1.0])]
    out = assemble_differential(H1, partials, COMMUTATOR_WORD)
    assert np.allclose(out, [0.0, 0.0, 1.0], atol=1e-12)
    alt = assemble_differential(H1, partials, COMMUTATOR_WORD_ALT)
    assert np.allclose(alt, out, atol=1e-12)
    flat = assemble_differential(R2, partials, COMMUTATOR_WORD)
    assert np.allclose(flat, [0.0, 0.0], atol=1e-15)
    zero = assemble_differential(H1, [np.zeros(2), np.zeros(2)], COMMUTATOR_WORD)
    assert np.array_equal(zero, np.zeros(3))


def words_for(v):
    # two independent horizontal words reaching v = (a, b, c) in H^1
    a, b, c = v

    def comm(amount):
        if amount == 0:
            return []
        s = np.sqrt(abs(amount))
        t = np.copysign(s, amount)
        return [(1, s), (2, t), (1, -s), (2, -t)]

    w1 = [(1, a), (2, b)] + comm(c - a * b / 2)
    w2 = [(2, b), (1, a)] + comm(c + a * b / 2)
    return w1, w2


def test_assemble_differential_word_independence():
    rng = np.random.default_rng(17)
    a1 = np.array([[1.0, 1.5], [-0.5, 2.0]])
    hom = hom_from_horizontal(H1, H1, a1)
    partials = [hom.blocks[0][:, 0], hom.blocks[0][:, 1]]
    for _ in range(100):
        v = rng.uniform(-2, 2, size=3)
        w1, w2 = words_for(v)
        out1 = assemble_differential(H1, partials, w1)
        out2 = assemble_differential(H1, partials, w2)
        assert np.abs(out1 - out2).max() < 1e-8
        assert np.abs(out1 - hom.apply_coords(
            np.concatenate([v[:2], [v[2]]]))).max() < 1e-8


def test_fragment_derivative_flows():
    times = np.arange(65) / 64.0
    line = exp_flow(H1, np.zeros(3), np.array([1.0, 0.0]), times)
    got = fragment_derivative(line, 0.5)
    assert np.array_equal(got, np.array([1.0, 0.0]))

    diag = exp_flow(H1, np.array([0.25, -0.5, 0.125]), np.array([1.0, 1.0]), times)
    got = fragment_derivative(diag, 0.5)
    assert np.allclose(got, [1.0, 1.0], atol=1e-12)

    # one-sided at the right endpoint
    got = fragment_derivative(line, 1.0)
    assert np.allclose(got, [1.0, 0.0], atol=1e-12)


def test_fragment_derivative_vertical_undefined():
    times = np.arange(65) / 64.0
    pts = np.zeros((65, 3))
    pts[:, 2] = times
    vert = SimpleNamespace(spec=H1, times=times, points=pts)
    assert fragment_derivative(vert, 0.5) is None


def test_fragment_derivative_domain_check():
    times = np.arange(5) / 4.0
    line = exp_flow(H1, np.zeros(3), np.array([1.0, 0.0]), times)
    with pytest.raises(Exception):
        fragment_derivative(line, 2.0)


def test_check_horizontal_differential():
    times = np.arange(65) / 64.0
    frags = [
        exp_flow(H1, np.zeros(3), np.array([1.0, 0.0]), times),
        exp_flow(H1, np.zeros(3), np.array([0.5, -0.5]), times),
    ]
    ident = sampler_from_hom(identity_hom(H1))
    two = sampler_from_hom(HomogeneousHom(H1, H1, (2 * np.eye(2), 4 * np.eye(1))))
    rep = check_horizontal_differential(2 * np.eye(2), two, ident, frags, 1e-6)
    assert rep["status"] == "pass"
    rep = check_horizontal_differential(np.eye(2), two, ident, frags, 1e-6)
    assert rep["status"] == "fail"
    assert rep["max_defect"] > 0.5

    pts = np.zeros((65, 3))
    pts[:, 2] = times
    vert = SimpleNamespace(spec=H1, times=times, points=pts)
    rep = check_horizontal_differential(np.eye(2), two, ident, [vert], 1e-6)
    assert rep["status"] == "inconclusive"


def test_map_sampler_shape_guard():
    bad = MapSampler(H1, H1, lambda p: p[..., :2])
    with pytest.raises(Exception):
        bad.evaluate(np.zeros(3))
