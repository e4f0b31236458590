from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from carnot_kit.algebra import load_group
from carnot_kit.group import (
    GroupPoint,
    HomogeneousNorm,
    bch_coords,
    box_norm_coords,
    calibrate_box_norm,
    conjugate_coords,
    dilate_coords,
    distance_coords,
    dynkin_plan,
    extend_horizontal,
    hom_from_horizontal,
    hom_norm,
    identity_hom,
    inverse_coords,
    q_polynomial_coords,
    sample_box_coords,
    unit_norm,
    validate_hom,
    ExtensionError,
    HomogeneousHom,
)

from oracle_bch import oracle_product


# Products computed once by the exact matrix-representation oracle
# (tests/oracle_bch.py) and frozen here.
FROZEN_PRODUCTS = [
    ("heisenberg1",
     ["-2/3", "0", "-5"], ["-1", "1", "-11/2"], ["-5/3", "1", "-65/6"]),
    ("heisenberg2",
     ["1/7", "-5/2", "-10/7", "-11/2", "-5"],
     ["6/7", "-11/4", "-11/3", "-3/7", "-4"],
     ["1", "-21/4", "-107/21", "-83/14", "-36871/2352"]),
    ("engel",
     ["6/5", "5/3", "-9/4", "-1/2"], ["5/2", "6", "7/4", "3/7"],
     ["37/10", "23/3", "61/60", "43627/12600"]),
    ("free-step2-rank3",
     ["2", "1/4", "-1/5", "-5/3", "5/2", "-2"],
     ["1/2", "-1/4", "-3/2", "-9/7", "-7/6", "-1"],
     ["5/2", "0", "-17/10", "-1097/336", "-7/60", "-257/80"]),
]


def _fr(xs):
    return np.array([float(Fraction(x)) for x in xs])


@pytest.mark.parametrize("name,p,q,z", FROZEN_PRODUCTS)
def test_product_matches_frozen_oracle(name, p, q, z):
    spec = load_group(name)
    got = bch_coords(spec, _fr(p), _fr(q))
    assert np.allclose(got, _fr(z), rtol=0, atol=1e-12)


@pytest.mark.parametrize("name", ["heisenberg1", "heisenberg2", "engel", "free-step2-rank3"])
def test_product_matches_live_oracle(name):
    import random

    spec = load_group(name)
    rnd = random.Random(20 + spec.n)
    for _ in range(4):
        p = [Fraction(rnd.randint(-8, 8), rnd.randint(1, 6)) for _ in range(spec.n)]
        q = [Fraction(rnd.randint(-8, 8), rnd.randint(1, 6)) for _ in range(spec.n)]
        want = np.array([float(c) for c in oracle_product(name, p, q)])
        got = bch_coords(spec, np.array([float(c) for c in p]),
                         np.array([float(c) for c in q]))
        assert np.allclose(got, want, rtol=1e-13, atol=1e-13)


def test_dynkin_plan_low_weight_terms():
    plan = dict((w, c) for c, w in dynkin_plan(3))
    # weight 2 collapses to [X, Y]/2 split over the two surviving words
    assert plan[(0, 1)] + -plan[(1, 0)] == pytest.approx(0.5)
    for word in plan:
        assert word[-1] != word[-2]
        assert 2 <= len(word) <= 3


def test_identity_and_inverse_exact():
    spec = load_group("engel")
    rng = np.random.default_rng(3)
    p = sample_box_coords(spec, rng, 200)
    e = np.zeros(spec.n)
    assert np.array_equal(bch_coords(spec, p, np.broadcast_to(e, p.shape)), p)
    assert np.array_equal(bch_coords(spec, np.broadcast_to(e, p.shape), p), p)
    pp = bch_coords(spec, p, inverse_coords(spec, p))
    assert np.abs(pp).max() < 1e-12


def test_associativity_sampled():
    for name in ["heisenberg1", "engel", "free-step2-rank3"]:
        spec = load_group(name)
        rng = np.random.default_rng(5)
        p, q, r = (sample_box_coords(spec, rng, 500) for _ in range(3))
        left = bch_coords(spec, bch_coords(spec, p, q), r)
        right = bch_coords(spec, p, bch_coords(spec, q, r))
        assert np.abs(left - right).max() < 1e-12


def test_group_point_wrapper():
    spec = load_group("heisenberg1")
    a = GroupPoint(spec, [1.0, 0.0, 0.0])
    b = GroupPoint(spec, [0.0, 1.0, 0.0])
    ab = a * b
    assert np.allclose(ab.coords, [1, 1, 0.5])
    assert np.allclose((ab * ab.inv()).coords, 0.0)


def test_q_polynomial_structure():
    # strata-triangular: component i depends only on strata below i
    spec = load_group("engel")
    rng = np.random.default_rng(9)
    p = sample_box_coords(spec, rng, 300)
    q = sample_box_coords(spec, rng, 300)
    base = q_polynomial_coords(spec, p, q)
    assert np.array_equal(base[:, spec.stratum_slice(1)], np.zeros((300, 2)))
    for j in (2, 3):
        bumped_p = p.copy()
        bumped_q = q.copy()
        sl = slice(spec.offsets[j - 1], spec.n)
        bumped_p[:, sl] += rng.normal(size=(300, spec.n - spec.offsets[j - 1]))
        bumped_q[:, sl] += rng.normal(size=(300, spec.n - spec.offsets[j - 1]))
        again = q_polynomial_coords(spec, bumped_p, bumped_q)
        lower = spec.stratum_slice(j).start
        assert np.array_equal(again[:, :lower], base[:, :lower])


def test_q_polynomial_homogeneity_and_symmetry():
    for name in ["heisenberg1", "engel", "free-step2-rank3"]:
        spec = load_group(name)
        rng = np.random.default_rng(13)
        p = sample_box_coords(spec, rng, 400)
        q = sample_box_coords(spec, rng, 400)
        lam = 1.7
        scaled = q_polynomial_coords(spec, dilate_coords(spec, p, lam),
                                     dilate_coords(spec, q, lam))
        want = q_polynomial_coords(spec, p, q) * np.concatenate(
            [np.full(d, lam ** j) for j, d in enumerate(spec.strata_dims, 1)])
        assert np.abs(scaled - want).max() < 1e-10
        sym = q_polynomial_coords(spec, -q, -p)
        assert np.abs(q_polynomial_coords(spec, p, q) + sym).max() < 1e-12


def test_dilation_morphism_and_inverse():
    spec = load_group("free-step2-rank3")
    rng = np.random.default_rng(21)
    p = sample_box_coords(spec, rng, 200)
    q = sample_box_coords(spec, rng, 200)
    lam = 0.37
    lhs = dilate_coords(spec, bch_coords(spec, p, q), lam)
    rhs = bch_coords(spec, dilate_coords(spec, p, lam), dilate_coords(spec, q, lam))
    assert np.abs(lhs - rhs).max() < 1e-12
    assert np.array_equal(dilate_coords(spec, p, -1.0)[:, :3], -p[:, :3])


# ------------------------------------------------------------- norms


def test_box_norm_dyadic_homogeneity_bitwise():
    for name in ["heisenberg1", "engel"]:
        spec = load_group(name)
        norm = HomogeneousNorm(spec, (1.0, 0.25, 0.125)[: spec.step])
        rng = np.random.default_rng(2)
        p = sample_box_coords(spec, rng, 1000)
        for lam in (2.0, 8.0, 0.5, 0.0625):
            lhs = box_norm_coords(norm, dilate_coords(spec, p, lam))
            assert np.array_equal(lhs, lam * box_norm_coords(norm, p))


def test_box_norm_symmetry_bitwise():
    spec = load_group("engel")
    norm = unit_norm(spec)
    rng = np.random.default_rng(4)
    p = sample_box_coords(spec, rng, 1000)
    assert np.array_equal(box_norm_coords(norm, -p), box_norm_coords(norm, p))


def test_box_norm_general_homogeneity():
    spec = load_group("engel")
    norm = HomogeneousNorm(spec, (1.0, 0.3, 0.2))
    rng = np.random.default_rng(6)
    p = sample_box_coords(spec, rng, 500)
    for lam in (0.123, 3.7):
        lhs = box_norm_coords(norm, dilate_coords(spec, p, lam))
        assert np.allclose(lhs, lam * box_norm_coords(norm, p), rtol=1e-12)


def test_box_norm_zero_only_at_identity():
    spec = load_group("heisenberg1")
    norm = unit_norm(spec)
    assert box_norm_coords(norm, np.zeros(3)) == 0.0
    assert box_norm_coords(norm, np.array([0.0, 0.0, 1e-30])) > 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1))
def test_left_invariance_property(seed):
    spec = load_group("heisenberg1")
    norm = HomogeneousNorm(spec, (1.0, 0.5))
    rng = np.random.default_rng(seed)
    z, x, y = sample_box_coords(spec, rng, 3)
    d1 = distance_coords(norm, x, y)
    d2 = distance_coords(norm, bch_coords(spec, z, x), bch_coords(spec, z, y))
    assert d2 == pytest.approx(d1, rel=1e-9, abs=1e-12)


def test_calibrate_heisenberg():
    spec = load_group("heisenberg1")
    norm = calibrate_box_norm(spec, seed=0, search_pairs=4000, certify_pairs=100_000)
    cert = norm.certificate
    assert cert["max_margin"] <= 0.0
    assert 0 < norm.epsilons[1] <= 1.0
    assert cert["pi1_lipschitz"] <= 1.0 + 1e-9


def test_calibrated_norm_triangle_fresh_sample():
    spec = load_group("heisenberg1")
    norm = calibrate_box_norm(spec, seed=0, search_pairs=4000, certify_pairs=50_000)
    rng = np.random.default_rng(999)
    x = sample_box_coords(spec, rng, 20_000)
    y = sample_box_coords(spec, rng, 20_000)
    lhs = box_norm_coords(norm, bch_coords(spec, x, y))
    rhs = box_norm_coords(norm, x) + box_norm_coords(norm, y)
    assert (lhs <= rhs + 1e-12).all()


def test_euclidean_norm_needs_no_shrinking():
    spec = load_group("euclidean2")
    norm = calibrate_box_norm(spec, seed=1, search_pairs=1000, certify_pairs=10_000)
    assert norm.epsilons == (1.0,)
    assert norm.certificate["max_margin"] <= 0.0


def test_conjugate_is_inner():
    spec = load_group("engel")
    rng = np.random.default_rng(8)
    g, x = sample_box_coords(spec, rng, 2)
    got = conjugate_coords(spec, g, x)
    want = bch_coords(spec, bch_coords(spec, -g, x), g)
    assert np.array_equal(got, want)


# -------------------------------------------------------------- homs


def test_identity_hom_residual_exact_zero():
    spec = load_group("heisenberg1")
    rep = validate_hom(identity_hom(spec), pair_count=500, seed=2)
    assert rep["morphism_residual"] == 0.0
    assert rep["dilation_residual"] == 0.0
    assert rep["valid"]


def test_dilation_as_hom():
    spec = load_group("heisenberg1")
    hom = HomogeneousHom(spec, spec, (2.0 * np.eye(2), 4.0 * np.eye(1)))
    rep = validate_hom(hom, pair_count=500, seed=3)
    assert rep["morphism_residual"] == 0.0
    assert rep["valid"]


def test_broken_vertical_block_fails():
    spec = load_group("heisenberg1")
    hom = HomogeneousHom(spec, spec, (2.0 * np.eye(2), 3.0 * np.eye(1)))
    rep = validate_hom(hom, pair_count=500, seed=3)
    assert rep["morphism_residual"] > 0.1
    assert not rep["valid"]


def test_extend_horizontal_heisenberg():
    spec = load_group("heisenberg1")
    a1 = np.array([[1.0, 2.0], [0.25, -3.0]])
    hom = hom_from_horizontal(spec, spec, a1)
    det = np.linalg.det(a1)
    assert np.allclose(hom.blocks[1], [[det]], atol=1e-12)
    assert validate_hom(hom, pair_count=400, seed=5)["valid"]


def test_extend_horizontal_engel():
    spec = load_group("engel")
    a1 = np.array([[1.5, 0.0], [1.0, 2.0]])
    hom = hom_from_horizontal(spec, spec, a1)
    assert validate_hom(hom, pair_count=400, seed=6)["valid"]


def test_extension_defect_raises_for_nonsymplectic_block():
    # in heisenberg2 the bracket pairing is symplectic; a generic V_1
    # block sends some commuting pairs to non-commuting ones
    spec = load_group("heisenberg2")
    rng = np.random.default_rng(7)
    a1 = rng.normal(size=(4, 4))
    blocks, defect = extend_horizontal(spec, spec, a1)
    assert defect > 1e-6
    with pytest.raises(ExtensionError):
        hom_from_horizontal(spec, spec, a1)


def test_abelianization_hom():
    spec = load_group("heisenberg1")
    tgt = load_group("euclidean2")
    hom = HomogeneousHom(spec, tgt, (np.eye(2),))
    rep = validate_hom(hom, pair_count=500, seed=9)
    assert rep["valid"]
    p = np.array([1.0, 2.0, 3.0])
    assert np.array_equal(hom.apply_coords(p), [1.0, 2.0])


def test_hom_norm_identity():
    spec = load_group("heisenberg1")
    norm = HomogeneousNorm(spec, (1.0, 0.5))
    val = hom_norm(identity_hom(spec), norm, norm, samples=2000, seed=1)
    assert val == pytest.approx(1.0, abs=1e-6)
