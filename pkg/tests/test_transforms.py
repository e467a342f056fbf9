import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import bilinear_loop, blur_semigroup_error
from taconv.basis import BasisSpec, eval_basis, make_grid, synthesize_kernel
from taconv.transforms import (KINDS, TransformSpec, apply_transform, blur_basis, build_transform_bank,
                               circle_mask, default_branch_specs, displace_elastic,
                               displace_rotation_scaling, gaussian_blur, gaussian_density_1d,
                               gaussian_density_2d, gaussian_kernel_1d, identity_field, line_mask,
                               make_bank, noise_basis, occlude_basis, resample_bilinear, sample_lines,
                               snow_basis)

BASE = eval_basis(BasisSpec())
GRID = make_grid(5)


def zero_intensity(kind):
    if kind == "rotation_scaling":
        return TransformSpec(kind, alpha=0.0, theta=0.7)
    if kind in ("elastic", "gaussian_noise"):
        return TransformSpec(kind, alpha=0.0, sigma=1.0, seed=3)
    if kind == "gaussian_blur":
        return TransformSpec(kind, sigma=0.0)
    if kind == "object_occlusion":
        return TransformSpec(kind, radius=0.0, seed=3)
    return TransformSpec(kind, n_lines=0, seed=3)


# --- spec ---------------------------------------------------------------------

def test_spec_validation():
    with pytest.raises(ValueError):
        TransformSpec("swirl")
    with pytest.raises(ValueError):
        TransformSpec("elastic", alpha=-0.1)
    with pytest.raises(ValueError):
        TransformSpec("elastic", alpha=0.1, sigma=0.0)
    with pytest.raises(ValueError):
        TransformSpec("snow", slope_range=(2, 2))
    s = TransformSpec("snow", n_lines=3, slope_range=(-1, 4), seed=9)
    assert TransformSpec.from_dict(s.to_dict()) == s


@pytest.mark.parametrize("kind", KINDS)
def test_zero_intensity_is_exact_identity(kind):
    spec = zero_intensity(kind)
    assert spec.is_identity
    np.testing.assert_array_equal(apply_transform(BASE, spec), BASE)


# --- rotation-scaling ------------------------------------------------------------

def test_rotation_scaling_fields():
    x, y = GRID
    fx, fy = displace_rotation_scaling(GRID, 0.0, 1.1)
    np.testing.assert_array_equal(fx, x)
    np.testing.assert_array_equal(fy, y)
    a = 0.3
    fx, fy = displace_rotation_scaling(GRID, a, 0.0)
    np.testing.assert_array_equal(fx, (1 + a) * x)
    np.testing.assert_array_equal(fy, (1 + a) * y)
    fx, fy = displace_rotation_scaling(GRID, a, math.pi / 2)
    np.testing.assert_allclose(fx, x + a * y, atol=1e-15)
    np.testing.assert_allclose(fy, y - a * x, atol=1e-15)
    assert fx[2, 2] == 0 and fy[2, 2] == 0


# --- elastic ------------------------------------------------------------------------

def test_elastic_zero_alpha_identity():
    fx, fy = displace_elastic(GRID, 0.0, 1.0, np.random.default_rng(0))
    np.testing.assert_array_equal(fx, GRID[0])
    np.testing.assert_array_equal(fy, GRID[1])


def test_elastic_determinism():
    a = displace_elastic(GRID, 0.4, 1.0, np.random.default_rng(11))
    b = displace_elastic(GRID, 0.4, 1.0, np.random.default_rng(11))
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


@pytest.mark.parametrize("seed", range(5))
def test_elastic_displacement_bound(seed):
    alpha, sigma = 0.2, 1.0
    x, y = GRID
    # oracle: redraw the anchor shifts and fit the affine map directly
    shift = np.random.default_rng(seed).uniform(-alpha, alpha, size=(3, 2))
    src = np.array([[-2.0, -2.0], [2.0, -2.0], [-2.0, 2.0]])
    m = np.linalg.solve(np.column_stack([src, np.ones(3)]), shift)
    ax = x * m[0, 0] + y * m[1, 0] + m[2, 0]
    ay = x * m[0, 1] + y * m[1, 1] + m[2, 1]
    peak = 1 / math.sqrt(2 * math.pi * sigma ** 2)
    fx, fy = displace_elastic(GRID, alpha, sigma, np.random.default_rng(seed))
    assert np.max(np.abs(fx - x)) <= np.max(np.abs(ax)) + alpha * peak + 1e-12
    assert np.max(np.abs(fy - y)) <= np.max(np.abs(ay)) + alpha * peak + 1e-12
    assert np.max(np.abs(fx - x)) > 0


def test_elastic_composition_matches_direct_evaluation():
    """Where affine targets land on grid nodes, the bump is read without interpolation."""
    alpha, sigma = 0.5, 1.0
    anchors = np.array([[-2.0, -2.0], [2.0, -2.0], [-2.0, 2.0]])

    class FixedShift:
        def uniform(self, lo, hi, size):
            return np.zeros(size)

    fx, fy = displace_elastic(GRID, alpha, sigma, FixedShift(), anchors=anchors)
    x, y = GRID
    np.testing.assert_allclose(fx, x + alpha * gaussian_density_1d(x, sigma), atol=1e-15)
    np.testing.assert_allclose(fy, y + alpha * gaussian_density_1d(y, sigma), atol=1e-15)


def test_elastic_collinear_anchors_retry_then_fail():
    from taconv.errors import NumericalError

    class Collinear:
        def uniform(self, lo, hi, size):
            return np.array([[0.0, 0.0], [0.0, 0.0], [4.0, -4.0]])    # third anchor lands on the first two's line

    with pytest.raises(NumericalError, match="collinear"):
        displace_elastic(GRID, 0.5, 1.0, Collinear())


def test_elastic_recenter_preserves_centre():
    fx, fy = displace_elastic(GRID, 0.4, 1.0, np.random.default_rng(2), recenter=True)
    assert abs(fx[2, 2]) < 1e-12 and abs(fy[2, 2]) < 1e-12


# --- bilinear resampling ------------------------------------------------------------

def test_resample_identity_and_constant():
    f = np.random.default_rng(0).standard_normal((5, 5))
    np.testing.assert_array_equal(resample_bilinear(f, identity_field(GRID)), f)
    field = displace_rotation_scaling(GRID, -0.2, 0.3)       # contracts toward the centre
    inside = (np.abs(field[0]) <= 2) & (np.abs(field[1]) <= 2)
    out = resample_bilinear(np.full((5, 5), 3.0), field)
    np.testing.assert_allclose(out[inside], 3.0, atol=1e-14)


def test_resample_matches_loop_oracle():
    rng = np.random.default_rng(1)
    f = rng.standard_normal((5, 5))
    fx, fy = GRID[0] + rng.uniform(-1.5, 1.5, (5, 5)), GRID[1] + rng.uniform(-1.5, 1.5, (5, 5))
    out = resample_bilinear(f, (fx, fy))
    np.testing.assert_allclose(out, bilinear_loop(f, fy + 2, fx + 2), atol=1e-14)


def test_resample_linearity():
    rng = np.random.default_rng(2)
    f, g = rng.standard_normal((5, 5)), rng.standard_normal((5, 5))
    field = displace_elastic(GRID, 0.6, 1.0, rng)
    lhs = resample_bilinear(2.5 * f - 0.3 * g, field)
    rhs = 2.5 * resample_bilinear(f, field) - 0.3 * resample_bilinear(g, field)
    assert np.max(np.abs(lhs - rhs)) < 1e-12


# --- blur -----------------------------------------------------------------------------

def test_blur_kernel_support():
    assert len(gaussian_kernel_1d(1.0)) == 7
    assert len(gaussian_kernel_1d(0.5)) == 3
    assert len(gaussian_kernel_1d(0.4)) == 3
    assert gaussian_kernel_1d(1.3).sum() == pytest.approx(1.0, abs=1e-15)


def test_blur_tiny_sigma_identity():
    np.testing.assert_array_equal(blur_basis(BASE, 5e-7), BASE)


def test_blur_semigroup():
    grid = make_grid(15)
    g1 = gaussian_density_2d(grid, 1.0)
    err = blur_semigroup_error(gaussian_blur, g1, 1.0, 1.0)
    target = gaussian_density_2d(grid, math.sqrt(2.0))
    direct = np.linalg.norm(gaussian_blur(g1, 1.0) - target) / np.linalg.norm(target)
    assert direct < 0.02
    assert err < 0.05


def test_blur_loses_mass_only_to_crop():
    f = np.abs(np.random.default_rng(3).standard_normal((5, 5)))
    assert gaussian_blur(f, 1.2).sum() <= f.sum() + 1e-12
    big = np.zeros((21, 21))
    big[10, 10] = 1.0
    assert gaussian_blur(big, 1.0).sum() == pytest.approx(1.0, abs=1e-12)


# --- noise, occlusion, snow --------------------------------------------------------

def test_noise_bump():
    np.testing.assert_array_equal(noise_basis(BASE, 0.0, 1.0), BASE)
    out = noise_basis(np.zeros((5, 5)), 0.7, 1.0)
    np.testing.assert_allclose(out, 0.7 * gaussian_density_2d(GRID, 1.0), atol=0)
    assert np.argmax(out) == 12
    rng = np.random.default_rng(4)
    f, g = rng.standard_normal((5, 5)), rng.standard_normal((5, 5))
    np.testing.assert_allclose(noise_basis(f, 0.7, 1.0) - f, noise_basis(g, 0.7, 1.0) - g, atol=1e-15)


def _distance_scan(k, centre, radius):
    count = 0
    c = (k - 1) // 2
    for r in range(k):
        for q in range(k):
            if (q - c - centre[0]) ** 2 + (r - c - centre[1]) ** 2 < radius ** 2:
                count += 1
    return count


def test_occlusion_counts_match_distance_scan():
    rng = np.random.default_rng(5)
    for _ in range(30):
        centre = (int(rng.integers(-2, 3)), int(rng.integers(-2, 3)))
        radius = float(rng.uniform(0, 4))
        out = occlude_basis(np.ones((5, 5)), radius, rng, centre=centre)
        assert int((out == 0).sum()) == _distance_scan(5, centre, radius)


def test_occlusion_extremes():
    f = np.ones((5, 5))
    assert (occlude_basis(f, 0.0, np.random.default_rng(0)) == 0).sum() <= 1
    assert np.all(occlude_basis(f, 5 * math.sqrt(2), np.random.default_rng(0)) == 0)


def test_occlusion_centre_is_a_grid_point():
    seen = set()
    for seed in range(40):
        out = occlude_basis(np.ones((5, 5)), 0.5, np.random.default_rng(seed))
        (r,), (c,) = np.nonzero(out == 0)
        seen.add((r, c))
    assert len(seen) > 10


def _raster_oracle(shape, lines):
    mask = np.zeros(shape, dtype=bool)
    for r0, c0, s, length in lines:
        for t in range(length):
            if abs(s) <= 1:
                r, c = r0 + math.floor(s * t + 0.5), c0 + t
            else:
                r, c = r0 + t, c0 + math.floor(t / s + 0.5)
            if 0 <= r < shape[0] and 0 <= c < shape[1]:
                mask[r, c] = True
    return mask


def test_snow_rasterization_matches_oracle():
    rng = np.random.default_rng(6)
    for _ in range(50):
        lines = sample_lines(rng, (9, 9), 3, (-3, 4), 6)
        np.testing.assert_array_equal(line_mask((9, 9), lines), _raster_oracle((9, 9), lines))


def test_snow_basics():
    f = np.ones((5, 5))
    np.testing.assert_array_equal(snow_basis(f, 0, (-2, 3), np.random.default_rng(0)), f)
    a = snow_basis(f, 2, (-2, 3), np.random.default_rng(9))
    b = snow_basis(f, 2, (-2, 3), np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)
    assert (a == 0).sum() >= 1
    slopes = {sample_lines(np.random.default_rng(s), (5, 5), 1, (-2, 3), 5)[0][2] for s in range(200)}
    assert slopes == {-2, -1, 0, 1, 2}


def test_circle_mask_strict():
    m = circle_mask(GRID, (0.0, 0.0), 1.0)
    assert m.sum() == 1


# --- banks and commutation -------------------------------------------------------

def _strong_spec(kind, seed=0):
    if kind == "rotation_scaling":
        return TransformSpec(kind, alpha=0.3, theta=0.9)
    if kind == "elastic":
        return TransformSpec(kind, alpha=0.6, sigma=1.0, seed=seed)
    if kind == "gaussian_blur":
        return TransformSpec(kind, sigma=0.8)
    if kind == "gaussian_noise":
        return TransformSpec(kind, alpha=0.8, sigma=1.0)
    if kind == "object_occlusion":
        return TransformSpec(kind, radius=1.6, seed=seed)
    return TransformSpec(kind, n_lines=2, seed=seed)


@pytest.mark.parametrize("kind", [k for k in KINDS if k != "gaussian_noise"])
def test_transform_commutes_with_synthesis(kind):
    rng = np.random.default_rng(7)
    for seed in range(3):
        spec = _strong_spec(kind, seed)
        w = rng.standard_normal(25)
        lhs = apply_transform(synthesize_kernel(w, BASE), spec)
        rhs = synthesize_kernel(w, apply_transform(BASE, spec))
        assert np.max(np.abs(lhs - rhs)) < 1e-10


def test_noise_commutation_difference_is_the_bump():
    spec = _strong_spec("gaussian_noise")
    w = np.random.default_rng(8).standard_normal(25)
    diff = apply_transform(synthesize_kernel(w, BASE), spec) - synthesize_kernel(w, apply_transform(BASE, spec))
    bump = spec.alpha * gaussian_density_2d(GRID, spec.sigma)
    np.testing.assert_allclose(diff, (1 - w.sum()) * bump, atol=1e-12)


def test_rotation_scaling_bank_commutation():
    bank = make_bank("rotation_scaling", BasisSpec(), n_branches=3)
    assert bank.n_branches == 4
    w = np.random.default_rng(9).standard_normal(25)
    kern = synthesize_kernel(w, BASE)
    for b, spec in enumerate(bank.branch_specs, start=1):
        direct = apply_transform(kern, spec)
        np.testing.assert_allclose(direct, synthesize_kernel(w, bank.branches[b]), atol=1e-10)


def test_bank_structure():
    single = build_transform_bank(BASE, [])
    assert single.n_branches == 1
    np.testing.assert_array_equal(single.branches[0], BASE)
    zero = build_transform_bank(BASE, [TransformSpec("elastic", alpha=0.0, seed=s) for s in range(3)])
    for b in range(3):
        np.testing.assert_array_equal(zero.branches[b + 1], BASE)
    with pytest.raises(ValueError, match="one kind"):
        build_transform_bank(BASE, [TransformSpec("elastic", alpha=0.1), TransformSpec("gaussian_blur", sigma=1)])


@pytest.mark.parametrize("kind", KINDS)
def test_default_banks_deterministic_and_nontrivial(kind):
    a = make_bank(kind, BasisSpec(), seed=4)
    b = make_bank(kind, BasisSpec(), seed=4)
    np.testing.assert_array_equal(a.branches, b.branches)
    np.testing.assert_array_equal(a.branches[0], BASE)
    assert a.n_branches == 5 and a.kind == kind
    for br in a.branches[1:]:
        assert np.max(np.abs(br - BASE)) > 1e-3
    assert len(default_branch_specs(kind)) == 4


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(KINDS), st.integers(0, 1000))
def test_commutation_property(kind, seed):
    spec = _strong_spec(kind, seed)
    w = np.random.default_rng(seed).standard_normal(25)
    diff = apply_transform(synthesize_kernel(w, BASE), spec) - synthesize_kernel(w, apply_transform(BASE, spec))
    expected = 0.0
    if kind == "gaussian_noise":
        expected = (1 - w.sum()) * spec.alpha * gaussian_density_2d(GRID, spec.sigma)
    assert np.max(np.abs(diff - expected)) < 1e-10
