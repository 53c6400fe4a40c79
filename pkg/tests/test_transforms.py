import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pathrobust import autodiff as ad
from pathrobust import transforms as tr
from pathrobust.autodiff import Tensor

from oracles import assert_grads_close, finite_diff

RNG = np.random.default_rng(2024)


def random_patch(lo=0.0, hi=1.0, shape=(32, 32, 3), rng=None):
    rng = rng or RNG
    return rng.uniform(lo, hi, size=shape).astype(np.float32)


def all_descriptors():
    return [tr.make_transform(k) for k in tr.TRANSFORM_KINDS]


# -- identity at neutral -------------------------------------------------------


@pytest.mark.parametrize("kind", tr.TRANSFORM_KINDS)
def test_identity_at_neutral(kind):
    desc = tr.make_transform(kind)
    rng = np.random.default_rng(hash(kind) % 2**32)
    for _ in range(20):
        img = random_patch(rng=rng)
        out = desc.apply_np(img, desc.neutral_params())
        dev = np.abs(out - desc.preprocess(img)).max()
        assert dev <= desc.identity_tolerance, f"{kind}: {dev}"


def test_exact_identity_transforms_are_bitwise():
    for kind in ("additive", "brightness_contrast", "affine", "resolution"):
        desc = tr.make_transform(kind)
        img = random_patch()
        out = desc.apply_np(img, desc.neutral_params())
        assert np.array_equal(out, img), kind
    desc = tr.stain()
    img = random_patch()
    assert np.array_equal(desc.apply_np(img, desc.neutral_params()), np.clip(img, 1 / 255, 1.0))


# -- stain ---------------------------------------------------------------------


def test_stain_white_pixel_matches_scalar_formula():
    # pure white: OD=0 so concentrations vanish; output is 10^-(beta @ M)
    desc = tr.stain()
    img = np.ones((1, 1, 3), dtype=np.float32)
    theta = desc.neutral_params()
    theta["beta"] = np.array([0.1, 0.0, 0.0], dtype=np.float32)
    out = desc.apply_np(img, theta)[0, 0]
    expected = np.clip(
        np.power(10.0, -(np.array([0.1, 0.0, 0.0], dtype=np.float64) @ tr.STAIN_MATRIX)),
        1 / 255,
        1.0,
    )
    assert np.allclose(out, expected, atol=1e-6)


def test_stain_full_formula_against_float64_reference():
    # reference evaluates the concentration-space definition directly
    desc = tr.stain()
    rng = np.random.default_rng(5)
    img = random_patch(0.2, 0.95, rng=rng)
    alpha = np.array([1.15, 0.85, 1.05], dtype=np.float32)
    beta = np.array([0.05, -0.03, 0.08], dtype=np.float32)
    out = desc.apply_np(img, {"alpha": alpha, "beta": beta})

    p = np.clip(img.astype(np.float64), 1 / 255, 1.0)
    od = -np.log10(p).reshape(-1, 3)
    conc = od @ np.linalg.inv(tr.STAIN_MATRIX)
    od2 = (conc * alpha.astype(np.float64) + beta.astype(np.float64)) @ tr.STAIN_MATRIX
    ref = np.clip(np.power(10.0, -od2), 1 / 255, 1.0).reshape(img.shape)
    assert np.abs(out - ref).max() < 1e-5


def test_stain_alpha_gradient_matches_finite_differences():
    desc = tr.stain()
    rng = np.random.default_rng(6)
    img = random_patch(0.25, 0.75, (16, 16, 3), rng=rng).astype(np.float64)
    theta0 = {"alpha": np.array([1.05, 0.95, 1.02]), "beta": np.array([0.02, -0.02, 0.01])}

    def mean_out(alpha):
        return float(
            ad.mean(desc.apply(Tensor(img), {"alpha": Tensor(alpha), "beta": Tensor(theta0["beta"])})).data
        )

    leaves = {k: Tensor(v, requires_grad=True) for k, v in theta0.items()}
    out = desc.apply(Tensor(img), leaves)
    assert out.data.min() > 1 / 255 + 1e-4 and out.data.max() < 1 - 1e-4  # no clamp active
    ad.backward(ad.mean(out))
    assert_grads_close(leaves["alpha"].grad, finite_diff(mean_out, theta0["alpha"]))


# -- additive -------------------------------------------------------------------


def test_additive_midgray_shift_and_clamp():
    eps = 8 / 255
    desc = tr.additive(eps=eps)
    img = np.full((32, 32, 3), 0.5, dtype=np.float32)
    out = desc.apply_np(img, {"delta": np.full((32, 32, 3), eps, dtype=np.float32)})
    assert np.allclose(out, 0.5 + eps, atol=1e-7)
    img = np.ones((32, 32, 3), dtype=np.float32)
    out = desc.apply_np(img, {"delta": np.full((32, 32, 3), eps, dtype=np.float32)})
    assert np.array_equal(out, np.ones_like(img))


# -- blur ------------------------------------------------------------------------


def test_blur_constant_image_fixpoint():
    desc = tr.blur()
    img = np.full((32, 32, 3), 0.43, dtype=np.float32)
    for sigma in (tr.SIGMA_MIN, 0.8, 3.0):
        out = desc.apply_np(img, {"sigma": np.array([sigma], dtype=np.float32)})
        assert np.abs(out - img).max() <= 1e-5  # float32 dot-product resolution


def test_blur_neutral_deviation_within_tolerance():
    desc = tr.blur()
    img = random_patch()
    out = desc.apply_np(img, desc.neutral_params())
    assert np.abs(out - img).max() <= 1e-3


def test_blur_single_white_pixel_reproduces_kernel_center():
    desc = tr.blur()
    img = np.zeros((32, 32, 3), dtype=np.float32)
    img[16, 16] = 1.0
    sigma = 2.0
    out = desc.apply_np(img, {"sigma": np.array([sigma], dtype=np.float32)})
    kernel = ad.gaussian_kernel(Tensor(np.float32(sigma)), radius=9).data
    assert out[16, 16, 0] == pytest.approx(kernel[9, 9], rel=1e-5)


def test_blur_sigma_gradient_matches_finite_differences():
    desc = tr.blur()
    rng = np.random.default_rng(7)
    img = random_patch(rng=rng).astype(np.float64)
    for sigma in (0.6, 1.4, 2.6):
        s = Tensor(np.array([sigma]), requires_grad=True)
        ad.backward(ad.mean(desc.apply(Tensor(img), {"sigma": s})))
        fd = finite_diff(
            lambda v: float(ad.mean(desc.apply(Tensor(img), {"sigma": Tensor(v)})).data),
            np.array([sigma]),
        )
        assert_grads_close(s.grad, fd)


# -- jpeg -------------------------------------------------------------------------


def test_jpeg_full_quality_close_to_identity():
    desc = tr.jpeg()
    for seed in range(5):
        img = random_patch(rng=np.random.default_rng(seed))
        out = desc.apply_np(img, desc.neutral_params())
        assert np.abs(out - img).max() <= 0.02


def test_jpeg_constant_gray_within_dc_quantization_step():
    desc = tr.jpeg()
    v = np.float32(128.0 / 255.0)
    img = np.full((32, 32, 3), v, dtype=np.float32)
    out = desc.apply_np(img, {"quality": np.array([50.0], dtype=np.float32)})
    # scalar reference for one 8x8 block at q=50: S=100, Qs=floor(Q+0.5)=Q
    y = float(v) * 255.0  # gray: Y channel equals the intensity, Cb=Cr=128
    dc = 8.0 * (y - 128.0)
    q_dc = float(np.floor((tr.JPEG_QTABLE_LUMA[0, 0] * 100.0 + 50.0) / 100.0))
    rec = q_dc * np.round(dc / q_dc) / 8.0 + 128.0
    assert np.abs(out - rec / 255.0).max() <= q_dc / 2.0 / 8.0 / 255.0
    assert np.abs(out - float(v)).max() <= q_dc / 2.0 / 8.0 / 255.0
    assert out.std() <= 1e-6  # constant in, constant out


def test_jpeg_error_monotone_in_quality():
    desc = tr.jpeg()
    wins = 0
    n = 40
    for seed in range(n):
        img = random_patch(rng=np.random.default_rng(100 + seed))
        e10 = np.abs(desc.apply_np(img, {"quality": np.array([10.0], np.float32)}) - img).mean()
        e90 = np.abs(desc.apply_np(img, {"quality": np.array([90.0], np.float32)}) - img).mean()
        wins += e10 >= e90
    assert wins >= 0.95 * n


def test_jpeg_rejects_bad_dimensions():
    desc = tr.jpeg()
    with pytest.raises(ValueError, match="divisible by 8"):
        desc.apply_np(np.zeros((30, 30, 3), dtype=np.float32), desc.neutral_params())


def test_jpeg_image_gradient_is_finite_and_quality_grad_exists():
    desc = tr.jpeg()
    img = Tensor(random_patch(rng=np.random.default_rng(8)), requires_grad=True)
    q = Tensor(np.array([60.0], dtype=np.float32), requires_grad=True)
    ad.backward(ad.mean(desc.apply(img, {"quality": q})))
    assert np.isfinite(img.grad).all()
    assert q.grad is not None and np.isfinite(q.grad).all()


# -- resolution ---------------------------------------------------------------------


def test_resolution_identity_at_full_scale():
    desc = tr.resolution()
    img = random_patch()
    out = desc.apply_np(img, {"scale": np.array([1.0], dtype=np.float32)})
    assert np.array_equal(out, img)


def test_resolution_halves_contrast_of_checkerboard():
    desc = tr.resolution()
    tile = np.kron(np.indices((16, 16)).sum(axis=0) % 2, np.ones((2, 2))).astype(np.float32)
    img = np.repeat(tile[:, :, None], 3, axis=2)
    out = desc.apply_np(img, {"scale": np.array([0.5], dtype=np.float32)})
    assert out.max() - out.min() < img.max() - img.min()


def test_resolution_constant_image_fixpoint():
    desc = tr.resolution()
    img = np.full((32, 32, 3), 0.61, dtype=np.float32)
    out = desc.apply_np(img, {"scale": np.array([0.5], dtype=np.float32)})
    assert np.array_equal(out, img)


def test_resolution_is_search_only():
    assert tr.resolution().differentiable is False


# -- brightness / contrast --------------------------------------------------------


def test_brightness_contrast_arithmetic_and_clamp():
    desc = tr.brightness_contrast()
    img = np.full((8, 8, 3), 0.5, dtype=np.float32)
    out = desc.apply_np(img, {"contrast": np.array([1.2], np.float32), "brightness": np.array([0.1], np.float32)})
    assert np.allclose(out, 0.7, atol=1e-6)
    img = np.full((8, 8, 3), 0.9, dtype=np.float32)
    out = desc.apply_np(img, {"contrast": np.array([1.3], np.float32), "brightness": np.array([0.2], np.float32)})
    assert np.array_equal(out, np.ones_like(img))


def test_brightness_contrast_gradients_match_finite_differences():
    desc = tr.brightness_contrast()
    rng = np.random.default_rng(9)
    img = random_patch(0.35, 0.55, (16, 16, 3), rng=rng).astype(np.float64)
    for a0, b0 in ((0.9, 0.05), (1.1, -0.08), (1.0, 0.0)):
        theta = {"contrast": np.array([a0]), "brightness": np.array([b0])}
        leaves = {k: Tensor(v, requires_grad=True) for k, v in theta.items()}
        out = desc.apply(Tensor(img), leaves)
        assert out.data.min() > 0.0 and out.data.max() < 1.0  # clamp inactive
        ad.backward(ad.mean(out))
        for name in theta:
            fd = finite_diff(
                lambda v, name=name: float(
                    ad.mean(desc.apply(Tensor(img), {**{k: Tensor(x) for k, x in theta.items()}, name: Tensor(v)})).data
                ),
                theta[name],
            )
            assert_grads_close(leaves[name].grad, fd)


# -- affine -----------------------------------------------------------------------


def smooth_patch(rng, shape=(32, 32, 3)):
    h, w, c = shape
    yy, xx = np.mgrid[0:h, 0:w] / 16.0
    img = np.zeros(shape)
    for _ in range(4):
        fx, fy, ph = rng.uniform(0.3, 1.2), rng.uniform(0.3, 1.2), rng.uniform(0, 6.28)
        img += rng.uniform(0.05, 0.12) * np.sin(fx * xx + fy * yy + ph)[..., None]
    return (0.5 + img).clip(0.05, 0.95)


def test_affine_translation_shifts_ramp():
    desc = tr.affine()
    w = 32
    ramp = np.tile((np.arange(w) * 0.02).astype(np.float32), (32, 1))[..., None].repeat(3, axis=2)
    theta = desc.neutral_params()
    theta["tx"] = np.array([1.0], dtype=np.float32)
    out = desc.apply_np(ramp, theta)
    # inverse map: shifting content right by 1 px means sampling from x-1
    assert np.allclose(out[:, 1:-1, 0], ramp[:, 0:-2, 0], atol=1e-6)


def test_affine_phi_gradient_matches_finite_differences():
    desc = tr.affine()
    rng = np.random.default_rng(10)
    img = smooth_patch(rng)
    theta0 = {"phi": np.array([0.1]), "tx": np.array([0.7]), "ty": np.array([-0.4]), "zoom": np.array([1.03])}

    leaves = {k: Tensor(v, requires_grad=True) for k, v in theta0.items()}
    ad.backward(ad.mean(desc.apply(Tensor(img), leaves)))
    for name in ("phi", "tx", "ty", "zoom"):
        fd = finite_diff(
            lambda v, name=name: float(
                ad.mean(desc.apply(Tensor(img), {**{k: Tensor(x) for k, x in theta0.items()}, name: Tensor(v)})).data
            ),
            theta0[name],
            h=1e-5,
        )
        assert_grads_close(leaves[name].grad, fd, rtol=1e-3)


# -- projection ---------------------------------------------------------------------


def test_project_inside_box_is_noop():
    desc = tr.stain()
    theta = {"alpha": np.array([1.0, 1.1, 0.9], np.float32), "beta": np.zeros(3, np.float32)}
    out = tr.project(theta, desc)
    assert all(np.array_equal(out[k], theta[k]) for k in theta)


def test_project_clamps_to_bounds():
    desc = tr.stain()
    theta = {"alpha": np.array([1.7, 0.5, 1.0], np.float32), "beta": np.array([0.5, -0.5, 0.0], np.float32)}
    out = tr.project(theta, desc)
    assert np.allclose(out["alpha"], [1.2, 0.8, 1.0])
    assert np.allclose(out["beta"], [0.2, -0.2, 0.0])


def test_project_shape_mismatch_raises():
    desc = tr.stain()
    with pytest.raises(ValueError, match="shape"):
        tr.project({"alpha": np.zeros(4, np.float32), "beta": np.zeros(3, np.float32)}, desc)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_project_is_idempotent(seed):
    desc = tr.affine()
    rng = np.random.default_rng(seed)
    theta = {s.name: rng.uniform(-10, 10, size=s.shape).astype(np.float32) for s in desc.specs}
    once = tr.project(theta, desc)
    twice = tr.project(once, desc)
    assert all(np.array_equal(once[k], twice[k]) for k in once)
    assert tr.in_box(once, desc)


# -- composition ----------------------------------------------------------------------


def test_compose_empty_raises():
    with pytest.raises(ValueError):
        tr.compose([])


def test_compose_singleton_matches_member():
    base = tr.stain()
    comp = tr.compose([base])
    img = random_patch()
    theta = {"0.alpha": np.array([1.1, 0.9, 1.0], np.float32), "0.beta": np.array([0.05, 0.0, -0.05], np.float32)}
    out_c = comp.apply_np(img, theta)
    out_b = base.apply_np(img, {"alpha": theta["0.alpha"], "beta": theta["0.beta"]})
    assert np.array_equal(out_c, out_b)


def test_compose_neutral_is_identity():
    comp = tr.compose([tr.brightness_contrast(), tr.additive()])
    img = random_patch()
    assert np.array_equal(comp.apply_np(img, comp.neutral_params()), img)


def test_compose_matches_manual_sequential_application():
    a, b = tr.affine(), tr.blur()
    comp = tr.compose([a, b])
    img = random_patch()
    theta_a = {"phi": np.array([0.12], np.float32), "tx": np.array([1.5], np.float32),
               "ty": np.array([-2.0], np.float32), "zoom": np.array([0.95], np.float32)}
    theta_b = {"sigma": np.array([1.3], np.float32)}
    manual = b.apply_np(a.apply_np(img, theta_a), theta_b)
    theta = {f"0.{k}": v for k, v in theta_a.items()} | {f"1.{k}": v for k, v in theta_b.items()}
    assert np.array_equal(comp.apply_np(img, theta), manual)


def test_compose_capability_flags():
    comp = tr.compose([tr.stain(), tr.resolution()])
    assert comp.differentiable is False
    comp = tr.compose([tr.stain(), tr.jpeg()])
    assert comp.differentiable is True and comp.exact_gradient is False
    assert tr.compose([tr.blur(), tr.jpeg()]).identity_tolerance == pytest.approx(0.021)


# -- global invariants ------------------------------------------------------------------


def test_output_range_under_random_parameters():
    rng = np.random.default_rng(11)
    for desc in all_descriptors():
        for _ in range(5):
            img = random_patch(rng=rng)
            theta = {s.name: rng.uniform(s.lo, s.hi).astype(np.float32).reshape(s.shape) for s in desc.specs}
            out = desc.apply_np(img, theta)
            assert out.shape == img.shape
            assert np.isfinite(out).all()
            assert out.min() >= 0.0 and out.max() <= 1.0, desc.kind


def test_make_transform_box_override_and_unknown_kind():
    desc = tr.make_transform("brightness_contrast", box_overrides={"contrast": (1.0, 1.0)})
    spec = {s.name: s for s in desc.specs}["contrast"]
    assert spec.lo == spec.hi == spec.neutral == 1.0
    with pytest.raises(ValueError, match="unknown transform"):
        tr.make_transform("sharpen")
    with pytest.raises(ValueError, match="unknown parameters"):
        tr.make_transform("blur", box_overrides={"radius": (1, 2)})
