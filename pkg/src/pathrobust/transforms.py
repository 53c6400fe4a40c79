"""Parameterized, box-constrained image perturbations.

Each transform maps an image in [0,1]^(...,H,W,3) to the same space, has a
neutral parameter point at which it acts as the identity (exactly, except
for blur and jpeg whose documented tolerances are tested), and a per-entry
box constraint that projection enforces. Transforms are pure functions of
(image, params) and safe to call concurrently.

Parameter gradients: stain, additive, blur, brightness_contrast and affine
have exact gradients (finite-difference checkable). jpeg is optimizable by
gradient ascent but only through straight-through surrogates of its
round/floor stages, so it is excluded from exact-gradient checks.
resolution rounds its target size to integers and is search-only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

EPS_PIXEL = 1.0 / 255.0
SIGMA_MIN = ad.SIGMA_MIN

# H&E + residual stain color basis (rows: hematoxylin, eosin, residual),
# each row L2-normalized. Computed in float64 so that derived matrices
# round to exact float32 constants where it matters.
_STAIN_RGB = np.array(
    [
        [0.65, 0.70, 0.29],
        [0.07, 0.99, 0.11],
        [0.27, 0.57, 0.78],
    ],
    dtype=np.float64,
)
STAIN_MATRIX = _STAIN_RGB / np.linalg.norm(_STAIN_RGB, axis=1, keepdims=True)
STAIN_MATRIX_INV = np.linalg.inv(STAIN_MATRIX)

# Rank-1 factors of Minv @ diag(e_j) @ M. The stain transform perturbs
# optical density by sum_j (alpha_j - 1) * OD @ _STAIN_MODES[j] + beta @ M,
# which is exactly zero at neutral regardless of float rounding.
_STAIN_MODES = np.stack(
    [np.outer(STAIN_MATRIX_INV[:, j], STAIN_MATRIX[j, :]) for j in range(3)]
)

# ITU-T T.81 Annex K quantization tables (luminance, chrominance).
JPEG_QTABLE_LUMA = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)
JPEG_QTABLE_CHROMA = np.array(
    [
        [17, 18, 24, 47, 99, 99, 99, 99],
        [18, 21, 26, 66, 99, 99, 99, 99],
        [24, 26, 56, 99, 99, 99, 99, 99],
        [47, 66, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
    ],
    dtype=np.float64,
)

# BT.601 full-range RGB <-> YCbCr (applied to values in [0, 255]).
_RGB_TO_YCBCR = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168735892, -0.331264108, 0.5],
        [0.5, -0.418687589, -0.081312411],
    ],
    dtype=np.float64,
)
_YCBCR_TO_RGB = np.linalg.inv(_RGB_TO_YCBCR)
_YCBCR_OFFSET = np.array([0.0, 128.0, 128.0], dtype=np.float64)


@dataclass(frozen=True)
class ParamSpec:
    """One named parameter block: shape, box bounds, and identity value."""

    name: str
    shape: tuple[int, ...]
    lo: np.ndarray
    hi: np.ndarray
    neutral: np.ndarray

    @staticmethod
    def make(name, shape, lo, hi, neutral) -> "ParamSpec":
        shape = tuple(shape)
        lo = np.broadcast_to(np.asarray(lo, dtype=np.float32), shape).copy()
        hi = np.broadcast_to(np.asarray(hi, dtype=np.float32), shape).copy()
        neutral = np.broadcast_to(np.asarray(neutral, dtype=np.float32), shape).copy()
        if not (np.all(lo <= neutral) and np.all(neutral <= hi)):
            raise ValueError(f"param {name!r}: need lo <= neutral <= hi elementwise")
        return ParamSpec(name, shape, lo, hi, neutral)


@dataclass
class TransformDescriptor:
    """A named transform with its parameter specs and capability flags.

    ``differentiable`` gates gradient-based optimizers; ``exact_gradient``
    additionally promises that parameter gradients match central finite
    differences of the forward (jpeg is differentiable but not exact).
    """

    kind: str
    specs: list[ParamSpec]
    differentiable: bool
    identity_tolerance: float
    apply_fn: "callable" = field(repr=False)
    exact_gradient: bool = True
    preprocess_fn: "callable" = field(default=None, repr=False)

    def neutral_params(self) -> dict[str, np.ndarray]:
        return {s.name: s.neutral.copy() for s in self.specs}

    def preprocess(self, image: np.ndarray) -> np.ndarray:
        """Image the neutral point reproduces (e.g. clamped for stain)."""
        if self.preprocess_fn is None:
            return image
        return self.preprocess_fn(image)

    def apply(self, image, params) -> Tensor:
        """Apply the transform; image/params may be arrays or traced tensors."""
        img = image if isinstance(image, Tensor) else Tensor(image)
        ps = {
            s.name: (params[s.name] if isinstance(params[s.name], Tensor) else Tensor(params[s.name]))
            for s in self.specs
        }
        return self.apply_fn(img, ps)

    def apply_np(self, image: np.ndarray, params: dict[str, np.ndarray]) -> np.ndarray:
        return self.apply(image, params).data


def project(theta: dict[str, np.ndarray], desc: TransformDescriptor) -> dict[str, np.ndarray]:
    """Clamp every parameter block into its box; idempotent."""
    out = {}
    for spec in desc.specs:
        if spec.name not in theta:
            raise ValueError(f"missing parameter {spec.name!r} for transform {desc.kind!r}")
        v = np.asarray(theta[spec.name], dtype=np.float32)
        if v.shape != spec.shape:
            raise ValueError(
                f"parameter {spec.name!r} has shape {v.shape}, expected {spec.shape}"
            )
        out[spec.name] = np.clip(v, spec.lo, spec.hi)
    return out


def box_widths(desc: TransformDescriptor) -> dict[str, np.ndarray]:
    return {s.name: s.hi - s.lo for s in desc.specs}


def in_box(theta: dict[str, np.ndarray], desc: TransformDescriptor, atol: float = 0.0) -> bool:
    return all(
        np.all(theta[s.name] >= s.lo - atol) and np.all(theta[s.name] <= s.hi + atol)
        for s in desc.specs
    )


# -- stain ---------------------------------------------------------------


def _clamp_pixels(image: np.ndarray) -> np.ndarray:
    return np.clip(image, EPS_PIXEL, 1.0)


def _apply_stain(img: Tensor, ps: dict[str, Tensor]) -> Tensor:
    alpha, beta = ps["alpha"], ps["beta"]
    dtype = img.dtype
    modes = Tensor(_STAIN_MODES.astype(dtype))
    m = Tensor(STAIN_MATRIX.astype(dtype))
    p = ad.clamp_st(img, EPS_PIXEL, 1.0)
    od = ad.neg(ad.log10(p))
    # Perturbation matrix K(alpha,beta): OD' = OD + OD@K + beta@M, built so
    # that alpha=1, beta=0 gives literally zero (not merely tiny) deltas.
    k = ad.tsum(ad.mul(ad.reshape(ad.sub(alpha, 1.0), (3, 1, 1)), modes), axis=0)
    shape = od.shape
    od_flat = ad.reshape(od, (-1, 3))
    delta = ad.add(ad.matmul(od_flat, k), ad.matmul(ad.reshape(beta, (1, 3)), m))
    p_out = ad.mul(p, ad.exp10(ad.neg(ad.reshape(delta, shape))))
    return ad.clamp_st(p_out, EPS_PIXEL, 1.0)


def stain(
    alpha_lo=0.8, alpha_hi=1.2, beta_lo=-0.2, beta_hi=0.2
) -> TransformDescriptor:
    """Per-stain gain/offset on Beer-Lambert concentrations.

    Pixels are clamped to [1/255, 1], converted to optical density,
    deconvolved against the pinned stain basis, scaled by alpha and
    shifted by beta per stain, recomposed, and clamped back.
    """
    return TransformDescriptor(
        kind="stain",
        specs=[
            ParamSpec.make("alpha", (3,), alpha_lo, alpha_hi, 1.0),
            ParamSpec.make("beta", (3,), beta_lo, beta_hi, 0.0),
        ],
        differentiable=True,
        identity_tolerance=0.0,
        apply_fn=_apply_stain,
        preprocess_fn=_clamp_pixels,
    )


# -- additive -------------------------------------------------------------


def _apply_additive(img: Tensor, ps: dict[str, Tensor]) -> Tensor:
    return ad.clamp_st(ad.add(img, ps["delta"]), 0.0, 1.0)


def additive(eps: float = 8.0 / 255.0, image_shape=(32, 32, 3)) -> TransformDescriptor:
    """Bounded per-pixel perturbation, clamped to [0,1] (straight-through)."""
    return TransformDescriptor(
        kind="additive",
        specs=[ParamSpec.make("delta", tuple(image_shape), -eps, eps, 0.0)],
        differentiable=True,
        identity_tolerance=0.0,
        apply_fn=_apply_additive,
    )


# -- blur -----------------------------------------------------------------


def _make_apply_blur(radius: int):
    def _apply_blur(img: Tensor, ps: dict[str, Tensor]) -> Tensor:
        kernel = ad.gaussian_kernel(ps["sigma"], radius)
        lead = img.shape[:-3]
        h, w, c = img.shape[-3:]
        nchw = ad.transpose(ad.reshape(img, (-1, h, w, c)), (0, 3, 1, 2))
        blurred = ad.depthwise_conv2d(nchw, kernel, pad_mode="reflect")
        out = ad.transpose(blurred, (0, 2, 3, 1))
        return ad.reshape(out, lead + (h, w, c))

    return _apply_blur


def blur(sigma_max: float = 3.0) -> TransformDescriptor:
    """Isotropic Gaussian blur; kernel radius fixed at ceil(3*sigma_max)."""
    radius = int(np.ceil(3.0 * sigma_max))
    return TransformDescriptor(
        kind="blur",
        specs=[ParamSpec.make("sigma", (1,), SIGMA_MIN, sigma_max, SIGMA_MIN)],
        differentiable=True,
        identity_tolerance=1e-3,
        apply_fn=_make_apply_blur(radius),
    )


# -- jpeg -----------------------------------------------------------------


def _quality_scale(q: Tensor) -> Tensor:
    # S = 5000/q below 50 else 200 - 2q; branches blended by a constant
    # 0/1 mask of the forward value so gradients follow the active branch.
    low = (q.data < 50.0).astype(q.data.dtype)
    lo_branch = ad.div(5000.0, ad.clamp_st(q, 1.0, None))
    hi_branch = ad.sub(200.0, ad.mul(2.0, q))
    return ad.add(ad.mul(Tensor(low), lo_branch), ad.mul(Tensor(1.0 - low), hi_branch))


def _scaled_qtable(q: Tensor, table: np.ndarray) -> Tensor:
    s = _quality_scale(q)
    t = Tensor(table.astype(q.data.dtype))
    scaled = ad.floor_st(ad.div(ad.add(ad.mul(t, ad.reshape(s, ())), 50.0), 100.0))
    return ad.clamp_st(scaled, 1.0, None)


def _blockify(channel: Tensor, h: int, w: int) -> Tensor:
    # (..., H, W) -> (N*Hb*Wb, 8, 8)
    t = ad.reshape(channel, (-1, h // 8, 8, w // 8, 8))
    t = ad.transpose(t, (0, 1, 3, 2, 4))
    return ad.reshape(t, (-1, 8, 8))


def _unblockify(blocks: Tensor, lead: tuple, h: int, w: int) -> Tensor:
    t = ad.reshape(blocks, (-1, h // 8, w // 8, 8, 8))
    t = ad.transpose(t, (0, 1, 3, 2, 4))
    return ad.reshape(t, lead + (h, w))


def _apply_jpeg(img: Tensor, ps: dict[str, Tensor]) -> Tensor:
    q = ps["quality"]
    h, w = img.shape[-3], img.shape[-2]
    if h % 8 or w % 8:
        raise ValueError(f"jpeg requires image dimensions divisible by 8, got {h}x{w}")
    lead = img.shape[:-3]
    dtype = img.dtype
    to_ycc = Tensor(_RGB_TO_YCBCR.T.astype(dtype))
    to_rgb = Tensor(_YCBCR_TO_RGB.T.astype(dtype))
    offset = Tensor(_YCBCR_OFFSET.astype(dtype))

    rgb255 = ad.mul(ad.reshape(img, (-1, 3)), 255.0)
    ycc = ad.add(ad.matmul(rgb255, to_ycc), offset)
    ycc = ad.reshape(ycc, (-1,) + (h, w, 3))

    recons = []
    for ch, table in ((0, JPEG_QTABLE_LUMA), (1, JPEG_QTABLE_CHROMA), (2, JPEG_QTABLE_CHROMA)):
        qt = _scaled_qtable(q, table)
        chan = ad.take_index(ycc, ch, axis=-1)
        blocks = _blockify(ad.sub(chan, 128.0), h, w)
        coeffs = ad.dct8(blocks)
        quant = ad.mul(ad.round_st(ad.div(coeffs, qt)), qt)
        rec = ad.add(ad.idct8(quant), 128.0)
        recons.append(_unblockify(rec, (-1,), h, w))
    ycc_rec = ad.stack_last(recons)
    rgb = ad.matmul(ad.sub(ad.reshape(ycc_rec, (-1, 3)), offset), to_rgb)
    out = ad.div(ad.reshape(rgb, lead + (h, w, 3)), 255.0)
    return ad.clamp_st(out, 0.0, 1.0)


def jpeg(q_lo: float = 5.0, q_hi: float = 100.0) -> TransformDescriptor:
    """DCT-quantization compression with standard tables, no subsampling.

    Differentiable only through straight-through surrogates (round and
    table floor), so quality gradients are usable for ascent but do not
    match finite differences of the quantized forward.
    """
    return TransformDescriptor(
        kind="jpeg",
        specs=[ParamSpec.make("quality", (1,), q_lo, q_hi, q_hi)],
        differentiable=True,
        identity_tolerance=0.02,
        apply_fn=_apply_jpeg,
        exact_gradient=False,
    )


# -- resolution -----------------------------------------------------------


def _resize_grid(h_out: int, w_out: int, h_in: int, w_in: int, dtype) -> np.ndarray:
    # half-pixel-center resampling: src = (dst + 0.5) * in/out
    ys = (np.arange(h_out, dtype=np.float64) + 0.5) * (h_in / h_out)
    xs = (np.arange(w_out, dtype=np.float64) + 0.5) * (w_in / w_out)
    grid = np.empty((h_out, w_out, 2), dtype=dtype)
    grid[..., 0] = xs[None, :]
    grid[..., 1] = ys[:, None]
    return grid


def _apply_resolution(img: Tensor, ps: dict[str, Tensor]) -> Tensor:
    s = float(np.asarray(ps["scale"].data).reshape(()))
    h, w = img.shape[-3], img.shape[-2]
    h_lo = max(1, round(s * h))
    w_lo = max(1, round(s * w))
    if h_lo == h and w_lo == w:
        return img
    dtype = img.dtype
    down = ad.bilinear_sample(img, Tensor(_resize_grid(h_lo, w_lo, h, w, dtype)))
    return ad.bilinear_sample(down, Tensor(_resize_grid(h, w, h_lo, w_lo, dtype)))


def resolution(scale_lo: float = 0.25, scale_hi: float = 1.0) -> TransformDescriptor:
    """Bilinear downsample to round(s*H) x round(s*W) and back (search-only)."""
    return TransformDescriptor(
        kind="resolution",
        specs=[ParamSpec.make("scale", (1,), scale_lo, scale_hi, scale_hi)],
        differentiable=False,
        identity_tolerance=0.0,
        apply_fn=_apply_resolution,
        exact_gradient=False,
    )


# -- brightness / contrast --------------------------------------------------


def _apply_brightness_contrast(img: Tensor, ps: dict[str, Tensor]) -> Tensor:
    a = ad.reshape(ps["contrast"], ())
    b = ad.reshape(ps["brightness"], ())
    return ad.clamp_st(ad.add(ad.mul(img, a), b), 0.0, 1.0)


def brightness_contrast(
    a_lo: float = 0.7, a_hi: float = 1.3, b_lo: float = -0.2, b_hi: float = 0.2
) -> TransformDescriptor:
    """Affine intensity map a*x + b, clamped (straight-through)."""
    return TransformDescriptor(
        kind="brightness_contrast",
        specs=[
            ParamSpec.make("contrast", (1,), a_lo, a_hi, 1.0),
            ParamSpec.make("brightness", (1,), b_lo, b_hi, 0.0),
        ],
        differentiable=True,
        identity_tolerance=0.0,
        apply_fn=_apply_brightness_contrast,
    )


# -- affine ----------------------------------------------------------------


def _apply_affine(img: Tensor, ps: dict[str, Tensor]) -> Tensor:
    h, w = img.shape[-3], img.shape[-2]
    dtype = img.dtype
    phi = ad.reshape(ps["phi"], ())
    tx = ad.reshape(ps["tx"], ())
    ty = ad.reshape(ps["ty"], ())
    z = ad.reshape(ps["zoom"], ())
    cx, cy = w / 2.0, h / 2.0
    xs = (np.arange(w, dtype=np.float64) + 0.5).astype(dtype)
    ys = (np.arange(h, dtype=np.float64) + 0.5).astype(dtype)
    gx0 = Tensor(np.broadcast_to(xs[None, :], (h, w)).copy())
    gy0 = Tensor(np.broadcast_to(ys[:, None], (h, w)).copy())
    # inverse map of out = z*R(phi)*(src-c) + c + t
    c, s = ad.cos(phi), ad.sin(phi)
    dx = ad.sub(ad.sub(gx0, cx), tx)
    dy = ad.sub(ad.sub(gy0, cy), ty)
    sx = ad.add(ad.div(ad.add(ad.mul(dx, c), ad.mul(dy, s)), z), cx)
    sy = ad.add(ad.div(ad.sub(ad.mul(dy, c), ad.mul(dx, s)), z), cy)
    return ad.bilinear_sample(img, ad.stack_last([sx, sy]))


def affine(
    phi_max: float = 0.26, t_max: float = 4.0, z_lo: float = 0.9, z_hi: float = 1.1
) -> TransformDescriptor:
    """Rotation / translation / zoom about the image center, reflect border."""
    return TransformDescriptor(
        kind="affine",
        specs=[
            ParamSpec.make("phi", (1,), -phi_max, phi_max, 0.0),
            ParamSpec.make("tx", (1,), -t_max, t_max, 0.0),
            ParamSpec.make("ty", (1,), -t_max, t_max, 0.0),
            ParamSpec.make("zoom", (1,), z_lo, z_hi, 1.0),
        ],
        differentiable=True,
        identity_tolerance=0.0,
        apply_fn=_apply_affine,
    )


# -- composition -------------------------------------------------------------


def compose(descriptors: list[TransformDescriptor]) -> TransformDescriptor:
    """Sequential pipeline; parameters are the members' specs, name-prefixed."""
    if not descriptors:
        raise ValueError("compose requires a nonempty descriptor list")
    members = list(descriptors)
    specs = []
    for i, d in enumerate(members):
        for s in d.specs:
            specs.append(ParamSpec(f"{i}.{s.name}", s.shape, s.lo, s.hi, s.neutral))

    def apply_fn(img: Tensor, ps: dict[str, Tensor]) -> Tensor:
        out = img
        for i, d in enumerate(members):
            sub = {s.name: ps[f"{i}.{s.name}"] for s in d.specs}
            out = d.apply_fn(out, sub)
        return out

    def preprocess_fn(image: np.ndarray) -> np.ndarray:
        out = image
        for d in members:
            out = d.preprocess(out)
        return out

    return TransformDescriptor(
        kind="+".join(d.kind for d in members),
        specs=specs,
        differentiable=all(d.differentiable for d in members),
        identity_tolerance=sum(d.identity_tolerance for d in members),
        apply_fn=apply_fn,
        exact_gradient=all(d.exact_gradient for d in members),
        preprocess_fn=preprocess_fn,
    )


# -- registry ----------------------------------------------------------------

TRANSFORM_KINDS = (
    "stain",
    "additive",
    "blur",
    "jpeg",
    "resolution",
    "brightness_contrast",
    "affine",
)


def make_transform(
    kind: str,
    image_shape: tuple[int, int, int] = (32, 32, 3),
    box_overrides: dict[str, tuple[float, float]] | None = None,
) -> TransformDescriptor:
    """Build a descriptor by name, optionally overriding parameter boxes.

    ``box_overrides`` maps parameter name to (lo, hi); the neutral point is
    clipped into the overridden box.
    """
    if kind == "stain":
        desc = stain()
    elif kind == "additive":
        desc = additive(image_shape=image_shape)
    elif kind == "blur":
        desc = blur()
    elif kind == "jpeg":
        desc = jpeg()
    elif kind == "resolution":
        desc = resolution()
    elif kind == "brightness_contrast":
        desc = brightness_contrast()
    elif kind == "affine":
        desc = affine()
    else:
        raise ValueError(f"unknown transform kind {kind!r}; choose from {TRANSFORM_KINDS}")
    if box_overrides:
        specs = []
        for s in desc.specs:
            if s.name in box_overrides:
                lo, hi = box_overrides[s.name]
                neutral = np.clip(s.neutral, lo, hi)
                specs.append(ParamSpec.make(s.name, s.shape, lo, hi, neutral))
            else:
                specs.append(s)
        unknown = set(box_overrides) - {s.name for s in desc.specs}
        if unknown:
            raise ValueError(f"unknown parameters {sorted(unknown)} for transform {kind!r}")
        desc.specs = specs
    return desc
