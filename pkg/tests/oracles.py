"""Independent oracles shared by the test suite.

Finite differences are evaluated in float64 with the production forward
code, so the 1e-3 relative tolerance on analytic gradients stays
meaningful at float32 training precision.
"""

from __future__ import annotations

import numpy as np


def finite_diff(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar function wrt every entry of x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def assert_grads_close(analytic, fd, rtol: float = 1e-3, zero_tol: float = 1e-6) -> None:
    """Relative comparison with an absolute floor for near-zero entries."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(fd, dtype=np.float64)
    assert a.shape == b.shape, f"shape mismatch {a.shape} vs {b.shape}"
    denom = np.maximum(np.abs(a), np.abs(b))
    big = denom > zero_tol
    if big.any():
        rel = np.abs(a - b)[big] / denom[big]
        assert rel.max() <= rtol, f"max relative gradient error {rel.max():.3e} > {rtol}"
    small = ~big
    if small.any():
        assert np.abs(a - b)[small].max() <= zero_tol


class LinearModel:
    """Binary logits (0, w.x) over flattened NCHW input.

    For an additive perturbation bounded by eps the worst case has the
    closed form delta* = eps * sign(w), which makes PGD optimality
    checkable exactly.
    """

    def __init__(self, w_chw: np.ndarray):
        from pathrobust import autodiff as ad
        from pathrobust.autodiff import Tensor

        self._ad, self._Tensor = ad, Tensor
        wflat = w_chw.reshape(-1).astype(np.float32)
        self.w = w_chw.astype(np.float32)
        self.wmat = np.stack([np.zeros_like(wflat), wflat], axis=1)

    def forward(self, x):
        ad, Tensor = self._ad, self._Tensor
        return ad.matmul(ad.reshape(x, (x.shape[0], -1)), Tensor(self.wmat))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return x.reshape(x.shape[0], -1) @ self.wmat


def conv2d_loops(x: np.ndarray, w: np.ndarray, padding: int, pad_mode: str = "zero") -> np.ndarray:
    """Direct 4-nested-loop cross-correlation reference, stride 1."""
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    assert c == ci

    def fetch(img, ch, i, j):
        if 0 <= i < h and 0 <= j < wd:
            return x[img, ch, i, j]
        if pad_mode == "zero":
            return 0.0
        period_h, period_w = 2 * h - 2, 2 * wd - 2
        ii = abs(i) % period_h if h > 1 else 0
        jj = abs(j) % period_w if wd > 1 else 0
        ii = ii if ii < h else period_h - ii
        jj = jj if jj < wd else period_w - jj
        return x[img, ch, ii, jj]

    ho, wo = h + 2 * padding - kh + 1, wd + 2 * padding - kw + 1
    out = np.zeros((n, o, ho, wo), dtype=np.float64)
    for img in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ch in range(c):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += float(w[oc, ch, ki, kj]) * float(
                                    fetch(img, ch, i - padding + ki, j - padding + kj)
                                )
                    out[img, oc, i, j] = acc
    return out
