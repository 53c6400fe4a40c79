"""Synthetic stained-patch dataset, PNG I/O, and the on-disk layout.

Patches are 32x32 RGB in [0,1], synthesized in optical-density space with
the same pinned stain basis the stain transform perturbs: class 1
("tumor-like") carries 6-12 dark hematoxylin-dominant elliptical blobs on
an eosin-pink background, class 0 at most 2. Per-image PRNG streams are
derived from (seed, index), so generation is order-independent and
deterministic.

Layout: <dir>/class_<k>/<index>.png plus <dir>/manifest.json with
{"n", "seed", "balance", "generator_version", "counts"}.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage, UnidentifiedImageError

from . import autodiff as ad
from .autodiff import Tensor
from .seeding import substream
from .transforms import STAIN_MATRIX

GENERATOR_VERSION = 1
PATCH_SHAPE = (32, 32, 3)


class DatasetError(RuntimeError):
    pass


class DatasetManifestError(DatasetError):
    """manifest.json missing or unreadable."""


class DatasetCountError(DatasetError):
    """File counts on disk disagree with the manifest."""


class DatasetDecodeError(DatasetError):
    """A PNG could not be decoded."""


@dataclass
class Dataset:
    images: np.ndarray  # (n, 32, 32, 3) float32 in [0,1]
    labels: np.ndarray  # (n,) int64 in {0,1}
    manifest: dict
    ids: np.ndarray = field(default=None)  # original sample indices

    def __post_init__(self):
        if self.ids is None:
            self.ids = np.arange(len(self.labels), dtype=np.int64)

    def __len__(self) -> int:
        return len(self.labels)

    def items(self) -> list[tuple[np.ndarray, int]]:
        return [(self.images[i], int(self.labels[i])) for i in range(len(self))]


def _soft_ellipse(xx, yy, cx, cy, a, b, angle) -> np.ndarray:
    dx, dy = xx - cx, yy - cy
    xr = dx * np.cos(angle) + dy * np.sin(angle)
    yr = -dx * np.sin(angle) + dy * np.cos(angle)
    q = (xr / a) ** 2 + (yr / b) ** 2
    return 1.0 / (1.0 + np.exp(np.clip((q - 1.0) * 4.0, -60.0, 60.0)))


def _smooth_noise(rng: np.random.Generator, h: int, w: int, coarse: int) -> np.ndarray:
    grid = rng.normal(0.0, 1.0, size=(coarse, coarse, 1)).astype(np.float32)
    ys = (np.arange(h, dtype=np.float64) + 0.5) * (coarse / h)
    xs = (np.arange(w, dtype=np.float64) + 0.5) * (coarse / w)
    g = np.empty((h, w, 2), dtype=np.float32)
    g[..., 0] = xs[None, :]
    g[..., 1] = ys[:, None]
    return ad.bilinear_sample(Tensor(grid), Tensor(g)).data[..., 0]


def _render_patch(rng: np.random.Generator, label: int) -> np.ndarray:
    h, w, _ = PATCH_SHAPE
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    # background concentrations: eosin-pink with mild texture
    c_h = np.full((h, w), rng.uniform(0.02, 0.08))
    c_e = np.full((h, w), rng.uniform(0.25, 0.45))
    c_r = np.full((h, w), rng.uniform(0.0, 0.04))
    c_e = c_e + 0.05 * _smooth_noise(rng, h, w, 5) + 0.015 * rng.normal(size=(h, w))
    c_h = c_h + 0.02 * _smooth_noise(rng, h, w, 5)

    n_blobs = int(rng.integers(6, 13)) if label == 1 else int(rng.integers(0, 3))
    for _ in range(n_blobs):
        cx, cy = rng.uniform(2.0, w - 2.0), rng.uniform(2.0, h - 2.0)
        a, b = rng.uniform(1.5, 3.5), rng.uniform(1.5, 3.5)
        angle = rng.uniform(0.0, np.pi)
        amp = rng.uniform(0.5, 0.9)
        mask = _soft_ellipse(xx, yy, cx, cy, a, b, angle)
        c_h = c_h + amp * mask
        c_e = c_e - 0.10 * mask

    conc = np.stack([c_h, c_e, c_r], axis=-1).clip(min=0.0)
    od = conc.reshape(-1, 3) @ STAIN_MATRIX
    rgb = np.power(10.0, -od).reshape(h, w, 3)
    return np.clip(rgb, 0.0, 1.0).astype(np.float32)


def generate_synthetic(n: int, seed: int, balance: float = 0.5) -> Dataset:
    """Deterministic synthetic dataset; exactly round(n*balance) class-1 patches."""
    if n < 2:
        raise ValueError("need at least 2 samples")
    if not (0.0 < balance < 1.0):
        raise ValueError("balance must be strictly between 0 and 1")
    n1 = round(n * balance)
    labels = np.array([1] * n1 + [0] * (n - n1), dtype=np.int64)
    images = np.empty((n,) + PATCH_SHAPE, dtype=np.float32)
    for i in range(n):
        images[i] = _render_patch(substream(seed, "data", i), int(labels[i]))
    manifest = {
        "n": n,
        "seed": seed,
        "balance": balance,
        "generator_version": GENERATOR_VERSION,
        "counts": {"0": int(n - n1), "1": int(n1)},
    }
    return Dataset(images, labels, manifest)


# -- PNG I/O -----------------------------------------------------------------


def write_png(image: np.ndarray, path) -> None:
    """8-bit RGB PNG; values quantized by round(p*255)."""
    arr = np.round(np.asarray(image, dtype=np.float64) * 255.0).clip(0, 255).astype(np.uint8)
    PILImage.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_png(path) -> np.ndarray:
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except (UnidentifiedImageError, OSError) as e:
        raise DatasetDecodeError(f"cannot decode PNG {path}: {e}") from e
    return arr / np.float32(255.0)


def write_dataset(ds: Dataset, out_dir) -> None:
    out_dir = Path(out_dir)
    for cls in (0, 1):
        (out_dir / f"class_{cls}").mkdir(parents=True, exist_ok=True)
    for i in range(len(ds)):
        write_png(ds.images[i], out_dir / f"class_{int(ds.labels[i])}" / f"{int(ds.ids[i])}.png")
    (out_dir / "manifest.json").write_text(
        json.dumps(ds.manifest, sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8"
    )


def read_dataset(in_dir) -> Dataset:
    in_dir = Path(in_dir)
    manifest_path = in_dir / "manifest.json"
    if not manifest_path.is_file():
        raise DatasetManifestError(f"missing manifest {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DatasetManifestError(f"unreadable manifest {manifest_path}: {e}") from e
    entries: list[tuple[int, int, Path]] = []
    found = {"0": 0, "1": 0}
    for cls in (0, 1):
        cls_dir = in_dir / f"class_{cls}"
        if not cls_dir.is_dir():
            continue
        for p in cls_dir.glob("*.png"):
            entries.append((int(p.stem), cls, p))
            found[str(cls)] += 1
    expected = manifest.get("counts", {})
    if {k: int(v) for k, v in expected.items()} != found:
        raise DatasetCountError(f"manifest counts {expected} but found {found} files")
    if int(manifest.get("n", -1)) != len(entries):
        raise DatasetCountError(f"manifest n={manifest.get('n')} but found {len(entries)} files")
    entries.sort(key=lambda e: e[0])
    images = np.stack([read_png(p) for _, _, p in entries]) if entries else np.empty((0,) + PATCH_SHAPE, np.float32)
    labels = np.array([cls for _, cls, _ in entries], dtype=np.int64)
    ids = np.array([i for i, _, _ in entries], dtype=np.int64)
    return Dataset(images, labels, manifest, ids=ids)


def split(ds: Dataset, train_frac: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified seeded split; per-class proportions kept to within one sample."""
    if not (0.0 < train_frac < 1.0):
        raise ValueError("train_frac must be strictly between 0 and 1")
    train_idx: list[int] = []
    test_idx: list[int] = []
    for cls in (0, 1):
        pos = np.flatnonzero(ds.labels == cls)
        if len(pos) and len(pos) < 2:
            raise ValueError(f"class {cls} has fewer than 2 samples; cannot split")
        perm = substream(seed, "split", cls).permutation(len(pos))
        k = round(train_frac * len(pos))
        train_idx.extend(pos[perm[:k]])
        test_idx.extend(pos[perm[k:]])
    train_idx.sort()
    test_idx.sort()

    def subset(idx: list[int]) -> Dataset:
        idx = np.asarray(idx, dtype=np.int64)
        manifest = dict(ds.manifest)
        manifest["n"] = int(len(idx))
        manifest["counts"] = {
            "0": int(np.sum(ds.labels[idx] == 0)),
            "1": int(np.sum(ds.labels[idx] == 1)),
        }
        return Dataset(ds.images[idx].copy(), ds.labels[idx].copy(), manifest, ids=ds.ids[idx].copy())

    return subset(train_idx), subset(test_idx)
