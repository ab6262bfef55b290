"""Trimap construction: foreground estimation, synthetic defect masks,
trimap assembly and the dilated latent-resolution mask.

Masks are ``uint8`` arrays in {0, 1}; trimaps are ``float32`` arrays with
values in {0, 0.5, 1} (0 background, 0.5 object, 1 defect).
"""

from __future__ import annotations

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.filters import threshold_otsu

from .errors import FitError, ParameterError

TRIMAP_BACKGROUND = 0.0
TRIMAP_OBJECT = 0.5
TRIMAP_DEFECT = 1.0


def _disk(radius: int) -> np.ndarray:
    y, x = np.ogrid[-radius : radius + 1, -radius : radius + 1]
    return (x * x + y * y <= radius * radius).astype(bool)


def estimate_foreground(
    x: np.ndarray, kind: str = "object", on_degenerate: str = "ones"
) -> np.ndarray:
    """Estimate the object foreground of an image.

    ``kind="texture"`` returns an all-ones mask (the whole surface is
    foreground).  ``kind="object"`` uses an Otsu threshold on the grayscale
    image, keeps the largest 4-connected component and closes it with a
    radius-2 disk.  ``on_degenerate`` picks the behaviour for constant
    images: ``"ones"`` falls back to an all-ones mask, ``"error"`` raises.
    """
    if x.ndim != 3 or x.shape[2] != 3:
        raise ParameterError(f"expected HxWx3 image, got shape {x.shape}")
    h, w = x.shape[:2]
    if kind == "texture":
        return np.ones((h, w), dtype=np.uint8)
    if kind != "object":
        raise ParameterError(f"unknown foreground kind {kind!r}")

    gray = x.mean(axis=2)
    if np.ptp(gray) < 1e-8:
        if on_degenerate == "ones":
            return np.ones((h, w), dtype=np.uint8)
        raise ParameterError("constant image has no separable foreground")

    thresh = threshold_otsu(gray)
    fg = gray > thresh
    # The object is assumed to be the minority class.
    if fg.mean() > 0.5:
        fg = ~fg
    labels, n = ndimage.label(fg)
    if n == 0:
        if on_degenerate == "ones":
            return np.ones((h, w), dtype=np.uint8)
        raise ParameterError("no foreground component found")
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=range(1, n + 1))
    fg = labels == (1 + int(np.argmax(sizes)))
    fg = ndimage.binary_closing(fg, structure=_disk(2))
    return fg.astype(np.uint8)


def _transform_seed(seed: np.ndarray, angle: float, scale: float) -> np.ndarray:
    """Rotate/scale a binary mask with nearest-neighbour resampling."""
    out = seed.astype(np.float32)
    if angle % 360.0 != 0.0:
        out = ndimage.rotate(out, angle, order=0, reshape=True, prefilter=False)
    if scale != 1.0:
        out = ndimage.zoom(out, scale, order=0, prefilter=False)
    return (out >= 0.5).astype(np.uint8)


def _crop_support(mask: np.ndarray) -> np.ndarray:
    ys, xs = np.nonzero(mask)
    return mask[ys.min() : ys.max() + 1, xs.min() : xs.max() + 1]


def synth_defect_mask(
    seeds: list[np.ndarray],
    fg: np.ndarray,
    rot_range: tuple[float, float] = (0.0, 360.0),
    scale_range: tuple[float, float] = (0.85, 1.15),
    rng: np.random.Generator | None = None,
    max_attempts: int = 100,
    shrink: float = 0.9,
    min_support: int = 4,
) -> np.ndarray:
    """Sample a synthetic defect mask fitted inside the foreground.

    Picks a seed uniformly at random, applies a random rotation and scale,
    then places it uniformly inside the foreground bounding box, rejecting
    placements whose support leaves the foreground.  After ``max_attempts``
    rejections the mask is shrunk by ``shrink`` and placement retried;
    below ``min_support`` pixels a :class:`FitError` is raised.
    """
    if rng is None:
        rng = np.random.default_rng()
    if not seeds:
        raise ParameterError("seed mask list is empty")
    for i, s in enumerate(seeds):
        if s.shape != fg.shape:
            raise ParameterError(f"seed {i} shape {s.shape} != fg shape {fg.shape}")
        if not s.any():
            raise ParameterError(f"seed {i} is empty")
    if not fg.any():
        raise ParameterError("foreground mask is empty")

    seed = seeds[int(rng.integers(len(seeds)))]
    angle = float(rng.uniform(*rot_range))
    scale = float(rng.uniform(*scale_range))
    patch = _transform_seed(seed, angle, scale)
    if not patch.any():
        raise FitError("transformed seed mask vanished")
    patch = _crop_support(patch)

    fys, fxs = np.nonzero(fg)
    fy0, fy1 = int(fys.min()), int(fys.max())
    fx0, fx1 = int(fxs.min()), int(fxs.max())
    h, w = fg.shape

    while patch.sum() >= min_support:
        ph, pw = patch.shape
        ylo, yhi = fy0, fy1 - ph + 1
        xlo, xhi = fx0, fx1 - pw + 1
        if yhi >= ylo and xhi >= xlo:
            for _ in range(max_attempts):
                oy = int(rng.integers(ylo, yhi + 1))
                ox = int(rng.integers(xlo, xhi + 1))
                region = fg[oy : oy + ph, ox : ox + pw]
                if np.all(region[patch.astype(bool)] == 1):
                    out = np.zeros((h, w), dtype=np.uint8)
                    out[oy : oy + ph, ox : ox + pw] |= patch
                    return out
        shrunk = _transform_seed(patch, 0.0, shrink)
        if not shrunk.any():
            break
        shrunk = _crop_support(shrunk)
        if shrunk.shape == patch.shape and shrunk.sum() == patch.sum():
            # zoom hit its resolution floor; force progress
            break
        patch = shrunk
    raise FitError("could not place defect mask inside foreground")


def build_trimap(fg: np.ndarray, defect: np.ndarray) -> np.ndarray:
    """Assemble the three-valued trimap: 1 defect, 0.5 object, 0 background."""
    if fg.shape != defect.shape:
        raise ParameterError("fg and defect shapes differ")
    if np.any(defect.astype(bool) & ~fg.astype(bool)):
        raise ParameterError("defect mask leaves the foreground region")
    tri = np.zeros(fg.shape, dtype=np.float32)
    tri[fg.astype(bool)] = TRIMAP_OBJECT
    tri[defect.astype(bool)] = TRIMAP_DEFECT
    return tri


def split_trimap(tri: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Recover (foreground, defect) masks from a trimap."""
    defect = (tri == TRIMAP_DEFECT).astype(np.uint8)
    fg = (tri >= TRIMAP_OBJECT).astype(np.uint8)
    return fg, defect


def dilate_downsample(defect: np.ndarray, latent_hw: tuple[int, int]) -> np.ndarray:
    """Dilate a pixel mask and max-pool it to latent resolution.

    The dilation radius is ``ceil(H_x / H_z)`` so the latent mask can never
    under-cover the defect; a latent cell is 1 iff any covered pixel is 1.
    """
    h, w = defect.shape
    hz, wz = latent_hw
    if h % hz != 0 or w % wz != 0:
        raise ParameterError(f"image size {(h, w)} not divisible by latent {(hz, wz)}")
    if not defect.any():
        return np.zeros((hz, wz), dtype=np.uint8)
    radius = int(np.ceil(h / hz))
    dil = ndimage.binary_dilation(defect.astype(bool), structure=_disk(radius))
    fy, fx = h // hz, w // wz
    pooled = dil.reshape(hz, fy, wz, fx).max(axis=(1, 3))
    return pooled.astype(np.uint8)


# PNG serialization: masks as {0, 255}, trimaps as {0, 128, 255}.

def save_mask(path, mask: np.ndarray) -> None:
    Image.fromarray((mask.astype(np.uint8) * 255)).save(path)


def load_mask(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"))
    return (arr >= 128).astype(np.uint8)


def save_trimap(path, tri: np.ndarray) -> None:
    bytes_ = np.zeros(tri.shape, dtype=np.uint8)
    bytes_[tri == TRIMAP_OBJECT] = 128
    bytes_[tri == TRIMAP_DEFECT] = 255
    Image.fromarray(bytes_).save(path)


def load_trimap(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"))
    tri = np.zeros(arr.shape, dtype=np.float32)
    tri[arr == 128] = TRIMAP_OBJECT
    tri[arr == 255] = TRIMAP_DEFECT
    return tri
