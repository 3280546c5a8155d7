"""Pixel-space saliency signals that can stand in for hidden-state norms.

Each method reduces a screenshot to one non-negative value per square patch;
:func:`saliency_to_scores` then applies the same standardize + softmax
pipeline used for residual-stream norms.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .numerics import softmax_temp, standardize


class ImageFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ImagePlane:
    """8-bit image, ``data`` shaped ``(height, width)`` or ``(height, width, 3)``."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.dtype != np.uint8:
            raise ValueError("image data must be uint8")
        if not (d.ndim == 2 or (d.ndim == 3 and d.shape[2] == 3)):
            raise ValueError("image must be grayscale (h, w) or RGB (h, w, 3)")
        object.__setattr__(self, "data", d)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 2 else 3


@dataclass(frozen=True, eq=False)
class PatchGrid:
    patch_size: int
    values: np.ndarray  # (grid_h, grid_w)

    @property
    def grid_h(self) -> int:
        return self.values.shape[0]

    @property
    def grid_w(self) -> int:
        return self.values.shape[1]

    def to_csv(self, scores=None) -> str:
        buf = io.StringIO()
        buf.write("# schema: guikv.patches/1\n")
        w = csv.writer(buf, lineterminator="\n")
        header = ["row", "col", "saliency"] + (["score"] if scores is not None else [])
        w.writerow(header)
        flat = self.values.ravel()
        for i, v in enumerate(flat):
            row = [i // self.grid_w, i % self.grid_w, repr(float(v))]
            if scores is not None:
                row.append(repr(float(scores[i])))
            w.writerow(row)
        return buf.getvalue()


def _read_token(f) -> bytes:
    tok = b""
    while True:
        c = f.read(1)
        if not c:
            raise ImageFormatError("truncated PNM header")
        if c == b"#":
            while c not in (b"\n", b""):
                c = f.read(1)
            continue
        if c.isspace():
            if tok:
                return tok
            continue
        tok += c


def read_pnm(path) -> ImagePlane:
    """Read a binary PGM (P5) or PPM (P6) file with maxval <= 255."""
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic not in (b"P5", b"P6"):
            raise ImageFormatError(f"unsupported image magic {magic!r}; expected P5 or P6")
        try:
            width, height, maxval = (int(_read_token(f)) for _ in range(3))
        except ValueError as exc:
            raise ImageFormatError("malformed PNM header") from exc
        if not 0 < maxval <= 255:
            raise ImageFormatError("only 8-bit PNM images are supported")
        channels = 3 if magic == b"P6" else 1
        raw = f.read(width * height * channels)
    if len(raw) != width * height * channels:
        raise ImageFormatError("truncated PNM pixel data")
    arr = np.frombuffer(raw, dtype=np.uint8)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return ImagePlane(arr.reshape(shape).copy())


def write_pnm(path, image: ImagePlane) -> None:
    magic = b"P6" if image.channels == 3 else b"P5"
    with open(path, "wb") as f:
        f.write(magic + f"\n{image.width} {image.height}\n255\n".encode())
        f.write(np.ascontiguousarray(image.data).tobytes())


def to_gray(image: ImagePlane) -> np.ndarray:
    """Luma 0.299R + 0.587G + 0.114B, rounded half up, as uint8."""
    if image.channels == 1:
        return image.data
    rgb = image.data.astype(np.int64)
    y = (299 * rgb[..., 0] + 587 * rgb[..., 1] + 114 * rgb[..., 2] + 500) // 1000
    return y.astype(np.uint8)


def _patch_slices(h: int, w: int, patch: int):
    gh, gw = math.ceil(h / patch), math.ceil(w / patch)
    for i in range(gh):
        for j in range(gw):
            yield i, j, slice(i * patch, min((i + 1) * patch, h)), slice(j * patch, min((j + 1) * patch, w))


def _grid_shape(h: int, w: int, patch: int) -> tuple[int, int]:
    if patch < 1:
        raise ValueError("patch size must be >= 1")
    return math.ceil(h / patch), math.ceil(w / patch)


def histogram_entropy_saliency(image: ImagePlane, patch_size: int = 28) -> PatchGrid:
    """Shannon entropy (bits) of each patch's 256-bin gray histogram."""
    gray = to_gray(image)
    h, w = gray.shape
    out = np.zeros(_grid_shape(h, w, patch_size))
    for i, j, rs, cs in _patch_slices(h, w, patch_size):
        counts = np.bincount(gray[rs, cs].ravel(), minlength=256)
        p = counts[counts > 0] / counts.sum()
        out[i, j] = float(-(p * np.log2(p)).sum()) + 0.0
    return PatchGrid(patch_size, out)


def sobel_magnitude(gray) -> np.ndarray:
    """Per-pixel 3x3 Sobel gradient magnitude with clamp-to-edge padding."""
    g = np.pad(np.asarray(gray, dtype=np.float64), 1, mode="edge")
    tl, tc, tr = g[:-2, :-2], g[:-2, 1:-1], g[:-2, 2:]
    ml, mr = g[1:-1, :-2], g[1:-1, 2:]
    bl, bc, br = g[2:, :-2], g[2:, 1:-1], g[2:, 2:]
    gx = (tr + 2 * mr + br) - (tl + 2 * ml + bl)
    gy = (bl + 2 * bc + br) - (tl + 2 * tc + tr)
    return np.hypot(gx, gy)


def sobel_saliency(image: ImagePlane, patch_size: int = 28) -> PatchGrid:
    """Mean Sobel magnitude per patch."""
    mag = sobel_magnitude(to_gray(image))
    h, w = mag.shape
    out = np.zeros(_grid_shape(h, w, patch_size))
    for i, j, rs, cs in _patch_slices(h, w, patch_size):
        out[i, j] = mag[rs, cs].mean()
    return PatchGrid(patch_size, out)


# sRGB (D65) -> XYZ
_RGB_TO_XYZ = np.array([
    [0.412453, 0.357580, 0.180423],
    [0.212671, 0.715160, 0.072169],
    [0.019334, 0.119193, 0.950227],
])
_WHITE_D65 = np.array([0.95047, 1.0, 1.08883])


def rgb_to_lab(rgb) -> np.ndarray:
    """8-bit sRGB array ``(..., 3)`` to CIELAB under D65."""
    c = np.asarray(rgb, dtype=np.float64) / 255.0
    lin = np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)
    xyz = lin @ _RGB_TO_XYZ.T / _WHITE_D65
    delta = 6.0 / 29.0
    f = np.where(xyz > delta ** 3, np.cbrt(xyz), xyz / (3 * delta ** 2) + 4.0 / 29.0)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def center_surround_saliency(image: ImagePlane, patch_size: int = 28,
                             surround_radius: int = 1) -> PatchGrid:
    """LAB distance between each patch's mean color and its neighbours' mean.

    The surround is the ``(2r+1) x (2r+1)`` block of patches minus the
    centre; neighbours outside the image are skipped. Grayscale input is
    treated as neutral RGB.
    """
    if surround_radius < 1:
        raise ValueError("surround radius must be >= 1")
    rgb = image.data if image.channels == 3 else np.repeat(image.data[..., None], 3, axis=2)
    lab = rgb_to_lab(rgb)
    h, w = image.height, image.width
    gh, gw = _grid_shape(h, w, patch_size)
    means = np.zeros((gh, gw, 3))
    for i, j, rs, cs in _patch_slices(h, w, patch_size):
        means[i, j] = lab[rs, cs].reshape(-1, 3).mean(axis=0)
    out = np.zeros((gh, gw))
    r = surround_radius
    for i in range(gh):
        for j in range(gw):
            block = means[max(0, i - r):i + r + 1, max(0, j - r):j + r + 1].reshape(-1, 3)
            count = block.shape[0] - 1
            if count == 0:
                continue
            # mean of (neighbour - centre) equals surround - centre, and is
            # exactly zero when every mean is identical
            diff = (block - means[i, j]).sum(axis=0) / count
            out[i, j] = np.linalg.norm(diff)
    return PatchGrid(patch_size, out)


METHODS = {
    "entropy": histogram_entropy_saliency,
    "sobel": sobel_saliency,
    "center-surround": center_surround_saliency,
}


def compute_saliency(image: ImagePlane, method: str, patch_size: int = 28) -> PatchGrid:
    try:
        fn = METHODS[method]
    except KeyError:
        raise ValueError(f"unknown saliency method {method!r}; valid: {', '.join(METHODS)}") from None
    return fn(image, patch_size)


def saliency_to_scores(grid: PatchGrid, tau: float = 3.5, epsilon: float = 1e-8) -> np.ndarray:
    """Row-major flatten, then standardize and temperature softmax."""
    flat = grid.values.ravel()
    if flat.size == 0:
        raise ValueError("empty patch grid")
    return softmax_temp(standardize(flat, epsilon), tau)
