"""RGB / CIELAB / HSV conversions and the L / AB channel split.

All conversions use the sRGB transfer curve and the D65 reference white
(2 degree observer). Planes are float64 internally; quantization to 8 bits
happens only in :func:`lab_to_rgb`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from semcolor.errors import ShapeError

L_RANGE = (0.0, 100.0)
AB_RANGE = (-128.0, 127.0)

# Linear sRGB -> XYZ (D65).
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
# White point taken from the matrix itself so that (255, 255, 255) maps to
# X/Xn = Y/Yn = Z/Zn = 1 exactly.
_WHITE = _RGB_TO_XYZ.sum(axis=1)

_DELTA = 6.0 / 29.0


def _frozen(arr, dtype):
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def _check_plane_shapes(*planes):
    shapes = {p.shape for p in planes}
    if len(shapes) != 1:
        raise ShapeError(f"plane shapes differ: {sorted(shapes)}")
    (shape,) = shapes
    if len(shape) != 2 or shape[0] < 1 or shape[1] < 1:
        raise ShapeError(f"expected a non-empty 2-D plane, got shape {shape}")


def _check_range(name, plane, lo, hi):
    if not np.all(np.isfinite(plane)):
        raise ValueError(f"{name} contains non-finite values")
    if plane.min() < lo or plane.max() > hi:
        raise ValueError(
            f"{name} outside [{lo}, {hi}]: min={plane.min():.4g}, max={plane.max():.4g}"
        )


@dataclass(frozen=True, eq=False)
class RgbImage:
    """8-bit RGB image, ``pixels`` has shape (height, width, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ShapeError(f"expected (H, W, 3) pixels, got shape {px.shape}")
        if px.dtype != np.uint8:
            if np.any(px < 0) or np.any(px > 255) or np.any(px != np.round(px)):
                raise ValueError("RGB values must be integers in [0, 255]")
        object.__setattr__(self, "pixels", _frozen(px, np.uint8))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @classmethod
    def from_gray(cls, gray) -> "RgbImage":
        gray = np.asarray(gray)
        return cls(np.repeat(gray[..., None], 3, axis=2))


@dataclass(frozen=True, eq=False)
class LabImage:
    l: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        planes = [np.asarray(p, dtype=np.float64) for p in (self.l, self.a, self.b)]
        _check_plane_shapes(*planes)
        _check_range("L", planes[0], *L_RANGE)
        _check_range("A", planes[1], *AB_RANGE)
        _check_range("B", planes[2], *AB_RANGE)
        for name, plane in zip("lab", planes):
            object.__setattr__(self, name, _frozen(plane, np.float64))

    @property
    def height(self) -> int:
        return self.l.shape[0]

    @property
    def width(self) -> int:
        return self.l.shape[1]


@dataclass(frozen=True, eq=False)
class ChromaMap:
    """The A and B planes of a LAB image."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        planes = [np.asarray(p, dtype=np.float64) for p in (self.a, self.b)]
        _check_plane_shapes(*planes)
        _check_range("A", planes[0], *AB_RANGE)
        _check_range("B", planes[1], *AB_RANGE)
        object.__setattr__(self, "a", _frozen(planes[0], np.float64))
        object.__setattr__(self, "b", _frozen(planes[1], np.float64))

    @property
    def shape(self) -> tuple[int, int]:
        return self.a.shape

    @property
    def height(self) -> int:
        return self.a.shape[0]

    @property
    def width(self) -> int:
        return self.a.shape[1]

    def stack(self) -> np.ndarray:
        """Return an (H, W, 2) array."""
        return np.stack([self.a, self.b], axis=-1)

    @classmethod
    def zeros(cls, height: int, width: int) -> "ChromaMap":
        z = np.zeros((height, width))
        return cls(z, z)


@dataclass(frozen=True, eq=False)
class HsvImage:
    """Hue in degrees [0, 360); saturation and value in [0, 1]."""

    h: np.ndarray
    s: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        planes = [np.asarray(p, dtype=np.float64) for p in (self.h, self.s, self.v)]
        _check_plane_shapes(*planes)
        if planes[0].min() < 0 or planes[0].max() >= 360:
            raise ValueError("hue outside [0, 360)")
        _check_range("S", planes[1], 0.0, 1.0)
        _check_range("V", planes[2], 0.0, 1.0)
        for name, plane in zip("hsv", planes):
            object.__setattr__(self, name, _frozen(plane, np.float64))


def srgb_to_linear(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return np.where(
        c <= 0.0031308, 12.92 * c, 1.055 * np.power(np.maximum(c, 0.0), 1 / 2.4) - 0.055
    )


def _lab_f(t):
    return np.where(t > _DELTA**3, np.cbrt(t), t / (3 * _DELTA**2) + 4.0 / 29.0)


def _lab_f_inv(t):
    return np.where(t > _DELTA, t**3, 3 * _DELTA**2 * (t - 4.0 / 29.0))


def rgb_array_to_lab(rgb: np.ndarray) -> np.ndarray:
    """(..., 3) array of 8-bit values -> (..., 3) float array of L, A, B."""
    lin = srgb_to_linear(np.asarray(rgb, dtype=np.float64) / 255.0)
    xyz = lin @ _RGB_TO_XYZ.T / _WHITE
    f = _lab_f(xyz)
    lab = np.empty_like(f)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def lab_array_to_rgb(lab: np.ndarray) -> np.ndarray:
    """(..., 3) float LAB array -> (..., 3) uint8 array, clamped per channel."""
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    xyz = _lab_f_inv(np.stack([fx, fy, fz], axis=-1)) * _WHITE
    lin = np.clip(xyz @ _XYZ_TO_RGB.T, 0.0, 1.0)
    srgb = np.clip(linear_to_srgb(lin), 0.0, 1.0)
    return np.floor(srgb * 255.0 + 0.5).astype(np.uint8)


def rgb_to_lab(img: RgbImage) -> LabImage:
    lab = rgb_array_to_lab(img.pixels)
    # Float noise can push white a hair past 100 or black below 0.
    l = np.clip(lab[..., 0], *L_RANGE)
    a = np.clip(lab[..., 1], *AB_RANGE)
    b = np.clip(lab[..., 2], *AB_RANGE)
    return LabImage(l, a, b)


def lab_to_rgb(img: LabImage) -> RgbImage:
    return RgbImage(lab_array_to_rgb(np.stack([img.l, img.a, img.b], axis=-1)))


def rgb_to_hsv(img: RgbImage) -> HsvImage:
    rgb = img.pixels.astype(np.float64) / 255.0
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    vmax = rgb.max(axis=-1)
    vmin = rgb.min(axis=-1)
    chroma = vmax - vmin
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(vmax > 0, chroma / vmax, 0.0)
        safe = np.where(chroma > 0, chroma, 1.0)
        h = np.select(
            [chroma == 0, vmax == r, vmax == g],
            [0.0, ((g - b) / safe) % 6.0, (b - r) / safe + 2.0],
            default=(r - g) / safe + 4.0,
        )
    h = (h * 60.0) % 360.0
    return HsvImage(h, s, vmax)


def split_l_ab(img: LabImage) -> tuple[np.ndarray, ChromaMap]:
    return img.l, ChromaMap(img.a, img.b)


def merge_l_ab(l: np.ndarray, ab: ChromaMap) -> LabImage:
    l = np.asarray(l)
    if l.shape != ab.shape:
        raise ShapeError(f"L plane {l.shape} does not match chroma {ab.shape}")
    return LabImage(l, ab.a, ab.b)


def gray_lab(l: np.ndarray) -> LabImage:
    """LAB image with the given L plane and zero chroma."""
    l = np.asarray(l, dtype=np.float64)
    return merge_l_ab(l, ChromaMap.zeros(*l.shape))
