"""
Grid Core Module
Depth grid types plus the cropping, resampling and normalization primitives
every other module builds on
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from src.errors import (
    BoundsError,
    DegenerateRangeError,
    DegenerateScaleError,
    DimensionMismatchError,
    EmptyInputError,
    InvalidGridError,
    UnsupportedInputError,
)

# Smallest inverse depth allowed before taking reciprocals
INVERSE_DEPTH_FLOOR = 1e-8


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class Rect:
    """Axis-aligned pixel rectangle (x, y is the top-left corner)"""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            object.__setattr__(self, name, int(getattr(self, name)))
        if self.x < 0 or self.y < 0:
            raise BoundsError(f"rectangle origin must be non-negative: {self}")
        if self.w < 1 or self.h < 1:
            raise BoundsError(f"rectangle must be at least 1x1: {self}")

    @classmethod
    def full(cls, width: int, height: int) -> "Rect":
        return cls(0, 0, width, height)

    @property
    def x_end(self) -> int:
        return self.x + self.w

    @property
    def y_end(self) -> int:
        return self.y + self.h

    def fits(self, width: int, height: int) -> bool:
        return self.x_end <= width and self.y_end <= height

    def compose(self, inner: "Rect") -> "Rect":
        """Rectangle in this rectangle's parent frame for a crop taken inside it"""
        if not inner.fits(self.w, self.h):
            raise BoundsError(f"{inner} does not fit inside {self}")
        return Rect(self.x + inner.x, self.y + inner.y, inner.w, inner.h)

    def slices(self) -> Tuple[slice, slice]:
        return slice(self.y, self.y_end), slice(self.x, self.x_end)

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h}


@dataclass(frozen=True, eq=False)
class DepthGrid:
    """H x W inverse-depth values with an optional validity mask (True = valid)"""

    values: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise InvalidGridError(f"depth grid must be a non-empty 2-D array, got {values.shape}")
        mask = self.mask
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != values.shape:
                raise InvalidGridError(
                    f"mask shape {mask.shape} does not match values {values.shape}"
                )
            if mask.all():
                mask = None
        finite = np.isfinite(values)
        valid = finite if mask is None else finite | ~mask
        if not valid.all():
            raise InvalidGridError("non-finite values at valid positions")
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "mask", None if mask is None else _frozen(mask))

    @classmethod
    def from_array(cls, values, mask=None) -> "DepthGrid":
        """Build a grid, marking every non-finite value invalid"""
        values = np.asarray(values, dtype=np.float32)
        valid = np.isfinite(values)
        if mask is not None:
            valid &= np.asarray(mask, dtype=bool)
        return cls(np.where(valid, values, np.float32(np.nan)), valid)

    @classmethod
    def constant(cls, width: int, height: int, value: float) -> "DepthGrid":
        """Fully valid width x height grid filled with value"""
        return cls(np.full((height, width), value, dtype=np.float32))

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    @property
    def valid_mask(self) -> np.ndarray:
        if self.mask is None:
            return np.ones(self.values.shape, dtype=bool)
        return self.mask

    @property
    def is_fully_valid(self) -> bool:
        return self.mask is None

    @property
    def n_valid(self) -> int:
        return int(self.valid_mask.sum())

    def valid_values(self) -> np.ndarray:
        """Valid values widened to float64 for reductions"""
        return self.values[self.valid_mask].astype(np.float64)

    def with_values(self, values, mask=None) -> "DepthGrid":
        """Same mask (unless one is given) over new values"""
        return DepthGrid(values, self.mask if mask is None else mask)

    def with_mask(self, mask) -> "DepthGrid":
        return DepthGrid(self.values, mask)

    def equals(self, other: "DepthGrid") -> bool:
        """Bit-level equality of values and masks"""
        if self.shape != other.shape:
            return False
        if not np.array_equal(self.valid_mask, other.valid_mask):
            return False
        valid = self.valid_mask
        return self.values[valid].tobytes() == other.values[valid].tobytes()

    def __repr__(self) -> str:
        return f"DepthGrid({self.width}x{self.height}, valid={self.n_valid})"


@dataclass(frozen=True)
class NormalizationStats:
    """Median shift t and mean absolute deviation s of a grid"""

    t: float
    s: float


@dataclass(frozen=True, eq=False)
class ImageGrid:
    """H x W x C image with channels in [0, 1] (C is 1 or 3)"""

    pixels: np.ndarray

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float32)
        if pixels.ndim == 2:
            pixels = pixels[:, :, None]
        if pixels.ndim != 3 or pixels.shape[2] not in (1, 3):
            raise InvalidGridError(f"image must be HxWx1 or HxWx3, got {pixels.shape}")
        if pixels.shape[0] < 1 or pixels.shape[1] < 1:
            raise InvalidGridError("image must be at least 1x1")
        if not np.isfinite(pixels).all():
            raise InvalidGridError("image contains non-finite pixels")
        object.__setattr__(self, "pixels", _frozen(pixels))

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def channels(self) -> int:
        return int(self.pixels.shape[2])

    def __repr__(self) -> str:
        return f"ImageGrid({self.width}x{self.height}x{self.channels})"


def median(values: Sequence[float]) -> float:
    """Middle order statistic; mean of the two middle ones for even counts"""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise EmptyInputError("median of an empty set")
    return float(np.median(values))


def crop(grid: DepthGrid, r: Rect) -> DepthGrid:
    """
    Extract rectangle r from a depth grid

    Args:
        grid: Source grid
        r: Rectangle that must lie inside the grid

    Returns:
        New grid of size r.w x r.h; the mask is cropped identically

    Raises:
        BoundsError: If r extends past the grid
    """
    if not r.fits(grid.width, grid.height):
        raise BoundsError(f"{r} exceeds grid bounds {grid.width}x{grid.height}")
    rows, cols = r.slices()
    mask = None if grid.mask is None else grid.mask[rows, cols]
    return DepthGrid(grid.values[rows, cols], mask)


def crop_image(image: ImageGrid, r: Rect) -> ImageGrid:
    """Extract rectangle r from an image, keeping every channel"""
    if not r.fits(image.width, image.height):
        raise BoundsError(f"{r} exceeds image bounds {image.width}x{image.height}")
    rows, cols = r.slices()
    return ImageGrid(image.pixels[rows, cols, :])


def _half_pixel_coords(n_out: int, n_in: int) -> np.ndarray:
    return (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5


def _resample_plane(plane: np.ndarray, new_w: int, new_h: int) -> np.ndarray:
    rows = _half_pixel_coords(new_h, plane.shape[0])
    cols = _half_pixel_coords(new_w, plane.shape[1])
    yy, xx = np.meshgrid(rows, cols, indexing="ij")
    # mode="nearest" clamps sample positions past the outer pixel centers
    out = ndimage.map_coordinates(
        plane.astype(np.float64), [yy, xx], order=1, mode="nearest"
    )
    return out.astype(np.float32)


def resize_bilinear(grid: DepthGrid, new_w: int, new_h: int) -> DepthGrid:
    """
    Bilinear resampling with half-pixel centered coordinates

    Sample positions past the outer pixel centers clamp to the edge.

    Args:
        grid: Fully valid source grid
        new_w: Target width (at least 1)
        new_h: Target height (at least 1)

    Returns:
        Resampled grid; the input itself when the size is unchanged

    Raises:
        BoundsError: If the target size is empty
        UnsupportedInputError: If the grid has invalid pixels
    """
    if new_w < 1 or new_h < 1:
        raise BoundsError(f"target size must be at least 1x1, got {new_w}x{new_h}")
    if not grid.is_fully_valid:
        raise UnsupportedInputError("cannot resample a grid with invalid pixels")
    if (new_w, new_h) == (grid.width, grid.height):
        return grid
    return DepthGrid(_resample_plane(grid.values, new_w, new_h))


def resize_image(image: ImageGrid, new_w: int, new_h: int) -> ImageGrid:
    """Per-channel counterpart of resize_bilinear for images"""
    if new_w < 1 or new_h < 1:
        raise BoundsError(f"target size must be at least 1x1, got {new_w}x{new_h}")
    if (new_w, new_h) == (image.width, image.height):
        return image
    planes = [
        _resample_plane(image.pixels[:, :, c], new_w, new_h)
        for c in range(image.channels)
    ]
    return ImageGrid(np.stack(planes, axis=-1))


def ssi_normalize_values(vals: np.ndarray) -> Tuple[np.ndarray, NormalizationStats]:
    """(v - median) / mean|v - median| over a flat float64 array"""
    if vals.size == 0:
        raise EmptyInputError("normalization needs at least one valid pixel")
    t = float(np.median(vals))
    s = float(np.mean(np.abs(vals - t)))
    if s == 0.0:
        raise DegenerateScaleError("grid is constant over its valid pixels")
    return (vals - t) / s, NormalizationStats(t=t, s=s)


def normalize_ssi(grid: DepthGrid) -> Tuple[DepthGrid, NormalizationStats]:
    """
    Shift by the median and divide by the mean absolute deviation

    Args:
        grid: Grid with at least one valid pixel

    Returns:
        Tuple of the normalized grid (invalid pixels untouched) and the
        median/deviation pair that was removed

    Raises:
        EmptyInputError: If no pixel is valid
        DegenerateScaleError: If the valid pixels are constant
    """
    valid = grid.valid_mask
    normalized, stats = ssi_normalize_values(grid.valid_values())
    out = grid.values.astype(np.float64)
    out[valid] = normalized
    return grid.with_values(out), stats


def normalize_minmax(grid: DepthGrid) -> DepthGrid:
    """
    Map valid values linearly onto [-1, 1]

    Raises:
        DegenerateRangeError: If the grid is empty or has a single distinct value
    """
    valid = grid.valid_mask
    vals = grid.valid_values()
    if vals.size == 0:
        raise DegenerateRangeError("min-max normalization of an empty grid")
    lo, hi = float(vals.min()), float(vals.max())
    if lo == hi:
        raise DegenerateRangeError("grid has a single distinct valid value")
    out = grid.values.astype(np.float64)
    out[valid] = 2.0 * (vals - lo) / (hi - lo) - 1.0
    return grid.with_values(out)


def apply_affine(grid: DepthGrid, s: float, o: float) -> DepthGrid:
    """s * grid + o on valid pixels"""
    valid = grid.valid_mask
    out = grid.values.astype(np.float64)
    out[valid] = s * out[valid] + o
    return grid.with_values(out)


def joint_mask(a: DepthGrid, b: DepthGrid) -> np.ndarray:
    """Pixels valid in both grids; the grids must have the same shape"""
    if a.shape != b.shape:
        raise DimensionMismatchError(f"grid sizes differ: {a.shape} vs {b.shape}")
    return a.valid_mask & b.valid_mask


def inverse_to_depth(values: np.ndarray) -> np.ndarray:
    """Reciprocal in float64, with inputs floored at INVERSE_DEPTH_FLOOR"""
    return 1.0 / np.maximum(np.asarray(values, dtype=np.float64), INVERSE_DEPTH_FLOOR)


def depth_to_inverse(depth: np.ndarray) -> np.ndarray:
    """Reciprocal of positive depths; non-positive depths become NaN"""
    depth = np.asarray(depth, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(depth > 0, 1.0 / depth, np.nan)
