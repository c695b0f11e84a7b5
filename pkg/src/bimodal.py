"""
Bimodal Module
Per-pixel two-component Laplacian mixture over disparity and its hard
mode decoding
"""

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from src.errors import DimensionMismatchError, InvalidGridError, InvalidParameterError
from src.grid_core import DepthGrid

# Plane order used by BimodalField.params and the "Pm" file variant
PLANES = ("pi", "mu1", "b1", "mu2", "b2")


@dataclass(frozen=True)
class BimodalParams:
    """Mixture weight pi, locations mu1/mu2 and diversities b1/b2"""

    pi: float
    mu1: float
    b1: float
    mu2: float
    b2: float

    def __post_init__(self):
        values = (self.pi, self.mu1, self.b1, self.mu2, self.b2)
        if not all(math.isfinite(v) for v in values):
            raise InvalidParameterError(f"non-finite mixture parameters: {self}")
        if not 0.0 <= self.pi <= 1.0:
            raise InvalidParameterError(f"pi must lie in [0, 1], got {self.pi}")
        if self.b1 <= 0.0 or self.b2 <= 0.0:
            raise InvalidParameterError(f"diversities must be positive: b1={self.b1}, b2={self.b2}")

    def swapped(self) -> "BimodalParams":
        """Same mixture with the two components exchanged"""
        return BimodalParams(1.0 - self.pi, self.mu2, self.b2, self.mu1, self.b1)

    def as_tuple(self) -> Tuple[float, float, float, float, float]:
        return (self.pi, self.mu1, self.b1, self.mu2, self.b2)


def _validate_planes(params: np.ndarray) -> None:
    pi, b1, b2 = params[..., 0], params[..., 2], params[..., 4]
    bad = ~np.isfinite(params).all(axis=-1)
    bad |= (pi < 0.0) | (pi > 1.0) | (b1 <= 0.0) | (b2 <= 0.0)
    if bad.any():
        y, x = (int(i) for i in np.argwhere(bad)[0])
        values = dict(zip(PLANES, params[y, x].tolist()))
        raise InvalidParameterError(
            f"invalid mixture parameters at pixel (x={x}, y={y}): {values}"
            f" ({int(bad.sum())} invalid pixel(s) in total)"
        )


@dataclass(frozen=True, eq=False)
class BimodalField:
    """H x W x 5 parameter field, validated once at construction"""

    params: np.ndarray

    def __post_init__(self):
        params = np.asarray(self.params, dtype=np.float32)
        if params.ndim != 3 or params.shape[2] != len(PLANES):
            raise InvalidGridError(f"bimodal field must be HxWx5, got {params.shape}")
        if params.shape[0] < 1 or params.shape[1] < 1:
            raise InvalidGridError("bimodal field must be at least 1x1")
        _validate_planes(params)
        params = params.copy()
        params.setflags(write=False)
        object.__setattr__(self, "params", params)

    @classmethod
    def from_planes(cls, pi, mu1, b1, mu2, b2) -> "BimodalField":
        """
        Stack five equally shaped H x W planes into a field

        Args:
            pi: Weight of the first component
            mu1: First location
            b1: First diversity
            mu2: Second location
            b2: Second diversity

        Returns:
            Validated BimodalField

        Raises:
            DimensionMismatchError: If the plane shapes differ
        """
        planes = [np.asarray(p, dtype=np.float32) for p in (pi, mu1, b1, mu2, b2)]
        if len({p.shape for p in planes}) != 1:
            raise DimensionMismatchError("bimodal planes must share one shape")
        return cls(np.stack(planes, axis=-1))

    @property
    def width(self) -> int:
        return int(self.params.shape[1])

    @property
    def height(self) -> int:
        return int(self.params.shape[0])

    def plane(self, name: str) -> np.ndarray:
        """One of "pi", "mu1", "b1", "mu2", "b2" as an H x W view"""
        return self.params[..., PLANES.index(name)]

    def at(self, x: int, y: int) -> BimodalParams:
        """Parameters of pixel (x, y)"""
        return BimodalParams(*(float(v) for v in self.params[y, x]))


def density(p: BimodalParams, d: float) -> float:
    """
    Mixture density at disparity d

    Args:
        p: Mixture parameters
        d: Disparity to evaluate

    Returns:
        pi * Laplace(d; mu1, b1) + (1 - pi) * Laplace(d; mu2, b2)

    Raises:
        InvalidParameterError: If a diversity is not positive
    """
    if p.b1 <= 0.0 or p.b2 <= 0.0:
        raise InvalidParameterError("diversities must be positive")
    first = p.pi / (2.0 * p.b1) * math.exp(-abs(d - p.mu1) / p.b1)
    second = (1.0 - p.pi) / (2.0 * p.b2) * math.exp(-abs(d - p.mu2) / p.b2)
    return first + second


def decode(p: BimodalParams) -> float:
    """
    Decode a mixture to a single disparity

    Only the two locations are candidates, so no search over d is needed.

    Args:
        p: Mixture parameters

    Returns:
        mu1 or mu2, whichever has the higher mixture density; ties go to mu1
    """
    if density(p, p.mu1) >= density(p, p.mu2):
        return p.mu1
    return p.mu2


def _density_planes(params: np.ndarray, d: np.ndarray) -> np.ndarray:
    pi, mu1, b1, mu2, b2 = (params[..., i].astype(np.float64) for i in range(5))
    first = pi / (2.0 * b1) * np.exp(-np.abs(d - mu1) / b1)
    second = (1.0 - pi) / (2.0 * b2) * np.exp(-np.abs(d - mu2) / b2)
    return first + second


def mixture_density_grid(field: BimodalField, d: DepthGrid) -> np.ndarray:
    """Per-pixel mixture density of the disparities in d"""
    if (d.width, d.height) != (field.width, field.height):
        raise DimensionMismatchError("disparity grid and field sizes differ")
    return _density_planes(field.params, d.values.astype(np.float64))


def _mode_densities(field: BimodalField) -> Tuple[np.ndarray, np.ndarray]:
    params = field.params
    p1 = _density_planes(params, params[..., 1].astype(np.float64))
    p2 = _density_planes(params, params[..., 3].astype(np.float64))
    return p1, p2


def decode_field(f: BimodalField) -> DepthGrid:
    """Pixelwise decode of a whole field, ties going to mu1"""
    p1, p2 = _mode_densities(f)
    return DepthGrid(np.where(p1 >= p2, f.plane("mu1"), f.plane("mu2")))


def mode_confidence(f: BimodalField) -> DepthGrid:
    """Density at the chosen mode divided by density at the rejected one (>= 1)"""
    p1, p2 = _mode_densities(f)
    lo, hi = np.minimum(p1, p2), np.maximum(p1, p2)
    cap = float(np.finfo(np.float32).max)
    with np.errstate(divide="ignore", over="ignore"):
        ratio = np.where(lo > 0.0, hi / np.where(lo > 0.0, lo, 1.0), cap)
    return DepthGrid(np.minimum(ratio, cap))
