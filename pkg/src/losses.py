"""
Losses Module
Scale/shift-invariant, Laplacian edge and perceptual depth losses and their
weighted combination
"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Dict, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import ndimage

from src.errors import (
    BackendError,
    DimensionMismatchError,
    EmptyInputError,
    UnsupportedInputError,
)
from src.grid_core import DepthGrid, joint_mask, normalize_minmax, ssi_normalize_values

logger = logging.getLogger(__name__)

LAPLACIAN_KERNEL = np.array(
    [[-1.0, -1.0, -1.0], [-1.0, 8.0, -1.0], [-1.0, -1.0, -1.0]], dtype=np.float64
)


class LossWeights(BaseModel):
    """Weights of the three objective terms"""

    model_config = ConfigDict(frozen=True)

    alpha_l: float = Field(default=0.4, ge=0.0)
    alpha_edge: float = Field(default=0.2, ge=0.0)
    alpha_lpips: float = Field(default=0.4, ge=0.0)


@dataclass(frozen=True)
class LossBreakdown:
    """Individual terms plus the weighted total"""

    l_ssi: float
    l_edge: float
    l_lpips: float
    total: float

    def as_dict(self) -> Dict[str, float]:
        """Terms keyed by name, total included"""
        return {
            "l_ssi": self.l_ssi,
            "l_edge": self.l_edge,
            "l_lpips": self.l_lpips,
            "total": self.total,
        }


class PerceptualBackend(ABC):
    """Distance between two maps already normalized to [-1, 1]"""

    @abstractmethod
    def distance(self, a: DepthGrid, b: DepthGrid) -> float:
        """Non-negative distance, zero for identical inputs"""

    def __call__(self, a: DepthGrid, b: DepthGrid) -> float:
        return self.distance(a, b)


class MeanAbsolutePerceptual(PerceptualBackend):
    """Stand-in perceptual distance: mean absolute difference on joint-valid pixels"""

    def distance(self, a: DepthGrid, b: DepthGrid) -> float:
        joint = joint_mask(a, b)
        if not joint.any():
            raise EmptyInputError("no jointly valid pixels")
        diff = a.values[joint].astype(np.float64) - b.values[joint].astype(np.float64)
        return float(np.mean(np.abs(diff)))


class ArrayPerceptualBackend(PerceptualBackend):
    """
    Adapter for array-level perceptual models

    The wrapped callable receives two (C, H, W) float32 arrays in [-1, 1],
    built by replicating the single depth channel; invalid pixels are zeroed.
    """

    def __init__(self, fn: Callable[[np.ndarray, np.ndarray], float], channels: int = 3):
        if channels < 1:
            raise ValueError("channels must be positive")
        self.fn = fn
        self.channels = channels

    def _replicate(self, grid: DepthGrid, mask: np.ndarray) -> np.ndarray:
        plane = np.where(mask, grid.values, 0.0).astype(np.float32)
        return np.repeat(plane[None, :, :], self.channels, axis=0)

    def distance(self, a: DepthGrid, b: DepthGrid) -> float:
        joint = joint_mask(a, b)
        return float(self.fn(self._replicate(a, joint), self._replicate(b, joint)))


def _ssi_on_mask(grid: DepthGrid, mask: np.ndarray) -> np.ndarray:
    normalized, _ = ssi_normalize_values(grid.values[mask].astype(np.float64))
    return normalized


def loss_ssi(pred: DepthGrid, gt: DepthGrid) -> float:
    """
    Scale- and shift-invariant L1 loss

    Both maps are normalized by median and mean absolute deviation over the
    jointly valid pixels before comparing.

    Args:
        pred: Predicted map
        gt: Target map of the same size

    Returns:
        Mean absolute difference of the normalized maps

    Raises:
        EmptyInputError: If no pixel is valid in both maps
        DegenerateScaleError: If either map is constant there
    """
    joint = joint_mask(pred, gt)
    if not joint.any():
        raise EmptyInputError("prediction and ground truth share no valid pixels")
    diff = _ssi_on_mask(pred, joint) - _ssi_on_mask(gt, joint)
    return float(np.mean(np.abs(diff)))


def _laplacian_values(values: np.ndarray) -> np.ndarray:
    return ndimage.correlate(values, LAPLACIAN_KERNEL, mode="nearest")


def _check_laplacian_input(grid: DepthGrid) -> None:
    if grid.width < 3 or grid.height < 3:
        raise UnsupportedInputError(
            f"Laplacian needs at least 3x3 pixels, got {grid.width}x{grid.height}"
        )
    if not grid.is_fully_valid:
        raise UnsupportedInputError("Laplacian is undefined on grids with invalid pixels")


def laplacian(grid: DepthGrid) -> DepthGrid:
    """3x3 Laplacian correlation with replicated borders"""
    _check_laplacian_input(grid)
    return DepthGrid(_laplacian_values(grid.values.astype(np.float64)))


def loss_edge(pred: DepthGrid, gt: DepthGrid) -> float:
    """
    RMSE between Laplacians of the median/MAD-normalized maps

    Raises:
        DimensionMismatchError: If the sizes differ
        UnsupportedInputError: If a map is smaller than 3x3 or has invalid pixels
    """
    if pred.shape != gt.shape:
        raise DimensionMismatchError(f"grid sizes differ: {pred.shape} vs {gt.shape}")
    _check_laplacian_input(pred)
    _check_laplacian_input(gt)
    full = np.ones(pred.shape, dtype=bool)
    edges_pred = _laplacian_values(_ssi_on_mask(pred, full).reshape(pred.shape))
    edges_gt = _laplacian_values(_ssi_on_mask(gt, full).reshape(gt.shape))
    return float(np.sqrt(np.mean((edges_pred - edges_gt) ** 2)))


def loss_lpips(pred: DepthGrid, gt: DepthGrid, backend: PerceptualBackend) -> float:
    """Perceptual distance between min-max normalized maps"""
    joint = joint_mask(pred, gt)
    a = normalize_minmax(pred.with_mask(joint))
    b = normalize_minmax(gt.with_mask(joint))
    value = float(backend(a, b))
    if not math.isfinite(value) or value < 0.0:
        raise BackendError(f"perceptual backend returned an invalid distance: {value}")
    return value


def combine_losses(components: Sequence[float], weights: LossWeights) -> float:
    """Weighted sum of (l_ssi, l_edge, l_lpips)"""
    l_ssi, l_edge, l_lpips = components
    return math.fsum(
        (
            weights.alpha_l * l_ssi,
            weights.alpha_edge * l_edge,
            weights.alpha_lpips * l_lpips,
        )
    )


def loss_total(
    pred: DepthGrid,
    gt: DepthGrid,
    backend: PerceptualBackend,
    w: LossWeights = LossWeights(),
) -> LossBreakdown:
    """
    Compute all three loss terms and their weighted sum

    Args:
        pred: Predicted map
        gt: Target map
        backend: Perceptual distance used for the third term
        w: Term weights

    Returns:
        LossBreakdown with each term and the total
    """
    l_ssi = loss_ssi(pred, gt)
    l_edge = loss_edge(pred, gt)
    l_lpips = loss_lpips(pred, gt, backend)
    total = combine_losses((l_ssi, l_edge, l_lpips), w)
    logger.debug(
        "loss breakdown: ssi=%.6f edge=%.6f lpips=%.6f total=%.6f",
        l_ssi, l_edge, l_lpips, total,
    )
    return LossBreakdown(l_ssi=l_ssi, l_edge=l_edge, l_lpips=l_lpips, total=total)
