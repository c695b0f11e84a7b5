"""
Boost Module
Patch-wise high-resolution depth: tile the image, infer every patch,
align each patch to an upsampled low-resolution reference with a
closed-form scale/offset, and blend the overlaps linearly
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.backends import DepthBackend, DepthRequest, check_response
from src.errors import BackendError, DimensionMismatchError, EffDepthError, EmptyInputError, UnsupportedInputError
from src.grid_core import (
    DepthGrid,
    ImageGrid,
    Rect,
    apply_affine,
    crop,
    crop_image,
    joint_mask,
    resize_bilinear,
    resize_image,
)
from src.io_formats import save_depth

logger = logging.getLogger(__name__)

FALLBACK_REFERENCE_SIZE = 518


class BoostConfig(BaseModel):
    """Tiling, reference and pass-through parameters"""

    model_config = ConfigDict(frozen=True)

    patch: int = Field(default=640, ge=1)
    overlap: int = Field(default=320, ge=1)
    reference_size: Optional[int] = Field(default=518, ge=1)
    passthrough_max_side: int = Field(default=960, ge=0)
    degenerate_variance_eps: float = Field(default=1e-8, ge=0.0)
    align_patches: bool = True

    @model_validator(mode="after")
    def _overlap_below_patch(self) -> "BoostConfig":
        if not 0 < self.overlap < self.patch:
            raise ValueError(f"overlap must satisfy 0 < overlap < patch (got {self.overlap}, {self.patch})")
        return self


@dataclass(frozen=True)
class AffineAlignment:
    """value -> s * value + o"""

    s: float
    o: float
    degenerate: bool = False

    def apply(self, grid: DepthGrid) -> DepthGrid:
        return apply_affine(grid, self.s, self.o)

    def to_dict(self) -> dict:
        return {"s": self.s, "o": self.o, "degenerate": self.degenerate}


IDENTITY = AffineAlignment(1.0, 0.0)


# ---------------------------------------------------------------------------
# Tiling

def axis_starts(length: int, patch: int, overlap: int) -> Tuple[int, ...]:
    """Evenly spread tile starts covering [0, length)"""
    if length <= patch:
        return (0,)
    span = length - patch
    stride = patch - overlap
    n = -(-span // stride) + 1
    # round(i * span / (n - 1)), halves rounded up, in integer arithmetic
    return tuple((2 * i * span + (n - 1)) // (2 * (n - 1)) for i in range(n))


def axis_weights(length: int, starts: Sequence[int], extent: int) -> np.ndarray:
    """(n_tiles, length) tent ramps over each pairwise overlap, normalized per pixel"""
    n = len(starts)
    raw = np.zeros((n, length), dtype=np.float64)
    for i, start in enumerate(starts):
        w = np.ones(extent, dtype=np.float64)
        if i > 0:
            rise = starts[i - 1] + extent - start
            w[:rise] *= (np.arange(rise) + 1.0) / (rise + 1.0)
        if i < n - 1:
            fall = start + extent - starts[i + 1]
            w[extent - fall :] *= 1.0 - (np.arange(fall) + 1.0) / (fall + 1.0)
        raw[i, start : start + extent] = w
    return raw / raw.sum(axis=0, keepdims=True)


@dataclass(frozen=True, eq=False)
class AxisPlan:
    length: int
    extent: int
    starts: Tuple[int, ...]
    weights: np.ndarray

    @classmethod
    def build(cls, length: int, patch: int, overlap: int) -> "AxisPlan":
        """Starts, clipped extent and normalized weights for one axis"""
        starts = axis_starts(length, patch, overlap)
        extent = min(patch, length)
        weights = axis_weights(length, starts, extent)
        weights.setflags(write=False)
        return cls(length, extent, starts, weights)

    def overlaps(self) -> List[int]:
        """Overlap in pixels between each pair of neighboring tiles"""
        return [a + self.extent - b for a, b in zip(self.starts, self.starts[1:])]


@dataclass(frozen=True, eq=False)
class TilePlan:
    """Row-major tiles (y outer, x inner) with separable blend weights"""

    image_w: int
    image_h: int
    patch: int
    overlap: int
    x_axis: AxisPlan
    y_axis: AxisPlan
    tiles: Tuple[Rect, ...] = field(init=False)

    def __post_init__(self):
        tiles = tuple(
            Rect(x, y, self.x_axis.extent, self.y_axis.extent)
            for y in self.y_axis.starts
            for x in self.x_axis.starts
        )
        object.__setattr__(self, "tiles", tiles)

    def __len__(self) -> int:
        return len(self.tiles)

    def _axis_index(self, index: int) -> Tuple[int, int]:
        return divmod(index, len(self.x_axis.starts))

    def weight(self, index: int) -> np.ndarray:
        """h x w blend weights of tile `index`"""
        iy, ix = self._axis_index(index)
        tile = self.tiles[index]
        wy = self.y_axis.weights[iy, tile.y : tile.y_end]
        wx = self.x_axis.weights[ix, tile.x : tile.x_end]
        return np.outer(wy, wx)

    def weight_sum(self) -> np.ndarray:
        """Sum of all tile weights per image pixel (1 everywhere)"""
        total = np.zeros((self.image_h, self.image_w), dtype=np.float64)
        for i, tile in enumerate(self.tiles):
            rows, cols = tile.slices()
            total[rows, cols] += self.weight(i)
        return total

    def coverage(self) -> np.ndarray:
        """Number of tiles covering each pixel"""
        counts = np.zeros((self.image_h, self.image_w), dtype=np.int32)
        for tile in self.tiles:
            rows, cols = tile.slices()
            counts[rows, cols] += 1
        return counts


def plan_tiles(image_w: int, image_h: int, cfg: Optional[BoostConfig] = None) -> TilePlan:
    """
    Plan the tiles for an image

    Tiles are patch x patch (clipped to the image), spread evenly so that
    neighbors overlap by at least cfg.overlap and the last tile ends flush
    with the image border.

    Args:
        image_w: Image width in pixels
        image_h: Image height in pixels
        cfg: Tile size and overlap; defaults to BoostConfig()

    Returns:
        TilePlan with row-major tiles and separable blending weights

    Raises:
        EmptyInputError: If either side is smaller than 1
    """
    cfg = cfg or BoostConfig()
    if image_w < 1 or image_h < 1:
        raise EmptyInputError(f"image must be at least 1x1, got {image_w}x{image_h}")
    return TilePlan(
        image_w=image_w,
        image_h=image_h,
        patch=cfg.patch,
        overlap=cfg.overlap,
        x_axis=AxisPlan.build(image_w, cfg.patch, cfg.overlap),
        y_axis=AxisPlan.build(image_h, cfg.patch, cfg.overlap),
    )


# ---------------------------------------------------------------------------
# Alignment and blending

def fallback_alignment(reference: DepthGrid, patch: DepthGrid) -> AffineAlignment:
    """Unit scale, offset matching the means"""
    joint = joint_mask(reference, patch)
    if not joint.any():
        raise EmptyInputError("reference and patch share no valid pixels")
    r = reference.values[joint].astype(np.float64)
    p = patch.values[joint].astype(np.float64)
    return AffineAlignment(1.0, float(r.mean() - p.mean()), degenerate=True)


def solve_alignment(reference: DepthGrid, patch: DepthGrid, eps: float = 1e-8) -> AffineAlignment:
    """
    Least-squares scale and shift of a patch onto the reference

    Solves min over (s, o) of sum (reference - (s * patch + o))^2 on the
    jointly valid pixels, in centered form.

    Args:
        reference: Reference crop covering the same pixels as the patch
        patch: Raw backend output for the tile
        eps: Variance below which the patch counts as flat

    Returns:
        AffineAlignment; flat patches get unit scale and a mean offset,
        flagged as degenerate

    Raises:
        EmptyInputError: If the grids share no valid pixel
    """
    joint = joint_mask(reference, patch)
    if not joint.any():
        raise EmptyInputError("reference and patch share no valid pixels")
    r = reference.values[joint].astype(np.float64)
    p = patch.values[joint].astype(np.float64)
    p_mean, r_mean = p.mean(), r.mean()
    dp = p - p_mean
    var = float(np.mean(dp * dp))
    if var < eps:
        return AffineAlignment(1.0, float(r_mean - p_mean), degenerate=True)
    s = float(np.mean(dp * (r - r_mean)) / var)
    return AffineAlignment(s, float(r_mean - s * p_mean))


def blend(plan: TilePlan, aligned_patches: Sequence[DepthGrid]) -> DepthGrid:
    """
    Weighted sum of the aligned patches

    Args:
        plan: Tile plan the patches were produced for
        aligned_patches: One fully valid grid per tile, in plan order

    Returns:
        Full-resolution grid; the weights sum to one at every pixel

    Raises:
        DimensionMismatchError: If the patch count or a patch size is wrong
        UnsupportedInputError: If a patch has invalid pixels
    """
    if len(aligned_patches) != len(plan.tiles):
        raise DimensionMismatchError(
            f"{len(aligned_patches)} patches for {len(plan.tiles)} tiles"
        )
    out = np.zeros((plan.image_h, plan.image_w), dtype=np.float64)
    for i, (tile, patch) in enumerate(zip(plan.tiles, aligned_patches)):
        if (patch.width, patch.height) != (tile.w, tile.h):
            raise DimensionMismatchError(
                f"patch {i} is {patch.width}x{patch.height}, tile is {tile.w}x{tile.h}"
            )
        if not patch.is_fully_valid:
            raise UnsupportedInputError(f"patch {i} has invalid pixels")
        rows, cols = tile.slices()
        out[rows, cols] += plan.weight(i) * patch.values.astype(np.float64)
    return DepthGrid(out)


# ---------------------------------------------------------------------------
# Pipeline

def reference_dims(width: int, height: int, reference_size: int) -> Tuple[int, int]:
    """Longest side -> reference_size, aspect preserved, short side rounded (>= 1)"""
    if width >= height:
        return reference_size, max(1, (2 * height * reference_size + width) // (2 * width))
    return max(1, (2 * width * reference_size + height) // (2 * height)), reference_size


@dataclass
class BoostResult:
    depth: DepthGrid
    passthrough: bool
    backend_calls: int
    plan: Optional[TilePlan] = None
    alignments: List[AffineAlignment] = field(default_factory=list)
    reference: Optional[DepthGrid] = None

    @property
    def tile_count(self) -> int:
        return 1 if self.plan is None else len(self.plan)


class SimpleBoost:
    """Runs the boosting pipeline for one backend and configuration"""

    def __init__(
        self,
        backend: DepthBackend,
        cfg: Optional[BoostConfig] = None,
        jobs: Optional[int] = None,
        dump_dir: Optional[Union[str, Path]] = None,
    ):
        """
        Initialize the pipeline

        Args:
            backend: Depth backend queried for the reference and every tile
            cfg: Tiling and alignment settings
            jobs: Worker threads; capped by the backend's max_concurrency
            dump_dir: Directory that receives the reference, raw and aligned
                tiles as PFM files
        """
        self.backend = backend
        self.cfg = cfg or BoostConfig()
        self.jobs = jobs or os.cpu_count() or 1
        self.dump_dir = Path(dump_dir) if dump_dir is not None else None

    def reference_size(self) -> int:
        """Longest side of the reference pass"""
        return self.cfg.reference_size or self.backend.native_size or FALLBACK_REFERENCE_SIZE

    def _infer(self, request: DepthRequest, tile_index: Optional[int] = None) -> DepthGrid:
        try:
            return check_response(request, self.backend.infer(request))
        except BackendError as e:
            raise e.for_tile(tile_index) if tile_index is not None else e
        except EffDepthError as e:
            raise BackendError(str(e), tile_index=tile_index) from e
        except Exception as e:
            raise BackendError(f"{type(e).__name__}: {e}", tile_index=tile_index) from e

    def _reference(self, image: ImageGrid, image_id: str) -> DepthGrid:
        w, h = image.width, image.height
        rw, rh = reference_dims(w, h, self.reference_size())
        request = DepthRequest(resize_image(image, rw, rh), Rect.full(w, h), (w, h), rw, rh, image_id)
        low = self._infer(request)
        return resize_bilinear(low, w, h)

    def _align(self, reference: DepthGrid, raw: DepthGrid, index: int) -> AffineAlignment:
        if not self.cfg.align_patches:
            return IDENTITY
        eps = self.cfg.degenerate_variance_eps
        ref_vals = reference.valid_values()
        if ref_vals.size == 0 or float(np.var(ref_vals)) < eps:
            logger.warning("tile %d: flat reference, using mean-offset alignment", index)
            return fallback_alignment(reference, raw)
        alignment = solve_alignment(reference, raw, eps)
        if alignment.degenerate:
            logger.warning("tile %d: flat patch, using mean-offset alignment", index)
        return alignment

    def _process_tile(self, image: ImageGrid, image_id: str, plan: TilePlan, reference: DepthGrid, index: int):
        tile = plan.tiles[index]
        w, h = image.width, image.height
        request = DepthRequest(crop_image(image, tile), tile, (w, h), tile.w, tile.h, image_id)
        raw = self._infer(request, tile_index=index)
        alignment = self._align(crop(reference, tile), raw, index)
        logger.debug("tile %d %s: s=%.6g o=%.6g", index, tile, alignment.s, alignment.o)
        return raw, alignment

    def run(self, image: ImageGrid, image_id: str = "image") -> BoostResult:
        """
        Boost one image

        Images whose longest side is within passthrough_max_side go to the
        backend once. Larger images get a reference pass, one call per tile,
        alignment of each tile to the reference and a blend.

        Args:
            image: Input image
            image_id: Name passed to the backend with every request

        Returns:
            BoostResult with the depth grid and the per-tile alignments

        Raises:
            BackendError: If any backend call fails; tile failures carry the
                tile index
        """
        w, h = image.width, image.height
        if max(w, h) <= self.cfg.passthrough_max_side:
            logger.info("%s: %dx%d within pass-through limit, single backend call", image_id, w, h)
            depth = self._infer(DepthRequest(image, Rect.full(w, h), (w, h), w, h, image_id))
            return BoostResult(depth=depth, passthrough=True, backend_calls=1)

        plan = plan_tiles(w, h, self.cfg)
        reference = self._reference(image, image_id)
        workers = max(1, min(self.jobs, self.backend.max_concurrency, len(plan)))
        logger.info("%s: %dx%d -> %d tiles, %d worker(s)", image_id, w, h, len(plan), workers)

        indices = range(len(plan))
        if workers == 1:
            outcomes = [self._process_tile(image, image_id, plan, reference, i) for i in indices]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                outcomes = list(
                    pool.map(lambda i: self._process_tile(image, image_id, plan, reference, i), indices)
                )

        alignments = [alignment for _, alignment in outcomes]
        aligned = [alignment.apply(raw) for raw, alignment in outcomes]
        depth = blend(plan, aligned)
        if self.dump_dir is not None:
            self._dump(reference, outcomes, aligned)
        return BoostResult(
            depth=depth,
            passthrough=False,
            backend_calls=len(plan) + 1,
            plan=plan,
            alignments=alignments,
            reference=reference,
        )

    def _dump(self, reference: DepthGrid, outcomes, aligned: List[DepthGrid]) -> None:
        save_depth(reference, self.dump_dir / "reference.pfm")
        for i, ((raw, _), patch) in enumerate(zip(outcomes, aligned)):
            save_depth(raw, self.dump_dir / f"tile_{i:03d}_raw.pfm")
            save_depth(patch, self.dump_dir / f"tile_{i:03d}_aligned.pfm")
        logger.info("wrote intermediate stages to %s", self.dump_dir)


def simple_boost(
    image: ImageGrid,
    backend: DepthBackend,
    cfg: Optional[BoostConfig] = None,
    jobs: Optional[int] = None,
    image_id: str = "image",
) -> DepthGrid:
    """Depth grid of SimpleBoost(backend, cfg, jobs).run(image)"""
    return SimpleBoost(backend, cfg, jobs=jobs).run(image, image_id=image_id).depth
