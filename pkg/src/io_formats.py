"""
IO Formats Module
Readers and writers for depth grids, bimodal fields, images and dataset
manifests
"""

import io
import json
import re
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, ValidationError, model_validator

from src.bimodal import PLANES, BimodalField
from src.errors import FormatError, ManifestError, PfmChannelError
from src.grid_core import DepthGrid, ImageGrid

PNG16_INVALID = 0
PNG16_LEVELS = 65534

_PFM_HEADER = re.compile(rb"\A(P[A-Za-z])\s+(\d+)\s+(\d+)\s+(\S+)\s")


class DepthFileFormat(str, Enum):
    PFM_GRAY = "pfm"
    PNG16_WITH_SIDECAR = "png16"
    RAW_F32LE = "raw"

    @classmethod
    def for_path(cls, path: Union[str, Path]) -> "DepthFileFormat":
        """Format chosen by file suffix (.pfm, .png, .raw), case-insensitive"""
        suffix = Path(path).suffix.lower()
        mapping = {".pfm": cls.PFM_GRAY, ".png": cls.PNG16_WITH_SIDECAR, ".raw": cls.RAW_F32LE}
        if suffix not in mapping:
            raise FormatError(f"unknown depth file extension '{suffix}' ({path})")
        return mapping[suffix]


# ---------------------------------------------------------------------------
# PFM

def _parse_pfm_header(data: bytes) -> Tuple[bytes, int, int, str, int]:
    match = _PFM_HEADER.match(data)
    if not match:
        raise FormatError("malformed PFM header")
    tag, width, height, scale_token = match.groups()
    width, height = int(width), int(height)
    try:
        scale = float(scale_token)
    except ValueError:
        raise FormatError(f"malformed PFM scale line: {scale_token!r}") from None
    if width < 1 or height < 1:
        raise FormatError(f"PFM dimensions must be positive, got {width}x{height}")
    if scale == 0.0 or not np.isfinite(scale):
        raise FormatError(f"PFM scale must be finite and non-zero, got {scale}")
    # negative scale means little-endian payload
    dtype = "<f4" if scale < 0 else ">f4"
    return tag, width, height, dtype, match.end()


def _read_pfm_payload(data: bytes, offset: int, count: int, dtype: str) -> np.ndarray:
    needed = 4 * count
    payload = data[offset : offset + needed]
    if len(payload) < needed:
        raise FormatError(f"truncated PFM payload: expected {needed} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=dtype).astype(np.float32)


def read_pfm(data: bytes) -> DepthGrid:
    """
    Decode a single-channel ("Pf") PFM

    Args:
        data: Whole file contents. A negative scale in the header means
            little-endian samples, a positive one big-endian. Rows are
            stored bottom row first.

    Returns:
        DepthGrid in top-down order; NaN/Inf samples become invalid pixels

    Raises:
        PfmChannelError: For 3-channel "PF" files
        FormatError: For any other malformed header or a short payload
    """
    tag, width, height, dtype, offset = _parse_pfm_header(data)
    if tag == b"PF":
        raise PfmChannelError("3-channel PFM ('PF') cannot be read as a depth grid")
    if tag != b"Pf":
        raise FormatError(f"unsupported PFM header {tag!r}")
    values = _read_pfm_payload(data, offset, width * height, dtype)
    # rows are stored bottom-up
    return DepthGrid.from_array(np.flipud(values.reshape(height, width)))


def write_pfm(grid: DepthGrid) -> bytes:
    """Encode as little-endian "Pf"; invalid pixels are written as NaN"""
    values = np.where(grid.valid_mask, grid.values, np.float32(np.nan)).astype("<f4")
    header = f"Pf\n{grid.width} {grid.height}\n-1.0\n".encode("ascii")
    return header + np.flipud(values).tobytes()


def read_bimodal_pfm(data: bytes) -> BimodalField:
    """Decode the five-plane "Pm" variant (pi, mu1, b1, mu2, b2 interleaved)"""
    tag, width, height, dtype, offset = _parse_pfm_header(data)
    if tag != b"Pm":
        raise FormatError(f"expected a 'Pm' bimodal field header, got {tag!r}")
    values = _read_pfm_payload(data, offset, width * height * len(PLANES), dtype)
    return BimodalField(np.flipud(values.reshape(height, width, len(PLANES))))


def write_bimodal_pfm(field: BimodalField) -> bytes:
    """Encode a field as little-endian "Pm" with the five planes interleaved"""
    header = f"Pm\n{field.width} {field.height}\n-1.0\n".encode("ascii")
    return header + np.flipud(field.params).astype("<f4").tobytes()


# ---------------------------------------------------------------------------
# RAW float32 little-endian (row-major, top row first)

def write_raw_f32le(grid: DepthGrid) -> bytes:
    """Headerless little-endian float32, top row first; invalid pixels as NaN"""
    values = np.where(grid.valid_mask, grid.values, np.float32(np.nan))
    return values.astype("<f4").tobytes()


def read_raw_f32le(data: bytes, width: int, height: int) -> DepthGrid:
    """
    Decode headerless little-endian float32

    Args:
        data: Exactly 4 * width * height bytes
        width: Grid width, usually from the JSON sidecar
        height: Grid height, usually from the JSON sidecar

    Returns:
        DepthGrid with NaN samples marked invalid

    Raises:
        FormatError: If the payload size does not match
    """
    expected = 4 * width * height
    if len(data) != expected:
        raise FormatError(f"raw payload has {len(data)} bytes, expected {expected}")
    values = np.frombuffer(data, dtype="<f4").astype(np.float32)
    return DepthGrid.from_array(values.reshape(height, width))


# ---------------------------------------------------------------------------
# 16-bit PNG with a scale/offset sidecar

def write_png16(grid: DepthGrid) -> Tuple[bytes, Dict[str, Any]]:
    """Quantize valid values to 1..65535 (0 marks invalid pixels)"""
    valid = grid.valid_mask
    vals = grid.valid_values()
    q = np.zeros(grid.shape, dtype=np.uint16)
    if vals.size:
        lo, hi = float(vals.min()), float(vals.max())
        scale = (hi - lo) / PNG16_LEVELS
        if scale > 0:
            levels = np.rint((vals - lo) / scale)
        else:
            levels = np.zeros_like(vals)
        q[valid] = (levels + 1).astype(np.uint16)
        offset = lo - scale
    else:
        scale, offset = 0.0, 0.0
    buffer = io.BytesIO()
    Image.fromarray(q).save(buffer, format="PNG")
    sidecar = {"scale": scale, "offset": offset, "width": grid.width, "height": grid.height}
    return buffer.getvalue(), sidecar


def read_png16(data: bytes, sidecar: Dict[str, Any]) -> DepthGrid:
    """Dequantize a 16-bit PNG with value = offset + level * scale; level 0 is invalid"""
    try:
        scale = float(sidecar["scale"])
        offset = float(sidecar["offset"])
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"invalid PNG16 sidecar: {e}") from None
    try:
        with Image.open(io.BytesIO(data)) as img:
            q = np.asarray(img).astype(np.int64)
    except (UnidentifiedImageError, OSError) as e:
        raise FormatError(f"cannot decode PNG16 depth: {e}") from None
    if q.ndim != 2:
        raise FormatError("PNG16 depth must be single-channel")
    values = offset + q.astype(np.float64) * scale
    return DepthGrid.from_array(values, mask=q != PNG16_INVALID)


# ---------------------------------------------------------------------------
# Images

def read_image(data: bytes) -> ImageGrid:
    """Decode a PNG or PPM/PGM payload to channels in [0, 1]"""
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except (UnidentifiedImageError, OSError) as e:
        raise FormatError(f"unsupported image payload: {e}") from None
    if img.format not in ("PNG", "PPM"):
        raise FormatError(f"unsupported image format tag {img.format!r}")
    if img.mode in ("I;16", "I;16B", "I"):
        pixels = np.asarray(img).astype(np.float64) / 65535.0
        return ImageGrid(np.clip(pixels, 0.0, 1.0))
    if img.mode in ("1", "L", "LA"):
        img = img.convert("L")
    elif img.mode != "RGB":
        img = img.convert("RGB")
    return ImageGrid(np.asarray(img).astype(np.float32) / 255.0)


def encode_png(image: ImageGrid) -> bytes:
    """8-bit PNG of an image grid"""
    pixels = np.rint(np.clip(image.pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    if image.channels == 1:
        pixels = pixels[:, :, 0]
    buffer = io.BytesIO()
    Image.fromarray(pixels).save(buffer, format="PNG")
    return buffer.getvalue()


# ---------------------------------------------------------------------------
# Depth files on disk

def _sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def load_depth(path: Union[str, Path]) -> DepthGrid:
    """
    Read a depth file, dispatching on its suffix

    PNG16 and RAW files need a JSON sidecar next to them named
    "<file>.json".

    Args:
        path: .pfm, .png or .raw file

    Returns:
        The decoded DepthGrid

    Raises:
        FormatError: For an unknown suffix, a malformed payload or a missing
            or malformed sidecar
    """
    path = Path(path)
    fmt = DepthFileFormat.for_path(path)
    data = path.read_bytes()
    if fmt is DepthFileFormat.PFM_GRAY:
        return read_pfm(data)
    try:
        sidecar = json.loads(_sidecar_path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FormatError(f"missing sidecar {_sidecar_path(path)}") from None
    except (ValueError, RecursionError) as e:
        raise FormatError(f"malformed sidecar for {path}: {e}") from None
    if fmt is DepthFileFormat.PNG16_WITH_SIDECAR:
        return read_png16(data, sidecar)
    try:
        width, height = int(sidecar["width"]), int(sidecar["height"])
    except (KeyError, TypeError, ValueError):
        raise FormatError(f"raw sidecar for {path} lacks width/height") from None
    return read_raw_f32le(data, width, height)


def save_depth(grid: DepthGrid, path: Union[str, Path]) -> Path:
    """
    Write a depth file (and its sidecar when needed), creating parent directories

    Returns:
        The path written
    """
    path = Path(path)
    fmt = DepthFileFormat.for_path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt is DepthFileFormat.PFM_GRAY:
        path.write_bytes(write_pfm(grid))
        return path
    if fmt is DepthFileFormat.PNG16_WITH_SIDECAR:
        data, sidecar = write_png16(grid)
    else:
        data = write_raw_f32le(grid)
        sidecar = {"width": grid.width, "height": grid.height}
    path.write_bytes(data)
    _sidecar_path(path).write_text(json.dumps(sidecar, indent=2), encoding="utf-8")
    return path


def load_image(path: Union[str, Path]) -> ImageGrid:
    """Read a PNG or PPM image from disk"""
    return read_image(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Manifests

class ManifestEntry(BaseModel):
    """One sample; unknown keys are kept and written back"""

    model_config = ConfigDict(extra="allow")

    id: str = Field(min_length=1)
    image_path: str
    pred_path: Optional[str] = None
    gt_path: Optional[str] = None
    pairs_path: Optional[str] = None
    depth_cap: Optional[float] = Field(default=None, gt=0)
    gt_space: Literal["inverse_depth", "depth"] = "inverse_depth"


class Manifest(BaseModel):
    model_config = ConfigDict(extra="allow")

    entries: List[ManifestEntry] = Field(default_factory=list)
    _base_dir: Optional[Path] = PrivateAttr(default=None)

    @model_validator(mode="after")
    def _unique_ids(self) -> "Manifest":
        seen = set()
        duplicates = []
        for entry in self.entries:
            if entry.id in seen:
                duplicates.append(entry.id)
            seen.add(entry.id)
        if duplicates:
            raise ValueError(f"duplicate entry ids: {', '.join(sorted(set(duplicates)))}")
        return self

    @property
    def base_dir(self) -> Optional[Path]:
        return self._base_dir

    def resolve(self, path: Optional[str]) -> Optional[Path]:
        """Path relative to the manifest's directory (absolute paths unchanged)"""
        if path is None:
            return None
        candidate = Path(path)
        if candidate.is_absolute() or self._base_dir is None:
            return candidate
        return self._base_dir / candidate

    def validate_for_evaluation(self) -> None:
        """
        Every entry needs pred_path and at least one of gt_path or pairs_path

        Raises:
            ManifestError: Listing every offending entry
        """
        errors = []
        for entry in self.entries:
            if entry.gt_path is None and entry.pairs_path is None:
                errors.append(f"entry '{entry.id}' has neither gt_path nor pairs_path")
            if entry.pred_path is None:
                errors.append(f"entry '{entry.id}' has no pred_path")
        if errors:
            raise ManifestError(errors)


def _format_validation_error(error: ValidationError) -> List[str]:
    messages = []
    for item in error.errors():
        location = ".".join(str(part) for part in item.get("loc", ()))
        messages.append(f"{location or 'manifest'}: {item.get('msg')}")
    return messages


def read_manifest(text: Union[str, bytes], base_dir: Optional[Union[str, Path]] = None) -> Manifest:
    """
    Parse a JSON manifest

    Args:
        text: Manifest contents, str or UTF-8 bytes
        base_dir: Directory that relative paths resolve against

    Returns:
        Validated Manifest; unknown keys are kept on every entry

    Raises:
        ManifestError: For any input that is not a valid manifest. Parsing
            never fails with another exception type.
    """
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8")
        except UnicodeDecodeError as e:
            raise ManifestError([f"manifest is not valid UTF-8: {e}"]) from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ManifestError([f"syntax error at line {e.lineno}, column {e.colno}: {e.msg}"]) from None
    except RecursionError:
        raise ManifestError(["manifest nesting is too deep"]) from None
    except ValueError as e:
        raise ManifestError([f"manifest value cannot be parsed: {e}"]) from None
    if not isinstance(raw, dict):
        raise ManifestError(["manifest must be a JSON object with an 'entries' list"])
    try:
        manifest = Manifest.model_validate(raw)
    except ValidationError as e:
        raise ManifestError(_format_validation_error(e)) from None
    if base_dir is not None:
        manifest._base_dir = Path(base_dir)
    return manifest


def write_manifest(m: Manifest) -> str:
    """Serialize a manifest, unknown keys included"""
    data = m.model_dump(exclude_unset=True, exclude={"entries"})
    data["entries"] = [entry.model_dump(exclude_unset=True) for entry in m.entries]
    return json.dumps(data, indent=2)


def load_manifest(path: Union[str, Path]) -> Manifest:
    """Read a manifest file; relative paths resolve against its directory"""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise ManifestError([f"cannot read manifest {path}: {e}"]) from None
    return read_manifest(data, base_dir=path.parent)
