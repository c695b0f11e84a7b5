"""
Backends Module
Pluggable single-image depth estimators: analytic synthetic scenes,
precomputed directories and external programs
"""

import logging
import math
import os
import shlex
import shutil
import subprocess
import tempfile
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Optional, Tuple, Union
from urllib.parse import parse_qsl

import numpy as np
from dotenv import load_dotenv

from src.errors import BackendError, ConfigError, FormatError, MissingEntryError
from src.grid_core import DepthGrid, ImageGrid, Rect, resize_bilinear
from src.io_formats import encode_png, load_depth, read_pfm, save_depth, write_pfm
from src.losses import PerceptualBackend

logger = logging.getLogger(__name__)

TIMEOUT_ENV_VAR = "EFFDEPTH_BACKEND_TIMEOUT_SECS"
DEFAULT_TIMEOUT_SECS = 120.0
DEFAULT_NAMING = "{image_id}_crop_{x}_{y}_{w}_{h}{size_suffix}.pfm"

# Jitter is drawn on a 1/64 lattice so corrupted values stay exactly representable
JITTER_QUANTUM = 1.0 / 64.0


def default_timeout() -> float:
    """Timeout from the environment (or a .env file), else 120 s"""
    load_dotenv()
    raw = os.getenv(TIMEOUT_ENV_VAR, "")
    if not raw:
        return DEFAULT_TIMEOUT_SECS
    try:
        value = float(raw)
    except ValueError:
        raise ConfigError(f"{TIMEOUT_ENV_VAR} must be a number, got {raw!r}") from None
    if value <= 0:
        raise ConfigError(f"{TIMEOUT_ENV_VAR} must be positive, got {value}")
    return value


def resolve_timeout(timeout: Optional[Union[float, str]] = None) -> float:
    """Positive timeout in seconds; None falls back to default_timeout()"""
    if timeout is None:
        return default_timeout()
    try:
        value = float(timeout)
    except (TypeError, ValueError):
        raise ConfigError(f"backend timeout must be a number, got {timeout!r}") from None
    if not value > 0:
        raise ConfigError(f"backend timeout must be positive, got {value}")
    return value


@dataclass(frozen=True)
class DepthRequest:
    """One inference call: an image crop plus where it came from"""

    image: ImageGrid
    region: Rect
    source_size: Tuple[int, int]
    out_w: int
    out_h: int
    image_id: str = "image"

    @property
    def size_suffix(self) -> str:
        if (self.out_w, self.out_h) == (self.region.w, self.region.h):
            return ""
        return f"_{self.out_w}x{self.out_h}"

    def key(self, naming: str = DEFAULT_NAMING) -> str:
        """
        File name of this request under a DirectoryBackend naming scheme

        Args:
            naming: str.format template with image_id, x, y, w, h, out_w,
                out_h and size_suffix fields

        Returns:
            The formatted name, e.g. "img_0_crop_0_0_2048_1024_518x259.pfm"
        """
        r = self.region
        return naming.format(
            image_id=self.image_id,
            x=r.x,
            y=r.y,
            w=r.w,
            h=r.h,
            out_w=self.out_w,
            out_h=self.out_h,
            size_suffix=self.size_suffix,
        )


class DepthBackend(ABC):
    """Deterministic (image crop, output size) -> inverse-depth grid"""

    max_concurrency: int = 1
    native_size: Optional[int] = None

    @abstractmethod
    def infer(self, request: DepthRequest) -> DepthGrid:
        """Depth for the request at exactly out_w x out_h"""

    def __call__(self, request: DepthRequest) -> DepthGrid:
        return self.infer(request)


def check_response(request: DepthRequest, grid: DepthGrid) -> DepthGrid:
    """Reject a backend answer of the wrong size or with invalid pixels"""
    if (grid.width, grid.height) != (request.out_w, request.out_h):
        raise BackendError(
            f"backend returned {grid.width}x{grid.height}, "
            f"requested {request.out_w}x{request.out_h}"
        )
    if not grid.is_fully_valid:
        raise BackendError("backend returned invalid pixels")
    return grid


# ---------------------------------------------------------------------------
# Synthetic scenes

class SceneKind(str, Enum):
    RAMP = "ramp"
    RADIAL = "radial"
    SINUSOID = "sinusoid"


SCENE_DEFAULTS: Dict[SceneKind, Dict[str, float]] = {
    SceneKind.RAMP: {"a": 1.0, "bx": 1.0, "by": 0.0},
    SceneKind.RADIAL: {"a": 1.0, "b": 1.0, "cx": 0.5, "cy": 0.5, "sigma": 0.25},
    SceneKind.SINUSOID: {"a": 2.0, "b": 1.0, "fx": 2.0, "fy": 1.0},
}


@dataclass(frozen=True)
class JitterSpec:
    """Per-call affine corruption keyed by the crop rectangle"""

    seed: int = 0
    scale_range: Tuple[float, float] = (0.5, 2.0)
    offset_range: Tuple[float, float] = (-1.0, 1.0)

    def draw(self, request: DepthRequest) -> Tuple[float, float]:
        """Scale and offset for one call, reproducible from the seed and the request"""
        r = request.region
        rng = np.random.default_rng(
            [self.seed, r.x, r.y, r.w, r.h, request.out_w, request.out_h]
        )
        lo_s, hi_s = (round(v / JITTER_QUANTUM) for v in self.scale_range)
        lo_o, hi_o = (round(v / JITTER_QUANTUM) for v in self.offset_range)
        s = int(rng.integers(lo_s, hi_s + 1)) * JITTER_QUANTUM
        o = int(rng.integers(lo_o, hi_o + 1)) * JITTER_QUANTUM
        return s, o


@dataclass(frozen=True)
class SyntheticScene:
    """Analytic inverse depth over normalized image coordinates u = x/W, v = y/H"""

    kind: SceneKind = SceneKind.RAMP
    params: Dict[str, float] = field(default_factory=dict)
    jitter: Optional[JitterSpec] = None

    def __post_init__(self):
        kind = SceneKind(self.kind)
        object.__setattr__(self, "kind", kind)
        unknown = set(self.params) - set(SCENE_DEFAULTS[kind])
        if unknown:
            raise ConfigError(f"unknown {kind.value} scene parameters: {sorted(unknown)}")
        merged = {**SCENE_DEFAULTS[kind], **{k: float(v) for k, v in self.params.items()}}
        object.__setattr__(self, "params", merged)
        if not self._positive():
            raise ConfigError(f"{kind.value} scene is not strictly positive: {merged}")

    def _positive(self) -> bool:
        p = self.params
        if self.kind is SceneKind.RAMP:
            return p["a"] + min(p["bx"], 0.0) + min(p["by"], 0.0) > 0
        if self.kind is SceneKind.RADIAL:
            return p["sigma"] > 0 and p["a"] > 0 and p["a"] + min(p["b"], 0.0) > 0
        return p["a"] > abs(p["b"])

    def evaluate(self, region: Rect, source_size: Tuple[int, int], out_w: int, out_h: int) -> np.ndarray:
        """Inverse depth sampled at the output pixel centers of region"""
        width, height = source_size
        x = region.x + (np.arange(out_w, dtype=np.float64) + 0.5) * (region.w / out_w) - 0.5
        y = region.y + (np.arange(out_h, dtype=np.float64) + 0.5) * (region.h / out_h) - 0.5
        u = (x / width)[None, :]
        v = (y / height)[:, None]
        p = self.params
        if self.kind is SceneKind.RAMP:
            return p["a"] + p["bx"] * u + p["by"] * v
        if self.kind is SceneKind.RADIAL:
            r2 = (u - p["cx"]) ** 2 + (v - p["cy"]) ** 2
            return p["a"] + p["b"] * np.exp(-r2 / (2.0 * p["sigma"] ** 2))
        return p["a"] + p["b"] * np.sin(2 * math.pi * p["fx"] * u) * np.cos(2 * math.pi * p["fy"] * v)

    def truth(self, width: int, height: int) -> DepthGrid:
        """Ground truth at full source resolution"""
        return DepthGrid(self.evaluate(Rect.full(width, height), (width, height), width, height))


class SyntheticBackend(DepthBackend):
    """Analytic oracle; ignores pixel content and optionally jitters each call"""

    def __init__(self, scene: SyntheticScene, max_concurrency: int = 8, native_size: Optional[int] = None):
        self.scene = scene
        self.max_concurrency = max_concurrency
        self.native_size = native_size

    def jitter_for(self, request: DepthRequest) -> Tuple[float, float]:
        """Affine map applied to this request; identity without jitter"""
        if self.scene.jitter is None:
            return 1.0, 0.0
        return self.scene.jitter.draw(request)

    def infer(self, request: DepthRequest) -> DepthGrid:
        """Scene values over the request region, jittered when configured"""
        values = self.scene.evaluate(request.region, request.source_size, request.out_w, request.out_h)
        if self.scene.jitter is not None:
            s, o = self.scene.jitter.draw(request)
            values = s * values.astype(np.float32).astype(np.float64) + o
        return DepthGrid(values)


def synthetic_backend(scene: SyntheticScene, **kwargs) -> SyntheticBackend:
    """SyntheticBackend over scene; keyword arguments go to the constructor"""
    return SyntheticBackend(scene, **kwargs)


# ---------------------------------------------------------------------------
# Precomputed directory

class DirectoryBackend(DepthBackend):
    """Serves depth files named by (image id, crop rectangle, output size)"""

    def __init__(self, root_path: Union[str, Path], naming_scheme: str = DEFAULT_NAMING, max_concurrency: int = 4):
        self.root = Path(root_path)
        self.naming = naming_scheme
        self.max_concurrency = max_concurrency

    def infer(self, request: DepthRequest) -> DepthGrid:
        """
        Load the precomputed file for the request

        Args:
            request: Crop rectangle, output size and image id

        Returns:
            The stored grid, which must match the requested size exactly

        Raises:
            MissingEntryError: If no file exists under the expected name
            BackendError: If the file is malformed or has the wrong size
        """
        name = request.key(self.naming)
        path = self.root / name
        if not path.is_file():
            raise MissingEntryError(name, str(self.root))
        logger.debug("serving %s", path)
        try:
            grid = load_depth(path)
        except FormatError as e:
            raise BackendError(f"malformed precomputed depth {path}: {e}") from e
        return check_response(request, grid)


def directory_backend(root_path: Union[str, Path], naming_scheme: str = DEFAULT_NAMING) -> DirectoryBackend:
    """DirectoryBackend rooted at root_path"""
    return DirectoryBackend(root_path, naming_scheme)


class RecordingBackend(DepthBackend):
    """Forwards to another backend and stores every answer for DirectoryBackend"""

    def __init__(self, inner: DepthBackend, root_path: Union[str, Path], naming_scheme: str = DEFAULT_NAMING):
        self.inner = inner
        self.root = Path(root_path)
        self.naming = naming_scheme
        self.max_concurrency = inner.max_concurrency
        self.native_size = inner.native_size

    def infer(self, request: DepthRequest) -> DepthGrid:
        grid = self.inner.infer(request)
        save_depth(grid, self.root / request.key(self.naming))
        return grid


# ---------------------------------------------------------------------------
# External process

def _run_command(args, timeout: float) -> subprocess.CompletedProcess:
    try:
        return subprocess.run(args, capture_output=True, text=True, timeout=timeout)
    except subprocess.TimeoutExpired as e:
        stderr = e.stderr.decode(errors="replace") if isinstance(e.stderr, bytes) else (e.stderr or "")
        raise BackendError(f"external command timed out after {timeout:g} s", stderr=stderr) from None
    except OSError as e:
        raise BackendError(f"failed to spawn external command {args[0]!r}: {e}") from None


def _check_exit(completed: subprocess.CompletedProcess) -> None:
    if completed.returncode != 0:
        raise BackendError(
            f"external command exited with status {completed.returncode}: "
            f"{completed.stderr.strip()[-500:]}",
            exit_code=completed.returncode,
            stderr=completed.stderr,
        )


def _expand_template(template: str, **values) -> list:
    quoted = {k: shlex.quote(str(v)) for k, v in values.items()}
    try:
        return shlex.split(template.format(**quoted))
    except (KeyError, IndexError, ValueError) as e:
        raise ConfigError(f"bad command template {template!r}: {e}") from None


class ProcessBackend(DepthBackend):
    """
    Runs an external program once per call

    The template must contain {input} (an 8-bit PNG of the crop) and
    {output} (where the program writes a single-channel PFM). {x} {y} {w}
    {h} {width} {height} {source_width} {source_height} {image_id} are also
    available. Exit status 0 means success.
    """

    def __init__(
        self,
        command_template: str,
        io_dir: Optional[Union[str, Path]] = None,
        timeout: Optional[float] = None,
        max_concurrency: int = 1,
        native_size: Optional[int] = None,
    ):
        if "{input}" not in command_template or "{output}" not in command_template:
            raise ConfigError("command template needs {input} and {output} placeholders")
        self.template = command_template
        self.io_dir = Path(io_dir) if io_dir is not None else None
        self.timeout = resolve_timeout(timeout)
        self.max_concurrency = max_concurrency
        self.native_size = native_size

    def infer(self, request: DepthRequest) -> DepthGrid:
        """
        Run the external program once for the request

        The crop is written as an 8-bit PNG, the command is expanded and run in
        a fresh temporary directory, and the PFM it writes is read back. The
        directory is removed afterwards.

        Args:
            request: Crop, region and output size

        Returns:
            Grid of exactly out_w x out_h; other output sizes are resampled

        Raises:
            BackendError: On timeout, nonzero exit, missing or malformed output
        """
        if self.io_dir is not None:
            self.io_dir.mkdir(parents=True, exist_ok=True)
        workdir = Path(tempfile.mkdtemp(prefix="effdepth-", dir=self.io_dir))
        try:
            input_path = workdir / "input.png"
            output_path = workdir / "output.pfm"
            input_path.write_bytes(encode_png(request.image))
            r = request.region
            args = _expand_template(
                self.template,
                input=input_path,
                output=output_path,
                x=r.x,
                y=r.y,
                w=r.w,
                h=r.h,
                width=request.out_w,
                height=request.out_h,
                source_width=request.source_size[0],
                source_height=request.source_size[1],
                image_id=request.image_id,
            )
            logger.debug("running %s in %s", args, workdir)
            completed = _run_command(args, self.timeout)
            _check_exit(completed)
            try:
                grid = read_pfm(output_path.read_bytes())
            except FileNotFoundError:
                raise BackendError("external command wrote no output file", stderr=completed.stderr) from None
            except FormatError as e:
                raise BackendError(f"malformed output from external command: {e}", stderr=completed.stderr) from None
            if not grid.is_fully_valid:
                raise BackendError("external command produced invalid pixels")
            if (grid.width, grid.height) != (request.out_w, request.out_h):
                grid = resize_bilinear(grid, request.out_w, request.out_h)
            return grid
        finally:
            shutil.rmtree(workdir, ignore_errors=True)


def process_backend(command_template: str, io_dir: Optional[Union[str, Path]] = None, **kwargs) -> ProcessBackend:
    """ProcessBackend for command_template; keyword arguments go to the constructor"""
    return ProcessBackend(command_template, io_dir=io_dir, **kwargs)


class ProcessPerceptualBackend(PerceptualBackend):
    """
    Perceptual distance computed by an external program

    The template needs {a} and {b} (single-channel PFM maps in [-1, 1]) and
    {output}, where the program writes one decimal number.
    """

    def __init__(self, command_template: str, io_dir: Optional[Union[str, Path]] = None, timeout: Optional[float] = None):
        for placeholder in ("{a}", "{b}", "{output}"):
            if placeholder not in command_template:
                raise ConfigError(f"perceptual command template needs {placeholder}")
        self.template = command_template
        self.io_dir = Path(io_dir) if io_dir is not None else None
        self.timeout = resolve_timeout(timeout)

    def distance(self, a: DepthGrid, b: DepthGrid) -> float:
        workdir = Path(tempfile.mkdtemp(prefix="effdepth-lpips-", dir=self.io_dir))
        try:
            (workdir / "a.pfm").write_bytes(write_pfm(a))
            (workdir / "b.pfm").write_bytes(write_pfm(b))
            output = workdir / "distance.txt"
            args = _expand_template(self.template, a=workdir / "a.pfm", b=workdir / "b.pfm", output=output)
            completed = _run_command(args, self.timeout)
            _check_exit(completed)
            try:
                return float(output.read_text().strip())
            except (OSError, ValueError) as e:
                raise BackendError(f"perceptual command produced no distance: {e}", stderr=completed.stderr) from None
        finally:
            shutil.rmtree(workdir, ignore_errors=True)


# ---------------------------------------------------------------------------
# Spec strings

_TRUE = {"1", "true", "yes", "on"}


def _parse_synthetic(body: str) -> SyntheticBackend:
    kind_name, _, query = body.partition("?")
    try:
        kind = SceneKind(kind_name.strip().lower())
    except ValueError:
        raise ConfigError(f"unknown synthetic scene {kind_name!r}") from None
    options = dict(parse_qsl(query, keep_blank_values=True))
    try:
        seed = int(options.pop("seed", 0))
        jitter = options.pop("jitter", "0").lower() in _TRUE
        concurrency = int(options.pop("concurrency", 8))
        native = options.pop("native", None)
        native = int(native) if native else None
        params = {k: float(v) for k, v in options.items()}
    except ValueError as e:
        raise ConfigError(f"bad synthetic backend option: {e}") from None
    scene = SyntheticScene(kind, params, JitterSpec(seed=seed) if jitter else None)
    return synthetic_backend(scene, max_concurrency=concurrency, native_size=native)


def parse_backend_spec(
    spec: str,
    timeout: Optional[float] = None,
    io_dir: Optional[Union[str, Path]] = None,
) -> DepthBackend:
    """
    Build a backend from "synthetic:<scene>?k=v", "dir:<path>" or
    "cmd:<template>"
    """
    scheme, sep, body = spec.partition(":")
    if not sep or not body:
        raise ConfigError(f"malformed backend spec {spec!r}")
    scheme = scheme.strip().lower()
    if scheme == "synthetic":
        return _parse_synthetic(body)
    if scheme == "dir":
        return directory_backend(body)
    if scheme == "cmd":
        return process_backend(body, io_dir=io_dir, timeout=timeout)
    raise ConfigError(f"unknown backend scheme {scheme!r} in {spec!r}")
