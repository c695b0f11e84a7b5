"""
Errors Module
Exception hierarchy shared by every toolkit module
"""

from typing import Iterable, Optional


class EffDepthError(Exception):
    """Base class for all toolkit errors"""


class BoundsError(EffDepthError, ValueError):
    """Rectangle or coordinate outside a grid"""


class UnsupportedInputError(EffDepthError, ValueError):
    """Input the operation is not defined for (e.g. masked holes)"""


class EmptyInputError(EffDepthError, ValueError):
    """No valid values to operate on"""


class DegenerateInputError(EffDepthError, ValueError):
    """Input has no spread where spread is required"""


class DegenerateScaleError(DegenerateInputError):
    """Mean absolute deviation is zero"""


class DegenerateRangeError(DegenerateInputError):
    """Min equals max"""


class InvalidParameterError(EffDepthError, ValueError):
    """Mixture parameters violating their invariants"""


class DimensionMismatchError(EffDepthError, ValueError):
    """Two grids (or a grid and a tile) disagree on dimensions"""


class InvalidGridError(EffDepthError, ValueError):
    """Grid construction with inconsistent fields"""


class FormatError(EffDepthError, ValueError):
    """Malformed or unsupported serialized payload"""


class PfmChannelError(FormatError):
    """Three-channel PFM ("PF") given where a single-channel grid is expected"""


class ConfigError(EffDepthError, ValueError):
    """Invalid configuration or command-line usage"""


class ManifestError(EffDepthError, ValueError):
    """Manifest parse or validation failure"""

    def __init__(self, errors: Iterable[str]):
        errors = list(errors)
        super().__init__("\n".join(errors))
        self.errors = tuple(errors)


class BackendError(EffDepthError):
    """Depth backend invocation failure"""

    def __init__(
        self,
        message: str,
        tile_index: Optional[int] = None,
        exit_code: Optional[int] = None,
        stderr: str = "",
    ):
        if tile_index is not None:
            message = f"tile {tile_index}: {message}"
        super().__init__(message)
        self.tile_index = tile_index
        self.exit_code = exit_code
        self.stderr = stderr

    def for_tile(self, tile_index: int) -> "BackendError":
        """Copy of this error tagged with the tile that produced it"""
        err = BackendError(
            str(self), tile_index=tile_index, exit_code=self.exit_code, stderr=self.stderr
        )
        err.__cause__ = self
        return err


class MissingEntryError(BackendError):
    """Directory backend has no file for the requested key"""

    def __init__(self, expected_filename: str, root: str):
        super().__init__(f"missing precomputed depth '{expected_filename}' in {root}")
        self.expected_filename = expected_filename
