"""Bayer and monochrome raw frames: packing, normalization, amplification.

A mosaiced frame is stored at full sensor resolution with one color sample
per pixel. Packing rearranges it into four half-resolution planes in the
canonical [R, G1, G2, B] order (greens in raster order within the 2x2 tile),
independent of the sensor's CFA phase, so the networks never see sensor
orientation.

Files use the headerless little-endian ``.raw`` layout with a JSON sidecar
``<stem>.meta.json`` carrying geometry, bit depth, CFA phase (``MONO`` for
filterless frames), black/white levels, and exposure time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DatasetError, ShapeError

CFA_PHASES = ("RGGB", "GRBG", "GBRG", "BGGR")
MONO_PHASE = "MONO"

RATIO_MIN = 1.0
RATIO_MAX = 300.0

DEFAULT_WIDTH = 1280
DEFAULT_HEIGHT = 1024

# (row, col) offsets of R, G1, G2, B within the 2x2 tile; greens keep raster
# order so the packed layout is a pure permutation of space_to_depth.
_PHASE_OFFSETS = {
    "RGGB": ((0, 0), (0, 1), (1, 0), (1, 1)),
    "GRBG": ((0, 1), (0, 0), (1, 1), (1, 0)),
    "GBRG": ((1, 0), (0, 0), (1, 1), (0, 1)),
    "BGGR": ((1, 1), (0, 1), (1, 0), (0, 0)),
}


@dataclass(frozen=True)
class BayerRaw:
    """Integer CFA-mosaiced sensor frame plus capture metadata."""

    width: int
    height: int
    data: np.ndarray  # [height, width] unsigned samples
    bit_depth: int
    black_level: int
    white_level: int
    cfa_phase: str
    exposure_time: float

    def __post_init__(self):
        if self.width % 2 or self.height % 2:
            raise ShapeError(f"frame dims must be even, got {self.width}x{self.height}")
        if self.data.shape != (self.height, self.width):
            raise ShapeError(f"data shape {self.data.shape} != {self.height}x{self.width}")
        if self.cfa_phase not in CFA_PHASES:
            raise ValueError(f"unknown CFA phase {self.cfa_phase!r}")
        if self.bit_depth not in (8, 16):
            raise ValueError(f"bit depth must be 8 or 16, got {self.bit_depth}")
        if not 0 <= self.black_level < self.white_level <= 2**self.bit_depth - 1:
            raise ValueError(
                f"need black_level < white_level <= {2**self.bit_depth - 1}, "
                f"got {self.black_level}/{self.white_level}"
            )
        if int(self.data.max(initial=0)) > self.white_level:
            raise ValueError("samples exceed white level")
        if self.exposure_time <= 0:
            raise ValueError("exposure time must be positive")


@dataclass
class PackedRaw:
    """Four half-resolution planes [R, G1, G2, B] as floats."""

    planes: np.ndarray  # [4, height/2, width/2]
    ratio_applied: float = 1.0

    def __post_init__(self):
        if self.planes.ndim != 3 or self.planes.shape[0] != 4:
            raise ShapeError(f"expected [4, h, w] planes, got {self.planes.shape}")


@dataclass
class MonoRaw:
    """Full-resolution filterless frame, values in [0, 1]."""

    data: np.ndarray  # [height, width]
    exposure_time: float = 1.0

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]


def normalize(raw: BayerRaw) -> np.ndarray:
    """Black-level-subtract and scale samples to [0, 1] (clamped)."""
    span = raw.white_level - raw.black_level
    out = (raw.data.astype(np.float64) - raw.black_level) / span
    return np.clip(out, 0.0, 1.0)


def pack_raw(plane: np.ndarray, phase: str) -> PackedRaw:
    """Split an H x W mosaic into canonical [R, G1, G2, B] half-res planes."""
    if phase not in _PHASE_OFFSETS:
        raise ValueError(f"unknown CFA phase {phase!r}")
    h, w = plane.shape
    if h % 2 or w % 2:
        raise ShapeError(f"pack_raw: dims must be even, got {h}x{w}")
    planes = np.stack(
        [plane[dy::2, dx::2] for dy, dx in _PHASE_OFFSETS[phase]]
    ).astype(np.float64)
    return PackedRaw(planes=planes)


def unpack_raw(packed: PackedRaw, phase: str) -> np.ndarray:
    """Exact inverse of :func:`pack_raw` for the same phase."""
    if phase not in _PHASE_OFFSETS:
        raise ValueError(f"unknown CFA phase {phase!r}")
    planes = packed.planes
    if planes.ndim != 3 or planes.shape[0] != 4:
        raise ShapeError(f"unpack_raw: expected 4 planes, got shape {planes.shape}")
    if len({p.shape for p in planes}) != 1:
        raise ShapeError("unpack_raw: plane dims differ")
    h, w = planes.shape[1] * 2, planes.shape[2] * 2
    out = np.empty((h, w), dtype=planes.dtype)
    for plane, (dy, dx) in zip(planes, _PHASE_OFFSETS[phase]):
        out[dy::2, dx::2] = plane
    return out


def amplify(packed: PackedRaw, ratio: float) -> PackedRaw:
    """Scale by the exposure ratio and clamp to [0, 1]."""
    if ratio < 1.0:
        raise ValueError(f"amplification ratio must be >= 1, got {ratio}")
    return PackedRaw(
        planes=np.clip(packed.planes * float(ratio), 0.0, 1.0),
        ratio_applied=packed.ratio_applied * float(ratio),
    )


def compute_ratio(input_exposure: float, gt_exposure: float) -> float:
    """Exposure-quotient amplification factor, clamped to [1, 300]."""
    if input_exposure <= 0 or gt_exposure <= 0:
        raise ValueError("exposures must be positive")
    return float(np.clip(gt_exposure / input_exposure, RATIO_MIN, RATIO_MAX))


# ---------------------------------------------------------------------------
# .raw + sidecar IO
# ---------------------------------------------------------------------------


@dataclass
class RawMeta:
    width: int
    height: int
    bit_depth: int
    cfa_phase: str
    exposure_time: float
    black_level: int | None = None
    white_level: int | None = None

    def resolved_levels(self) -> tuple[int, int]:
        black = 0 if self.black_level is None else self.black_level
        white = 2**self.bit_depth - 1 if self.white_level is None else self.white_level
        return black, white


def _meta_path(raw_path: Path) -> Path:
    return raw_path.with_name(raw_path.stem + ".meta.json")


def write_raw_file(path, samples: np.ndarray, meta: RawMeta):
    """Write little-endian samples plus the JSON sidecar."""
    path = Path(path)
    dtype = "<u1" if meta.bit_depth == 8 else "<u2"
    if samples.shape != (meta.height, meta.width):
        raise ShapeError(f"samples shape {samples.shape} != sidecar {meta.height}x{meta.width}")
    path.write_bytes(np.ascontiguousarray(samples, dtype=dtype).tobytes())
    sidecar = {
        "width": meta.width,
        "height": meta.height,
        "bit_depth": meta.bit_depth,
        "cfa_phase": meta.cfa_phase,
        "exposure_time": meta.exposure_time,
    }
    if meta.black_level is not None:
        sidecar["black_level"] = meta.black_level
    if meta.white_level is not None:
        sidecar["white_level"] = meta.white_level
    _meta_path(path).write_text(json.dumps(sidecar, indent=1))


def read_raw_file(path) -> tuple[np.ndarray, RawMeta]:
    """Read a .raw file via its sidecar; errors name the offending file."""
    path = Path(path)
    meta_path = _meta_path(path)
    if not path.exists():
        raise DatasetError(f"missing raw file {path}")
    if not meta_path.exists():
        raise DatasetError(f"missing sidecar {meta_path}")
    try:
        fields = json.loads(meta_path.read_text())
        meta = RawMeta(
            width=int(fields["width"]),
            height=int(fields["height"]),
            bit_depth=int(fields["bit_depth"]),
            cfa_phase=str(fields["cfa_phase"]),
            exposure_time=float(fields["exposure_time"]),
            black_level=fields.get("black_level"),
            white_level=fields.get("white_level"),
        )
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise DatasetError(f"bad sidecar {meta_path}: {exc}") from exc
    dtype = "<u1" if meta.bit_depth == 8 else "<u2"
    blob = path.read_bytes()
    expected = meta.width * meta.height * (1 if meta.bit_depth == 8 else 2)
    if len(blob) != expected:
        raise DatasetError(
            f"{path}: file is {len(blob)} bytes, sidecar implies {expected}"
        )
    samples = np.frombuffer(blob, dtype=dtype).reshape(meta.height, meta.width)
    return samples.astype(np.uint8 if meta.bit_depth == 8 else np.uint16), meta


def load_bayer(path) -> BayerRaw:
    samples, meta = read_raw_file(path)
    if meta.cfa_phase == MONO_PHASE:
        raise DatasetError(f"{path}: MONO frame where a Bayer frame was expected")
    black, white = meta.resolved_levels()
    return BayerRaw(
        width=meta.width,
        height=meta.height,
        data=samples,
        bit_depth=meta.bit_depth,
        black_level=black,
        white_level=white,
        cfa_phase=meta.cfa_phase,
        exposure_time=meta.exposure_time,
    )


def load_mono(path) -> MonoRaw:
    samples, meta = read_raw_file(path)
    if meta.cfa_phase != MONO_PHASE:
        raise DatasetError(f"{path}: expected a MONO frame, sidecar says {meta.cfa_phase}")
    black, white = meta.resolved_levels()
    data = np.clip((samples.astype(np.float64) - black) / (white - black), 0.0, 1.0)
    return MonoRaw(data=data, exposure_time=meta.exposure_time)
