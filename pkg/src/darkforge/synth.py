"""Synthetic paired-dataset generation in the MCR layout.

Each scene starts from a clean RGB image. The monochrome ground truth is its
luminance (BT.601 weighted sum) boosted by the filterless sensor's
sensitivity bonus; the color input frames are CFA mosaics exposed at each
bracket step through a Poisson-Gaussian sensor model and quantized. Frames
are written as headerless .raw files with JSON sidecars, the RGB ground
truth as 8-bit PNG, and a JSON manifest ties the triples together with
their amplification ratios.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import zoom

from .errors import DatasetError, ShapeError
from .raw import (
    BayerRaw,
    MONO_PHASE,
    MonoRaw,
    RawMeta,
    _PHASE_OFFSETS,
    compute_ratio,
    load_bayer,
    load_mono,
    read_raw_file,
    write_raw_file,
)

# Indoor bracket: shortest to longest; the longest is the ground truth.
DEFAULT_EXPOSURES = (1 / 256, 1 / 128, 1 / 64, 1 / 32, 1 / 16, 1 / 8, 1 / 4, 3 / 8)
DEFAULT_GT_EXPOSURE = 3 / 8

# Sensitivity bonus of the filterless sensor (photons not lost to the CFA).
MONO_SENSITIVITY = 1.5

LUMA_R, LUMA_G, LUMA_B = 0.299, 0.587, 0.114


@dataclass
class NoiseModel:
    """Poisson shot noise plus Gaussian read noise, seeded."""

    shot_gain: float = 4000.0  # electrons per normalized unit
    read_sigma: float = 0.003  # normalized units
    seed: int = 0

    def __post_init__(self):
        if self.shot_gain <= 0:
            raise ValueError("shot_gain must be positive")
        if self.read_sigma < 0:
            raise ValueError("read_sigma must be nonnegative")


@dataclass
class SceneSpec:
    rgb: np.ndarray  # [H, W, 3] clean floats in [0, 1]
    gt_exposure: float = DEFAULT_GT_EXPOSURE
    input_exposures: tuple = DEFAULT_EXPOSURES
    cfa_phase: str = "RGGB"
    scene_id: str = "scene"

    def __post_init__(self):
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ShapeError(f"scene image must be [H, W, 3], got {self.rgb.shape}")
        if any(e <= 0 for e in self.input_exposures) or self.gt_exposure <= 0:
            raise ValueError("exposures must be positive")
        if self.gt_exposure < max(self.input_exposures):
            raise ValueError("gt_exposure must cover the longest input exposure")


def rgb_to_mono(rgb: np.ndarray) -> np.ndarray:
    """Luminance as the BT.601 weighted sum of R, G, B."""
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ShapeError(f"expected [H, W, 3], got {rgb.shape}")
    return LUMA_R * rgb[:, :, 0] + LUMA_G * rgb[:, :, 1] + LUMA_B * rgb[:, :, 2]


def mosaic(rgb: np.ndarray, phase: str) -> np.ndarray:
    """Sample one channel per pixel following the CFA tile of ``phase``."""
    h, w = rgb.shape[:2]
    if h % 2 or w % 2:
        raise ShapeError(f"mosaic needs even dims, got {h}x{w}")
    plane = np.empty((h, w), dtype=rgb.dtype)
    offsets = _PHASE_OFFSETS[phase]
    for idx, chan in ((0, 0), (1, 1), (2, 1), (3, 2)):
        dy, dx = offsets[idx]
        plane[dy::2, dx::2] = rgb[dy::2, dx::2, chan]
    return plane


def expose(
    signal: np.ndarray,
    exposure: float,
    gt_exposure: float,
    noise: NoiseModel,
    bit_depth: int = 8,
    mono: bool = False,
    kappa: float = MONO_SENSITIVITY,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Simulate a capture at ``exposure`` and quantize to ``bit_depth``.

    The clean signal is referenced to ``gt_exposure``; shorter exposures
    scale it down before the Poisson draw. Monochrome frames receive the
    sensitivity bonus ``kappa`` before noise.
    """
    if exposure <= 0 or gt_exposure <= 0:
        raise ValueError("exposures must be positive")
    if exposure > gt_exposure:
        raise ValueError("exposure must not exceed the ground-truth exposure")
    if rng is None:
        rng = np.random.default_rng(noise.seed)
    scaled = signal * (exposure / gt_exposure)
    if mono:
        scaled = scaled * kappa
    counts = rng.poisson(np.clip(scaled, 0.0, None) * noise.shot_gain) / noise.shot_gain
    if noise.read_sigma > 0:
        counts = counts + rng.normal(0.0, noise.read_sigma, size=counts.shape)
    white = 2**bit_depth - 1
    quantized = np.rint(np.clip(counts, 0.0, 1.0) * white)
    return quantized.astype(np.uint8 if bit_depth == 8 else np.uint16)


def render_clean(signal: np.ndarray, bit_depth: int = 8, mono: bool = False,
                 kappa: float = MONO_SENSITIVITY) -> np.ndarray:
    """Noiseless full-exposure rendering (quantization only) for GT frames."""
    scaled = signal * kappa if mono else signal
    white = 2**bit_depth - 1
    return np.rint(np.clip(scaled, 0.0, 1.0) * white).astype(
        np.uint8 if bit_depth == 8 else np.uint16
    )


def make_scene(
    seed: int,
    height: int = 1024,
    width: int = 1280,
    white_background: bool = False,
) -> np.ndarray:
    """Smooth random RGB test scene.

    The default is a band-limited color field; ``white_background`` gives a
    bright page with a few dark smooth blobs, the regime where transposed
    convolutions show their grid artifacts.
    """
    rng = np.random.default_rng(seed)
    cells = 6
    low = rng.uniform(0.15, 0.85, size=(cells, cells, 3))
    img = zoom(low, (height / cells, width / cells, 1), order=1)[:height, :width]
    if white_background:
        shade = zoom(rng.uniform(0.0, 1.0, size=(cells, cells)), (height / cells, width / cells), order=1)
        shade = np.clip((shade[:height, :width] - 0.55) / 0.45, 0.0, 1.0)
        img = 1.0 - shade[:, :, None] * (1.0 - 0.25 * img)
    return np.clip(img, 0.0, 1.0)


def generate_dataset(
    scenes: list[SceneSpec],
    noise: NoiseModel,
    out_dir,
    bit_depth: int = 8,
) -> Path:
    """Write per-scene brackets, ground truths, and the manifest.

    Every input exposure yields one Bayer .raw + sidecar; each scene adds a
    noiseless monochrome GT (.raw, MONO phase) and an RGB GT (8-bit PNG).
    Returns the manifest path.
    """
    if not scenes:
        raise ValueError("no scenes given")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(noise.seed)
    white = 2**bit_depth - 1
    entries = []
    for scene in scenes:
        h, w = scene.rgb.shape[:2]
        mono_signal = rgb_to_mono(scene.rgb)
        plane = mosaic(scene.rgb, scene.cfa_phase)

        mono_name = f"{scene.scene_id}_mono_gt.raw"
        write_raw_file(
            out_dir / mono_name,
            render_clean(mono_signal, bit_depth, mono=True),
            RawMeta(w, h, bit_depth, MONO_PHASE, scene.gt_exposure, 0, white),
        )
        rgb_name = f"{scene.scene_id}_rgb_gt.png"
        Image.fromarray(np.rint(scene.rgb * 255.0).astype(np.uint8)).save(out_dir / rgb_name)

        for exposure in scene.input_exposures:
            samples = expose(plane, exposure, scene.gt_exposure, noise, bit_depth, rng=rng)
            denom = f"{int(round(1 / exposure))}" if exposure < 1 else f"{exposure:g}s"
            input_name = f"{scene.scene_id}_in_{denom}.raw"
            write_raw_file(
                out_dir / input_name,
                samples,
                RawMeta(w, h, bit_depth, scene.cfa_phase, exposure, 0, white),
            )
            entries.append(
                {
                    "input_raw": input_name,
                    "input_meta": input_name.replace(".raw", ".meta.json"),
                    "mono_gt": mono_name,
                    "rgb_gt": rgb_name,
                    "ratio": compute_ratio(exposure, scene.gt_exposure),
                    "scene_id": scene.scene_id,
                    "exposure": exposure,
                }
            )
    manifest_path = out_dir / "dataset.json"
    manifest_path.write_text(json.dumps(entries, indent=1))
    return manifest_path


@dataclass
class LoadedSample:
    bayer: BayerRaw
    mono: MonoRaw
    rgb: np.ndarray  # [H, W, 3] floats
    ratio: float
    scene_id: str


class McrDataset:
    """Lazy view over a generated dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        manifest_path = self.root / "dataset.json"
        if not manifest_path.exists():
            raise DatasetError(f"no manifest at {manifest_path}")
        try:
            self.entries = json.loads(manifest_path.read_text())
        except json.JSONDecodeError as exc:
            raise DatasetError(f"unreadable manifest {manifest_path}: {exc}") from exc
        if not isinstance(self.entries, list) or not self.entries:
            raise DatasetError(f"manifest {manifest_path} lists no samples")

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i: int) -> LoadedSample:
        entry = self.entries[i]
        bayer = load_bayer(self.root / entry["input_raw"])
        mono = load_mono(self.root / entry["mono_gt"])
        rgb = np.asarray(Image.open(self.root / entry["rgb_gt"]), dtype=np.float64) / 255.0
        if mono.data.shape != (bayer.height, bayer.width) or rgb.shape[:2] != (
            bayer.height,
            bayer.width,
        ):
            raise DatasetError(
                f"misaligned triple for {entry['input_raw']}: "
                f"bayer {bayer.height}x{bayer.width}, mono {mono.data.shape}, rgb {rgb.shape}"
            )
        return LoadedSample(
            bayer=bayer,
            mono=mono,
            rgb=rgb,
            ratio=float(entry["ratio"]),
            scene_id=entry["scene_id"],
        )


def load_mcr(root) -> McrDataset:
    """Open a dataset directory, validating the manifest."""
    return McrDataset(root)
