"""The two networks and their assembly into the full enhancement pipeline.

The monochrome-synthesis network (DBF) is a U-net mapping packed color raw
[N, 4, H/2, W/2] to a full-resolution monochrome frame [N, 1, H, W]. The
fusion network (DBLE) runs two separate encoders, one over the packed color
raw and one over the depth-packed monochrome frame, and a single decoder
whose per-level skip concatenations are recalibrated by channel attention
before convolution; its head emits the [N, 3, H, W] RGB image.

Encoder widths double per level from ``base_channels``, with a bottleneck at
``base_channels * 2**depth``; every level is two 3x3 convolutions with
LeakyReLU(0.2). Heads are 1x1 convolutions feeding a depth-to-space(2)
upscale, which restores the original sensor resolution.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.ndimage import convolve

from . import blocks
from .autodiff import (
    Tensor,
    no_grad,
    read_checkpoint_bytes,
    write_checkpoint_bytes,
)
from .blocks import CAParams, Conv2dParams
from .errors import ShapeError
from .raw import BayerRaw, _PHASE_OFFSETS, normalize, pack_raw

LOSSES = ("l1", "l2")
INPUT_SPACES = ("raw", "srgb")

GAMMA = 1.0 / 2.2  # display gamma for the sRGB ablation preprocess


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 32
    depth: int = 4
    use_ca: bool = True
    use_ratio: bool = True
    use_packraw: bool = True
    use_dbf: bool = True
    loss: str = "l1"
    input_space: str = "raw"

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 4 or self.base_channels % 4:
            raise ValueError(f"base_channels must be a multiple of 4 >= 4, got {self.base_channels}")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.input_space not in INPUT_SPACES:
            raise ValueError(f"input_space must be one of {INPUT_SPACES}")

    @property
    def color_channels(self) -> int:
        # raw input packs to 4 planes; the sRGB ablation depth-packs 3
        # channels into 12.
        return 4 if self.input_space == "raw" else 12

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


# Ablation presets: one per row of the study this reproduces structurally.
PRESETS: dict[str, ModelConfig] = {
    "baseline": ModelConfig(),
    "wo-ca": ModelConfig(use_ca=False),
    "wo-ratio": ModelConfig(use_ratio=False),
    "wo-packraw": ModelConfig(use_packraw=False),
    "l2": ModelConfig(loss="l2"),
    "wo-dbf": ModelConfig(use_dbf=False),
    "srgb": ModelConfig(input_space="srgb"),
}


@dataclass
class ModelParams:
    """Named learnable tensors for both networks, insertion-ordered."""

    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def total_count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def zero_grads(self):
        # zero in place when a buffer exists so step loops reuse memory
        for t in self.tensors.values():
            if t.grad is not None:
                t.grad.fill(0.0)


def _level_widths(config: ModelConfig) -> list[int]:
    return [config.base_channels * 2**i for i in range(config.depth)]


def build_params(config: ModelConfig, seed: int) -> ModelParams:
    """Deterministically initialize all parameters for the configuration."""
    rng = np.random.default_rng(seed)
    params = ModelParams()

    def conv(name, cin, cout, k):
        w = blocks.he_uniform(rng, (cout, cin, k, k), fan_in=cin * k * k)
        params.tensors[f"{name}.weight"] = Tensor(w, requires_grad=True)
        params.tensors[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True)

    def up(name, cin, cout):
        w = blocks.he_uniform(rng, (cin, cout, 2, 2), fan_in=cin * 4)
        params.tensors[f"{name}.weight"] = Tensor(w, requires_grad=True)
        params.tensors[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True)

    def attention(name, channels):
        r = blocks.attention_reduction(channels)
        hidden = channels // r
        params.tensors[f"{name}.w_reduce"] = Tensor(
            blocks.he_uniform(rng, (hidden, channels), fan_in=channels), requires_grad=True
        )
        params.tensors[f"{name}.b_reduce"] = Tensor(np.zeros(hidden), requires_grad=True)
        params.tensors[f"{name}.w_expand"] = Tensor(
            blocks.he_uniform(rng, (channels, hidden), fan_in=hidden), requires_grad=True
        )
        params.tensors[f"{name}.b_expand"] = Tensor(np.zeros(channels), requires_grad=True)

    def encoder(prefix, cin):
        w_prev = cin
        for i, w in enumerate(_level_widths(config), start=1):
            conv(f"{prefix}{i}.conv1", w_prev, w, 3)
            conv(f"{prefix}{i}.conv2", w, w, 3)
            w_prev = w

    widths = _level_widths(config)
    mid = config.base_channels * 2**config.depth
    cin = config.color_channels

    if config.use_dbf:
        encoder("dbf.enc", cin)
        conv("dbf.mid.conv1", widths[-1], mid, 3)
        conv("dbf.mid.conv2", mid, mid, 3)
        for i in range(config.depth, 0, -1):
            w = widths[i - 1]
            up(f"dbf.dec{i}.up", 2 * w, w)
            conv(f"dbf.dec{i}.conv1", 2 * w, w, 3)
            conv(f"dbf.dec{i}.conv2", w, w, 3)
        conv("dbf.head", config.base_channels, 4, 1)

    encoder("dble.color", cin)
    encoder("dble.mono", 4)
    if config.use_ca:
        attention("dble.mid.ca", 2 * widths[-1])
    conv("dble.mid.conv1", 2 * widths[-1], mid, 3)
    conv("dble.mid.conv2", mid, mid, 3)
    for i in range(config.depth, 0, -1):
        w = widths[i - 1]
        up(f"dble.dec{i}.up", 2 * w, w)
        if config.use_ca:
            attention(f"dble.dec{i}.ca", 3 * w)
        conv(f"dble.dec{i}.conv1", 3 * w, w, 3)
        conv(f"dble.dec{i}.conv2", w, w, 3)
    conv("dble.head", config.base_channels, 12, 1)

    return params


def _conv(params: ModelParams, name: str, padding: int = 0) -> Conv2dParams:
    return Conv2dParams(params[f"{name}.weight"], params[f"{name}.bias"], 1, padding)


def _attention(params: ModelParams, name: str) -> CAParams:
    c = params[f"{name}.b_expand"].data.shape[0]
    hidden = params[f"{name}.b_reduce"].data.shape[0]
    return CAParams(
        w_reduce=params[f"{name}.w_reduce"],
        b_reduce=params[f"{name}.b_reduce"],
        w_expand=params[f"{name}.w_expand"],
        b_expand=params[f"{name}.b_expand"],
        reduction=c // hidden,
    )


def _conv_pair(h: Tensor, params: ModelParams, name: str) -> Tensor:
    h = blocks.leaky_relu(blocks.conv2d(h, _conv(params, f"{name}.conv1", padding=1)))
    return blocks.leaky_relu(blocks.conv2d(h, _conv(params, f"{name}.conv2", padding=1)))


def _run_encoder(h: Tensor, params: ModelParams, prefix: str, depth: int):
    skips = []
    for i in range(1, depth + 1):
        h = _conv_pair(h, params, f"{prefix}{i}")
        skips.append(h)
        h = blocks.maxpool2(h)
    return h, skips


def _check_grid(x: Tensor, config: ModelConfig, what: str):
    h, w = x.data.shape[2], x.data.shape[3]
    step = 2**config.depth
    if h % step or w % step or h < step or w < step:
        raise ShapeError(
            f"{what}: spatial dims {h}x{w} must be positive multiples of 2^depth={step}"
        )


def _dbf_unclamped(a_color: Tensor, params: ModelParams, config: ModelConfig) -> Tensor:
    if a_color.data.shape[1] != config.color_channels:
        raise ShapeError(
            f"dbf: expected {config.color_channels} input channels, got {a_color.data.shape[1]}"
        )
    _check_grid(a_color, config, "dbf")
    h, skips = _run_encoder(a_color, params, "dbf.enc", config.depth)
    h = _conv_pair(h, params, "dbf.mid")
    for i in range(config.depth, 0, -1):
        h = blocks.transposed_conv2(h, _conv(params, f"dbf.dec{i}.up"))
        h = blocks.concat_channels([h, skips[i - 1]])
        h = _conv_pair(h, params, f"dbf.dec{i}")
    h = blocks.conv2d(h, _conv(params, "dbf.head"))
    return blocks.depth_to_space(h, 2)


def dbf_forward(a_color: Tensor, params: ModelParams, config: ModelConfig, train: bool = False) -> Tensor:
    """Packed color raw [N,4,H/2,W/2] -> monochrome frame [N,1,H,W].

    Training output is unclamped so gradients flow; inference clamps to [0,1].
    """
    out = _dbf_unclamped(a_color, params, config)
    return out if train else blocks.clamp01(out)


def _dble_unclamped(
    a_color: Tensor, a_mono: Tensor, params: ModelParams, config: ModelConfig
) -> Tensor:
    n, _, hh, ww = a_color.data.shape
    if a_mono.data.shape != (n, 1, 2 * hh, 2 * ww):
        raise ShapeError(
            f"dble: mono input {a_mono.data.shape} must be [N,1,{2 * hh},{2 * ww}] "
            f"for color input {a_color.data.shape}"
        )
    _check_grid(a_color, config, "dble")
    mono_packed = blocks.space_to_depth(a_mono, 2)
    hc, color_skips = _run_encoder(a_color, params, "dble.color", config.depth)
    hm, mono_skips = _run_encoder(mono_packed, params, "dble.mono", config.depth)
    h = blocks.concat_channels([hc, hm])
    if config.use_ca:
        h = blocks.channel_attention(h, _attention(params, "dble.mid.ca"))
    h = _conv_pair(h, params, "dble.mid")
    for i in range(config.depth, 0, -1):
        h = blocks.transposed_conv2(h, _conv(params, f"dble.dec{i}.up"))
        h = blocks.concat_channels([h, color_skips[i - 1], mono_skips[i - 1]])
        if config.use_ca:
            h = blocks.channel_attention(h, _attention(params, f"dble.dec{i}.ca"))
        h = _conv_pair(h, params, f"dble.dec{i}")
    h = blocks.conv2d(h, _conv(params, "dble.head"))
    return blocks.depth_to_space(h, 2)


def dble_forward(
    a_color: Tensor,
    a_mono: Tensor,
    params: ModelParams,
    config: ModelConfig,
    train: bool = False,
) -> Tensor:
    """Fuse packed color raw and the monochrome frame into [N,3,H,W] RGB."""
    out = _dble_unclamped(a_color, a_mono, params, config)
    return out if train else blocks.clamp01(out)


def forward_joint(
    color: Tensor,
    mono_proxy: Tensor | None,
    params: ModelParams,
    config: ModelConfig,
    train: bool = False,
) -> tuple[Tensor, Tensor]:
    """Run both networks; the fusion net consumes the unclamped mono frame."""
    if config.use_dbf:
        mono = _dbf_unclamped(color, params, config)
    else:
        if mono_proxy is None:
            raise ValueError("use_dbf=False requires a mono proxy input")
        mono = mono_proxy
    rgb = _dble_unclamped(color, mono, params, config)
    if train:
        return mono, rgb
    return blocks.clamp01(mono), blocks.clamp01(rgb)


# ---------------------------------------------------------------------------
# Input preparation (packing / ablation preprocesses)
# ---------------------------------------------------------------------------

_G_KERNEL = np.array([[0.0, 0.25, 0.0], [0.25, 1.0, 0.25], [0.0, 0.25, 0.0]])
_RB_KERNEL = np.array([[0.25, 0.5, 0.25], [0.5, 1.0, 0.5], [0.25, 0.5, 0.25]])


def demosaic_bilinear(plane: np.ndarray, phase: str) -> np.ndarray:
    """Fixed bilinear CFA interpolation, for the sRGB ablation only."""
    h, w = plane.shape
    offsets = _PHASE_OFFSETS[phase]
    rgb = np.zeros((h, w, 3))
    for idx, chan in ((0, 0), (1, 1), (2, 1), (3, 2)):
        dy, dx = offsets[idx]
        mask = np.zeros((h, w))
        mask[dy::2, dx::2] = plane[dy::2, dx::2]
        rgb[:, :, chan] += mask
    for chan, kernel in ((0, _RB_KERNEL), (1, _G_KERNEL), (2, _RB_KERNEL)):
        rgb[:, :, chan] = convolve(rgb[:, :, chan], kernel, mode="mirror")
    return np.clip(rgb, 0.0, 1.0)


def _space_to_depth_np(img: np.ndarray) -> np.ndarray:
    """[H, W] or [H, W, C] -> [C*4, H/2, W/2] in raster tile order."""
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    chans = img.transpose(2, 0, 1)
    out = np.empty((c * 4, h // 2, w // 2))
    for ci in range(c):
        for k, (dy, dx) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            out[ci * 4 + k] = chans[ci, dy::2, dx::2]
    return out


def prepare_network_inputs(
    plane: np.ndarray, phase: str, ratio: float, config: ModelConfig
) -> tuple[np.ndarray, np.ndarray | None]:
    """Normalized mosaic -> (color input [C, H/2, W/2], mono proxy or None).

    The mono proxy is only produced when the mono-synthesis net is ablated
    away: a bilinear 2x upsample of the green-average plane (raw input) or
    the luminance plane (sRGB input).
    """
    if plane.ndim != 2 or plane.shape[0] % 2 or plane.shape[1] % 2:
        raise ShapeError(f"expected an even-dimensioned mosaic plane, got {plane.shape}")
    proxy = None
    if config.input_space == "srgb":
        rgb = demosaic_bilinear(plane, phase) ** GAMMA
        if config.use_ratio:
            rgb = np.clip(rgb * ratio, 0.0, 1.0)
        color = _space_to_depth_np(rgb)
        if not config.use_dbf:
            proxy = 0.299 * rgb[:, :, 0] + 0.587 * rgb[:, :, 1] + 0.114 * rgb[:, :, 2]
    else:
        if config.use_packraw:
            color = pack_raw(plane, phase).planes
            greens = (color[1] + color[2]) / 2.0
        else:
            color = _space_to_depth_np(plane)
            offsets = _PHASE_OFFSETS[phase]
            g1 = offsets[1][0] * 2 + offsets[1][1]
            g2 = offsets[2][0] * 2 + offsets[2][1]
            greens = (color[g1] + color[g2]) / 2.0
        if config.use_ratio:
            color = np.clip(color * ratio, 0.0, 1.0)
            greens = np.clip(greens * ratio, 0.0, 1.0)
        if not config.use_dbf:
            proxy = blocks.bilinear_up2_array(greens)
    return color, proxy


def pipeline_forward(
    bayer: BayerRaw, ratio: float, params: ModelParams, config: ModelConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Full inference on one frame: (mono [H, W], rgb [H, W, 3]) in [0, 1]."""
    if ratio < 1.0:
        raise ValueError(f"ratio must be >= 1, got {ratio}")
    plane = normalize(bayer)
    color, proxy = prepare_network_inputs(plane, bayer.cfa_phase, ratio, config)
    with no_grad():
        color_t = Tensor(color[None])
        proxy_t = Tensor(proxy[None, None]) if proxy is not None else None
        mono_t, rgb_t = forward_joint(color_t, proxy_t, params, config, train=False)
    return mono_t.data[0, 0], rgb_t.data[0].transpose(1, 2, 0)


# ---------------------------------------------------------------------------
# Checkpointing: a JSON config line followed by the binary parameter block
# ---------------------------------------------------------------------------


def save_model(path, config: ModelConfig, params: ModelParams):
    blob = (config.to_json() + "\n").encode("utf-8") + write_checkpoint_bytes(params.tensors)
    with open(path, "wb") as fh:
        fh.write(blob)


def load_model(path) -> tuple[ModelConfig, ModelParams]:
    with open(path, "rb") as fh:
        blob = fh.read()
    newline = blob.index(b"\n")
    config = ModelConfig.from_json(blob[:newline].decode("utf-8"))
    arrays = read_checkpoint_bytes(blob[newline + 1 :])
    params = ModelParams({name: Tensor(arr, requires_grad=True) for name, arr in arrays.items()})
    return config, params


def attention_parameter_count(params: ModelParams) -> int:
    return sum(t.data.size for name, t in params.items() if ".ca." in name)
