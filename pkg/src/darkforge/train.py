"""Joint training: losses, Adam, phase-preserving crops, and the step loop.

Both networks are optimized together on the unweighted sum of the mono and
RGB reconstruction losses (the mono term is dropped when the mono-synthesis
net is ablated away). Crops are sampled on even sensor coordinates so the
CFA tile positions survive the windowing, and every run is bit-deterministic
given (seed, config, dataset order).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .models import (
    ModelConfig,
    ModelParams,
    build_params,
    dbf_forward,
    dble_forward,
    forward_joint,
    prepare_network_inputs,
    save_model,
)
from .raw import BayerRaw, MonoRaw, normalize

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_malloc_tuned = False


def _enable_malloc_reuse():
    """Keep large allocations in the arena across steps.

    The step loop churns through ~100 MB of same-sized temporaries per
    iteration; with glibc defaults those round-trip through mmap/munmap and
    the fault storms dominate the step time.
    """
    global _malloc_tuned
    if _malloc_tuned:
        return
    _malloc_tuned = True
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, -1)  # M_TRIM_THRESHOLD
    except OSError:  # non-glibc platform; harmless to skip
        pass


@dataclass
class TrainConfig:
    steps: int = 500
    lr_initial: float = 1e-4
    lr_after_converge: float = 1e-5
    lr_switch_step: int | None = None  # default: 80% of steps
    weight_decay: float = 0.0
    crop: int = 512
    batch: int = 1
    seed: int = 0
    loss: str | None = None  # None: follow the model config

    def __post_init__(self):
        if self.crop % 2:
            raise ValueError(f"crop must be even, got {self.crop}")
        if self.lr_initial <= 0 or self.lr_after_converge <= 0:
            raise ValueError("learning rates must be positive")
        if self.steps < 0 or self.batch < 1:
            raise ValueError("steps must be >= 0 and batch >= 1")

    def switch_step(self) -> int:
        if self.lr_switch_step is not None:
            return self.lr_switch_step
        return int(0.8 * self.steps)


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute deviation."""
    return ad.reduce_mean(ad.absolute(ad.sub(pred, target)))


def l2_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error."""
    return ad.reduce_mean(ad.square(ad.sub(pred, target)))


LOSS_FNS = {"l1": l1_loss, "l2": l2_loss}


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    scratch: np.ndarray | None = None


def init_adam(params: ModelParams) -> AdamState:
    state = AdamState()
    largest = 1
    for name, tensor in params.items():
        state.m[name] = np.zeros_like(tensor.data)
        state.v[name] = np.zeros_like(tensor.data)
        largest = max(largest, tensor.data.size)
    state.scratch = np.empty(largest)
    return state


def adam_step(params: ModelParams, state: AdamState, lr: float, weight_decay: float = 0.0):
    """Bias-corrected Adam update in place; requires fresh gradients."""
    state.t += 1
    bc1 = 1.0 - ADAM_BETA1**state.t
    bc2 = 1.0 - ADAM_BETA2**state.t
    if state.scratch is None:
        state.scratch = np.empty(max(t.data.size for t in params.tensors.values()))
    for name, tensor in params.items():
        if tensor.grad is None:
            raise RuntimeError(f"adam_step: no gradient for parameter {name!r}")
        g = tensor.grad
        if weight_decay:
            g = g + weight_decay * tensor.data
        m = state.m[name]
        v = state.v[name]
        scratch = state.scratch[: g.size].reshape(g.shape)
        m *= ADAM_BETA1
        np.multiply(g, 1.0 - ADAM_BETA1, out=scratch)
        m += scratch
        v *= ADAM_BETA2
        np.square(g, out=scratch)
        scratch *= 1.0 - ADAM_BETA2
        v += scratch
        np.divide(v, bc2, out=scratch)
        np.sqrt(scratch, out=scratch)
        scratch += ADAM_EPS
        np.divide(m, scratch, out=scratch)
        scratch *= lr / bc1
        tensor.data -= scratch


@dataclass
class TrainSample:
    """One aligned triple, normalized and ready for cropping."""

    plane: np.ndarray  # [H, W] normalized mosaic
    mono: np.ndarray  # [H, W] ground-truth monochrome
    rgb: np.ndarray  # [H, W, 3] ground-truth RGB
    ratio: float
    phase: str = "RGGB"

    def __post_init__(self):
        if self.plane.shape != self.mono.shape or self.rgb.shape[:2] != self.plane.shape:
            raise ShapeError(
                f"misaligned triple: plane {self.plane.shape}, mono {self.mono.shape}, "
                f"rgb {self.rgb.shape}"
            )


def sample_from_frames(bayer: BayerRaw, mono: MonoRaw, rgb: np.ndarray, ratio: float) -> TrainSample:
    return TrainSample(
        plane=normalize(bayer), mono=mono.data, rgb=rgb, ratio=ratio, phase=bayer.cfa_phase
    )


def crop_pair(sample: TrainSample, crop: int, rng: np.random.Generator) -> TrainSample:
    """Random crop on even sensor coordinates, applied to all three frames."""
    h, w = sample.plane.shape
    if crop > h or crop > w:
        raise ValueError(f"crop {crop} exceeds frame {h}x{w}")
    oy = 2 * int(rng.integers(0, (h - crop) // 2 + 1))
    ox = 2 * int(rng.integers(0, (w - crop) // 2 + 1))
    window = (slice(oy, oy + crop), slice(ox, ox + crop))
    return TrainSample(
        plane=sample.plane[window],
        mono=sample.mono[window],
        rgb=sample.rgb[window[0], window[1], :],
        ratio=sample.ratio,
        phase=sample.phase,
    )


@dataclass
class TrainResult:
    params: ModelParams
    curve: list[tuple[int, float, float, float, float]]  # step, lr, mono, rgb, total
    checkpoint_path: Path | None = None


def _batch_inputs(samples: list[TrainSample], config: ModelConfig):
    colors, proxies, monos, rgbs = [], [], [], []
    for s in samples:
        color, proxy = prepare_network_inputs(s.plane, s.phase, s.ratio, config)
        colors.append(color)
        if proxy is not None:
            proxies.append(proxy)
        monos.append(s.mono)
        rgbs.append(s.rgb.transpose(2, 0, 1))
    color_t = Tensor(np.stack(colors))
    proxy_t = Tensor(np.stack(proxies)[:, None]) if proxies else None
    mono_t = Tensor(np.stack(monos)[:, None])
    rgb_t = Tensor(np.stack(rgbs))
    return color_t, proxy_t, mono_t, rgb_t


def write_loss_curve(path, curve):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "loss_mono", "loss_rgb", "loss_total"])
        for row in curve:
            writer.writerow([row[0], f"{row[1]:.8g}", f"{row[2]:.17g}", f"{row[3]:.17g}", f"{row[4]:.17g}"])


def train(
    dataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_dir=None,
    params: ModelParams | None = None,
    log_every: int = 0,
) -> TrainResult:
    """Run the joint optimization loop over aligned (input, mono, rgb) triples.

    ``dataset`` is any sequence of :class:`TrainSample`. Emits the loss curve
    and a final checkpoint (plus periodic snapshots) under ``out_dir`` when
    given.
    """
    _enable_malloc_reuse()
    samples = list(dataset)
    if not samples:
        raise ValueError("training dataset is empty")
    cfg = train_config
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = build_params(model_config, seed=cfg.seed)
    state = init_adam(params)
    loss_fn = LOSS_FNS[cfg.loss or model_config.loss]
    switch = cfg.switch_step()

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    snapshot_every = max(1, cfg.steps // 5)

    curve = []
    for step in range(cfg.steps):
        lr = cfg.lr_initial if step < switch else cfg.lr_after_converge
        picked = [samples[int(rng.integers(0, len(samples)))] for _ in range(cfg.batch)]
        crops = [crop_pair(s, cfg.crop, rng) for s in picked]
        color_t, proxy_t, mono_gt, rgb_gt = _batch_inputs(crops, model_config)

        mono_out, rgb_out = forward_joint(color_t, proxy_t, params, model_config, train=True)
        loss_rgb = loss_fn(rgb_out, rgb_gt)
        if model_config.use_dbf:
            loss_mono = loss_fn(mono_out, mono_gt)
            total = ad.add(loss_mono, loss_rgb)
            mono_val = float(loss_mono.data)
        else:
            total = loss_rgb
            mono_val = 0.0
        total_val = float(total.data)
        if not np.isfinite(total_val):
            raise RuntimeError(
                f"non-finite loss at step {step}: mono={mono_val} rgb={float(loss_rgb.data)}"
            )

        params.zero_grads()
        total.backward()
        adam_step(params, state, lr, cfg.weight_decay)

        curve.append((step, lr, mono_val, float(loss_rgb.data), total_val))
        if log_every and step % log_every == 0:
            print(f"step {step:6d} lr {lr:.2g} mono {mono_val:.5f} rgb {float(loss_rgb.data):.5f}")
        if out_dir is not None and (step + 1) % snapshot_every == 0 and step + 1 < cfg.steps:
            save_model(out_dir / f"model_step{step + 1:06d}.dfck", model_config, params)

    checkpoint_path = None
    if out_dir is not None:
        checkpoint_path = out_dir / "model.dfck"
        save_model(checkpoint_path, model_config, params)
        write_loss_curve(out_dir / "loss_curve.csv", curve)
    return TrainResult(params=params, curve=curve, checkpoint_path=checkpoint_path)


# ---------------------------------------------------------------------------
# Gradient-check registry: every differentiable block plus both full
# networks at toy sizes, each reduced through a smooth scalar.
# ---------------------------------------------------------------------------


def _toy_config() -> ModelConfig:
    return ModelConfig(base_channels=4, depth=2)


def gradcheck_suite(seed: int = 0) -> list[tuple[str, float]]:
    """(name, max relative error) for every differentiable block.

    Inputs are sampled away from the abs/relu kinks and max-pool ties so the
    central differences stay valid; the full networks run at toy sizes
    (4x8x8 packed color, 1x16x16 mono) with a small two-level config.
    """
    from . import blocks
    from .blocks import CAParams, Conv2dParams

    rng = np.random.default_rng(seed)
    results: list[tuple[str, float]] = []

    def sq(t):
        return ad.reduce_sum(ad.square(t))

    def run(name, fn, x0):
        results.append((name, ad.grad_check(fn, Tensor(np.asarray(x0)))))

    w = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.4, requires_grad=True)
    b = Tensor(rng.standard_normal(4) * 0.1, requires_grad=True)
    x0 = rng.standard_normal((2, 3, 8, 8))
    run("conv2d/x", lambda t: sq(blocks.conv2d(t, Conv2dParams(w, b, 1, 1))), x0)
    xs = Tensor(x0)
    run("conv2d/weight", lambda t: sq(blocks.conv2d(xs, Conv2dParams(t, b, 1, 1))), w.data)
    run("conv2d/bias", lambda t: sq(blocks.conv2d(xs, Conv2dParams(w, t, 1, 1))), b.data)

    wt = Tensor(rng.standard_normal((3, 4, 2, 2)) * 0.4, requires_grad=True)
    bt = Tensor(rng.standard_normal(4) * 0.1, requires_grad=True)
    run("transposed_conv2/x", lambda t: sq(blocks.transposed_conv2(t, Conv2dParams(wt, bt))), x0)
    run(
        "transposed_conv2/weight",
        lambda t: sq(blocks.transposed_conv2(xs, Conv2dParams(t, bt))),
        wt.data,
    )

    run("maxpool2", lambda t: sq(blocks.maxpool2(t)), rng.standard_normal((2, 3, 8, 8)))

    safe = rng.standard_normal((3, 5, 4))
    safe = np.where(np.abs(safe) < 0.05, 0.5, safe)  # keep clear of the kink
    run("leaky_relu", lambda t: sq(blocks.leaky_relu(t)), safe)
    run("sigmoid", lambda t: sq(blocks.sigmoid(t)), rng.standard_normal((3, 5, 4)))
    run("depth_to_space", lambda t: sq(blocks.depth_to_space(t, 2)), rng.standard_normal((2, 8, 3, 3)))

    c = 8
    ca = CAParams(
        w_reduce=Tensor(rng.standard_normal((2, c)) * 0.5, requires_grad=True),
        b_reduce=Tensor(rng.standard_normal(2) * 0.1, requires_grad=True),
        w_expand=Tensor(rng.standard_normal((c, 2)) * 0.5, requires_grad=True),
        b_expand=Tensor(rng.standard_normal(c) * 0.1, requires_grad=True),
        reduction=4,
    )
    xca = rng.standard_normal((2, c, 4, 4))
    run("channel_attention/x", lambda t: sq(blocks.channel_attention(t, ca)), xca)
    xca_t = Tensor(xca)
    run(
        "channel_attention/w_reduce",
        lambda t: sq(
            blocks.channel_attention(
                xca_t, CAParams(t, ca.b_reduce, ca.w_expand, ca.b_expand, 4)
            )
        ),
        ca.w_reduce.data,
    )

    pred0 = rng.standard_normal((4, 6))
    target = Tensor(pred0 + np.where(rng.standard_normal((4, 6)) > 0, 0.5, -0.5))
    run("l1_loss", lambda t: l1_loss(t, target), pred0)
    run("l2_loss", lambda t: l2_loss(t, target), pred0)

    config = _toy_config()
    params = build_params(config, seed=seed)
    color0 = rng.uniform(0.1, 0.9, size=(1, 4, 8, 8))
    mono0 = rng.uniform(0.1, 0.9, size=(1, 1, 16, 16))
    color_t = Tensor(color0)
    mono_t = Tensor(mono0)

    run("dbf/input", lambda t: sq(dbf_forward(t, params, config, train=True)), color0)
    head_w = params["dbf.head.weight"]
    run(
        "dbf/head.weight",
        lambda t: sq(
            dbf_forward(
                color_t,
                _with_override(params, "dbf.head.weight", t),
                config,
                train=True,
            )
        ),
        head_w.data,
    )

    run(
        "dble/color_input",
        lambda t: sq(dble_forward(t, mono_t, params, config, train=True)),
        color0,
    )
    run(
        "dble/mono_input",
        lambda t: sq(dble_forward(color_t, t, params, config, train=True)),
        mono0,
    )
    be = params["dble.mid.ca.b_expand"]
    run(
        "dble/mid.ca.b_expand",
        lambda t: sq(
            dble_forward(
                color_t,
                mono_t,
                _with_override(params, "dble.mid.ca.b_expand", t),
                config,
                train=True,
            )
        ),
        be.data,
    )
    return results


def _with_override(params: ModelParams, name: str, tensor: Tensor) -> ModelParams:
    patched = dict(params.tensors)
    patched[name] = tensor
    return ModelParams(patched)
