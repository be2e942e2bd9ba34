"""Unsupervised training, transductive fine-tuning and sliding-window inference."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .autodiff import load_checkpoint, read_manifest, save_checkpoint
from .losses import CollapsedMaskError, LossWeights, compound
from .network import DOWNSAMPLING, NetworkConfig, SegmentationNetwork, build_network
from .volume import random_crop_offset, reflect_pad

log = logging.getLogger(__name__)

MAX_CONSECUTIVE_COLLAPSES = 10


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 4
    steps: int = 2000
    crop_shape: tuple[int, int, int] = (16, 32, 32)
    seed: int = 0
    checkpoint_every: int = 0
    loss: LossWeights = field(default_factory=LossWeights)
    network: NetworkConfig | None = None

    def __post_init__(self):
        self.crop_shape = tuple(int(c) for c in self.crop_shape)
        self.betas = tuple(float(b) for b in self.betas)
        if isinstance(self.loss, dict):
            self.loss = LossWeights(**self.loss)
        if isinstance(self.network, dict):
            self.network = NetworkConfig(**self.network)
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm uses batch statistics)")
        if any(c % DOWNSAMPLING for c in self.crop_shape):
            raise ValueError(f"crop_shape must be divisible by {DOWNSAMPLING}")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")

    def network_config(self) -> NetworkConfig:
        if self.network is not None:
            return replace_input_shape(self.network, self.crop_shape)
        return NetworkConfig(input_shape=self.crop_shape, seed=self.seed)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls(**json.load(fh))


def replace_input_shape(cfg: NetworkConfig, shape) -> NetworkConfig:
    new = copy.copy(cfg)
    new.input_shape = tuple(shape)
    return new


@dataclass
class InferenceConfig:
    window: tuple[int, int, int] = (32, 128, 128)
    stride: tuple[int, int, int] = (8, 16, 16)
    threshold: float = 0.5
    batch_size: int = 4

    def __post_init__(self):
        self.window = tuple(int(w) for w in self.window)
        self.stride = tuple(int(s) for s in self.stride)
        if any(s < 1 or s > w for s, w in zip(self.stride, self.window)):
            raise ValueError(f"stride {self.stride} must be in [1, window] per axis")
        if any(w % DOWNSAMPLING for w in self.window):
            raise ValueError(f"window must be divisible by {DOWNSAMPLING}")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState, lr=1e-4, betas=(0.9, 0.999), eps=1e-8) -> AdamState:
    """In-place Adam update with bias correction."""
    params, grads = list(params), list(grads)
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    b1, b2 = betas
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if g is None:
                g = torch.zeros_like(p)
            if g.shape != p.shape or m.shape != p.shape:
                raise ValueError(f"adam_step shape mismatch: param {tuple(p.shape)}, grad {tuple(g.shape)}")
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return state


# ---------------------------------------------------------------------------
# training


def _sample_batch(volumes, crop_shape, batch_size, rng) -> torch.Tensor:
    crops = []
    for _ in range(batch_size):
        vol = volumes[int(rng.integers(len(volumes)))]
        off = random_crop_offset(vol.shape, crop_shape, rng)
        crops.append(vol[tuple(slice(o, o + c) for o, c in zip(off, crop_shape))])
    return torch.from_numpy(np.stack(crops)[:, None].astype(np.float32))


def _optimise(net: SegmentationNetwork, volumes, cfg: TrainConfig, steps=None, seconds=None,
              out_dir=None, log_path=None, start_step=0):
    volumes = [np.asarray(v, dtype=np.float32) for v in volumes]
    if not volumes:
        raise ValueError("no training volumes")
    for v in volumes:
        if any(s < c for s, c in zip(v.shape, cfg.crop_shape)):
            raise ValueError(f"volume {v.shape} is smaller than crop {cfg.crop_shape}")
    rng = np.random.default_rng(cfg.seed)
    params = [p for p in net.parameters()]
    state = AdamState()
    history = []
    log_fh = open(log_path, "a") if log_path else None
    collapses = 0
    step = start_step
    t0 = time.monotonic()
    net.train()
    try:
        while True:
            if steps is not None and step - start_step >= steps:
                break
            if seconds is not None and time.monotonic() - t0 >= seconds:
                break
            batch = _sample_batch(volumes, cfg.crop_shape, cfg.batch_size, rng)
            try:
                outputs = net(batch, reconstruct=cfg.loss.lambda4 != 0)
                losses = compound(batch, outputs, cfg.loss)
            except CollapsedMaskError as exc:
                collapses += 1
                log.warning("step %d skipped: %s", step + 1, exc)
                if collapses > MAX_CONSECUTIVE_COLLAPSES:
                    raise TrainingDivergedError(f"{collapses} consecutive collapsed steps") from exc
                continue
            collapses = 0
            grads = torch.autograd.grad(losses.total, params, allow_unused=True)
            adam_step(params, grads, state, cfg.lr, cfg.betas, cfg.eps)
            step += 1
            record = {"step": step, **losses.as_floats()}
            history.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
            if out_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(Path(out_dir) / f"step_{step:06d}", net, step, _manifest_extra(net))
    finally:
        if log_fh:
            log_fh.close()
    if out_dir:
        save_checkpoint(out_dir, net, step, _manifest_extra(net))
    return net, history


def _manifest_extra(net: SegmentationNetwork) -> dict:
    return {"network": json.loads(net.cfg.to_json())}


def train(volumes, cfg: TrainConfig, out_dir=None, log_path=None):
    """Train a fresh network on random crops of ``volumes`` (images only).

    Returns ``(network, history)`` where history holds one loss record per step.
    """
    net = build_network(cfg.network_config())
    return _optimise(net, volumes, cfg, steps=cfg.steps, out_dir=out_dir, log_path=log_path)


def finetune(net: SegmentationNetwork, test_volumes, cfg: TrainConfig, budget_steps=None,
             budget_seconds=None, out_dir=None, log_path=None, start_step=0):
    """Continue unsupervised training on unlabeled test images.

    A deep copy is tuned so the caller's network is left untouched.
    """
    if budget_steps is None and budget_seconds is None:
        raise ValueError("give budget_steps or budget_seconds")
    net = copy.deepcopy(net)
    return _optimise(net, test_volumes, cfg, steps=budget_steps, seconds=budget_seconds,
                     out_dir=out_dir, log_path=log_path, start_step=start_step)


def load_network(ckpt_dir) -> tuple[SegmentationNetwork, dict]:
    manifest = read_manifest(ckpt_dir)
    net = build_network(NetworkConfig.from_dict(manifest["network"]))
    load_checkpoint(ckpt_dir, net)
    return net, manifest


# ---------------------------------------------------------------------------
# inference


def window_offsets(extent: int, window: int, stride: int) -> list[int]:
    """Offsets 0, s, 2s, ... plus a last offset clamped to touch the far edge."""
    if extent < window:
        raise ValueError(f"extent {extent} is smaller than window {window}")
    offsets = list(range(0, extent - window + 1, stride))
    if offsets[-1] != extent - window:
        offsets.append(extent - window)
    return offsets


def tiling_margins(size: int, window: int, stride: int) -> tuple[int, int]:
    """Reflection margins so that stride-spaced windows tile the padded axis exactly."""
    if size >= window:
        total = math.ceil((size - window) / stride) * stride + window - size
    else:
        total = window - size
    return total // 2, total - total // 2


def coverage_counts(shape, window, stride) -> np.ndarray:
    """Number of windows covering each voxel of the original volume."""
    margins = [tiling_margins(s, w, st) for s, w, st in zip(shape, window, stride)]
    padded = [s + lo + hi for s, (lo, hi) in zip(shape, margins)]
    per_axis = []
    for extent, w, st, (lo, _), s in zip(padded, window, stride, margins, shape):
        c = np.zeros(extent, dtype=np.int64)
        for o in window_offsets(extent, w, st):
            c[o:o + w] += 1
        per_axis.append(c[lo:lo + s])
    return per_axis[0][:, None, None] * per_axis[1][None, :, None] * per_axis[2][None, None, :]


@torch.no_grad()
def sliding_window_segment(net: SegmentationNetwork, vol, cfg: InferenceConfig) -> np.ndarray:
    """Average the smoothed segmentation S over overlapping windows."""
    vol = np.asarray(vol, dtype=np.float32)
    if vol.ndim != 3:
        raise ValueError("expected a 3D volume")
    margins = [tiling_margins(s, w, st) for s, w, st in zip(vol.shape, cfg.window, cfg.stride)]
    try:
        padded = reflect_pad(vol, margins)
    except ValueError as exc:
        raise ValueError(f"volume {vol.shape} is too small for window {cfg.window}: {exc}") from exc
    acc = np.zeros(padded.shape, dtype=np.float64)
    count = np.zeros(padded.shape, dtype=np.int64)
    corners = [
        (z, y, x)
        for z in window_offsets(padded.shape[0], cfg.window[0], cfg.stride[0])
        for y in window_offsets(padded.shape[1], cfg.window[1], cfg.stride[1])
        for x in window_offsets(padded.shape[2], cfg.window[2], cfg.stride[2])
    ]
    was_training = net.training
    net.eval()
    try:
        for i in range(0, len(corners), cfg.batch_size):
            chunk = corners[i:i + cfg.batch_size]
            tiles = np.stack([padded[z:z + cfg.window[0], y:y + cfg.window[1], x:x + cfg.window[2]]
                              for z, y, x in chunk])
            s = net(torch.from_numpy(tiles[:, None]), reconstruct=False).s.numpy()
            # fixed accumulation order keeps the result independent of batching
            for (z, y, x), tile in zip(chunk, s[:, 0]):
                sl = (slice(z, z + cfg.window[0]), slice(y, y + cfg.window[1]), slice(x, x + cfg.window[2]))
                acc[sl] += tile
                count[sl] += 1
    finally:
        net.train(was_training)
    out = acc / count
    return out[tuple(slice(lo, lo + s) for (lo, _), s in zip(margins, vol.shape))].astype(np.float32)


def threshold(s, t: float = 0.5) -> np.ndarray:
    if not 0 < t < 1:
        raise ValueError("threshold must lie in (0, 1)")
    return (np.asarray(s) > t).astype(np.float32)
