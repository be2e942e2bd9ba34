"""Encoder / dual-decoder segmentation network with morphological smoothing.

The encoder is a small 3D residual network: a strided stem followed by three
residual stages. Counting the stem as block 1, the outputs of blocks 2 and 3
are the skip taps C2 and C3 and block 4 is the encoder output E(I). Both
decoders repeat the same block pattern:

    ConvT (4,4,4)/2 + BN + ReLU -> ConvT (1,3,3)/1 + BN + ReLU -> upsample

three times, with C3 concatenated into the second block and C2 into the
third, then a (3,3,3) transposed convolution and a sigmoid.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
from torch import nn

from .autodiff import BatchNorm3d, morphological_smoothing

DOWNSAMPLING = 8


@dataclass
class NetworkConfig:
    input_shape: tuple[int, int, int] = (32, 128, 128)
    encoder_widths: tuple[int, int, int, int] = (8, 16, 32, 64)
    decoder_widths: tuple[int, int, int] = (16, 8, 4)
    mu: int = 3
    seed: int = 0
    reduced: bool = True
    reconstruction: bool = True
    detach_smoothing: bool = False

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        self.decoder_widths = tuple(int(w) for w in self.decoder_widths)
        if any(s % DOWNSAMPLING for s in self.input_shape):
            raise ValueError(f"input dims must be divisible by {DOWNSAMPLING}, got {self.input_shape}")
        if self.mu < 0:
            raise ValueError("mu must be nonnegative")
        if len(self.encoder_widths) != 4 or len(self.decoder_widths) != 3:
            raise ValueError("need 4 encoder widths (stem + 3 stages) and 3 decoder widths")
        if not self.reduced:
            raise ValueError("only the reduced encoder is available")

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


class NetworkOutputs(NamedTuple):
    s_bar: torch.Tensor
    s: torch.Tensor
    i_rec: torch.Tensor | None


def _conv_bn_relu(cin, cout, stride):
    return nn.Sequential(
        nn.Conv3d(cin, cout, 3, stride=stride, padding=1, bias=False),
        BatchNorm3d(cout),
        nn.ReLU(inplace=True),
    )


class ResidualBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv3d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = BatchNorm3d(cout)
        self.conv2 = nn.Conv3d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = BatchNorm3d(cout)
        self.relu = nn.ReLU(inplace=True)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv3d(cin, cout, 1, stride=stride, bias=False), BatchNorm3d(cout))

    def forward(self, x):
        identity = x if self.shortcut is None else self.shortcut(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


class Encoder(nn.Module):
    def __init__(self, widths):
        super().__init__()
        w0, w1, w2, w3 = widths
        self.stem = _conv_bn_relu(1, w0, stride=2)
        self.stage1 = ResidualBlock(w0, w1, stride=1)
        self.stage2 = ResidualBlock(w1, w2, stride=2)
        self.stage3 = ResidualBlock(w2, w3, stride=2)

    def forward(self, x):
        c2 = self.stage1(self.stem(x))
        c3 = self.stage2(c2)
        return self.stage3(c3), c2, c3


def _convt_bn_relu(cin, cout, kernel, stride, padding):
    return nn.Sequential(
        nn.ConvTranspose3d(cin, cout, kernel, stride=stride, padding=padding, bias=False),
        BatchNorm3d(cout),
        nn.ReLU(inplace=True),
    )


class UpBlock(nn.Module):
    def __init__(self, cin, cout, upsample):
        super().__init__()
        self.up = _convt_bn_relu(cin, cout, (4, 4, 4), (2, 2, 2), (1, 1, 1))
        self.refine = _convt_bn_relu(cout, cout, (1, 3, 3), (1, 1, 1), (0, 1, 1))
        self.upsample = nn.Upsample(scale_factor=upsample, mode="nearest") if upsample != 1 else nn.Identity()

    def forward(self, x):
        return self.upsample(self.refine(self.up(x)))


class Decoder(nn.Module):
    def __init__(self, encoder_widths, decoder_widths):
        super().__init__()
        _, w1, w2, w3 = encoder_widths
        d1, d2, d3 = decoder_widths
        # the three stride-2 blocks already undo the encoder's 8x reduction,
        # so the upsample stages are identities
        self.block1 = UpBlock(w3, d1, 1)
        self.block2 = UpBlock(d1 + w2, d2, 1)
        self.block3 = UpBlock(d2 + w1, d3, 1)
        self.head = nn.ConvTranspose3d(d3, 1, 3, stride=1, padding=1)

    def forward(self, e, c2, c3):
        x = self.block1(e)
        x = self.block2(torch.cat([x, c3], dim=1))
        x = self.block3(torch.cat([x, c2], dim=1))
        return torch.sigmoid(self.head(x))


class SegmentationNetwork(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg.encoder_widths)
        self.seg_decoder = Decoder(cfg.encoder_widths, cfg.decoder_widths)
        self.rec_decoder = Decoder(cfg.encoder_widths, cfg.decoder_widths) if cfg.reconstruction else None

    def forward(self, image: torch.Tensor, reconstruct: bool | None = None) -> NetworkOutputs:
        if image.dim() != 5 or image.shape[1] != 1:
            raise ValueError(f"expected input of shape (N, 1, k, m, n), got {tuple(image.shape)}")
        if any(s % DOWNSAMPLING for s in image.shape[2:]):
            raise ValueError(f"spatial dims must be divisible by {DOWNSAMPLING}, got {tuple(image.shape[2:])}")
        if reconstruct is None:
            reconstruct = self.training
        e, c2, c3 = self.encoder(image)
        s_bar = self.seg_decoder(e, c2, c3)
        s = morphological_smoothing(s_bar, self.cfg.mu, detach=self.cfg.detach_smoothing)
        i_rec = None
        if reconstruct and self.rec_decoder is not None:
            i_rec = self.rec_decoder(e, c2, c3)
        return NetworkOutputs(s_bar, s, i_rec)


def build_network(cfg: NetworkConfig) -> SegmentationNetwork:
    """Construct the network with parameters drawn from ``cfg.seed``."""
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        return SegmentationNetwork(cfg)
