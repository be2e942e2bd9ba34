"""The six unsupervised loss terms and their weighted sum.

Tensors are (N, 1, k, m, n). Region means are taken per sample; per-sample
scalar terms are averaged over the batch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields

import torch

from .autodiff import gradient_magnitude_l1, safe_log

MASK_EPS = 1e-6


class CollapsedMaskError(RuntimeError):
    """A soft mask is (numerically) all foreground or all background."""

    def __init__(self, side: str):
        self.side = side
        super().__init__(f"soft mask collapsed: {side} region has mass < {MASK_EPS}")


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1e-2
    lambda3: float = 1e-3
    lambda4: float = 1e-3
    lambda5: float = 1e-3
    lambda6: float = 1e-6
    alpha: float = 1.0
    beta: float = 2.0
    # behaviour flags
    ac_uses_s_bar: bool = False
    tight_literal: bool = False
    mv_literal: bool = False
    detach_gamma: bool = False

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4", "lambda5", "lambda6", "alpha", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @property
    def lambdas(self) -> tuple[float, ...]:
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5, self.lambda6)

    @classmethod
    def preset(cls, name: str) -> "LossWeights":
        """Named loss configurations used for ablations."""
        presets = {
            "full": {},
            "no-rank": {"lambda2": 0.0},
            "no-ac": {"lambda1": 0.0},
            "ac-only": {"lambda2": 0.0, "lambda3": 0.0, "lambda4": 0.0, "lambda5": 0.0, "lambda6": 0.0},
            "ac-rank": {"lambda3": 0.0, "lambda4": 0.0, "lambda5": 0.0, "lambda6": 0.0},
            "ac-s-bar": {"ac_uses_s_bar": True},
        }
        if name not in presets:
            raise ValueError(f"unknown loss preset {name!r}; choose from {sorted(presets)}")
        return cls(**presets[name])


@dataclass
class LossBreakdown:
    ac: torch.Tensor
    rank: torch.Tensor
    rec: torch.Tensor
    tight: torch.Tensor
    mv: torch.Tensor
    me: torch.Tensor
    total: torch.Tensor
    c1: torch.Tensor
    c2: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach().mean()) for f in fields(self)}

    def to_json(self, step: int) -> str:
        return json.dumps({"step": step, **self.as_floats()})


def _spatial_sum(x: torch.Tensor) -> torch.Tensor:
    return x.sum(dim=tuple(range(1, x.dim())))


def _spatial_mean(x: torch.Tensor) -> torch.Tensor:
    return x.mean(dim=tuple(range(1, x.dim())))


def _per_sample(c, like: torch.Tensor):
    """Broadcast per-sample scalars of shape (N,) against ``like``."""
    if torch.is_tensor(c) and c.dim() == 1:
        return c.reshape(c.shape[0], *([1] * (like.dim() - 1)))
    return c


def region_means_soft(image: torch.Tensor, s: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Soft inside/outside means, one value per sample."""
    if image.shape != s.shape:
        raise ValueError(f"image shape {tuple(image.shape)} != mask shape {tuple(s.shape)}")
    inside = _spatial_sum(s)
    outside = _spatial_sum(1 - s)
    if bool((inside < MASK_EPS).any()):
        raise CollapsedMaskError("inside")
    if bool((outside < MASK_EPS).any()):
        raise CollapsedMaskError("outside")
    c1 = _spatial_sum(image * s) / inside
    c2 = _spatial_sum(image * (1 - s)) / outside
    return c1, c2


def gamma_net(image, s_bar, c1, c2, alpha: float = 1.0, beta: float = 2.0) -> torch.Tensor:
    """Attachment field with the L1 gradient magnitude of the raw segmentation."""
    c1 = _per_sample(c1, image)
    c2 = _per_sample(c2, image)
    return gradient_magnitude_l1(s_bar) * (alpha * (image - c1) ** 2 - beta * (image - c2) ** 2)


def loss_ac_map(gamma: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    # both branches agree at gamma == 0 (value 1), so torch.where is safe
    return torch.where(gamma <= 0, torch.exp(gamma * s), torch.exp(-gamma * (1 - s)))


def loss_ac(gamma: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    return _spatial_mean(loss_ac_map(gamma, s))


def loss_rank(c1, c2) -> torch.Tensor:
    return torch.exp(c2 - c1)


def loss_rec(i_rec: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
    if i_rec.shape != image.shape:
        raise ValueError(f"reconstruction shape {tuple(i_rec.shape)} != input {tuple(image.shape)}")
    return _spatial_mean((i_rec - image) ** 2 + gradient_magnitude_l1(i_rec))


def loss_tight(s: torch.Tensor, literal: bool = False) -> torch.Tensor:
    """Segmentation area; the mean by default, the raw voxel sum with ``literal``."""
    return _spatial_sum(s) if literal else _spatial_mean(s)


def loss_mv(s: torch.Tensor, literal: bool = False) -> torch.Tensor:
    """exp(-Var(S)) by default (minimising pushes the variance up); exp(+Var) with ``literal``."""
    var = _spatial_mean(s ** 2) - _spatial_mean(s) ** 2
    return torch.exp(var) if literal else torch.exp(-var)


def loss_me(s: torch.Tensor) -> torch.Tensor:
    return _spatial_mean(-s * safe_log(s))


def compound(image: torch.Tensor, outputs, w: LossWeights) -> LossBreakdown:
    s_bar, s, i_rec = outputs.s_bar, outputs.s, outputs.i_rec
    c1, c2 = region_means_soft(image, s)
    gamma = gamma_net(image, s_bar, c1, c2, w.alpha, w.beta)
    if w.detach_gamma:
        gamma = gamma.detach()
    ac = loss_ac(gamma, s_bar if w.ac_uses_s_bar else s)
    rank = loss_rank(c1, c2)
    if i_rec is not None:
        rec = loss_rec(i_rec, image)
    elif w.lambda4 != 0:
        raise ValueError("reconstruction loss requested but the network produced no reconstruction")
    else:
        rec = torch.zeros_like(ac)
    tight = loss_tight(s, w.tight_literal)
    mv = loss_mv(s, w.mv_literal)
    me = loss_me(s)
    terms = (ac, rank, tight, rec, mv, me)
    total = sum(lam * t.mean() for lam, t in zip(w.lambdas, terms))
    return LossBreakdown(ac=ac, rank=rank, rec=rec, tight=tight, mv=mv, me=me, total=total, c1=c1, c2=c2)
