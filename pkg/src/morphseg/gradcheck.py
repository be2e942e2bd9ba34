"""Finite-difference suites at three scopes: single ops, layers, whole graph.

Each suite returns ``{name: (max_relative_error, tolerance)}``. All checks
run at 64-bit.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .autodiff import (
    BatchNorm3d,
    central_gradient,
    grad_check,
    gradient_magnitude_l1,
    masked_pool_is,
    masked_pool_si,
    morphological_smoothing,
    safe_log,
)
from .losses import LossWeights, compound
from .network import NetworkConfig, ResidualBlock, UpBlock, build_network

OP_TOL = 1e-4
LAYER_TOL = 1e-4
END2END_TOL = 1e-3
END2END_SHAPE = (2, 1, 8, 16, 16)


def _uniform(shape, gen, low=-1.0, high=1.0):
    return low + (high - low) * torch.rand(*shape, generator=gen, dtype=torch.float64)


def tie_free(shape, gen, low=0.0, high=1.0):
    """Evenly spaced distinct values in random order."""
    n = int(np.prod(shape))
    perm = torch.randperm(n, generator=gen).to(torch.float64)
    return (low + (high - low) * (perm + 0.5) / n).reshape(shape)


def _projected(fn, x, gen):
    w = _uniform(tuple(fn(x).shape), gen)
    return lambda t: (fn(t) * w).sum()


def op_suite(seed: int = 0) -> dict[str, tuple[float, float]]:
    g = torch.Generator().manual_seed(seed)
    w_conv = _uniform((2, 1, 3, 3, 3), g)
    w_convt = _uniform((1, 2, 4, 4, 4), g)
    ops = {
        "add": (lambda x: x + x.flip(-1), (2, 3, 4), False),
        "multiply": (lambda x: x * x.flip(-1), (2, 3, 4), False),
        "scalar": (lambda x: 2.5 * x - 1.0, (2, 3), False),
        "sum": (lambda x: x.sum(dim=-1), (2, 3, 4), False),
        "mean": (lambda x: x.mean(dim=(1, 2)), (2, 3, 4), False),
        "exp": (torch.exp, (2, 3), False),
        "log": (lambda x: safe_log(x * x + 0.1), (2, 3), False),
        "square": (lambda x: x ** 2, (2, 3), False),
        "abs": (torch.abs, (2, 3), True),
        "relu": (torch.relu, (2, 3), True),
        "sigmoid": (torch.sigmoid, (2, 3), False),
        "conv3d": (lambda x: F.conv3d(x, w_conv, stride=2, padding=1), (1, 1, 5, 6, 6), False),
        "conv_transpose3d": (lambda x: F.conv_transpose3d(x, w_convt, stride=2, padding=1), (1, 1, 3, 3, 3), False),
        "max_pool3d": (lambda x: F.max_pool3d(x, 2), (1, 1, 4, 4, 4), True),
        "concat": (lambda x: torch.cat([x, 3 * x], dim=1), (1, 2, 2, 2, 2), False),
        "central_gradient": (lambda x: torch.stack(central_gradient(x)), (3, 4, 5), False),
        "gradient_l1": (gradient_magnitude_l1, (3, 4, 5), False),
    }
    out = {}
    for name, (fn, shape, kinked) in ops.items():
        x = tie_free(shape, g, -1.0, 1.0) if kinked else _uniform(shape, g)
        out[name] = (grad_check(_projected(fn, x, g), x), OP_TOL)
    bn = BatchNorm3d(2).double().train()
    x = _uniform((2, 2, 2, 3, 3), g)
    out["batch_norm"] = (grad_check(_projected(bn, x, g), x), OP_TOL)
    return out


def layer_suite(seed: int = 0) -> dict[str, tuple[float, float]]:
    g = torch.Generator().manual_seed(seed)
    out = {}
    x = tie_free((1, 1, 5, 5, 6), g)
    out["masked_pool_si"] = (grad_check(_projected(masked_pool_si, x, g), x), LAYER_TOL)
    out["masked_pool_is"] = (grad_check(_projected(masked_pool_is, x, g), x), LAYER_TOL)
    x = tie_free((1, 1, 5, 5, 5), g)
    out["smoothing_mu3"] = (grad_check(_projected(lambda t: morphological_smoothing(t, 3), x, g), x), LAYER_TOL)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        res = ResidualBlock(2, 3, stride=2).double().train()
        up = UpBlock(3, 2, 1).double().train()
    x = _uniform((2, 2, 4, 4, 4), g)
    out["residual_block"] = (grad_check(_projected(res, x, g), x), LAYER_TOL)
    x = _uniform((2, 3, 2, 2, 2), g)
    out["up_block"] = (grad_check(_projected(up, x, g), x), LAYER_TOL)
    return out


def end2end_function(seed: int = 0, weights: LossWeights | None = None):
    """(f, x): the compound loss of the reduced network as a function of the input batch."""
    weights = weights or LossWeights()
    # draw the weights at 64-bit whatever the caller's default dtype is
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        net = build_network(NetworkConfig(input_shape=END2END_SHAPE[2:], seed=seed)).train()
    finally:
        torch.set_default_dtype(previous)
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(*END2END_SHAPE, generator=g, dtype=torch.float64)

    def f(image):
        return compound(image, net(image, reconstruct=True), weights).total

    return f, x


def end2end_suite(seed: int = 0, max_coords: int | None = None, eps: float = 1e-5) -> dict[str, tuple[float, float]]:
    f, x = end2end_function(seed)
    return {"compound_through_network": (grad_check(f, x, eps=eps, max_coords=max_coords, seed=seed), END2END_TOL)}


SUITES = {"op": op_suite, "layer": layer_suite, "end2end": end2end_suite}
