"""Differentiable building blocks on top of torch autograd.

torch supplies the dense reverse-mode machinery (convolutions, batch norm,
elementwise ops). This module adds the pieces torch does not have: the
morphological pooling layers with deterministic arg-extremum routing, the
central-difference stencil, a finite-difference gradient checker, and the
flat checkpoint container.
"""

from __future__ import annotations

import json
from functools import lru_cache
from pathlib import Path

import numba
import numpy as np
import torch
from torch import nn

from .morphology import PLANE_NORMALS, element_offsets

LOG_EPS = 1e-8

DiffTensor = torch.Tensor


# ---------------------------------------------------------------------------
# morphological pooling


@lru_cache(maxsize=None)
def _plane_factors() -> np.ndarray:
    """Each plane as lines along an axis ``u`` stacked along an in-plane vector ``v``.

    Row layout: (u_axis, vz, vy, vx). The nine points a*u + b*v, a, b in
    {-1, 0, 1}, reproduce the element exactly.
    """
    rows = []
    for normal, offsets in zip(PLANE_NORMALS, element_offsets()):
        u_axis = max(a for a in range(3) if normal[a] == 0)
        e_u = np.eye(3, dtype=np.int64)[u_axis]
        v = np.cross(normal, e_u)
        points = {tuple(a * e_u + b * v) for a in (-1, 0, 1) for b in (-1, 0, 1)}
        assert points == set(offsets), normal
        rows.append((u_axis, *v))
    return np.array(rows, dtype=np.int64)


@numba.njit(cache=True)
def _si_kernel(xp, factors, nd, nh, nw, out, index):
    """SI on a (B, D+4, H+4, W+4) array padded with +inf.

    Minima compare (value, padded flat index) lexicographically, so ties
    inside a plane resolve to the lowest voxel index; across planes the
    first (lowest canonical) element wins.
    """
    nb = xp.shape[0]
    pz, py, px = nd + 4, nh + 4, nw + 4
    strides = np.array([py * px, px, 1], dtype=np.int64)
    flat = xp.reshape(nb * pz * py * px)
    n = flat.size
    line_v = np.empty((3, n), dtype=xp.dtype)
    line_i = np.empty((3, n), dtype=np.int64)
    for b in range(nb):
        base = b * pz * py * px
        for a in range(3):
            s = strides[a]
            for z in range(1, pz - 1):
                for y in range(1, py - 1):
                    q = base + z * strides[0] + y * strides[1] + 1
                    for w in range(1, px - 1):
                        bv = flat[q - s]
                        bi = q - s
                        if flat[q] < bv:
                            bv = flat[q]
                            bi = q
                        if flat[q + s] < bv:
                            bv = flat[q + s]
                            bi = q + s
                        line_v[a, q] = bv
                        line_i[a, q] = bi
                        q += 1
        for z in range(nd):
            for y in range(nh):
                for w in range(nw):
                    p = base + (z + 2) * strides[0] + (y + 2) * strides[1] + (w + 2)
                    best = 0.0
                    best_i = -1
                    for e in range(factors.shape[0]):
                        a = factors[e, 0]
                        sv = factors[e, 1] * strides[0] + factors[e, 2] * strides[1] + factors[e, 3]
                        pv = line_v[a, p - sv]
                        pi = line_i[a, p - sv]
                        for q in (p, p + sv):
                            v = line_v[a, q]
                            i = line_i[a, q]
                            if v < pv or (v == pv and i < pi):
                                pv = v
                                pi = i
                        if best_i < 0 or pv > best:
                            best = pv
                            best_i = pi
                    out[b, z, y, w] = best
                    # padded flat index -> unpadded flat index
                    r = best_i - base
                    zz = r // strides[0] - 2
                    r = r % strides[0]
                    yy = r // strides[1] - 2
                    ww = r % strides[1] - 2
                    index[b, z, y, w] = ((b * nd + zz) * nh + yy) * nw + ww


def _sup_inf_select(x: torch.Tensor, inner: str) -> tuple[torch.Tensor, torch.Tensor]:
    """Values and source indices of SI (inner='min') or IS (inner='max') on (B, D, H, W).

    IS is evaluated as -SI(-x), which routes ties by the same rule.
    """
    arr = x.detach().numpy()
    if inner == "max":
        arr = -arr
    nb, nd, nh, nw = arr.shape
    padded = np.pad(arr, ((0, 0), (2, 2), (2, 2), (2, 2)), constant_values=np.inf)
    out = np.empty(arr.shape, dtype=arr.dtype)
    index = np.empty(arr.shape, dtype=np.int64)
    _si_kernel(padded, _plane_factors(), nd, nh, nw, out, index)
    if inner == "max":
        out = -out
    return torch.from_numpy(out), torch.from_numpy(index)


class _MaskedPool(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, inner):
        shape = x.shape
        flat = x.reshape(-1, *shape[-3:])
        values, index = _sup_inf_select(flat, inner)
        ctx.save_for_backward(index)
        ctx.in_shape = shape
        return values.reshape(shape)

    @staticmethod
    def backward(ctx, grad_out):
        (index,) = ctx.saved_tensors
        grad = torch.zeros(index.numel(), dtype=grad_out.dtype)
        grad.index_add_(0, index.reshape(-1), grad_out.reshape(-1))
        return grad.reshape(ctx.in_shape), None


def _check_pool_input(x: torch.Tensor):
    if x.dim() < 3 or min(x.shape[-3:]) < 3:
        raise ValueError(f"masked pooling needs spatial dims >= 3, got shape {tuple(x.shape)}")
    if x.dim() == 5 and x.shape[1] != 1:
        raise ValueError(f"masked pooling expects a single channel, got {x.shape[1]}")


def masked_pool_si(x: torch.Tensor) -> torch.Tensor:
    """Differentiable SI: max over elements of -MaskPool(-x, B)."""
    _check_pool_input(x)
    return _MaskedPool.apply(x, "min")


def masked_pool_is(x: torch.Tensor) -> torch.Tensor:
    """Differentiable IS: min over elements of MaskPool(x, B)."""
    _check_pool_input(x)
    return _MaskedPool.apply(x, "max")


def morphological_smoothing(x: torch.Tensor, mu: int, detach: bool = False) -> torch.Tensor:
    """``mu``-fold SI(IS(x)). With ``detach`` no gradient flows back through it."""
    if detach:
        x = x.detach()
    for _ in range(mu):
        x = masked_pool_si(masked_pool_is(x))
    return x


# ---------------------------------------------------------------------------
# stencils


def _axis_diff(x: torch.Tensor, dim: int) -> torch.Tensor:
    n = x.shape[dim]
    first = x.narrow(dim, 1, 1) - x.narrow(dim, 0, 1)
    last = x.narrow(dim, n - 1, 1) - x.narrow(dim, n - 2, 1)
    middle = (x.narrow(dim, 2, n - 2) - x.narrow(dim, 0, n - 2)) / 2
    return torch.cat([first, middle, last], dim=dim)


def central_gradient(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Central differences over the last three axes, one-sided at the borders."""
    if x.dim() < 3 or min(x.shape[-3:]) < 2:
        raise ValueError(f"central_gradient needs spatial dims >= 2, got {tuple(x.shape)}")
    nd = x.dim()
    return tuple(_axis_diff(x, nd - 3 + a) for a in range(3))


def gradient_magnitude_l1(x: torch.Tensor) -> torch.Tensor:
    gz, gy, gx = central_gradient(x)
    return gz.abs() + gy.abs() + gx.abs()


def safe_log(x: torch.Tensor) -> torch.Tensor:
    return torch.log(x + LOG_EPS)


# ---------------------------------------------------------------------------
# layers


class BatchNorm3d(nn.BatchNorm3d):
    """Batch norm that refuses to estimate batch statistics from a single sample."""

    def forward(self, x):
        if self.training and x.shape[0] < 2:
            raise ValueError("batch_norm in training mode needs batch >= 2")
        return super().forward(x)


# ---------------------------------------------------------------------------
# finite-difference checking


def grad_check(f, x: torch.Tensor, eps: float = 1e-5, max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between autograd and central finite differences.

    ``f`` maps a tensor shaped like ``x`` to a scalar. When ``max_coords`` is
    given only a random subset of coordinates is probed.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    x = x.detach().clone().requires_grad_(True)
    out = f(x)
    if out.numel() != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    (analytic,) = torch.autograd.grad(out, x)
    analytic = analytic.reshape(-1)
    coords = np.arange(x.numel())
    if max_coords is not None and max_coords < x.numel():
        coords = np.random.default_rng(seed).choice(x.numel(), size=max_coords, replace=False)
    base = x.detach().clone().reshape(-1)
    worst = 0.0
    with torch.no_grad():
        for c in coords:
            orig = base[c].item()
            base[c] = orig + eps
            up = f(base.reshape(x.shape)).item()
            base[c] = orig - eps
            down = f(base.reshape(x.shape)).item()
            base[c] = orig
            numeric = (up - down) / (2 * eps)
            a = analytic[c].item()
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(directory, module: nn.Module, step: int = 0, extra: dict | None = None):
    """Write ``params.f32`` (concatenated little-endian float32) and ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, counters, chunks, offset = [], {}, [], 0
    for name, tensor in module.state_dict().items():
        if not torch.is_floating_point(tensor):
            counters[name] = int(tensor.item())
            continue
        arr = tensor.detach().cpu().numpy().astype("<f4").ravel()
        entries.append({"name": name, "shape": list(tensor.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    (directory / "params.f32").write_bytes(b"".join(chunks))
    manifest = {"format": "morphseg-checkpoint-1", "step": int(step), "tensors": entries, "counters": counters}
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))


def read_manifest(directory) -> dict:
    return json.loads((Path(directory) / "manifest.json").read_text())


def load_checkpoint(directory, module: nn.Module) -> dict:
    """Load tensors into ``module`` in place; returns the manifest."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    flat = np.frombuffer((directory / "params.f32").read_bytes(), dtype="<f4")
    state = module.state_dict()
    new_state = {}
    for entry in manifest["tensors"]:
        name = entry["name"]
        if name not in state:
            raise KeyError(f"checkpoint tensor {name!r} has no counterpart in the module")
        arr = flat[entry["offset"]:entry["offset"] + entry["count"]].reshape(entry["shape"])
        if tuple(arr.shape) != tuple(state[name].shape):
            raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {tuple(state[name].shape)}")
        new_state[name] = torch.from_numpy(arr.copy()).to(state[name].dtype)
    for name, value in manifest.get("counters", {}).items():
        new_state[name] = torch.tensor(value, dtype=state[name].dtype)
    missing = set(state) - set(new_state)
    if missing:
        raise KeyError(f"checkpoint is missing tensors: {sorted(missing)}")
    module.load_state_dict(new_state)
    return manifest
