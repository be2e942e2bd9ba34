"""Classical morphological Chan-Vese (ACWE) solver on binary level sets."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .morphology import curvature_smooth
from .volume import gradient_magnitude_l1


class DegenerateRegionError(RuntimeError):
    """The level set has collapsed to a single region."""

    def __init__(self, side: str, iteration: int | None = None):
        self.side = side
        self.iteration = iteration
        where = f" at iteration {iteration}" if iteration is not None else ""
        super().__init__(f"{side} region is empty{where}")


@dataclass(frozen=True)
class AcweParams:
    alpha: float = 1.0
    beta: float = 2.0
    mu: int = 1
    v: float = 0.0
    iterations: int = 100

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if self.mu < 0:
            raise ValueError("mu must be nonnegative")
        if self.v != 0:
            raise ValueError("only v = 0 (no balloon force) is supported")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass
class LevelSetState:
    u: np.ndarray
    iteration: int = 0


@dataclass(frozen=True)
class RegionMeans:
    c1: float
    c2: float


@dataclass
class ConvergenceLog:
    rows: list[tuple[int, int, float, float]] = field(default_factory=list)

    def append(self, iteration, changed, c1, c2):
        self.rows.append((int(iteration), int(changed), float(c1), float(c2)))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "changed_voxels", "c1", "c2"])
            writer.writerows(self.rows)


def init_levelset(image, mode: str = "mean-threshold", period: int = 4) -> LevelSetState:
    """Initial binary level set.

    ``mean-threshold`` marks voxels strictly above the image mean;
    ``checkerboard`` alternates cubic blocks of side ``period``.
    """
    image = np.asarray(image, dtype=np.float64)
    if mode == "mean-threshold":
        u = (image > image.mean()).astype(np.float64)
    elif mode == "checkerboard":
        if period < 1:
            raise ValueError("checkerboard period must be >= 1")
        idx = np.indices(image.shape) // period
        u = (idx.sum(axis=0) % 2 == 0).astype(np.float64)
    else:
        raise ValueError(f"unknown init mode {mode!r}")
    return LevelSetState(u, 0)


def region_means(image, u) -> RegionMeans:
    image = np.asarray(image, dtype=np.float64)
    u = np.asarray(u.u if isinstance(u, LevelSetState) else u, dtype=np.float64)
    if image.shape != u.shape:
        raise ValueError(f"image shape {image.shape} != level set shape {u.shape}")
    inside = u.sum()
    outside = (1.0 - u).sum()
    if inside == 0:
        raise DegenerateRegionError("inside")
    if outside == 0:
        raise DegenerateRegionError("outside")
    return RegionMeans((image * u).sum() / inside, (image * (1.0 - u)).sum() / outside)


def attachment(image, u, means: RegionMeans, params: AcweParams) -> np.ndarray:
    """Image attachment field |grad u|_1 * (alpha (I - c1)^2 - beta (I - c2)^2)."""
    image = np.asarray(image, dtype=np.float64)
    u = np.asarray(u.u if isinstance(u, LevelSetState) else u, dtype=np.float64)
    force = params.alpha * (image - means.c1) ** 2 - params.beta * (image - means.c2) ** 2
    return gradient_magnitude_l1(u) * force


def _pointwise_update(u, gamma):
    out = u.copy()
    out[gamma < 0] = 1.0
    out[gamma > 0] = 0.0
    return out


def acwe_step(image, state: LevelSetState, params: AcweParams) -> LevelSetState:
    means = region_means(image, state.u)
    gamma = attachment(image, state.u, means, params)
    u = curvature_smooth(_pointwise_update(state.u, gamma), params.mu)
    return LevelSetState(u, state.iteration + 1)


def acwe_run(image, u0: LevelSetState, params: AcweParams) -> tuple[np.ndarray, ConvergenceLog]:
    """Iterate until the level set stops changing or ``params.iterations`` is reached."""
    image = np.asarray(image, dtype=np.float64)
    state = u0
    log = ConvergenceLog()
    for _ in range(params.iterations):
        try:
            means = region_means(image, state.u)
            new = acwe_step(image, state, params)
        except DegenerateRegionError as exc:
            raise DegenerateRegionError(exc.side, state.iteration + 1) from exc
        changed = int(np.count_nonzero(new.u != state.u))
        log.append(new.iteration, changed, means.c1, means.c2)
        state = new
        if changed == 0:
            break
    return state.u.astype(np.float32), log
