"""Volume containers, file I/O, normalization and synthetic tube phantoms.

Arrays are indexed (z, y, x) with x varying fastest. On disk two encodings
are understood: a small NRRD subset (``.nrrd``) and a raw float32 payload
with a JSON sidecar (``.f32`` + ``.json``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

STD_FLOOR = 1e-8


class VolumeFormatError(ValueError):
    """Raised when a volume file cannot be parsed."""


@dataclass(frozen=True)
class Volume3D:
    data: np.ndarray
    spacing: tuple[float, float, float] | None = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite values")
        object.__setattr__(self, "data", data)
        if self.spacing is not None:
            object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple[int, int, int] = (16, 32, 32)
    tube_count: int = 2
    radius_range: tuple[float, float] = (2.0, 3.0)
    foreground_intensity: float = 0.8
    background_intensity: float = 0.2
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "radius_range", tuple(float(r) for r in self.radius_range))
        k, m, n = self.shape
        if k < 8 or m < 16 or n < 16:
            raise ValueError(f"phantom shape must be at least (8, 16, 16), got {self.shape}")
        if self.tube_count < 0:
            raise ValueError("tube_count must be nonnegative")
        lo, hi = self.radius_range
        if lo < 1 or hi < lo:
            raise ValueError(f"invalid radius_range {self.radius_range}")
        for name in ("foreground_intensity", "background_intensity"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.foreground_intensity <= self.background_intensity:
            raise ValueError("foreground_intensity must exceed background_intensity")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")

    @classmethod
    def from_json(cls, path) -> "PhantomSpec":
        with open(path) as fh:
            return cls(**json.load(fh))


# ---------------------------------------------------------------------------
# file I/O


def _as_volume(vol) -> Volume3D:
    return vol if isinstance(vol, Volume3D) else Volume3D(np.asarray(vol))


def _check_payload(payload: bytes, shape, source: str) -> np.ndarray:
    expected = int(np.prod(shape)) * 4
    if len(payload) != expected:
        raise VolumeFormatError(
            f"payload size mismatch in {source}: expected {expected} bytes for shape "
            f"{tuple(shape)}, got {len(payload)}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise VolumeFormatError(f"non-finite values in payload of {source}")
    return data


def _read_nrrd(path: Path) -> Volume3D:
    raw = path.read_bytes()
    sep = raw.find(b"\n\n")
    if sep < 0:
        raise VolumeFormatError(f"{path}: header is not terminated by a blank line")
    header = raw[:sep].decode("ascii", errors="replace").splitlines()
    payload = raw[sep + 2:]
    if not header or not header[0].startswith("NRRD000"):
        raise VolumeFormatError(f"{path}: magic: expected NRRD0004, got {header[:1]}")
    fields = {}
    for line in header[1:]:
        if not line or line.startswith("#"):
            continue
        if ":=" in line:
            continue  # key/value comments
        key, sep_, value = line.partition(":")
        if not sep_:
            raise VolumeFormatError(f"{path}: malformed header line {line!r}")
        fields[key.strip().lower()] = value.strip()

    def need(key, allowed=None):
        if key not in fields:
            raise VolumeFormatError(f"{path}: missing required field '{key}'")
        value = fields[key]
        if allowed is not None and value.lower() not in allowed:
            raise VolumeFormatError(f"{path}: unsupported {key}: {value!r}")
        return value

    need("type", {"float", "float32"})
    need("encoding", {"raw"})
    if need("dimension") != "3":
        raise VolumeFormatError(f"{path}: dimension: expected 3, got {fields['dimension']}")
    need("endian", {"little"})
    sizes = need("sizes")
    try:
        n, m, k = (int(s) for s in sizes.split())
    except ValueError as exc:
        raise VolumeFormatError(f"{path}: sizes: expected three integers, got {sizes!r}") from exc
    if min(n, m, k) < 1:
        raise VolumeFormatError(f"{path}: sizes: must be positive")
    spacing = None
    if "spacings" in fields:
        try:
            sx, sy, sz = (float(s) for s in fields["spacings"].split())
        except ValueError as exc:
            raise VolumeFormatError(f"{path}: spacings: expected three numbers") from exc
        spacing = (sz, sy, sx)
    data = _check_payload(payload, (k, m, n), str(path))
    return Volume3D(data, spacing)


def _write_nrrd(vol: Volume3D, path: Path):
    k, m, n = vol.shape
    lines = [
        "NRRD0004",
        "type: float",
        "dimension: 3",
        f"sizes: {n} {m} {k}",
        "encoding: raw",
        "endian: little",
    ]
    if vol.spacing is not None:
        sz, sy, sx = vol.spacing
        lines.append(f"spacings: {sx!r} {sy!r} {sz!r}")
    header = ("\n".join(lines) + "\n\n").encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(vol.data, dtype="<f4").tobytes())


def _sidecar_paths(path: Path) -> tuple[Path, Path]:
    return path.with_suffix(".f32"), path.with_suffix(".json")


def _read_raw(path: Path) -> Volume3D:
    payload_path, meta_path = _sidecar_paths(path)
    if not meta_path.exists():
        raise VolumeFormatError(f"{path}: missing sidecar {meta_path.name}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"{meta_path}: invalid JSON ({exc})") from exc
    shape = meta.get("shape")
    if not (isinstance(shape, list) and len(shape) == 3 and all(isinstance(s, int) and s > 0 for s in shape)):
        raise VolumeFormatError(f"{meta_path}: shape: expected [k, m, n] positive integers, got {shape!r}")
    spacing = meta.get("spacing_um")
    if spacing is not None and not (isinstance(spacing, list) and len(spacing) == 3):
        raise VolumeFormatError(f"{meta_path}: spacing_um: expected [z, y, x]")
    data = _check_payload(payload_path.read_bytes(), tuple(shape), str(payload_path))
    return Volume3D(data, tuple(spacing) if spacing else None)


def _write_raw(vol: Volume3D, path: Path):
    payload_path, meta_path = _sidecar_paths(path)
    meta = {"shape": list(vol.shape)}
    if vol.spacing is not None:
        meta["spacing_um"] = list(vol.spacing)
    payload_path.write_bytes(np.ascontiguousarray(vol.data, dtype="<f4").tobytes())
    meta_path.write_text(json.dumps(meta))


def load_volume(path) -> Volume3D:
    """Read a ``.nrrd`` file or a ``.f32``/``.json`` pair (either name may be given)."""
    path = Path(path)
    if path.suffix.lower() == ".nrrd":
        if not path.exists():
            raise FileNotFoundError(path)
        return _read_nrrd(path)
    if path.suffix.lower() in (".f32", ".json"):
        if not path.with_suffix(".f32").exists():
            raise FileNotFoundError(path.with_suffix(".f32"))
        return _read_raw(path)
    raise VolumeFormatError(f"{path}: unknown volume extension {path.suffix!r}")


def save_volume(vol, path):
    """Write ``vol`` as float32 little-endian; format chosen by extension."""
    path = Path(path)
    vol = _as_volume(vol)
    if path.suffix.lower() == ".nrrd":
        _write_nrrd(vol, path)
    elif path.suffix.lower() in (".f32", ".json"):
        _write_raw(vol, path)
    else:
        raise VolumeFormatError(f"{path}: unknown volume extension {path.suffix!r}")


# ---------------------------------------------------------------------------
# array operations


def normalize(vol, stats: tuple[float, float] | None = None) -> np.ndarray:
    """Z-score then stretch to [0, 1].

    ``stats`` overrides the (mean, std) pair, e.g. with statistics pooled over
    a whole dataset. Constant volumes map to zeros.
    """
    v = np.asarray(vol, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot normalize an empty volume")
    mean, std = stats if stats is not None else (v.mean(), v.std())
    z = (v - mean) / max(std, STD_FLOOR)
    lo, hi = z.min(), z.max()
    if hi - lo <= 0:
        return np.zeros_like(z)
    return (z - lo) / (hi - lo)


def dataset_stats(volumes) -> tuple[float, float]:
    """Pooled (mean, std) over a list of volumes, for dataset-level normalization."""
    flat = np.concatenate([np.asarray(v, dtype=np.float64).ravel() for v in volumes])
    return float(flat.mean()), float(flat.std())


def central_gradient(vol) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(d/dz, d/dy, d/dx): central differences inside, one-sided at the faces."""
    v = np.asarray(vol, dtype=np.float64)
    if v.ndim != 3 or min(v.shape) < 2:
        raise ValueError(f"central_gradient needs every dimension >= 2, got {v.shape}")
    return tuple(np.gradient(v, edge_order=1))


def gradient_magnitude_l1(vol) -> np.ndarray:
    gz, gy, gx = central_gradient(vol)
    return np.abs(gz) + np.abs(gy) + np.abs(gx)


def _normalize_margins(margins, ndim):
    if np.isscalar(margins):
        return [(int(margins), int(margins))] * ndim
    out = []
    for m in margins:
        out.append((int(m), int(m)) if np.isscalar(m) else (int(m[0]), int(m[1])))
    if len(out) != ndim:
        raise ValueError(f"expected {ndim} margin pairs, got {len(out)}")
    return out


def reflect_pad(vol, margins) -> np.ndarray:
    """Mirror about the edge voxel (the edge itself is not repeated): [a,b,c] -> [b,a,b,c,b]."""
    v = np.asarray(vol)
    pads = _normalize_margins(margins, v.ndim)
    for axis, ((lo, hi), size) in enumerate(zip(pads, v.shape)):
        if lo < 0 or hi < 0:
            raise ValueError(f"negative margin on axis {axis}")
        if lo >= size or hi >= size:
            raise ValueError(f"margin {(lo, hi)} too large for axis {axis} of length {size}")
    return np.pad(v, pads, mode="reflect")


def center_crop(vol, margins) -> np.ndarray:
    """Inverse of :func:`reflect_pad` with the same margins."""
    v = np.asarray(vol)
    pads = _normalize_margins(margins, v.ndim)
    return v[tuple(slice(lo, s - hi) for (lo, hi), s in zip(pads, v.shape))]


def random_crop_offset(shape, crop_shape, rng: np.random.Generator) -> tuple[int, ...]:
    if len(shape) != len(crop_shape):
        raise ValueError("crop rank does not match volume rank")
    for s, c in zip(shape, crop_shape):
        if c > s or c < 1:
            raise ValueError(f"crop shape {tuple(crop_shape)} does not fit volume shape {tuple(shape)}")
    return tuple(int(rng.integers(0, s - c + 1)) for s, c in zip(shape, crop_shape))


def random_crop(vol, crop_shape, rng: np.random.Generator) -> np.ndarray:
    v = np.asarray(vol)
    offset = random_crop_offset(v.shape, crop_shape, rng)
    return v[tuple(slice(o, o + c) for o, c in zip(offset, crop_shape))]


# ---------------------------------------------------------------------------
# phantoms


def _segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip(((points - a) @ ab) / max(float(ab @ ab), 1e-12), 0.0, 1.0)
    closest = a + t[..., None] * ab
    return np.linalg.norm(points - closest, axis=-1)


def make_phantom(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray]:
    """Random capsule tubes on a flat background with optional Gaussian noise.

    Returns ``(image, mask)`` as float32 arrays; the image is clamped to [0, 1].
    """
    rng = np.random.default_rng(spec.seed)
    shape = np.array(spec.shape, dtype=np.float64)
    grid = np.stack(np.meshgrid(*(np.arange(s) for s in spec.shape), indexing="ij"), axis=-1).astype(np.float64)
    mask = np.zeros(spec.shape, dtype=bool)
    min_length = 0.5 * shape.max()
    for _ in range(spec.tube_count):
        # redraw until the tube is long enough to look like a vessel segment
        for _attempt in range(100):
            a = rng.uniform(0, shape - 1)
            b = rng.uniform(0, shape - 1)
            if np.linalg.norm(b - a) >= min_length:
                break
        radius = rng.uniform(*spec.radius_range)
        mask |= _segment_distance(grid, a, b) <= radius
    mask = mask.astype(np.float64)
    fg, bg = spec.foreground_intensity, spec.background_intensity
    image = bg + (fg - bg) * mask
    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, size=spec.shape)
    image = np.clip(image, 0.0, 1.0)
    return image.astype(np.float32), mask.astype(np.float32)
