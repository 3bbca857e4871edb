"""Synthetic 3D volumes with organ-like binary masks.

Stands in for cropped CT organs: a smoothly deformed superellipsoid
(`simple` preset) optionally decorated with overlapping lobes and stronger
deformation (`complex` preset).  Every case is a pure function of
(config, case_seed), so datasets are reproducible and generation is
embarrassingly parallel.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, FormatError, InternalError

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15

BACKGROUND_LEVEL = 0.25
SHAPE_MARGIN = 4  # voxels kept clear between foreground and every face

_SPLITS = ("train", "validation", "test")


def mix_seed(seed: int, index: int) -> int:
    """Derive an independent 64-bit sub-seed from (seed, index).

    splitmix64 finalizer applied to seed + golden-ratio increments; good
    avalanche, so adjacent indices give uncorrelated streams.
    """
    x = (int(seed) + _GOLDEN * (int(index) + 1)) & _MASK64
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & _MASK64
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & _MASK64
    x ^= x >> 31
    return x


@dataclass
class VoxelVolume:
    """3D intensity grid, shape (D, H, W), with per-axis voxel spacing."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ConfigurationError(f"volume data must be 3D, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ConfigurationError("volume data contains non-finite values")
        if any(s <= 0 for s in self.spacing):
            raise ConfigurationError(f"spacing must be strictly positive, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass
class MaskVolume:
    """Binary label grid, shape (D, H, W), values exactly {0, 1}."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.uint8)
        if self.data.ndim != 3:
            raise ConfigurationError(f"mask data must be 3D, got shape {self.data.shape}")
        if not np.isin(self.data, (0, 1)).all():
            raise ConfigurationError("mask values must be exactly 0 or 1")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def foreground_count(self) -> int:
        return int(self.data.sum())


@dataclass
class SynthConfig:
    """Parameters of the synthetic shape generator.

    `simple` mirrors round organs (spleen/liver-like), `complex` adds lobes
    and stronger deformation (pancreas-like surface complexity).
    """

    preset: str = "complex"
    dims: tuple[int, int, int] = (32, 32, 32)
    lobe_count: tuple[int, int] = (2, 5)
    deformation: float = 0.35
    noise: float = 0.05
    contrast: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if self.preset not in ("simple", "complex"):
            raise ConfigurationError(f"unknown preset {self.preset!r}")
        if len(self.dims) != 3 or any(d < 16 for d in self.dims):
            raise ConfigurationError(f"dims must be three integers >= 16, got {self.dims}")
        if self.deformation < 0:
            raise ConfigurationError("deformation amplitude must be >= 0")
        lo, hi = self.lobe_count
        if lo < 0 or hi < lo:
            raise ConfigurationError(f"invalid lobe_count range {self.lobe_count}")
        if self.noise < 0:
            raise ConfigurationError("noise level must be >= 0")

    @classmethod
    def for_preset(cls, preset: str, **kwargs) -> "SynthConfig":
        defaults = {
            "simple": dict(lobe_count=(0, 0), deformation=0.12),
            "complex": dict(lobe_count=(2, 5), deformation=0.35),
        }
        if preset not in defaults:
            raise ConfigurationError(f"unknown preset {preset!r}")
        merged = {**defaults[preset], **kwargs}
        return cls(preset=preset, **merged)


@dataclass
class CaseEntry:
    case_id: str
    split: str
    path: str = ""
    seed: int = 0


@dataclass
class DatasetManifest:
    """Case list with split assignment plus a snapshot of the generation config."""

    cases: list[CaseEntry]
    ratios: tuple[float, float, float] = (0.5, 0.25, 0.25)
    seed: int = 0
    config: dict = field(default_factory=dict)

    def ids(self, split: str | None = None) -> list[str]:
        if split is None:
            return [c.case_id for c in self.cases]
        if split not in _SPLITS:
            raise ConfigurationError(f"unknown split {split!r}")
        return [c.case_id for c in self.cases if c.split == split]

    def entry(self, case_id: str) -> CaseEntry:
        for c in self.cases:
            if c.case_id == case_id:
                return c
        raise ConfigurationError(f"case {case_id!r} not in manifest")


def superellipsoid_field(dims, center, semi_axes, exponent) -> np.ndarray:
    """Implicit superellipsoid value sum(|x_i/a_i|^p) on the voxel grid.

    The shape interior is {field <= 1}.  Equal semi-axes and exponent 2
    give an exact sphere.
    """
    grids = np.ogrid[: dims[0], : dims[1], : dims[2]]
    total = np.zeros(dims, dtype=np.float64)
    for g, c, a in zip(grids, center, semi_axes):
        total += np.abs((g - c) / a) ** exponent
    return total


def superellipsoid_mask(dims, center, semi_axes, exponent=2.0) -> np.ndarray:
    """Boolean mask of voxels whose centers lie inside the superellipsoid."""
    return superellipsoid_field(dims, center, semi_axes, exponent) <= 1.0


def _smooth_noise(dims, rng, sigma_frac=0.15) -> np.ndarray:
    """Band-limited noise field normalized to max |value| = 1."""
    raw = rng.standard_normal(dims)
    sigma = [max(1.0, d * sigma_frac) for d in dims]
    smooth = ndimage.gaussian_filter(raw, sigma=sigma, mode="nearest")
    peak = np.abs(smooth).max()
    if peak < 1e-12:
        return np.zeros(dims)
    return smooth / peak


def _largest_component(mask: np.ndarray) -> np.ndarray:
    """Keep only the largest 6-connected foreground component."""
    structure = ndimage.generate_binary_structure(3, 1)
    labels, count = ndimage.label(mask, structure=structure)
    if count <= 1:
        return mask
    sizes = ndimage.sum_labels(mask, labels, index=np.arange(1, count + 1))
    return labels == (1 + int(np.argmax(sizes)))


def _directional_radius(direction, semi_axes, exponent) -> float:
    # distance from center to the superellipsoid surface along a unit direction
    s = sum(abs(d / a) ** exponent for d, a in zip(direction, semi_axes))
    return float(s ** (-1.0 / exponent)) if s > 0 else 0.0


def _generate_mask(config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    dims = config.dims
    center = tuple((d - 1) / 2.0 for d in dims)
    allowed = [d / 2.0 - SHAPE_MARGIN for d in dims]
    if min(allowed) < 3.0:
        raise ConfigurationError(
            f"dims {dims} too small for a shape with margin {SHAPE_MARGIN}"
        )

    n_lobes = int(rng.integers(config.lobe_count[0], config.lobe_count[1] + 1))
    lobe_reach = 1.3 if n_lobes > 0 else 1.0
    # keep deformed surface and lobes analytically inside the margin
    shrink = max(lobe_reach, 1.0 + config.deformation)

    if config.preset == "simple":
        exponent = float(rng.uniform(2.0, 3.0))
        axis_scale = rng.uniform(0.75, 1.0, size=3)
    else:
        exponent = float(rng.uniform(1.6, 2.6))
        axis_scale = rng.uniform(0.6, 1.0, size=3)
    semi_axes = [a * s / shrink for a, s in zip(allowed, axis_scale)]

    base = superellipsoid_field(dims, center, semi_axes, exponent) - 1.0
    if config.deformation > 0:
        base = base + config.deformation * _smooth_noise(dims, rng)
    mask = base <= 0.0

    for _ in range(n_lobes):
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        r_dir = _directional_radius(direction, semi_axes, exponent)
        offset = r_dir * float(rng.uniform(0.7, 0.95))
        lobe_center = tuple(c + offset * direction[i] for i, c in enumerate(center))
        lobe_axes = [max(1.5, a * float(rng.uniform(0.25, 0.4))) for a in semi_axes]
        mask |= superellipsoid_mask(dims, lobe_center, lobe_axes, 2.0)

    return _largest_component(mask)


def generate_case(config: SynthConfig, case_seed: int) -> tuple[VoxelVolume, MaskVolume]:
    """Generate one (volume, mask) pair; deterministic in (config, case_seed).

    The mask is a single 6-connected component.  The volume is the mask's
    two intensity levels plus a smooth bias field and clipped Gaussian
    noise.  An empty mask after deformation triggers regeneration with a
    derived sub-seed (a handful of attempts, then InternalError).
    """
    for attempt in range(5):
        seed = case_seed if attempt == 0 else mix_seed(case_seed, attempt)
        rng = np.random.default_rng(seed)
        mask = _generate_mask(config, rng)
        if mask.any():
            break
    else:
        raise InternalError(
            f"mask degenerate after 5 attempts for case seed {case_seed}"
        )

    bias = 0.1 * _smooth_noise(config.dims, rng, sigma_frac=0.3)
    volume = BACKGROUND_LEVEL + config.contrast * mask.astype(np.float64) + bias
    if config.noise > 0:
        raw = rng.standard_normal(config.dims)
        volume = volume + config.noise * np.clip(raw, -3.5, 3.5)
    return VoxelVolume(volume.astype(np.float32)), MaskVolume(mask.astype(np.uint8))


def pad_volume(volume: VoxelVolume, mask: MaskVolume, margin: int) -> tuple[VoxelVolume, MaskVolume]:
    """Pad both grids by `margin` voxels per face (background / zero fill)."""
    if margin < 0:
        raise ConfigurationError(f"margin must be >= 0, got {margin}")
    if margin == 0:
        return volume, mask
    pad = [(margin, margin)] * 3
    vol = np.pad(volume.data, pad, mode="constant", constant_values=BACKGROUND_LEVEL)
    msk = np.pad(mask.data, pad, mode="constant", constant_values=0)
    return VoxelVolume(vol, volume.spacing), MaskVolume(msk)


def split_dataset(case_ids, ratios=(0.5, 0.25, 0.25), seed=0) -> DatasetManifest:
    """Deterministically shuffle and split case ids into train/validation/test.

    Validation/test counts are the half-up rounded ratios; the remainder
    goes to train.
    """
    case_ids = list(case_ids)
    n = len(case_ids)
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"ratios must be three positive values summing to 1, got {ratios}")
    if n < 4:
        raise ConfigurationError(f"need at least 4 cases to split, got {n}")

    n_val = int(np.floor(ratios[1] * n + 0.5))
    n_test = int(np.floor(ratios[2] * n + 0.5))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise ConfigurationError(
            f"split of {n} cases with ratios {ratios} leaves an empty split "
            f"(train={n_train}, validation={n_val}, test={n_test})"
        )

    order = np.random.default_rng(seed).permutation(n)
    cases = []
    for pos, idx in enumerate(order):
        if pos < n_train:
            split = "train"
        elif pos < n_train + n_val:
            split = "validation"
        else:
            split = "test"
        cases.append(CaseEntry(case_id=case_ids[idx], split=split))
    cases.sort(key=lambda c: c.case_id)
    return DatasetManifest(cases=cases, ratios=ratios, seed=seed)


# ---------------------------------------------------------------------------
# On-disk case container:
#   case_<id>/volume.raw   little-endian float32, C order, ((z*H)+y)*W+x
#   case_<id>/mask.raw     little-endian uint8, same order
#   case_<id>/meta.json    dims, spacing, dtype, seed, preset
# ---------------------------------------------------------------------------

_VOLUME_DTYPE = np.dtype("<f4")
_MASK_DTYPE = np.dtype("u1")


def atomic_write_bytes(path: str, payload: bytes) -> None:
    """Write via a sibling temp file and atomic rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def store_case(path, volume: VoxelVolume, mask: MaskVolume, seed=0, preset="") -> None:
    """Write one case directory; round-trips bit-exactly through load_case."""
    if volume.dims != mask.dims:
        raise ConfigurationError(f"volume dims {volume.dims} != mask dims {mask.dims}")
    os.makedirs(path, exist_ok=True)
    meta = {
        "dims": list(volume.dims),
        "spacing": [float(s) for s in volume.spacing],
        "dtype": {"volume": "f32", "mask": "u8"},
        "seed": int(seed),
        "preset": str(preset),
    }
    atomic_write_bytes(os.path.join(path, "volume.raw"),
                       np.ascontiguousarray(volume.data, dtype=_VOLUME_DTYPE).tobytes())
    atomic_write_bytes(os.path.join(path, "mask.raw"),
                       np.ascontiguousarray(mask.data, dtype=_MASK_DTYPE).tobytes())
    atomic_write_text(os.path.join(path, "meta.json"), json.dumps(meta, indent=2) + "\n")


def load_case(path) -> tuple[VoxelVolume, MaskVolume, dict]:
    """Read a case directory, validating header and payload sizes."""
    meta_path = os.path.join(path, "meta.json")
    try:
        with open(meta_path, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        raise FormatError(f"missing meta.json in {path}")
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt meta.json in {path}: {exc}")

    dims = meta.get("dims")
    if (not isinstance(dims, list)) or len(dims) != 3 or any(int(d) <= 0 for d in dims):
        raise FormatError(f"meta.json field 'dims' invalid: {dims!r}")
    dims = tuple(int(d) for d in dims)
    spacing = meta.get("spacing", [1.0, 1.0, 1.0])
    if len(spacing) != 3 or any(float(s) <= 0 for s in spacing):
        raise FormatError(f"meta.json field 'spacing' invalid: {spacing!r}")
    dtypes = meta.get("dtype", {})
    if dtypes.get("volume") != "f32":
        raise FormatError(f"meta.json field 'dtype.volume' unknown: {dtypes.get('volume')!r}")
    if dtypes.get("mask") != "u8":
        raise FormatError(f"meta.json field 'dtype.mask' unknown: {dtypes.get('mask')!r}")

    expected = dims[0] * dims[1] * dims[2]
    with open(os.path.join(path, "volume.raw"), "rb") as fh:
        vol = np.frombuffer(fh.read(), dtype=_VOLUME_DTYPE)
    if vol.size != expected:
        raise FormatError(
            f"volume.raw payload has {vol.size} scalars, dims {dims} require {expected}"
        )
    with open(os.path.join(path, "mask.raw"), "rb") as fh:
        msk = np.frombuffer(fh.read(), dtype=_MASK_DTYPE)
    if msk.size != expected:
        raise FormatError(
            f"mask.raw payload has {msk.size} scalars, dims {dims} require {expected}"
        )
    if not np.isin(msk, (0, 1)).all():
        raise FormatError("mask.raw contains values other than 0/1")

    volume = VoxelVolume(vol.reshape(dims).copy(), tuple(float(s) for s in spacing))
    mask = MaskVolume(msk.reshape(dims).copy())
    return volume, mask, meta


def save_manifest(path, manifest: DatasetManifest) -> None:
    payload = {
        "ratios": list(manifest.ratios),
        "seed": manifest.seed,
        "config": manifest.config,
        "cases": [asdict(c) for c in manifest.cases],
    }
    atomic_write_text(path, json.dumps(payload, indent=2) + "\n")


def load_manifest(path) -> DatasetManifest:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except FileNotFoundError:
        raise FormatError(f"missing manifest {path}")
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt manifest {path}: {exc}")
    try:
        cases = [CaseEntry(**c) for c in payload["cases"]]
        manifest = DatasetManifest(
            cases=cases,
            ratios=tuple(payload["ratios"]),
            seed=int(payload["seed"]),
            config=payload.get("config", {}),
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"manifest {path} missing field: {exc}")
    for c in manifest.cases:
        if c.split not in _SPLITS:
            raise FormatError(f"manifest case {c.case_id!r} has unknown split {c.split!r}")
    return manifest


def single_connected_component(mask: MaskVolume) -> bool:
    """True when the foreground is exactly one 6-connected component."""
    structure = ndimage.generate_binary_structure(3, 1)
    _, count = ndimage.label(mask.data, structure=structure)
    return count == 1
