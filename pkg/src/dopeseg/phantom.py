"""Synthetic dual-domain CT phantoms with ground-truth bladder masks.

Volumes live on a regular voxel grid indexed (x, y, z) with per-axis spacing
in mm; voxel centers sit at ``(index + 0.5) * spacing``. NA volumes contain a
smooth background plus one randomly posed ellipsoidal bladder; WA volumes are
NA volumes deformed around a rigid applicator and overlaid with metal-like
imaging artifacts (bright cylinder, streak rays, shadow band).

Intensities are normalized units in [0, 1]. For real CT ingestion, map
Hounsfield units linearly, e.g. ``norm = clip((HU + 1000) / 2000, 0, 1)``,
and write volumes in the on-disk format of :func:`save_volume`.
"""

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .hashing import derive_seed, stable_hash

NA = "NA"
WA = "WA"

# 6-connectivity: faces only
_STRUCT_6 = ndimage.generate_binary_structure(3, 1)

# free knobs of the artifact model, not exposed in configs
_STREAK_HALF_WIDTH_RAD = 0.03
_STREAK_DECAY_MM = 60.0
_BACKGROUND_MODES = 3
_BACKGROUND_REL_AMPLITUDE = 0.08

_FIT_ATTEMPTS = 10


class PhantomError(RuntimeError):
    """Raised when a phantom cannot be generated under its config."""


class MaskTopologyError(PhantomError):
    """Raised when deformation or clearing breaks the mask apart.

    Callers should reduce ``displacement_magnitude`` or move the applicator
    axis away from the bladder.
    """


@dataclass(frozen=True)
class PhantomConfig:
    """Geometry and intensity model for one synthetic patient volume."""

    grid_shape: tuple[int, int, int] = (96, 96, 64)
    voxel_spacing: tuple[float, float, float] = (2.0, 2.0, 2.5)
    bladder_radius_range: tuple[float, float] = (12.0, 22.0)
    bladder_center_jitter: float = 12.0
    background_intensity: float = 0.35
    bladder_intensity: float = 0.75
    noise_sigma: float = 0.03
    seed: int = 0

    def validate(self) -> None:
        if any(n < 16 for n in self.grid_shape):
            raise ValueError(f"grid_shape components must be >= 16, got {self.grid_shape}")
        if any(s <= 0 for s in self.voxel_spacing):
            raise ValueError(f"voxel_spacing must be positive, got {self.voxel_spacing}")
        lo, hi = self.bladder_radius_range
        if not (0 < lo <= hi):
            raise ValueError(f"bladder_radius_range must be a positive interval, got {self.bladder_radius_range}")
        extent = min(n * s for n, s in zip(self.grid_shape, self.voxel_spacing))
        if 2 * hi > extent:
            raise ValueError(f"bladder_radius_range upper bound {hi} mm cannot fit a {extent} mm grid")
        if self.bladder_center_jitter < 0:
            raise ValueError("bladder_center_jitter must be >= 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    def to_dict(self) -> dict:
        return {
            "grid_shape": list(self.grid_shape),
            "voxel_spacing": list(self.voxel_spacing),
            "bladder_radius_range": list(self.bladder_radius_range),
            "bladder_center_jitter": self.bladder_center_jitter,
            "background_intensity": self.background_intensity,
            "bladder_intensity": self.bladder_intensity,
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        cfg = cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class ApplicatorSpec:
    """Applicator geometry plus the deformation and artifact amplitudes."""

    axis_entry_point: tuple[float, float, float] = (48.0, 28.0, 0.0)  # voxel coords
    axis_direction: tuple[float, float, float] = (0.0, 0.0, 1.0)
    radius: float = 6.0  # mm
    intensity: float = 1.0
    streak_count: int = 8
    streak_amplitude: float = 0.25
    shadow_band_width: float = 8.0  # mm
    shadow_attenuation: float = 0.35
    displacement_magnitude: float = 6.0  # mm
    displacement_falloff: float = 30.0  # mm

    def validate(self) -> None:
        if self.radius <= 0:
            raise ValueError(f"applicator radius must be > 0, got {self.radius}")
        if not 0.0 <= self.shadow_attenuation <= 1.0:
            raise ValueError(f"shadow_attenuation must be in [0, 1], got {self.shadow_attenuation}")
        if self.displacement_magnitude < 0:
            raise ValueError("displacement_magnitude must be >= 0")
        if self.displacement_falloff <= 0:
            raise ValueError("displacement_falloff must be > 0")
        if self.streak_count < 0:
            raise ValueError("streak_count must be >= 0")
        if float(np.linalg.norm(self.axis_direction)) == 0.0:
            raise ValueError("axis_direction must be a nonzero vector")

    def to_dict(self) -> dict:
        return {
            "axis_entry_point": list(self.axis_entry_point),
            "axis_direction": list(self.axis_direction),
            "radius": self.radius,
            "intensity": self.intensity,
            "streak_count": self.streak_count,
            "streak_amplitude": self.streak_amplitude,
            "shadow_band_width": self.shadow_band_width,
            "shadow_attenuation": self.shadow_attenuation,
            "displacement_magnitude": self.displacement_magnitude,
            "displacement_falloff": self.displacement_falloff,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ApplicatorSpec":
        spec = cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})
        spec.validate()
        return spec


@dataclass
class Volume:
    """A 3D intensity grid with an aligned binary bladder mask."""

    intensities: np.ndarray  # float32, shape (nx, ny, nz)
    mask: np.ndarray  # uint8 in {0, 1}, same shape
    spacing: tuple[float, float, float]
    domain: str  # NA or WA
    patient_id: str
    seed: int = 0
    config_hash: str = ""

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.intensities.shape


def _voxel_center_coords(shape, spacing):
    """Per-axis voxel center positions in mm."""
    return [(np.arange(n, dtype=np.float64) + 0.5) * s for n, s in zip(shape, spacing)]


def _rotation_from_quaternion(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _count_components(mask: np.ndarray) -> int:
    _, n = ndimage.label(mask, structure=_STRUCT_6)
    return int(n)


def _rasterize_ellipsoid(shape, spacing, center, semi_axes, rotation):
    """Binary mask of voxel centers inside the posed ellipsoid."""
    ax = _voxel_center_coords(shape, spacing)
    gx, gy, gz = np.meshgrid(*ax, indexing="ij")
    off = np.stack([gx - center[0], gy - center[1], gz - center[2]], axis=-1)
    local = off @ rotation  # body-frame coordinates, rows of R^T dotted in
    r2 = (local / np.asarray(semi_axes)) ** 2
    return (r2.sum(axis=-1) <= 1.0).astype(np.uint8)


def generate_patient(config: PhantomConfig, patient_id: str) -> Volume:
    """Generate one NA volume with a randomly posed ellipsoidal bladder.

    The per-patient RNG seed is ``derive_seed(config.seed, patient_id)``, so
    cohorts reproduce regardless of generation order. The bladder pose is
    resampled up to 10 times if it does not fit the grid; after that the
    config is rejected.
    """
    config.validate()
    patient_seed = derive_seed(config.seed, patient_id)
    rng = np.random.default_rng(patient_seed)
    shape, spacing = config.grid_shape, config.voxel_spacing
    size_mm = np.array([n * s for n, s in zip(shape, spacing)])
    grid_center = size_mm / 2.0

    lo, hi = config.bladder_radius_range
    mask = None
    for _ in range(_FIT_ATTEMPTS):
        semi_axes = rng.uniform(lo, hi, size=3)
        rotation = _rotation_from_quaternion(rng.normal(size=4))
        center = grid_center + rng.uniform(-1.0, 1.0, size=3) * config.bladder_center_jitter
        # extent of the rotated ellipsoid along each grid axis
        extent = np.sqrt(((rotation * semi_axes[None, :]) ** 2).sum(axis=1))
        margin = np.asarray(spacing)
        if np.all(center - extent >= margin) and np.all(center + extent <= size_mm - margin):
            candidate = _rasterize_ellipsoid(shape, spacing, center, semi_axes, rotation)
            if candidate.any() and _count_components(candidate) == 1:
                mask = candidate
                break
    if mask is None:
        raise PhantomError(
            f"patient {patient_id}: no bladder pose fit the grid after {_FIT_ATTEMPTS} attempts"
        )

    intensities = np.full(shape, config.background_intensity, dtype=np.float64)
    intensities *= 1.0 + _BACKGROUND_REL_AMPLITUDE * _smooth_field(shape, spacing, rng)
    intensities[mask.astype(bool)] = config.bladder_intensity
    if config.noise_sigma > 0:
        intensities += rng.normal(0.0, config.noise_sigma, size=shape)
    intensities = np.clip(intensities, 0.0, 1.0).astype(np.float32)

    return Volume(
        intensities=intensities,
        mask=mask,
        spacing=spacing,
        domain=NA,
        patient_id=patient_id,
        seed=patient_seed,
        config_hash=stable_hash(config.to_dict()),
    )


def _smooth_field(shape, spacing, rng) -> np.ndarray:
    """Low-frequency multiplicative texture in [-1, 1]."""
    ax = _voxel_center_coords(shape, spacing)
    gx, gy, gz = np.meshgrid(*ax, indexing="ij")
    size = np.array([n * s for n, s in zip(shape, spacing)])
    out = np.zeros(shape, dtype=np.float64)
    for _ in range(_BACKGROUND_MODES):
        freq = rng.uniform(0.5, 1.5, size=3) / size  # half to 1.5 periods per extent
        phase = rng.uniform(0.0, 2.0 * math.pi, size=3)
        out += (
            np.cos(2 * math.pi * freq[0] * gx + phase[0])
            * np.cos(2 * math.pi * freq[1] * gy + phase[1])
            * np.cos(2 * math.pi * freq[2] * gz + phase[2])
        )
    return out / _BACKGROUND_MODES


def _axis_geometry(volume: Volume, spec: ApplicatorSpec):
    """Per-voxel axial distance rho and unit radial offsets from the axis line."""
    shape, spacing = volume.shape, np.asarray(volume.spacing)
    p0 = (np.asarray(spec.axis_entry_point) + 0.5) * spacing
    d = np.asarray(spec.axis_direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    ax = _voxel_center_coords(shape, volume.spacing)
    gx, gy, gz = np.meshgrid(*ax, indexing="ij")
    v = np.stack([gx - p0[0], gy - p0[1], gz - p0[2]], axis=-1)
    t = v @ d
    radial = v - t[..., None] * d[None, None, None, :]
    rho = np.linalg.norm(radial, axis=-1)
    return p0, d, radial, rho


def apply_applicator(volume: Volume, spec: ApplicatorSpec) -> Volume:
    """Turn an NA volume into a WA volume: deform, stamp, streak, shadow.

    Steps, in order: radial push-away deformation of intensities and mask
    (backward warp, trilinear, mask re-binarized at 0.5); bright cylinder
    along the axis; alternating bright/dark streak rays per axial slice;
    multiplicative shadow annulus around the cylinder; mask cleared inside
    the cylinder. Raises :class:`MaskTopologyError` if the deformation or the
    clearing leaves anything but one 6-connected mask component.
    """
    if volume.domain != NA:
        raise ValueError(f"apply_applicator requires an NA volume, got domain {volume.domain!r}")
    spec.validate()
    shape = volume.shape
    spacing = np.asarray(volume.spacing)
    p0, d, radial, rho = _axis_geometry(volume, spec)
    rng = np.random.default_rng(derive_seed(volume.seed, "applicator"))

    intensities = volume.intensities.astype(np.float64)
    mask = volume.mask.copy()

    if spec.displacement_magnitude > 0:
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where(rho[..., None] > 0, radial / rho[..., None], 0.0)
        disp_mm = spec.displacement_magnitude * np.exp(-rho / spec.displacement_falloff)
        sample_off = disp_mm[..., None] * unit / spacing  # in voxel index units
        idx = np.indices(shape, dtype=np.float64)
        coords = [idx[i] - sample_off[..., i] for i in range(3)]
        intensities = ndimage.map_coordinates(intensities, coords, order=1, mode="nearest")
        warped = ndimage.map_coordinates(mask.astype(np.float64), coords, order=1, mode="nearest")
        mask = (warped >= 0.5).astype(np.uint8)
        if not mask.any() or _count_components(mask) > 1:
            raise MaskTopologyError(
                f"patient {volume.patient_id}: displacement split or erased the bladder mask"
            )

    inside = rho <= spec.radius
    intensities[inside] = spec.intensity

    if spec.streak_count > 0 and spec.streak_amplitude != 0.0:
        intensities += _streak_pattern(volume, spec, p0, d, rho, rng)

    if spec.shadow_attenuation > 0:
        band = (rho > spec.radius) & (rho <= spec.radius + spec.shadow_band_width)
        intensities[band] *= 1.0 - spec.shadow_attenuation

    mask[inside] = 0
    if not mask.any() or _count_components(mask) > 1:
        raise MaskTopologyError(
            f"patient {volume.patient_id}: applicator cylinder split or erased the bladder mask"
        )

    return Volume(
        intensities=np.clip(intensities, 0.0, 1.0).astype(np.float32),
        mask=mask,
        spacing=volume.spacing,
        domain=WA,
        patient_id=volume.patient_id,
        seed=volume.seed,
        config_hash=volume.config_hash,
    )


def _streak_pattern(volume, spec, p0, d, rho, rng) -> np.ndarray:
    """Additive streak rays radiating from the axis in every axial slice."""
    shape, spacing = volume.shape, volume.spacing
    ax = _voxel_center_coords(shape, spacing)
    z = ax[2]
    if abs(d[2]) > 1e-9:
        t = (z - p0[2]) / d[2]
        cx, cy = p0[0] + t * d[0], p0[1] + t * d[1]  # axis point per slice
        slice_hit = np.ones(shape[2], dtype=bool)
    else:
        cx = np.full(shape[2], p0[0])
        cy = np.full(shape[2], p0[1])
        slice_hit = np.abs(z - p0[2]) <= spec.radius
    gx = ax[0][:, None, None]
    gy = ax[1][None, :, None]
    theta = np.arctan2(gy - cy[None, None, :], gx - cx[None, None, :])
    pattern = np.zeros(shape, dtype=np.float64)
    angles = rng.uniform(0.0, 2.0 * math.pi, size=spec.streak_count)
    decay = np.exp(-np.maximum(rho - spec.radius, 0.0) / _STREAK_DECAY_MM)
    for k, angle in enumerate(angles):
        delta = np.abs((theta - angle + math.pi) % (2.0 * math.pi) - math.pi)
        ray = (delta < _STREAK_HALF_WIDTH_RAD) & (rho > spec.radius)
        sign = 1.0 if k % 2 == 0 else -1.0
        pattern += sign * spec.streak_amplitude * ray * decay
    pattern[:, :, ~slice_hit] = 0.0
    return pattern


def generate_cohort(
    n_patients: int,
    domain: str,
    config: PhantomConfig,
    applicator: ApplicatorSpec | None = None,
) -> list[Volume]:
    """Generate ``n_patients`` volumes with distinct ids and derived seeds."""
    if n_patients < 1:
        raise ValueError(f"n_patients must be >= 1, got {n_patients}")
    if domain not in (NA, WA):
        raise ValueError(f"unknown domain {domain!r}")
    if domain == WA and applicator is None:
        raise ValueError("WA cohorts require an ApplicatorSpec")
    if domain == NA and applicator is not None:
        raise ValueError("NA cohorts do not take an ApplicatorSpec")

    volumes = []
    for i in range(n_patients):
        patient_id = f"{domain}{i:03d}"
        try:
            vol = generate_patient(config, patient_id)
            if domain == WA:
                vol = apply_applicator(vol, applicator)
        except PhantomError:
            raise
        except Exception as exc:  # attach patient context to unexpected failures
            raise PhantomError(f"patient {patient_id}: {exc}") from exc
        volumes.append(vol)
    return volumes


def axis_distance(volume: Volume, spec: ApplicatorSpec) -> np.ndarray:
    """Distance from every voxel center to the applicator axis, in mm."""
    _, _, _, rho = _axis_geometry(volume, spec)
    return rho


def save_volume(volume: Volume, out_dir: str | Path) -> Path:
    """Write raw little-endian float32 intensities, raw uint8 mask and a JSON sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pid = volume.patient_id
    volume.intensities.astype("<f4").tofile(out_dir / f"{pid}.img.raw")
    volume.mask.astype(np.uint8).tofile(out_dir / f"{pid}.mask.raw")
    sidecar = {
        "patient_id": pid,
        "shape": list(volume.shape),
        "spacing": list(volume.spacing),
        "domain": volume.domain,
        "seed": volume.seed,
        "config_hash": volume.config_hash,
        "intensities_dtype": "<f4",
        "mask_dtype": "u1",
        "order": "C",
    }
    path = out_dir / f"{pid}.json"
    path.write_text(json.dumps(sidecar, indent=2) + "\n")
    return path


def load_volume(out_dir: str | Path, patient_id: str) -> Volume:
    """Read a volume written by :func:`save_volume`."""
    out_dir = Path(out_dir)
    sidecar = json.loads((out_dir / f"{patient_id}.json").read_text())
    shape = tuple(sidecar["shape"])
    intensities = np.fromfile(out_dir / f"{patient_id}.img.raw", dtype="<f4").reshape(shape)
    mask = np.fromfile(out_dir / f"{patient_id}.mask.raw", dtype=np.uint8).reshape(shape)
    return Volume(
        intensities=intensities,
        mask=mask,
        spacing=tuple(sidecar["spacing"]),
        domain=sidecar["domain"],
        patient_id=sidecar["patient_id"],
        seed=sidecar["seed"],
        config_hash=sidecar["config_hash"],
    )


def list_patients(out_dir: str | Path) -> list[str]:
    """Patient ids present in a cohort directory, sorted."""
    return sorted(p.stem for p in Path(out_dir).glob("*.json"))
