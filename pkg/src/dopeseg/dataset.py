"""2D slice pools, preprocessing, augmentation and ratio-controlled assortment.

The training-set composition contract lives here: pools are sliced per
anatomical plane, split patient-wise with a fixed WA-only test manifest, and
assorted at exact NA:WA ratios. All randomness is driven by explicit seeds.
"""

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .hashing import bytes_hash, derive_seed
from .phantom import NA, WA, Volume

AXIAL = "axial"
CORONAL = "coronal"
SAGITTAL = "sagittal"
PLANES = (AXIAL, CORONAL, SAGITTAL)

# volume array axis whose index enumerates slices of each plane
_PLANE_AXIS = {SAGITTAL: 0, CORONAL: 1, AXIAL: 2}

TRAIN = "train"
VAL = "val"
TEST = "test"


@dataclass
class SliceSample:
    """One 2D image/mask pair cut from a volume."""

    image: np.ndarray  # float32 in [0, 1]
    mask: np.ndarray  # uint8 in {0, 1}, same shape
    plane: str
    slice_index: int
    patient_id: str
    domain: str
    variant: str = ""  # provenance tag, e.g. "aug" for augmented copies

    @property
    def key(self) -> str:
        suffix = f"_{self.variant}" if self.variant else ""
        return f"{self.patient_id}_{self.plane}_{self.slice_index:03d}{suffix}"


@dataclass(frozen=True)
class AssortmentSpec:
    """NA:WA mixing ratio, realized over a fixed total sample count."""

    na_parts: int
    wa_parts: int
    total: int
    seed: int

    def validate(self) -> None:
        if self.na_parts < 0 or self.wa_parts < 0:
            raise ValueError("ratio parts must be >= 0")
        if self.na_parts + self.wa_parts < 1:
            raise ValueError(f"ratio {self.na_parts}:{self.wa_parts} has no parts")
        if self.total < 1:
            raise ValueError(f"total must be >= 1, got {self.total}")

    @property
    def counts(self) -> tuple[int, int]:
        """(NA, WA) sample counts: NA takes the floor, WA the remainder."""
        self.validate()
        na = self.total * self.na_parts // (self.na_parts + self.wa_parts)
        return na, self.total - na

    @property
    def label(self) -> str:
        return f"{self.na_parts:02d}:{self.wa_parts:02d}"


@dataclass(frozen=True)
class ManifestEntry:
    sample: SliceSample
    domain: str
    patient_id: str


@dataclass
class DatasetManifest:
    """Ordered sample list with realized domain counts and split provenance."""

    entries: list[ManifestEntry]
    spec: AssortmentSpec
    split: str

    def __post_init__(self):
        if self.split == TEST and any(e.domain != WA for e in self.entries):
            raise ValueError("test manifests must contain only WA entries")

    @property
    def counts(self) -> tuple[int, int]:
        na = sum(1 for e in self.entries if e.domain == NA)
        return na, len(self.entries) - na

    def samples(self) -> list[SliceSample]:
        return [e.sample for e in self.entries]

    def patient_ids(self) -> set[str]:
        return {e.patient_id for e in self.entries}

    def to_csv_bytes(self) -> bytes:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["path", "mask_path", "patient_id", "domain", "plane", "split"])
        for e in self.entries:
            key = e.sample.key
            writer.writerow(
                [
                    f"{self.split}/{key}.png",
                    f"{self.split}/{key}_mask.png",
                    e.patient_id,
                    e.domain,
                    e.sample.plane,
                    self.split,
                ]
            )
        return buf.getvalue().encode("utf-8")

    def content_hash(self) -> str:
        return bytes_hash(self.to_csv_bytes())


def extract_slices(volume: Volume, plane: str, keep_empty: bool = False) -> list[SliceSample]:
    """Cut a volume into 2D samples along one plane, ascending index.

    With ``keep_empty=False`` slices whose mask is all zero are dropped.
    """
    if plane not in _PLANE_AXIS:
        raise ValueError(f"unknown plane {plane!r}; expected one of {PLANES}")
    axis = _PLANE_AXIS[plane]
    samples = []
    for k in range(volume.shape[axis]):
        image = np.take(volume.intensities, k, axis=axis)
        mask = np.take(volume.mask, k, axis=axis)
        if not keep_empty and not mask.any():
            continue
        samples.append(
            SliceSample(
                image=np.clip(image, 0.0, 1.0).astype(np.float32),
                mask=mask.astype(np.uint8),
                plane=plane,
                slice_index=k,
                patient_id=volume.patient_id,
                domain=volume.domain,
            )
        )
    return samples


def _resize(arr: np.ndarray, target: tuple[int, int], order: int) -> np.ndarray:
    """Resample to ``target`` with pixel-center alignment; exact at identity."""
    rows = (np.arange(target[0]) + 0.5) * arr.shape[0] / target[0] - 0.5
    cols = (np.arange(target[1]) + 0.5) * arr.shape[1] / target[1] - 0.5
    grid = np.meshgrid(rows, cols, indexing="ij")
    return ndimage.map_coordinates(arr.astype(np.float64), grid, order=order, mode="nearest")


def normalize_image(image: np.ndarray) -> np.ndarray:
    """Per-slice min-max to [0, 1]; constant slices map to all zeros."""
    lo, hi = float(image.min()), float(image.max())
    if hi <= lo:
        return np.zeros_like(image, dtype=np.float32)
    return ((image - lo) / (hi - lo)).astype(np.float32)


def preprocess(sample: SliceSample, target_size: int) -> SliceSample:
    """Resize to target_size² (image bilinear, mask nearest) and normalize."""
    if target_size < 16:
        raise ValueError(f"target_size must be >= 16, got {target_size}")
    shape = (target_size, target_size)
    image = _resize(sample.image, shape, order=1)
    mask = _resize(sample.mask, shape, order=0)
    return replace(
        sample,
        image=normalize_image(image),
        mask=(mask >= 0.5).astype(np.uint8),
    )


@dataclass(frozen=True)
class AugmentConfig:
    hflip: bool = False
    rotate: bool = False
    max_rotation_deg: float = 10.0
    intensity_jitter: bool = False
    max_jitter: float = 0.05

    @property
    def enabled(self) -> bool:
        return self.hflip or self.rotate or self.intensity_jitter


def hflip_sample(sample: SliceSample) -> SliceSample:
    return replace(sample, image=sample.image[:, ::-1].copy(), mask=sample.mask[:, ::-1].copy())


def rotate_sample(sample: SliceSample, angle_deg: float) -> SliceSample:
    """Rotate image and mask jointly; mask re-binarized at 0.5."""
    image = ndimage.rotate(sample.image, angle_deg, reshape=False, order=1, mode="nearest")
    mask = ndimage.rotate(sample.mask.astype(np.float64), angle_deg, reshape=False, order=1, mode="nearest")
    return replace(
        sample,
        image=np.clip(image, 0.0, 1.0).astype(np.float32),
        mask=(mask >= 0.5).astype(np.uint8),
    )


def augment(sample: SliceSample, aug_config: AugmentConfig, seed: int) -> SliceSample:
    """Apply the enabled augmentations with draws fixed by ``seed``.

    Draw order is fixed (flip coin, angle, jitter) so a given seed always
    produces the same transform regardless of which ops are enabled.
    """
    rng = np.random.default_rng(seed)
    out = sample
    if aug_config.hflip and rng.random() < 0.5:
        out = hflip_sample(out)
    if aug_config.rotate:
        angle = rng.uniform(-aug_config.max_rotation_deg, aug_config.max_rotation_deg)
        out = rotate_sample(out, angle)
    if aug_config.intensity_jitter:
        delta = rng.uniform(-aug_config.max_jitter, aug_config.max_jitter)
        out = replace(out, image=np.clip(out.image + delta, 0.0, 1.0).astype(np.float32))
    return out


def expand_with_augmented(
    pool: list[SliceSample], aug_config: AugmentConfig, seed: int
) -> list[SliceSample]:
    """Append one augmented variant per sample; no-op when nothing is enabled."""
    if not aug_config.enabled:
        return list(pool)
    out = list(pool)
    for sample in pool:
        variant = augment(sample, aug_config, derive_seed(seed, sample.key))
        out.append(replace(variant, variant="aug"))
    return out


def assort(
    na_pool: list[SliceSample], wa_pool: list[SliceSample], spec: AssortmentSpec
) -> DatasetManifest:
    """Draw an exact-ratio training manifest from the two domain pools.

    Samples are drawn uniformly without replacement per pool; the manifest
    order is a seeded shuffle of the union.
    """
    na_count, wa_count = spec.counts
    if na_count > len(na_pool):
        raise ValueError(f"NA pool too small: need {na_count}, have {len(na_pool)}")
    if wa_count > len(wa_pool):
        raise ValueError(f"WA pool too small: need {wa_count}, have {len(wa_pool)}")
    rng = np.random.default_rng(spec.seed)
    chosen = [na_pool[i] for i in rng.choice(len(na_pool), size=na_count, replace=False)]
    chosen += [wa_pool[i] for i in rng.choice(len(wa_pool), size=wa_count, replace=False)]
    order = rng.permutation(len(chosen))
    entries = [
        ManifestEntry(sample=chosen[i], domain=chosen[i].domain, patient_id=chosen[i].patient_id)
        for i in order
    ]
    return DatasetManifest(entries=entries, spec=spec, split=TRAIN)


@dataclass
class PatientSplit:
    """Patient-wise train/val pools plus the fixed WA-only test manifest."""

    train_na: list[SliceSample]
    train_wa: list[SliceSample]
    val_na: list[SliceSample]
    val_wa: list[SliceSample]
    test: DatasetManifest
    assignments: dict[str, str] = field(default_factory=dict)


def assign_patients(
    na_ids: list[str], wa_ids: list[str], fractions: tuple[float, float, float], seed: int
) -> dict[str, str]:
    """Map patient ids to splits; WA gets train/val/test, NA only train/val.

    Non-train WA counts take the floor of their fraction, train the
    remainder; NA splits train:val at the renormalized train/val fractions.
    Depends only on the sorted id lists, fractions and seed.
    """
    f_train, f_val, f_test = fractions
    if min(fractions) <= 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be positive and sum to 1, got {fractions}")
    rng = np.random.default_rng(derive_seed(seed, "patient-split"))
    assignments: dict[str, str] = {}

    wa_ids = sorted(set(wa_ids))
    n_wa = len(wa_ids)
    n_test = int(n_wa * f_test)
    n_val_wa = int(n_wa * f_val)
    n_train_wa = n_wa - n_test - n_val_wa
    if min(n_test, n_val_wa, n_train_wa) < 1:
        raise ValueError(f"WA cohort of {n_wa} patients leaves an empty split under {fractions}")
    order = [wa_ids[i] for i in rng.permutation(n_wa)]
    for pid in order[:n_test]:
        assignments[pid] = TEST
    for pid in order[n_test : n_test + n_val_wa]:
        assignments[pid] = VAL
    for pid in order[n_test + n_val_wa :]:
        assignments[pid] = TRAIN

    na_ids = sorted(set(na_ids))
    if na_ids:
        n_na = len(na_ids)
        n_val_na = int(n_na * f_val / (f_train + f_val))
        if n_val_na < 1 or n_na - n_val_na < 1:
            raise ValueError(f"NA cohort of {n_na} patients leaves an empty split under {fractions}")
        order = [na_ids[i] for i in rng.permutation(n_na)]
        for pid in order[:n_val_na]:
            assignments[pid] = VAL
        for pid in order[n_val_na:]:
            assignments[pid] = TRAIN
    return assignments


def split_patients(
    na_pool: list[SliceSample],
    wa_pool: list[SliceSample],
    fractions: tuple[float, float, float],
    seed: int,
) -> PatientSplit:
    """Split slice pools by patient and freeze the WA-only test manifest.

    No patient contributes slices to more than one split. The test manifest
    is fully determined by (patient ids, fractions, seed): assortment specs
    never touch it.
    """
    na_ids = sorted({s.patient_id for s in na_pool})
    wa_ids = sorted({s.patient_id for s in wa_pool})
    assignments = assign_patients(na_ids, wa_ids, fractions, seed)

    def take(pool, split):
        return [s for s in pool if assignments[s.patient_id] == split]

    test_samples = sorted(
        take(wa_pool, TEST), key=lambda s: (s.patient_id, s.plane, s.slice_index)
    )
    test = DatasetManifest(
        entries=[
            ManifestEntry(sample=s, domain=s.domain, patient_id=s.patient_id)
            for s in test_samples
        ],
        spec=AssortmentSpec(na_parts=0, wa_parts=1, total=max(len(test_samples), 1), seed=seed),
        split=TEST,
    )
    return PatientSplit(
        train_na=take(na_pool, TRAIN),
        train_wa=take(wa_pool, TRAIN),
        val_na=take(na_pool, VAL),
        val_wa=take(wa_pool, VAL),
        test=test,
        assignments=assignments,
    )


def build_plane_pools(
    volumes: list[Volume], plane: str, target_size: int, keep_empty: bool = False
) -> list[SliceSample]:
    """Extract and preprocess every slice of one plane across a cohort."""
    pool = []
    for vol in volumes:
        for sample in extract_slices(vol, plane, keep_empty=keep_empty):
            pool.append(preprocess(sample, target_size))
    return pool


def save_manifest(manifest: DatasetManifest, out_dir: str | Path, write_images: bool = True) -> Path:
    """Write manifest.csv plus 16-bit image / 8-bit mask PNGs under ``out_dir``."""
    out_dir = Path(out_dir)
    split_dir = out_dir / manifest.split
    split_dir.mkdir(parents=True, exist_ok=True)
    if write_images:
        for e in manifest.entries:
            img = (np.clip(e.sample.image, 0.0, 1.0) * 65535.0).round().astype(np.uint16)
            Image.fromarray(img, mode="I;16").save(split_dir / f"{e.sample.key}.png")
            Image.fromarray((e.sample.mask * 255).astype(np.uint8), mode="L").save(
                split_dir / f"{e.sample.key}_mask.png"
            )
    csv_path = out_dir / f"{manifest.split}_manifest.csv"
    csv_path.write_bytes(manifest.to_csv_bytes())
    return csv_path


def load_manifest(csv_path: str | Path, split: str | None = None) -> DatasetManifest:
    """Read a manifest written by :func:`save_manifest` back into memory."""
    csv_path = Path(csv_path)
    root = csv_path.parent
    entries = []
    with open(csv_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"empty manifest: {csv_path}")
    manifest_split = split or rows[0]["split"]
    for row in rows:
        image = np.asarray(Image.open(root / row["path"]), dtype=np.float64) / 65535.0
        mask = (np.asarray(Image.open(root / row["mask_path"])) >= 128).astype(np.uint8)
        stem = Path(row["path"]).stem  # <patient>_<plane>_<index>[_variant]
        tail = stem[len(row["patient_id"]) + len(row["plane"]) + 2 :]
        idx_str, _, variant = tail.partition("_")
        sample = SliceSample(
            image=image.astype(np.float32),
            mask=mask,
            plane=row["plane"],
            slice_index=int(idx_str),
            patient_id=row["patient_id"],
            domain=row["domain"],
            variant=variant,
        )
        entries.append(ManifestEntry(sample=sample, domain=row["domain"], patient_id=row["patient_id"]))
    na = sum(1 for e in entries if e.domain == NA)
    spec = AssortmentSpec(na_parts=na, wa_parts=len(entries) - na, total=len(entries), seed=0)
    return DatasetManifest(entries=entries, spec=spec, split=manifest_split)
