"""Dataset ingestion, minimal preprocessing, synthetic domains and balanced batching."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence, TypeVar

import nibabel as nib
import numpy as np
from scipy import ndimage

from .core import BatchNotDivisibleError, DomainCountError, DomainSet, VolumeSample

T = TypeVar("T")

SPLITS = ("train", "val", "test")


# --------------------------------------------------------------------------
# preprocessing


def rescale_intensity(raw: np.ndarray) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    if not hi > lo:
        raise ValueError("cannot rescale a constant-intensity volume")
    return (raw - lo) / (hi - lo)


def center_crop_or_pad(vol: np.ndarray, target_shape: Sequence[int]) -> np.ndarray:
    """Center-crop axes that are too long and zero-pad axes that are too short.

    For odd size differences the extra voxel is cut from (or padded at) the end.
    """
    out = vol
    for axis, target in enumerate(target_shape):
        size = out.shape[axis]
        if size > target:
            start = (size - target) // 2
            out = np.take(out, np.arange(start, start + target), axis=axis)
        elif size < target:
            before = (target - size) // 2
            pad = [(0, 0)] * out.ndim
            pad[axis] = (before, target - size - before)
            out = np.pad(out, pad)
    return out


def preprocess_minimal(raw: np.ndarray, target_shape: Sequence[int]) -> np.ndarray:
    """Linear rescale to [0, 1], then center crop / zero pad to ``target_shape``."""
    return center_crop_or_pad(rescale_intensity(raw), target_shape).astype(np.float32)


# --------------------------------------------------------------------------
# synthetic multi-domain data


@dataclass(frozen=True)
class SyntheticDomainSpec:
    """Appearance of one simulated scanner.

    ``bias_field_amplitude`` scales a multiplicative low-frequency field,
    ``noise_sigma`` is additive Gaussian noise in [0, 1] intensity units and
    ``gamma`` is applied after the bias field. Lesion ranges are inclusive.
    """

    name: str
    bias_field_amplitude: float = 0.1
    noise_sigma: float = 0.02
    gamma: float = 1.0
    lesion_count_range: tuple[int, int] = (2, 5)
    lesion_radius_range: tuple[float, float] = (1.5, 4.0)

    def __post_init__(self) -> None:
        lo, hi = self.lesion_count_range
        rlo, rhi = self.lesion_radius_range
        if lo < 0 or hi < lo or rlo < 0 or rhi < rlo:
            raise ValueError(f"invalid lesion ranges in {self}")
        if hi == 0 or rhi <= 0:
            raise ValueError(
                f"domain {self.name!r} can only produce empty labels "
                f"(lesion_count_range={self.lesion_count_range}, "
                f"lesion_radius_range={self.lesion_radius_range})"
            )
        if self.gamma <= 0 or self.noise_sigma < 0 or self.bias_field_amplitude < 0:
            raise ValueError(f"invalid appearance parameters in {self}")

    def appearance(self) -> tuple[float, float, float, tuple, tuple]:
        return (
            self.bias_field_amplitude, self.noise_sigma, self.gamma,
            self.lesion_count_range, self.lesion_radius_range,
        )


DEFAULT_DOMAIN_SPECS = (
    SyntheticDomainSpec("scanner_a", bias_field_amplitude=0.30, noise_sigma=0.02, gamma=1.0),
    SyntheticDomainSpec("scanner_b", bias_field_amplitude=0.40, noise_sigma=0.06, gamma=1.4),
)


def default_domain_specs(n_domains: int) -> list[SyntheticDomainSpec]:
    """``n_domains`` specs spread between the two shipped defaults."""
    if n_domains < 2:
        raise DomainCountError(f"need at least 2 domains, got {n_domains}")
    a, b = DEFAULT_DOMAIN_SPECS
    if n_domains == 2:
        return [a, b]
    specs = []
    for k in range(n_domains):
        t = k / (n_domains - 1)
        specs.append(
            SyntheticDomainSpec(
                f"scanner_{k}",
                bias_field_amplitude=round((1 - t) * a.bias_field_amplitude + t * b.bias_field_amplitude, 6),
                noise_sigma=round((1 - t) * a.noise_sigma + t * b.noise_sigma, 6),
                gamma=round((1 - t) * a.gamma + t * b.gamma, 6),
            )
        )
    return specs


# share of the bias field that is fixed per scanner rather than drawn per case
PROFILE_WEIGHT = 0.75


def _smooth_field(rng: np.random.Generator, shape: Sequence[int], sigma: float) -> np.ndarray:
    """Zero-mean random field scaled to [-1, 1]."""
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode="wrap")
    f -= f.mean()
    peak = np.abs(f).max()
    return f / peak if peak > 0 else f


def _lesion_geometry(rng: np.random.Generator, spec: SyntheticDomainSpec, shape: Sequence[int]) -> np.ndarray:
    """Union of axis-aligned ellipsoids centred on voxel centres inside the brain."""
    label = np.zeros(shape, dtype=np.uint8)
    grid = np.indices(shape, dtype=np.float64)
    count = int(rng.integers(spec.lesion_count_range[0], spec.lesion_count_range[1] + 1))
    for _ in range(count):
        radii = rng.uniform(*spec.lesion_radius_range, size=3)
        center = [int(rng.integers(round(0.2 * s), round(0.8 * s))) for s in shape]
        r2 = sum(((g - c) / max(r, 1e-6)) ** 2 for g, c, r in zip(grid, center, radii))
        label[r2 <= 1.0] = 1
    return label


def _brain_background(rng: np.random.Generator, shape: Sequence[int]) -> np.ndarray:
    coords = np.meshgrid(*[np.linspace(-1, 1, s) for s in shape], indexing="ij")
    r = np.sqrt((coords[0] / 0.85) ** 2 + (coords[1] / 0.9) ** 2 + (coords[2] / 0.8) ** 2)
    brain = 1.0 / (1.0 + np.exp((r - 1.0) / 0.04))
    tissue = 0.35 + 0.08 * _smooth_field(rng, shape, sigma=max(shape) / 6)
    return 0.02 + brain * (tissue - 0.02)


def synthesize_case(
    spec: SyntheticDomainSpec,
    shape: Sequence[int],
    geometry_rng: np.random.Generator,
    appearance_rng: np.random.Generator,
    profile: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """One case. ``profile`` is the scanner's fixed bias pattern in [-1, 1];
    each case adds its own smaller low-frequency perturbation on top."""
    label = _lesion_geometry(geometry_rng, spec, shape)
    background = _brain_background(geometry_rng, shape)
    lesion_intensity = geometry_rng.uniform(0.75, 0.9)
    image = np.where(label > 0, lesion_intensity, background)
    field = _smooth_field(appearance_rng, shape, sigma=max(shape) / 3)
    if profile is not None:
        field = PROFILE_WEIGHT * profile + (1 - PROFILE_WEIGHT) * field
    bias = 1.0 + spec.bias_field_amplitude * field
    image = np.clip(image * bias, 0.0, 1.0) ** spec.gamma
    image = image + appearance_rng.normal(0.0, spec.noise_sigma, size=shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32), label


def generate_synthetic(
    specs: Sequence[SyntheticDomainSpec],
    n_per_domain: int,
    shape: Sequence[int] | int,
    seed: int = 0,
) -> list[VolumeSample]:
    """Simulated multi-scanner cohort.

    Lesion geometry and anatomy come from a stream that does not depend on the
    domain's appearance parameters, so labels share one distribution across
    domains and only intensities carry domain information. Each domain draws
    one fixed bias-field profile (a stand-in for a scanner's coil sensitivity)
    that every one of its cases shares.
    """
    if len(specs) < 2:
        raise DomainCountError(f"need at least 2 domain specs, got {len(specs)}")
    if len({s.name for s in specs}) != len(specs):
        raise ValueError("domain spec names must be unique")
    for i in range(len(specs)):
        for j in range(i + 1, len(specs)):
            if specs[i].appearance() == specs[j].appearance():
                raise ValueError(
                    f"domains {specs[i].name!r} and {specs[j].name!r} have identical parameters"
                )
    if isinstance(shape, int):
        shape = (shape,) * 3
    shape = tuple(int(s) for s in shape)
    root = np.random.SeedSequence(seed)
    domain_seqs = root.spawn(len(specs))
    samples = []
    for d, (spec, seq) in enumerate(zip(specs, domain_seqs)):
        profile_seq, cases_seq = seq.spawn(2)
        profile = _smooth_field(np.random.default_rng(profile_seq), shape, sigma=max(shape) / 3)
        for k, case_seq in enumerate(cases_seq.spawn(n_per_domain)):
            geo_seq, app_seq = case_seq.spawn(2)
            image, label = synthesize_case(
                spec, shape, np.random.default_rng(geo_seq), np.random.default_rng(app_seq), profile
            )
            samples.append(VolumeSample(image=image, label=label, domain=d, case_id=f"{spec.name}_{k:03d}"))
    return samples


# --------------------------------------------------------------------------
# manifests and NIfTI files


@dataclass(frozen=True)
class ManifestEntry:
    case_id: str
    image: Path
    label: Path
    domain: str
    split: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root: Path = field(default_factory=Path)

    def split(self, name: str) -> DatasetManifest:
        return DatasetManifest([e for e in self.entries if e.split == name], self.root)

    def domain_set(self) -> DomainSet:
        return DomainSet(tuple(sorted({e.domain for e in self.entries})))

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ManifestEntry]:
        return iter(self.entries)


MANIFEST_COLUMNS = ("case_id", "image", "label", "domain", "split")


def read_manifest(path: str | Path) -> DatasetManifest:
    """Read a CSV manifest; relative paths resolve against its directory."""
    path = Path(path)
    root = path.parent
    entries = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"manifest {path} lacks columns {sorted(missing)}")
        for row in reader:
            if row["split"] not in SPLITS:
                raise ValueError(f"unknown split {row['split']!r} for case {row['case_id']}")
            entries.append(
                ManifestEntry(
                    case_id=row["case_id"],
                    image=root / row["image"],
                    label=root / row["label"],
                    domain=row["domain"],
                    split=row["split"],
                )
            )
    return DatasetManifest(entries, root)


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for e in manifest.entries:
            writer.writerow([
                e.case_id,
                Path(e.image).relative_to(path.parent).as_posix(),
                Path(e.label).relative_to(path.parent).as_posix(),
                e.domain,
                e.split,
            ])


def check_manifest(manifest: DatasetManifest, domains: DomainSet, batch_size: int) -> None:
    per_domain = batch_size // domains.n
    unknown = {e.domain for e in manifest} - set(domains.domains)
    if unknown:
        raise ValueError(f"manifest domains {sorted(unknown)} not in {domains.domains}")
    train = manifest.split("train")
    for d in domains:
        n = sum(e.domain == d for e in train)
        if n < per_domain:
            raise ValueError(
                f"domain {d!r} has {n} training cases; balanced batches need {per_domain}"
            )


def save_volume(array: np.ndarray, path: str | Path) -> None:
    nib.save(nib.Nifti1Image(np.asarray(array), np.eye(4)), str(path))


def load_volume(path: str | Path) -> np.ndarray:
    return np.asanyarray(nib.load(str(path)).dataobj)


def load_sample(entry: ManifestEntry, domains: DomainSet) -> VolumeSample:
    image = load_volume(entry.image).astype(np.float32)
    label = (load_volume(entry.label) > 0).astype(np.uint8)
    return VolumeSample(image=image, label=label, domain=domains.index(entry.domain), case_id=entry.case_id)


def write_dataset(
    samples: Sequence[VolumeSample],
    out_dir: str | Path,
    domain_names: Sequence[str],
    splits: Mapping[str, str],
) -> DatasetManifest:
    """Write samples as NIfTI pairs plus ``manifest.csv``.

    ``splits`` maps case_id to split name.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        img_path = out_dir / "images" / f"{s.case_id}.nii.gz"
        lbl_path = out_dir / "labels" / f"{s.case_id}.nii.gz"
        save_volume(s.image.astype(np.float32), img_path)
        save_volume(s.label.astype(np.uint8), lbl_path)
        entries.append(ManifestEntry(s.case_id, img_path, lbl_path, domain_names[s.domain], splits[s.case_id]))
    manifest = DatasetManifest(entries, out_dir)
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest


def assign_splits(samples: Sequence[VolumeSample], n_val: int, n_test: int) -> dict[str, str]:
    """Per domain: first cases train, then ``n_val`` val, last ``n_test`` test."""
    by_domain: dict[int, list[str]] = {}
    for s in samples:
        by_domain.setdefault(s.domain, []).append(s.case_id)
    splits = {}
    for ids in by_domain.values():
        n_train = len(ids) - n_val - n_test
        if n_train < 1:
            raise ValueError(f"{len(ids)} cases per domain cannot hold {n_val} val + {n_test} test")
        for k, cid in enumerate(ids):
            splits[cid] = "train" if k < n_train else "val" if k < n_train + n_val else "test"
    return splits


# --------------------------------------------------------------------------
# batching and patches


def _cycle_permuted(items: Sequence[T], rng: np.random.Generator) -> Iterator[T]:
    while True:
        for i in rng.permutation(len(items)):
            yield items[i]


def balanced_batches(
    items: Sequence[T],
    batch_size: int,
    seed: int,
    n_batches: int | None = None,
    domain_of: Callable[[T], object] = lambda e: e.domain,
    domains: Sequence | None = None,
) -> Iterator[list[T]]:
    """Yield batches holding exactly ``batch_size / N_d`` items from every domain.

    Each domain is drawn from its own seeded permutation and reshuffled when
    exhausted, so smaller domains cycle instead of the larger ones being
    truncated. By default one epoch is emitted: enough batches to cover the
    largest domain once. Within a batch, items are grouped by domain in domain
    order.
    """
    groups: dict[object, list[T]] = {}
    for it in items:
        groups.setdefault(domain_of(it), []).append(it)
    keys = list(domains) if domains is not None else sorted(groups, key=str)
    if len(keys) < 1:
        raise DomainCountError("no domains to sample from")
    empty = [k for k in keys if not groups.get(k)]
    if empty:
        raise ValueError(f"empty domain(s): {empty}")
    if batch_size < 1 or batch_size % len(keys):
        raise BatchNotDivisibleError(f"batch_size {batch_size} not divisible by {len(keys)} domains")
    per_domain = batch_size // len(keys)
    if n_batches is None:
        n_batches = math.ceil(max(len(groups[k]) for k in keys) / per_domain)
    seqs = np.random.SeedSequence(seed).spawn(len(keys))
    streams = [_cycle_permuted(groups[k], np.random.default_rng(s)) for k, s in zip(keys, seqs)]
    for _ in range(n_batches):
        batch = []
        for stream in streams:
            batch.extend(next(stream) for _ in range(per_domain))
        yield batch


def extract_patch(
    sample: VolumeSample,
    patch_size: Sequence[int],
    rng: np.random.Generator,
    foreground_fraction: float = 0.5,
) -> VolumeSample:
    """Random patch; with probability ``foreground_fraction`` centred on a lesion voxel."""
    patch_size = tuple(patch_size)
    image, label = sample.image, sample.label
    target = tuple(max(s, p) for s, p in zip(image.shape, patch_size))
    if target != image.shape:
        image = center_crop_or_pad(image, target)
        label = center_crop_or_pad(label, target)
    fg = np.argwhere(label > 0) if rng.random() < foreground_fraction else None
    starts = []
    if fg is not None and len(fg):
        center = fg[rng.integers(len(fg))]
        for c, s, p in zip(center, label.shape, patch_size):
            starts.append(int(np.clip(c - p // 2, 0, s - p)))
    else:
        starts = [int(rng.integers(0, s - p + 1)) for s, p in zip(label.shape, patch_size)]
    sl = tuple(slice(a, a + p) for a, p in zip(starts, patch_size))
    return replace(sample, image=image[sl].copy(), label=label[sl].copy())
