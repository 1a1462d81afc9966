"""Synthetic deformation fields and training-set materialization.

A deformation is built by dropping random impulse vectors at distinct
voxels, smoothing each component with a Gaussian whose width is set by the
frequency class (25 = smoothest, 45 = roughest), and rescaling so the peak
magnitude equals the requested amplitude exactly.  A dataset manifest
expands source volumes by flips (identity, X, Y, Z, XYZ), assigns each
expanded brain a 20/20/60 split of deformations across the three frequency
classes, and materialization writes volume/field pairs with checksummed
idempotent re-runs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .rng import SplitMix64, derive_seed
from .volume import flip, round_half_up
from .warp import DisplacementField3, apply_displacement, save_field

FREQUENCY_CLASSES = (25, 35, 45)
FLIP_VARIANTS = ((), ("x",), ("y",), ("z",), ("x", "y", "z"))
_VARIANT_NAMES = ("orig", "fx", "fy", "fz", "fxyz")
_SIGMA_REFERENCE_AXIS = 64.0
MANIFEST_SCHEMA = "volreg-manifest/1"


@dataclass
class DeformationSpec:
    """Parameters of one synthetic deformation field."""

    n_sites: int = 150
    frequency: int = 25
    amplitude: float | None = None  # voxels; None = 6% of the shortest axis
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_sites < 1:
            raise ValueError("n_sites must be >= 1")
        if self.frequency not in FREQUENCY_CLASSES:
            raise ValueError(
                f"frequency must be one of {FREQUENCY_CLASSES}, got {self.frequency}")
        if self.amplitude is not None and self.amplitude <= 0:
            raise ValueError("amplitude must be > 0 when given")


def smoothing_sigma(frequency: int, dims) -> float:
    """Gaussian width in voxels: 200/frequency at a 64-voxel shortest axis,
    scaled proportionally for other sizes.  Higher frequency = rougher."""
    return (200.0 / frequency) * (min(dims) / _SIGMA_REFERENCE_AXIS)


def default_amplitude(dims) -> float:
    return 0.06 * min(dims)


def generate_deformation(dims, spec: DeformationSpec) -> DisplacementField3:
    """Peak-normalized smooth random field, deterministic per (dims, spec)."""
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or min(dims) < 16:
        raise ValueError(f"deformation dims must be >= 16 per axis, got {dims}")
    n_vox = dims[0] * dims[1] * dims[2]
    if spec.n_sites > n_vox:
        raise ValueError(f"n_sites={spec.n_sites} exceeds voxel count {n_vox}")
    amplitude = spec.amplitude if spec.amplitude is not None else default_amplitude(dims)
    rng = SplitMix64(derive_seed(spec.seed, 0xDEF0, spec.frequency, spec.n_sites))

    u = np.zeros(dims + (3,), dtype=np.float64)
    taken: set[int] = set()
    for _ in range(spec.n_sites):
        while True:
            flat = rng.randint(n_vox)
            if flat not in taken:
                taken.add(flat)
                break
        i = flat // (dims[1] * dims[2])
        j = (flat // dims[2]) % dims[1]
        k = flat % dims[2]
        direction = rng.unit_vector()
        magnitude = amplitude * (1.0 - rng.uniform())  # uniform in (0, a]
        u[i, j, k, 0] = direction[0] * magnitude
        u[i, j, k, 1] = direction[1] * magnitude
        u[i, j, k, 2] = direction[2] * magnitude

    sigma = smoothing_sigma(spec.frequency, dims)
    for c in range(3):
        u[..., c] = gaussian_filter(u[..., c], sigma, mode="constant")
    peak = float(np.sqrt((u * u).sum(axis=3).max()))
    if peak > 0.0:
        u *= amplitude / peak
    return DisplacementField3(u)


def split_counts(per_brain: int) -> tuple[int, int, int]:
    """20/20/60 split across frequencies 25/35/45, nearest-integer rounding
    with the remainder assigned to the high-frequency class."""
    if per_brain < 1:
        raise ValueError("per_brain must be >= 1")
    low = round_half_up(0.2 * per_brain)
    med = round_half_up(0.2 * per_brain)
    high = per_brain - low - med
    if high < 0:
        low = med = per_brain // 3
        high = per_brain - low - med
    return low, med, high


@dataclass
class ManifestEntry:
    source_id: str
    flip_axes: tuple[str, ...]
    spec: DeformationSpec
    stem: str

    def to_json_dict(self) -> dict:
        return {
            "source": self.source_id,
            "flip": "".join(self.flip_axes),
            "n_sites": self.spec.n_sites,
            "frequency": self.spec.frequency,
            "amplitude": self.spec.amplitude,
            "seed": self.spec.seed,
            "stem": self.stem,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ManifestEntry":
        return cls(
            source_id=doc["source"],
            flip_axes=tuple(doc["flip"]),
            spec=DeformationSpec(n_sites=int(doc["n_sites"]),
                                 frequency=int(doc["frequency"]),
                                 amplitude=doc["amplitude"],
                                 seed=int(doc["seed"])),
            stem=doc["stem"],
        )


@dataclass
class DatasetManifest:
    entries: list
    per_brain: int
    seed: int
    source_ids: list = dc_field(default_factory=list)

    @property
    def frequency_counts(self) -> dict:
        counts = {f: 0 for f in FREQUENCY_CLASSES}
        for e in self.entries:
            counts[e.spec.frequency] += 1
        return counts

    @property
    def expanded_brains(self) -> int:
        return len({(e.source_id, e.flip_axes) for e in self.entries})

    def to_json_dict(self) -> dict:
        return {
            "schema": MANIFEST_SCHEMA,
            "seed": self.seed,
            "per_brain": self.per_brain,
            "sources": list(self.source_ids),
            "entries": [e.to_json_dict() for e in self.entries],
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("schema") != MANIFEST_SCHEMA:
            raise ValueError(f"unsupported manifest schema {doc.get('schema')!r}")
        return cls(entries=[ManifestEntry.from_json_dict(e) for e in doc["entries"]],
                   per_brain=int(doc["per_brain"]), seed=int(doc["seed"]),
                   source_ids=list(doc.get("sources", [])))


def build_manifest(source_ids, per_brain: int = 100, seed: int = 0,
                   n_sites: int = 150, amplitude: float | None = None) -> DatasetManifest:
    """Expand sources x5 by flips and assign per-brain deformation specs."""
    source_ids = [str(s) for s in source_ids]
    if not source_ids:
        raise ValueError("need at least one source id")
    low, med, high = split_counts(per_brain)
    frequencies = ([25] * low) + ([35] * med) + ([45] * high)
    entries = []
    for si, sid in enumerate(source_ids):
        for vi, axes in enumerate(FLIP_VARIANTS):
            for k, freq in enumerate(frequencies):
                spec = DeformationSpec(
                    n_sites=n_sites, frequency=freq, amplitude=amplitude,
                    seed=derive_seed(seed, si, vi, k))
                stem = f"{sid}_{_VARIANT_NAMES[vi]}_{k:03d}"
                entries.append(ManifestEntry(sid, axes, spec, stem))
    return DatasetManifest(entries=entries, per_brain=per_brain, seed=seed,
                           source_ids=source_ids)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class MaterializeSummary:
    written: int = 0
    skipped: int = 0
    mismatched: list = dc_field(default_factory=list)


def materialize(manifest: DatasetManifest, sources: dict, out_dir) -> MaterializeSummary:
    """Write volume/field pairs for every entry; bit-exact and idempotent.

    Existing outputs whose recorded checksums still match are skipped; a
    mismatch is reported in the summary and the entry is regenerated.
    """
    from .nifti import save_volume

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index_path = out / "checksums.json"
    checksums: dict = {}
    if index_path.exists():
        with open(index_path, "r", encoding="utf-8") as fh:
            checksums = json.load(fh)
    summary = MaterializeSummary()
    for entry in manifest.entries:
        if entry.source_id not in sources:
            raise KeyError(f"manifest references unknown source {entry.source_id!r}")
        vol_path = out / f"{entry.stem}.nii"
        field_path = out / f"{entry.stem}.fld"
        names = [vol_path.name, field_path.name]
        paths = [vol_path, field_path]
        intact = all(
            p.exists() and checksums.get(n) == _sha256(p)
            for n, p in zip(names, paths))
        if intact:
            summary.skipped += 1
            continue
        if any(p.exists() and n in checksums for n, p in zip(names, paths)):
            summary.mismatched.append(entry.stem)
        source = sources[entry.source_id]
        flipped = flip(source, entry.flip_axes) if entry.flip_axes else source
        field = generate_deformation(flipped.dims, entry.spec)
        # quantize to the stored float32 precision first so the on-disk
        # (volume, field) pair reproduces the volume bit-exactly
        field = DisplacementField3(field.u.astype(np.float32).astype(np.float64))
        deformed = apply_displacement(flipped, field)
        save_volume(deformed, vol_path)
        save_field(field, field_path)
        for n, p in zip(names, paths):
            checksums[n] = _sha256(p)
        summary.written += 1
    with open(index_path, "w", encoding="utf-8") as fh:
        json.dump(checksums, fh, indent=0, sort_keys=True)
    return summary
