"""Experiment runner: multi-engine registration sweeps with reports.

A plan names a reference volume, target volumes, engine configurations and
downscale resolutions.  Every (engine, resolution, target) combination is
registered serially (so wall times are comparable), failures are recorded
without aborting the sweep, and the report is emitted as CSV (source of
truth), Markdown rendered from that CSV, an HH:MM:SS timing table, and
red/green mid-axial overlay images.
"""

from __future__ import annotations

import csv
import io
import json
import re
import time
from dataclasses import dataclass, field as dc_field, replace
from pathlib import Path

import numpy as np

from . import kernels
from .nifti import load_volume, save_volume
from .optimize import RegistrationConfig, RegistrationResult, register
from .volume import Volume3, downscale
from .warp import DisplacementField3, apply_displacement, save_field

PLAN_SCHEMA = "volreg-plan/1"
CSV_HEADER = "engine,resolution,target,iterations,cc,mi,nmi,seconds"


def default_control_spacing(resolution: float | None) -> float:
    """FFD control spacing in voxels: 8 at the 10% scale, 12 at 15%."""
    if resolution is None or resolution <= 0.125:
        return 8.0
    return 12.0


@dataclass
class EngineSpec:
    label: str
    config: RegistrationConfig

    @classmethod
    def from_json_dict(cls, doc: dict) -> "EngineSpec":
        unknown = sorted(set(doc) - {"label", "config"})
        if unknown:
            raise ValueError(f"unknown engine keys: {', '.join(unknown)}")
        config = RegistrationConfig.from_json_dict(doc.get("config", {}))
        return cls(label=doc.get("label", config.engine), config=config)

    def to_json_dict(self) -> dict:
        return {"label": self.label, "config": self.config.to_json_dict()}


@dataclass
class ExperimentPlan:
    volumes: dict
    reference: str
    targets: list
    engines: list
    resolutions: list = dc_field(default_factory=lambda: [0.10, 0.15])
    output_dir: str = "bench-out"
    seed: int = 0

    def __post_init__(self) -> None:
        self.targets = [str(t) for t in self.targets]
        self.reference = str(self.reference)
        if self.reference in self.targets:
            raise ValueError("reference volume must not be listed in targets")
        if not self.engines:
            raise ValueError("plan needs at least one engine")
        if not self.targets:
            raise ValueError("plan needs at least one target")
        for r in self.resolutions:
            if not 0.0 < r <= 1.0:
                raise ValueError(f"resolution factors must be in (0, 1], got {r}")
        missing = [v for v in [self.reference, *self.targets] if v not in self.volumes]
        if missing:
            raise ValueError(f"plan does not map volume ids: {', '.join(missing)}")

    _KEYS = ("schema", "volumes", "reference", "targets", "engines",
             "resolutions", "output_dir", "seed")

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ExperimentPlan":
        unknown = sorted(set(doc) - set(cls._KEYS))
        if unknown:
            raise ValueError(f"unknown plan keys: {', '.join(unknown)}")
        if doc.get("schema", PLAN_SCHEMA) != PLAN_SCHEMA:
            raise ValueError(f"unsupported plan schema {doc.get('schema')!r}")
        return cls(
            volumes={str(k): str(v) for k, v in doc["volumes"].items()},
            reference=doc["reference"],
            targets=list(doc["targets"]),
            engines=[EngineSpec.from_json_dict(e) for e in doc["engines"]],
            resolutions=[float(r) for r in doc.get("resolutions", [0.10, 0.15])],
            output_dir=doc.get("output_dir", "bench-out"),
            seed=int(doc.get("seed", 0)),
        )

    @classmethod
    def from_json_file(cls, path) -> "ExperimentPlan":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))

    def to_json_dict(self) -> dict:
        return {
            "schema": PLAN_SCHEMA,
            "volumes": dict(self.volumes),
            "reference": self.reference,
            "targets": list(self.targets),
            "engines": [e.to_json_dict() for e in self.engines],
            "resolutions": list(self.resolutions),
            "output_dir": self.output_dir,
            "seed": self.seed,
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=1)


@dataclass
class BenchRow:
    engine: str
    resolution: float
    target: str
    iterations: int
    cc: float
    mi: float
    nmi: float
    seconds: float
    before_cc: float = 0.0
    warped: Volume3 | None = None
    fixed: Volume3 | None = None
    field: DisplacementField3 | None = None

    def csv_values(self) -> list[str]:
        return [self.engine, f"{self.resolution:g}", self.target,
                str(self.iterations), f"{self.cc:.10g}", f"{self.mi:.10g}",
                f"{self.nmi:.10g}", f"{self.seconds:.3f}"]


@dataclass
class BenchFailure:
    engine: str
    resolution: float
    target: str
    error: str


@dataclass
class BenchReport:
    rows: list
    failures: list
    metadata: dict


def _load_plan_volumes(plan: ExperimentPlan, volumes: dict | None) -> dict:
    if volumes is not None:
        return volumes
    out = {}
    for vid in [plan.reference, *plan.targets]:
        out[vid] = load_volume(plan.volumes[vid])
    return out


def _config_for(spec: EngineSpec, resolution: float) -> RegistrationConfig:
    cfg = spec.config
    if cfg.engine == "ffd" and cfg.control_spacing is None:
        cfg = replace(cfg, control_spacing=default_control_spacing(resolution))
    return cfg


def run_experiment(plan: ExperimentPlan, volumes: dict | None = None) -> BenchReport:
    """Register every target to the reference for each engine/resolution.

    Rows run serially so their wall times are directly comparable; an
    engine failure is recorded and the sweep continues.
    """
    vols = _load_plan_volumes(plan, volumes)
    reference = vols[plan.reference]
    rows = []
    failures = []
    for spec in plan.engines:
        for resolution in plan.resolutions:
            fixed = downscale(reference, resolution)
            for target in plan.targets:
                moving = downscale(vols[target], resolution)
                try:
                    cfg = _config_for(spec, resolution)
                    t0 = time.monotonic()
                    result = register(fixed, moving, cfg)
                    seconds = time.monotonic() - t0
                    warped = apply_displacement(moving, result.field)
                    rows.append(BenchRow(
                        engine=spec.label, resolution=resolution, target=target,
                        iterations=result.iterations_run,
                        cc=result.after.cc, mi=result.after.mi,
                        nmi=result.after.nmi, seconds=seconds,
                        before_cc=result.before.cc,
                        warped=warped, fixed=fixed, field=result.field))
                except Exception as exc:  # noqa: BLE001 - row isolation is the contract
                    failures.append(BenchFailure(
                        engine=spec.label, resolution=resolution,
                        target=target, error=f"{type(exc).__name__}: {exc}"))
    metadata = {
        "schema": "volreg-report/1",
        "reference": plan.reference,
        "targets": list(plan.targets),
        "resolutions": [f"{r:g}" for r in plan.resolutions],
        "seed": plan.seed,
        "backend": kernels.active_backend(),
        "timing_serial": True,
    }
    return BenchReport(rows=rows, failures=failures, metadata=metadata)


@dataclass
class SwapDelta:
    engine: str
    resolution: float
    target: str
    d_cc: float
    d_mi: float


@dataclass
class SwapReport:
    original: BenchReport
    swapped: BenchReport
    deltas: list
    metadata: dict


def reference_swap_test(plan: ExperimentPlan, alternate_reference: str,
                        volumes: dict | None = None) -> SwapReport:
    """Re-run the plan against a different reference and pair up the rows."""
    alternate_reference = str(alternate_reference)
    if alternate_reference == plan.reference:
        raise ValueError("alternate reference must differ from the original")
    if alternate_reference not in plan.volumes:
        raise ValueError(f"plan does not map volume id {alternate_reference!r}")
    base = run_experiment(plan, volumes)
    swapped_targets = [t for t in plan.targets if t != alternate_reference]
    if not swapped_targets:
        raise ValueError("no targets left after excluding the alternate reference")
    swapped_plan = replace(plan, reference=alternate_reference,
                           targets=swapped_targets)
    swapped = run_experiment(swapped_plan, volumes)
    by_key = {(r.engine, r.resolution, r.target): r for r in swapped.rows}
    deltas = []
    for row in base.rows:
        other = by_key.get((row.engine, row.resolution, row.target))
        if other is not None:
            deltas.append(SwapDelta(row.engine, row.resolution, row.target,
                                    d_cc=other.cc - row.cc, d_mi=other.mi - row.mi))
    metadata = {
        "schema": "volreg-swap-report/1",
        "original_reference": plan.reference,
        "alternate_reference": alternate_reference,
        "seed": plan.seed,
    }
    return SwapReport(original=base, swapped=swapped, deltas=deltas,
                      metadata=metadata)


def recovery_error(result: RegistrationResult, truth: DisplacementField3,
                   foreground: Volume3) -> float:
    """Mean Euclidean error between recovered and true displacement over the
    foreground (voxels brighter than 5% of the maximum intensity)."""
    if result.field.dims != truth.dims:
        raise ValueError(f"field dims {result.field.dims} != truth dims {truth.dims}")
    if foreground.dims != truth.dims:
        raise ValueError(f"mask volume dims {foreground.dims} != {truth.dims}")
    err = np.sqrt(((result.field.u - truth.u) ** 2).sum(axis=3))
    mask = foreground.data > 0.05 * float(foreground.data.max())
    if not mask.any():
        return float(err.mean())
    return float(err[mask].mean())


def format_hhmmss(seconds: float) -> str:
    total = int(round(seconds))
    if total < 0:
        raise ValueError("negative duration")
    return f"{total // 3600:02d}:{total % 3600 // 60:02d}:{total % 60:02d}"


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "-", str(text))


def report_csv_text(report: BenchReport) -> str:
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    for row in report.rows:
        buf.write(",".join(row.csv_values()) + "\n")
    return buf.getvalue()


def _markdown_from_csv(csv_text: str, metadata: dict, failures: list) -> str:
    reader = csv.DictReader(io.StringIO(csv_text))
    rows = list(reader)
    lines = ["# Registration benchmark", ""]
    for key in ("reference", "seed", "backend"):
        if key in metadata:
            lines.append(f"- {key}: {metadata[key]}")
    lines.append("")
    lines.append("## Scores")
    lines.append("")
    lines.append("| engine | resolution | target | iterations | cc | mi | nmi | seconds |")
    lines.append("|---|---|---|---|---|---|---|---|")
    for r in rows:
        lines.append("| " + " | ".join(r[k] for k in
                     ("engine", "resolution", "target", "iterations",
                      "cc", "mi", "nmi", "seconds")) + " |")
    lines.append("")
    lines.append("## Computation time")
    lines.append("")
    resolutions = sorted({r["resolution"] for r in rows}, key=float)
    engines = list(dict.fromkeys(r["engine"] for r in rows))
    lines.append("| engine | " + " | ".join(resolutions) + " |")
    lines.append("|---|" + "---|" * len(resolutions))
    for eng in engines:
        cells = []
        for res in resolutions:
            secs = [float(r["seconds"]) for r in rows
                    if r["engine"] == eng and r["resolution"] == res]
            cells.append(format_hhmmss(sum(secs) / len(secs)) if secs else "-")
        lines.append(f"| {eng} | " + " | ".join(cells) + " |")
    if failures:
        lines.append("")
        lines.append("## Failures")
        lines.append("")
        for f in failures:
            lines.append(f"- {f.engine} @ {f.resolution:g} on {f.target}: {f.error}")
    lines.append("")
    return "\n".join(lines)


def _overlay_rgb(reference_slice: np.ndarray, warped_slice: np.ndarray) -> np.ndarray:
    def norm(a):
        a = np.asarray(a, dtype=np.float64)
        top = a.max()
        return (a / top * 255.0).astype(np.uint8) if top > 0 else np.zeros(a.shape, np.uint8)

    rgb = np.zeros(reference_slice.shape + (3,), dtype=np.uint8)
    rgb[..., 0] = norm(reference_slice)
    rgb[..., 1] = norm(warped_slice)
    return rgb


def write_overlay_png(path, reference: Volume3, warped: Volume3) -> None:
    """Mid-axial slice, reference in red and warped target in green."""
    from PIL import Image

    k = reference.dims[2] // 2
    rgb = _overlay_rgb(reference.data[:, :, k].T, warped.data[:, :, k].T)
    Image.fromarray(rgb, mode="RGB").save(str(path))


def emit_report(report: BenchReport, out_dir, save_artifacts: bool = False) -> dict:
    """Write report.csv, report.md, report.json, and per-row overlays.

    The Markdown is rendered from the written CSV so both carry identical
    numbers.  With save_artifacts=True the warped volumes and recovered
    fields are stored next to the report for later re-rendering.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "report.csv"
    csv_path.write_text(report_csv_text(report), encoding="utf-8")
    csv_text = csv_path.read_text(encoding="utf-8")
    md = _markdown_from_csv(csv_text, report.metadata, report.failures)
    (out / "report.md").write_text(md, encoding="utf-8")
    doc = {"metadata": report.metadata,
           "failures": [vars(f) for f in report.failures]}
    (out / "report.json").write_text(json.dumps(doc, indent=1), encoding="utf-8")
    written = {"csv": str(csv_path), "markdown": str(out / "report.md"),
               "json": str(out / "report.json"), "overlays": []}
    for row in report.rows:
        if row.fixed is None or row.warped is None:
            continue
        stem = f"{_slug(row.engine)}_{row.resolution:g}_{_slug(row.target)}"
        png = out / f"overlay_{stem}.png"
        write_overlay_png(png, row.fixed, row.warped)
        written["overlays"].append(str(png))
        if save_artifacts:
            save_volume(row.warped, out / f"{stem}_warped.nii")
            save_volume(row.fixed, out / f"{stem}_fixed.nii")
            if row.field is not None:
                save_field(row.field, out / f"{stem}_field.fld")
    return written


def emit_swap_report(swap: SwapReport, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = emit_report(swap.original, out / "original")
    other = emit_report(swap.swapped, out / "swapped")
    lines = ["engine,resolution,target,d_cc,d_mi"]
    for d in swap.deltas:
        lines.append(f"{d.engine},{d.resolution:g},{d.target},"
                     f"{d.d_cc:.10g},{d.d_mi:.10g}")
    (out / "deltas.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "swap.json").write_text(json.dumps(swap.metadata, indent=1),
                                   encoding="utf-8")
    return {"original": base, "swapped": other,
            "deltas": str(out / "deltas.csv"), "json": str(out / "swap.json")}


def render_report_dir(csv_path, out_dir) -> dict:
    """Re-render Markdown (and overlays from saved artifacts) from a CSV."""
    csv_path = Path(csv_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_text = csv_path.read_text(encoding="utf-8")
    meta_path = csv_path.parent / "report.json"
    metadata = {}
    if meta_path.exists():
        metadata = json.loads(meta_path.read_text(encoding="utf-8")).get("metadata", {})
    md = _markdown_from_csv(csv_text, metadata, [])
    md_path = out / "report.md"
    md_path.write_text(md, encoding="utf-8")
    written = {"markdown": str(md_path), "overlays": []}
    reader = csv.DictReader(io.StringIO(csv_text))
    for r in reader:
        stem = f"{_slug(r['engine'])}_{float(r['resolution']):g}_{_slug(r['target'])}"
        fixed_p = csv_path.parent / f"{stem}_fixed.nii"
        warped_p = csv_path.parent / f"{stem}_warped.nii"
        if fixed_p.exists() and warped_p.exists():
            png = out / f"overlay_{stem}.png"
            write_overlay_png(png, load_volume(fixed_p), load_volume(warped_p))
            written["overlays"].append(str(png))
    return written
