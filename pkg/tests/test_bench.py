import csv
import json
import re

import numpy as np
import pytest

from volreg.bench import (CSV_HEADER, EngineSpec, ExperimentPlan,
                          default_control_spacing, emit_report,
                          emit_swap_report, format_hhmmss, recovery_error,
                          reference_swap_test, render_report_dir,
                          report_csv_text, run_experiment)
from volreg.nifti import save_volume
from volreg.optimize import RegistrationConfig, register
from volreg.syngen import DeformationSpec, generate_deformation
from volreg.volume import make_phantom
from volreg.warp import DisplacementField3, apply_displacement


def _quick_engines():
    return [
        {"label": "diffeo", "config": {
            "engine": "dense-diffeomorphic", "levels": 2, "iterations": 6}},
        {"label": "energy", "config": {
            "engine": "dense-voxelmorph-energy", "levels": 2, "iterations": 6}},
    ]


def _plan_with_phantoms(tmp_path, n_targets=2, dims=(32, 32, 32), seed=3,
                        engines=None, resolutions=(1.0,), deform=True):
    reference = make_phantom(dims, seed)
    volumes = {"ref": reference}
    paths = {}
    for i in range(n_targets):
        if deform:
            field = generate_deformation(dims, DeformationSpec(
                n_sites=100, frequency=25, amplitude=1.2, seed=40 + i))
            volumes[f"t{i}"] = apply_displacement(reference, field)
        else:
            volumes[f"t{i}"] = reference.copy_with(reference.data.copy())
    for vid, vol in volumes.items():
        path = tmp_path / f"{vid}.nii"
        save_volume(vol, path)
        paths[vid] = str(path)
    plan = ExperimentPlan(
        volumes=paths, reference="ref",
        targets=[f"t{i}" for i in range(n_targets)],
        engines=[EngineSpec.from_json_dict(e)
                 for e in (engines or _quick_engines())],
        resolutions=list(resolutions),
        output_dir=str(tmp_path / "out"), seed=7)
    return plan, volumes


class TestPlan:
    def test_reference_not_in_targets(self, tmp_path):
        with pytest.raises(ValueError):
            ExperimentPlan(volumes={"a": "a.nii"}, reference="a",
                           targets=["a"], engines=[None])

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValueError, match="unknown plan keys"):
            ExperimentPlan.from_json_dict({
                "volumes": {}, "reference": "r", "targets": [],
                "engines": [], "surprise": 1})

    def test_bad_resolution(self, tmp_path):
        plan, _ = _plan_with_phantoms(tmp_path)
        with pytest.raises(ValueError):
            ExperimentPlan(volumes=plan.volumes, reference="ref",
                           targets=plan.targets, engines=plan.engines,
                           resolutions=[1.5])

    def test_json_round_trip(self, tmp_path):
        plan, _ = _plan_with_phantoms(tmp_path)
        plan.save(tmp_path / "plan.json")
        back = ExperimentPlan.from_json_file(tmp_path / "plan.json")
        assert back.to_json_dict() == plan.to_json_dict()

    def test_default_control_spacing(self):
        assert default_control_spacing(0.10) == 8.0
        assert default_control_spacing(0.15) == 12.0
        assert default_control_spacing(None) == 8.0


class TestRunExperiment:
    def test_row_count_is_product(self, tmp_path):
        plan, _ = _plan_with_phantoms(tmp_path, n_targets=2,
                                      resolutions=(0.5, 1.0))
        report = run_experiment(plan)
        assert len(report.rows) == 2 * 2 * 2
        assert not report.failures

    def test_self_copy_targets_score_high(self, tmp_path):
        plan, _ = _plan_with_phantoms(tmp_path, n_targets=1, deform=False)
        report = run_experiment(plan)
        for row in report.rows:
            assert row.cc >= 0.999

    def test_deformed_targets_improve(self, tmp_path):
        engines = [
            {"label": "diffeo", "config": {
                "engine": "dense-diffeomorphic", "levels": 2, "iterations": 15}},
            {"label": "energy", "config": {
                "engine": "dense-voxelmorph-energy", "levels": 2, "iterations": 25}},
        ]
        plan, _ = _plan_with_phantoms(tmp_path, n_targets=1, engines=engines)
        report = run_experiment(plan)
        for row in report.rows:
            assert row.cc > row.before_cc

    def test_engine_failure_recorded_not_fatal(self, tmp_path):
        # 3 levels on a 16^3 downscale is impossible: recorded as a failure
        engines = _quick_engines() + [{"label": "broken", "config": {
            "engine": "dense-diffeomorphic", "levels": 4, "iterations": 2}}]
        plan, _ = _plan_with_phantoms(tmp_path, n_targets=1, engines=engines)
        report = run_experiment(plan)
        assert len(report.failures) == 1
        assert report.failures[0].engine == "broken"
        assert "levels" in report.failures[0].error or "small" in report.failures[0].error
        assert len(report.rows) == 2

    def test_metadata(self, tmp_path):
        plan, _ = _plan_with_phantoms(tmp_path, n_targets=1)
        report = run_experiment(plan)
        assert report.metadata["reference"] == "ref"
        assert report.metadata["seed"] == 7
        assert report.metadata["timing_serial"] is True

    def test_deterministic_metric_columns(self, tmp_path):
        plan, _ = _plan_with_phantoms(tmp_path, n_targets=1)
        first = run_experiment(plan)
        second = run_experiment(plan)

        def metric_columns(report):
            rows = []
            for line in report_csv_text(report).splitlines()[1:]:
                parts = line.split(",")
                rows.append((parts[0], parts[1], parts[2], parts[3],
                             parts[4], parts[5], parts[6]))  # all but seconds
            return rows

        assert metric_columns(first) == metric_columns(second)


class TestReferenceSwap:
    def test_identical_alternate_gives_zero_deltas(self, tmp_path):
        plan, volumes = _plan_with_phantoms(tmp_path, n_targets=1)
        copy_path = tmp_path / "ref2.nii"
        save_volume(volumes["ref"], copy_path)
        plan.volumes["ref2"] = str(copy_path)
        swap = reference_swap_test(plan, "ref2")
        assert swap.deltas
        for d in swap.deltas:
            assert abs(d.d_cc) <= 1e-9
            assert abs(d.d_mi) <= 1e-9

    def test_metadata_carries_both_references(self, tmp_path):
        plan, volumes = _plan_with_phantoms(tmp_path, n_targets=1)
        save_volume(volumes["ref"], tmp_path / "ref2.nii")
        plan.volumes["ref2"] = str(tmp_path / "ref2.nii")
        swap = reference_swap_test(plan, "ref2")
        assert swap.metadata["original_reference"] == "ref"
        assert swap.metadata["alternate_reference"] == "ref2"

    def test_same_reference_rejected(self, tmp_path):
        plan, _ = _plan_with_phantoms(tmp_path, n_targets=1)
        with pytest.raises(ValueError):
            reference_swap_test(plan, "ref")

    def test_emit_swap_report(self, tmp_path):
        plan, volumes = _plan_with_phantoms(tmp_path, n_targets=1)
        save_volume(volumes["ref"], tmp_path / "ref2.nii")
        plan.volumes["ref2"] = str(tmp_path / "ref2.nii")
        swap = reference_swap_test(plan, "ref2")
        written = emit_swap_report(swap, tmp_path / "swap")
        deltas = (tmp_path / "swap" / "deltas.csv").read_text().splitlines()
        assert deltas[0] == "engine,resolution,target,d_cc,d_mi"
        assert len(deltas) == 1 + len(swap.deltas)
        meta = json.loads((tmp_path / "swap" / "swap.json").read_text())
        assert meta["original_reference"] == "ref"


class TestRecoveryError:
    def _result_with_field(self, field, vol):
        cfg = RegistrationConfig(engine="affine", levels=1, iterations=1)
        res = register(vol, vol, cfg)
        res.field = field
        return res

    def test_exact_recovery_is_zero(self):
        vol = make_phantom((16, 16, 16), 1)
        truth = DisplacementField3.zeros(vol.dims)
        truth.u[..., 0] = 0.5
        res = self._result_with_field(truth, vol)
        assert recovery_error(res, truth, vol) == 0.0

    def test_zero_recovery_of_constant_truth(self):
        vol = make_phantom((16, 16, 16), 2)
        truth = DisplacementField3.zeros(vol.dims)
        truth.u[:] = (3.0, 4.0, 0.0)
        res = self._result_with_field(DisplacementField3.zeros(vol.dims), vol)
        assert recovery_error(res, truth, vol) == pytest.approx(5.0, abs=1e-12)

    def test_matches_direct_oracle(self):
        rs = np.random.RandomState(5)
        vol = make_phantom((16, 16, 16), 3)
        truth = DisplacementField3(rs.randn(16, 16, 16, 3))
        recovered = DisplacementField3(rs.randn(16, 16, 16, 3))
        res = self._result_with_field(recovered, vol)
        mask = vol.data > 0.05 * vol.data.max()
        expected = float(np.sqrt(((recovered.u - truth.u) ** 2).sum(axis=3))[mask].mean())
        assert recovery_error(res, truth, vol) == pytest.approx(expected, abs=1e-12)

    def test_dim_mismatch(self):
        vol = make_phantom((16, 16, 16), 4)
        res = self._result_with_field(DisplacementField3.zeros(vol.dims), vol)
        with pytest.raises(ValueError):
            recovery_error(res, DisplacementField3.zeros((16, 16, 18)), vol)


class TestFormatting:
    def test_hhmmss_known_values(self):
        assert format_hhmmss(13) == "00:00:13"
        assert format_hhmmss(0) == "00:00:00"
        assert format_hhmmss(4 * 3600 + 13 * 60 + 18) == "04:13:18"
        assert format_hhmmss(59.6) == "00:01:00"
        with pytest.raises(ValueError):
            format_hhmmss(-1)


class TestEmitReport:
    def test_outputs_and_numeric_identity(self, tmp_path):
        plan, _ = _plan_with_phantoms(tmp_path, n_targets=1)
        report = run_experiment(plan)
        written = emit_report(report, plan.output_dir, save_artifacts=True)
        csv_text = open(written["csv"], encoding="utf-8").read()
        assert csv_text.splitlines()[0] == CSV_HEADER
        md = open(written["markdown"], encoding="utf-8").read()
        with open(written["csv"], newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                # every CSV number appears verbatim in the Markdown table
                line = [ln for ln in md.splitlines()
                        if ln.startswith(f"| {row['engine']} | {row['resolution']} "
                                         f"| {row['target']} ")]
                assert len(line) == 1
                for key in ("cc", "mi", "nmi", "seconds"):
                    assert f" {row[key]} " in line[0] or line[0].endswith(f" {row[key]} |")
        assert "## Computation time" in md
        assert re.search(r"\| \w+ \| \d\d:\d\d:\d\d \|", md)

    def test_overlay_channels(self, tmp_path):
        from PIL import Image

        plan, _ = _plan_with_phantoms(tmp_path, n_targets=1)
        report = run_experiment(plan)
        written = emit_report(report, plan.output_dir)
        assert written["overlays"]
        img = np.asarray(Image.open(written["overlays"][0]))
        assert img.ndim == 3 and img.shape[2] == 3
        row = report.rows[0]
        k = row.fixed.dims[2] // 2
        ref_slice = row.fixed.data[:, :, k].T
        expected_red = (ref_slice / ref_slice.max() * 255).astype(np.uint8)
        assert np.array_equal(img[..., 0], expected_red)
        assert img[..., 2].max() == 0  # blue channel unused

    def test_failures_listed(self, tmp_path):
        engines = _quick_engines()[:1] + [{"label": "broken", "config": {
            "engine": "dense-diffeomorphic", "levels": 5, "iterations": 2}}]
        plan, _ = _plan_with_phantoms(tmp_path, n_targets=1, engines=engines)
        report = run_experiment(plan)
        emit_report(report, plan.output_dir)
        md = (tmp_path / "out" / "report.md").read_text()
        assert "## Failures" in md
        assert "broken" in md
        doc = json.loads((tmp_path / "out" / "report.json").read_text())
        assert len(doc["failures"]) == 1

    def test_render_report_dir_round_trip(self, tmp_path):
        plan, _ = _plan_with_phantoms(tmp_path, n_targets=1)
        report = run_experiment(plan)
        emit_report(report, plan.output_dir, save_artifacts=True)
        rendered = render_report_dir(tmp_path / "out" / "report.csv",
                                     tmp_path / "re-rendered")
        assert (tmp_path / "re-rendered" / "report.md").exists()
        assert rendered["overlays"]  # regenerated from saved volumes
