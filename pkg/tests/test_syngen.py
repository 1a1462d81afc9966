import numpy as np
import pytest

from volreg.models import diffusion_energy
from volreg.nifti import load_volume
from volreg.syngen import (DatasetManifest, DeformationSpec, build_manifest,
                           default_amplitude, generate_deformation, materialize,
                           smoothing_sigma, split_counts)
from volreg.volume import flip, make_phantom
from volreg.warp import apply_displacement, load_field


class TestDeformationSpec:
    def test_validation(self):
        with pytest.raises(ValueError):
            DeformationSpec(n_sites=0)
        with pytest.raises(ValueError):
            DeformationSpec(frequency=30)
        with pytest.raises(ValueError):
            DeformationSpec(amplitude=-1.0)

    def test_sigma_mapping_monotone(self):
        dims = (64, 64, 64)
        sigmas = [smoothing_sigma(f, dims) for f in (25, 35, 45)]
        assert sigmas[0] > sigmas[1] > sigmas[2]
        assert sigmas[0] == pytest.approx(8.0)

    def test_sigma_scales_with_axis(self):
        assert smoothing_sigma(25, (32, 64, 64)) == pytest.approx(4.0)


class TestGenerateDeformation:
    def test_amplitude_contract_single_site(self):
        field = generate_deformation((24, 24, 24), DeformationSpec(
            n_sites=1, frequency=35, amplitude=2.0, seed=5))
        assert field.max_magnitude() == pytest.approx(2.0, abs=1e-6)

    def test_amplitude_contract_many_sites(self):
        field = generate_deformation((32, 32, 32), DeformationSpec(
            n_sites=150, frequency=45, amplitude=1.5, seed=1))
        assert field.max_magnitude() == pytest.approx(1.5, abs=1e-6)

    def test_deterministic(self):
        spec = DeformationSpec(n_sites=30, frequency=25, amplitude=1.0, seed=9)
        a = generate_deformation((20, 20, 20), spec)
        b = generate_deformation((20, 20, 20), spec)
        assert np.array_equal(a.u, b.u)

    def test_default_amplitude_is_six_percent(self):
        field = generate_deformation((32, 48, 64), DeformationSpec(
            n_sites=10, frequency=25, seed=2))
        assert default_amplitude((32, 48, 64)) == pytest.approx(1.92)
        assert field.max_magnitude() == pytest.approx(1.92, abs=1e-6)

    def test_low_frequency_smoother_than_high(self):
        # dense site coverage (150 sites at 24^3) keeps the fields in the
        # overlapping regime where the frequency class controls roughness
        e25 = diffusion_energy(generate_deformation((24, 24, 24), DeformationSpec(
            n_sites=150, frequency=25, amplitude=1.5, seed=0)))[0]
        e45 = diffusion_energy(generate_deformation((24, 24, 24), DeformationSpec(
            n_sites=150, frequency=45, amplitude=1.5, seed=0)))[0]
        assert e25 < e45

    def test_errors(self):
        with pytest.raises(ValueError):
            generate_deformation((8, 32, 32), DeformationSpec())
        with pytest.raises(ValueError):
            generate_deformation((16, 16, 16), DeformationSpec(n_sites=5000))


class TestSplitCounts:
    def test_paper_arithmetic(self):
        assert split_counts(100) == (20, 20, 60)

    def test_small_divisible(self):
        assert split_counts(5) == (1, 1, 3)
        assert split_counts(10) == (2, 2, 6)

    def test_rounding_remainder_to_high(self):
        low, med, high = split_counts(7)
        assert (low, med, high) == (1, 1, 5)
        assert low + med + high == 7
        for n in (1, 2, 3, 13, 99, 101):
            parts = split_counts(n)
            assert sum(parts) == n
            assert all(p >= 0 for p in parts)


class TestBuildManifest:
    def test_expansion_and_totals(self):
        manifest = build_manifest([f"b{i:03d}" for i in range(16)], per_brain=100, seed=1)
        assert manifest.expanded_brains == 80
        assert len(manifest.entries) == 8000
        assert manifest.frequency_counts == {25: 1600, 35: 1600, 45: 4800}

    def test_per_brain_split(self):
        manifest = build_manifest(["a"], per_brain=100, seed=2)
        assert len(manifest.entries) == 500
        per_variant = {}
        for e in manifest.entries:
            per_variant.setdefault(e.flip_axes, []).append(e.spec.frequency)
        assert len(per_variant) == 5
        for freqs in per_variant.values():
            assert (freqs.count(25), freqs.count(35), freqs.count(45)) == (20, 20, 60)

    def test_entry_seeds_unique(self):
        manifest = build_manifest(["a", "b"], per_brain=10, seed=3)
        seeds = [e.spec.seed for e in manifest.entries]
        assert len(set(seeds)) == len(seeds)

    def test_empty_sources_rejected(self):
        with pytest.raises(ValueError):
            build_manifest([])

    def test_json_round_trip(self, tmp_path):
        manifest = build_manifest(["a", "b"], per_brain=5, seed=4)
        manifest.save(tmp_path / "m.json")
        back = DatasetManifest.load(tmp_path / "m.json")
        assert back.per_brain == 5 and back.seed == 4
        assert [e.to_json_dict() for e in back.entries] == \
            [e.to_json_dict() for e in manifest.entries]


class TestMaterialize:
    def test_empty_manifest_writes_nothing(self, tmp_path):
        manifest = DatasetManifest(entries=[], per_brain=0, seed=0)
        summary = materialize(manifest, {}, tmp_path)
        assert summary.written == 0
        assert sorted(p.name for p in tmp_path.iterdir()) == ["checksums.json"]

    def test_counts_and_idempotence(self, tmp_path):
        source = make_phantom((16, 16, 16), 3)
        manifest = build_manifest(["s"], per_brain=5, seed=5, n_sites=10)
        summary = materialize(manifest, {"s": source}, tmp_path)
        assert summary.written == 25
        vols = sorted(tmp_path.glob("*.nii"))
        fields = sorted(tmp_path.glob("*.fld"))
        assert len(vols) == 25 and len(fields) == 25

        before = {p.name: p.stat().st_mtime_ns for p in tmp_path.iterdir()}
        again = materialize(manifest, {"s": source}, tmp_path)
        assert again.written == 0 and again.skipped == 25
        after = {p.name: p.stat().st_mtime_ns for p in tmp_path.iterdir()}
        unchanged = {k: v for k, v in before.items() if k != "checksums.json"}
        assert all(after[k] == v for k, v in unchanged.items())

    def test_checksum_mismatch_reported_and_healed(self, tmp_path):
        source = make_phantom((16, 16, 16), 4)
        manifest = build_manifest(["s"], per_brain=1, seed=6, n_sites=5)
        materialize(manifest, {"s": source}, tmp_path)
        victim = sorted(tmp_path.glob("*.nii"))[0]
        blob = bytearray(victim.read_bytes())
        blob[-1] ^= 0xFF
        victim.write_bytes(bytes(blob))
        summary = materialize(manifest, {"s": source}, tmp_path)
        assert len(summary.mismatched) == 1
        healed = materialize(manifest, {"s": source}, tmp_path)
        assert healed.skipped == len(manifest.entries)

    def test_stored_pairs_satisfy_warp_identity(self, tmp_path):
        source = make_phantom((16, 16, 16), 5)
        manifest = build_manifest(["s"], per_brain=2, seed=7, n_sites=8)
        materialize(manifest, {"s": source}, tmp_path)
        for entry in manifest.entries[:6]:
            vol = load_volume(tmp_path / f"{entry.stem}.nii")
            field = load_field(tmp_path / f"{entry.stem}.fld")
            flipped = flip(source, entry.flip_axes) if entry.flip_axes else source
            expected = apply_displacement(flipped, field)
            assert np.array_equal(vol.data, expected.data)

    def test_unknown_source_rejected(self, tmp_path):
        manifest = build_manifest(["nope"], per_brain=1, seed=8)
        with pytest.raises(KeyError):
            materialize(manifest, {}, tmp_path)


class TestFrequencyMonotonicity:
    def test_mean_roughness_increases_over_seeds(self):
        dims = (24, 24, 24)
        means = {}
        for freq in (25, 35, 45):
            energies = []
            for seed in range(10):
                field = generate_deformation(dims, DeformationSpec(
                    n_sites=150, frequency=freq, amplitude=1.5, seed=seed))
                energies.append(diffusion_energy(field)[0])
            means[freq] = float(np.mean(energies))
        assert means[25] < means[35] < means[45]
