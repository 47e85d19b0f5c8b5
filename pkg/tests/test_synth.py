import numpy as np
import pytest

from tvsr.metrics import slice_pair_analysis
from tvsr.synth import (
    DatasetSpec,
    PhantomSpec,
    degrade_to_thick,
    gen_phantom,
    make_dataset,
    read_manifest,
    simulate_acquisition,
)
from tvsr.volume import Volume, read_volume


def ramp(d=21, h=4, w=4):
    return Volume(np.broadcast_to(np.arange(d, dtype=np.float32)[:, None, None] * 10, (d, h, w)).copy())


class TestPhantom:
    def test_deterministic(self):
        a = gen_phantom(PhantomSpec(seed=3))
        b = gen_phantom(PhantomSpec(seed=3))
        assert a.voxels.tobytes() == b.voxels.tobytes()
        assert gen_phantom(PhantomSpec(seed=4)).voxels.tobytes() != a.voxels.tobytes()

    def test_zero_primitives(self):
        v = gen_phantom(PhantomSpec(n_primitives=0))
        assert np.all(v.voxels == -1000.0)

    def test_range_and_spacing(self):
        v = gen_phantom(PhantomSpec(seed=0))
        assert v.voxels.min() >= -1024 and v.voxels.max() <= 2048
        assert v.spacing_z == 1.0 and v.unit == "HU"

    def test_histogram_spans_air_and_soft_tissue(self):
        vox = np.concatenate([gen_phantom(PhantomSpec(seed=s)).voxels.ravel() for s in range(3)])
        assert np.mean(vox < -900) > 0.05
        assert np.mean((vox > -20) & (vox < 100)) > 0.02

    def test_bad_kind(self):
        with pytest.raises(ValueError):
            PhantomSpec(kinds=("sphere",))


class TestDegrade:
    @pytest.mark.parametrize("mode", ["average", "decimate"])
    def test_constant(self, mode):
        thin = Volume(np.full((11, 3, 3), 40.0, np.float32))
        thick = degrade_to_thick(thin, 5, mode)
        assert thick.shape == (3, 3, 3) and np.all(thick.voxels == 40.0)
        assert thick.spacing_z == 5.0

    def test_decimate_exact(self):
        thin = gen_phantom(PhantomSpec(dims=(16, 12, 12), seed=1))
        thick = degrade_to_thick(thin, 5, "decimate")
        assert np.array_equal(thick.voxels, thin.voxels[[0, 5, 10, 15]])

    def test_average_on_ramp(self):
        thin = ramp()
        thick = degrade_to_thick(thin, 5, "average")
        assert thick.depth == 5
        for i in range(1, 4):
            assert np.array_equal(thick.voxels[i], thin.voxels[5 * i])
        # edge truncation: slices 0..2 average to 10
        assert np.allclose(thick.voxels[0], 10.0)

    def test_depth_formula(self):
        assert degrade_to_thick(ramp(d=14), 5).depth == (14 - 1) // 5 + 1

    def test_too_shallow(self):
        with pytest.raises(ValueError):
            degrade_to_thick(ramp(d=5), 5)

    def test_average_commutes_with_flip(self):
        thin = gen_phantom(PhantomSpec(dims=(11, 9, 10), seed=2))
        flipped = thin.with_voxels(thin.voxels[..., ::-1].copy())
        a = degrade_to_thick(flipped, 5).voxels
        b = degrade_to_thick(thin, 5).voxels[..., ::-1]
        assert np.array_equal(a, b)

    def test_acquisition_differs_from_decimation(self):
        thin = gen_phantom(PhantomSpec(dims=(16, 16, 16), seed=5))
        real = simulate_acquisition(thin, 5, np.random.default_rng(0))
        pseudo = degrade_to_thick(thin, 5, "decimate")
        assert real.shape == pseudo.shape
        assert np.abs(real.voxels - pseudo.voxels).mean() > 5.0


class TestDataset:
    def test_counts_and_regeneration(self, tmp_path):
        spec = DatasetSpec(thick_depth=3, scale=5, height=12, width=12)
        a = make_dataset(10, spec, tmp_path / "a", seed=7, split=(6, 2, 2))
        b = make_dataset(10, spec, tmp_path / "b", seed=7, split=(6, 2, 2))
        splits = [e.split for e in a]
        assert (splits.count("train"), splits.count("val"), splits.count("test")) == (6, 2, 2)
        assert (tmp_path / "a/manifest.tsv").read_bytes() == (tmp_path / "b/manifest.tsv").read_bytes()
        for e in a:
            assert (tmp_path / "a" / e.thin_path).read_bytes() == (tmp_path / "b" / e.thin_path).read_bytes()
        assert read_manifest(tmp_path / "a/manifest.tsv") == a
        thin = read_volume(tmp_path / "a" / a[0].thin_path)
        assert thin.shape == (11, 12, 12)

    def test_alignment_match_highest(self, tmp_path):
        spec = DatasetSpec(scale=5, height=24, width=24)
        e = make_dataset(1, spec, tmp_path, seed=1, mode="average", split=(1, 0, 0))[0]
        t = slice_pair_analysis(read_volume(tmp_path / e.thin_path), read_volume(tmp_path / e.thick_path), 5)
        assert t["Match"]["psnr"] > t["Near"]["psnr"] > t["Far"]["psnr"]
