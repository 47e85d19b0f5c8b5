import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tvsr.volume import (
    FormatError,
    Volume,
    export_slice_pgm,
    normalize_hu,
    read_nifti1,
    read_volume,
    write_nifti1,
    write_volume,
)


def read_pgm(path):
    raw = path.read_bytes()
    parts = raw.split(b"\n", 3)
    assert parts[0] == b"P5" and parts[2] == b"255"
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


class TestNativeContainer:
    def test_roundtrip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        vol = Volume(rng.standard_normal((4, 16, 16)).astype(np.float32) * 500, spacing_z=5.0, spacing_xy=0.7)
        write_volume(vol, tmp_path / "a.vol")
        back = read_volume(tmp_path / "a.vol")
        assert back.voxels.tobytes() == vol.voxels.tobytes()
        assert (back.spacing_z, back.unit) == (5.0, "HU")
        assert back.spacing_xy == pytest.approx(0.7)

    def test_header_layout(self, tmp_path):
        vol = Volume(np.zeros((3, 512, 512), np.float32), spacing_z=5.0, spacing_xy=0.75)
        write_volume(vol, tmp_path / "t.vol")
        raw = (tmp_path / "t.vol").read_bytes()
        assert raw[:4] == b"TVSR"
        assert struct.unpack_from("<H3I3fBB", raw, 4) == (1, 3, 512, 512, 5.0, 0.75, 0.75, 0, 0)
        assert len(raw) == 32 + 4 * 3 * 512 * 512
        back = read_volume(tmp_path / "t.vol")
        assert back.depth == 3 and back.spacing_z == 5.0

    def test_truncated(self, tmp_path):
        vol = Volume(np.ones((2, 4, 4), np.float32))
        write_volume(vol, tmp_path / "t.vol")
        raw = (tmp_path / "t.vol").read_bytes()
        (tmp_path / "cut.vol").write_bytes(raw[:-5])
        with pytest.raises(FormatError, match="byte"):
            read_volume(tmp_path / "cut.vol")
        (tmp_path / "hdr.vol").write_bytes(raw[:10])
        with pytest.raises(FormatError):
            read_volume(tmp_path / "hdr.vol")

    def test_bad_magic_and_dtype(self, tmp_path):
        vol = Volume(np.ones((1, 2, 2), np.float32))
        write_volume(vol, tmp_path / "t.vol")
        raw = bytearray((tmp_path / "t.vol").read_bytes())
        bad = bytes(b"XXXX" + raw[4:])
        (tmp_path / "m.vol").write_bytes(bad)
        with pytest.raises(FormatError) as exc:
            read_volume(tmp_path / "m.vol")
        assert exc.value.offset == 0
        raw[31] = 7
        (tmp_path / "d.vol").write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="dtype"):
            read_volume(tmp_path / "d.vol")

    def test_normalized_unit_roundtrip(self, tmp_path):
        vol = Volume(np.full((1, 2, 2), 0.25, np.float32), unit="normalized")
        write_volume(vol, tmp_path / "n.vol")
        assert read_volume(tmp_path / "n.vol").unit == "normalized"


class TestNifti:
    def test_int16_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        vals = rng.integers(-1024, 2048, size=(5, 6, 7)).astype(np.float32)
        vol = Volume(vals, spacing_z=1.0, spacing_xy=0.7)
        write_nifti1(vol, tmp_path / "a.nii")
        back = read_nifti1(tmp_path / "a.nii")
        assert np.array_equal(back.voxels, vals)
        assert back.spacing_z == 1.0
        assert back.spacing_xy == pytest.approx(0.7)
        assert back.unit == "HU"

    def test_scl_slope_applied(self, tmp_path):
        vol = Volume(np.full((2, 3, 3), 10.0, np.float32))
        write_nifti1(vol, tmp_path / "a.nii")
        raw = bytearray((tmp_path / "a.nii").read_bytes())
        struct.pack_into("<2f", raw, 112, 2.0, -1024.0)
        (tmp_path / "b.nii").write_bytes(bytes(raw))
        assert np.all(read_nifti1(tmp_path / "b.nii").voxels == -1004.0)

    def test_axis_order_x_fastest(self, tmp_path):
        vox = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4)
        write_nifti1(Volume(vox), tmp_path / "a.nii", datatype=16)
        raw = (tmp_path / "a.nii").read_bytes()
        assert struct.unpack_from("<4h", raw, 40) == (3, 4, 3, 2)
        assert np.array_equal(read_nifti1(tmp_path / "a.nii").voxels, vox)

    def test_float64_unsupported(self, tmp_path):
        write_nifti1(Volume(np.zeros((1, 2, 2), np.float32)), tmp_path / "a.nii")
        raw = bytearray((tmp_path / "a.nii").read_bytes())
        struct.pack_into("<h", raw, 70, 64)
        (tmp_path / "b.nii").write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="datatype"):
            read_nifti1(tmp_path / "b.nii")

    def test_bad_sizeof_hdr(self, tmp_path):
        (tmp_path / "x.nii").write_bytes(b"\x00" * 400)
        with pytest.raises(FormatError):
            read_nifti1(tmp_path / "x.nii")


class TestNormalize:
    def test_hu_range_endpoints(self):
        v = normalize_hu(Volume(np.array([[[-1024.0, 2048.0, 512.0, -2000.0, 5000.0]]], np.float32)))
        np.testing.assert_array_equal(v.voxels[0, 0], [0.0, 1.0, 0.5, 0.0, 1.0])
        assert v.unit == "normalized"

    def test_rejects_normalized(self):
        v = Volume(np.zeros((1, 1, 1), np.float32), unit="normalized")
        with pytest.raises(ValueError):
            normalize_hu(v)

    @given(st.lists(st.floats(-5000, 5000), min_size=2, max_size=20))
    def test_monotone(self, xs):
        xs = np.sort(np.array(xs, dtype=np.float32))
        out = normalize_hu(Volume(xs.reshape(1, 1, -1))).voxels.ravel()
        assert np.all(np.diff(out) >= 0)

    def test_idempotent_on_clamped(self):
        rng = np.random.default_rng(2)
        hu = rng.uniform(-3000, 4000, (2, 4, 4)).astype(np.float32)
        once = normalize_hu(Volume(hu))
        hu2 = once.voxels.astype(np.float64) * 3072 - 1024
        twice = normalize_hu(Volume(hu2.astype(np.float32)))
        np.testing.assert_allclose(twice.voxels, once.voxels, atol=1e-6)


class TestPgmExport:
    def test_constant_volume(self, tmp_path):
        vol = Volume(np.full((3, 5, 6), 40.0, np.float32))
        img = export_slice_pgm(vol, "axial", 1, (40, 400), tmp_path / "a.pgm")
        assert np.all(img == img[0, 0])
        assert img[0, 0] == 128
        assert np.array_equal(read_pgm(tmp_path / "a.pgm"), img)

    def test_axis_geometry(self, tmp_path):
        vol = Volume(np.zeros((3, 5, 6), np.float32))
        assert export_slice_pgm(vol, "axial", 0, (0, 100), tmp_path / "a.pgm").shape == (5, 6)
        assert export_slice_pgm(vol, "coronal", 4, (0, 100), tmp_path / "c.pgm").shape == (3, 6)
        assert export_slice_pgm(vol, "sagittal", 5, (0, 100), tmp_path / "s.pgm").shape == (3, 5)
        with pytest.raises(IndexError):
            export_slice_pgm(vol, "axial", 3, (0, 100), tmp_path / "x.pgm")

    def test_normalized_unnormalized_first(self, tmp_path):
        rng = np.random.default_rng(3)
        hu = rng.uniform(-1024, 2048, (2, 8, 8)).astype(np.float32)
        norm = normalize_hu(Volume(hu))
        a = export_slice_pgm(Volume(hu), "axial", 0, (-600, 1500), tmp_path / "a.pgm")
        b = export_slice_pgm(norm, "axial", 0, (-600, 1500), tmp_path / "b.pgm")
        assert np.max(np.abs(a.astype(int) - b.astype(int))) <= 1

    def test_coronal_equals_row_gather(self, tmp_path):
        rng = np.random.default_rng(4)
        vol = Volume(rng.uniform(-1000, 1000, (4, 6, 7)).astype(np.float32))
        cor = export_slice_pgm(vol, "coronal", 2, (0, 2000), tmp_path / "c.pgm")
        rows = [export_slice_pgm(vol, "axial", d, (0, 2000), tmp_path / f"a{d}.pgm")[2] for d in range(4)]
        assert np.array_equal(cor, np.stack(rows))


def test_volume_invariants():
    with pytest.raises(ValueError):
        Volume(np.full((1, 2, 2), 1.5, np.float32), unit="normalized")
    with pytest.raises(ValueError):
        Volume(np.zeros((1, 2, 2), np.float32), spacing_z=0.0)
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2), np.float32))
