import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from darkforge.errors import DatasetError, ShapeError
from darkforge.raw import (
    CFA_PHASES,
    BayerRaw,
    MONO_PHASE,
    PackedRaw,
    RawMeta,
    amplify,
    compute_ratio,
    load_bayer,
    load_mono,
    normalize,
    pack_raw,
    read_raw_file,
    unpack_raw,
    write_raw_file,
)


def make_bayer(data, bit_depth=8, black=0, white=None, phase="RGGB", exposure=0.1):
    data = np.asarray(data)
    return BayerRaw(
        width=data.shape[1],
        height=data.shape[0],
        data=data,
        bit_depth=bit_depth,
        black_level=black,
        white_level=white if white is not None else 2**bit_depth - 1,
        cfa_phase=phase,
        exposure_time=exposure,
    )


class TestNormalize:
    def test_black_level_maps_to_zero(self):
        raw = make_bayer(np.full((2, 2), 12, dtype=np.uint8), black=12, white=200)
        assert np.all(normalize(raw) == 0.0)

    def test_white_level_maps_to_one(self):
        raw = make_bayer(np.full((2, 2), 200, dtype=np.uint8), black=12, white=200)
        assert np.all(normalize(raw) == 1.0)

    def test_8bit_affine_value(self):
        raw = make_bayer(np.full((2, 2), 51, dtype=np.uint8))
        assert normalize(raw)[0, 0] == pytest.approx(0.2)

    def test_below_black_clamps(self):
        raw = make_bayer(np.full((2, 2), 3, dtype=np.uint8), black=10, white=250)
        assert np.all(normalize(raw) == 0.0)

    @given(st.integers(0, 255), st.integers(0, 255))
    def test_monotone_in_sample(self, a, b):
        lo, hi = sorted((a, b))
        raw_lo = make_bayer(np.full((2, 2), lo, dtype=np.uint8))
        raw_hi = make_bayer(np.full((2, 2), hi, dtype=np.uint8))
        assert normalize(raw_lo)[0, 0] <= normalize(raw_hi)[0, 0]


class TestPackUnpack:
    def test_2x2_rggb(self):
        packed = pack_raw(np.array([[1.0, 2.0], [3.0, 4.0]]), "RGGB")
        assert packed.planes.shape == (4, 1, 1)
        assert packed.planes[:, 0, 0].tolist() == [1.0, 2.0, 3.0, 4.0]

    def test_2x2_bggr_permutes(self):
        packed = pack_raw(np.array([[1.0, 2.0], [3.0, 4.0]]), "BGGR")
        # canonical order [R, G1, G2, B]; greens stay in raster order
        assert packed.planes[:, 0, 0].tolist() == [4.0, 2.0, 3.0, 1.0]

    def test_ramp_4x4_rggb(self):
        packed = pack_raw(np.arange(16, dtype=np.float64).reshape(4, 4), "RGGB")
        assert packed.planes[0].tolist() == [[0, 2], [8, 10]]
        assert packed.planes[1].tolist() == [[1, 3], [9, 11]]
        assert packed.planes[2].tolist() == [[4, 6], [12, 14]]
        assert packed.planes[3].tolist() == [[5, 7], [13, 15]]

    def test_unpack_ramp(self):
        planes = np.array(
            [[[0, 2], [8, 10]], [[1, 3], [9, 11]], [[4, 6], [12, 14]], [[5, 7], [13, 15]]],
            dtype=np.float64,
        )
        plane = unpack_raw(PackedRaw(planes=planes), "RGGB")
        assert np.array_equal(plane, np.arange(16, dtype=np.float64).reshape(4, 4))

    def test_unpack_zero(self):
        assert np.all(unpack_raw(PackedRaw(planes=np.zeros((4, 3, 2))), "GRBG") == 0.0)

    def test_odd_dims_rejected(self):
        with pytest.raises(ShapeError):
            pack_raw(np.zeros((3, 4)), "RGGB")

    def test_plane_count_rejected(self):
        with pytest.raises(ShapeError):
            PackedRaw(planes=np.zeros((3, 2, 2)))

    def test_unknown_phase_rejected(self):
        with pytest.raises(ValueError):
            pack_raw(np.zeros((2, 2)), "RGBG")

    @settings(max_examples=60)
    @given(
        st.sampled_from(CFA_PHASES),
        st.integers(1, 6),
        st.integers(1, 6),
        st.integers(0, 2**32 - 1),
    )
    def test_roundtrip_both_ways(self, phase, hh, ww, seed):
        rng = np.random.default_rng(seed)
        plane = rng.uniform(0, 1, (2 * hh, 2 * ww))
        packed = pack_raw(plane, phase)
        assert np.array_equal(unpack_raw(packed, phase), plane)
        repacked = pack_raw(unpack_raw(packed, phase), phase)
        assert np.array_equal(repacked.planes, packed.planes)


class TestAmplify:
    def test_scales(self):
        out = amplify(PackedRaw(planes=np.full((4, 2, 2), 0.1)), 4.0)
        assert np.allclose(out.planes, 0.4)
        assert out.ratio_applied == 4.0

    def test_clamps(self):
        out = amplify(PackedRaw(planes=np.full((4, 1, 1), 0.5)), 4.0)
        assert np.all(out.planes == 1.0)

    def test_identity(self):
        planes = np.random.default_rng(0).uniform(0, 1, (4, 3, 3))
        out = amplify(PackedRaw(planes=planes), 1.0)
        assert np.array_equal(out.planes, planes)

    def test_ratio_below_one_rejected(self):
        with pytest.raises(ValueError):
            amplify(PackedRaw(planes=np.zeros((4, 1, 1))), 0.5)

    @given(st.floats(1.0, 10.0), st.floats(1.0, 10.0))
    def test_monotone_until_clamp(self, r1, r2):
        lo, hi = sorted((r1, r2))
        planes = np.full((4, 1, 1), 0.05)
        assert amplify(PackedRaw(planes=planes), lo).planes[0, 0, 0] <= (
            amplify(PackedRaw(planes=planes), hi).planes[0, 0, 0]
        )


class TestComputeRatio:
    def test_bracket_value(self):
        assert compute_ratio(1 / 256, 3 / 8) == pytest.approx(96.0)

    def test_identity(self):
        assert compute_ratio(0.25, 0.25) == 1.0

    def test_ceiling(self):
        assert compute_ratio(1 / 4096, 3 / 8) == 300.0

    def test_nonpositive_rejected(self):
        with pytest.raises(ValueError):
            compute_ratio(0.0, 1.0)
        with pytest.raises(ValueError):
            compute_ratio(1.0, -2.0)

    @given(
        st.floats(1e-6, 100.0, allow_nan=False),
        st.floats(1e-6, 100.0, allow_nan=False),
    )
    def test_range(self, a, b):
        assert 1.0 <= compute_ratio(a, b) <= 300.0


class TestBayerInvariants:
    def test_odd_dims_rejected(self):
        with pytest.raises(ShapeError):
            make_bayer(np.zeros((3, 4), dtype=np.uint8))

    def test_sample_above_white_rejected(self):
        with pytest.raises(ValueError):
            make_bayer(np.full((2, 2), 210, dtype=np.uint8), white=200)

    def test_black_ge_white_rejected(self):
        with pytest.raises(ValueError):
            make_bayer(np.zeros((2, 2), dtype=np.uint8), black=200, white=200)

    def test_nonpositive_exposure_rejected(self):
        with pytest.raises(ValueError):
            make_bayer(np.zeros((2, 2), dtype=np.uint8), exposure=0.0)


class TestRawFiles:
    def test_roundtrip_8bit(self, tmp_path):
        rng = np.random.default_rng(1)
        samples = rng.integers(0, 256, (16, 20), dtype=np.uint8)
        meta = RawMeta(20, 16, 8, "GBRG", 0.125)
        write_raw_file(tmp_path / "f.raw", samples, meta)
        back, meta_back = read_raw_file(tmp_path / "f.raw")
        assert np.array_equal(back, samples)
        assert meta_back.cfa_phase == "GBRG"
        assert meta_back.exposure_time == 0.125

    def test_roundtrip_16bit(self, tmp_path):
        rng = np.random.default_rng(2)
        samples = rng.integers(0, 2**16, (8, 10), dtype=np.uint16)
        write_raw_file(tmp_path / "g.raw", samples, RawMeta(10, 8, 16, MONO_PHASE, 1.0))
        back, meta = read_raw_file(tmp_path / "g.raw")
        assert np.array_equal(back, samples)
        assert meta.bit_depth == 16

    def test_default_levels(self, tmp_path):
        samples = np.full((4, 4), 100, dtype=np.uint8)
        write_raw_file(tmp_path / "d.raw", samples, RawMeta(4, 4, 8, "RGGB", 0.5))
        raw = load_bayer(tmp_path / "d.raw")
        assert (raw.black_level, raw.white_level) == (0, 255)

    def test_table_geometry_size(self, tmp_path):
        samples = np.zeros((1024, 1280), dtype=np.uint8)
        write_raw_file(tmp_path / "full.raw", samples, RawMeta(1280, 1024, 8, "RGGB", 0.375))
        assert (tmp_path / "full.raw").stat().st_size == 1_310_720

    def test_corrupt_sidecar_names_file(self, tmp_path):
        samples = np.zeros((4, 4), dtype=np.uint8)
        write_raw_file(tmp_path / "c.raw", samples, RawMeta(4, 4, 8, "RGGB", 0.5))
        sidecar = tmp_path / "c.meta.json"
        sidecar.write_text(sidecar.read_text().replace('"width": 4', '"width": 6'))
        with pytest.raises(DatasetError, match="c.raw"):
            read_raw_file(tmp_path / "c.raw")

    def test_missing_sidecar(self, tmp_path):
        (tmp_path / "lost.raw").write_bytes(b"\x00" * 16)
        with pytest.raises(DatasetError, match="meta.json"):
            read_raw_file(tmp_path / "lost.raw")

    def test_mono_guards(self, tmp_path):
        samples = np.full((4, 4), 128, dtype=np.uint8)
        write_raw_file(tmp_path / "m.raw", samples, RawMeta(4, 4, 8, MONO_PHASE, 0.375))
        mono = load_mono(tmp_path / "m.raw")
        assert mono.data[0, 0] == pytest.approx(128 / 255)
        with pytest.raises(DatasetError):
            load_bayer(tmp_path / "m.raw")
