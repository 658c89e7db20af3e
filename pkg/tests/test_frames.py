"""Frame I/O, packing, color conversion, and metric checks."""

import numpy as np
import pytest

from ydlc import frames as fr
from ydlc.errors import FormatError, ShapeError


def random_frame(rng, w=16, h=12):
    return fr.Yuv420Frame(
        rng.integers(0, 256, (h, w), dtype=np.uint8).astype(np.uint8),
        rng.integers(0, 256, (h // 2, w // 2), dtype=np.uint8).astype(np.uint8),
        rng.integers(0, 256, (h // 2, w // 2), dtype=np.uint8).astype(np.uint8))


class TestFrameType:
    def test_valid(self):
        f = random_frame(np.random.default_rng(0))
        assert f.width == 16 and f.height == 12
        assert f.frame_bytes() == 16 * 12 * 3 // 2

    def test_odd_luma_rejected(self):
        with pytest.raises(ShapeError):
            fr.Yuv420Frame(np.zeros((5, 4), np.uint8), np.zeros((2, 2), np.uint8),
                           np.zeros((2, 2), np.uint8))

    def test_chroma_dims_must_halve(self):
        with pytest.raises(ShapeError):
            fr.Yuv420Frame(np.zeros((4, 4), np.uint8), np.zeros((2, 3), np.uint8),
                           np.zeros((2, 2), np.uint8))

    def test_dtype_enforced(self):
        with pytest.raises(ShapeError):
            fr.Yuv420Frame(np.zeros((4, 4), np.float32), np.zeros((2, 2), np.uint8),
                           np.zeros((2, 2), np.uint8))


class TestYuvIo:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        frames = [random_frame(rng) for _ in range(5)]
        p = tmp_path / "clip.yuv"
        fr.write_yuv(p, frames)
        assert p.stat().st_size == 5 * frames[0].frame_bytes()
        back = fr.read_yuv(p, 16, 12)
        assert len(back) == 5
        for a, b in zip(frames, back):
            np.testing.assert_array_equal(a.y, b.y)
            np.testing.assert_array_equal(a.u, b.u)
            np.testing.assert_array_equal(a.v, b.v)

    def test_step_sampling(self, tmp_path):
        rng = np.random.default_rng(2)
        frames = [random_frame(rng, 4, 4) for _ in range(20)]
        p = tmp_path / "clip.yuv"
        fr.write_yuv(p, frames)
        got = fr.read_yuv(p, 4, 4, step=8)
        assert len(got) == 3  # frames 0, 8, 16
        np.testing.assert_array_equal(got[1].y, frames[8].y)
        np.testing.assert_array_equal(got[2].v, frames[16].v)
        got = fr.read_yuv(p, 4, 4, start=3, count=2, step=5)
        np.testing.assert_array_equal(got[0].y, frames[3].y)
        np.testing.assert_array_equal(got[1].y, frames[8].y)
        assert len(got) == 2

    def test_truncated_file_rejected(self, tmp_path):
        p = tmp_path / "bad.yuv"
        p.write_bytes(b"\x00" * (16 * 12 * 3 // 2 + 7))
        with pytest.raises(FormatError, match="multiple"):
            fr.read_yuv(p, 16, 12)

    def test_odd_dims_rejected(self, tmp_path):
        p = tmp_path / "x.yuv"
        p.write_bytes(b"")
        with pytest.raises(ShapeError):
            fr.read_yuv(p, 15, 12)


class TestPacking:
    def test_split4_phases(self):
        y = np.arange(16, dtype=np.float32).reshape(4, 4)
        ph = fr.luma_split4(y)
        np.testing.assert_array_equal(ph[0], [[0, 2], [8, 10]])    # even row, even col
        np.testing.assert_array_equal(ph[1], [[1, 3], [9, 11]])    # even row, odd col
        np.testing.assert_array_equal(ph[2], [[4, 6], [12, 14]])
        np.testing.assert_array_equal(ph[3], [[5, 7], [13, 15]])

    def test_split_merge_roundtrip(self):
        rng = np.random.default_rng(3)
        y = rng.random((10, 14)).astype(np.float32)
        np.testing.assert_array_equal(fr.luma_merge4(fr.luma_split4(y)), y)

    def test_pack_six_layout(self):
        f = random_frame(np.random.default_rng(4), 8, 6)
        six = fr.pack_six(f)
        assert six.shape == (6, 3, 4) and six.dtype == np.float32
        np.testing.assert_allclose(six[4], f.u / 255.0, rtol=1e-6)
        np.testing.assert_allclose(six[5], f.v / 255.0, rtol=1e-6)
        yb, ub, vb = fr.unpack_six(six)
        np.testing.assert_allclose(yb, f.y / 255.0, rtol=1e-6)
        back = fr.floats_to_frame(yb, ub, vb)
        np.testing.assert_array_equal(back.y, f.y)
        np.testing.assert_array_equal(back.u, f.u)

    def test_round_half_up(self):
        # 0.5/255 scaled back: exact .5 cases round up
        yf = np.array([[0.5 / 255, 1.5 / 255], [2.4999 / 255, 0.0]], np.float64)
        uf = vf = np.array([[128.5 / 255]], np.float64)
        f = fr.floats_to_frame(yf, uf, vf)
        np.testing.assert_array_equal(f.y, [[1, 2], [2, 0]])
        assert f.u[0, 0] == 129


class TestPpmAndColor:
    def test_ppm_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        rgb = rng.integers(0, 256, (6, 8, 3), dtype=np.uint8).astype(np.uint8)
        p = tmp_path / "img.ppm"
        fr.write_ppm(p, rgb)
        np.testing.assert_array_equal(fr.read_ppm(p), rgb)

    def test_ppm_comment_header(self, tmp_path):
        p = tmp_path / "c.ppm"
        p.write_bytes(b"P6\n# a comment\n2 1\n# another\n255\n" + bytes(6))
        img = fr.read_ppm(p)
        assert img.shape == (1, 2, 3)

    def test_ppm_bad_magic(self, tmp_path):
        p = tmp_path / "bad.ppm"
        p.write_bytes(b"P5\n2 2\n255\n" + bytes(4))
        with pytest.raises(FormatError, match="P6"):
            fr.read_ppm(p)

    def test_ppm_truncated_pixels(self, tmp_path):
        p = tmp_path / "t.ppm"
        p.write_bytes(b"P6\n4 4\n255\n" + bytes(10))
        with pytest.raises(FormatError, match="truncated"):
            fr.read_ppm(p)

    def test_ppm_maxval_rejected(self, tmp_path):
        p = tmp_path / "m.ppm"
        p.write_bytes(b"P6\n1 1\n65535\n" + bytes(6))
        with pytest.raises(FormatError, match="maxval"):
            fr.read_ppm(p)

    def test_primary_color_fixtures(self):
        # full-range BT.601 on uniform 2x2 patches
        cases = {
            (255, 0, 0): (76, 85, 255),     # red: V clamps at 255
            (255, 255, 255): (255, 128, 128),
            (0, 0, 0): (0, 128, 128),
            (128, 128, 128): (128, 128, 128),
            (0, 255, 0): (150, 44, 21),
            (0, 0, 255): (29, 255, 107),
        }
        for rgb_in, (ey, eu, ev) in cases.items():
            img = np.tile(np.array(rgb_in, np.uint8), (2, 2, 1))
            f = fr.rgb_to_yuv420(img)
            assert (f.y[0, 0], f.u[0, 0], f.v[0, 0]) == (ey, eu, ev), rgb_in

    def test_achromatic_roundtrip_within_one(self):
        # gray ramps survive yuv->rgb->yuv to +-1 everywhere
        g = np.repeat(np.arange(0, 256, 2, dtype=np.uint8), 2)[None].repeat(4, 0)
        img = np.stack([g, g, g], axis=2)
        f = fr.rgb_to_yuv420(img)
        back = fr.yuv420_to_rgb(f)
        assert np.max(np.abs(back.astype(int) - img.astype(int))) <= 1

    def test_random_roundtrip_smooth_images(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            base = rng.integers(30, 226, (1, 1, 3))
            img = np.clip(base + rng.integers(-4, 5, (8, 8, 3)), 0, 255).astype(np.uint8)
            f = fr.rgb_to_yuv420(img)
            back = fr.yuv420_to_rgb(f)
            # chroma subsampling of near-uniform patches costs a few codes at most
            assert np.max(np.abs(back.astype(int) - img.astype(int))) <= 8


class TestMetricsAndGeometry:
    def test_psnr_identical_caps(self):
        a = np.full((8, 8), 77, np.uint8)
        assert fr.psnr(a, a.copy()) == 100.0

    def test_psnr_uniform_unit_error(self):
        a = np.zeros((16, 16), np.uint8)
        b = np.ones((16, 16), np.uint8)
        assert abs(fr.psnr(a, b) - 10 * np.log10(255.0 ** 2)) < 1e-9  # 48.13 dB

    def test_psnr_known_mse(self):
        a = np.zeros((4, 4), np.uint8)
        b = np.full((4, 4), 5, np.uint8)
        assert abs(fr.psnr(a, b) - 10 * np.log10(255.0 ** 2 / 25.0)) < 1e-9

    def test_psnr_shape_mismatch(self):
        with pytest.raises(ShapeError):
            fr.psnr(np.zeros((4, 4)), np.zeros((4, 5)))

    def test_pad_and_crop(self):
        f = random_frame(np.random.default_rng(7), 20, 12)
        p = fr.pad_frame(f, 16)
        assert (p.width, p.height) == (32, 16)
        np.testing.assert_array_equal(p.y[:12, :20], f.y)
        np.testing.assert_array_equal(p.u[:6, :10], f.u)
        # replication: padded columns repeat the last source column
        np.testing.assert_array_equal(p.y[:12, 20], f.y[:, 19])
        np.testing.assert_array_equal(p.y[12, :20], f.y[11, :])
        back = fr.crop_frame(p, 20, 12)
        np.testing.assert_array_equal(back.y, f.y)
        np.testing.assert_array_equal(back.v, f.v)

    def test_pad_noop_when_aligned(self):
        f = random_frame(np.random.default_rng(8), 32, 16)
        p = fr.pad_frame(f, 16)
        np.testing.assert_array_equal(p.y, f.y)
        assert (p.width, p.height) == (32, 16)
