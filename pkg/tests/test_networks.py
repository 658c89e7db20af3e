"""Architecture construction, GDN semantics, forwards, and checkpoints.

The parameter-count fixtures were derived layer by layer from the designs
(conv: Cin*Cout*K^2+Cout, GDN: C^2+C, PReLU: C) and are frozen here; the
published totals they are compared against come from the reference results
for the same five designs at N=192, M=320.
"""

import numpy as np
import pytest

from ydlc import autograd as ag
from ydlc import networks as nw
from ydlc.errors import FormatError, ShapeError
from .test_autograd import check_grads

# (derived exact count, published count) at N=192, M=320
PARAM_COUNTS = {
    "separate-y": (6_991_809, None),
    "separate-uv": (6_989_122, None),
    "six-channel": (7_039_814, 7_014_690),
    "proposed-gdn": (7_295_171, 7_306_927),
    "proposed-mixed": (7_221_443, 7_232_809),
    "proposed-prelu": (6_926_531, 6_936_337),
}
SEPARATE_PAIR_PUBLISHED = 14_004_411


def small_spec(arch, n=4, m=6):
    return nw.build_network(arch, n, m)


class TestParamCounts:
    @pytest.mark.parametrize("arch", sorted(PARAM_COUNTS))
    def test_frozen_derived_totals(self, arch):
        spec = nw.build_network(arch, 192, 320)
        assert spec.count_params() == PARAM_COUNTS[arch][0]

    def test_published_totals_within_one_percent(self):
        got = {a: nw.build_network(a, 192, 320).count_params() for a in PARAM_COUNTS}
        pair = got["separate-y"] + got["separate-uv"]
        assert abs(pair - SEPARATE_PAIR_PUBLISHED) / SEPARATE_PAIR_PUBLISHED < 0.01
        for arch, (_, published) in PARAM_COUNTS.items():
            if published is not None:
                assert abs(got[arch] - published) / published < 0.01, arch

    def test_strict_ordering_matches_published(self):
        got = {a: nw.build_network(a, 192, 320).count_params() for a in PARAM_COUNTS}
        pair = got["separate-y"] + got["separate-uv"]
        assert (pair > got["proposed-gdn"] > got["proposed-mixed"]
                > got["six-channel"] > got["proposed-prelu"])

    def test_layer_param_count_formulas(self):
        assert nw.LayerSpec("conv", 3, 8, 5, 2).param_count() == 3 * 8 * 25 + 8
        assert nw.LayerSpec("tconv", 8, 3, 3, 2).param_count() == 8 * 3 * 9 + 3
        assert nw.LayerSpec("gdn", 7, 7).param_count() == 49 + 7
        assert nw.LayerSpec("prelu", 5, 5).param_count() == 5

    def test_count_matches_initialized_params(self):
        for arch in PARAM_COUNTS:
            spec = small_spec(arch)
            params = nw.init_network_params(spec, np.random.default_rng(0))
            total = sum(int(np.prod(p.shape)) for p in params.values())
            assert total == spec.count_params(), arch

    def test_mixed_variant_swaps_exactly_two_sites(self):
        g = nw.build_network("proposed-gdn", 192, 320).count_params()
        m = nw.build_network("proposed-mixed", 192, 320).count_params()
        n = 192
        assert g - m == 2 * (n * n + n) - 2 * n  # two GDNs became two PReLUs


class TestBuilders:
    def test_unknown_arch(self):
        with pytest.raises(ShapeError, match="unknown architecture"):
            nw.build_network("resnet", 4, 6)
        with pytest.raises(ShapeError):
            nw.build_network("six-channel", 0, 6)

    def test_outer_kernels(self):
        uv = small_spec("separate-uv")
        assert uv.ana_trunk[0].k == 3 and uv.syn_trunk[-1].k == 3
        assert uv.ana_trunk[2].k == 5
        y = small_spec("separate-y")
        assert y.ana_trunk[0].k == 5 and y.syn_trunk[-1].k == 5

    def test_branched_structure(self):
        sp = small_spec("proposed-gdn")
        assert sp.branched
        assert sp.ana_luma[0].stride == 2 and sp.ana_chroma[0].stride == 1
        assert sp.ana_trunk[0].k == 1 and sp.ana_trunk[0].cin == 2 * sp.n
        assert sp.syn_trunk[-1].k == 1 and sp.syn_trunk[-1].cout == 2 * sp.n
        assert sp.syn_luma[-1].cout == 1 and sp.syn_chroma[-1].cout == 2

    def test_activation_placement(self):
        gd = small_spec("proposed-gdn")
        assert all(l.kind in ("gdn", "igdn") for _, layers in gd.groups()
                   for l in layers if l.k == 0)
        pr = small_spec("proposed-prelu")
        acts = [l.kind for _, layers in pr.groups() for l in layers if l.k == 0]
        assert acts == ["prelu"] * 10
        mx = small_spec("proposed-mixed")
        assert mx.ana_trunk[1].kind == "prelu"      # right after the 1x1 funnel
        assert mx.syn_trunk[5].kind == "prelu"      # right before the 1x1 fan-out
        others = [l.kind for gname, layers in mx.groups() for i, l in enumerate(layers)
                  if l.k == 0 and not (gname == "ana_trunk" and i == 1)
                  and not (gname == "syn_trunk" and i == 5)]
        assert set(others) == {"gdn", "igdn"}

    def test_divisors(self):
        assert small_spec("separate-y").luma_divisor() == 16
        assert small_spec("separate-uv").luma_divisor() == 32
        assert small_spec("six-channel").latent_factor() == 32
        assert small_spec("proposed-prelu").latent_factor() == 16


class TestGdn:
    @staticmethod
    def ref(x, beta_raw, gamma_raw, inverse):
        beta = np.maximum(beta_raw.reshape(-1) ** 2, nw.GDN_BETA_FLOOR)
        gamma = gamma_raw.reshape(gamma_raw.shape[0], gamma_raw.shape[1]) ** 2
        den = np.sqrt(beta[None, :, None, None]
                      + np.einsum("cd,bdhw->bchw", gamma, x ** 2))
        return x * den if inverse else x / den

    @pytest.mark.parametrize("inverse", [False, True])
    def test_matches_scalar_formula(self, inverse):
        rng = np.random.default_rng(31)
        x = rng.standard_normal((2, 3, 4, 5))
        br = rng.standard_normal((1, 3, 1, 1))
        gr = rng.standard_normal((3, 3, 1, 1)) * 0.4
        out = nw.gdn(ag.Tensor(x), ag.Tensor(br), ag.Tensor(gr), inverse=inverse)
        np.testing.assert_allclose(out.data, self.ref(x, br, gr, inverse),
                                   rtol=1e-10, atol=1e-12)

    def test_unit_init_is_mild(self):
        # beta=1, gamma=0.1I: y = x / sqrt(1 + 0.1 x^2), shrinks gently
        x = np.full((1, 2, 1, 1), 2.0)
        br = np.ones((1, 2, 1, 1))
        gr = np.sqrt(0.1) * np.eye(2).reshape(2, 2, 1, 1)
        out = nw.gdn(ag.Tensor(x), ag.Tensor(br), ag.Tensor(gr))
        np.testing.assert_allclose(out.data, 2.0 / np.sqrt(1.4), rtol=1e-6)

    @pytest.mark.parametrize("inverse", [False, True])
    def test_gradients(self, inverse):
        rng = np.random.default_rng(32)
        x = rng.standard_normal((2, 3, 3, 3))
        br = rng.standard_normal((1, 3, 1, 1)) + 2.0
        gr = rng.standard_normal((3, 3, 1, 1)) * 0.3
        proj = rng.standard_normal(x.shape)
        check_grads(
            lambda t: ag.mean(ag.mul(nw.gdn(t[0], t[1], t[2], inverse=inverse),
                                     ag.Tensor(proj))),
            [x, br, gr])

    def test_beta_floor_keeps_denominator_positive(self):
        x = ag.Tensor(np.zeros((1, 2, 1, 1), np.float32))
        br = ag.Tensor(np.zeros((1, 2, 1, 1), np.float32))
        gr = ag.Tensor(np.zeros((2, 2, 1, 1), np.float32))
        out = nw.gdn(x, br, gr)
        assert np.all(np.isfinite(out.data))


class TestForward:
    @pytest.mark.parametrize("arch,shape,latent_hw", [
        ("separate-y", (1, 1, 64, 48), (4, 3)),
        ("separate-uv", (1, 2, 32, 32), (2, 2)),
        ("six-channel", (1, 6, 32, 32), (2, 2)),
    ])
    def test_single_input_ladder(self, arch, shape, latent_hw):
        spec = small_spec(arch)
        params = nw.init_network_params(spec, np.random.default_rng(1))
        x = ag.Tensor(np.random.default_rng(2).random(shape, np.float64)
                      .astype(np.float32))
        lat = nw.analysis_forward(spec, params, x)
        assert lat.shape == (1, spec.m, *latent_hw)
        rec = nw.synthesis_forward(spec, params, lat)
        assert rec.shape == shape
        assert np.all(np.isfinite(rec.data))

    @pytest.mark.parametrize("arch", ["proposed-gdn", "proposed-mixed", "proposed-prelu"])
    def test_branched_ladder(self, arch):
        spec = small_spec(arch)
        params = nw.init_network_params(spec, np.random.default_rng(3))
        rng = np.random.default_rng(4)
        y = ag.Tensor(rng.random((2, 1, 64, 48)).astype(np.float32))
        uv = ag.Tensor(rng.random((2, 2, 32, 24)).astype(np.float32))
        lat = nw.analysis_forward(spec, params, (y, uv))
        assert lat.shape == (2, spec.m, 4, 3)
        ry, ruv = nw.synthesis_forward(spec, params, lat)
        assert ry.shape == y.shape and ruv.shape == uv.shape

    def test_misaligned_branches_rejected(self):
        spec = small_spec("proposed-gdn")
        params = nw.init_network_params(spec, np.random.default_rng(5))
        y = ag.Tensor(np.zeros((1, 1, 64, 64), np.float32))
        uv = ag.Tensor(np.zeros((1, 2, 16, 16), np.float32))
        with pytest.raises(ShapeError, match="twice"):
            nw.analysis_forward(spec, params, (y, uv))

    def test_indivisible_dims_instruct_padding(self):
        spec = small_spec("separate-y")
        params = nw.init_network_params(spec, np.random.default_rng(6))
        x = ag.Tensor(np.zeros((1, 1, 36, 64), np.float32))  # 36/4 = 9: odd mid-ladder
        with pytest.raises(ShapeError, match="pad"):
            nw.analysis_forward(spec, params, x)

    def test_wrong_channel_count(self):
        spec = small_spec("six-channel")
        params = nw.init_network_params(spec, np.random.default_rng(7))
        with pytest.raises(ShapeError, match="channels"):
            nw.analysis_forward(spec, params, ag.Tensor(np.zeros((1, 3, 32, 32), np.float32)))
        with pytest.raises(ShapeError, match="latent"):
            nw.synthesis_forward(spec, params, ag.Tensor(np.zeros((1, 5, 2, 2), np.float32)))

    def test_init_determinism(self):
        spec = small_spec("proposed-mixed")
        p1 = nw.init_network_params(spec, np.random.default_rng(42))
        p2 = nw.init_network_params(spec, np.random.default_rng(42))
        assert sorted(p1) == sorted(p2)
        for k in p1:
            np.testing.assert_array_equal(p1[k].data, p2[k].data)

    def test_init_statistics(self):
        spec = nw.build_network("separate-y", 32, 48)
        params = nw.init_network_params(spec, np.random.default_rng(8))
        w = params["ana_trunk.2.weight"]  # conv 32->32 5x5
        assert abs(w.data.std() / np.sqrt(2.0 / (32 * 25)) - 1.0) < 0.05
        assert np.all(params["ana_trunk.2.bias"].data == 0)


class TestCheckpoints:
    def test_roundtrip(self, tmp_path):
        spec = small_spec("proposed-prelu")
        params = nw.init_network_params(spec, np.random.default_rng(9))
        p = tmp_path / "model.ckpt"
        nw.save_checkpoint(p, spec.arch, spec.n, spec.m, params)
        arch, n, m, back = nw.load_checkpoint(p)
        assert (arch, n, m) == ("proposed-prelu", 4, 6)
        assert sorted(back) == sorted(params)
        for k in params:
            np.testing.assert_array_equal(back[k].data, params[k].data)
            assert back[k].step == 0 and np.all(back[k].m == 0)

    def test_save_is_deterministic(self, tmp_path):
        spec = small_spec("six-channel")
        params = nw.init_network_params(spec, np.random.default_rng(10))
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        nw.save_checkpoint(a, spec.arch, spec.n, spec.m, params)
        nw.save_checkpoint(b, spec.arch, spec.n, spec.m, params)
        assert a.read_bytes() == b.read_bytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.ckpt"
        p.write_bytes(b"NOPE" + bytes(40))
        with pytest.raises(FormatError, match="not a checkpoint"):
            nw.load_checkpoint(p)

    def test_truncation_detected(self, tmp_path):
        spec = small_spec("separate-uv")
        params = nw.init_network_params(spec, np.random.default_rng(11))
        p = tmp_path / "m.ckpt"
        nw.save_checkpoint(p, spec.arch, spec.n, spec.m, params)
        whole = p.read_bytes()
        p.write_bytes(whole[:len(whole) // 2])
        with pytest.raises(FormatError, match="truncated"):
            nw.load_checkpoint(p)

    def test_trailing_garbage_detected(self, tmp_path):
        spec = small_spec("separate-y")
        params = nw.init_network_params(spec, np.random.default_rng(12))
        p = tmp_path / "m.ckpt"
        nw.save_checkpoint(p, spec.arch, spec.n, spec.m, params)
        p.write_bytes(p.read_bytes() + b"xx")
        with pytest.raises(FormatError, match="trailing"):
            nw.load_checkpoint(p)

    def test_bad_version_and_arch(self, tmp_path):
        import struct
        p = tmp_path / "v.ckpt"
        p.write_bytes(nw.CKPT_MAGIC + struct.pack("<HBII", 9, 1, 4, 6) + struct.pack("<I", 0))
        with pytest.raises(FormatError, match="version"):
            nw.load_checkpoint(p)
        p.write_bytes(nw.CKPT_MAGIC + struct.pack("<HBII", 1, 99, 4, 6) + struct.pack("<I", 0))
        with pytest.raises(FormatError, match="architecture id"):
            nw.load_checkpoint(p)
