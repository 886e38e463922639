import numpy as np
import pytest

from tmfnet import Tensor
from tmfnet.blocks import GlfFusion
from tmfnet.data import Trimap, gen_trimap
from tmfnet.model import (ArchConfig, ArchMismatchError, ConfigError,
                          build_network, count_flops, count_params,
                          load_network, load_weights, save_weights)


def _toy_inputs(rng, n=1, size=32):
    image = Tensor(rng.random((n, 3, size, size)).astype(np.float32))
    trimaps = []
    for _ in range(n):
        alpha = np.zeros((size, size), np.float32)
        alpha[size // 4: 3 * size // 4, size // 4: 3 * size // 4] = 1.0
        trimaps.append(gen_trimap(alpha, 7, 7))
    return image, trimaps


class TestArchConfig:
    def test_json_round_trip(self):
        cfg = ArchConfig.toy_ours()
        again = ArchConfig.from_json(cfg.to_json())
        assert again == cfg
        assert again.fingerprint() == cfg.fingerprint()

    def test_unknown_field_rejected(self):
        with pytest.raises(ConfigError, match="unknown config fields"):
            ArchConfig.from_dict({"encoder": "toy", "bogus": 1})

    def test_tmp_global_requires_tmp_context(self):
        cfg = ArchConfig.toy_ours()
        cfg.decoder_context = "ppm"
        with pytest.raises(ConfigError, match="tmp_output"):
            cfg.validate()

    def test_group_width_divisibility(self):
        cfg = ArchConfig.toy_ours()
        cfg.stage_internal = (50, 32, 16)
        with pytest.raises(ConfigError, match="divisible"):
            cfg.validate()

    def test_even_pool_kernel_rejected(self):
        cfg = ArchConfig.toy_ours()
        cfg.pool_kernels = (30, 17, 11, 5)
        with pytest.raises(ConfigError, match="odd"):
            cfg.validate()

    def test_baseline_twin_shares_widths(self):
        cfg = ArchConfig.toy_ours()
        twin = cfg.baseline_twin()
        assert twin.decoder_context == "ppm"
        assert twin.fusion == ("static", "static", "static")
        assert twin.toy_channels == cfg.toy_channels
        assert twin.stage_out == cfg.stage_out


class TestBuildAndForward:
    def test_ours_and_baseline_build_and_run(self, rng):
        # the pyramid-pooling baseline needs >= 6x6 top features, so it
        # runs at 96 px while the masked-pooling variant also runs at 32
        for cfg, size in ((ArchConfig.toy_ours(), 32),
                          (ArchConfig.toy_baseline(), 96)):
            image, trimaps = _toy_inputs(rng, size=size)
            net = build_network(cfg, seed=0).eval()
            out = net.forward(image, trimaps)
            assert out.shape == (1, 1, size, size)
            assert out.data.min() >= 0.0 and out.data.max() <= 1.0

    def test_mixed_fusion_configs_build_and_run(self, rng):
        image, trimaps = _toy_inputs(rng)
        # dynamic fusion at F1 only, and at F1+F2, echoing the stage ablation
        for fusion in (("glf", "static", "static"), ("glf", "glf", "static"),
                       ("static", "glf", "glf")):
            cfg = ArchConfig.toy_ours()
            cfg.fusion = fusion
            cfg.validate()
            net = build_network(cfg, seed=0).eval()
            assert net.forward(image, trimaps).shape == (1, 1, 32, 32)

    def test_global_source_variants_build_and_run(self, rng):
        image, trimaps = _toy_inputs(rng)
        for source in ("tmp_output", "high_feature_pool", "c5_pool", "none"):
            cfg = ArchConfig.toy_ours()
            cfg.global_source = source
            net = build_network(cfg, seed=0).eval()
            assert net.forward(image, trimaps).shape == (1, 1, 32, 32)

    def test_output_in_unit_range_for_random_weights(self, rng):
        image, trimaps = _toy_inputs(rng)
        for seed in range(3):
            net = build_network(ArchConfig.toy_ours(), seed=seed).eval()
            out = net.forward(image, trimaps).data
            assert out.min() >= 0.0 and out.max() <= 1.0
            assert np.isfinite(out).all()

    def test_eval_forward_bitwise_deterministic(self, rng):
        image, trimaps = _toy_inputs(rng)
        net = build_network(ArchConfig.toy_ours(), seed=1).eval()
        a = net.forward(image, trimaps).data
        b = net.forward(image, trimaps).data
        assert np.array_equal(a, b)

    def test_size_not_divisible_rejected(self, rng):
        net = build_network(ArchConfig.toy_ours(), seed=0)
        image = Tensor(np.zeros((1, 3, 30, 32), dtype=np.float32))
        trimap = Trimap(np.ones((30, 32), np.uint8))
        with pytest.raises(ValueError, match="divisible by 16"):
            net.forward(image, [trimap])

    def test_pre_f1_upsample_halves_c2_gap(self, rng):
        cfg = ArchConfig.toy_ours()
        net = build_network(cfg, seed=0)
        assert net.pre_f1_upsample
        baseline = build_network(cfg.baseline_twin(), seed=0)
        assert not baseline.pre_f1_upsample

    def test_shared_global_feeds_all_stages(self, rng):
        """Perturbing the context output changes kernels at every stage."""
        image, trimaps = _toy_inputs(rng)
        net = build_network(ArchConfig.toy_ours(), seed=2).eval()
        for stage in net.stages:
            stage.record_kernels = True
        net.forward(image, trimaps)
        before = [stage.last_kernels.copy() for stage in net.stages]
        net.context.fuse2.bn.beta.data += 0.5  # shifts the context output
        net.forward(image, trimaps)
        after = [stage.last_kernels for stage in net.stages]
        for b, a in zip(before, after):
            assert not np.array_equal(b, a)


class TestCostAccounting:
    def test_tmp_ppm_param_parity_exact(self):
        ours = build_network(ArchConfig.toy_ours(), seed=0)
        twin = build_network(ArchConfig.toy_ours().baseline_twin(), seed=0)
        p_ours = {r["module"]: r["params"] for r in count_params(ours).rows}
        p_twin = {r["module"]: r["params"] for r in count_params(twin).rows}
        assert p_ours["context"] == p_twin["context"]

    def test_encoders_identical_decoder_differs(self):
        ours = build_network(ArchConfig.toy_ours(), seed=0)
        twin = build_network(ArchConfig.toy_ours().baseline_twin(), seed=0)
        p_ours = {r["module"]: r["params"] for r in count_params(ours).rows}
        p_twin = {r["module"]: r["params"] for r in count_params(twin).rows}
        assert p_ours["encoder"] == p_twin["encoder"]
        assert p_ours["head"] == p_twin["head"]
        # same seed, encoder built first: identical weights
        enc_a = dict(ours.encoder.named_parameters())
        enc_b = dict(twin.encoder.named_parameters())
        assert all(np.array_equal(enc_a[k].data, enc_b[k].data) for k in enc_a)
        assert sum(p_ours.values()) != sum(p_twin.values())

    def test_totals_equal_sum_of_rows(self):
        net = build_network(ArchConfig.toy_ours(), seed=0)
        report = count_flops(net, 64, 64)
        assert report.total_params == sum(r["params"] for r in report.rows)
        assert report.total_macs == sum(r["macs"] for r in report.rows)
        assert report.total_params == net.param_count()

    def test_counts_reproducible(self):
        a = count_flops(build_network(ArchConfig.toy_ours(), seed=0), 128, 128)
        b = count_flops(build_network(ArchConfig.toy_ours(), seed=5), 128, 128)
        assert a.to_dict() == b.to_dict()

    @pytest.mark.slow
    def test_paper_shape_cost_direction(self):
        ours = build_network(ArchConfig.paper_ours(), seed=0)
        base = build_network(ArchConfig.paper_baseline(), seed=0)
        p_ours = count_params(ours).total_params
        p_base = count_params(base).total_params
        assert p_ours < p_base
        f_ours = count_flops(ours, 2048, 2048).total_macs
        f_base = count_flops(base, 2048, 2048).total_macs
        assert f_ours < f_base
        assert f_ours / f_base < 0.95


class TestWeightsIO:
    def test_save_load_forward_bitwise(self, rng, tmp_path):
        image, trimaps = _toy_inputs(rng)
        net = build_network(ArchConfig.toy_ours(), seed=3)
        net.eval()
        want = net.forward(image, trimaps).data
        save_weights(net, tmp_path / "w.tmfw")
        other = build_network(ArchConfig.toy_ours(), seed=99)
        load_weights(other, tmp_path / "w.tmfw")
        other.eval()
        assert np.array_equal(other.forward(image, trimaps).data, want)

    def test_load_network_rebuilds_from_container(self, rng, tmp_path):
        net = build_network(ArchConfig.toy_baseline(), seed=4)
        save_weights(net, tmp_path / "w.tmfw")
        loaded = load_network(tmp_path / "w.tmfw")
        assert loaded.cfg == net.cfg
        for (na, pa), (nb, pb) in zip(net.named_parameters(),
                                      loaded.named_parameters()):
            assert na == nb and np.array_equal(pa.data, pb.data)

    def test_fingerprint_mismatch_rejected(self, tmp_path):
        net = build_network(ArchConfig.toy_ours(), seed=0)
        save_weights(net, tmp_path / "w.tmfw")
        cfg = ArchConfig.toy_ours()
        cfg.head_channels = 4
        other = build_network(cfg, seed=0)
        with pytest.raises(ArchMismatchError, match="fingerprint"):
            load_weights(other, tmp_path / "w.tmfw")

    def test_random_weights_round_trip_exact(self, rng, tmp_path):
        net = build_network(ArchConfig.toy_ours(), seed=7)
        for _, p in net.named_parameters():
            p.data[...] = rng.normal(size=p.shape).astype(np.float32)
        before = {n: p.data.copy() for n, p in net.named_parameters()}
        buffers = {n: b.copy() for n, b in net.named_buffers()}
        save_weights(net, tmp_path / "w.tmfw")
        other = build_network(ArchConfig.toy_ours(), seed=8)
        load_weights(other, tmp_path / "w.tmfw")
        for n, p in other.named_parameters():
            assert np.array_equal(p.data, before[n]), n
        for n, b in other.named_buffers():
            assert np.array_equal(b, buffers[n]), n

    def test_truncated_file_rejected(self, tmp_path):
        net = build_network(ArchConfig.toy_ours(), seed=0)
        save_weights(net, tmp_path / "w.tmfw")
        blob = (tmp_path / "w.tmfw").read_bytes()
        (tmp_path / "cut.tmfw").write_bytes(blob[: len(blob) // 2])
        with pytest.raises(ArchMismatchError):
            load_network(tmp_path / "cut.tmfw")

    def test_not_a_container_rejected(self, tmp_path):
        (tmp_path / "junk.tmfw").write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ArchMismatchError, match="magic"):
            load_network(tmp_path / "junk.tmfw")
