import json

import numpy as np
import pytest
import torch

from lesionactivity.networks import (
    AttentionGate,
    ConfigurationError,
    Encoder,
    NetworkConfig,
    attention_parameter_counts,
    build_network,
    load_checkpoint,
    save_checkpoint,
    single_path_config,
    two_path_config,
)

SMALL = dict(base_channels=2, input_size=(16, 16, 16))


class TestNetworkConfig:
    def test_invalid_combinations_named(self):
        with pytest.raises(ConfigurationError, match="input_fusion requires paths='single'"):
            NetworkConfig(paths="two", input_fusion="diff", feature_fusion="add")
        with pytest.raises(ConfigurationError, match="feature_fusion requires paths='two'"):
            NetworkConfig(paths="single", input_fusion="stack", feature_fusion="add")
        with pytest.raises(ConfigurationError, match="attention requires paths='two'"):
            single_path_config("diff", attention="A", attention_scales=("s4",))
        with pytest.raises(ConfigurationError, match="needs attention_scales"):
            two_path_config("add", attention="C")
        with pytest.raises(ConfigurationError, match="attention_scales given"):
            two_path_config("add", attention_scales=("s4",))
        with pytest.raises(ConfigurationError, match="within"):
            two_path_config("add", "C", ("s1",))
        with pytest.raises(ConfigurationError, match="divisible by 8"):
            two_path_config("add", input_size=(20, 16, 16))

    def test_location_aliases(self):
        cfg = two_path_config("stack", "C", ("16^3",))
        assert cfg.attention_scales == ("s4",)
        cfg = two_path_config("stack", "B", ("64^3", "32^3", "16^3"))
        assert cfg.attention_scales == ("s2", "s3", "s4")

    def test_channel_and_spatial_ladder(self):
        cfg = two_path_config("add", base_channels=32, input_size=(128, 128, 128))
        assert [cfg.channels_at(i) for i in (1, 2, 3, 4)] == [32, 64, 128, 256]
        assert cfg.spatial_at(4) == (16, 16, 16)
        assert cfg.spatial_at(2) == (64, 64, 64)

    def test_json_round_trip(self):
        cfg = two_path_config("diff", "B", ("s3", "s4"), base_channels=8, input_size=(32, 32, 32))
        assert NetworkConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    def test_describe(self):
        assert two_path_config("stack", "C", ("s4",)).describe() == "TP Stack C @s4"
        assert single_path_config("none").describe() == "STP"
        assert single_path_config("diff").describe() == "SP Diff"


class TestShapes:
    @pytest.mark.parametrize("fusion,channels", [("none", 1), ("diff", 1), ("add", 1), ("stack", 2)])
    def test_single_path_output_shape(self, fusion, channels):
        net = build_network(single_path_config(fusion, **SMALL), seed=0)
        x = torch.randn(1, channels, 16, 16, 16)
        with torch.no_grad():
            y = net(x)
        assert y.shape == (1, 1, 16, 16, 16)
        assert float(y.min()) >= 0.0 and float(y.max()) <= 1.0

    @pytest.mark.parametrize("size", [(16, 16, 16), (32, 16, 24)])
    @pytest.mark.parametrize("fusion", ["diff", "add", "stack"])
    def test_two_path_output_shape(self, fusion, size):
        net = build_network(two_path_config(fusion, **SMALL), seed=0)
        bl = torch.randn(1, 1, *size)
        fu = torch.randn(1, 1, *size)
        with torch.no_grad():
            y = net(bl, fu)
        assert y.shape == (1, 1, *size)
        assert float(y.min()) >= 0.0 and float(y.max()) <= 1.0

    def test_large_inputs_preserve_shape(self):
        net = build_network(two_path_config("stack", **SMALL), seed=0)
        for size in (64, 128):
            bl = torch.randn(1, 1, size, size, size)
            fu = torch.randn(1, 1, size, size, size)
            with torch.no_grad():
                y = net(bl, fu)
            assert y.shape == (1, 1, size, size, size)

    def test_bad_spatial_size_rejected(self):
        net = build_network(two_path_config("add", **SMALL), seed=0)
        x = torch.randn(1, 1, 20, 20, 20)
        with pytest.raises(ValueError, match="divisible by 8"):
            net(x, x)

    def test_mismatched_pair_rejected(self):
        net = build_network(two_path_config("add", **SMALL), seed=0)
        with pytest.raises(ValueError, match="shapes differ"):
            net(torch.randn(1, 1, 16, 16, 16), torch.randn(1, 1, 24, 24, 24))

    def test_wrong_channel_count_rejected(self):
        net = build_network(single_path_config("stack", **SMALL), seed=0)
        with pytest.raises(ValueError, match="channel"):
            net(torch.randn(1, 1, 16, 16, 16))


class TestAttentionGate:
    def test_zero_weights_give_three_halves(self):
        for method in ("A", "B", "C"):
            gate = AttentionGate(method, 8)
            for p in gate.parameters():
                torch.nn.init.zeros_(p)
            f_bl = torch.randn(2, 8, 4, 4, 4)
            f_fu = torch.randn(2, 8, 4, 4, 4)
            o_bl, o_fu = gate(f_bl, f_fu)
            assert float((o_bl - 1.5 * f_bl).abs().max()) <= 1e-6
            assert float((o_fu - 1.5 * f_fu).abs().max()) <= 1e-6

    def test_large_negative_bias_passes_through(self):
        gate = AttentionGate("B", 4)
        with torch.no_grad():
            torch.nn.init.zeros_(gate.gate_bl.weight)
            torch.nn.init.zeros_(gate.gate_fu.weight)
            gate.gate_bl.bias.fill_(-20.0)
            gate.gate_fu.bias.fill_(-20.0)
        f_bl = torch.randn(1, 4, 4, 4, 4)
        f_fu = torch.randn(1, 4, 4, 4, 4)
        o_bl, o_fu = gate(f_bl, f_fu)
        assert float((o_bl - f_bl).abs().max()) <= 1e-6
        assert float((o_fu - f_fu).abs().max()) <= 1e-6

    def test_method_c_maps_bit_identical(self):
        torch.manual_seed(3)
        gate = AttentionGate("C", 6)
        a_bl, a_fu = gate.attention_maps(torch.randn(1, 6, 5, 5, 5), torch.randn(1, 6, 5, 5, 5))
        assert torch.equal(a_bl, a_fu)

    def test_residual_floor_bounds_output(self):
        torch.manual_seed(4)
        for method in ("A", "B", "C"):
            gate = AttentionGate(method, 4)
            f_bl = torch.randn(1, 4, 6, 6, 6)
            f_fu = torch.randn(1, 4, 6, 6, 6)
            o_bl, o_fu = gate(f_bl, f_fu)
            assert bool((o_bl.abs() <= 2 * f_bl.abs() + 1e-6).all())
            assert bool((o_fu.abs() <= 2 * f_fu.abs() + 1e-6).all())

    def test_parameter_count_formulas(self):
        for C in (2, 8, 256):
            n_a = sum(p.numel() for p in AttentionGate("A", C).parameters())
            n_b = sum(p.numel() for p in AttentionGate("B", C).parameters())
            n_c = sum(p.numel() for p in AttentionGate("C", C).parameters())
            assert n_a == 2 * (C * C + C)
            assert n_b == 2 * (2 * C * C + C)
            assert n_c == 2 * C * C + C
            assert n_b == 2 * n_c

    def test_counts_halved_at_every_scale_in_network(self):
        base = dict(base_channels=4, input_size=(32, 32, 32))
        net_b = build_network(two_path_config("stack", "B", ("s2", "s3", "s4"), **base), seed=0)
        net_c = build_network(two_path_config("stack", "C", ("s2", "s3", "s4"), **base), seed=0)
        counts_b = attention_parameter_counts(net_b)
        counts_c = attention_parameter_counts(net_c)
        for scale in ("s2", "s3", "s4"):
            assert counts_b[scale] == 2 * counts_c[scale]

    def test_channel_mismatch_is_configuration_error(self):
        gate = AttentionGate("A", 4)
        with pytest.raises(ConfigurationError, match="channels"):
            gate(torch.randn(1, 8, 4, 4, 4), torch.randn(1, 8, 4, 4, 4))


class TestTwoPathStructure:
    def test_fused_diff_equals_separate_encoder_runs(self):
        # without attention, the fused bottleneck is exactly
        # encoder_fu(fu) - encoder_bl(bl), both run in isolation
        net = build_network(two_path_config("diff", **SMALL), seed=5)
        bl = torch.randn(1, 1, 16, 16, 16)
        fu = torch.randn(1, 1, 16, 16, 16)
        with torch.no_grad():
            feats_b, feats_f = net.encode_pair(bl, fu)
            fused = net.fuse(feats_b[3], feats_f[3])
            solo_b = net.encoder_bl(bl)
            solo_f = net.encoder_fu(fu)
        assert torch.equal(fused, solo_f[3] - solo_b[3])

    def test_encoders_do_not_share_parameters(self):
        net = build_network(two_path_config("add", **SMALL), seed=6)
        fu = torch.randn(1, 1, 16, 16, 16)
        with torch.no_grad():
            before = [t.clone() for t in net.encoder_fu(fu)]
            net.encoder_bl.stem.weight.add_(1.0)  # perturb the other path
            after = net.encoder_fu(fu)
        for b, a in zip(before, after):
            assert torch.equal(b, a)

    def test_attention_gate_feature_sizes(self):
        cfg = two_path_config("add", "C", ("s4",), base_channels=4, input_size=(32, 32, 32))
        net = build_network(cfg, seed=7)
        bl = torch.randn(1, 1, 32, 32, 32)
        fu = torch.randn(1, 1, 32, 32, 32)
        with torch.no_grad():
            maps = net.attention_map_values(bl, fu)
        a_bl, a_fu = maps["s4"]
        # scale s4: spatial / 8, channels * 8, full per-channel map
        assert a_bl.shape == (1, 32, 4, 4, 4)
        assert torch.equal(a_bl, a_fu)

    def test_attention_maps_in_unit_interval(self):
        cfg = two_path_config("stack", "A", ("s2", "s4"), **SMALL)
        net = build_network(cfg, seed=8)
        with torch.no_grad():
            maps = net.attention_map_values(torch.randn(1, 1, 16, 16, 16), torch.randn(1, 1, 16, 16, 16))
        assert set(maps) == {"s2", "s4"}
        for a_bl, a_fu in maps.values():
            for a in (a_bl, a_fu):
                assert float(a.min()) > 0.0 and float(a.max()) < 1.0


class TestGradients:
    def test_analytic_gradients_match_fine_finite_differences(self):
        # small step keeps ReLU-kink bias negligible; the pinned coarse-step
        # variant lives in the acceptance suite
        from lesionactivity.training import dice_loss

        net = build_network(two_path_config("stack", "C", ("s4",), **SMALL), seed=3).double()
        torch.manual_seed(7)
        bl = torch.randn(1, 1, 16, 16, 16, dtype=torch.float64)
        fu = torch.randn(1, 1, 16, 16, 16, dtype=torch.float64)
        target = (torch.rand(1, 1, 16, 16, 16, dtype=torch.float64) < 0.1).double()
        loss = dice_loss(net(bl, fu), target)
        loss.backward()
        params = list(net.parameters())
        sizes = np.array([p.numel() for p in params])
        cum = np.cumsum(sizes)
        rng = np.random.default_rng(0)
        h = 1e-5
        for flat in rng.choice(int(cum[-1]), size=8, replace=False):
            i = int(np.searchsorted(cum, flat, side="right"))
            j = int(flat - (cum[i - 1] if i else 0))
            p = params[i]
            analytic = float(p.grad.reshape(-1)[j])
            with torch.no_grad():
                orig = float(p.reshape(-1)[j])
                p.reshape(-1)[j] = orig + h
                up = float(dice_loss(net(bl, fu), target))
                p.reshape(-1)[j] = orig - h
                down = float(dice_loss(net(bl, fu), target))
                p.reshape(-1)[j] = orig
            fd = (up - down) / (2 * h)
            assert abs(analytic - fd) <= 1e-4 * max(abs(analytic), abs(fd), 1e-6)

    def test_gradients_finite_for_all_parameters(self):
        from lesionactivity.training import dice_loss

        net = build_network(two_path_config("add", **SMALL), seed=9)
        loss = dice_loss(
            net(torch.randn(1, 1, 16, 16, 16), torch.randn(1, 1, 16, 16, 16)),
            (torch.rand(1, 1, 16, 16, 16) < 0.2).float(),
        )
        loss.backward()
        for name, p in net.named_parameters():
            assert p.grad is not None, name
            assert bool(torch.isfinite(p.grad).all()), name


class TestCheckpoints:
    def test_round_trip_is_bit_identical(self, tmp_path):
        cfg = two_path_config("stack", "C", ("s4",), **SMALL)
        net = build_network(cfg, seed=11)
        net.eval()
        path = save_checkpoint(net, tmp_path / "model.pt", epoch=42)
        restored, payload = load_checkpoint(path)
        assert payload["epoch"] == 42
        assert restored.config == cfg
        torch.manual_seed(0)
        for _ in range(5):
            bl = torch.randn(1, 1, 16, 16, 16)
            fu = torch.randn(1, 1, 16, 16, 16)
            with torch.no_grad():
                a = net(bl, fu)
                b = restored(bl, fu)
            assert float((a - b).abs().max()) == 0.0

    def test_sidecar_echoes_config(self, tmp_path):
        cfg = single_path_config("diff", **SMALL)
        net = build_network(cfg, seed=12)
        save_checkpoint(net, tmp_path / "m.pt", epoch=7)
        sidecar = json.loads((tmp_path / "m.pt.json").read_text())
        assert sidecar["config"] == cfg.to_dict()
        assert sidecar["epoch"] == 7

    def test_encoder_module_reusable_standalone(self):
        cfg = two_path_config("add", **SMALL)
        enc = Encoder(cfg, 1)
        feats = enc(torch.randn(1, 1, 16, 16, 16))
        assert [f.shape[1] for f in feats] == [2, 4, 8, 16]
        assert [f.shape[2] for f in feats] == [16, 8, 4, 2]
