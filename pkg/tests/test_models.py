"""Architecture tests: config space, block structure, and the variant
builders with frozen cost ledgers.

Parameter and MAC totals below were derived by hand from the layer formulas
(conv: out*in/groups*k^2 [+out], separable: in*k^2 + in*out [+out]) before
the builders existed, then frozen. A mismatch means the construction rules
changed, not that the number should be updated.
"""

import numpy as np
import pytest

from nexception import tensor as T
from nexception.errors import ConfigError
from nexception.layers import (Activation, BatchNorm, LayerNorm, SEModule,
                               SeparableConv, StochasticDepth)
from nexception.models import (DOMAINS, ArchConfig, DownsampleBlock,
                               ModelGraph, NexceptionBlock, build_variant,
                               space_cardinality, xception_config)
from nexception.summary import conv_macs, count_flops, count_params

from oracles import finite_diff, relative_grad_error


def _x(shape, seed=0, dtype=np.float32):
    return T.Tensor(np.random.default_rng(seed).normal(size=shape).astype(dtype))


class TestArchConfig:
    def test_defaults_validate(self):
        cfg = ArchConfig().validate()
        assert cfg.kernel_middle == 5 and cfg.pool == "blur_pool"
        assert cfg.expansion == 3

    def test_xception_config(self):
        cfg = xception_config().validate()
        assert cfg.expansion == 1
        assert cfg.norm_position == "after_all_convs"
        assert cfg.act_position == "after_all_convs"

    @pytest.mark.parametrize("field,bad", [
        ("kernel_entry", 4), ("kernel_middle", 11), ("stem", "conv7x7"),
        ("pool", "avg"), ("bottleneck", "inverted4"), ("se", "maybe"),
        ("act_kind", "swish"), ("act_position", "everywhere"),
        ("norm_kind", "group"), ("norm_position", "nowhere"),
    ])
    def test_invalid_choice_names_field(self, field, bad):
        cfg = ArchConfig(**{field: bad})
        with pytest.raises(ConfigError, match=field):
            cfg.validate()

    def test_dict_round_trip(self):
        cfg = ArchConfig(kernel_exit=9, se="off", act_kind="celu")
        assert ArchConfig.from_dict(cfg.to_dict()) == cfg

    def test_from_dict_rejects_unknown_field(self):
        with pytest.raises(ConfigError, match="unknown"):
            ArchConfig.from_dict({"kernel_entry": 3, "depth": 8})

    def test_cardinality_is_product_of_domains(self):
        sizes = [len(v) for v in DOMAINS.values()]
        n = 1
        for s in sizes:
            n *= s
        assert space_cardinality() == n == 196_608
        assert space_cardinality() > 50_000


class TestBlockStructure:
    def test_expansion_widens_first_conv(self):
        blk = NexceptionBlock(32, 3, ArchConfig())
        assert blk.branch.s0.pointwise.weight.data.shape == (96, 32, 1, 1)
        blk = NexceptionBlock(32, 3, ArchConfig(bottleneck="off"))
        assert blk.branch.s0.pointwise.weight.data.shape == (32, 32, 1, 1)

    def _branch_kinds(self, block):
        return [type(m).__name__ for m in block.branch]

    def test_default_placement_single_norm_single_act(self):
        blk = NexceptionBlock(8, 3, ArchConfig())
        kinds = self._branch_kinds(blk)
        # conv -> norm -> act on the widening conv only, SE last.
        assert kinds == ["SeparableConv", "BatchNorm", "Activation",
                         "SeparableConv", "SeparableConv", "SEModule"]
        assert blk.branch.s0.pointwise.bias is None
        assert blk.branch.s3.pointwise.bias is not None
        assert blk.branch.s4.pointwise.bias is not None

    def test_norm_after_every_conv_drops_all_biases(self):
        blk = NexceptionBlock(8, 3, xception_config())
        kinds = self._branch_kinds(blk)
        assert kinds == ["SeparableConv", "BatchNorm", "Activation"] * 3
        for m in blk.branch:
            if isinstance(m, SeparableConv):
                assert m.pointwise.bias is None

    def test_post_block_norm_sits_after_last_conv(self):
        blk = NexceptionBlock(8, 3, ArchConfig(norm_position="post_block",
                                               act_position="none", se="off"))
        kinds = self._branch_kinds(blk)
        assert kinds == ["SeparableConv", "SeparableConv", "SeparableConv",
                         "BatchNorm"]
        assert blk.branch.s0.pointwise.bias is not None
        assert blk.branch.s2.pointwise.bias is None

    def test_pre_block_puts_norm_and_act_first(self):
        blk = NexceptionBlock(8, 3, ArchConfig(norm_position="pre_block",
                                               act_position="pre_block", se="off"))
        kinds = self._branch_kinds(blk)
        assert kinds == ["BatchNorm", "Activation", "SeparableConv",
                         "SeparableConv", "SeparableConv"]

    def test_layer_norm_kind_selected(self):
        blk = NexceptionBlock(8, 3, ArchConfig(norm_kind="layer"))
        assert isinstance(blk.branch.s1, LayerNorm)

    @pytest.mark.parametrize("kernel", [3, 5, 7, 9])
    def test_block_preserves_shape(self, kernel):
        blk = NexceptionBlock(6, kernel, ArchConfig())
        blk.eval()
        out = blk(_x((2, 6, 9, 9)))
        assert out.shape == (2, 6, 9, 9)

    def test_residual_identity_when_branch_silenced(self):
        # Zeroing the last conv makes the branch exactly zero (SE gates a
        # zero map), so the block must return x bit for bit.
        blk = NexceptionBlock(6, 3, ArchConfig())
        blk.eval()
        last = blk.branch.s4
        last.depthwise.weight.data = np.zeros_like(last.depthwise.weight.data)
        last.pointwise.weight.data = np.zeros_like(last.pointwise.weight.data)
        last.pointwise.bias.data = np.zeros_like(last.pointwise.bias.data)
        x = _x((2, 6, 7, 7))
        np.testing.assert_array_equal(blk(x).data, x.data)

    @pytest.mark.parametrize("pool", ["max_pool", "strided_conv", "blur_pool"])
    @pytest.mark.parametrize("hw", [8, 9])
    def test_downsample_halves_with_ceil(self, pool, hw):
        blk = DownsampleBlock(6, 12, 3, ArchConfig(pool=pool))
        blk.eval()
        out = blk(_x((2, 6, hw, hw)))
        assert out.shape == (2, 12, (hw + 1) // 2, (hw + 1) // 2)

    def test_downsample_mid_channel_override(self):
        blk = DownsampleBlock(16, 32, 3, ArchConfig(), mid_ch=16)
        assert blk.branch.s0.pointwise.weight.data.shape[0] == 16
        assert blk.branch.s3.pointwise.weight.data.shape == (32, 16, 1, 1)

    def test_shortcut_norm_only_in_all_convs_mode(self):
        plain = DownsampleBlock(8, 16, 3, ArchConfig())
        assert len(plain.shortcut) == 1
        assert plain.shortcut.s0.bias is not None
        normed = DownsampleBlock(8, 16, 3, xception_config())
        assert [type(m).__name__ for m in normed.shortcut] == ["Conv2d", "BatchNorm"]
        assert normed.shortcut.s0.bias is None

    def test_se_presence_follows_config(self):
        on = NexceptionBlock(8, 3, ArchConfig())
        off = NexceptionBlock(8, 3, ArchConfig(se="off"))
        assert any(isinstance(m, SEModule) for m in on.branch)
        assert not any(isinstance(m, SEModule) for m in off.branch)

    def test_stochastic_depth_requires_rng_in_training(self):
        blk = NexceptionBlock(4, 3, ArchConfig(), drop_prob=0.3)
        blk.train()
        with pytest.raises(ConfigError):
            blk(_x((2, 4, 6, 6)))
        blk.drop.rng = np.random.default_rng(0)
        blk(_x((2, 4, 6, 6)))

    def test_block_gradients_match_finite_differences(self):
        blk = NexceptionBlock(3, 3, ArchConfig(norm_kind="layer"), rng=np.random.default_rng(3))
        blk.astype(np.float64)
        blk.eval()
        x0 = np.random.default_rng(1).normal(size=(2, 3, 5, 5))

        def f(arr):
            return T.mean_all(blk(T.Tensor(arr.copy()))).data.item()

        x = T.Tensor(x0.copy(), requires_grad=True)
        T.backward(T.mean_all(blk(x)))
        assert relative_grad_error(x.grad, finite_diff(f, x0)) < 1e-7


class TestWorkedCostExamples:
    def test_plain_conv_param_formula(self):
        from nexception.layers import Conv2d
        assert sum(p.size() for p in Conv2d(64, 128, 3).own_parameters()) == 73_856

    def test_pointwise_mac_formula(self):
        assert conv_macs(14, 14, 512, 256, 1) == 25_690_112

    def test_patchify_stem_conv_params(self):
        m = build_variant("nexception_t")
        n = m.registry["stem.conv.weight"].size() + m.registry["stem.conv.bias"].size()
        assert n == 1_248


# Hand-derived totals (total includes norm running statistics; trainable
# excludes them) and the exact MAC counts at native resolution.
VARIANT_LEDGER = {
    "nexception_t": dict(total=24_568_992, trainable=24_538_336,
                         macs=4_600_086_016, hw=(224, 224)),
    "nexception_s": dict(total=43_409_127, trainable=43_365_991,
                         macs=8_402_341_216, hw=(224, 224)),
    "nexception_tp": dict(total=26_594_866, trainable=26_550_898,
                          macs=4_319_862_912, hw=(224, 224)),
    "xception": dict(total=22_910_576, trainable=22_856_048,
                     macs=8_470_752_656, hw=(299, 299)),
}


class TestVariants:
    @pytest.mark.parametrize("name", sorted(VARIANT_LEDGER))
    def test_parameter_totals_frozen(self, name):
        want = VARIANT_LEDGER[name]
        r = count_params(build_variant(name))
        assert r.total_params == want["total"]
        assert r.total_params_trainable == want["trainable"]

    @pytest.mark.parametrize("name", sorted(VARIANT_LEDGER))
    def test_mac_totals_frozen(self, name):
        want = VARIANT_LEDGER[name]
        r = count_flops(build_variant(name, input_hw=want["hw"]))
        assert r.total_macs == want["macs"]

    def test_shape_ledgers(self):
        t = build_variant("nexception_t").expected_shapes
        assert t["stem"] == (96, 112, 112)
        assert t["entry3"] == (512, 14, 14)
        assert t["middle"] == (512, 14, 14)
        assert t["exit_ds"] == (1024, 7, 7)
        assert t["exit_convs"] == (2048, 7, 7)
        s = build_variant("nexception_s").expected_shapes
        assert s["entry3"] == (752, 14, 14)
        x = build_variant("xception").expected_shapes
        assert x["stem"] == (64, 150, 150)
        assert x["entry2"] == (256, 38, 38)
        assert x["entry3"] == (728, 19, 19)
        assert x["exit_ds"] == (1024, 10, 10)
        tp = build_variant("nexception_tp").expected_shapes
        assert tp["stem"] == (96, 56, 56)
        assert tp["stage2"] == (192, 28, 28)
        assert tp["stage3"] == (384, 14, 14)
        assert tp["stage4"] == (768, 7, 7)

    def test_reduced_trace_matches_ledger(self):
        m = build_variant("reduced_nas", num_classes=10)
        m.eval()
        out, shapes = m.forward_trace(_x((2, 3, 32, 32)))
        assert shapes == m.expected_shapes
        assert out.shape == (2, 10)

    def test_reduced_respects_config(self):
        cfg = ArchConfig(stem="conv_stem", pool="max_pool", kernel_middle=7,
                         bottleneck="off", se="off", norm_kind="layer")
        m = build_variant("reduced_nas", num_classes=10, config=cfg)
        m.eval()
        out, shapes = m.forward_trace(_x((1, 3, 32, 32)))
        assert shapes == m.expected_shapes
        blk = m.middle.s0
        assert blk.branch.s0.depthwise.weight.data.shape[-1] == 7
        assert blk.branch.s0.pointwise.weight.data.shape[0] == 128

    def test_params_independent_of_resolution(self):
        a = count_params(build_variant("nexception_t"))
        b = count_params(build_variant("nexception_t", input_hw=(160, 160)))
        assert a.total_params == b.total_params

    def test_conv_macs_scale_quadratically_with_input_side(self):
        def split(hw):
            r = count_flops(build_variant("reduced_nas", num_classes=10,
                                          input_hw=(hw, hw)))
            lin = sum(row.macs for row in r.rows if row.kind == "Linear")
            return lin, r.total_macs - lin
        lin32, conv32 = split(32)
        lin64, conv64 = split(64)
        assert lin32 == lin64          # FC and SE cost ignores resolution
        assert conv64 == 4 * conv32

    def test_registry_names_unique_and_assigned(self):
        m = build_variant("reduced_nas", num_classes=10)
        names = list(m.registry)
        assert len(names) == len(set(names))
        assert all(m.registry[n].name == n for n in names)
        assert "stem.conv.weight" in names
        assert any(n.startswith("middle.s0.branch") for n in names)

    def test_head_norm_only_in_patchify_trunk(self):
        tp = build_variant("nexception_tp")
        t = build_variant("nexception_t")
        assert isinstance(tp.head.norm, BatchNorm)
        assert t.head.norm is None

    def test_build_is_seed_deterministic(self):
        a = build_variant("reduced_nas", num_classes=10, seed=7)
        b = build_variant("reduced_nas", num_classes=10, seed=7)
        c = build_variant("reduced_nas", num_classes=10, seed=8)
        ka = a.registry["middle.s0.branch.s0.pointwise.weight"].data.data
        kb = b.registry["middle.s0.branch.s0.pointwise.weight"].data.data
        kc = c.registry["middle.s0.branch.s0.pointwise.weight"].data.data
        np.testing.assert_array_equal(ka, kb)
        assert not np.array_equal(ka, kc)

    def test_config_rejected_for_fixed_variants(self):
        with pytest.raises(ConfigError, match="fixed"):
            build_variant("nexception_t", config=ArchConfig())

    def test_unknown_variant(self):
        with pytest.raises(ConfigError, match="unknown variant"):
            build_variant("nexception_xl")

    def test_seeded_stochastic_depth_is_deterministic(self):
        def run(seed):
            m = build_variant("reduced_nas", num_classes=10, drop_prob=0.5, seed=1)
            m.seed_stochastic_depth(seed)
            m.train()
            return m(_x((2, 3, 32, 32))).data
        np.testing.assert_array_equal(run(3), run(3))
        assert not np.array_equal(run(3), run(4))

    def test_num_classes_reaches_head(self):
        m = build_variant("reduced_nas", num_classes=37)
        assert m.registry["head.fc.weight"].data.shape == (37, 512)
        assert m.expected_shapes["head"] == (37,)
