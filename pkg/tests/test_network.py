import itertools

import numpy as np
import pytest

from adaptive_depth import functional as F
from adaptive_depth import layers, tensor
from adaptive_depth.layers import SwitchableNorm
from adaptive_depth.network import (
    SkipConfig,
    build_from_config,
    build_resnet_tiny,
    build_vit_tiny,
    enumerate_subnets,
    flops,
    param_count,
    split_stage,
    stage_layout,
)
from adaptive_depth.tensor import no_grad

# Row order of the per-sub-network FLOPs/accuracy table for a 4-stage model.
TABLE_ORDER = (
    "FFFF TFFF FTFF FFTF FFFT TTFF TFTF TFFT FTTF FTFT FFTT TTTF TTFT TFTT FTTT TTTT".split()
)


# -- skip configs ---------------------------------------------------------------
def test_skip_config_round_trip():
    cfg = SkipConfig.parse("tFfT", 4)
    assert str(cfg) == "TFFT"
    assert cfg.num_skipped == 2
    assert str(SkipConfig.supernet(3)) == "FFF"
    assert str(SkipConfig.basenet(2)) == "TT"


@pytest.mark.parametrize("bad", ["", "TFX", "TT F"])
def test_skip_config_rejects_bad_characters(bad):
    with pytest.raises(ValueError):
        SkipConfig.parse(bad)


def test_skip_config_length_error():
    with pytest.raises(ValueError, match="length 3"):
        SkipConfig.parse("TTF", 4)


def test_enumerate_one_stage():
    assert [str(c) for c in enumerate_subnets(1)] == ["F", "T"]


def test_enumerate_four_stages_follows_table_order():
    assert [str(c) for c in enumerate_subnets(4)] == list(TABLE_ORDER)


@pytest.mark.parametrize("n", [1, 2, 3, 5])
def test_enumerate_is_the_power_set(n):
    got = [c.flags for c in enumerate_subnets(n)]
    assert len(got) == len(set(got)) == 2**n
    assert set(got) == set(itertools.product((False, True), repeat=n))
    counts = [sum(f) for f in got]
    assert counts == sorted(counts)


# -- stage splits ---------------------------------------------------------------
def test_default_split_layout():
    net = build_resnet_tiny(10)
    assert stage_layout(net) == [(2, 1), (2, 2), (3, 3), (2, 1)]


def test_more_skippable_layout():
    net = build_resnet_tiny(10, mandatory_ratio="more_skippable")
    assert stage_layout(net) == [(1, 2), (1, 3), (2, 4), (1, 2)]


def test_more_mandatory_layout():
    net = build_resnet_tiny(10, mandatory_ratio="more_mandatory")
    assert stage_layout(net) == [(2, 1), (3, 1), (4, 2), (2, 1)]


def test_even_split():
    assert [split_stage(2) for _ in range(4)] == [(1, 1)] * 4


def test_split_needs_a_mandatory_block():
    with pytest.raises(ValueError):
        split_stage(0)
    with pytest.raises(ValueError):
        split_stage(3, "sideways")


def test_blocks_before_the_split_are_the_switchable_ones():
    net = build_resnet_tiny(10)
    for s, i, skippable, blk in net.blocks():
        assert blk.uses_switchable_norm is (not skippable)
        if i == 0 and s > 0:
            assert blk.downsamples and not skippable
        if skippable:
            assert not blk.downsamples


def test_vit_layouts():
    assert stage_layout(build_vit_tiny(10, depth=12, groups=4)) == [(2, 1)] * 4
    assert stage_layout(build_vit_tiny(10, depth=8, groups=4)) == [(1, 1)] * 4
    assert stage_layout(build_vit_tiny(10, depth=12, groups=4, variant="last_two_skippable")) == [(1, 2)] * 4


def test_vit_indivisible_depth():
    with pytest.raises(ValueError):
        build_vit_tiny(10, depth=10, groups=4)


# -- forward ----------------------------------------------------------------------
def test_all_configs_produce_logits(small_resnet, rng):
    net = small_resnet()
    x = rng.normal(size=(2, 3, 16, 16)).astype(np.float32)
    with no_grad():
        for cfg in enumerate_subnets(4):
            logits, feats = net(x, cfg)
            assert logits.shape == (2, 4)
            assert len(feats) == 4


def test_vit_all_configs_produce_logits(small_vit, rng):
    net = small_vit()
    x = rng.normal(size=(2, 3, 16, 16)).astype(np.float32)
    with no_grad():
        for cfg in enumerate_subnets(4):
            assert net(x, cfg)[0].shape == (2, 4)


def test_skip_length_mismatch(small_resnet):
    with pytest.raises(ValueError):
        small_resnet()(np.zeros((1, 3, 16, 16), np.float32), "TTF")


def test_supernet_equals_basenet_when_skippable_branches_are_zero(small_resnet, rng):
    net = small_resnet()
    for _, _, skippable, blk in net.blocks():
        if skippable:
            blk.norm2.gamma.data[:] = 0.0
            blk.norm2.beta.data[:] = 0.0
    for module in _modules(net):
        if isinstance(module, SwitchableNorm):
            module.gamma[1].data[:] = module.gamma[0].data
            module.beta[1].data[:] = module.beta[0].data
    x = rng.normal(size=(3, 3, 16, 16)).astype(np.float32)
    with no_grad():
        a = net(x, "FFFF")[0].data
        b = net(x, "TTTT")[0].data
    assert np.array_equal(a, b)


def test_skip_locality(small_resnet, rng):
    net = small_resnet()
    x = rng.normal(size=(2, 3, 16, 16)).astype(np.float32)
    with no_grad():
        _, ref = net(x, "FFFF")
        _, alt = net(x, "FFTF")
    for s in range(2):
        assert np.array_equal(ref[s].data, alt[s].data)
    assert not np.array_equal(ref[2].data, alt[2].data)


def test_skipped_stage_output_is_last_mandatory_output(small_resnet, rng):
    net = small_resnet(stage_blocks=(2, 3, 2, 2))  # stage 1: two mandatory, one skippable
    x = rng.normal(size=(2, 3, 16, 16)).astype(np.float32)
    outputs = {}

    def probe(stage, block, skippable, h, fh):
        if h.shape == fh.shape:
            outputs[(stage, block)] = h.data + fh.data

    with no_grad():
        _, feats = net(x, "FTFF", probe=probe)
    assert (1, 2) not in outputs  # the skippable block of stage 1 never ran
    np.testing.assert_allclose(feats[1].data, outputs[(1, 1)], rtol=1e-6, atol=1e-6)


def test_parameters_are_shared_between_configs(small_resnet, rng):
    net = small_resnet()
    x = rng.normal(size=(1, 3, 16, 16)).astype(np.float32)
    with no_grad():
        before = {c: net(x, c)[0].data.copy() for c in ("FFFF", "TTTT")}
        net.stages[0].mandatory[0].conv1.weight.data *= 2.0
        for c in ("FFFF", "TTTT"):
            assert not np.array_equal(before[c], net(x, c)[0].data)


def _modules(module):
    yield module
    for _, child in module._children():
        items = child if isinstance(child, (list, tuple)) else [child]
        for item in items:
            if isinstance(item, layers.Module):
                yield from _modules(item)


# -- FLOPs ------------------------------------------------------------------------
def traced_macs(net, skip, monkeypatch):
    """Count MACs of every conv and matmul actually executed on one sample."""
    total = [0]
    real_conv, real_mm = F.conv2d, tensor.matmul

    def conv(x, w, b=None, stride=1, padding=0):
        out = real_conv(x, w, b, stride, padding)
        total[0] += int(np.prod(out.shape[1:])) * int(np.prod(w.shape[1:]))
        return out

    def mm(a, b):
        out = real_mm(a, b)
        total[0] += int(np.prod(out.shape[1:-1] if a.ndim > 2 else ())) * a.shape[-1] * b.shape[-1]
        return out

    monkeypatch.setattr(F, "conv2d", conv)
    monkeypatch.setattr(F, "matmul", mm)
    monkeypatch.setattr(layers, "matmul", mm)
    c, h, w = net.input_shape
    with no_grad():
        net(np.zeros((1, c, h, w), np.float32), skip)
    monkeypatch.undo()
    return total[0]


def test_single_conv_macs():
    assert layers.Conv2d(1, 1, 3, padding=1).macs(8, 8) == 576


def test_flops_match_traced_oracle_resnet(monkeypatch):
    net = build_resnet_tiny(10)
    for cfg in enumerate_subnets(4):
        assert flops(net, cfg) == traced_macs(net, cfg, monkeypatch)


def test_flops_match_traced_oracle_vit(monkeypatch):
    net = build_vit_tiny(10)
    for cfg in ("FFFF", "TFTF", "TTTT"):
        assert flops(net, cfg) == traced_macs(net, cfg, monkeypatch)


@pytest.mark.parametrize("builder", [lambda: build_resnet_tiny(10), lambda: build_vit_tiny(10)])
def test_flops_additivity(builder):
    net = builder()
    table = net.cost_table()
    full = flops(net, "FFFF")
    for cfg in enumerate_subnets(net.n_stages):
        removed = sum(table["stages"][s][1] for s, skipped in enumerate(cfg) if skipped)
        assert flops(net, cfg) == full - removed


def test_skipping_first_stage_saves_its_skippable_cost():
    net = build_resnet_tiny(10)
    stage0_skippable = 0
    h = w = 32
    for blk in net.stages[0].mandatory:
        _, h, w = blk.macs(h, w)
    for blk in net.stages[0].skippable:
        m, h, w = blk.macs(h, w)
        stage0_skippable += m
    assert flops(net, "TFFF") - flops(net, "FFFF") == -stage0_skippable


def test_flops_monotone_in_skips():
    net = build_resnet_tiny(10)
    for a in enumerate_subnets(4):
        for b in enumerate_subnets(4):
            if all(x <= y for x, y in zip(a, b)):  # b skips a superset of a
                assert flops(net, b) <= flops(net, a)
    assert flops(net, "TTTT") < flops(net, "FFFF")


def test_reference_flops():
    net = build_resnet_tiny(10)
    assert flops(net, "FFFF") == 72_795_392
    assert flops(net, "TTTT") == 39_765_248


# -- parameter counts ------------------------------------------------------------------
def test_whole_count_covers_every_config():
    net = build_resnet_tiny(10)
    whole = param_count(net)
    assert whole == sum(p.size for p in net.parameters())
    for cfg in enumerate_subnets(4):
        assert param_count(net, cfg) <= whole


def test_second_norm_set_overhead_below_one_percent():
    net = build_resnet_tiny(10)
    extra = 0
    for module in _modules(net):
        if isinstance(module, SwitchableNorm):
            extra += module.gamma[1].size + module.beta[1].size
    whole = param_count(net)
    assert whole - extra == param_count(net, "FFFF")
    assert extra / whole < 0.01


def test_build_from_config_round_trip(rng):
    net = build_resnet_tiny(4, stage_blocks=(1, 2), widths=(4, 8), image_size=8, seed=5)
    twin = build_from_config(net.config)
    assert stage_layout(twin) == stage_layout(net)
    for (k, a), (_, b) in zip(sorted(net.state_dict().items()), sorted(twin.state_dict().items())):
        assert np.array_equal(a, b), k
