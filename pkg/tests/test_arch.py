import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings, strategies as st

from complexity_prune.arch import (
    ArchitectureSpec,
    LayerSpec,
    count_flops,
    count_params,
    flops_reduction,
    group_closure,
    pruned_spec,
)
from complexity_prune.errors import ContractError
from complexity_prune.models import PlainCNN, ResNet


def one_conv_spec():
    conv = LayerSpec("conv", "conv", [], 2, 4, 3, 1, (8, 8), (8, 8), prunable=True, filter_start=0)
    return ArchitectureSpec(2, (8, 8), 4, [conv])


def two_conv_spec():
    return ArchitectureSpec(1, (8, 8), 2, [
        LayerSpec("c1", "conv", [], 1, 4, 3, 1, (8, 8), (8, 8), prunable=True, filter_start=0),
        LayerSpec("r1", "act", ["c1"], 4, 4, in_hw=(8, 8), out_hw=(8, 8)),
        LayerSpec("c2", "conv", ["r1"], 4, 2, 3, 1, (8, 8), (8, 8), prunable=True, filter_start=4),
    ])


def test_conv_hand_count():
    spec = one_conv_spec()
    assert count_flops(spec) == 2 * 3 * 3 * 4 * 8 * 8 == 4608
    assert count_flops(spec, [1, 0, 1, 0]) == 2304
    assert count_flops(spec, [0, 0, 0, 0]) == 0


def test_two_layer_reduction_rate():
    spec = two_conv_spec()
    # c1: 1*9*4*64 = 2304, c2: 4*9*2*64 = 4608
    assert count_flops(spec) == 6912
    mask = [1, 1, 1, 0, 1, 1]
    # c1: 1*9*3*64 = 1728, c2: 3*9*2*64 = 3456
    assert count_flops(spec, mask) == 5184
    assert flops_reduction(count_flops(spec), count_flops(spec, mask)) == pytest.approx(0.25, abs=1e-15)


def test_non_binary_mask_rejected():
    with pytest.raises(ContractError):
        count_flops(one_conv_spec(), [1, 0.5, 1, 0])
    with pytest.raises(ContractError):
        count_flops(one_conv_spec(), [1, 1, 1])


def _hook_flops(model, x, skip_zero_channels=None):
    """Brute-force MAC count from the real modules via forward hooks."""
    total = 0

    def conv_hook(mod, inp, out):
        nonlocal total
        total += mod.in_channels * mod.kernel_size[0] * mod.kernel_size[1] * out.numel() // out.shape[0]

    def fc_hook(mod, inp, out):
        nonlocal total
        total += mod.in_features * mod.out_features

    hooks = []
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            hooks.append(m.register_forward_hook(conv_hook))
        elif isinstance(m, nn.Linear):
            hooks.append(m.register_forward_hook(fc_hook))
    with torch.no_grad():
        model.eval()(x)
    for h in hooks:
        h.remove()
    return total


@pytest.mark.parametrize("model", [
    PlainCNN(1, 10, (4, 8, 8, 16), 16),
    PlainCNN(3, 5, (6,), 12),
    ResNet(3, 10, (8, 16, 32), 1),
    ResNet(3, 10, (8, 16, 32), 2, prune_residual=True),
])
def test_spec_flops_and_params_match_modules(model):
    spec = model.arch_spec()
    spec.validate()
    x = torch.zeros(1, model.in_channels, *model.input_hw)
    assert count_flops(spec) == _hook_flops(model, x)
    assert count_params(spec) == sum(p.numel() for p in model.parameters())
    assert spec.n_filters == model.n_filters


def test_json_round_trip(tmp_path):
    spec = ResNet(prune_residual=True).arch_spec()
    spec.to_json(tmp_path / "spec.json")
    back = ArchitectureSpec.from_json(tmp_path / "spec.json")
    assert back == spec
    assert ArchitectureSpec.from_json(spec.to_json()) == spec


def test_validate_rejects_broken_specs():
    spec = two_conv_spec()
    spec.layers[2].in_channels = 3
    with pytest.raises(ContractError, match="expects 3 channels"):
        spec.validate()

    spec = two_conv_spec()
    spec.layers[2].filter_start = 3
    with pytest.raises(ContractError, match="contiguous"):
        spec.validate()

    spec = two_conv_spec()
    spec.channel_groups = [[0, 1], [1, 2]]
    with pytest.raises(ContractError, match="more than one channel group"):
        spec.validate()


SPECS = [PlainCNN(1, 10, (4, 8, 8, 16), 16).arch_spec(),
         ResNet(3, 10, (8, 16, 32), 2).arch_spec(),
         ResNet(3, 10, (8, 16, 32), 2, prune_residual=True).arch_spec()]


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(SPECS), st.data())
def test_flops_monotone_under_filter_removal(spec, data):
    n = spec.n_filters
    keep = np.array(data.draw(st.lists(st.booleans(), min_size=n, max_size=n)))
    k = data.draw(st.integers(0, n - 1))
    fewer = keep.copy()
    fewer[k] = False
    assert count_flops(spec, fewer.astype(float)) <= count_flops(spec, keep.astype(float))
    assert count_params(spec, fewer.astype(float)) <= count_params(spec, keep.astype(float))


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(SPECS), st.data())
def test_group_closure_gives_consistent_residual_adds(spec, data):
    n = spec.n_filters
    keep = np.array(data.draw(st.lists(st.booleans(), min_size=n, max_size=n)))
    closed = group_closure(spec, keep)
    for g in spec.channel_groups:
        assert closed[g].all() or not closed[g].any()
    new = pruned_spec(spec, closed)
    new.validate()
    for l in new.layers:
        if l.kind == "add":
            assert all(new.layer(i).out_channels == l.in_channels for i in l.inputs)
    assert count_flops(new) == count_flops(spec, closed.astype(float))


def test_unclosed_mask_breaks_residual_add():
    spec = ResNet(3, 10, (8, 16, 32), 1, prune_residual=True).arch_spec()
    keep = np.ones(spec.n_filters, dtype=bool)
    keep[spec.layer("block0.conv2").filter_start] = False
    with pytest.raises(ContractError):
        pruned_spec(spec, keep).validate()
