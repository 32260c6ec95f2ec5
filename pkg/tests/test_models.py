import json
from pathlib import Path

import numpy as np
import pytest
import torch

from complexity_prune.arch import count_flops, group_closure
from complexity_prune.errors import ContractError, InputError
from complexity_prune.models import PlainCNN, ResNet, build_model, forward_baseline, forward_masked
from complexity_prune.prune import binarize, surgery

GOLDEN = json.loads((Path(__file__).parent / "golden" / "golden.json").read_text())


def randomize_bn(model, seed=0):
    """Give batch-norm layers non-trivial statistics so equivalence checks are meaningful."""
    g = torch.Generator().manual_seed(seed)
    for m in model.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            n = m.num_features
            m.running_mean.copy_(torch.randn(n, generator=g))
            m.running_var.copy_(torch.rand(n, generator=g) + 0.5)
            m.weight.data.copy_(torch.randn(n, generator=g))
            m.bias.data.copy_(torch.randn(n, generator=g))
    return model.eval()


def test_duplicate_images_give_identical_logits():
    torch.manual_seed(0)
    m = randomize_bn(PlainCNN(1, 10, (4, 8), 8))
    x = torch.randn(1, 1, 8, 8).repeat(3, 1, 1, 1)
    out = forward_baseline(m, x)
    assert torch.equal(out[0], out[1]) and torch.equal(out[1], out[2])


def test_zero_input_zero_logits():
    m = PlainCNN(1, 10, (4, 8, 8, 8), 16).eval()
    m.fc.bias.data.zero_()
    assert torch.count_nonzero(forward_baseline(m, torch.zeros(2, 1, 16, 16))) == 0


def test_golden_logits():
    torch.manual_seed(GOLDEN["plain_cnn_logits"]["seed"])
    m = PlainCNN(1, 5, (4, 8), 8).eval()
    x = torch.linspace(-1, 1, 64).view(1, 1, 8, 8)
    np.testing.assert_allclose(forward_baseline(m, x)[0].numpy(),
                               GOLDEN["plain_cnn_logits"]["values"], rtol=1e-5, atol=1e-7)


def test_input_shape_checked():
    m = PlainCNN(1, 10, (4,), 8)
    with pytest.raises(InputError):
        forward_baseline(m, torch.zeros(1, 3, 8, 8))
    with pytest.raises(InputError):
        forward_baseline(m, torch.zeros(1, 1, 9, 8))


@pytest.mark.parametrize("model", [PlainCNN(1, 10, (4, 8, 8, 8), 16), ResNet(3, 10, (8, 16, 16), 1),
                                   ResNet(3, 10, (8, 16, 16), 1, prune_residual=True)])
def test_all_ones_mask_is_identity(model):
    torch.manual_seed(0)
    randomize_bn(model)
    x = torch.randn(4, model.in_channels, *model.input_hw)
    with torch.no_grad():
        masked = forward_masked(model, torch.ones(model.n_filters), x)
    assert (masked - forward_baseline(model, x)).abs().max().item() < 1e-6


def test_all_zero_mask_annihilates():
    torch.manual_seed(0)
    m = randomize_bn(PlainCNN(1, 10, (4, 8, 8, 8), 16))
    m.fc.bias.data.zero_()
    with torch.no_grad():
        out = forward_masked(m, torch.zeros(m.n_filters), torch.randn(3, 1, 16, 16))
    assert torch.count_nonzero(out) == 0


def test_mask_contract():
    m = PlainCNN(1, 10, (4, 8), 8)
    x = torch.randn(2, 1, 8, 8)
    with pytest.raises(ContractError):
        forward_masked(m, torch.ones(m.n_filters + 1), x)
    with pytest.raises(ContractError):
        forward_masked(m, torch.full((m.n_filters,), 1.5), x)


@pytest.mark.parametrize("model", [PlainCNN(1, 10, (4, 8, 8, 8), 16), ResNet(3, 10, (8, 16, 16), 1)])
def test_single_zero_entry_matches_hard_removal(model):
    torch.manual_seed(1)
    randomize_bn(model)
    n = model.n_filters
    k = n // 2
    mask = torch.ones(n)
    mask[k] = 0
    x = torch.randn(6, model.in_channels, *model.input_hw)
    keep = np.ones(n, dtype=bool)
    keep[k] = False
    small = model.surgery(keep).eval()
    with torch.no_grad():
        a = forward_masked(model, mask, x)
        b = small(x)
    rel = ((a - b).abs().max() / a.abs().max()).item()
    assert rel < 1e-5
    assert small.n_filters == n - 1


@pytest.mark.parametrize("model", [PlainCNN(1, 10, (4, 8, 8, 8), 16), ResNet(3, 10, (8, 16, 16), 2),
                                   ResNet(3, 10, (8, 16, 16), 2, prune_residual=True)])
def test_surgery_equivalence_and_flops(model):
    torch.manual_seed(2)
    randomize_bn(model, seed=3)
    spec = model.arch_spec()
    rng = np.random.default_rng(0)
    soft = rng.uniform(size=model.n_filters)
    d = binarize(soft, 0.5, spec)
    small = surgery(model, d).eval()
    x = torch.randn(20, model.in_channels, *model.input_hw)
    with torch.no_grad():
        a = forward_masked(model, torch.tensor(d.binary_mask(), dtype=torch.float32), x)
        b = small(x)
    assert (a - b).abs().max().item() < 1e-5
    assert count_flops(small.arch_spec()) == count_flops(spec, d.binary_mask())
    small.arch_spec().validate()


def test_all_keep_surgery_is_identity_and_idempotent():
    torch.manual_seed(3)
    m = randomize_bn(ResNet(3, 10, (8, 16, 16), 1, prune_residual=True))
    keep = np.ones(m.n_filters, dtype=bool)
    once = m.surgery(keep)
    twice = once.surgery(keep)
    for (k1, v1), (k2, v2), (k3, v3) in zip(m.state_dict().items(), once.state_dict().items(),
                                            twice.state_dict().items()):
        assert k1 == k2 == k3
        assert torch.equal(v1, v2) and torch.equal(v2, v3)


def test_surgery_rejects_split_group():
    m = ResNet(3, 10, (8, 16, 16), 1, prune_residual=True)
    spec = m.arch_spec()
    keep = np.ones(m.n_filters, dtype=bool)
    keep[spec.channel_groups[0][0]] = False
    with pytest.raises(ContractError):
        m.surgery(keep)
    assert group_closure(spec, keep)[spec.channel_groups[0]].all()


def test_build_model_round_trip():
    for m in (PlainCNN(3, 7, (5, 6), 12), ResNet(1, 4, (4, 8, 8), 2, (3, 4, 5, 6, 7, 8), True, 16)):
        rebuilt = build_model(m.config())
        rebuilt.load_state_dict(m.state_dict())
        assert rebuilt.arch_spec() == m.arch_spec()
