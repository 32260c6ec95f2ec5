import json
import math
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from complexity_prune.errors import ContractError, DegenerateBatchError, DegenerateBatchWarning
from complexity_prune.masks import (
    MaskNetwork,
    MaskSnapshotLog,
    aggregate_mask,
    complexity_weights,
    sample_masks,
    uniform_weights,
    weights_from_losses,
)

GOLDEN = json.loads((Path(__file__).parent / "golden" / "golden.json").read_text())


def ce_by_hand(logits, label):
    z = max(logits)
    return math.log(sum(math.exp(v - z) for v in logits)) + z - logits[label]


def test_sample_masks_range_and_determinism():
    torch.manual_seed(0)
    mn = MaskNetwork(10, 37)
    logits = torch.randn(8, 10) * 20
    logits[3] = logits[5]
    m = sample_masks(mn, logits)
    assert m.shape == (8, 37)
    assert torch.all(m > 0) and torch.all(m < 1)
    assert torch.equal(m[3], m[5])


def test_initial_masks_near_keep_everything():
    torch.manual_seed(0)
    m = sample_masks(MaskNetwork(10, 50), torch.zeros(4, 10))
    # with zero logits every hidden unit is its bias; output stays close to sigmoid(2)
    assert abs(m.mean().item() - 1 / (1 + math.exp(-2))) < 0.1


def test_sample_masks_golden():
    torch.manual_seed(GOLDEN["masknet_mask"]["seed"])
    mn = MaskNetwork(5, 6)
    out = sample_masks(mn, torch.tensor([[2.0, -1.0, 0.5, 0.0, -3.0]]))[0]
    np.testing.assert_allclose(out.detach().numpy(), GOLDEN["masknet_mask"]["values"], rtol=1e-6)


def test_sample_masks_dim_mismatch():
    with pytest.raises(ContractError):
        sample_masks(MaskNetwork(10, 4), torch.zeros(2, 9))


def test_weights_examples():
    np.testing.assert_allclose(weights_from_losses(torch.tensor([1.0, 3.0])).numpy(), [0.25, 0.75])
    np.testing.assert_allclose(weights_from_losses(torch.tensor([0.7] * 5)).numpy(), [0.2] * 5, rtol=1e-6)
    # 0.5/4, 0.5/4, 1/4, 2/4
    np.testing.assert_allclose(weights_from_losses(torch.tensor([0.5, 0.5, 1.0, 2.0])).numpy(),
                               [0.125, 0.125, 0.25, 0.5])


def test_complexity_weights_from_logits_match_hand_ce():
    logits = [[2.0, 0.0, -1.0], [0.1, 0.2, 0.3], [-2.0, 3.0, 0.0], [1.0, 1.0, 1.0]]
    labels = [0, 2, 0, 1]
    ce = [ce_by_hand(l, y) for l, y in zip(logits, labels)]
    expected = [c / sum(ce) for c in ce]
    alpha = complexity_weights(torch.tensor(labels), torch.tensor(logits, dtype=torch.float64))
    np.testing.assert_allclose(alpha.numpy(), expected, rtol=1e-12)
    one_hot = torch.nn.functional.one_hot(torch.tensor(labels), 3)
    alpha2 = complexity_weights(one_hot, torch.tensor(logits, dtype=torch.float64))
    np.testing.assert_allclose(alpha2.numpy(), expected, rtol=1e-12)


def test_complexity_weights_carry_no_gradient():
    logits = torch.randn(4, 3, requires_grad=True)
    assert not complexity_weights(torch.tensor([0, 1, 2, 0]), logits).requires_grad


def test_degenerate_batch_falls_back_to_uniform():
    with pytest.warns(DegenerateBatchWarning):
        w = weights_from_losses(torch.zeros(4))
    np.testing.assert_allclose(w.numpy(), [0.25] * 4)
    with pytest.raises(DegenerateBatchError):
        weights_from_losses(torch.zeros(4), strict=True)
    # a perfectly confident baseline gives CE exactly 0 in float64
    logits = torch.tensor([[1000.0, 0.0], [0.0, 1000.0]], dtype=torch.float64)
    with pytest.warns(DegenerateBatchWarning):
        w = complexity_weights(torch.tensor([0, 1]), logits)
    np.testing.assert_allclose(w.numpy(), [0.5, 0.5])


@pytest.mark.parametrize("n", [1, 2, 4, 7, 128])
def test_uniform_weights(n):
    w = uniform_weights(n)
    assert w.shape == (n,)
    assert torch.allclose(w, torch.full((n,), 1.0 / n))
    assert abs(w.sum().item() - 1.0) < 1e-6


def test_uniform_weights_contract():
    with pytest.raises(ContractError):
        uniform_weights(0)


losses_st = st.lists(st.floats(1e-3, 50.0), min_size=1, max_size=64)


@settings(max_examples=200, deadline=None)
@given(losses_st, st.floats(1e-3, 1e3))
def test_weights_sum_to_one_and_scale_invariant(losses, c):
    l = torch.tensor(losses, dtype=torch.float64)
    w = weights_from_losses(l)
    assert abs(w.sum().item() - 1.0) < 1e-6
    assert torch.all(w >= 0)
    np.testing.assert_allclose(weights_from_losses(l * c).numpy(), w.numpy(), rtol=1e-9, atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(losses_st, st.data())
def test_hard_samples_dominate(losses, data):
    l = torch.tensor(losses, dtype=torch.float64)
    w = weights_from_losses(l)
    a = data.draw(st.integers(0, len(losses) - 1))
    b = data.draw(st.integers(0, len(losses) - 1))
    if losses[a] > losses[b]:
        assert w[a] > w[b]


def test_aggregate_examples():
    m = torch.tensor([[0.3, 0.9, 0.1]])
    assert torch.equal(aggregate_mask(m, torch.tensor([1.0])), m[0])
    two = torch.tensor([[0.2, 0.2], [0.8, 0.8]])
    np.testing.assert_allclose(aggregate_mask(two, torch.tensor([0.5, 0.5])).numpy(), [0.5, 0.5])

    rng = np.random.default_rng(0)
    rows = rng.uniform(size=(3, 9))
    w = [0.2, 0.3, 0.5]
    expected = [sum(w[i] * rows[i, k] for i in range(3)) for k in range(9)]
    got = aggregate_mask(torch.tensor(rows), torch.tensor(w, dtype=torch.float64))
    np.testing.assert_allclose(got.numpy(), expected, rtol=1e-14)


def test_aggregate_contract():
    with pytest.raises(ContractError):
        aggregate_mask(torch.rand(3, 4), torch.tensor([0.5, 0.5]))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 16), st.integers(1, 20), st.integers(0, 2**31 - 1))
def test_aggregate_is_convex_combination(b, n, seed):
    g = torch.Generator().manual_seed(seed)
    rows = torch.rand(b, n, generator=g, dtype=torch.float64)
    w = weights_from_losses(torch.rand(b, generator=g, dtype=torch.float64) + 0.01)
    m = aggregate_mask(rows, w)
    assert torch.all(m >= rows.min(0).values - 1e-12)
    assert torch.all(m <= rows.max(0).values + 1e-12)


def test_aggregate_gradient_matches_finite_differences():
    """Toy mask network with 10 parameters: in 3 -> hidden 1 -> hidden 1 -> 2 filters."""
    torch.manual_seed(0)
    mn = MaskNetwork(3, 2, hidden=1).double()
    with torch.no_grad():
        for p in mn.parameters():
            p.copy_(torch.randn_like(p))
        mn.fc1.bias.add_(3.0)  # keep the single relu units active
        mn.fc2.bias.add_(3.0)
    assert sum(p.numel() for p in mn.parameters()) == 10
    logits = torch.randn(4, 3, dtype=torch.float64)
    w = torch.tensor([0.1, 0.2, 0.3, 0.4], dtype=torch.float64)
    probe = torch.tensor([0.7, -1.3], dtype=torch.float64)

    def f():
        return aggregate_mask(sample_masks(mn, logits), w) @ probe

    mn.zero_grad()
    f().backward()
    analytic = torch.cat([p.grad.reshape(-1) for p in mn.parameters()])
    numeric = []
    eps = 1e-6
    with torch.no_grad():
        for p in mn.parameters():
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = f().item()
                flat[i] = old - eps
                down = f().item()
                flat[i] = old
                numeric.append((up - down) / (2 * eps))
    numeric = torch.tensor(numeric, dtype=torch.float64)
    rel = (analytic - numeric).norm() / numeric.norm()
    assert rel < 1e-4


def test_snapshot_log_round_trip(tmp_path):
    log = MaskSnapshotLog(tmp_path / "snaps.csv", 3)
    log.append(0, [0.1, 0.2, 0.3])
    log.append(50, torch.tensor([0.9, 0.05, 1.0], dtype=torch.float64))
    it, m = MaskSnapshotLog.read(tmp_path / "snaps.csv")
    assert it.tolist() == [0, 50]
    np.testing.assert_array_equal(m, [[0.1, 0.2, 0.3], [0.9, 0.05, 1.0]])
    with pytest.raises(ContractError):
        log.append(100, [0.1, 0.2])
