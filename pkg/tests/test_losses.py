import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from geoprompt.losses import (LossConfig, image_to_text_loss, lmcl_loss, mine_triplets,
                              positive_sets, smoothed_cross_entropy, smoothed_targets,
                              stage1_loss, stage2_loss, text_to_image_loss, triplet_loss)
from oracles import GRAD_TOL, gradient_error

torch.set_default_dtype(torch.float32)


def gen(seed):
    return torch.Generator().manual_seed(seed)


# --------------------------------------------------------------------------- image-to-text


def test_itt_identical_rows_is_log_b():
    v = torch.ones(5, 3)
    assert image_to_text_loss(v, v.clone(), tau=0.5).item() == pytest.approx(math.log(5), abs=1e-6)


def test_itt_single_row_is_zero():
    v = torch.randn(1, 4, generator=gen(0))
    assert image_to_text_loss(v, v, normalize=False).item() == pytest.approx(0.0, abs=1e-7)


def test_itt_two_by_two_oracle():
    # similarity [[2,0],[0,2]] with tau=1 and no normalization
    s = math.sqrt(2.0)
    v = torch.tensor([[s, 0.0], [0.0, s]], dtype=torch.float64)
    got = image_to_text_loss(v, v, tau=1.0, normalize=False).item()
    assert got == pytest.approx(0.1269280110429726, abs=1e-12)
    assert got == pytest.approx(math.log1p(math.exp(-2.0)), abs=1e-12)


@pytest.mark.parametrize("tau", [0.0, -0.1])
def test_itt_rejects_bad_tau(tau):
    with pytest.raises(ValueError):
        image_to_text_loss(torch.ones(2, 2), torch.ones(2, 2), tau=tau)


# --------------------------------------------------------------------------- text-to-image


def test_tti_unique_labels_equals_transposed_itt():
    v = torch.randn(6, 5, generator=gen(1), dtype=torch.float64)
    t = torch.randn(6, 5, generator=gen(2), dtype=torch.float64)
    got = text_to_image_loss(v, t, list(range(6)))
    assert abs(got.item() - image_to_text_loss(t, v).item()) < 1e-6


def test_tti_shared_label_is_log_two():
    v = torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
    t = torch.tensor([[0.3, 0.7], [0.3, 0.7]], dtype=torch.float64)
    assert text_to_image_loss(v, t, [4, 4]).item() == pytest.approx(0.6931471805599453, abs=1e-12)


def test_tti_single_row_is_zero():
    v = torch.randn(1, 3, generator=gen(3))
    assert text_to_image_loss(v, v, [0]).item() == pytest.approx(0.0, abs=1e-7)


def test_positive_sets_cover_rows():
    sets = positive_sets([2, 0, 2, 1])
    assert sets == {2: [0, 2], 0: [1], 1: [3]}


def test_stage1_is_exact_sum():
    v = torch.randn(8, 4, generator=gen(4))
    t = torch.randn(8, 4, generator=gen(5))
    labels = [0, 1, 0, 2, 3, 1, 4, 4]
    total = stage1_loss(v, t, labels)
    assert total.item() == (image_to_text_loss(v, t) + text_to_image_loss(v, t, labels)).item()


def test_stage1_symmetric_unique_labels():
    v = torch.randn(4, 4, generator=gen(6), dtype=torch.float64)
    assert stage1_loss(v, v, [0, 1, 2, 3]).item() == pytest.approx(
        2 * image_to_text_loss(v, v).item(), abs=1e-12)


# --------------------------------------------------------------------------- smoothed CE


def test_smoothed_targets_formula():
    q = smoothed_targets([2], 4, 0.1)[0]
    assert q.tolist() == pytest.approx([0.025, 0.025, 0.925, 0.025])


@pytest.mark.parametrize("eps", [0.0, 0.05, 0.5, 0.9])
def test_smoothed_targets_sum_to_one(eps):
    q = smoothed_targets([0, 3, 1], 5, eps)
    assert torch.allclose(q.sum(dim=1), torch.ones(3, dtype=q.dtype))
    if eps > 0:
        assert (q > 0).all()


def test_smoothed_ce_uniform_is_log_k():
    cache = torch.ones(7, 3)
    v = torch.ones(1, 3)
    assert smoothed_cross_entropy(v, cache, [2], epsilon=0.0).item() == pytest.approx(math.log(7))


def test_smoothed_ce_two_class_oracle():
    # logits [3, 0] with tau=1; the closed form 0.95*ln(1+e^-3) + 0.05*ln(1+e^3)
    v = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    cache = torch.tensor([[3.0, 0.0], [0.0, 0.0]], dtype=torch.float64)
    got = smoothed_cross_entropy(v, cache, [0], epsilon=0.1, tau=1.0, normalize=False).item()
    closed = 0.95 * math.log1p(math.exp(-3)) + 0.05 * math.log1p(math.exp(3))
    assert got == pytest.approx(0.19858735157374202, abs=1e-12)
    assert got == pytest.approx(closed, abs=1e-12)


def test_smoothed_ce_cache_receives_no_gradient():
    cache = torch.randn(4, 3, generator=gen(7), requires_grad=True)
    v = torch.randn(2, 3, generator=gen(8), requires_grad=True)
    smoothed_cross_entropy(v, cache, [0, 3]).backward()
    assert cache.grad is None and v.grad is not None


@pytest.mark.parametrize("targets", [[4], [-1]])
def test_smoothed_ce_rejects_target_outside_cache(targets):
    with pytest.raises(ValueError):
        smoothed_cross_entropy(torch.ones(1, 3), torch.ones(4, 3), targets)


def test_smoothed_ce_rejects_dim_mismatch():
    with pytest.raises(ValueError):
        smoothed_cross_entropy(torch.ones(1, 3), torch.ones(4, 2), [0])


# --------------------------------------------------------------------------- LMCL


def test_lmcl_margin_free_is_cosine_softmax():
    x = torch.randn(6, 5, generator=gen(9), dtype=torch.float64)
    w = torch.randn(3, 5, generator=gen(10), dtype=torch.float64)
    y = torch.tensor([0, 1, 2, 2, 1, 0])
    ref = F.cross_entropy(F.normalize(x, dim=1) @ F.normalize(w, dim=1).T, y)
    assert abs(lmcl_loss(x, y, w, scale=1.0, margin=0.0).item() - ref.item()) < 1e-6


def test_lmcl_two_class_oracle():
    x = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    w = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    got = lmcl_loss(x, [0], w, scale=30.0, margin=0.4).item()
    assert got == pytest.approx(1.522997960583303e-08, rel=1e-6)


def test_lmcl_monotone_in_margin():
    x = torch.randn(8, 4, generator=gen(11), dtype=torch.float64)
    w = torch.randn(3, 4, generator=gen(12), dtype=torch.float64)
    y = torch.arange(8) % 3
    vals = [lmcl_loss(x, y, w, 30.0, m).item() for m in np.linspace(0, 0.9, 10)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_lmcl_rejects_zero_feature():
    with pytest.raises(ValueError):
        lmcl_loss(torch.zeros(1, 3), [0], torch.ones(2, 3))


# --------------------------------------------------------------------------- triplet


@pytest.mark.parametrize("d_ap,d_an,margin,expected", [(1.0, 2.0, 0.5, 0.0), (2.0, 1.0, 0.5, 1.5)])
def test_triplet_formula(d_ap, d_an, margin, expected):
    a = torch.zeros(1, 2)
    p = torch.tensor([[d_ap, 0.0]])
    n = torch.tensor([[0.0, d_an]])
    assert triplet_loss(a, p, n, margin).item() == pytest.approx(expected)


def test_triplet_anchor_equals_positive():
    a = torch.tensor([[0.0, 0.0]])
    n = torch.tensor([[0.05, 0.0]])
    assert triplet_loss(a, a.clone(), n, 0.1).item() == pytest.approx(0.05)


def test_triplet_inactive_has_zero_gradient():
    a = torch.zeros(1, 2, requires_grad=True)
    triplet_loss(a, torch.tensor([[0.1, 0.0]]), torch.tensor([[0.0, 5.0]]), 0.1).backward()
    assert torch.count_nonzero(a.grad) == 0


def test_triplet_rejects_dim_mismatch():
    with pytest.raises(ValueError):
        triplet_loss(torch.zeros(1, 2), torch.zeros(1, 3), torch.zeros(1, 2))


def test_mine_identical_pairs():
    f = torch.tensor([[0.0], [0.0], [1.0], [1.0]])
    triples = mine_triplets(f, [0, 0, 1, 1])
    d = torch.cdist(f, f)
    assert len(triples) == 4
    assert all(d[a, p] == 0 and d[a, n] == 1 for a, p, n in triples)


def test_mine_single_class_is_empty():
    assert mine_triplets(torch.randn(4, 2, generator=gen(13)), [3, 3, 3, 3]) == []


def test_mine_line_example():
    f = torch.tensor([[0.0], [1.0], [10.0]])
    assert mine_triplets(f, [0, 0, 1])[0] == (0, 1, 2)


def test_mine_ties_take_lowest_index():
    f = torch.tensor([[0.0], [1.0], [-1.0], [2.0], [-2.0]])
    assert mine_triplets(f, [0, 0, 0, 1, 1])[0] == (0, 1, 3)


def test_mine_random_is_seeded():
    f = torch.randn(10, 3, generator=gen(14))
    y = [0, 0, 1, 1, 2, 2, 0, 1, 2, 0]
    a = mine_triplets(f, y, "random", rng=np.random.default_rng(5))
    b = mine_triplets(f, y, "random", rng=np.random.default_rng(5))
    assert a == b and all(y[i] == y[p] != y[n] for i, p, n in a)


# --------------------------------------------------------------------------- stage 2


def test_stage2_zero():
    z = torch.tensor(0.0)
    assert stage2_loss(z, z, z).item() == 0.0


def test_stage2_exact_sum_and_empty_mining():
    a, b = torch.tensor(0.37), torch.tensor(1.25)
    empty = triplet_loss(torch.zeros(0, 2), torch.zeros(0, 2), torch.zeros(0, 2))
    assert stage2_loss(a, b, empty).item() == (a + b).item()
    c = torch.tensor(0.11)
    assert stage2_loss(a, b, c).item() == (a + b + c).item()


# --------------------------------------------------------------------------- properties


def test_temperature_scaling_keeps_argmax():
    v = F.normalize(torch.randn(5, 4, generator=gen(15)), dim=1)
    t = F.normalize(torch.randn(5, 4, generator=gen(16)), dim=1)
    for tau in (0.01, 0.07, 1.0, 3.0):
        assert torch.equal((v @ t.T / tau).softmax(1).argmax(1), (v @ t.T).argmax(1))


def test_losses_non_negative():
    v = torch.randn(6, 4, generator=gen(17))
    t = torch.randn(6, 4, generator=gen(18))
    y = [0, 1, 1, 2, 0, 3]
    assert image_to_text_loss(v, t).item() >= 0
    assert text_to_image_loss(v, t, y).item() >= 0
    assert smoothed_cross_entropy(v, t[:4], y).item() >= 0
    assert lmcl_loss(v, y, t[:4]).item() >= 0
    assert triplet_loss(v[:2], t[:2], t[2:4]).item() >= 0


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(tau=0)
    with pytest.raises(ValueError):
        LossConfig(lmcl_margin=1.0)


@pytest.mark.parametrize("name", ["itt", "tti", "ce", "lmcl", "triplet"])
def test_gradient_spot_check(name):
    g = gen(100)
    v = torch.randn(4, 3, generator=g, dtype=torch.float64)
    t = torch.randn(4, 3, generator=g, dtype=torch.float64)
    fns = {
        "itt": lambda x: image_to_text_loss(x, t, tau=0.5),
        "tti": lambda x: text_to_image_loss(x, t, [0, 0, 1, 2], tau=0.5),
        "ce": lambda x: smoothed_cross_entropy(x, t, [0, 1, 2, 3], tau=0.5),
        "lmcl": lambda x: lmcl_loss(x, [0, 1, 2, 3], t, scale=4.0, margin=0.3),
        "triplet": lambda x: triplet_loss(x, t, t.flip(0), margin=2.0),
    }
    assert gradient_error(fns[name], v) < GRAD_TOL
