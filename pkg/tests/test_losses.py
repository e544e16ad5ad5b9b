import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from cmim.critics import Critic, CriticKind
from cmim.encoders import FeatureBundle, FusedFeatures, ImageEncoder, LocalFusion, TextEncoder, BilinearFusion
from cmim.losses import (
    LossBreakdown,
    LossWeights,
    classification_loss,
    loss_global_global,
    loss_local_global,
    loss_local_local,
    segmentation_loss,
    total_classification_loss,
    total_segmentation_loss,
)
from cmim.mi_estimators import ScorePair, jsd_mi_lower_bound, make_marginal_pairing

from conftest import fd_relative_error

LN2 = math.log(2.0)


def _critic(kind, da, db, zero=False, hidden=8):
    c = Critic(kind, da, db, hidden_dim=hidden).double()
    if zero:
        with torch.no_grad():
            for p in c.parameters():
                p.zero_()
    return c


def _randn(*shape):
    return torch.randn(*shape, dtype=torch.float64)


def test_local_local_reduces_to_single_pair_estimate():
    critic = _critic(CriticKind.LOCAL_LOCAL, 3, 4)
    a, b = _randn(5, 1, 3), _randn(5, 1, 4)
    perm = make_marginal_pairing(5, 11)
    loss = loss_local_local(FeatureBundle(local=a), FusedFeatures(local=b), critic, pairing=perm)
    with torch.no_grad():
        joint = critic(a[:, 0], b[:, 0]).numpy()
        marg = critic(a[:, 0], b[perm, 0]).numpy()
    assert loss.item() == pytest.approx(-jsd_mi_lower_bound(ScorePair(joint, marg)).value, abs=1e-12)


def test_local_local_matches_pairwise_loop():
    critic = _critic(CriticKind.LOCAL_LOCAL, 3, 4)
    a, b = _randn(4, 2, 3), _randn(4, 3, 4)
    perm = make_marginal_pairing(4, 5)
    loss = loss_local_local(FeatureBundle(local=a), FusedFeatures(local=b), critic, pairing=perm)
    estimates = []
    with torch.no_grad():
        for n in range(2):
            for m in range(3):
                joint = critic(a[:, n], b[:, m]).numpy()
                marg = critic(a[:, n], b[perm, m]).numpy()
                estimates.append(jsd_mi_lower_bound(ScorePair(joint, marg)).value)
    assert loss.item() == pytest.approx(-np.mean(estimates), abs=1e-9)


def test_local_global_matches_location_loop():
    critic = _critic(CriticKind.LOCAL_GLOBAL, 3, 5)
    a, g = _randn(6, 4, 3), _randn(6, 5)
    perm = make_marginal_pairing(6, 2)
    loss = loss_local_global(FeatureBundle(local=a), g, critic, pairing=perm)
    with torch.no_grad():
        ests = [
            jsd_mi_lower_bound(ScorePair(critic(a[:, n], g).numpy(), critic(a[:, n], g[perm]).numpy())).value
            for n in range(4)
        ]
    assert loss.item() == pytest.approx(-np.mean(ests), abs=1e-9)


def test_global_global_equals_local_global_with_one_location():
    critic = _critic(CriticKind.GLOBAL_GLOBAL, 3, 5)
    g_i, g = _randn(6, 3), _randn(6, 5)
    gg = loss_global_global(g_i, g, critic, seed=9)
    lg = loss_local_global(FeatureBundle(local=g_i.unsqueeze(1)), g, critic, seed=9)
    assert gg.item() == pytest.approx(lg.item(), abs=1e-12)
    assert gg.item() == loss_global_global(g_i, g, critic, seed=9).item()


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 6), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**16))
def test_zero_critic_gives_two_ln2(batch, n_i, n_m, seed):
    torch.manual_seed(seed)
    a, b, g = _randn(batch, n_i, 3), _randn(batch, n_m, 4), _randn(batch, 4)
    ll = loss_local_local(FeatureBundle(local=a), FusedFeatures(local=b), _critic(CriticKind.LOCAL_LOCAL, 3, 4, True), seed=seed)
    lg = loss_local_global(FeatureBundle(local=a), g, _critic(CriticKind.LOCAL_GLOBAL, 3, 4, True), seed=seed)
    gg = loss_global_global(a[:, 0], g, _critic(CriticKind.GLOBAL_GLOBAL, 3, 4, True), seed=seed)
    for v in (ll, lg, gg):
        assert v.item() == pytest.approx(2 * LN2, abs=1e-12)


@pytest.mark.parametrize("fn", ["ll", "lg", "gg"])
def test_batch_of_one_rejected(fn):
    a = _randn(1, 2, 3)
    with pytest.raises(ValueError, match="insufficient batch for marginals"):
        if fn == "ll":
            loss_local_local(FeatureBundle(local=a), FusedFeatures(local=a), _critic(CriticKind.LOCAL_LOCAL, 3, 3))
        elif fn == "lg":
            loss_local_global(FeatureBundle(local=a), a[:, 0], _critic(CriticKind.LOCAL_GLOBAL, 3, 3))
        else:
            loss_global_global(a[:, 0], a[:, 0], _critic(CriticKind.GLOBAL_GLOBAL, 3, 3))


def test_losses_deterministic_given_seed():
    critic = _critic(CriticKind.LOCAL_LOCAL, 3, 3)
    a, b = _randn(5, 2, 3), _randn(5, 3, 3)
    args = (FeatureBundle(local=a), FusedFeatures(local=b), critic)
    assert loss_local_local(*args, seed=4).item() == loss_local_local(*args, seed=4).item()
    assert loss_local_local(*args, seed=4, num_pairs=3).item() == loss_local_local(*args, seed=4, num_pairs=3).item()


def test_masked_locations_are_ignored():
    critic = _critic(CriticKind.LOCAL_LOCAL, 3, 3)
    a, b = _randn(4, 3, 3), _randn(4, 2, 3)
    mask = torch.tensor([[1.0, 1.0, 0.0]] * 4, dtype=torch.float64)
    full = loss_local_local(FeatureBundle(local=a, mask=mask), FusedFeatures(local=b), critic, seed=1)
    trimmed = loss_local_local(FeatureBundle(local=a[:, :2]), FusedFeatures(local=b), critic, seed=1)
    assert full.item() == pytest.approx(trimmed.item(), abs=1e-12)


def test_pair_subsample_approximates_full_sum():
    critic = _critic(CriticKind.LOCAL_LOCAL, 3, 3, hidden=16)
    a, b = _randn(8, 6, 3), _randn(8, 6, 3)
    args = (FeatureBundle(local=a), FusedFeatures(local=b), critic)
    full = loss_local_local(*args, seed=0).item()
    sub = loss_local_local(*args, seed=0, num_pairs=2000).item()
    assert sub == pytest.approx(full, abs=0.02)


# -- task losses ---------------------------------------------------------------

def test_classification_loss_examples():
    assert classification_loss(torch.tensor([[0.0, 0.0]]), [0]).item() == pytest.approx(LN2)
    assert classification_loss(torch.zeros(3, 14), [0, 5, 13]).item() == pytest.approx(math.log(14), abs=1e-6)
    confident = torch.tensor([[1e4, 0.0, 0.0]])
    assert classification_loss(confident, [0]).item() == 0.0
    with pytest.raises(ValueError, match="out of range"):
        classification_loss(torch.zeros(2, 3), [0, 3])


def test_segmentation_loss_examples():
    masks = torch.tensor([[[0, 1], [1, 0]]])
    assert segmentation_loss(torch.zeros(1, 2, 2, 2), masks).item() == pytest.approx(LN2)
    perfect = torch.nn.functional.one_hot(masks, 2).double() * 1e4
    assert segmentation_loss(perfect, masks).item() == 0.0
    logits = torch.tensor([[[[2.0, 0.0], [0.0, 1.0]], [[0.5, 0.5], [3.0, -1.0]]]], dtype=torch.float64)
    # per-pixel -log softmax at the true label
    by_hand = [
        math.log(1 + math.exp(-2.0)),
        math.log(1 + math.exp(-1.0)),
        math.log(2.0),
        math.log(1 + math.exp(-4.0)),
    ]
    assert segmentation_loss(logits, masks).item() == pytest.approx(np.mean(by_hand), abs=1e-12)
    with pytest.raises(ValueError, match="out of range"):
        segmentation_loss(torch.zeros(1, 2, 2, 2), masks + 1)


# -- compositions ----------------------------------------------------------------

def test_loss_weights_validation():
    LossWeights()
    with pytest.raises(ValueError):
        LossWeights(lambda_ll=-1.0)
    with pytest.raises(ValueError):
        LossWeights(lambda_ll=float("nan"))
    with pytest.raises(ValueError):
        LossWeights(0.0, 0.0, 0.0, 0.0)


def test_total_classification_examples():
    w = LossWeights(1.0, 1.0, 0.0, 1.0)
    assert total_classification_loss({"ll": 1.0, "lg": 0.5, "task": 2.0}, w).total == pytest.approx(3.5)
    ablate = LossWeights(0.0, 0.0, 0.0, 0.7)
    out = total_classification_loss({"ll": 9.0, "lg": 9.0, "gg": 9.0, "task": 2.0}, ablate)
    assert out.total == pytest.approx(1.4)
    assert out.gg == 0.0


def test_total_segmentation_examples():
    w = LossWeights(1.0, 1.0, 1.0, 1.0)
    out = total_segmentation_loss({"ll": 0.3, "lg": 5.0, "gg": 5.0, "task": 0.7}, w)
    assert out.total == pytest.approx(1.0) and out.lg == 0.0 and out.gg == 0.0
    assert total_segmentation_loss({"ll": 0.3, "task": 0.7}, LossWeights(0.0, 0.0, 0.0, 1.0)).total == pytest.approx(0.7)


@settings(max_examples=100)
@given(
    st.lists(st.floats(0, 10), min_size=4, max_size=4).filter(lambda w: any(v > 0 for v in w)),
    st.lists(st.floats(-5, 5), min_size=4, max_size=4),
)
def test_totals_match_weighted_sum(weights, comps):
    w = LossWeights(*weights)
    parts = dict(zip(["ll", "lg", "gg", "task"], comps))
    c = total_classification_loss(parts, w)
    expected = w.lambda_ll * parts["ll"] + w.lambda_lg * parts["lg"] + w.lambda_task * parts["task"]
    if w.lambda_gg > 0:
        expected += w.lambda_gg * parts["gg"]
    assert c.total == pytest.approx(expected, rel=1e-6, abs=1e-9)
    s = total_segmentation_loss(parts, w)
    assert s.total == pytest.approx(w.lambda_ll * parts["ll"] + w.lambda_task * parts["task"], rel=1e-6, abs=1e-9)


def test_breakdown_as_floats():
    b = LossBreakdown(ll=torch.tensor(1.5, requires_grad=True), task=2.0, total=torch.tensor(3.0))
    assert b.as_floats() == {"ll": 1.5, "lg": 0.0, "gg": 0.0, "task": 2.0, "total": 3.0}


# -- gradients ---------------------------------------------------------------------

def test_mi_loss_gradients_match_finite_differences():
    """Encoder and critic gradients of every MI loss on a 2-sample batch."""
    img = ImageEncoder(1, 8, (2, 2)).double()
    txt = TextEncoder(vocab_size=10, embed_dim=4, channels=3, n_blocks=1, max_len=5).double()
    local_fusion = LocalFusion({"image": 2, "text": 3}, 3).double()
    bilinear = BilinearFusion(2, 3, out_dim=4, rank=2).double()
    c_ll = _critic(CriticKind.LOCAL_LOCAL, 2, 3, hidden=16)
    c_lg = _critic(CriticKind.LOCAL_GLOBAL, 2, 4, hidden=16)
    c_gg = _critic(CriticKind.GLOBAL_GLOBAL, 2, 4, hidden=16)
    images = torch.rand(2, 1, 8, 8, dtype=torch.float64)
    tokens = torch.tensor([[1, 2, 3, 0, 0], [4, 5, 6, 7, 9]])
    pairing = np.array([1, 0])

    def features():
        bi, bt = img(images), txt(tokens)
        fused = local_fusion({"image": bi, "text": bt})
        return bi, fused, bilinear(bi.global_, bt.global_)

    def ll():
        bi, fused, _ = features()
        return loss_local_local(bi, fused, c_ll, pairing)

    def lg():
        bi, _, g = features()
        return loss_local_global(bi, g, c_lg, pairing)

    def gg():
        bi, _, g = features()
        return loss_global_global(bi.global_, g, c_gg, pairing)

    def lc():
        return total_classification_loss({"ll": ll(), "lg": lg(), "gg": gg(), "task": 0.0}, LossWeights(1.0, 0.5, 0.3, 1.0)).total

    shared = {**{f"img.{n}": p for n, p in img.named_parameters()},
              **{f"txt.{n}": p for n, p in txt.named_parameters()},
              **{f"bil.{n}": p for n, p in bilinear.named_parameters()}}
    checks = {
        "ll": (ll, {**shared, **{f"lf.{n}": p for n, p in local_fusion.named_parameters()},
                   **{f"c.{n}": p for n, p in c_ll.named_parameters()}}),
        "lg": (lg, {**shared, **{f"c.{n}": p for n, p in c_lg.named_parameters()}}),
        "gg": (gg, {**shared, **{f"c.{n}": p for n, p in c_gg.named_parameters()}}),
        "L^C": (lc, {**shared, **{f"c.{n}": p for n, p in c_gg.named_parameters()}}),
    }
    for name, (fn, params) in checks.items():
        err = fd_relative_error(fn, params, entries_per_param=2)
        assert err < 1e-4, name
        assert any(p.grad is not None and torch.count_nonzero(p.grad) for p in params.values()), name
