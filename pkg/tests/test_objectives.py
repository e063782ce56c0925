"""Loss functions checked against hand values and independent numpy
oracles, plus the alpha-mixing / gradient-isolation semantics."""
import math

import numpy as np
import pytest

import schedlab.tensor as T
from schedlab.objectives import (LossConfig, ObjectiveError, build_duplicate_mask,
                                 combined_loss, loss_aud_contrastive,
                                 loss_aud_diversity, loss_av, sample_distractors)
from schedlab.tensor import Tape, Tensor, backward


def _unit_rows(a):
    a = np.asarray(a, np.float64)
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# cross-modal InfoNCE


def test_loss_av_two_candidate_hand_value():
    # Two orthogonal pairs. Per direction each row has positive logit 1/tau
    # and one negative logit 0, so the loss is softplus(-1/tau).
    tau = 1.0
    audio = Tensor(np.eye(2))
    image = Tensor(np.eye(2))
    val = loss_av(audio, image, None, tau).item()
    assert val == pytest.approx(math.log(1.0 + math.exp(-1.0)), rel=1e-9)
    assert val == pytest.approx(0.31326168751822286, rel=1e-9)


def test_loss_av_uniform_similarities_is_log_batch():
    # All similarities identical -> softmax is uniform -> loss = ln(B).
    B = 4
    audio = Tensor(np.tile(_unit_rows([[1.0, 0.0]]), (B, 1)))
    image = Tensor(np.tile(_unit_rows([[0.0, 1.0]]), (B, 1)))
    val = loss_av(audio, image, None, 0.07).item()
    assert val == pytest.approx(math.log(B), rel=1e-9)
    assert val == pytest.approx(1.3862943611198906, rel=1e-9)


def _oracle_loss_av(a, v, dup, tau):
    """Independent float64 reference implementation."""
    a = np.asarray(a, np.float64)
    v = np.asarray(v, np.float64)
    B = a.shape[0]
    sims = a @ v.T / tau
    allowed = ~dup if dup is not None else np.ones((B, B), bool)
    np.fill_diagonal(allowed, True)

    def direction(s, ok):
        total = 0.0
        for i in range(B):
            cand = s[i][ok[i]]
            mx = cand.max()
            lse = mx + math.log(np.exp(cand - mx).sum())
            total += lse - s[i, i]
        return total / B

    return 0.5 * (direction(sims, allowed) + direction(sims.T, allowed.T))


@pytest.mark.parametrize("B,tau", [(2, 0.07), (3, 0.07), (4, 0.5)])
def test_loss_av_matches_oracle(B, tau, rng):
    audio = _unit_rows(rng.normal(size=(B, 8)))
    image = _unit_rows(rng.normal(size=(B, 8)))
    val = loss_av(Tensor(audio), Tensor(image), None, tau).item()
    assert val == pytest.approx(_oracle_loss_av(audio, image, None, tau), abs=1e-10)


def test_loss_av_duplicate_mask_matches_oracle(rng):
    image_ids = [5, 9, 5, 2]
    audio = _unit_rows(rng.normal(size=(4, 6)))
    image = _unit_rows(rng.normal(size=(4, 6)))
    dup = build_duplicate_mask(image_ids)
    val = loss_av(Tensor(audio), Tensor(image), dup, 0.07).item()
    assert val == pytest.approx(_oracle_loss_av(audio, image, dup, 0.07), abs=1e-10)
    # masking same-image negatives can only make the task easier
    val_unmasked = loss_av(Tensor(audio), Tensor(image), None, 0.07).item()
    assert val <= val_unmasked + 1e-12


def test_build_duplicate_mask():
    m = build_duplicate_mask([1, 2, 1, 3])
    expected = np.zeros((4, 4), bool)
    expected[0, 2] = expected[2, 0] = True
    np.testing.assert_array_equal(m, expected)


def test_loss_av_rejects_unnormalized():
    bad = Tensor(np.full((2, 3), 2.0))
    good = Tensor(_unit_rows(np.ones((2, 3))))
    with pytest.raises(ObjectiveError):
        loss_av(bad, good, None, 0.07)


def test_loss_av_rejects_empty_batch():
    e = Tensor(np.zeros((0, 4)))
    with pytest.raises(ObjectiveError):
        loss_av(e, e, None, 0.07)


def test_loss_av_nonnegative_and_gradcheck(rng):
    audio = _unit_rows(rng.normal(size=(3, 5)))
    image = _unit_rows(rng.normal(size=(3, 5)))
    assert loss_av(Tensor(audio), Tensor(image), None, 0.07).item() >= 0.0
    a = Tensor(audio, requires_grad=True)
    with Tape() as tape:
        out = loss_av(a, Tensor(image), None, 0.5)
    backward(tape, out)
    h = 1e-6
    num = np.zeros_like(audio)
    for i in range(audio.shape[0]):
        for j in range(audio.shape[1]):
            for s, tgt in ((h, 1), (-h, -1)):
                a.data[i, j] += s
                num[i, j] += tgt * loss_av(a, Tensor(image), None, 0.5).item()
                a.data[i, j] -= s
    num /= 2 * h
    # note: the norm guard tolerates the +-1e-6 perturbation
    np.testing.assert_allclose(a.grad, num, atol=1e-4)


# ---------------------------------------------------------------------------
# acoustic contrastive loss


def test_sample_distractors_uses_other_masked_positions(rng):
    mask = np.array([[True, True, False, True]])
    valid = np.ones((1, 4), bool)
    anchors, cands, cvalid = sample_distractors(mask, valid, 2, rng)
    np.testing.assert_array_equal(anchors, [0, 1, 3])
    for row_i, anchor in enumerate(anchors):
        assert cands[row_i, 0] == anchor
        others = set(cands[row_i, 1:][cvalid[row_i, 1:]])
        assert others == {0, 1, 3} - {anchor}


def test_sample_distractors_fallback_single_masked(rng):
    mask = np.array([[False, True, False, False]])
    valid = np.array([[True, True, True, False]])
    _, cands, cvalid = sample_distractors(mask, valid, 5, rng)
    pool = set(cands[0, 1:][cvalid[0, 1:]])
    assert pool <= {0, 2}  # non-masked valid positions only
    assert pool  # fallback produced at least one distractor


def test_sample_distractors_requires_masked(rng):
    with pytest.raises(ObjectiveError):
        sample_distractors(np.zeros((2, 4), bool), np.ones((2, 4), bool), 3, rng)


def test_loss_aud_contrastive_matches_oracle(rng):
    """With k >= pool size every other masked position is a distractor, so
    the loss is rng-independent and checkable by brute force."""
    B, L, D = 2, 6, 4
    c = rng.normal(size=(B, L, D))
    q = rng.normal(size=(B, L, D))
    mask = np.zeros((B, L), bool)
    mask[0, [1, 2, 4]] = True
    mask[1, [0, 5]] = True
    valid = np.ones((B, L), bool)
    kappa = 0.1
    val = loss_aud_contrastive(Tensor(c), Tensor(q), mask, valid, 10, kappa,
                               np.random.default_rng(0)).item()

    def unit(x):
        return x / np.linalg.norm(x)

    total, n = 0.0, 0
    for b in range(B):
        masked = np.flatnonzero(mask[b])
        for t in masked:
            cand_idx = [t] + [o for o in masked if o != t]
            logits = np.array([unit(c[b, t]) @ unit(q[b, o]) / kappa for o in cand_idx])
            mx = logits.max()
            total += (mx + math.log(np.exp(logits - mx).sum())) - logits[0]
            n += 1
    assert val == pytest.approx(total / n, abs=1e-6)


def test_loss_aud_contrastive_perfect_targets_easy(rng):
    # context equal to its own target and orthogonal to the others ->
    # tiny loss; shuffled targets -> larger loss
    B, L = 1, 4
    c = np.eye(L)[None]  # (1, 4, 4) orthonormal rows
    mask = np.ones((B, L), bool)
    valid = np.ones((B, L), bool)
    good = loss_aud_contrastive(Tensor(c), Tensor(c.copy()), mask, valid, 10, 0.1,
                                np.random.default_rng(0)).item()
    rolled = np.roll(c, 1, axis=1)
    bad = loss_aud_contrastive(Tensor(c), Tensor(rolled), mask, valid, 10, 0.1,
                               np.random.default_rng(0)).item()
    assert good < 0.01
    assert bad > good + 1.0


# ---------------------------------------------------------------------------
# diversity loss


def test_diversity_zero_for_uniform_usage():
    M, G, V = 6, 2, 8
    probs = Tensor(np.full((M, G, V), 1.0 / V))
    assert loss_aud_diversity(probs, G, V).item() == pytest.approx(0.0, abs=1e-6)


def test_diversity_hand_value_for_collapse():
    # G=1, V=4, all mass on one code: entropy 0 -> (GV - 1)/(GV) = 0.75
    M, G, V = 5, 1, 4
    p = np.zeros((M, G, V))
    p[:, :, 2] = 1.0
    val = loss_aud_diversity(Tensor(p), G, V).item()
    assert val == pytest.approx(0.75, abs=1e-4)


def test_diversity_bounds_and_monotonicity(rng):
    M, G, V = 32, 2, 16
    raw = rng.random((M, G, V))
    probs = raw / raw.sum(-1, keepdims=True)
    val = loss_aud_diversity(Tensor(probs), G, V).item()
    assert 0.0 <= val <= (V - 1) / V + 1e-9


def test_diversity_shape_and_sum_guards(rng):
    with pytest.raises(ObjectiveError):
        loss_aud_diversity(Tensor(np.full((2, 3, 4), 0.25)), 2, 16)
    bad = Tensor(np.full((2, 2, 4), 0.3))
    with pytest.raises(ObjectiveError):
        loss_aud_diversity(bad, 2, 4)


# ---------------------------------------------------------------------------
# combination


def test_combined_loss_exact_mixture():
    l_av = Tensor(np.float64(2.0))
    l_r = Tensor(np.float64(3.0))
    l_d = Tensor(np.float64(0.5))
    for alpha in (0.25, 0.5, 0.75):
        combined, report = combined_loss(alpha, l_av, l_r, l_d, 0.1)
        expected = alpha * 2.0 + (1.0 - alpha) * (3.0 + 0.1 * 0.5)
        assert combined.item() == expected  # bit-exact float arithmetic
        assert report.loss_aud == 3.0 + 0.1 * 0.5
        assert report.combined == expected


def test_combined_loss_alpha_extremes_drop_graph_edges():
    for alpha in (1.0, 0.0):
        l_av = Tensor(np.float64(2.0), requires_grad=True)
        l_r = Tensor(np.float64(3.0), requires_grad=True)
        l_d = Tensor(np.float64(0.5), requires_grad=True)
        with Tape() as tape:
            combined, _ = combined_loss(alpha, l_av, l_r, l_d, 0.1)
        backward(tape, combined)
        if alpha == 1.0:
            assert l_av.grad == 1.0
            assert l_r.grad == 0.0 and l_d.grad == 0.0
        else:
            assert l_av.grad == 0.0
            assert l_r.grad == 1.0 and l_d.grad == pytest.approx(0.1)


def test_combined_loss_requires_needed_sides():
    l = Tensor(np.float64(1.0))
    with pytest.raises(ObjectiveError):
        combined_loss(1.0, None, l, l)
    with pytest.raises(ObjectiveError):
        combined_loss(0.0, l, None, None)
    with pytest.raises(ObjectiveError):
        combined_loss(0.5, l, None, None)
    with pytest.raises(ObjectiveError):
        combined_loss(1.5, l, l, l)


def test_loss_config_validation():
    with pytest.raises(ObjectiveError):
        LossConfig(alpha=-0.1)
    with pytest.raises(ObjectiveError):
        LossConfig(tau=0.0)
    with pytest.raises(ObjectiveError):
        LossConfig(distractors=-1)
    cfg = LossConfig()
    assert (cfg.alpha, cfg.tau, cfg.kappa, cfg.distractors, cfg.diversity_weight) == \
        (0.5, 0.07, 0.1, 10, 0.1)
