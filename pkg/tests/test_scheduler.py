import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from gsmeta import autodiff as ad
from gsmeta.errors import BatchTooLarge, DegenerateBatch, ZeroVector
from gsmeta.relnet import EpisodeForwardResult
from gsmeta.scheduler import (
    contrastive_loss,
    init_scheduler,
    score_and_select,
    scheduler_update,
    select_batch,
    selection_probabilities,
    subgraph_embedding,
)

from oracles import contrastive_bruteforce, multinomial_within


def leaky(x):
    return np.where(x > 0, x, 0.01 * x)


def np_mlp(w, name, x):
    h = leaky(x @ w[f"{name}.0.w"] + w[f"{name}.0.b"])
    return h @ w[f"{name}.1.w"] + w[f"{name}.1.b"]


def brute_force_eta(G, w):
    n = len(G)
    raw = []
    for t in range(n):
        others = sum(G[s] for s in range(n) if s != t)
        raw.append(float(np_mlp(w, "z1", G[t] + np_mlp(w, "z2", others))[0]))
    e = [math.exp(r - max(raw)) for r in raw]
    return [x / sum(e) for x in e]


def result_with_states(h, n_support=2):
    return EpisodeForwardResult(ad.Tensor(h), ad.Tensor(np.zeros(n_support)), [], n_support, 0)


def test_embedding_of_zero_states_is_half():
    g = subgraph_embedding(result_with_states(np.zeros((5, 3))))
    np.testing.assert_array_equal(g.data, [0.5, 0.5, 0.5])


def test_embedding_three_node_hand_case():
    h = np.array([[0.2, -1.0], [0.5, 0.3], [1.5, 2.0]])
    g = subgraph_embedding(result_with_states(h)).data  # target at index 2
    s = h[0] + h[1]
    np.testing.assert_allclose(g, h[2] + 1 / (1 + np.exp(-s)), rtol=0, atol=1e-12)


@given(st.permutations(range(4)))
def test_embedding_ignores_order_of_others(perm):
    h = np.random.default_rng(0).normal(size=(5, 3))
    order = list(perm) + [4]
    a = subgraph_embedding(result_with_states(h, 4)).data
    b = subgraph_embedding(result_with_states(h[order], 4)).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)


def test_identical_embeddings_give_uniform_eta():
    phi = init_scheduler(4, np.random.default_rng(0))
    scores = selection_probabilities(np.ones((6, 4)), phi.weights)
    np.testing.assert_allclose(scores.eta.data, 1 / 6, atol=1e-15)
    np.testing.assert_allclose(scores.pair_probs.data, 1 / 3, atol=1e-15)


def test_zero_raw_scores_split_evenly():
    np.testing.assert_array_equal(ad.softmax(ad.Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_eta_matches_bruteforce_and_sums_to_one():
    rng = np.random.default_rng(1)
    for _ in range(50):
        d = int(rng.integers(2, 6))
        n_pool = int(rng.integers(1, 6))
        phi = init_scheduler(d, rng)
        G = rng.normal(size=(2 * n_pool, d))
        scores = selection_probabilities(G, phi.weights)
        np.testing.assert_allclose(scores.eta.data, brute_force_eta(list(G), phi.weights), rtol=0, atol=1e-10)
        assert abs(scores.eta.data.sum() - 1) < 1e-9 and np.all(scores.eta.data > 0)
        pair = (scores.eta.data[0::2] + scores.eta.data[1::2]) / 2
        np.testing.assert_allclose(scores.pair_probs.data, pair / pair.sum(), atol=1e-12)


def test_exhaustive_batch_selects_everything():
    idx, _ = select_batch(np.array([0.1, 0.2, 0.3, 0.4]), 4, np.random.default_rng(0))
    assert sorted(idx) == [0, 1, 2, 3]


def test_batch_too_large():
    with pytest.raises(BatchTooLarge):
        select_batch(np.array([0.5, 0.5]), 3, np.random.default_rng(0))


def test_degenerate_distribution():
    rng = np.random.default_rng(0)
    firsts = [select_batch(np.array([1 - 2e-12, 1e-12, 1e-12]), 2, rng)[0][0] for _ in range(200)]
    assert firsts == [0] * 200


def test_log_probability_of_sequential_draws():
    probs = np.array([0.5, 0.3, 0.2])
    idx, logp = select_batch(probs, 2, np.random.default_rng(4))
    a, b = idx
    assert abs(logp.item() - (math.log(probs[a]) + math.log(probs[b] / (1 - probs[a])))) < 1e-12


def test_duplicate_targets_excluded():
    rng = np.random.default_rng(0)
    for _ in range(50):
        idx, _ = select_batch(np.full(4, 0.25), 2, rng, targets=[7, 7, 8, 8])
        assert {i // 2 for i in idx} == {0, 1}
    with pytest.raises(DegenerateBatch):
        select_batch(np.full(4, 0.25), 3, rng, targets=[7, 7, 8, 8])


def test_multinomial_frequencies():
    rng = np.random.default_rng(0)
    probs = np.array([0.5, 0.3, 0.2])
    n = 20_000
    counts = np.bincount([select_batch(probs, 1, rng)[0][0] for _ in range(n)], minlength=3)
    assert multinomial_within(counts, probs, n)


def test_contrastive_all_identical_is_log_b_minus_one():
    for B in range(2, 9):
        g = np.tile([0.3, -1.2, 2.0], (B, 1))
        assert abs(contrastive_loss(g, g, 0.08).item() - math.log(B - 1)) < 1e-12


def test_contrastive_orthogonal_pairs():
    g = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert abs(contrastive_loss(g, g, 1.0).item() - (-1.0)) < 1e-12


def test_contrastive_matches_bruteforce():
    rng = np.random.default_rng(2)
    for _ in range(100):
        B, d = int(rng.integers(2, 6)), int(rng.integers(1, 5))
        g1, g2 = rng.normal(size=(B, d)), rng.normal(size=(B, d))
        tau = float(rng.uniform(0.05, 2.0))
        for standard in (False, True):
            ref = contrastive_bruteforce(g1.tolist(), g2.tolist(), tau, standard)
            assert abs(contrastive_loss(g1, g2, tau, standard).item() - ref) < 1e-10


@given(arrays(np.float64, (3, 4), elements=st.floats(0.1, 3)), arrays(np.float64, (3, 4), elements=st.floats(0.1, 3)),
       st.floats(0.01, 100))
def test_contrastive_scale_invariant(g1, g2, c):
    a = contrastive_loss(g1, g2, 0.5).item()
    b = contrastive_loss(g1 * c, g2 * c, 0.5).item()
    assert abs(a - b) < 1e-9 * max(1, abs(a))


def test_contrastive_not_symmetrized():
    rng = np.random.default_rng(3)
    g1, g2 = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    assert abs(contrastive_loss(g1, g2, 0.5).item() - contrastive_loss(g2, g1, 0.5).item()) > 1e-6


def test_contrastive_errors():
    with pytest.raises(DegenerateBatch):
        contrastive_loss(np.ones((1, 3)), np.ones((1, 3)), 0.1)
    with pytest.raises(ZeroVector):
        contrastive_loss(np.zeros((2, 3)), np.ones((2, 3)), 0.1)


def select(phi, G, rng, B=1):
    return score_and_select(G, phi, B, rng)


def test_zero_advantage_keeps_weights():
    rng = np.random.default_rng(0)
    phi = init_scheduler(3, rng)
    phi.baseline = 0.7
    new = scheduler_update(phi, select(phi, rng.normal(size=(4, 3)), rng), 0.7, 0.1)
    for k in phi.weights:
        np.testing.assert_array_equal(new.weights[k], phi.weights[k])


def test_zero_rate_updates_only_baseline():
    rng = np.random.default_rng(0)
    phi = init_scheduler(3, rng)
    phi.baseline = 1.0
    new = scheduler_update(phi, select(phi, rng.normal(size=(4, 3)), rng), 3.0, 0.0)
    for k in phi.weights:
        np.testing.assert_array_equal(new.weights[k], phi.weights[k])
    assert abs(new.baseline - (0.9 * 1.0 + 0.1 * 3.0)) < 1e-15


def test_positive_advantage_raises_chosen_probability():
    rng = np.random.default_rng(5)
    phi = init_scheduler(3, rng)
    G = rng.normal(size=(4, 3))
    sel = select(phi, G, rng)
    chosen = sel.indices[0]
    before = sel.scores.pair_probs.data[chosen]
    new = scheduler_update(phi, sel, 1.0, 1e-3)
    after = selection_probabilities(G, new.weights).pair_probs.data[chosen]
    assert after > before


def test_update_follows_log_probability_gradient():
    rng = np.random.default_rng(6)
    phi = init_scheduler(3, rng)
    G = rng.normal(size=(6, 3))
    sel = select(phi, G, rng, B=2)
    lr, reward = 0.01, 2.0
    new = scheduler_update(phi, sel, reward, lr)
    # first-order check: the log-probability of the same draw rises by ~ lr * R * |grad|^2
    def logp(w):
        p = selection_probabilities(G, w).pair_probs.data
        a, b = sel.indices
        return math.log(p[a]) + math.log(p[b] / (1 - p[a]))
    gain = logp(new.weights) - logp(phi.weights)
    sq = sum(float(((new.weights[k] - phi.weights[k]) ** 2).sum()) for k in phi.weights) / (lr * reward)
    assert abs(gain - sq) < 0.05 * sq


def test_fixed_reward_raises_favoured_pair():
    rng = np.random.default_rng(0)
    phi = init_scheduler(4, rng)
    G = rng.normal(size=(8, 4))
    favoured = 2
    history = [selection_probabilities(G, phi.weights).pair_probs.data[favoured]]
    for _ in range(200):
        sel = select(phi, G, rng)
        reward = phi.baseline + (1.0 if sel.indices[0] == favoured else 0.0)
        phi = scheduler_update(phi, sel, reward, 0.05)
        history.append(selection_probabilities(G, phi.weights).pair_probs.data[favoured])
    history = np.array(history)
    assert history[-1] - history[0] >= 0.1
    assert np.corrcoef(np.arange(len(history)), history)[0, 1] > 0.8
