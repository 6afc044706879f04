"""Learned episode scheduler.

Pool layout: ``2 * n_pool`` subgraph embeddings stored pair-interleaved,
``[pair0_view1, pair0_view2, pair1_view1, ...]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .errors import BatchTooLarge, DegenerateBatch
from .relnet import EpisodeForwardResult

BASELINE_MOMENTUM = 0.9


@dataclass
class SchedulerParams:
    weights: dict[str, np.ndarray]
    baseline: float = 0.0
    momentum: float = BASELINE_MOMENTUM


def init_scheduler(d: int, rng: np.random.Generator, hidden: int | None = None) -> SchedulerParams:
    hidden = d if hidden is None else hidden
    w: dict[str, np.ndarray] = {}
    nn.init_mlp(w, "z1", (d, hidden, 1), rng)
    nn.init_mlp(w, "z2", (d, hidden, d), rng)
    return SchedulerParams(w)


def subgraph_embedding(result: EpisodeForwardResult, target_index: int | None = None) -> ad.Tensor:
    """g = h_target + sigmoid(sum of every other node's final state)."""
    h = result.states
    t = result.target_index if target_index is None else target_index
    others = [i for i in range(h.shape[0]) if i != t]
    pooled = ad.sum_(ad.take(h, others), axis=0)
    return ad.reshape(ad.take(h, [t]), (-1,)) + ad.sigmoid(pooled)


@dataclass
class PoolScores:
    raw: ad.Tensor          # (2 * n_pool,)
    eta: ad.Tensor          # softmax over subgraphs
    pair_probs: ad.Tensor   # (n_pool,), sums to one

    @property
    def n_pairs(self) -> int:
        return self.pair_probs.shape[0]


def raw_scores(embeddings, weights: Mapping[str, ad.Tensor]) -> ad.Tensor:
    """z1(g_t + z2(sum of the other pool embeddings)) for every subgraph."""
    G = ad.as_tensor(embeddings)
    n = G.shape[0]
    others = ad.matmul(np.ones((n, n), dtype=G.dtype) - np.eye(n, dtype=G.dtype), G)
    return ad.reshape(nn.mlp(weights, "z1", G + nn.mlp(weights, "z2", others)), (-1,))


def selection_probabilities(embeddings, weights: Mapping) -> PoolScores:
    """Selection probabilities for a pair-interleaved pool of embeddings.

    ``weights`` may hold plain arrays (no gradient) or tensors recorded on an
    active tape.
    """
    G = ad.as_tensor(embeddings)
    if G.shape[0] == 0 or G.shape[0] % 2:
        raise ValueError("pool embeddings must hold an even, non-zero number of rows")
    w = {k: ad.as_tensor(v) for k, v in weights.items()}
    raw = raw_scores(ad.detach(G), w)
    eta = ad.softmax(raw)
    n = G.shape[0]
    pair = (ad.take(eta, np.arange(0, n, 2)) + ad.take(eta, np.arange(1, n, 2))) * 0.5
    return PoolScores(raw, eta, pair / ad.sum_(pair, keepdims=True))


def select_batch(scores: PoolScores | ad.Tensor | np.ndarray, batch_size: int, rng: np.random.Generator,
                 targets: Sequence[int] | None = None) -> tuple[list[int], ad.Tensor]:
    """Sequential draws without replacement; returns indices and the selection log-probability.

    When ``targets`` is given, pairs sharing a target with an already drawn
    pair are excluded from later draws.
    """
    probs = scores.pair_probs if isinstance(scores, PoolScores) else ad.as_tensor(scores)
    n = probs.shape[0]
    if batch_size > n:
        raise BatchTooLarge(f"batch size {batch_size} exceeds pool size {n}")
    available = np.ones(n, dtype=bool)
    chosen: list[int] = []
    log_prob = None
    targets_arr = None if targets is None else np.asarray(targets)
    for _ in range(batch_size):
        if not available.any():
            raise DegenerateBatch("pool ran out of admissible pairs")
        p = np.where(available, probs.data, 0.0)
        p = p / p.sum()
        i = int(rng.choice(n, p=p))
        term = ad.log(ad.take(probs, [i])) - ad.log(ad.sum_(probs * available.astype(probs.dtype), keepdims=True))
        log_prob = term if log_prob is None else log_prob + term
        chosen.append(i)
        available[i] = False
        if targets_arr is not None:
            available &= targets_arr != targets_arr[i]
    return chosen, ad.reshape(log_prob, ())


def contrastive_loss(g1, g2, tau: float, standard: bool = False) -> ad.Tensor:
    """(1/B) sum_t -log(exp(s_tt / tau) / sum_{t' != t} exp(s_tt' / tau)), s = cosine similarity.

    With ``standard=True`` the positive pair is also kept in the denominator.
    """
    g1, g2 = ad.as_tensor(g1), ad.as_tensor(g2)
    if g1.ndim != 2 or g1.shape != g2.shape:
        raise ValueError(f"expected matching (B, d) views, got {g1.shape} and {g2.shape}")
    B, d = g1.shape
    if B < 2:
        raise DegenerateBatch("contrastive loss needs at least two pairs")
    sim = ad.cosine_similarity(ad.reshape(g1, (B, 1, d)), ad.reshape(g2, (1, B, d)))
    logits = sim * (1.0 / tau)
    eye = np.eye(B, dtype=g1.dtype)
    positive = ad.sum_(logits * eye, axis=1)
    mask = np.ones((B, B), dtype=g1.dtype) if standard else 1.0 - eye
    denominator = ad.sum_(ad.exp(logits) * mask, axis=1)
    return ad.mean(ad.log(denominator) - positive)


@dataclass
class Selection:
    indices: list[int]
    scores: PoolScores
    log_prob: ad.Tensor
    tape: ad.Tape = field(repr=False)
    leaves: dict[str, ad.Tensor] = field(repr=False)


def score_and_select(embeddings: np.ndarray, phi: SchedulerParams, batch_size: int,
                     rng: np.random.Generator, targets: Sequence[int] | None = None) -> Selection:
    """Score a pool and draw a batch on a fresh tape over the scheduler weights."""
    emb = np.asarray(embeddings)
    with ad.Tape() as tape:
        leaves = nn.as_leaves(phi.weights)
        scores = selection_probabilities(emb, leaves)
        indices, log_prob = select_batch(scores, batch_size, rng, targets)
    return Selection(indices, scores, log_prob, tape, leaves)


def scheduler_update(phi: SchedulerParams, selection: Selection, reward: float, lr: float) -> SchedulerParams:
    """phi <- phi + lr * grad(log P) * (R - b), then b <- m * b + (1 - m) * R."""
    reward = float(reward)
    advantage = reward - phi.baseline
    grads = ad.backward(selection.tape, selection.log_prob)
    weights = {
        k: v + lr * advantage * grads[selection.leaves[k]] if lr and advantage else v.copy()
        for k, v in phi.weights.items()
    }
    baseline = phi.momentum * phi.baseline + (1.0 - phi.momentum) * reward
    return SchedulerParams(weights, baseline, phi.momentum)
