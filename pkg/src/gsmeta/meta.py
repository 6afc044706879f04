"""Bi-level training loop, meta-test finetuning and ROC-AUC evaluation.

The outer gradient is first-order: each query-loss gradient is taken at the
adapted parameters and applied to the shared ones.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .episode import (
    EpisodeSubgraph,
    make_episode,
    sample_auxiliary,
    sample_candidate_pool,
)
from .errors import ConfigError, InsufficientMolecules, NumericalDivergence, SingleClass
from .mpg import MPG, PropertySplit
from .relnet import ModelConfig, bce_loss, forward_episode, init_params
from .scheduler import (
    SchedulerParams,
    contrastive_loss,
    init_scheduler,
    score_and_select,
    scheduler_update,
    subgraph_embedding,
)

log = logging.getLogger(__name__)

AUX_CAP = 20

STREAMS = {"graph": 0, "init": 1, "sampling": 2, "selection": 3, "masking": 4, "eval": 5}


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named sub-stream of ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(STREAMS[name],)))


@dataclass(frozen=True)
class TrainConfig:
    k_shot: int = 10
    n_query: int = 1
    n_aux: int | None = None          # None: every other train property, capped
    n_aux_test: int | None = None     # None: every train property, capped
    aux_cap: int = AUX_CAP
    n_pool: int = 10
    batch_size: int = 5
    gnn_layers: int = 2
    encoder_layers: int = 5
    d: int = 300
    top_k: int | None = None          # None: 1 for 1-shot, k_shot - 1 otherwise
    inner_lr: float = 0.05
    outer_lr: float = 0.001
    scheduler_lr: float = 0.0005
    temperature: float = 0.08
    contrastive_weight: float = 0.05
    max_steps: int = 2000
    eval_interval: int = 100
    inner_steps: int = 1
    test_inner_steps: int = 1
    seed: int = 0
    no_m2m: bool = False
    no_edge_types: bool = False
    no_scheduler: bool = False
    no_contrastive: bool = False
    ntxent_standard: bool = False
    forbid_duplicate_targets: bool = False
    joint_query: bool = True
    baseline_momentum: float = 0.9
    outer_optimizer: str = "adam"
    dtype: str = "float64"

    def __post_init__(self):
        for name in ("inner_lr", "outer_lr", "scheduler_lr", "temperature"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.contrastive_weight < 0:
            raise ConfigError("contrastive_weight must be non-negative")
        if self.batch_size > self.n_pool:
            raise ConfigError("batch_size must not exceed n_pool")
        if self.k_shot < 1 or self.n_query < 1 or self.batch_size < 1:
            raise ConfigError("k_shot, n_query and batch_size must be >= 1")
        if self.inner_steps < 1 or self.test_inner_steps < 1 or self.max_steps < 0:
            raise ConfigError("step counts must be >= 1")
        if self.outer_optimizer not in OPTIMIZERS:
            raise ConfigError(f"outer_optimizer must be one of {', '.join(OPTIMIZERS)}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")
        if not 0 <= self.baseline_momentum < 1:
            raise ConfigError("baseline_momentum must be in [0, 1)")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    @property
    def effective_top_k(self) -> int:
        if self.top_k is not None:
            return self.top_k
        return 1 if self.k_shot == 1 else self.k_shot - 1

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            d=self.d, encoder_layers=self.encoder_layers, gnn_layers=self.gnn_layers,
            top_k=self.effective_top_k, no_m2m=self.no_m2m, no_edge_types=self.no_edge_types,
        )

    def train_aux_count(self, n_train: int) -> int:
        n = n_train - 1 if self.n_aux is None else self.n_aux
        return max(0, min(n, self.aux_cap, n_train - 1))

    def test_aux_count(self, n_train: int) -> int:
        n = n_train if self.n_aux_test is None else self.n_aux_test
        return max(0, min(n, self.aux_cap, n_train))


Params = dict[str, np.ndarray]


# outer-loop optimizers ----------------------------------------------------


class GradientDescent:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, theta: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> Params:
        return {k: v - self.lr * grads[k] for k, v in theta.items()}


class Adam:
    """Adam with bias correction; state is keyed by parameter name."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: Params = {}
        self.v: Params = {}

    def step(self, theta: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> Params:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        out = {}
        for k, v in theta.items():
            g = grads[k]
            m = self.m[k] = self.beta1 * self.m.get(k, 0.0) + (1.0 - self.beta1) * g
            s = self.v[k] = self.beta2 * self.v.get(k, 0.0) + (1.0 - self.beta2) * g * g
            out[k] = v - self.lr * (m / c1) / (np.sqrt(s / c2) + self.eps)
        return out


OPTIMIZERS = {"adam": Adam, "sgd": GradientDescent}


def make_optimizer(cfg: "TrainConfig"):
    return OPTIMIZERS[cfg.outer_optimizer](cfg.outer_lr)


# inner / outer loop -------------------------------------------------------


def _loss_and_grad(theta: Mapping[str, np.ndarray], loss_fn: Callable) -> tuple[float, Params]:
    with ad.Tape() as tape:
        leaves = nn.as_leaves(theta)
        loss = loss_fn(leaves)
    grads = ad.backward(tape, loss)
    return loss.item(), {k: grads[t] for k, t in leaves.items()}


def episode_support_loss(ep: EpisodeSubgraph, mpg: MPG, mcfg: ModelConfig, joint_query: bool = True):
    view = ep if joint_query else ep.without_query()

    def fn(p):
        res = forward_episode(view, mpg, p, mcfg)
        return bce_loss(view.support_labels, res.support_predictions)

    return fn


def episode_query_loss(ep: EpisodeSubgraph, mpg: MPG, mcfg: ModelConfig):
    def fn(p):
        res = forward_episode(ep, mpg, p, mcfg)
        return bce_loss(ep.query_labels, res.query_predictions)

    return fn


def inner_adapt(theta: Mapping[str, np.ndarray], ep: EpisodeSubgraph, mpg: MPG, mcfg: ModelConfig,
                lr: float, steps: int = 1, joint_query: bool = True) -> Params:
    """``steps`` gradient-descent updates on the episode's support loss; ``theta`` is not modified."""
    if steps < 1:
        raise ConfigError("inner loop needs at least one step")
    loss_fn = episode_support_loss(ep, mpg, mcfg, joint_query)
    current: Params = dict(theta)
    for _ in range(steps):
        _, grads = _loss_and_grad(current, loss_fn)
        current = {k: v - lr * grads[k] for k, v in current.items()}
    return current


def contrastive_term(theta: Mapping[str, np.ndarray], pairs: Sequence[tuple[EpisodeSubgraph, EpisodeSubgraph]],
                     mpg: MPG, mcfg: ModelConfig, tau: float, standard: bool = False) -> tuple[float, Params]:
    """Contrastive loss over the batch under shared parameters, and its gradient."""

    def fn(p):
        g1 = [subgraph_embedding(forward_episode(a, mpg, p, mcfg)) for a, _ in pairs]
        g2 = [subgraph_embedding(forward_episode(b, mpg, p, mcfg)) for _, b in pairs]
        return _batch_contrastive(g1, g2, tau, standard)

    return _loss_and_grad(theta, fn)


def _batch_contrastive(g1: Sequence[ad.Tensor], g2: Sequence[ad.Tensor], tau: float, standard: bool) -> ad.Tensor:
    d = g1[0].shape[0]
    G1 = ad.concat([ad.reshape(g, (1, d)) for g in g1], axis=0)
    G2 = ad.concat([ad.reshape(g, (1, d)) for g in g2], axis=0)
    return contrastive_loss(G1, G2, tau, standard)


@dataclass
class OuterStepResult:
    theta: Params
    meta_loss: float
    query_loss: float
    contrastive: float | None
    query_losses: list[float]


def outer_step(theta: Mapping[str, np.ndarray], pairs: Sequence[tuple[EpisodeSubgraph, EpisodeSubgraph]],
               mpg: MPG, cfg: TrainConfig, contrastive: tuple[float, Params] | None = None,
               use_contrastive: bool | None = None, optimizer=None) -> OuterStepResult:
    """One meta-update over a batch of episode pairs.

    ``contrastive`` may carry a precomputed (value, gradient) for the
    contrastive term under ``theta``; otherwise it is computed here unless
    disabled. Without an ``optimizer`` the update is a plain gradient step
    at ``cfg.outer_lr``.
    """
    mcfg = cfg.model_config()
    if use_contrastive is None:
        use_contrastive = not cfg.no_contrastive
    B = len(pairs)
    total = {k: np.zeros_like(v) for k, v in theta.items()}
    losses = []
    for pair in pairs:
        for ep in pair:
            adapted = inner_adapt(theta, ep, mpg, mcfg, cfg.inner_lr, cfg.inner_steps, cfg.joint_query)
            loss, grads = _loss_and_grad(adapted, episode_query_loss(ep, mpg, mcfg))
            losses.append(loss)
            for k in total:
                total[k] += grads[k]
    scale = 1.0 / (2 * B)
    for k in total:
        total[k] *= scale
    query_loss = float(sum(losses)) * scale
    ctr_value = None
    meta_loss = query_loss
    if use_contrastive:
        if contrastive is None:
            contrastive = contrastive_term(theta, pairs, mpg, mcfg, cfg.temperature, cfg.ntxent_standard)
        ctr_value, ctr_grads = contrastive
        lam = cfg.contrastive_weight
        for k in total:
            total[k] += lam * ctr_grads[k]
        meta_loss = query_loss + lam * ctr_value
    optimizer = GradientDescent(cfg.outer_lr) if optimizer is None else optimizer
    new_theta = optimizer.step(theta, total)
    return OuterStepResult(new_theta, meta_loss, query_loss, ctr_value, losses)


# training -----------------------------------------------------------------


@dataclass
class TrainResult:
    theta: Params
    phi: SchedulerParams
    log: list[dict]
    coselection: np.ndarray
    train_properties: tuple[int, ...]


def init_model(mpg: MPG, cfg: TrainConfig) -> tuple[Params, SchedulerParams]:
    rng = rng_stream(cfg.seed, "init")
    theta = init_params(cfg.model_config(), mpg.property_embeddings, rng)
    phi = init_scheduler(cfg.d, rng)
    phi.momentum = cfg.baseline_momentum
    if cfg.dtype == "float32":
        theta = nn.cast_params(theta, np.float32)
        phi.weights = nn.cast_params(phi.weights, np.float32)
    return theta, phi


def _pool_forward(theta, pool, mpg, mcfg):
    """Forward every pool subgraph under shared parameters on one tape."""
    tape = ad.Tape()
    with tape:
        leaves = nn.as_leaves(theta)
        embeddings = [
            subgraph_embedding(forward_episode(ep, mpg, leaves, mcfg))
            for pair in pool for ep in pair
        ]
    return tape, leaves, embeddings


def _uniform_selection(n_pool: int, batch_size: int, rng: np.random.Generator,
                       targets: Sequence[int] | None) -> list[int]:
    if targets is None:
        return [int(i) for i in rng.choice(n_pool, size=batch_size, replace=False)]
    available = np.ones(n_pool, dtype=bool)
    targets = np.asarray(targets)
    chosen = []
    for _ in range(batch_size):
        i = int(rng.choice(np.flatnonzero(available)))
        chosen.append(i)
        available &= targets != targets[i]
    return chosen


def coselection_update(matrix: np.ndarray, targets: Sequence[int], index: Mapping[int, int]) -> None:
    """Count every unordered pair of batch slots by their target properties."""
    for a in range(len(targets)):
        for b in range(a + 1, len(targets)):
            i, j = index[targets[a]], index[targets[b]]
            if i == j:
                matrix[i, i] += 1
            else:
                matrix[i, j] += 1
                matrix[j, i] += 1


def _finite(*values) -> bool:
    return all(v is None or math.isfinite(v) for v in values)


def train(mpg: MPG, split: PropertySplit, cfg: TrainConfig, theta: Params | None = None,
          phi: SchedulerParams | None = None, on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Meta-train on the split's training properties.

    Each step: sample a candidate pool, score it, select ``batch_size`` pairs,
    adapt on each support set, take the outer step and update the scheduler.
    Test properties are evaluated every ``eval_interval`` steps (0 disables).
    """
    if cfg.batch_size >= 2 and len(split.train) < 2 and not cfg.no_contrastive:
        raise ConfigError("contrastive training with batch_size >= 2 needs at least two train properties")
    if theta is None or phi is None:
        init_theta, init_phi = init_model(mpg, cfg)
        theta = init_theta if theta is None else theta
        phi = init_phi if phi is None else phi
    mcfg = cfg.model_config()
    sampling = rng_stream(cfg.seed, "sampling")
    selection_rng = rng_stream(cfg.seed, "selection")
    n_train = len(split.train)
    n_aux = cfg.train_aux_count(n_train)
    min_distinct = cfg.batch_size if cfg.forbid_duplicate_targets else 1
    index = {p: k for k, p in enumerate(split.train)}
    coselection = np.zeros((n_train, n_train), dtype=np.int64)
    use_ctr = not cfg.no_contrastive
    optimizer = make_optimizer(cfg)
    records: list[dict] = []

    for step in range(cfg.max_steps):
        pool = sample_candidate_pool(mpg, split, cfg.n_pool, cfg.k_shot, cfg.n_query, n_aux,
                                     sampling, min_distinct_targets=min_distinct)
        targets = [a.target for a, _ in pool]
        dup_guard = targets if cfg.forbid_duplicate_targets else None
        contrastive = None
        selection = None
        if cfg.no_scheduler:
            chosen = _uniform_selection(cfg.n_pool, cfg.batch_size, selection_rng, dup_guard)
        else:
            tape, leaves, embeddings = _pool_forward(theta, pool, mpg, mcfg)
            pool_emb = np.stack([e.data for e in embeddings])
            if not np.all(np.isfinite(pool_emb)):
                raise NumericalDivergence(f"non-finite subgraph embedding at step {step}")
            selection = score_and_select(pool_emb, phi, cfg.batch_size, selection_rng, dup_guard)
            chosen = selection.indices
            if use_ctr:
                with tape:
                    loss = _batch_contrastive([embeddings[2 * i] for i in chosen],
                                              [embeddings[2 * i + 1] for i in chosen],
                                              cfg.temperature, cfg.ntxent_standard)
                grads = ad.backward(tape, loss)
                contrastive = (loss.item(), {k: grads[t] for k, t in leaves.items()})
        batch = [pool[i] for i in chosen]
        result = outer_step(theta, batch, mpg, cfg, contrastive, use_contrastive=use_ctr, optimizer=optimizer)
        if not _finite(result.meta_loss, result.contrastive):
            raise NumericalDivergence(f"non-finite loss at step {step}")
        theta = result.theta
        record = {
            "step": step,
            "meta_loss": result.meta_loss,
            "query_loss": result.query_loss,
            "contrastive": result.contrastive,
            "targets": [int(pool[i][0].target) for i in chosen],
        }
        if selection is not None:
            reward = result.contrastive if use_ctr else 0.0
            phi = scheduler_update(phi, selection, reward, cfg.scheduler_lr)
            record["reward"] = reward
            record["baseline"] = phi.baseline
        coselection_update(coselection, record["targets"], index)
        if cfg.eval_interval and (step + 1) % cfg.eval_interval == 0 and split.test:
            eval_rng = rng_stream(cfg.seed, "eval")
            record["eval_auc"] = {
                int(p): finetune_and_evaluate(theta, mpg, split, p, cfg, eval_rng) for p in split.test
            }
        records.append(record)
        if on_step is not None:
            on_step(record)
        log.debug("step %d meta_loss %.6f", step, result.meta_loss)
    return TrainResult(theta, phi, records, coselection, tuple(split.train))


# evaluation ---------------------------------------------------------------


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """(concordant + 0.5 * tied) / (positives * negatives), via average ranks."""
    from scipy.stats import rankdata

    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int(len(labels) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("ROC-AUC needs both classes present")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def support_episode(mpg: MPG, split: PropertySplit, prop: int, cfg: TrainConfig,
                    rng: np.random.Generator) -> EpisodeSubgraph:
    k = cfg.k_shot
    actives = mpg.molecules_with_label(prop, 1)
    inactives = mpg.molecules_with_label(prop, 0)
    for name, ids in (("active", actives), ("inactive", inactives)):
        if len(ids) < k:
            raise InsufficientMolecules(f"property {prop} has {len(ids)} {name} molecules, need {k}", label=name)
    support = np.concatenate([rng.choice(actives, size=k, replace=False),
                              rng.choice(inactives, size=k, replace=False)])
    labels = np.concatenate([np.ones(k), np.zeros(k)])
    aux = sample_auxiliary(split.train, cfg.test_aux_count(len(split.train)), rng)
    return make_episode(mpg, prop, support, labels, [], [], aux)


def score_queries(theta: Mapping[str, np.ndarray], support_ep: EpisodeSubgraph, queries: Sequence[int],
                  mpg: MPG, mcfg: ModelConfig) -> np.ndarray:
    """Predicted active-probability for each query, each in its own subgraph."""
    p = nn.as_leaves(theta, requires_grad=False)
    dummy = [0.0]
    out = np.empty(len(queries))
    for n, q in enumerate(queries):
        ep = support_ep.with_query([q], dummy, mpg)
        out[n] = forward_episode(ep, mpg, p, mcfg).query_predictions.data[0]
    return out


def finetune_and_evaluate(theta: Mapping[str, np.ndarray], mpg: MPG, split: PropertySplit, prop: int,
                          cfg: TrainConfig, rng: np.random.Generator, return_scores: bool = False):
    """Finetune a copy of ``theta`` on a K-shot support set of ``prop`` and score the rest."""
    mcfg = cfg.model_config()
    sup = support_episode(mpg, split, prop, cfg, rng)
    adapted = inner_adapt(theta, sup, mpg, mcfg, cfg.inner_lr, cfg.test_inner_steps, joint_query=False)
    labeled = mpg.labeled_molecules(prop)
    queries = np.setdiff1d(labeled, sup.support)
    labels = mpg.dataset.labels[queries, prop].astype(int)
    scores = score_queries(adapted, sup, queries, mpg, mcfg)
    auc = roc_auc(scores, labels)
    if return_scores:
        return auc, scores, labels
    return auc


@dataclass
class EvalReport:
    per_seed: dict[int, dict[int, float]] = field(default_factory=dict)

    def add(self, seed: int, aucs: Mapping[int, float]) -> None:
        self.per_seed[seed] = dict(aucs)

    def properties(self) -> list[int]:
        props: set[int] = set()
        for aucs in self.per_seed.values():
            props |= set(aucs)
        return sorted(props)

    def aggregate(self) -> dict[int, tuple[float, float, int]]:
        """property -> (mean, std, n); sample std for n > 1, 0 for a single seed."""
        out = {}
        for p in self.properties():
            vals = np.array([a[p] for a in self.per_seed.values() if p in a])
            std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
            out[p] = (float(np.mean(vals)), std, len(vals))
        return out

    def mean_auc(self) -> float:
        return float(np.mean([np.mean(list(a.values())) for a in self.per_seed.values()]))


def evaluate(theta: Mapping[str, np.ndarray], mpg: MPG, split: PropertySplit, cfg: TrainConfig,
             rng: np.random.Generator | None = None) -> dict[int, float]:
    rng = rng_stream(cfg.seed, "eval") if rng is None else rng
    return {int(p): finetune_and_evaluate(theta, mpg, split, p, cfg, rng) for p in split.test}
