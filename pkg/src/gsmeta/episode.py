"""Episodes as subgraphs of the relation graph.

An episode holds one target property, ``2K`` support molecules (``K`` per
class), ``M`` query molecules and ``N_a`` auxiliary properties drawn from the
training properties. Edge types are stored exactly as in the graph; the query
labels on the target are hidden only when a forward pass asks for
:meth:`EpisodeSubgraph.visible_edge_types`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, InsufficientMolecules, NoEligibleProperty, TargetNotInSplit
from .mpg import MPG, EdgeType, PropertySplit

_CLASS_NAMES = {1: "active", 0: "inactive"}


@dataclass(frozen=True, eq=False)
class EpisodeSubgraph:
    target: int
    support: np.ndarray
    support_labels: np.ndarray
    query: np.ndarray
    query_labels: np.ndarray
    auxiliary: np.ndarray
    edge_types: np.ndarray  # (molecules, 1 + N_a): target column first
    cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def molecules(self) -> np.ndarray:
        return np.concatenate([self.support, self.query])

    @property
    def properties(self) -> np.ndarray:
        return np.concatenate([[self.target], self.auxiliary]).astype(np.intp)

    @property
    def n_support(self) -> int:
        return len(self.support)

    @property
    def n_query(self) -> int:
        return len(self.query)

    @property
    def n_nodes(self) -> int:
        return len(self.support) + len(self.query) + 1 + len(self.auxiliary)

    def edges(self) -> list[tuple[int, int, EdgeType]]:
        mols = self.molecules
        props = self.properties
        return [
            (int(m), int(p), EdgeType(int(self.edge_types[i, j])))
            for i, m in enumerate(mols)
            for j, p in enumerate(props)
        ]

    def visible_edge_types(self) -> np.ndarray:
        """Edge types with the query molecules' target labels replaced by unk."""
        visible = np.array(self.edge_types)
        visible[self.n_support:, 0] = int(EdgeType.UNK)
        return visible

    def without_query(self) -> "EpisodeSubgraph":
        k = self.n_support
        return EpisodeSubgraph(
            self.target, self.support, self.support_labels,
            self.query[:0], self.query_labels[:0], self.auxiliary, self.edge_types[:k],
        )

    def with_query(self, query: Sequence[int], query_labels: Sequence[int], mpg: MPG) -> "EpisodeSubgraph":
        query = np.asarray(query, dtype=np.intp)
        return make_episode(mpg, self.target, self.support, self.support_labels,
                            query, query_labels, self.auxiliary)


def make_episode(mpg: MPG, target: int, support, support_labels, query, query_labels,
                 auxiliary) -> EpisodeSubgraph:
    support = np.asarray(support, dtype=np.intp)
    query = np.asarray(query, dtype=np.intp)
    auxiliary = np.asarray(auxiliary, dtype=np.intp)
    if np.any(auxiliary == target):
        raise ConfigError("auxiliary properties must exclude the target")
    props = np.concatenate([[target], auxiliary]).astype(np.intp)
    mols = np.concatenate([support, query])
    edge_types = np.array(mpg.edge_types[np.ix_(mols, props)])
    return EpisodeSubgraph(
        int(target), support, np.asarray(support_labels, dtype=np.float64),
        query, np.asarray(query_labels, dtype=np.float64), auxiliary, edge_types,
    )


def _check_counts(mpg: MPG, target: int, need: int) -> tuple[np.ndarray, np.ndarray]:
    actives = mpg.molecules_with_label(target, 1)
    inactives = mpg.molecules_with_label(target, 0)
    for label, ids in ((1, actives), (0, inactives)):
        if len(ids) < need:
            raise InsufficientMolecules(
                f"property {target} has {len(ids)} {_CLASS_NAMES[label]} molecules, need {need}",
                label=_CLASS_NAMES[label],
            )
    return actives, inactives


def sample_auxiliary(candidates: Sequence[int], n_aux: int, rng: np.random.Generator) -> np.ndarray:
    candidates = np.asarray(candidates, dtype=np.intp)
    if n_aux > len(candidates):
        raise ConfigError(f"requested {n_aux} auxiliary properties, only {len(candidates)} available")
    if n_aux == 0:
        return np.zeros(0, dtype=np.intp)
    return rng.choice(candidates, size=n_aux, replace=False)


def sample_episode(mpg: MPG, split: PropertySplit, target: int, k_shot: int, n_query: int,
                   n_aux: int, rng: np.random.Generator) -> EpisodeSubgraph:
    """Sample a training episode centred on train property ``target``."""
    if target not in split.train:
        raise TargetNotInSplit(f"property {target} is not a training property")
    if k_shot < 1 or n_query < 0:
        raise ConfigError("k_shot must be >= 1 and n_query >= 0")
    actives, inactives = _check_counts(mpg, target, k_shot + n_query)
    sup_a = rng.choice(actives, size=k_shot, replace=False)
    sup_i = rng.choice(inactives, size=k_shot, replace=False)
    remaining = {1: np.setdiff1d(actives, sup_a), 0: np.setdiff1d(inactives, sup_i)}
    query, query_labels = [], []
    for _ in range(n_query):
        label = int(rng.integers(2))
        pool = remaining[label]
        pick = int(rng.integers(len(pool)))
        query.append(int(pool[pick]))
        query_labels.append(label)
        remaining[label] = np.delete(pool, pick)
    aux_candidates = [p for p in split.train if p != target]
    auxiliary = sample_auxiliary(aux_candidates, n_aux, rng)
    support = np.concatenate([sup_a, sup_i])
    support_labels = np.concatenate([np.ones(k_shot), np.zeros(k_shot)])
    return make_episode(mpg, target, support, support_labels, query, query_labels, auxiliary)


def eligible_targets(mpg: MPG, split: PropertySplit, k_shot: int, n_query: int) -> list[int]:
    need = k_shot + n_query
    return [
        p for p in split.train
        if len(mpg.molecules_with_label(p, 1)) >= need and len(mpg.molecules_with_label(p, 0)) >= need
    ]


def sample_candidate_pool(mpg: MPG, split: PropertySplit, n_pool: int, k_shot: int, n_query: int,
                          n_aux: int, rng: np.random.Generator,
                          min_distinct_targets: int = 1) -> list[tuple[EpisodeSubgraph, EpisodeSubgraph]]:
    """``n_pool`` pairs of independently sampled episodes sharing a target.

    Targets are drawn uniformly with replacement from eligible training
    properties; when ``min_distinct_targets`` > 1 the draw is repeated until
    the pool covers that many distinct targets.
    """
    eligible = eligible_targets(mpg, split, k_shot, n_query)
    if not eligible:
        raise NoEligibleProperty(f"no training property has {k_shot + n_query} molecules per class")
    if min_distinct_targets > min(len(eligible), n_pool):
        raise ConfigError(
            f"cannot draw {min_distinct_targets} distinct targets from {len(eligible)} eligible properties"
        )
    while True:
        targets = rng.choice(eligible, size=n_pool, replace=True)
        if len(set(targets.tolist())) >= min_distinct_targets:
            break
    return [
        (sample_episode(mpg, split, int(t), k_shot, n_query, n_aux, rng),
         sample_episode(mpg, split, int(t), k_shot, n_query, n_aux, rng))
        for t in targets
    ]
