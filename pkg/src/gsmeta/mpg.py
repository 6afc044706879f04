"""Molecule-property relation graph and the train/test property split."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .chem import FeaturizedMolecule, featurize, parse_smiles
from .errors import BadSplitSize, DataError, EmptyDataset


class EdgeType(enum.IntEnum):
    ACTIVE = 0
    INACTIVE = 1
    UNK = 2
    MOL2MOL = 3


N_EDGE_TYPES = len(EdgeType)


@dataclass(frozen=True)
class Dataset:
    """Molecules x properties label matrix; ``nan`` marks a missing label."""

    molecules: tuple[str, ...]
    properties: tuple[str, ...]
    labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "molecules", tuple(self.molecules))
        object.__setattr__(self, "properties", tuple(self.properties))
        labels = np.array(self.labels, dtype=np.float64)
        if labels.shape != (len(self.molecules), len(self.properties)):
            raise DataError(
                f"label matrix shape {labels.shape} does not match "
                f"{len(self.molecules)} molecules x {len(self.properties)} properties"
            )
        present = labels[~np.isnan(labels)]
        if not np.all((present == 0) | (present == 1)):
            raise DataError("labels must be 0, 1 or missing")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def n_molecules(self) -> int:
        return len(self.molecules)

    @property
    def n_properties(self) -> int:
        return len(self.properties)

    def missing_count(self) -> int:
        return int(np.isnan(self.labels).sum())


@dataclass(frozen=True)
class PropertySplit:
    train: tuple[int, ...]
    test: tuple[int, ...]

    def __post_init__(self):
        if set(self.train) & set(self.test):
            raise BadSplitSize("train and test properties overlap")


def edge_types_from_labels(labels: np.ndarray) -> np.ndarray:
    types = np.full(labels.shape, int(EdgeType.UNK), dtype=np.int8)
    types[labels == 1] = int(EdgeType.ACTIVE)
    types[labels == 0] = int(EdgeType.INACTIVE)
    return types


@dataclass(frozen=True)
class MPG:
    """Bipartite graph with one typed edge per (molecule, property) pair.

    Molecule nodes are ``0..n_molecules-1``; property nodes follow. The edge
    list is implicit in ``edge_types`` (molecule x property).
    """

    dataset: Dataset
    features: tuple[FeaturizedMolecule, ...]
    edge_types: np.ndarray
    property_embeddings: np.ndarray
    _by_label: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_molecules(self) -> int:
        return self.dataset.n_molecules

    @property
    def n_properties(self) -> int:
        return self.dataset.n_properties

    @property
    def n_nodes(self) -> int:
        return self.n_molecules + self.n_properties

    @property
    def n_edges(self) -> int:
        return int(self.edge_types.size)

    def edge_type(self, molecule: int, prop: int) -> EdgeType:
        return EdgeType(int(self.edge_types[molecule, prop]))

    def edge_counts(self) -> dict[EdgeType, int]:
        return {t: int((self.edge_types == t).sum()) for t in (EdgeType.ACTIVE, EdgeType.INACTIVE, EdgeType.UNK)}

    def molecules_with_label(self, prop: int, label: int) -> np.ndarray:
        """Molecule ids whose label on ``prop`` equals ``label`` (ascending)."""
        key = (prop, label)
        if key not in self._by_label:
            col = self.dataset.labels[:, prop]
            ids = np.flatnonzero(col == label)
            ids.setflags(write=False)
            self._by_label[key] = ids
        return self._by_label[key]

    def labeled_molecules(self, prop: int) -> np.ndarray:
        return np.flatnonzero(~np.isnan(self.dataset.labels[:, prop]))

    def property_index(self, name: str) -> int:
        return self.dataset.properties.index(name)


def build_mpg(ds: Dataset, d: int, rng: np.random.Generator | None = None,
              features: Sequence[FeaturizedMolecule] | None = None) -> MPG:
    """Build the relation graph; property embeddings ~ N(0, 1/d).

    ``features`` may be passed to skip re-parsing (same order as molecules).
    """
    if ds.n_molecules == 0 or ds.n_properties == 0:
        raise EmptyDataset("dataset has no molecules or no properties")
    if features is None:
        cache: dict[str, FeaturizedMolecule] = {}
        feats = []
        for smi in ds.molecules:
            if smi not in cache:
                cache[smi] = featurize(parse_smiles(smi))
            feats.append(cache[smi])
        features = feats
    elif len(features) != ds.n_molecules:
        raise DataError("features and molecules differ in length")
    rng = np.random.default_rng() if rng is None else rng
    embeddings = rng.normal(0.0, 1.0 / np.sqrt(d), size=(ds.n_properties, d))
    edge_types = edge_types_from_labels(ds.labels)
    edge_types.setflags(write=False)
    return MPG(ds, tuple(features), edge_types, embeddings)


def split_properties(mpg: MPG | Dataset, n_test: int | None = None,
                     test_properties: Sequence[int | str] | None = None) -> PropertySplit:
    """Last ``n_test`` properties become test properties, or an explicit list."""
    ds = mpg.dataset if isinstance(mpg, MPG) else mpg
    n = ds.n_properties
    if test_properties is not None:
        test = []
        for p in test_properties:
            idx = ds.properties.index(p) if isinstance(p, str) else int(p)
            if not 0 <= idx < n:
                raise BadSplitSize(f"property index {idx} out of range")
            test.append(idx)
        test = sorted(set(test))
        if not 0 < len(test) < n:
            raise BadSplitSize(f"need between 1 and {n - 1} test properties, got {len(test)}")
        return PropertySplit(tuple(i for i in range(n) if i not in test), tuple(test))
    if n_test is None or not 0 < n_test < n:
        raise BadSplitSize(f"n_test must satisfy 0 < n_test < {n}, got {n_test}")
    return PropertySplit(tuple(range(n - n_test)), tuple(range(n - n_test, n)))


def mask_labels(ds: Dataset, ratio: float, rng: np.random.Generator,
                train_properties: Sequence[int] | None = None) -> Dataset:
    """Hide ``floor(ratio * present)`` uniformly chosen train-property labels."""
    if not 0 <= ratio < 1:
        raise ValueError("mask ratio must be in [0, 1)")
    if ratio == 0:
        return ds
    cols = np.arange(ds.n_properties) if train_properties is None else np.asarray(train_properties, dtype=np.intp)
    labels = np.array(ds.labels)
    sub = labels[:, cols]
    rows, cs = np.nonzero(~np.isnan(sub))
    n_mask = int(np.floor(len(rows) * ratio))
    pick = rng.choice(len(rows), size=n_mask, replace=False)
    labels[rows[pick], cols[cs[pick]]] = np.nan
    return Dataset(ds.molecules, ds.properties, labels)
