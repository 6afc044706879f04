"""Synthetic correlated-property dataset for end-to-end checks.

Molecules are random trees over {C, N, O}; properties threshold linear
functions of a few graph descriptors routed through shared latent factors,
so properties are correlated and partially predictable from one another.
"""
from __future__ import annotations

import numpy as np

from .chem import parse_smiles
from .mpg import Dataset

ELEMENTS = ("C", "N", "O")
ELEMENT_WEIGHTS = (0.6, 0.25, 0.15)
MAX_BRANCHES = 3


def random_tree(n_atoms: int, rng: np.random.Generator) -> tuple[list[str], list[tuple[int, int]]]:
    """Random tree: each new atom attaches to a uniformly chosen earlier atom with spare valence."""
    atoms = [str(rng.choice(ELEMENTS, p=ELEMENT_WEIGHTS))]
    bonds: list[tuple[int, int]] = []
    degree = [0]
    for i in range(1, n_atoms):
        open_ = [j for j in range(i) if degree[j] < MAX_BRANCHES + 1]
        parent = int(rng.choice(open_))
        atoms.append(str(rng.choice(ELEMENTS, p=ELEMENT_WEIGHTS)))
        bonds.append((parent, i))
        degree[parent] += 1
        degree.append(1)
    return atoms, bonds


def tree_to_smiles(atoms: list[str], bonds: list[tuple[int, int]]) -> str:
    children: dict[int, list[int]] = {i: [] for i in range(len(atoms))}
    for a, b in bonds:
        children[a].append(b)

    def emit(i: int) -> str:
        kids = children[i]
        if not kids:
            return atoms[i]
        branches = "".join(f"({emit(k)})" for k in kids[:-1])
        return atoms[i] + branches + emit(kids[-1])

    return emit(0)


def descriptors(atoms: list[str], bonds: list[tuple[int, int]]) -> np.ndarray:
    """Size-normalised element fractions, branching, leaf fraction and hetero-hetero bond fraction."""
    n = len(atoms)
    degree = np.zeros(n)
    for a, b in bonds:
        degree[a] += 1
        degree[b] += 1
    hetero = np.array([s != "C" for s in atoms])
    hh = sum(1 for a, b in bonds if hetero[a] and hetero[b])
    return np.array([
        atoms.count("N") / n,
        atoms.count("O") / n,
        float(np.mean(degree >= 3)),
        float(np.mean(degree == 1)),
        hh / max(len(bonds), 1),
        n / 12.0,
    ])


def make_synthetic(n_molecules: int = 200, n_properties: int = 8, n_factors: int = 3,
                   min_atoms: int = 5, max_atoms: int = 12, noise: float = 0.5,
                   seed: int = 0) -> Dataset:
    """Dataset of random tree molecules with correlated, roughly balanced binary properties."""
    rng = np.random.default_rng(seed)
    smiles, feats = [], []
    for _ in range(n_molecules):
        atoms, bonds = random_tree(int(rng.integers(min_atoms, max_atoms + 1)), rng)
        s = tree_to_smiles(atoms, bonds)
        parse_smiles(s)  # generator output must stay inside the supported grammar
        smiles.append(s)
        feats.append(descriptors(atoms, bonds))
    D = np.array(feats)
    D = (D - D.mean(axis=0)) / np.where(D.std(axis=0) > 0, D.std(axis=0), 1.0)
    loading = rng.normal(size=(D.shape[1], n_factors))
    factors = D @ loading
    # whiten so the factors are uncorrelated; with non-negative mixing no property pair anti-correlates
    q, _ = np.linalg.qr(factors - factors.mean(axis=0))
    factors = q * np.sqrt(n_molecules)
    mixing = np.abs(rng.normal(size=(n_factors, n_properties)))  # shared factors push properties the same way
    scores = factors @ mixing + noise * rng.normal(size=(n_molecules, n_properties))
    labels = (scores > np.median(scores, axis=0)).astype(np.float64)
    names = [f"prop{j}" for j in range(n_properties)]
    return Dataset(tuple(smiles), tuple(names), labels)
