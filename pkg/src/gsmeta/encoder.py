"""GIN molecular encoder.

Each layer updates atom states with
``h_i <- MLP(h_i + sum_j (h_j + bond_emb(i, j)))`` (GIN with epsilon = 0);
the molecule embedding is the mean of the final atom states.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .chem import N_BOND_CLASSES, N_DEGREE_CLASSES, N_ELEMENT_CLASSES, FeaturizedMolecule


def init_encoder_params(d: int, n_layers: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Embedding tables act on one-hot inputs, so their fan-in is 1."""
    if n_layers < 1:
        raise ValueError("encoder needs at least one layer")
    p: dict[str, np.ndarray] = {
        "enc.element": nn.uniform(rng, 1, (N_ELEMENT_CLASSES, d)),
        "enc.degree": nn.uniform(rng, 1, (N_DEGREE_CLASSES, d)),
    }
    for layer in range(n_layers):
        p[f"enc.{layer}.bond"] = nn.uniform(rng, 1, (N_BOND_CLASSES, d))
        nn.init_mlp(p, f"enc.{layer}.mlp", (d, 2 * d, d), rng)
    return p


def encoder_depth(params: Mapping) -> int:
    return sum(1 for k in params if k.startswith("enc.") and k.endswith(".bond"))


@dataclass(frozen=True)
class MoleculeBatch:
    """Disjoint union of several molecules as dense constant operators."""

    element_ids: np.ndarray
    degree_ids: np.ndarray
    adjacency: np.ndarray      # (atoms, atoms) neighbour counts
    bond_counts: np.ndarray    # (atoms, bond classes) incident-bond counts
    readout: np.ndarray        # (molecules, atoms) mean-pooling weights

    @classmethod
    def from_molecules(cls, mols: Sequence[FeaturizedMolecule]) -> "MoleculeBatch":
        sizes = [m.n_atoms for m in mols]
        if any(s == 0 for s in sizes):
            raise ValueError("cannot encode an empty molecule")
        total = sum(sizes)
        adjacency = np.zeros((total, total))
        bond_counts = np.zeros((total, N_BOND_CLASSES))
        readout = np.zeros((len(mols), total))
        offset = 0
        for k, m in enumerate(mols):
            if m.n_bonds:
                u = m.edge_index[:, 0] + offset
                v = m.edge_index[:, 1] + offset
                np.add.at(adjacency, (u, v), 1.0)
                np.add.at(adjacency, (v, u), 1.0)
                np.add.at(bond_counts, (u, m.bond_ids), 1.0)
                np.add.at(bond_counts, (v, m.bond_ids), 1.0)
            readout[k, offset:offset + m.n_atoms] = 1.0 / m.n_atoms
            offset += m.n_atoms
        return cls(
            np.concatenate([m.element_ids for m in mols]),
            np.concatenate([m.degree_ids for m in mols]),
            adjacency,
            bond_counts,
            readout,
        )


def encode_batch(batch: MoleculeBatch, p: Mapping[str, ad.Tensor]) -> ad.Tensor:
    """Embeddings for every molecule in ``batch``, shape (molecules, d)."""
    h = ad.take(p["enc.element"], batch.element_ids) + ad.take(p["enc.degree"], batch.degree_ids)
    n_layers = encoder_depth(p)
    for layer in range(n_layers):
        msg = ad.matmul(batch.adjacency, h) + ad.matmul(batch.bond_counts, p[f"enc.{layer}.bond"])
        h = nn.mlp(p, f"enc.{layer}.mlp", h + msg)
        if layer < n_layers - 1:
            h = ad.leaky_relu(h)
    return ad.matmul(batch.readout, h)


def encode_molecules(mols: Sequence[FeaturizedMolecule], p: Mapping[str, ad.Tensor]) -> ad.Tensor:
    return encode_batch(MoleculeBatch.from_molecules(mols), p)


def encode_molecule(m: FeaturizedMolecule, p: Mapping[str, ad.Tensor]) -> ad.Tensor:
    """Embedding of a single molecule, shape (d,)."""
    return ad.reshape(encode_molecules([m], p), (-1,))
