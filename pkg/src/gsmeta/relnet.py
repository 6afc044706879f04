"""Relation learning module: encodes an episode subgraph and predicts labels.

Node order inside a forward pass is ``[support..., query..., target,
auxiliary...]``. At each of the ``gnn_layers`` iterations the mol2mol edges
are re-estimated from the current molecule states, then one typed
message-passing layer runs over the whole subgraph.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .encoder import MoleculeBatch, encode_batch, init_encoder_params
from .episode import EpisodeSubgraph
from .mpg import MPG, N_EDGE_TYPES, EdgeType

BCE_EPS = 1e-7
CLASSIFIER_HIDDEN = 128
EDGE_PREDICTOR_HIDDEN = 128


@dataclass(frozen=True)
class ModelConfig:
    d: int = 300
    encoder_layers: int = 5
    gnn_layers: int = 2
    top_k: int = 1
    hidden: int = CLASSIFIER_HIDDEN
    no_m2m: bool = False
    no_edge_types: bool = False


def init_params(cfg: ModelConfig, property_embeddings: np.ndarray, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fresh parameters for the encoder, property embeddings, GNN layers and classifier."""
    d = cfg.d
    if property_embeddings.shape[1] != d:
        raise ValueError("property embedding width must equal d")
    p = init_encoder_params(d, cfg.encoder_layers, rng)
    p["prop_emb"] = np.array(property_embeddings, dtype=np.float64)
    for layer in range(cfg.gnn_layers):
        nn.init_mlp(p, f"gnn.{layer}.edge", (d, cfg.hidden, 1), rng)
        p[f"gnn.{layer}.type_emb"] = nn.uniform(rng, d, (N_EDGE_TYPES, d))
        p[f"gnn.{layer}.w_msg"] = nn.uniform(rng, d, (d, d))
        p[f"gnn.{layer}.w_root"] = nn.uniform(rng, d, (d, d))
    nn.init_mlp(p, "cls", (2 * d, cfg.hidden, 1), rng)
    return p


@dataclass
class MolEdges:
    """Pairwise connection weights and the kept (top-k) mask."""

    alpha: ad.Tensor       # (m, m); diagonal meaningless
    mask: np.ndarray       # (m, m) bool, symmetric, zero diagonal

    def pairs(self) -> list[tuple[int, int]]:
        i, j = np.nonzero(np.triu(self.mask, 1))
        return list(zip(i.tolist(), j.tolist()))

    def weights(self) -> dict[tuple[int, int], float]:
        return {(i, j): float(self.alpha.data[i, j]) for i, j in self.pairs()}


@dataclass
class EpisodeForwardResult:
    states: ad.Tensor                 # (nodes, d) final embeddings
    predictions: ad.Tensor            # (support + query,) in (0, 1)
    mol_edges: list[MolEdges]         # one entry per layer
    n_support: int
    n_query: int

    @property
    def n_molecules(self) -> int:
        return self.n_support + self.n_query

    @property
    def target_index(self) -> int:
        return self.n_molecules

    @property
    def support_predictions(self) -> ad.Tensor:
        return ad.take(self.predictions, np.arange(self.n_support))

    @property
    def query_predictions(self) -> ad.Tensor:
        return ad.take(self.predictions, np.arange(self.n_support, self.n_molecules))


def top_k_mask(alpha: np.ndarray, k: int) -> np.ndarray:
    """Union over nodes of each node's ``k`` highest-weight partners."""
    m = alpha.shape[0]
    mask = np.zeros((m, m), dtype=bool)
    k = min(k, m - 1)
    if k <= 0:
        return mask
    scores = np.array(alpha, dtype=np.float64)
    np.fill_diagonal(scores, -np.inf)
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    rows = np.repeat(np.arange(m), k)
    mask[rows, order.reshape(-1)] = True
    return mask | mask.T


def predict_mol_edges(h_mol: ad.Tensor, k: int, p: Mapping[str, ad.Tensor], layer: int) -> MolEdges:
    """alpha_ij = sigmoid(MLP(exp(-|h_i - h_j|))) for every molecule pair, plus the top-k mask."""
    m, d = h_mol.shape
    diff = ad.reshape(h_mol, (m, 1, d)) - ad.reshape(h_mol, (1, m, d))
    feat = ad.reshape(ad.exp(-ad.abs_(diff)), (m * m, d))
    score = nn.mlp(p, f"gnn.{layer}.edge", feat)
    alpha = ad.sigmoid(ad.reshape(score, (m, m)))
    return MolEdges(alpha, top_k_mask(alpha.data, k))


@dataclass(frozen=True)
class _Structure:
    batch: MoleculeBatch
    bip_adjacency: np.ndarray   # (n, n) ones for every molecule-property edge
    bip_types: np.ndarray       # (n, 4) per-node counts of incident edge types
    bip_degree: np.ndarray      # (n,)
    mol_selector: np.ndarray    # (n, m) embeds molecule block into node space


def _structure(ep: EpisodeSubgraph, mpg: MPG) -> _Structure:
    cached = ep.cache.get("structure")
    if cached is not None:
        return cached
    mols = ep.molecules
    m = len(mols)
    n_props = 1 + len(ep.auxiliary)
    n = m + n_props
    types = ep.visible_edge_types()
    adjacency = np.zeros((n, n))
    adjacency[:m, m:] = 1.0
    adjacency[m:, :m] = 1.0
    onehot = np.eye(N_EDGE_TYPES)[types]            # (m, P, 4)
    type_counts = np.zeros((n, N_EDGE_TYPES))
    type_counts[:m] = onehot.sum(axis=1)
    type_counts[m:] = onehot.sum(axis=0)
    selector = np.zeros((n, m))
    selector[np.arange(m), np.arange(m)] = 1.0
    st = _Structure(
        MoleculeBatch.from_molecules([mpg.features[i] for i in mols]),
        adjacency, type_counts, adjacency.sum(axis=1), selector,
    )
    ep.cache["structure"] = st
    return st


def message_passing_layer(h: ad.Tensor, st: _Structure, edges: MolEdges | None,
                          p: Mapping[str, ad.Tensor], layer: int, use_edge_types: bool = True) -> ad.Tensor:
    """One typed, weighted message-passing update.

    neighbourhood_i = mean_j (h_j + e_ij) * w_ij with w = alpha on mol2mol
    edges and 1 elsewhere; h_i <- LeakyReLU(W_msg neighbourhood_i + W_root h_i).
    Nodes without neighbours receive a zero neighbourhood term.
    """
    weights = ad.as_tensor(st.bip_adjacency, h)
    degree = st.bip_degree.copy()
    type_emb = p[f"gnn.{layer}.type_emb"]
    edge_term = ad.matmul(st.bip_types, type_emb) if use_edge_types else None
    if edges is not None and edges.mask.any():
        weighted = edges.alpha * edges.mask.astype(h.dtype)
        weights = weights + ad.matmul(ad.matmul(st.mol_selector, weighted), st.mol_selector.T)
        degree = degree + st.mol_selector @ edges.mask.sum(axis=1)
        if use_edge_types:
            rowsum = ad.matmul(st.mol_selector, ad.sum_(weighted, axis=1, keepdims=True))
            mm = ad.take(type_emb, [int(EdgeType.MOL2MOL)])
            edge_term = edge_term + ad.matmul(rowsum, mm)
    neighbourhood = ad.matmul(weights, h)
    if edge_term is not None:
        neighbourhood = neighbourhood + edge_term
    inv = np.divide(1.0, degree, out=np.zeros_like(degree), where=degree > 0)
    neighbourhood = neighbourhood * inv[:, None]
    return ad.leaky_relu(ad.matmul(neighbourhood, p[f"gnn.{layer}.w_msg"])
                         + ad.matmul(h, p[f"gnn.{layer}.w_root"]))


def classify(h_mol: ad.Tensor, h_target: ad.Tensor, p: Mapping[str, ad.Tensor]) -> ad.Tensor:
    """sigmoid(f_cls(h_i concat h_t)) for each row of ``h_mol``; returns shape (rows,)."""
    h_mol = h_mol if h_mol.ndim == 2 else ad.reshape(h_mol, (1, -1))
    h_target = ad.reshape(h_target, (1, -1))
    tiled = ad.matmul(np.ones((h_mol.shape[0], 1), dtype=h_mol.dtype), h_target)
    logits = nn.mlp(p, "cls", ad.concat([h_mol, tiled], axis=1))
    return ad.sigmoid(ad.reshape(logits, (-1,)))


def forward_episode(ep: EpisodeSubgraph, mpg: MPG, p: Mapping[str, ad.Tensor], cfg: ModelConfig) -> EpisodeForwardResult:
    st = _structure(ep, mpg)
    m = ep.n_support + ep.n_query
    x = encode_batch(st.batch, p)
    props = ad.take(p["prop_emb"], ep.properties)
    h = ad.concat([x, props], axis=0)
    mol_edges = []
    for layer in range(cfg.gnn_layers):
        edges = None
        if not cfg.no_m2m and m >= 2:
            edges = predict_mol_edges(ad.take(h, np.arange(m)), cfg.top_k, p, layer)
            mol_edges.append(edges)
        h = message_passing_layer(h, st, edges, p, layer, use_edge_types=not cfg.no_edge_types)
    preds = classify(ad.take(h, np.arange(m)), ad.take(h, [m]), p)
    return EpisodeForwardResult(h, preds, mol_edges, ep.n_support, ep.n_query)


def bce_loss(y: Sequence[float] | np.ndarray, y_hat: ad.Tensor) -> ad.Tensor:
    """Summed binary cross-entropy; predictions are clamped to [1e-7, 1 - 1e-7]."""
    y = np.asarray(y, dtype=y_hat.dtype)
    if y.shape != y_hat.shape:
        raise ValueError(f"labels {y.shape} and predictions {y_hat.shape} differ in shape")
    q = ad.clip(y_hat, BCE_EPS, 1.0 - BCE_EPS)
    ll = ad.mul(y, ad.log(q)) + ad.mul(1.0 - y, ad.log(1.0 - q))
    return -ad.sum_(ll)


def support_loss(ep: EpisodeSubgraph, mpg: MPG, p, cfg: ModelConfig) -> ad.Tensor:
    res = forward_episode(ep, mpg, p, cfg)
    return bce_loss(ep.support_labels, res.support_predictions)


def query_loss(ep: EpisodeSubgraph, mpg: MPG, p, cfg: ModelConfig) -> ad.Tensor:
    res = forward_episode(ep, mpg, p, cfg)
    return bce_loss(ep.query_labels, res.query_predictions)
