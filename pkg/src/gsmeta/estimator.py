"""scikit-learn style wrapper around meta-training and few-shot prediction.

``fit`` meta-trains on a label matrix whose columns are all training
properties. ``adapt`` finetunes on a small labeled support set for a new
property; ``predict_proba`` then scores molecules for that property, each
in its own subgraph with the fixed support set::

    clf = GSMetaClassifier(d=32, k_shot=5).fit(smiles, label_matrix)
    clf.adapt(support_smiles, support_labels)
    p = clf.predict_proba(query_smiles)[:, 1]
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import meta, nn
from .chem import featurize, parse_smiles
from .encoder import encode_molecules
from .episode import make_episode, sample_auxiliary
from .mpg import Dataset, PropertySplit, build_mpg
from .validation import check_binary_labels, check_label_matrix, check_smiles_array

TARGET_NAME = "__target__"


class GSMetaClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    def __init__(self, d=300, encoder_layers=5, gnn_layers=2, k_shot=10, n_query=1, n_aux=None,
                 n_aux_test=None, n_pool=10, batch_size=5, top_k=None, inner_lr=0.05, outer_lr=0.001,
                 scheduler_lr=0.0005, temperature=0.08, contrastive_weight=0.05, max_steps=2000,
                 inner_steps=1, test_inner_steps=1, outer_optimizer="adam", no_m2m=False,
                 no_edge_types=False, no_scheduler=False, no_contrastive=False, random_state=0):
        self.d = d
        self.encoder_layers = encoder_layers
        self.gnn_layers = gnn_layers
        self.k_shot = k_shot
        self.n_query = n_query
        self.n_aux = n_aux
        self.n_aux_test = n_aux_test
        self.n_pool = n_pool
        self.batch_size = batch_size
        self.top_k = top_k
        self.inner_lr = inner_lr
        self.outer_lr = outer_lr
        self.scheduler_lr = scheduler_lr
        self.temperature = temperature
        self.contrastive_weight = contrastive_weight
        self.max_steps = max_steps
        self.inner_steps = inner_steps
        self.test_inner_steps = test_inner_steps
        self.outer_optimizer = outer_optimizer
        self.no_m2m = no_m2m
        self.no_edge_types = no_edge_types
        self.no_scheduler = no_scheduler
        self.no_contrastive = no_contrastive
        self.random_state = random_state

    def _train_config(self) -> meta.TrainConfig:
        names = [f for f in meta.TrainConfig.__dataclass_fields__ if f in self.get_params()]
        return meta.TrainConfig(eval_interval=0, seed=int(self.random_state),
                                **{f: getattr(self, f) for f in names})

    def fit(self, X, Y, property_names=None):
        """Meta-train on molecules ``X`` (SMILES) and label matrix ``Y`` (nan = missing)."""
        smiles = check_smiles_array(X)
        Y = check_label_matrix(Y, len(smiles))
        names = tuple(property_names) if property_names is not None else tuple(f"p{j}" for j in range(Y.shape[1]))
        if len(names) != Y.shape[1]:
            raise ValueError("property_names must match the number of label columns")
        cfg = self._train_config()
        ds = Dataset(smiles, names, Y)
        mpg = build_mpg(ds, cfg.d, rng=meta.rng_stream(cfg.seed, "graph"))
        split = PropertySplit(tuple(range(ds.n_properties)), ())
        result = meta.train(mpg, split, cfg)
        self.config_ = cfg
        self.dataset_ = ds
        self.features_ = mpg.features
        self.theta_ = result.theta
        self.phi_ = result.phi
        self.log_ = result.log
        self.coselection_ = result.coselection
        self.n_properties_ = ds.n_properties
        self.property_names_ = names
        self.classes_ = np.array([0, 1])
        self._adapted = None
        return self

    def transform(self, X) -> np.ndarray:
        """Encoder embeddings of the molecules, shape (n, d)."""
        check_is_fitted(self, "theta_")
        feats = [featurize(parse_smiles(s)) for s in check_smiles_array(X)]
        return encode_molecules(feats, nn.as_leaves(self.theta_, requires_grad=False)).data

    def _extended(self, support, support_y, extra=()):
        """Graph over fitted molecules plus new ones, with one extra target column."""
        ds = self.dataset_
        known = {s: i for i, s in enumerate(ds.molecules)}
        new = list(support) + list(extra)
        aux = np.array([ds.labels[known[s]] if s in known else np.full(ds.n_properties, np.nan) for s in new])
        target = np.full(len(new), np.nan)
        target[:len(support)] = support_y
        labels = np.vstack([
            np.hstack([ds.labels, np.full((ds.n_molecules, 1), np.nan)]),
            np.hstack([aux.reshape(len(new), ds.n_properties), target[:, None]]),
        ])
        full = Dataset(ds.molecules + tuple(new), ds.properties + (TARGET_NAME,), labels)
        feats = self.features_ + tuple(featurize(parse_smiles(s)) for s in new)
        mpg = build_mpg(full, self.config_.d, rng=np.random.default_rng(0), features=feats)
        return mpg, ds.n_molecules

    def adapt(self, support_X, support_y):
        """Finetune a copy of the meta-trained parameters on a support set for a new property."""
        check_is_fitted(self, "theta_")
        cfg = self.config_
        support = check_smiles_array(support_X)
        y = check_binary_labels(support_y, len(support))
        mpg, offset = self._extended(support, y)
        rng = meta.rng_stream(cfg.seed, "eval")
        theta = dict(self.theta_)
        fresh = rng.normal(0.0, 1.0 / np.sqrt(cfg.d), size=(1, cfg.d))
        theta["prop_emb"] = np.vstack([theta["prop_emb"], fresh])
        target = self.n_properties_
        aux = sample_auxiliary(range(self.n_properties_), cfg.test_aux_count(self.n_properties_), rng)
        ep = make_episode(mpg, target, offset + np.arange(len(support)), y, [], [], aux)
        adapted = meta.inner_adapt(theta, ep, mpg, cfg.model_config(), cfg.inner_lr,
                                   cfg.test_inner_steps, joint_query=False)
        self._adapted = (support, y, aux, adapted)
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "theta_")
        if getattr(self, "_adapted", None) is None:
            raise ValueError("call adapt(support_X, support_y) before predicting")
        support, y, aux, adapted = self._adapted
        queries = check_smiles_array(X)
        mpg, offset = self._extended(support, y, queries)
        target = self.n_properties_
        sup = make_episode(mpg, target, offset + np.arange(len(support)), y, [], [], aux)
        q_ids = offset + len(support) + np.arange(len(queries))
        p1 = meta.score_queries(adapted, sup, q_ids, mpg, self.config_.model_config())
        return np.column_stack([1.0 - p1, p1])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)

    def decision_function(self, X) -> np.ndarray:
        return self.predict_proba(X)[:, 1]

    def score(self, X, y, sample_weight=None) -> float:
        """ROC-AUC of the active-class probability (the few-shot benchmark metric)."""
        return meta.roc_auc(self.decision_function(X), np.asarray(y))
