"""Few-shot molecular property prediction with relation-graph episodes.

Molecules and properties form one bipartite graph; each meta-learning
episode is a sampled subgraph, encoded by a typed message-passing network
and trained with a first-order bi-level loop and a learned episode scheduler.
"""
from .chem import featurize, parse_smiles
from .episode import EpisodeSubgraph, sample_candidate_pool, sample_episode
from .estimator import GSMetaClassifier
from .meta import EvalReport, TrainConfig, evaluate, finetune_and_evaluate, roc_auc, train
from .mpg import MPG, Dataset, PropertySplit, build_mpg, mask_labels, split_properties
from .relnet import ModelConfig, forward_episode
from .synthetic import make_synthetic

__version__ = "0.1.0"

__all__ = [
    "Dataset", "EpisodeSubgraph", "EvalReport", "GSMetaClassifier", "MPG", "ModelConfig",
    "PropertySplit", "TrainConfig", "build_mpg", "evaluate", "featurize", "finetune_and_evaluate",
    "forward_episode", "make_synthetic", "mask_labels", "parse_smiles", "roc_auc",
    "sample_candidate_pool", "sample_episode", "split_properties", "train",
]
