"""Evaluation pipeline for image-based phenomic embeddings.

Modules: ``embedding_store`` (tables and files), ``normalize`` (TVN and
chromosome-arm correction), ``aggregate`` (crop/well/perturbation
aggregation, tiling), ``similarity`` (origin-shifted cosine, exact all-pairs
quantiles), ``relbench`` (recall benchmarks, FLOps, reports), ``baselines``
``toy_mae`` (desk-scale masked autoencoder with Lion) and ``synthetic``
(planted-structure benchmark inputs).
"""

from .aggregate import PerturbationProfile, TilingSpec, spherical_mean, tile_offsets
from .embedding_store import EmbeddingRecord, EmbeddingTable, load_embeddings, save_embeddings
from .normalize import ArmMap, TvnModel, arm_correct, tvn_apply, tvn_fit
from .relbench import RelationshipSet, load_relationships, recall_at_fpr, recall_at_percentile
from .similarity import Origin, SimilarityEngine, all_pairs_thresholds, centered_cosine

__version__ = "0.1.0"
