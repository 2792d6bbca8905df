"""Episodic-memory cache classifier with adversarial and corruption evaluation."""

from .backbone import Backbone, EmbeddingLayer, TrainConfig, embed, forward, init_backbone, train
from .cache import CONTINUOUS, Cache, CacheModel, Knn, build_cache, predict, prediction_jacobian, tune_theta
from .compression import Cluster, KMeansConfig, Pca, compress_cache
from .datasets import Dataset, LabeledEmbeddings, extract_embeddings, generate_dataset

__version__ = "0.1.0"
