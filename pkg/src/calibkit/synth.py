"""Synthetic classifier outputs with known, controllable miscalibration.

Each sample draws a cluster ``k`` and a true label ``a`` uniformly, then a
score vector ``x ~ N(0, I_m)`` with ``x[a] += margin_k``. Because
``log p(x | a) = margin_k * x_a + const``, the base logits
``u = margin_k * x`` are exactly the log-posterior up to a constant, i.e.
``softmax(u)`` is calibrated. The emitted logits ``y = sharpness_k * u`` are
therefore overconfident by a factor ``sharpness_k`` and the ideal corrective
temperature for cluster ``k`` is ``sharpness_k``. Positive scaling leaves the
argmax (and accuracy) untouched.

Features encode the cluster only: a one-hot cluster indicator stretched to
``feature_dim`` entries by block repetition, plus Gaussian noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from calibkit.dataset import SampleSet, write_sampleset
from calibkit.numerics import Prng


@dataclass(frozen=True)
class SynthConfig:
    n_val: int = 1000
    n_test: int = 1000
    m: int = 5
    clusters: int = 1
    sharpness: Sequence[float] = (3.0,)
    margin: Sequence[float] = (2.0,)
    feature_dim: int = 8
    feature_noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sharpness", tuple(float(s) for s in self.sharpness))
        object.__setattr__(self, "margin", tuple(float(s) for s in self.margin))
        if self.n_val < 1 or self.n_test < 1:
            raise ValueError("n_val and n_test must be >= 1")
        if self.m < 2:
            raise ValueError(f"need at least 2 classes, got {self.m}")
        if self.clusters < 1:
            raise ValueError(f"clusters must be >= 1, got {self.clusters}")
        if len(self.sharpness) != self.clusters or len(self.margin) != self.clusters:
            raise ValueError(f"sharpness and margin need {self.clusters} entries each, "
                             f"got {len(self.sharpness)} and {len(self.margin)}")
        if any(s < 1 for s in self.sharpness):
            raise ValueError("every sharpness must be >= 1")
        if any(mg < 0 for mg in self.margin):
            raise ValueError("margins must be >= 0")
        if self.feature_dim < self.clusters:
            raise ValueError(f"feature_dim ({self.feature_dim}) must be >= clusters ({self.clusters})")
        if self.feature_noise < 0:
            raise ValueError("feature_noise must be >= 0")


def cluster_prototypes(cfg: SynthConfig) -> np.ndarray:
    """Noise-free feature vector of every cluster, shape ``(clusters, feature_dim)``."""
    block = np.arange(cfg.feature_dim) * cfg.clusters // cfg.feature_dim
    return (block[None, :] == np.arange(cfg.clusters)[:, None]).astype(np.float64)


def nearest_prototype(features, cfg: SynthConfig) -> np.ndarray:
    protos = cluster_prototypes(cfg)
    dist = ((np.asarray(features)[:, None, :] - protos[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(dist, axis=1)


def _draw(cfg: SynthConfig, prng: Prng, n: int) -> tuple[SampleSet, np.ndarray]:
    protos = cluster_prototypes(cfg)
    logits = np.empty((n, cfg.m))
    features = np.empty((n, cfg.feature_dim))
    labels = np.empty(n, dtype=np.int64)
    clusters = np.empty(n, dtype=np.int64)
    for i in range(n):
        k = prng.randbelow(cfg.clusters)
        a = prng.randbelow(cfg.m)
        x = [prng.normal() for _ in range(cfg.m)]
        x[a] += cfg.margin[k]
        scale = cfg.sharpness[k] * cfg.margin[k]
        logits[i] = [scale * v for v in x]
        features[i] = protos[k] + np.array([prng.normal(0.0, cfg.feature_noise) for _ in range(cfg.feature_dim)])
        labels[i] = a
        clusters[i] = k
    return SampleSet(logits, labels, features), clusters


def generate_with_clusters(cfg: SynthConfig):
    """Like :func:`generate` but also returns the per-sample cluster ids.

    Returns ``((val, val_clusters), (test, test_clusters))``. The test split
    uses the validation stream advanced by one xoshiro jump.
    """
    val_prng = Prng(cfg.seed)
    test_prng = Prng(cfg.seed)
    test_prng.jump()
    return _draw(cfg, val_prng, cfg.n_val), _draw(cfg, test_prng, cfg.n_test)


def generate(cfg: SynthConfig) -> tuple[SampleSet, SampleSet]:
    (val, _), (test, _) = generate_with_clusters(cfg)
    return val, test


def write_splits(cfg: SynthConfig, out_dir) -> tuple[Path, Path]:
    """Generate and write ``val/`` and ``test/`` under ``out_dir``; return both manifests."""
    out_dir = Path(out_dir)
    val, test = generate(cfg)
    return write_sampleset(out_dir / "val", val), write_sampleset(out_dir / "test", test)
