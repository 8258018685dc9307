"""Builders shared across test modules."""

import numpy as np

from cvmiml.core import Dataset, DatasetMeta, make_bag
from cvmiml.miml import BagDistributions
from cvmiml.model import ModelParams, safe_log


def bd_from_probs(bag_id, role, labels, probs, view=1, features=None):
    """BagDistributions with exact probability rows (no softmax rounding).

    `features` defaults to the prob rows themselves; pass explicit rows
    when distances matter (group formation).
    """
    probs = np.asarray(probs, dtype=np.float64)
    feats = probs if features is None else np.asarray(features, dtype=np.float64)
    bag = make_bag(bag_id, view, role, labels, feats)
    return BagDistributions(bag=bag, raw=feats, features=feats, logits=safe_log(probs), probs=probs)


def identity_params(dim, num_classes=2):
    """Extractor = identity map, classifier all-zero: features pass through."""
    return ModelParams(
        (np.eye(dim),),
        (np.zeros(dim),),
        np.zeros((dim, num_classes)),
        np.zeros(num_classes),
    )


def random_probs(rng, n, width):
    rows = rng.random((n, width)) + 0.05
    return rows / rows.sum(axis=1, keepdims=True)


def tiny_dataset(d=3, with_truth=True):
    """Smallest valid dataset: 2 classes, 2 views, handcrafted rows."""
    meta = DatasetMeta(num_known_classes=2, num_views=2, feature_dim=d)
    mk = lambda c, shift: [[float(c + shift + 0.1 * j + 0.4 * i * (j + 1)) for j in range(d)] for i in range(2)]
    probe = (
        make_bag("p1", 1, "probe", (1,), mk(1, 0.0), [1, 1] if with_truth else None),
        make_bag("p2", 2, "probe", (2,), mk(2, 0.0), [2, 2] if with_truth else None),
    )
    gallery = (
        make_bag("g1", 2, "gallery", (1,), mk(1, 0.5), [1, 1] if with_truth else None),
        make_bag("g2", 1, "gallery", (2,), mk(2, 0.5), [2, 2] if with_truth else None),
    )
    return Dataset(meta=meta, probe=probe, gallery=gallery)
