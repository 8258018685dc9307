"""Weak-label classification losses over bags of instances.

Probe bags carry one trusted class; every instance in them gets plain
cross-entropy. Gallery bags carry a set of weak tags; each (bag, tag)
pair contributes cross-entropy at the bag's best-scoring instance (the
seed), so gradient flows only through that instance.

Losses return a `LossValue`: the scalar, the normalizer that produced
it, and per-bag dL/dlogits matrices ready for `model.backward`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import GALLERY, PROBE, Bag
from .model import EPS, ModelParams, classifier_logits, dlog, forward_features, softmax, softmax_vjp


@dataclass
class BagDistributions:
    """Forward-pass cache for one bag: raw rows, features, logits, probs."""

    bag: Bag
    raw: np.ndarray
    features: np.ndarray
    logits: np.ndarray
    probs: np.ndarray

    @property
    def bag_id(self) -> str:
        return self.bag.bag_id


def forward_bag(params: ModelParams, bag: Bag) -> BagDistributions:
    raw = bag.feature_matrix()
    feats = forward_features(params, raw)
    logits = classifier_logits(params, feats)
    return BagDistributions(bag=bag, raw=raw, features=feats, logits=logits, probs=softmax(logits))


@dataclass
class LossValue:
    """A loss term: scalar value, its normalizer, and dL/dlogits per bag."""

    value: float
    count: int
    dlogits: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zero(cls) -> "LossValue":
        return cls(value=0.0, count=0, dlogits={})


def combine(terms: list[tuple[LossValue, float]]) -> LossValue:
    """Weighted sum of loss terms; gradients merge additively."""
    value = 0.0
    count = 0
    grads: dict[str, np.ndarray] = {}
    for term, scale in terms:
        value += scale * term.value
        count += term.count
        for bag_id, g in term.dlogits.items():
            if bag_id in grads:
                grads[bag_id] = grads[bag_id] + scale * g
            else:
                grads[bag_id] = scale * g
    return LossValue(value=value, count=count, dlogits=grads)


def probe_loss(bags: list[BagDistributions]) -> LossValue:
    """Mean instance cross-entropy against each probe bag's single class."""
    total_instances = sum(bd.probs.shape[0] for bd in bags)
    if total_instances == 0:
        return LossValue.zero()
    value = 0.0
    pergrad: dict[str, np.ndarray] = {}
    for bd in bags:
        if bd.bag.role != PROBE:
            raise ValueError(f"bag {bd.bag_id!r} is not a probe bag")
        if len(bd.bag.label) != 1 or bd.bag.label.classes[0] == 0:
            raise ValueError(f"probe bag {bd.bag_id!r} must carry exactly one known class")
        cstar = bd.bag.label.classes[0]
        col = bd.probs[:, cstar]
        value += -np.sum(np.log(np.maximum(col, EPS)))
        dprobs = np.zeros_like(bd.probs)
        dprobs[:, cstar] = -dlog(col) / total_instances
        pergrad[bd.bag_id] = softmax_vjp(bd.probs, dprobs)
    return LossValue(value=value / total_instances, count=total_instances, dlogits=pergrad)


def seed_index(bd: BagDistributions, c: int) -> int:
    """Instance with the highest predicted probability for class c (first on ties)."""
    if not (0 <= c < bd.probs.shape[1]):
        raise ValueError(f"class {c} out of range for {bd.probs.shape[1]} classes")
    return int(np.argmax(bd.probs[:, c]))


def gallery_loss(bags: list[BagDistributions], seeds: dict[tuple[str, int], int] | None = None) -> LossValue:
    """Mean seed cross-entropy over (gallery bag, tagged class) pairs.

    `seeds` pins the seed choice per (bag_id, class); when omitted the
    live argmax is used. Gradient touches only seed rows.
    """
    pairs = []
    for bd in bags:
        if bd.bag.role != GALLERY:
            raise ValueError(f"bag {bd.bag_id!r} is not a gallery bag")
        if len(bd.bag.label) == 0:
            raise ValueError(f"gallery bag {bd.bag_id!r} has no tagged label")
        for c in bd.bag.label.classes:
            pairs.append((bd, c))
    if not pairs:
        return LossValue.zero()
    n = len(pairs)
    value = 0.0
    dprobs_by_bag: dict[str, np.ndarray] = {}
    for bd, c in pairs:
        q = seeds[(bd.bag_id, c)] if seeds is not None else seed_index(bd, c)
        p = bd.probs[q, c]
        value += -np.log(max(p, EPS))
        dp = dprobs_by_bag.setdefault(bd.bag_id, np.zeros_like(bd.probs))
        dp[q, c] += -dlog(p) / n
    pergrad = {bd.bag_id: softmax_vjp(bd.probs, dprobs_by_bag[bd.bag_id]) for bd in bags if bd.bag_id in dprobs_by_bag}
    return LossValue(value=value / n, count=n, dlogits=pergrad)


def classification_loss(probe: LossValue, gallery: LossValue) -> LossValue:
    """Probe and gallery terms added at unit weight."""
    return combine([(probe, 1.0), (gallery, 1.0)])
