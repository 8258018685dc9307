"""Distribution-alignment losses and their epoch-level structures.

Three regularizers shape the instance label distributions beyond the
weak classification signal:

* intra-bag: inside a gallery bag, feature-space neighbors of a tagged
  class's seed whose score clears a fraction of the seed's are pulled
  onto the seed's distribution (KL, gradient through both sides);
* cross-view: per class, a view-balanced mean distribution (prototype,
  smoothed across epochs by an exponential moving average) attracts all
  instances assigned to the class, probe and gallery alike (prototypes
  are constants in the backward pass);
* entropy: gallery instance distributions are sharpened.

Groups, assignments and prototypes are formed once per epoch and stay
frozen throughout the SGD sweep; the loss functions take them as
explicit arguments so callers control exactly what is live.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .miml import BagDistributions, LossValue, combine, seed_index
from .model import dlog, safe_log, softmax_vjp


@dataclass(frozen=True)
class Hyperparams:
    """Knobs for the alignment terms and the ramp schedule."""

    k_neighbors: int = 15
    gamma: float = 0.2
    alpha: float = 0.5
    ramp_epochs: int = 30
    delta_max: float = 1.0

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")
        if not (0.0 < self.gamma < 1.0):
            raise ValueError("gamma must be in (0, 1)")
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError("alpha must be in [0, 1]")
        if self.ramp_epochs < 1:
            raise ValueError("ramp_epochs must be >= 1")
        if not (0.0 <= self.delta_max <= 1.0):
            raise ValueError("delta_max must be in [0, 1]")


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) with logs clamped at EPS; never negative."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {q.shape}")
    val = float(np.sum(p * (safe_log(p) - safe_log(q))))
    return max(0.0, val)


def _kl_grad_p(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """d KL(p||q) / dp, consistent with the clamped forward value."""
    return safe_log(p) - safe_log(q) + p * dlog(p)


def _kl_grad_q(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """d KL(p||q) / dq."""
    return -p * dlog(q)


@dataclass(frozen=True)
class Group:
    """Seed instance plus retained neighbors for one (gallery bag, tag)."""

    bag_id: str
    class_id: int
    view: int
    seed: int
    members: tuple[int, ...]


def form_group(bd: BagDistributions, c: int, hp: Hyperparams) -> Group:
    """Select the seed's K nearest in-bag neighbors passing the score gate.

    Neighbors are ranked by Euclidean distance in extractor feature
    space (ties broken by instance index); a neighbor stays if its
    class-c probability reaches gamma times the seed's. The seed never
    appears among the members.
    """
    q = seed_index(bd, c)
    n = bd.probs.shape[0]
    if n == 1:
        return Group(bag_id=bd.bag_id, class_id=c, view=bd.bag.view, seed=q, members=())
    dists = np.linalg.norm(bd.features - bd.features[q], axis=1)
    order = [i for i in np.argsort(dists, kind="stable") if i != q]
    nearest = order[: hp.k_neighbors]
    gate = hp.gamma * bd.probs[q, c]
    members = tuple(sorted(int(i) for i in nearest if bd.probs[i, c] >= gate))
    return Group(bag_id=bd.bag_id, class_id=c, view=bd.bag.view, seed=q, members=members)


def form_groups(gallery: Iterable[BagDistributions], hp: Hyperparams) -> list[Group]:
    """Groups for every (gallery bag, tagged class), in deterministic order."""
    groups = []
    for bd in gallery:
        for c in bd.bag.label.classes:
            groups.append(form_group(bd, c, hp))
    return groups


def intra_bag_loss(bags_by_id: Mapping[str, BagDistributions], groups: Iterable[Group]) -> LossValue:
    """Mean KL from each group member's distribution to its seed's.

    Gradient flows through both sides of every KL term. Groups whose
    bag is absent from `bags_by_id` are skipped, which is how batches
    restrict the loss to their own bags.
    """
    active = [g for g in groups if g.bag_id in bags_by_id]
    n = sum(len(g.members) for g in active)
    if n == 0:
        return LossValue.zero()
    value = 0.0
    dprobs: dict[str, np.ndarray] = {}
    for g in active:
        if not g.members:
            continue
        bd = bags_by_id[g.bag_id]
        dp = dprobs.setdefault(g.bag_id, np.zeros_like(bd.probs))
        seed_row = bd.probs[g.seed]
        for m in g.members:
            row = bd.probs[m]
            value += kl_divergence(row, seed_row)
            dp[m] += _kl_grad_p(row, seed_row) / n
            dp[g.seed] += _kl_grad_q(row, seed_row) / n
    pergrad = {bid: softmax_vjp(bags_by_id[bid].probs, dp) for bid, dp in dprobs.items()}
    return LossValue(value=value / n, count=n, dlogits=pergrad)


@dataclass
class AssignmentIndex:
    """Which instances count as class-c evidence, split by camera view.

    Maps class -> view -> list of (bag_id, instance index). Probe bags
    contribute every instance under their label; gallery bags
    contribute each tagged class's seed plus retained group members.
    """

    by_class_view: dict[int, dict[int, list[tuple[str, int]]]] = field(default_factory=dict)

    def classes(self) -> list[int]:
        return sorted(c for c, views in self.by_class_view.items() if any(views.values()))

    def views(self, c: int) -> list[int]:
        return sorted(v for v, refs in self.by_class_view.get(c, {}).items() if refs)

    def refs(self, c: int) -> list[tuple[str, int]]:
        out = []
        for v in self.views(c):
            out.extend(self.by_class_view[c][v])
        return out

    def total_refs(self) -> int:
        return sum(len(self.refs(c)) for c in self.classes())


def build_assignments(bags: Iterable[BagDistributions], groups: Iterable[Group]) -> AssignmentIndex:
    idx = AssignmentIndex()

    def put(c: int, v: int, bag_id: str, i: int) -> None:
        idx.by_class_view.setdefault(c, {}).setdefault(v, []).append((bag_id, i))

    for bd in bags:
        if bd.bag.role != "probe":
            continue
        cstar = bd.bag.label.classes[0]
        for i in range(bd.probs.shape[0]):
            put(cstar, bd.bag.view, bd.bag_id, i)
    for g in groups:
        put(g.class_id, g.view, g.bag_id, g.seed)
        for m in g.members:
            put(g.class_id, g.view, g.bag_id, m)
    return idx


def compute_epoch_prototype(idx: AssignmentIndex, c: int, bags_by_id: Mapping[str, BagDistributions]) -> np.ndarray | None:
    """View-balanced mean distribution for class c: mean over views of
    the per-view mean of assigned instance distributions. None when the
    class has no assigned instances this epoch (skip signal)."""
    views = idx.views(c)
    if not views:
        return None
    per_view = []
    for v in views:
        rows = np.stack([bags_by_id[bid].probs[i] for bid, i in idx.by_class_view[c][v]])
        per_view.append(rows.mean(axis=0))
    return np.stack(per_view).mean(axis=0)


@dataclass
class PrototypeBank:
    """EMA-smoothed class prototypes, updated once per epoch."""

    num_classes: int
    epoch: int = -1
    values: dict[int, np.ndarray] = field(default_factory=dict)

    def has(self, c: int) -> bool:
        return c in self.values

    def get(self, c: int) -> np.ndarray:
        return self.values[c]


def update_prototype(bank: PrototypeBank, c: int, proto: np.ndarray, alpha: float) -> None:
    """Blend this epoch's prototype into the bank: alpha * old + (1-alpha) * new.

    A class seen for the first time adopts the new prototype outright.
    """
    if not (0.0 <= alpha <= 1.0):
        raise ValueError("alpha must be in [0, 1]")
    proto = np.asarray(proto, dtype=np.float64)
    if c in bank.values:
        bank.values[c] = alpha * bank.values[c] + (1.0 - alpha) * proto
    else:
        bank.values[c] = proto.copy()


def cross_view_loss(
    idx: AssignmentIndex,
    bank: PrototypeBank,
    bags_by_id: Mapping[str, BagDistributions],
) -> LossValue:
    """Mean KL from each assigned instance's distribution to its class prototype.

    Prototypes are constants here; gradient flows only through the
    instance side. Restrict to a batch by passing a `bags_by_id` that
    contains just the batch's bags.
    """
    entries = []
    for c in idx.classes():
        refs = [(bid, i) for bid, i in idx.refs(c) if bid in bags_by_id]
        if not refs:
            continue
        if not bank.has(c):
            raise ValueError(f"prototype for class {c} not initialized")
        entries.append((c, refs))
    n = sum(len(refs) for _, refs in entries)
    if n == 0:
        return LossValue.zero()
    value = 0.0
    dprobs: dict[str, np.ndarray] = {}
    for c, refs in entries:
        proto = bank.get(c)
        for bid, i in refs:
            bd = bags_by_id[bid]
            row = bd.probs[i]
            value += kl_divergence(row, proto)
            dp = dprobs.setdefault(bid, np.zeros_like(bd.probs))
            dp[i] += _kl_grad_p(row, proto) / n
    pergrad = {bid: softmax_vjp(bags_by_id[bid].probs, dp) for bid, dp in dprobs.items()}
    return LossValue(value=value / n, count=n, dlogits=pergrad)


def entropy_loss(bags: list[BagDistributions]) -> LossValue:
    """Mean Shannon entropy of gallery instance distributions."""
    n = sum(bd.probs.shape[0] for bd in bags)
    if n == 0:
        return LossValue.zero()
    value = 0.0
    pergrad: dict[str, np.ndarray] = {}
    for bd in bags:
        logp = safe_log(bd.probs)
        value += -np.sum(bd.probs * logp)
        dprobs = (-logp - bd.probs * dlog(bd.probs)) / n
        pergrad[bd.bag_id] = softmax_vjp(bd.probs, dprobs)
    return LossValue(value=value / n, count=n, dlogits=pergrad)


def total_loss(
    classification: LossValue,
    intra_bag: LossValue,
    cross_view: LossValue,
    entropy: LossValue,
    delta: float,
) -> LossValue:
    """Classification plus delta-weighted alignment terms."""
    if delta < 0:
        raise ValueError("delta must be >= 0")
    return combine([(classification, 1.0), (intra_bag, delta), (cross_view, delta), (entropy, delta)])


def ramp_weight(t: int, hp: Hyperparams) -> float:
    """Alignment weight schedule: Gaussian ramp-up, flat after ramp_epochs."""
    if t < 0:
        raise ValueError("epoch index must be >= 0")
    frac = min(t, hp.ramp_epochs) / hp.ramp_epochs
    return hp.delta_max * math.exp(-5.0 * (1.0 - frac) ** 2)
