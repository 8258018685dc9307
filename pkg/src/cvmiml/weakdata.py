"""Synthetic weakly labeled corpus generator.

Identities live at Gaussian anchor points; each camera view adds one
shared shift, each instance adds isotropic noise, so view changes move
whole sequences coherently (the cross-view gap the method must bridge).
One sequence per identity becomes a trimmed probe bag; the remaining
sequences are pooled per view and chunked into untrimmed gallery bags
whose tag set starts as the union of member identities and is then
degraded by independent label drops. Unknown identities (truth class 0)
can be mixed into gallery bags; detector-style confidence scores allow
a pre-training filter.

Everything is driven by two child streams of the config seed (one for
generation, one for bagging), so a config fully determines the file.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core import (
    Bag,
    CvmimlError,
    Dataset,
    DatasetMeta,
    DatasetValidationError,
    Instance,
    make_bag,
    save_dataset,
    validate_dataset,
)
from .jsonio import dump_canonical


class WeakDataError(CvmimlError):
    """Raised when a generator config cannot produce a valid dataset."""


@dataclass(frozen=True)
class GeneratorConfig:
    num_known_classes: int = 20
    num_views: int = 3
    feature_dim: int = 16
    instances_per_sequence: tuple[int, int] = (5, 10)
    sigma_identity: float = 1.0
    sigma_view: float = 0.5
    sigma_noise: float = 0.2
    bag_size_range: tuple[int, int] = (3, 8)
    p_missing_label: float = 0.1
    unknown_identities: int = 4
    unknown_rate: float = 0.25
    tag_novel: bool = False
    confidence_threshold: float = 0.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.instances_per_sequence
        if not (1 <= lo <= hi):
            raise ValueError("instances_per_sequence must satisfy 1 <= lo <= hi")
        blo, bhi = self.bag_size_range
        if not (1 <= blo <= bhi):
            raise ValueError("bag_size_range must satisfy 1 <= lo <= hi")
        if not (0.0 <= self.p_missing_label < 1.0):
            raise ValueError("p_missing_label must be in [0, 1)")
        if not (0.0 <= self.unknown_rate <= 1.0):
            raise ValueError("unknown_rate must be in [0, 1]")
        if not (0.0 <= self.confidence_threshold <= 1.0):
            raise ValueError("confidence_threshold must be in [0, 1]")
        if self.num_known_classes < 1:
            raise ValueError("num_known_classes must be >= 1")
        if self.num_views < 2:
            raise ValueError("num_views must be >= 2")
        if self.unknown_identities < 0:
            raise ValueError("unknown_identities must be >= 0")
        for name in ("sigma_identity", "sigma_view", "sigma_noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass(frozen=True)
class Sequence:
    """One person's detections under one view. identity 0 = unknown."""

    uid: int
    identity: int
    view: int
    features: np.ndarray
    confidences: np.ndarray

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class SyntheticCorpus:
    config: GeneratorConfig
    probe: list[Sequence]
    gallery: list[Sequence]
    unknown: list[Sequence]


@dataclass(frozen=True)
class ScoredInstance:
    instance: Instance
    confidence: float


def confidence_filter(items: list[ScoredInstance], tau: float) -> tuple[list[ScoredInstance], int]:
    """Keep items with confidence >= tau, preserving order; also return the drop count."""
    kept = [s for s in items if s.confidence >= tau]
    return kept, len(items) - len(kept)


def generate_synthetic(cfg: GeneratorConfig) -> SyntheticCorpus:
    """Draw the sequence corpus; see the module docstring for the geometry."""
    rng = np.random.default_rng([cfg.seed, 0])
    d = cfg.feature_dim
    lo, hi = cfg.instances_per_sequence
    shifts = rng.normal(0.0, cfg.sigma_view, size=(cfg.num_views, d)) if cfg.sigma_view > 0 else np.zeros((cfg.num_views, d))
    probe: list[Sequence] = []
    gallery: list[Sequence] = []
    unknown: list[Sequence] = []

    def draw_sequence(uid, identity, base, view, known):
        n = int(rng.integers(lo, hi + 1))
        noise = rng.normal(0.0, cfg.sigma_noise, size=(n, d)) if cfg.sigma_noise > 0 else np.zeros((n, d))
        feats = base + shifts[view - 1] + noise
        if known:
            conf = np.clip(1.0 - np.abs(rng.normal(0.0, 0.1, size=n)), 0.0, 1.0)
        else:
            conf = rng.uniform(0.0, 1.0, size=n)
        return Sequence(uid=uid, identity=identity, view=view, features=feats, confidences=conf)

    for c in range(1, cfg.num_known_classes + 1):
        base = rng.normal(0.0, cfg.sigma_identity, size=d)
        seqs = [draw_sequence(c, c, base, v, known=True) for v in range(1, cfg.num_views + 1)]
        probe_view = int(rng.integers(1, cfg.num_views + 1))
        for s in seqs:
            (probe if s.view == probe_view else gallery).append(s)
    for u in range(cfg.unknown_identities):
        uid = cfg.num_known_classes + 1 + u
        base = rng.normal(0.0, cfg.sigma_identity, size=d)
        for v in range(1, cfg.num_views + 1):
            unknown.append(draw_sequence(uid, 0, base, v, known=False))
    return SyntheticCorpus(config=cfg, probe=probe, gallery=gallery, unknown=unknown)


def _plan_bags(
    n_known: int, lo: int, hi: int, rate: float, unknown_avail: int, rng: np.random.Generator, view: int
) -> list[tuple[int, int]]:
    """Split a view's known pool into (known count, unknown count) bag plans.

    Every bag's total size lands in [lo, hi] and keeps at least one
    known member; leftovers are folded so the pool is consumed exactly.
    Unknown slots are drawn per bag at `rate` while the view's unknown
    pool lasts.
    """
    if n_known < lo:
        raise WeakDataError(
            f"view {view}: only {n_known} gallery sequence(s), need at least {lo} to form a bag"
        )
    plans = []
    rem = n_known
    avail = unknown_avail
    while rem > 0:
        k_total = int(rng.integers(lo, hi + 1))
        inject = avail > 0 and rng.random() < rate
        u = 1 if inject and k_total >= 2 else 0
        k_known = min(k_total - u, rem)
        if 0 < rem - k_known < lo:
            if rem - lo >= max(lo - u, 1):
                k_known = rem - lo
            elif rem <= hi - u:
                k_known = rem
            elif rem <= hi:
                u = 0
                k_known = rem
            else:
                raise WeakDataError(f"view {view}: cannot partition {n_known} sequences into bags of {lo}..{hi}")
        plans.append((k_known, u))
        avail -= u
        rem -= k_known
    return plans


def _apply_confidence_filter(corpus: SyntheticCorpus, tau: float) -> tuple[SyntheticCorpus, int]:
    if tau <= 0.0:
        return corpus, 0
    excluded = 0

    def filter_seq(seq: Sequence, required: bool) -> Sequence | None:
        nonlocal excluded
        tag = f"seq-u{seq.uid}-v{seq.view}"
        scored = [
            ScoredInstance(
                Instance(features=row, bag_id=tag, index_in_bag=i, truth_class=seq.identity),
                confidence=float(conf),
            )
            for i, (row, conf) in enumerate(zip(seq.features, seq.confidences))
        ]
        kept, dropped = confidence_filter(scored, tau)
        excluded += dropped
        if not kept:
            if required:
                raise WeakDataError(
                    f"confidence threshold {tau} empties probe sequence for identity {seq.identity}"
                )
            return None
        feats = np.stack([s.instance.features for s in kept])
        confs = np.asarray([s.confidence for s in kept])
        return replace(seq, features=feats, confidences=confs)

    probe = [filter_seq(s, required=True) for s in corpus.probe]
    gallery = [s for s in (filter_seq(x, required=False) for x in corpus.gallery) if s is not None]
    unknown = [s for s in (filter_seq(x, required=False) for x in corpus.unknown) if s is not None]
    return SyntheticCorpus(config=corpus.config, probe=probe, gallery=gallery, unknown=unknown), excluded


def bagify(corpus: SyntheticCorpus, cfg: GeneratorConfig) -> tuple[Dataset, dict]:
    """Assemble the dataset: probe bags pass through one per identity;
    per-view gallery pools are shuffled and chunked into weak bags.

    Returns the dataset plus provenance facts (bag membership by
    sequence uid, label drop counts) for the sidecar.
    """
    rng = np.random.default_rng([cfg.seed, 1])
    meta = DatasetMeta(cfg.num_known_classes, cfg.num_views, cfg.feature_dim)
    probe_bags = [
        make_bag(
            f"p{seq.identity:04d}",
            seq.view,
            "probe",
            (seq.identity,),
            seq.features,
            [seq.identity] * len(seq),
        )
        for seq in sorted(corpus.probe, key=lambda s: s.identity)
    ]

    unknown_pools: dict[int, list[Sequence]] = {v: [] for v in range(1, cfg.num_views + 1)}
    for seq in corpus.unknown:
        unknown_pools[seq.view].append(seq)

    gallery_bags: list[Bag] = []
    bag_sequences: dict[str, list[int]] = {}
    dropped_tags = 0
    serial = 0
    for v in range(1, cfg.num_views + 1):
        pool = [s for s in corpus.gallery if s.view == v]
        if not pool:
            continue
        order = rng.permutation(len(pool))
        pool = [pool[i] for i in order]
        plans = _plan_bags(
            len(pool), cfg.bag_size_range[0], cfg.bag_size_range[1],
            cfg.unknown_rate, len(unknown_pools[v]), rng, v,
        )
        start = 0
        for k_known, n_unknown in plans:
            members = pool[start : start + k_known]
            start += k_known
            if n_unknown:
                members = members + [unknown_pools[v].pop(0)]
            has_unknown = any(s.identity == 0 for s in members)
            true_tags = sorted({s.identity for s in members if s.identity != 0})
            kept = [c for c in true_tags if rng.random() >= cfg.p_missing_label]
            dropped_tags += len(true_tags) - len(kept)
            if not kept and not (has_unknown and cfg.tag_novel):
                kept = [true_tags[int(rng.integers(len(true_tags)))]]
                dropped_tags -= 1
            labels = ([0] if (has_unknown and cfg.tag_novel) else []) + kept
            bag_id = f"g{serial:04d}"
            serial += 1
            rows = np.concatenate([s.features for s in members], axis=0)
            truth = [s.identity for s in members for _ in range(len(s))]
            gallery_bags.append(make_bag(bag_id, v, "gallery", labels, rows, truth))
            bag_sequences[bag_id] = [s.uid for s in members]
    ds = Dataset(meta=meta, probe=tuple(probe_bags), gallery=tuple(gallery_bags))
    provenance = {"bag_sequences": bag_sequences, "dropped_tags": dropped_tags}
    return ds, provenance


def simulate(cfg: GeneratorConfig, out_path: str | Path) -> tuple[Dataset, dict]:
    """Generate, filter, bag, validate, and write a dataset plus its sidecar.

    The sidecar (written next to the dataset with suffix
    `.provenance.json`) records the config, summary counts, the truth
    histogram, and bag membership by sequence uid.
    """
    corpus = generate_synthetic(cfg)
    corpus, excluded = _apply_confidence_filter(corpus, cfg.confidence_threshold)
    ds, provenance = bagify(corpus, cfg)
    violations = validate_dataset(ds)
    if violations:
        raise DatasetValidationError(violations)
    out_path = Path(out_path)
    save_dataset(ds, out_path)
    histogram: dict[str, int] = {}
    for bag in ds.bags():
        for inst in bag.instances:
            key = str(inst.truth_class)
            histogram[key] = histogram.get(key, 0) + 1
    sizes = [len(v) for v in provenance["bag_sequences"].values()]
    sidecar = {
        "config": {
            "num_known_classes": cfg.num_known_classes,
            "num_views": cfg.num_views,
            "feature_dim": cfg.feature_dim,
            "instances_per_sequence": list(cfg.instances_per_sequence),
            "sigma_identity": cfg.sigma_identity,
            "sigma_view": cfg.sigma_view,
            "sigma_noise": cfg.sigma_noise,
            "bag_size_range": list(cfg.bag_size_range),
            "p_missing_label": cfg.p_missing_label,
            "unknown_identities": cfg.unknown_identities,
            "unknown_rate": cfg.unknown_rate,
            "tag_novel": cfg.tag_novel,
            "confidence_threshold": cfg.confidence_threshold,
            "seed": cfg.seed,
        },
        "counts": {
            "probe_bags": len(ds.probe),
            "gallery_bags": len(ds.gallery),
            "probe_instances": sum(len(b) for b in ds.probe),
            "gallery_instances": sum(len(b) for b in ds.gallery),
            "sequences_per_bag_min": min(sizes) if sizes else 0,
            "sequences_per_bag_max": max(sizes) if sizes else 0,
            "dropped_tags": provenance["dropped_tags"],
            "excluded_by_confidence": excluded,
        },
        "truth_histogram": {k: histogram[k] for k in sorted(histogram, key=int)},
        "bag_sequences": provenance["bag_sequences"],
    }
    sidecar_path = out_path.with_name(out_path.stem + ".provenance.json")
    dump_canonical(sidecar, sidecar_path)
    return ds, sidecar
