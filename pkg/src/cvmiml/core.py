"""Domain types and the on-disk dataset format.

A dataset pairs a probe side (trimmed, single-identity bags, one known
class each) with a gallery side (untrimmed bags, weak multi-label tags,
label id 0 reserved for identities outside the known set). Instances
are fixed feature vectors; nothing here touches raw images.

Constructors enforce only local structural sanity so that files with
semantic problems can still be parsed and then reported coherently by
`validate_dataset`. `load_dataset` runs the validator and refuses
invalid files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .jsonio import dump_canonical

PROBE = "probe"
GALLERY = "gallery"
NOVEL_CLASS = 0


class CvmimlError(Exception):
    """Base class for errors raised by this package."""


class DatasetFormatError(CvmimlError):
    """Raised when a dataset file cannot be parsed into the schema."""


class DatasetValidationError(CvmimlError):
    """Raised when a parsed dataset violates semantic invariants."""

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        preview = "; ".join(self.violations[:5])
        more = "" if len(self.violations) <= 5 else f" (+{len(self.violations) - 5} more)"
        super().__init__(f"{len(self.violations)} violation(s): {preview}{more}")


@dataclass(frozen=True)
class DatasetMeta:
    """Corpus-level constants: known classes C, views V, feature width d."""

    num_known_classes: int
    num_views: int
    feature_dim: int

    def __post_init__(self):
        if self.num_known_classes < 1:
            raise ValueError("num_known_classes must be >= 1")
        if self.num_views < 2:
            raise ValueError("num_views must be >= 2 (cross-view setting)")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")

    @property
    def num_total_classes(self) -> int:
        """C + 1: the known classes plus the novel-identity class 0."""
        return self.num_known_classes + 1


@dataclass(frozen=True, eq=False)
class Instance:
    """One feature vector inside a bag.

    `truth_class` is generator-side ground truth (0 = unknown identity),
    kept for evaluation and diagnostics; training never reads it.
    """

    features: np.ndarray
    bag_id: str
    index_in_bag: int
    truth_class: int | None = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 1:
            raise ValueError(f"instance features must be 1-D, got shape {feats.shape}")
        feats = feats.copy()
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)
        if self.index_in_bag < 0:
            raise ValueError("index_in_bag must be >= 0")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Instance):
            return NotImplemented
        return (
            self.bag_id == other.bag_id
            and self.index_in_bag == other.index_in_bag
            and self.truth_class == other.truth_class
            and np.array_equal(self.features, other.features)
        )


@dataclass(frozen=True)
class LabelVector:
    """Bag-level weak label: the set of tagged class ids, kept sorted.

    May be empty at construction so broken files stay representable;
    the validator flags untagged bags.
    """

    classes: tuple[int, ...]

    def __post_init__(self):
        cleaned = tuple(sorted(set(int(c) for c in self.classes)))
        for c in cleaned:
            if c < 0:
                raise ValueError(f"label class ids must be >= 0, got {c}")
        object.__setattr__(self, "classes", cleaned)

    def __contains__(self, c: int) -> bool:
        return c in self.classes

    def __len__(self) -> int:
        return len(self.classes)

    def as_bits(self, num_total_classes: int) -> np.ndarray:
        bits = np.zeros(num_total_classes, dtype=np.int64)
        for c in self.classes:
            bits[c] = 1
        return bits


@dataclass(frozen=True)
class Bag:
    """A set of instances from one video under one camera view."""

    bag_id: str
    view: int
    role: str
    label: LabelVector
    instances: tuple[Instance, ...]

    def __post_init__(self):
        if not self.bag_id:
            raise ValueError("bag_id must be a nonempty string")
        if self.role not in (PROBE, GALLERY):
            raise ValueError(f"role must be '{PROBE}' or '{GALLERY}', got {self.role!r}")
        object.__setattr__(self, "instances", tuple(self.instances))

    def __len__(self) -> int:
        return len(self.instances)

    def feature_matrix(self) -> np.ndarray:
        """Instances stacked row-wise, shape (n_b, d)."""
        return np.stack([inst.features for inst in self.instances])


@dataclass(frozen=True)
class Dataset:
    meta: DatasetMeta
    probe: tuple[Bag, ...]
    gallery: tuple[Bag, ...]

    def __post_init__(self):
        object.__setattr__(self, "probe", tuple(self.probe))
        object.__setattr__(self, "gallery", tuple(self.gallery))

    def bags(self) -> tuple[Bag, ...]:
        return self.probe + self.gallery

    def bag_map(self) -> dict[str, Bag]:
        return {bag.bag_id: bag for bag in self.bags()}


def make_bag(bag_id: str, view: int, role: str, labels, rows, truth=None) -> Bag:
    """Assemble a bag from raw rows, wiring instance back-references."""
    rows = [np.asarray(r, dtype=np.float64) for r in rows]
    if truth is None:
        truth = [None] * len(rows)
    if len(truth) != len(rows):
        raise ValueError(f"truth length {len(truth)} != row count {len(rows)}")
    instances = tuple(
        Instance(features=r, bag_id=bag_id, index_in_bag=i, truth_class=t)
        for i, (r, t) in enumerate(zip(rows, truth))
    )
    return Bag(bag_id=bag_id, view=view, role=role, label=LabelVector(tuple(labels)), instances=instances)


def validate_dataset(ds: Dataset) -> list[str]:
    """Check semantic invariants; return human-readable violations (empty = valid)."""
    report: list[str] = []
    meta = ds.meta
    seen_ids: set[str] = set()
    # class -> set of views it appears under (tag or instance truth)
    class_views: dict[int, set[int]] = {c: set() for c in range(1, meta.num_known_classes + 1)}
    probe_classes: set[int] = set()

    for bag in ds.bags():
        where = f"bag {bag.bag_id!r}"
        if bag.bag_id in seen_ids:
            report.append(f"duplicate bag id {bag.bag_id!r}")
        seen_ids.add(bag.bag_id)
        if not (1 <= bag.view <= meta.num_views):
            report.append(f"{where}: view {bag.view} outside [1, {meta.num_views}]")
        if len(bag.instances) == 0:
            report.append(f"{where}: bag has no instances")
        if len(bag.label) == 0:
            report.append(f"{where}: bag has no tagged label")
        for c in bag.label.classes:
            if c > meta.num_known_classes:
                report.append(f"{where}: label {c} outside [0, {meta.num_known_classes}]")
        if bag.role == PROBE:
            if len(bag.label) > 1:
                report.append(f"{where}: probe bag not single-label")
            if NOVEL_CLASS in bag.label:
                report.append(f"{where}: probe bag tagged with novel class 0")
            elif len(bag.label) == 1:
                probe_classes.add(bag.label.classes[0])
        for inst in bag.instances:
            iw = f"{where} instance {inst.index_in_bag}"
            if inst.bag_id != bag.bag_id:
                report.append(f"{iw}: instance bag_id {inst.bag_id!r} does not match")
            if inst.features.shape != (meta.feature_dim,):
                report.append(f"{iw}: feature length {inst.features.shape[0]} != {meta.feature_dim}")
            elif not np.all(np.isfinite(inst.features)):
                report.append(f"{iw}: non-finite feature values")
            if inst.truth_class is not None and not (0 <= inst.truth_class <= meta.num_known_classes):
                report.append(f"{iw}: truth_class {inst.truth_class} outside [0, {meta.num_known_classes}]")
        for i, inst in enumerate(bag.instances):
            if inst.index_in_bag != i:
                report.append(f"{where}: instance indices not contiguous at position {i}")
                break
        if 1 <= bag.view <= meta.num_views:
            touched = set(c for c in bag.label.classes if 1 <= c <= meta.num_known_classes)
            touched.update(
                inst.truth_class
                for inst in bag.instances
                if inst.truth_class is not None and 1 <= inst.truth_class <= meta.num_known_classes
            )
            for c in touched:
                class_views[c].add(bag.view)

    for c in range(1, meta.num_known_classes + 1):
        if c not in probe_classes:
            report.append(f"class {c} has no probe bag")
        nviews = len(class_views[c])
        if nviews < 2:
            report.append(f"class {c} seen under {nviews} view(s), need >= 2")
    return report


def _expect(cond: bool, msg: str) -> None:
    if not cond:
        raise DatasetFormatError(msg)


def _parse_bag(entry, where: str, role: str) -> Bag:
    _expect(isinstance(entry, dict), f"{where}: expected object")
    for key in ("id", "view", "labels", "instances"):
        _expect(key in entry, f"{where}: missing field {key!r}")
    _expect(isinstance(entry["id"], str) and entry["id"], f"{where}.id: expected nonempty string")
    _expect(isinstance(entry["view"], int) and not isinstance(entry["view"], bool), f"{where}.view: expected int")
    _expect(isinstance(entry["labels"], list), f"{where}.labels: expected list")
    for c in entry["labels"]:
        _expect(isinstance(c, int) and not isinstance(c, bool) and c >= 0, f"{where}.labels: expected ints >= 0")
    _expect(isinstance(entry["instances"], list), f"{where}.instances: expected list")
    rows = []
    truth = []
    for j, inst in enumerate(entry["instances"]):
        iw = f"{where}.instances[{j}]"
        _expect(isinstance(inst, dict), f"{iw}: expected object")
        _expect("features" in inst, f"{iw}: missing field 'features'")
        feats = inst["features"]
        _expect(isinstance(feats, list) and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in feats),
                f"{iw}.features: expected list of numbers")
        tc = inst.get("truth_class")
        _expect(tc is None or (isinstance(tc, int) and not isinstance(tc, bool)), f"{iw}.truth_class: expected int or null")
        rows.append(np.asarray(feats, dtype=np.float64))
        truth.append(tc)
    try:
        return make_bag(entry["id"], entry["view"], role, entry["labels"], rows, truth)
    except ValueError as exc:
        raise DatasetFormatError(f"{where}: {exc}") from exc


def load_dataset(path: str | Path) -> Dataset:
    """Parse and validate a dataset file; raise on any problem."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    _expect(isinstance(doc, dict), f"{path}: top level must be an object")
    for key in ("meta", "probe", "gallery"):
        _expect(key in doc, f"{path}: missing field {key!r}")
    meta_doc = doc["meta"]
    _expect(isinstance(meta_doc, dict), "meta: expected object")
    for key in ("num_known_classes", "num_views", "feature_dim"):
        _expect(key in meta_doc, f"meta: missing field {key!r}")
        _expect(isinstance(meta_doc[key], int) and not isinstance(meta_doc[key], bool), f"meta.{key}: expected int")
    try:
        meta = DatasetMeta(meta_doc["num_known_classes"], meta_doc["num_views"], meta_doc["feature_dim"])
    except ValueError as exc:
        raise DatasetFormatError(f"meta: {exc}") from exc
    _expect(isinstance(doc["probe"], list), "probe: expected list")
    _expect(isinstance(doc["gallery"], list), "gallery: expected list")
    probe = tuple(_parse_bag(e, f"probe[{i}]", PROBE) for i, e in enumerate(doc["probe"]))
    gallery = tuple(_parse_bag(e, f"gallery[{i}]", GALLERY) for i, e in enumerate(doc["gallery"]))
    ds = Dataset(meta=meta, probe=probe, gallery=gallery)
    violations = validate_dataset(ds)
    if violations:
        raise DatasetValidationError(violations)
    return ds


def _bag_doc(bag: Bag) -> dict:
    return {
        "id": bag.bag_id,
        "view": bag.view,
        "labels": list(bag.label.classes),
        "instances": [
            {"features": inst.features, "truth_class": inst.truth_class}
            for inst in bag.instances
        ],
    }


def save_dataset(ds: Dataset, path: str | Path) -> Path:
    """Write a dataset canonically; refuses invalid datasets."""
    violations = validate_dataset(ds)
    if violations:
        raise DatasetValidationError(violations)
    doc = {
        "meta": {
            "num_known_classes": ds.meta.num_known_classes,
            "num_views": ds.meta.num_views,
            "feature_dim": ds.meta.feature_dim,
        },
        "probe": [_bag_doc(b) for b in ds.probe],
        "gallery": [_bag_doc(b) for b in ds.gallery],
    }
    return dump_canonical(doc, path)
