"""Training loop: per-epoch structure selection alternating with SGD.

Each epoch runs two steps. Step 1 does a full forward pass with the
current parameters, forms intra-bag groups, builds the class/view
assignment index, and folds this epoch's prototypes into the EMA bank
(exactly once, before any parameter update). Step 2 sweeps the bags in
a seeded random order, batch by batch, optimizing the composite loss
with groups, assignments and prototypes frozen; gallery seeds stay
live. Loss normalizers are batch-local.

RNG discipline (the determinism contract): one PCG64 generator seeded
from the config drives parameter init, then exactly one permutation
draw per epoch. Checkpoints carry its serialized state plus the
prototype bank (and momentum velocity when used), so a resumed run
replays the original byte for byte.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .align import (
    AssignmentIndex,
    Group,
    Hyperparams,
    PrototypeBank,
    build_assignments,
    compute_epoch_prototype,
    cross_view_loss,
    entropy_loss,
    form_groups,
    intra_bag_loss,
    ramp_weight,
    total_loss,
    update_prototype,
)
from .core import CvmimlError, Dataset
from .jsonio import dumps_canonical
from .miml import (
    BagDistributions,
    LossValue,
    classification_loss,
    forward_bag,
    gallery_loss,
    probe_loss,
    seed_index,
)
from .model import (
    Gradients,
    ModelParams,
    backward,
    init_params,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
)


class TrainingError(CvmimlError):
    """Raised when optimization cannot proceed (non-finite loss, bad resume)."""


@dataclass(frozen=True)
class AblationMask:
    """Which alignment terms participate in the optimized objective."""

    intra_bag: bool = True
    cross_view: bool = True
    entropy: bool = True

    def tag(self) -> str:
        if self.intra_bag and self.cross_view and self.entropy:
            return "full"
        parts = [name for name, on in (("ia", self.intra_bag), ("ca", self.cross_view), ("e", self.entropy)) if on]
        return "+".join(parts) if parts else "none"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 0.1
    weight_decay: float = 0.0
    momentum: float = 0.0
    bags_per_step: int = 8
    seed: int = 0
    feature_dim: int | None = None
    hidden_dim: int | None = None
    hyper: Hyperparams = Hyperparams()
    mask: AblationMask = AblationMask()
    save_interval: int = 0
    recompute_groups_each_step: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.bags_per_step < 1:
            raise ValueError("bags_per_step must be >= 1")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.save_interval < 0:
            raise ValueError("save_interval must be >= 0")


@dataclass
class EpochState:
    """Mutable cross-epoch state: completed-epoch count, EMA bank, RNG, velocity."""

    epoch: int
    bank: PrototypeBank
    rng: np.random.Generator
    velocity: Gradients | None = None
    history: list[dict] = field(default_factory=list)


def rng_state_to_string(rng: np.random.Generator) -> str:
    return json.dumps(rng.bit_generator.state, sort_keys=True)


def rng_from_string(state: str) -> np.random.Generator:
    doc = json.loads(state)
    bitgen_cls = getattr(np.random, doc["bit_generator"])
    rng = np.random.Generator(bitgen_cls())
    rng.bit_generator.state = doc
    return rng


def _bank_payload(bank: PrototypeBank) -> dict:
    return {
        "num_classes": bank.num_classes,
        "epoch": bank.epoch,
        "values": {str(c): bank.values[c] for c in sorted(bank.values)},
    }


def _bank_from_payload(doc: dict | None, num_classes: int) -> PrototypeBank:
    if doc is None:
        return PrototypeBank(num_classes=num_classes)
    values = {int(c): np.asarray(v, dtype=np.float64) for c, v in doc["values"].items()}
    return PrototypeBank(num_classes=doc["num_classes"], epoch=doc["epoch"], values=values)


def _velocity_payload(vel: Gradients | None) -> dict | None:
    if vel is None:
        return None
    return {
        "extractor_weights": [w for w in vel.extractor_weights],
        "extractor_biases": [b for b in vel.extractor_biases],
        "classifier_weight": vel.classifier_weight,
        "classifier_bias": vel.classifier_bias,
    }


def _velocity_from_payload(doc: dict | None) -> Gradients | None:
    if doc is None:
        return None
    return Gradients(
        tuple(np.asarray(w, dtype=np.float64) for w in doc["extractor_weights"]),
        tuple(np.asarray(b, dtype=np.float64) for b in doc["extractor_biases"]),
        np.asarray(doc["classifier_weight"], dtype=np.float64),
        np.asarray(doc["classifier_bias"], dtype=np.float64),
    )


def _check_finite(term: LossValue, name: str, epoch: int) -> LossValue:
    if not np.isfinite(term.value):
        raise TrainingError(f"non-finite {name} loss at epoch {epoch}")
    return term


def _loss_terms(
    probe_bds: list[BagDistributions],
    gallery_bds: list[BagDistributions],
    by_id: dict[str, BagDistributions],
    groups: list[Group],
    idx: AssignmentIndex,
    bank: PrototypeBank,
    config: TrainConfig,
    delta: float,
    epoch: int,
    seeds: dict | None = None,
) -> dict[str, LossValue]:
    zero = LossValue.zero
    lp = _check_finite(probe_loss(probe_bds), "probe", epoch)
    lg = _check_finite(gallery_loss(gallery_bds, seeds=seeds), "gallery", epoch)
    lc = classification_loss(lp, lg)
    lia = _check_finite(intra_bag_loss(by_id, groups), "intra-bag", epoch) if config.mask.intra_bag else zero()
    lca = _check_finite(cross_view_loss(idx, bank, by_id), "cross-view", epoch) if config.mask.cross_view else zero()
    le = _check_finite(entropy_loss(gallery_bds), "entropy", epoch) if config.mask.entropy else zero()
    lt = _check_finite(total_loss(lc, lia, lca, le, delta), "total", epoch)
    return {"probe": lp, "gallery": lg, "classification": lc, "intra_bag": lia, "cross_view": lca, "entropy": le, "total": lt}


def train_epoch(
    params: ModelParams,
    state: EpochState,
    dataset: Dataset,
    config: TrainConfig,
) -> tuple[ModelParams, dict]:
    """Run one epoch (structure selection + SGD sweep); returns new params and the epoch report."""
    t = state.epoch
    hp = config.hyper
    delta = ramp_weight(t, hp)

    # step 1: full forward with current params; freeze epoch structures
    all_bags = list(dataset.probe) + list(dataset.gallery)
    fwd = [forward_bag(params, bag) for bag in all_bags]
    by_id = {bd.bag_id: bd for bd in fwd}
    gallery_fwd = [bd for bd in fwd if bd.bag.role == "gallery"]
    probe_fwd = [bd for bd in fwd if bd.bag.role == "probe"]
    groups = form_groups(gallery_fwd, hp)
    idx = build_assignments(fwd, groups)
    for c in idx.classes():
        proto = compute_epoch_prototype(idx, c, by_id)
        if proto is not None:
            update_prototype(state.bank, c, proto, hp.alpha)
    state.bank.epoch = t
    tagged = sorted(
        {c for bag in all_bags for c in bag.label.classes}
    )
    skipped = [c for c in tagged if c not in idx.classes()]

    snapshot = _loss_terms(probe_fwd, gallery_fwd, by_id, groups, idx, state.bank, config, delta, t)

    # step 2: seeded shuffle, batched SGD with frozen structures
    order = state.rng.permutation(len(all_bags))
    batch_totals = []
    for lo in range(0, len(order), config.bags_per_step):
        batch = [all_bags[i] for i in order[lo : lo + config.bags_per_step]]
        bds = [forward_bag(params, bag) for bag in batch]
        batch_by_id = {bd.bag_id: bd for bd in bds}
        batch_gallery = [bd for bd in bds if bd.bag.role == "gallery"]
        batch_probe = [bd for bd in bds if bd.bag.role == "probe"]
        if config.recompute_groups_each_step:
            step_groups = form_groups(batch_gallery, hp)
            step_idx = build_assignments(bds, step_groups)
        else:
            step_groups, step_idx = groups, idx
        terms = _loss_terms(batch_probe, batch_gallery, batch_by_id, step_groups, step_idx, state.bank, config, delta, t)
        total = terms["total"]
        batch_totals.append(total.value)
        grads = Gradients.zeros_like(params)
        for bd in bds:
            g = total.dlogits.get(bd.bag_id)
            if g is not None:
                grads = grads.add(backward(params, bd.raw, g))
        if config.momentum > 0:
            decayed = Gradients(
                tuple(g + config.weight_decay * p for g, p in zip(grads.extractor_weights, params.extractor_weights)),
                tuple(g + config.weight_decay * p for g, p in zip(grads.extractor_biases, params.extractor_biases)),
                grads.classifier_weight + config.weight_decay * params.classifier_weight,
                grads.classifier_bias + config.weight_decay * params.classifier_bias,
            )
            vel = state.velocity if state.velocity is not None else Gradients.zeros_like(params)
            vel = vel.scale(config.momentum).add(decayed)
            state.velocity = vel
            params = sgd_step(params, vel, config.lr, weight_decay=0.0)
        else:
            params = sgd_step(params, grads, config.lr, weight_decay=config.weight_decay)

    state.epoch = t + 1
    report = {
        "epoch": t,
        "delta": delta,
        "loss_probe": snapshot["probe"].value,
        "loss_gallery": snapshot["gallery"].value,
        "loss_classification": snapshot["classification"].value,
        "loss_intra_bag": snapshot["intra_bag"].value,
        "loss_cross_view": snapshot["cross_view"].value,
        "loss_entropy": snapshot["entropy"].value,
        "loss_total": snapshot["total"].value,
        "n_ia": snapshot["intra_bag"].count,
        "n_ca": snapshot["cross_view"].count,
        "num_groups": len(groups),
        "skipped_classes": skipped,
        "batch_total_mean": float(np.mean(batch_totals)) if batch_totals else 0.0,
    }
    state.history.append(report)
    return params, report


@dataclass
class TrainResult:
    params: ModelParams
    state: EpochState
    history: list[dict]
    checkpoint_path: Path | None = None


def train(
    dataset: Dataset,
    config: TrainConfig,
    out_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
) -> TrainResult:
    """Train for `config.epochs` epochs, optionally resuming a checkpoint.

    With `out_dir` set, writes `epochs.jsonl` (one report per line), a
    final `checkpoint.json`, and numbered intermediate checkpoints every
    `save_interval` epochs.
    """
    meta = dataset.meta
    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        if ck.meta != meta:
            raise TrainingError(f"checkpoint meta {ck.meta} does not match dataset meta {meta}")
        if ck.epoch >= config.epochs:
            raise TrainingError(f"checkpoint already at epoch {ck.epoch}, config asks for {config.epochs}")
        params = ck.params
        state = EpochState(
            epoch=ck.epoch,
            bank=_bank_from_payload(ck.prototypes, meta.num_total_classes),
            rng=rng_from_string(ck.rng_state),
            velocity=_velocity_from_payload(ck.velocity),
        )
    else:
        rng = np.random.default_rng(config.seed)
        params = init_params(
            meta.feature_dim,
            meta.num_total_classes,
            rng,
            feature_dim=config.feature_dim,
            hidden_dim=config.hidden_dim,
        )
        state = EpochState(epoch=0, bank=PrototypeBank(num_classes=meta.num_total_classes), rng=rng)

    out_dir = Path(out_dir) if out_dir is not None else None
    jsonl = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        mode = "a" if resume_from is not None else "w"
        jsonl = open(out_dir / "epochs.jsonl", mode, encoding="utf-8")
    checkpoint_path = None
    try:
        for _ in range(state.epoch, config.epochs):
            params, report = train_epoch(params, state, dataset, config)
            if jsonl is not None:
                jsonl.write(dumps_canonical(report, compact=True))
            if out_dir is not None and config.save_interval and state.epoch % config.save_interval == 0 and state.epoch < config.epochs:
                _write_checkpoint(out_dir / f"checkpoint-{state.epoch:04d}.json", params, meta, state, config)
        if out_dir is not None:
            checkpoint_path = _write_checkpoint(out_dir / "checkpoint.json", params, meta, state, config)
    finally:
        if jsonl is not None:
            jsonl.close()
    return TrainResult(params=params, state=state, history=list(state.history), checkpoint_path=checkpoint_path)


def _write_checkpoint(path: Path, params: ModelParams, meta, state: EpochState, config: TrainConfig) -> Path:
    return save_checkpoint(
        path,
        params,
        meta,
        state.epoch,
        rng_state_to_string(state.rng),
        prototypes=_bank_payload(state.bank),
        velocity=_velocity_payload(state.velocity) if config.momentum > 0 else None,
    )


@dataclass
class GradcheckReport:
    """Per-term, per-block worst relative error from central differences."""

    passed: bool
    tolerance: float
    step: float
    max_rel_err: dict[str, dict[str, float]]
    term_passed: dict[str, bool]
    runtime_seconds: float

    def worst(self) -> tuple[str, str, float]:
        t, b, e = "", "", -1.0
        for term, blocks in self.max_rel_err.items():
            for block, err in blocks.items():
                if err > e:
                    t, b, e = term, block, err
        return t, b, e

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "tolerance": self.tolerance,
            "step": self.step,
            "terms": {t: {b: self.max_rel_err[t][b] for b in sorted(self.max_rel_err[t])} for t in sorted(self.max_rel_err)},
            "term_passed": {t: self.term_passed[t] for t in sorted(self.term_passed)},
            "runtime_seconds": self.runtime_seconds,
        }


GRADCHECK_TERMS = ("probe", "gallery", "intra_bag", "cross_view", "entropy", "total")


def gradcheck(
    dataset: Dataset,
    config: TrainConfig,
    h: float = 1e-5,
    delta: float = 0.5,
    tolerance: float = 1e-4,
    terms: tuple[str, ...] = GRADCHECK_TERMS,
    corrupt_block: str | None = None,
    params: ModelParams | None = None,
) -> GradcheckReport:
    """Compare analytic gradients against central differences per term.

    Seeds, groups, assignments and prototypes are frozen from the
    unperturbed forward pass, so every term is smooth in the parameters
    during the check. Entries with |analytic| < 1e-8 are compared
    absolutely at that same threshold. `corrupt_block` (test hook) adds
    1e-2 to one entry of the named analytic gradient block, which must
    make the check fail and name the block.
    """
    started = time.perf_counter()
    unknown = set(terms) - set(GRADCHECK_TERMS)
    if unknown:
        raise ValueError(f"unknown gradcheck terms: {sorted(unknown)}")
    meta = dataset.meta
    if params is None:
        rng = np.random.default_rng(config.seed)
        params = init_params(meta.feature_dim, meta.num_total_classes, rng,
                             feature_dim=config.feature_dim, hidden_dim=config.hidden_dim)
    hp = config.hyper

    all_bags = list(dataset.probe) + list(dataset.gallery)
    base_fwd = [forward_bag(params, bag) for bag in all_bags]
    by_id = {bd.bag_id: bd for bd in base_fwd}
    gallery_fwd = [bd for bd in base_fwd if bd.bag.role == "gallery"]
    seeds = {(bd.bag_id, c): seed_index(bd, c) for bd in gallery_fwd for c in bd.bag.label.classes}
    groups = form_groups(gallery_fwd, hp)
    idx = build_assignments(base_fwd, groups)
    bank = PrototypeBank(num_classes=meta.num_total_classes)
    for c in idx.classes():
        proto = compute_epoch_prototype(idx, c, by_id)
        if proto is not None:
            update_prototype(bank, c, proto, hp.alpha)

    def term_values(p: ModelParams) -> dict[str, float]:
        fwd = [forward_bag(p, bag) for bag in all_bags]
        m = {bd.bag_id: bd for bd in fwd}
        gal = [bd for bd in fwd if bd.bag.role == "gallery"]
        pro = [bd for bd in fwd if bd.bag.role == "probe"]
        lp = probe_loss(pro)
        lg = gallery_loss(gal, seeds=seeds)
        lia = intra_bag_loss(m, groups)
        lca = cross_view_loss(idx, bank, m)
        le = entropy_loss(gal)
        lt = total_loss(classification_loss(lp, lg), lia, lca, le, delta)
        return {
            "probe": lp.value, "gallery": lg.value, "intra_bag": lia.value,
            "cross_view": lca.value, "entropy": le.value, "total": lt.value,
        }

    def term_grads() -> dict[str, Gradients]:
        lp = probe_loss([bd for bd in base_fwd if bd.bag.role == "probe"])
        lg = gallery_loss(gallery_fwd, seeds=seeds)
        lia = intra_bag_loss(by_id, groups)
        lca = cross_view_loss(idx, bank, by_id)
        le = entropy_loss(gallery_fwd)
        lt = total_loss(classification_loss(lp, lg), lia, lca, le, delta)
        losses = {"probe": lp, "gallery": lg, "intra_bag": lia, "cross_view": lca, "entropy": le, "total": lt}
        out = {}
        for name, loss in losses.items():
            g = Gradients.zeros_like(params)
            for bd in base_fwd:
                dl = loss.dlogits.get(bd.bag_id)
                if dl is not None:
                    g = g.add(backward(params, bd.raw, dl))
            out[name] = g
        return out

    analytic = term_grads()
    block_names = [name for name, _ in params.blocks()]
    if corrupt_block is not None:
        if corrupt_block not in block_names:
            raise ValueError(f"unknown block {corrupt_block!r}; have {block_names}")
        for name in terms:
            for bname, arr in analytic[name].blocks():
                if bname == corrupt_block:
                    arr.flat[0] += 1e-2

    max_err: dict[str, dict[str, float]] = {name: {} for name in terms}
    for bname, base_arr in params.blocks():
        numeric = {name: np.zeros_like(base_arr) for name in terms}
        flat = base_arr.ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            plus = term_values(params)
            flat[j] = orig - h
            minus = term_values(params)
            flat[j] = orig
            for name in terms:
                numeric[name].ravel()[j] = (plus[name] - minus[name]) / (2.0 * h)
        for name in terms:
            adict = dict(analytic[name].blocks())
            a = adict[bname].ravel()
            n = numeric[name].ravel()
            small = np.abs(a) < 1e-8
            err_small = np.abs(a - n)
            denom = np.maximum(np.abs(a), np.abs(n))
            err_rel = np.where(denom > 0, np.abs(a - n) / np.where(denom > 0, denom, 1.0), 0.0)
            errs = np.where(small, np.where(err_small < 1e-8, 0.0, 1.0 + err_small), err_rel)
            max_err[name][bname] = float(errs.max()) if errs.size else 0.0

    term_passed = {name: all(err < tolerance for err in max_err[name].values()) for name in terms}
    return GradcheckReport(
        passed=all(term_passed.values()),
        tolerance=tolerance,
        step=h,
        max_rel_err=max_err,
        term_passed=term_passed,
        runtime_seconds=time.perf_counter() - started,
    )
