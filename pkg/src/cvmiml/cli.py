"""Command-line entry points.

Five subcommands: `simulate` (synthetic weak-label datasets), `train`,
`eval`, `gradcheck`, and `ablate` (the term-removal comparison). Every
run writes exactly one manifest recording the resolved config, input
hashes, output names, seed, and package version; reruns are
byte-identical except for the manifest timestamp.

Exit codes: 0 success, 1 runtime failure (message on stderr), 2 usage
error (argparse).
"""

from __future__ import annotations

import argparse
import statistics
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .align import Hyperparams
from .core import CvmimlError, load_dataset
from .jsonio import dump_canonical, sha256_file
from .model import load_checkpoint
from .retrieval import evaluate
from .train import GRADCHECK_TERMS, AblationMask, TrainConfig, gradcheck, train
from .weakdata import GeneratorConfig, simulate

# preset values were fixed empirically: sigma_view large enough that raw
# distances confound view with identity (the baseline objective stalls
# there) while 30 epochs of the full objective still separate identities
PRESETS: dict[str, dict[str, dict]] = {
    "small": {
        "generator": dict(
            num_known_classes=32,
            num_views=4,
            feature_dim=16,
            seq_min=5,
            seq_max=10,
            sigma_id=1.0,
            sigma_view=3.0,
            sigma_noise=0.2,
            bag_min=3,
            bag_max=8,
            p_miss=0.2,
            unknown_ids=6,
            unknown_rate=0.4,
        ),
        "train": dict(epochs=30, lr=0.1, batch_bags=8),
    },
    "medium": {
        "generator": dict(
            num_known_classes=64,
            num_views=4,
            feature_dim=32,
            seq_min=5,
            seq_max=10,
            sigma_id=1.0,
            sigma_view=3.0,
            sigma_noise=0.2,
            bag_min=3,
            bag_max=8,
            p_miss=0.2,
            unknown_ids=8,
            unknown_rate=0.4,
        ),
        "train": dict(epochs=30, lr=0.1, batch_bags=8),
    },
}

ABLATION_CONFIGS: list[tuple[str, AblationMask]] = [
    ("CV-MIML", AblationMask(True, True, True)),
    ("baseline+IA", AblationMask(True, False, False)),
    ("baseline+CA", AblationMask(False, True, False)),
    ("baseline+entropy", AblationMask(False, False, True)),
    ("baseline", AblationMask(False, False, False)),
]


def _probability(s: str) -> float:
    try:
        v = float(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {s!r}")
    if not (0.0 <= v <= 1.0):
        raise argparse.ArgumentTypeError(f"must be in [0, 1], got {s}")
    return v


def _probability_open(s: str) -> float:
    v = _probability(s)
    if v >= 1.0:
        raise argparse.ArgumentTypeError(f"must be in [0, 1), got {s}")
    return v


def _positive_int(s: str) -> int:
    try:
        v = int(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {s!r}")
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {s}")
    return v


def _nonneg_int(s: str) -> int:
    try:
        v = int(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {s!r}")
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {s}")
    return v


def _positive_float(s: str) -> float:
    try:
        v = float(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {s!r}")
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {s}")
    return v


def _nonneg_float(s: str) -> float:
    try:
        v = float(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {s!r}")
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {s}")
    return v


def _ranks(s: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(tok) for tok in s.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {s!r}")
    if not vals or any(v < 1 for v in vals) or list(vals) != sorted(set(vals)):
        raise argparse.ArgumentTypeError(f"ranks must be strictly increasing positive ints, got {s!r}")
    return vals


def _seed_list(s: str) -> tuple[int, ...]:
    s = s.strip()
    if ".." in s:
        lo_s, hi_s = s.split("..", 1)
        try:
            lo, hi = int(lo_s), int(hi_s)
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad seed range {s!r}")
        if hi < lo:
            raise argparse.ArgumentTypeError(f"empty seed range {s!r}")
        return tuple(range(lo, hi + 1))
    try:
        return tuple(int(tok) for tok in s.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected seeds like '0..4' or '0,1,2', got {s!r}")


def _mask(s: str) -> AblationMask:
    key = s.strip().lower()
    if key == "full":
        return AblationMask(True, True, True)
    if key == "none":
        return AblationMask(False, False, False)
    parts = set(tok for tok in key.replace("+", ",").split(",") if tok)
    bad = parts - {"ia", "ca", "e"}
    if bad:
        raise argparse.ArgumentTypeError(f"unknown ablation terms {sorted(bad)}; use full, none, or ia/ca/e combos")
    return AblationMask("ia" in parts, "ca" in parts, "e" in parts)


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _write_manifest(path: Path, command: str, config: dict, inputs: list[Path], outputs: list[Path], seed) -> Path:
    doc = {
        "command": command,
        "config": config,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": [p.name for p in outputs],
        "seed": seed,
        "version": __version__,
        "created_utc": _utc_now(),
    }
    return dump_canonical(doc, path)


def _resolve(explicit, preset_value, default):
    if explicit is not None:
        return explicit
    if preset_value is not None:
        return preset_value
    return default


def _generator_config(args) -> GeneratorConfig:
    preset = PRESETS[args.preset]["generator"] if args.preset else {}
    g = lambda key: preset.get(key)
    base = GeneratorConfig()
    return GeneratorConfig(
        num_known_classes=_resolve(args.num_classes, g("num_known_classes"), base.num_known_classes),
        num_views=_resolve(args.num_views, g("num_views"), base.num_views),
        feature_dim=_resolve(args.feature_dim, g("feature_dim"), base.feature_dim),
        instances_per_sequence=(
            _resolve(args.seq_min, g("seq_min"), base.instances_per_sequence[0]),
            _resolve(args.seq_max, g("seq_max"), base.instances_per_sequence[1]),
        ),
        sigma_identity=_resolve(args.sigma_id, g("sigma_id"), base.sigma_identity),
        sigma_view=_resolve(args.sigma_view, g("sigma_view"), base.sigma_view),
        sigma_noise=_resolve(args.sigma_noise, g("sigma_noise"), base.sigma_noise),
        bag_size_range=(
            _resolve(args.bag_min, g("bag_min"), base.bag_size_range[0]),
            _resolve(args.bag_max, g("bag_max"), base.bag_size_range[1]),
        ),
        p_missing_label=_resolve(args.p_miss, g("p_miss"), base.p_missing_label),
        unknown_identities=_resolve(args.unknown_ids, g("unknown_ids"), base.unknown_identities),
        unknown_rate=_resolve(args.unknown_rate, g("unknown_rate"), base.unknown_rate),
        tag_novel=bool(args.tag_novel),
        confidence_threshold=args.tau if args.tau is not None else base.confidence_threshold,
        seed=args.seed,
    )


def _train_config(args, mask: AblationMask | None = None) -> TrainConfig:
    preset = PRESETS[args.preset]["train"] if getattr(args, "preset", None) else {}
    t = lambda key: preset.get(key)
    base = TrainConfig()
    hp = Hyperparams(
        k_neighbors=_resolve(args.k_neighbors, t("k_neighbors"), Hyperparams().k_neighbors),
        gamma=_resolve(args.gamma, t("gamma"), Hyperparams().gamma),
        alpha=_resolve(args.alpha, t("alpha"), Hyperparams().alpha),
        ramp_epochs=_resolve(args.ramp_epochs, t("ramp_epochs"), Hyperparams().ramp_epochs),
        delta_max=_resolve(args.delta_max, t("delta_max"), Hyperparams().delta_max),
    )
    return TrainConfig(
        epochs=_resolve(args.epochs, t("epochs"), base.epochs),
        lr=_resolve(args.lr, t("lr"), base.lr),
        weight_decay=_resolve(args.weight_decay, t("weight_decay"), base.weight_decay),
        momentum=_resolve(args.momentum, t("momentum"), base.momentum),
        bags_per_step=_resolve(args.batch_bags, t("batch_bags"), base.bags_per_step),
        seed=args.seed,
        feature_dim=args.out_feature_dim,
        hidden_dim=args.hidden_dim,
        hyper=hp,
        mask=mask if mask is not None else (args.ablate or AblationMask()),
        save_interval=getattr(args, "save_interval", 0) or 0,
    )


def _config_echo(cfg) -> dict:
    doc = asdict(cfg)
    for key, val in list(doc.items()):
        if isinstance(val, tuple):
            doc[key] = list(val)
    return doc


def _add_generator_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=sorted(PRESETS), help="named generator/training preset")
    p.add_argument("--num-classes", type=_positive_int, dest="num_classes")
    p.add_argument("--num-views", type=_positive_int, dest="num_views")
    p.add_argument("--feature-dim", type=_positive_int, dest="feature_dim")
    p.add_argument("--seq-min", type=_positive_int, dest="seq_min")
    p.add_argument("--seq-max", type=_positive_int, dest="seq_max")
    p.add_argument("--sigma-id", type=_nonneg_float, dest="sigma_id")
    p.add_argument("--sigma-view", type=_nonneg_float, dest="sigma_view")
    p.add_argument("--sigma-noise", type=_nonneg_float, dest="sigma_noise")
    p.add_argument("--bag-min", type=_positive_int, dest="bag_min")
    p.add_argument("--bag-max", type=_positive_int, dest="bag_max")
    p.add_argument("--p-miss", type=_probability_open, dest="p_miss")
    p.add_argument("--unknown-ids", type=_nonneg_int, dest="unknown_ids")
    p.add_argument("--unknown-rate", type=_probability, dest="unknown_rate")
    p.add_argument("--tag-novel", action="store_true")
    p.add_argument("--tau", type=_probability, help="confidence threshold; instances below are dropped")
    p.add_argument("--seed", type=_nonneg_int, default=0)


def _add_train_flags(p: argparse.ArgumentParser, with_ablate: bool = True) -> None:
    p.add_argument("--preset", choices=sorted(PRESETS), help="named training preset")
    p.add_argument("--epochs", type=_positive_int)
    p.add_argument("--lr", type=_positive_float)
    p.add_argument("--weight-decay", type=_nonneg_float, dest="weight_decay")
    p.add_argument("--momentum", type=_probability_open)
    p.add_argument("--batch-bags", type=_positive_int, dest="batch_bags")
    p.add_argument("--seed", type=_nonneg_int, default=0)
    p.add_argument("--out-feature-dim", type=_positive_int, dest="out_feature_dim",
                   help="extractor output width (default: input width)")
    p.add_argument("--hidden-dim", type=_positive_int, dest="hidden_dim",
                   help="adds a tanh hidden layer of this width")
    p.add_argument("--k-neighbors", type=_positive_int, dest="k_neighbors")
    p.add_argument("--gamma", type=_positive_float)
    p.add_argument("--alpha", type=_probability)
    p.add_argument("--ramp-epochs", type=_positive_int, dest="ramp_epochs")
    p.add_argument("--delta-max", type=_probability, dest="delta_max")
    if with_ablate:
        p.add_argument("--ablate", type=_mask, help="terms to keep: full, none, or ia/ca/e combos")


def cmd_simulate(args) -> int:
    cfg = _generator_config(args)
    out = Path(args.out)
    ds, sidecar = simulate(cfg, out)
    sidecar_path = out.with_name(out.stem + ".provenance.json")
    manifest_path = out.with_name(out.stem + ".manifest.json")
    _write_manifest(manifest_path, "simulate", _config_echo(cfg), [], [out, sidecar_path], cfg.seed)
    print(
        f"wrote {out} ({len(ds.probe)} probe / {len(ds.gallery)} gallery bags, "
        f"{sidecar['counts']['gallery_instances']} gallery instances)"
    )
    return 0


def cmd_train(args) -> int:
    cfg = _train_config(args)
    dataset = load_dataset(args.data)
    out_dir = Path(args.out_dir)
    result = train(dataset, cfg, out_dir=out_dir, resume_from=args.resume)
    from .report import save_loss_curves

    figure = save_loss_curves(result.state.history, out_dir / "loss_curves.png")
    outputs = [result.checkpoint_path, out_dir / "epochs.jsonl", figure]
    inputs = [Path(args.data)] + ([Path(args.resume)] if args.resume else [])
    _write_manifest(out_dir / "manifest.json", "train", _config_echo(cfg), inputs, outputs, cfg.seed)
    final = result.state.history[-1]
    print(
        f"trained {cfg.epochs} epochs ({cfg.mask.tag()}); "
        f"final total loss {final['loss_total']:.6f}; checkpoint at {result.checkpoint_path}"
    )
    return 0


def cmd_eval(args) -> int:
    dataset = load_dataset(args.data)
    ck = load_checkpoint(args.checkpoint)
    if ck.meta != dataset.meta:
        raise CvmimlError(f"checkpoint meta {ck.meta} does not match dataset meta {dataset.meta}")
    outcome = evaluate(dataset, ck.params, ranks=args.ranks)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = dump_canonical(outcome.report, out_dir / "metrics.json")
    from .report import save_cmc_curve, write_csv

    csv_path = write_csv(
        out_dir / "per_query.csv",
        outcome.per_query,
        ["query_id", "query_class", "first_hit_rank", "average_precision", "num_relevant"],
    )
    figure = save_cmc_curve(outcome.curve, outcome.report["map"], out_dir / "cmc_curve.png")
    _write_manifest(
        out_dir / "manifest.json",
        "eval",
        {"ranks": list(args.ranks)},
        [Path(args.data), Path(args.checkpoint)],
        [metrics_path, csv_path, figure],
        None,
    )
    cmc_str = ", ".join(f"r{r}={outcome.report['cmc'][str(r)]:.4f}" for r in args.ranks)
    print(f"{cmc_str}, mAP={outcome.report['map']:.4f} ({outcome.report['num_queries']} queries, "
          f"{len(outcome.report['excluded'])} excluded)")
    return 0


def cmd_gradcheck(args) -> int:
    dataset = load_dataset(args.data)
    cfg = _train_config(args)
    terms = tuple(t.strip() for t in args.terms.split(",")) if args.terms else GRADCHECK_TERMS
    try:
        report = gradcheck(
            dataset,
            cfg,
            h=args.h,
            delta=args.delta,
            terms=terms,
            corrupt_block=args.corrupt_block,
        )
    except ValueError as exc:
        raise CvmimlError(str(exc)) from exc
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = dump_canonical(report.to_dict(), out_dir / "gradcheck.json")
    _write_manifest(out_dir / "manifest.json", "gradcheck", _config_echo(cfg), [Path(args.data)], [report_path], cfg.seed)
    for term in sorted(report.term_passed):
        worst_block = max(report.max_rel_err[term], key=report.max_rel_err[term].get)
        print(
            f"{'PASS' if report.term_passed[term] else 'FAIL'} {term}: "
            f"max rel err {report.max_rel_err[term][worst_block]:.3e} (block {worst_block})"
        )
    if not report.passed:
        term, block, err = report.worst()
        print(f"gradient check FAILED: term {term}, block {block}, rel err {err:.3e}", file=sys.stderr)
        return 1
    print(f"gradient check passed in {report.runtime_seconds:.2f}s")
    return 0


def cmd_ablate(args) -> int:
    dataset = load_dataset(args.data)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    per_seed_rows = []
    summary_rows = []
    for name, mask in ABLATION_CONFIGS:
        r1s, mps = [], []
        for seed in args.seeds:
            ns = argparse.Namespace(**vars(args))
            ns.seed = seed
            cfg = _train_config(ns, mask=mask)
            result = train(dataset, cfg)
            outcome = evaluate(dataset, result.params)
            r1 = outcome.report["cmc"]["1"]
            mp = outcome.report["map"]
            r1s.append(r1)
            mps.append(mp)
            per_seed_rows.append({"config": name, "seed": seed, "rank1": r1, "map": mp})
            print(f"{name} seed {seed}: rank-1 {r1:.4f}, mAP {mp:.4f}")
        summary_rows.append(
            {
                "config": name,
                "rank1_median": _median(r1s),
                "map_median": _median(mps),
                "rank1": r1s,
                "map": mps,
            }
        )
    from .report import save_ablation_chart, write_csv

    csv_rows = per_seed_rows + [
        {"config": row["config"], "seed": "median", "rank1": row["rank1_median"], "map": row["map_median"]}
        for row in summary_rows
    ]
    csv_path = write_csv(out_dir / "ablation.csv", csv_rows, ["config", "seed", "rank1", "map"])
    json_path = dump_canonical(
        {"seeds": list(args.seeds), "rows": summary_rows}, out_dir / "ablation.json"
    )
    figure = save_ablation_chart(summary_rows, out_dir / "ablation.png")
    config_echo = _config_echo(_train_config(args, mask=AblationMask()))
    config_echo["seeds"] = list(args.seeds)
    _write_manifest(out_dir / "manifest.json", "ablate", config_echo, [Path(args.data)], [csv_path, json_path, figure], None)
    for row in summary_rows:
        print(f"{row['config']}: median rank-1 {row['rank1_median']:.4f}, median mAP {row['map_median']:.4f}")
    return 0


def _median(vals: list[float]) -> float:
    return float(statistics.median(vals))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cvmiml",
        description="Cross-view multi-instance multi-label learning on weakly labeled bags of feature vectors.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="generate a synthetic weakly labeled dataset")
    _add_generator_flags(p_sim)
    p_sim.add_argument("--out", required=True, help="dataset output path (.json)")
    p_sim.set_defaults(func=cmd_simulate)

    p_train = sub.add_parser("train", help="train a model on a dataset")
    p_train.add_argument("--data", required=True)
    p_train.add_argument("--out-dir", default="train-run", dest="out_dir")
    p_train.add_argument("--resume", help="checkpoint to continue from")
    p_train.add_argument("--save-interval", type=_positive_int, dest="save_interval",
                         help="write numbered checkpoints every N epochs")
    _add_train_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="rank the gallery and score CMC / mAP")
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--ranks", type=_ranks, default=(1, 5, 10, 20))
    p_eval.add_argument("--out-dir", default="eval-run", dest="out_dir")
    p_eval.set_defaults(func=cmd_eval)

    p_grad = sub.add_parser("gradcheck", help="verify analytic gradients with central differences")
    p_grad.add_argument("--data", required=True)
    p_grad.add_argument("--out-dir", default="gradcheck-run", dest="out_dir")
    p_grad.add_argument("--h", type=_positive_float, default=1e-5)
    p_grad.add_argument("--delta", type=_nonneg_float, default=0.5)
    p_grad.add_argument("--terms", help="comma-separated subset of probe,gallery,intra_bag,cross_view,entropy,total")
    p_grad.add_argument("--corrupt-block", dest="corrupt_block", help=argparse.SUPPRESS)
    _add_train_flags(p_grad, with_ablate=False)
    p_grad.set_defaults(func=cmd_gradcheck, ablate=None)

    p_abl = sub.add_parser("ablate", help="train and score each ablation configuration")
    p_abl.add_argument("--data", required=True)
    p_abl.add_argument("--out-dir", default="ablate-run", dest="out_dir")
    p_abl.add_argument("--seeds", type=_seed_list, default=(0, 1, 2, 3, 4))
    _add_train_flags(p_abl, with_ablate=False)
    p_abl.set_defaults(func=cmd_ablate, ablate=None, save_interval=0)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CvmimlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
