"""Command-line entry point: synth, train, infer, evaluate, report.

Exit codes: 0 on success, 1 on a runtime error, 2 on a usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import shutil
import sys
import warnings
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .core import ConfigError, load_config
from .data import (
    assign_splits,
    default_domain_specs,
    generate_synthetic,
    load_volume,
    read_manifest,
    save_volume,
    write_dataset,
)
from .metrics import (
    HIGHER_IS_BETTER,
    METRIC_NAMES,
    MetricsConfig,
    aggregate,
    compare_methods,
    evaluate_case,
    rank_score,
)

log = logging.getLogger("stageunlearn")

STAGE_TABLE = "stage_accuracy"
METHOD_TABLE = "methods"
EVAL_REPORT = "metrics"


def _nifti_files(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.name.endswith((".nii", ".nii.gz")))


def _write_json(obj: Any, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


def _write_csv(rows: Sequence[Mapping[str, Any]], fields: Sequence[str], path: Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(fields), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k)) for k in fields})


def _fmt(value: Any) -> Any:
    if isinstance(value, float):
        return "nan" if math.isnan(value) else repr(round(value, 10))
    return "" if value is None else value


# --------------------------------------------------------------------------
# synth


def cmd_synth(args: argparse.Namespace) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise FileExistsError(f"{out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    shape = args.shape[0] if len(args.shape) == 1 else tuple(args.shape)
    specs = default_domain_specs(args.domains)
    samples = generate_synthetic(specs, args.n, shape, seed=args.seed)
    splits = assign_splits(samples, args.val, args.test)
    manifest = write_dataset(samples, out, [s.name for s in specs], splits)
    log.info("wrote %d cases from %d domains to %s", len(manifest), args.domains, out)
    return 0


# --------------------------------------------------------------------------
# train / infer


def cmd_train(args: argparse.Namespace) -> int:
    from .trainer import train

    cfg = load_config(args.config)
    manifest = read_manifest(args.manifest)
    result = train(cfg, manifest, args.out, resume=args.resume)
    log.info("latest checkpoint %s, best %s", result.latest, result.best)
    return 0


def cmd_infer(args: argparse.Namespace) -> int:
    from .trainer import infer, load_checkpoint

    if args.manifest:
        entries = read_manifest(args.manifest).split(args.split)
        files = [Path(e.image) for e in entries]
    else:
        files = _nifti_files(Path(args.input))
    if not files:
        raise FileNotFoundError("no input volumes")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = load_checkpoint(args.ckpt)
    for path in files:
        mask = infer(ckpt, [load_volume(path).astype(np.float32)], mirror=not args.no_mirror)[0]
        save_volume(mask, out / path.name)
    log.info("wrote %d masks to %s", len(files), out)
    return 0


# --------------------------------------------------------------------------
# evaluate


def _parse_pred(spec: str) -> tuple[str, Path]:
    if "=" in spec:
        name, path = spec.split("=", 1)
        return name, Path(path)
    return Path(spec).name, Path(spec)


def evaluate_methods(
    preds: Mapping[str, Path], ref_dir: Path, cfg: MetricsConfig
) -> dict[str, Any]:
    """Per-case metrics, aggregates, ranks and paired tests for each method."""
    methods: dict[str, Any] = {}
    case_ids: list[str] | None = None
    for name, pred_dir in preds.items():
        files = _nifti_files(pred_dir)
        if not files:
            raise FileNotFoundError(f"no predictions in {pred_dir}")
        ids = [p.name for p in files]
        if case_ids is None:
            case_ids = ids
        elif ids != case_ids:
            raise ValueError(f"{name}: prediction files differ from the first method's")
        rows = []
        for p in files:
            ref_path = ref_dir / p.name
            if not ref_path.exists():
                raise FileNotFoundError(f"no reference for {p.name} in {ref_dir}")
            scores = evaluate_case(load_volume(p) > 0, load_volume(ref_path) > 0, cfg.t_iou)
            rows.append({"case": p.name.split(".nii")[0], **scores})
        methods[name] = {"per_case": rows, "aggregate": aggregate(rows, cfg)}

    report: dict[str, Any] = {"t_iou": cfg.t_iou, "methods": methods}
    names = list(methods)
    if len(names) >= 2:
        table = rank_score({m: {k: methods[m]["aggregate"][k]["mean"] for k in METRIC_NAMES} for m in names})
        report["ranks"] = table.ranks
        report["rs"] = table.rs
        # every other method against the first, Bonferroni over the comparisons
        reference = names[0]
        cmp_cfg = MetricsConfig(t_iou=cfg.t_iou, alpha=cfg.alpha, n_methods=len(names) - 1)
        comparisons: dict[str, Any] = {}
        for other in names[1:]:
            comparisons[other] = {}
            for metric in METRIC_NAMES:
                a = [r[metric] for r in methods[reference]["per_case"]]
                b = [r[metric] for r in methods[other]["per_case"]]
                c = compare_methods(a, b, cmp_cfg)
                comparisons[other][metric] = {
                    "p_raw": c.p_raw, "p_adjusted": c.p_adjusted, "significant": c.significant,
                }
        report["comparisons"] = {"reference": reference, "against": comparisons}
    return report


def cmd_evaluate(args: argparse.Namespace) -> int:
    preds = dict(_parse_pred(p) for p in args.pred)
    cfg = MetricsConfig(t_iou=args.t_iou, bootstrap_resamples=args.resamples, seed=args.seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        report = evaluate_methods(preds, Path(args.ref), cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(report, out / f"{EVAL_REPORT}.json")

    rows = []
    for name, m in report["methods"].items():
        for r in m["per_case"]:
            rows.append({"method": name, "row": "case", **r})
        for stat in ("mean", "sd", "ci_low", "ci_high"):
            rows.append({
                "method": name, "row": stat, "case": "",
                **{k: m["aggregate"][k][stat] for k in METRIC_NAMES},
            })
        if "rs" in report:
            rows.append({"method": name, "row": "rank", "case": "", **report["ranks"][name], "rs": report["rs"][name]})
    fields = ["method", "row", "case", *METRIC_NAMES, "n_ref_lesions", "n_pred_lesions"]
    if "rs" in report:
        fields.append("rs")
    _write_csv(rows, fields, out / f"{EVAL_REPORT}.csv")
    log.info("evaluated %d method(s); report in %s", len(preds), out)
    return 0


# --------------------------------------------------------------------------
# report


def read_events(path: Path) -> list[dict[str, Any]]:
    if not path.exists():
        raise FileNotFoundError(f"event log {path} not found")
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def stage_accuracy_table(events: Sequence[Mapping[str, Any]]) -> list[dict[str, Any]]:
    """Windowed classifier accuracy per stage at the end of warm-up and at the end of training.

    The post-unlearning column is ``"n/a"`` when the log holds no unlearning step.
    """
    steps = [e for e in events if e.get("type") == "step"]
    if not steps:
        raise ValueError("event log holds no training steps")
    warm = [e for e in steps if e["warmup"]]
    post_warmup = warm[-1]["acc_window"] if warm else {}
    unlearned = any(e["unlearned"] for e in steps)
    final = steps[-1]["acc_window"] if unlearned else {}
    stages = sorted({int(k) for k in post_warmup} | {int(k) for k in final})
    ever = sorted({s for e in steps for s in e["unlearned"]})
    return [
        {
            "stage": s,
            "post_warmup": post_warmup.get(str(s), "n/a"),
            "post_unlearning": final.get(str(s), "n/a") if unlearned else "n/a",
            "unlearned": s in ever,
        }
        for s in stages
    ]


def method_means(paths: Sequence[Path]) -> dict[str, dict[str, float]]:
    """Mean metric values per method from evaluate reports or plain mean tables.

    A plain table looks like ``{"methods": {"name": {"means": {"dsc": ...}}}}``.
    """
    means: dict[str, dict[str, float]] = {}
    for path in paths:
        data = json.loads(Path(path).read_text())
        for name, m in data["methods"].items():
            if name in means:
                raise ValueError(f"method {name!r} appears in more than one report")
            if "means" in m:
                means[name] = {k: float(m["means"][k]) for k in METRIC_NAMES}
            else:
                means[name] = {k: float(m["aggregate"][k]["mean"]) for k in METRIC_NAMES}
    return means


def _plot_events(events: Sequence[Mapping[str, Any]], out: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps = [e for e in events if e.get("type") == "step"]
    its = [e["iteration"] for e in steps]
    stages = sorted({int(k) for e in steps for k in e["acc_window"]})
    written = []

    fig, ax = plt.subplots(figsize=(7, 4))
    for s in stages:
        ax.plot(its, [e["acc_window"].get(str(s), np.nan) for e in steps], label=f"stage {s}")
    warm = [e["iteration"] for e in steps if e["warmup"]]
    if warm:
        ax.axvline(warm[-1], color="grey", ls="--", lw=0.8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("windowed classifier accuracy")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = out / "accuracy.png"
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(its, [e["seg_loss"] for e in steps], label="segmentation")
    for s in stages:
        xs = [e["iteration"] for e in steps if str(s) in e["conf_loss"]]
        if xs:
            ax.plot(xs, [e["conf_loss"][str(s)] for e in steps if str(s) in e["conf_loss"]], ".", ms=2,
                    label=f"confusion, stage {s}")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = out / "loss.png"
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    written.append(path)
    return written


def cmd_report(args: argparse.Namespace) -> int:
    if not args.events and not args.metrics:
        raise ValueError("report needs --events and/or --metrics")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.events:
        events = read_events(Path(args.events))
        table = stage_accuracy_table(events)
        _write_json(table, out / f"{STAGE_TABLE}.json")
        _write_csv(table, ["stage", "post_warmup", "post_unlearning", "unlearned"], out / f"{STAGE_TABLE}.csv")
        if not args.no_plots:
            _plot_events(events, out)
    if args.metrics:
        means = method_means([Path(p) for p in args.metrics])
        if len(means) < 2:
            # ranks need a comparison; a single method only gets its means
            (name, values), = means.items()
            _write_json({"methods": [name], "means": means}, out / f"{METHOD_TABLE}.json")
            _write_csv([{"method": name, **values}], ["method", *METRIC_NAMES], out / f"{METHOD_TABLE}.csv")
            log.info("report written to %s", out)
            return 0
        ranked = rank_score(means)
        rows = [
            {"method": m, **ranked.means[m], **{f"rank_{k}": ranked.ranks[m][k] for k in METRIC_NAMES}, "rs": ranked.rs[m]}
            for m in ranked.methods
        ]
        _write_json(
            {"methods": ranked.methods, "means": ranked.means, "ranks": ranked.ranks, "rs": ranked.rs,
             "higher_is_better": HIGHER_IS_BETTER},
            out / f"{METHOD_TABLE}.json",
        )
        _write_csv(rows, ["method", *METRIC_NAMES, *[f"rank_{k}" for k in METRIC_NAMES], "rs"], out / f"{METHOD_TABLE}.csv")
    log.info("report written to %s", out)
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stageunlearn", description=__doc__.splitlines()[0])
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multi-domain dataset")
    p.add_argument("--domains", type=int, required=True, help="number of simulated scanners (>= 2)")
    p.add_argument("--n", type=int, required=True, help="cases per domain")
    p.add_argument("--shape", type=int, nargs="+", default=[32], help="volume size: one int or three")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val", type=int, default=2, help="validation cases per domain")
    p.add_argument("--test", type=int, default=2, help="test cases per domain")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a segmentation network with stage-wise unlearning")
    p.add_argument("--config", required=True, help="run configuration (YAML)")
    p.add_argument("--manifest", required=True, help="dataset manifest (CSV)")
    p.add_argument("--out", required=True, help="run directory for checkpoints and the event log")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="segment volumes with a trained checkpoint")
    p.add_argument("--ckpt", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--in", dest="input", help="directory of NIfTI volumes")
    src.add_argument("--manifest", help="dataset manifest; segments the --split cases")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--out", required=True, help="directory for the binary masks")
    p.add_argument("--no-mirror", action="store_true", help="skip the 8-fold mirroring ensemble")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="voxel- and lesion-wise metrics against reference masks")
    p.add_argument("--pred", required=True, action="append",
                   help="prediction directory, optionally NAME=DIR; repeat to compare methods")
    p.add_argument("--ref", required=True, help="reference mask directory")
    p.add_argument("--out", required=True)
    p.add_argument("--t-iou", type=float, default=0.05, help="lesion IoU matching threshold")
    p.add_argument("--resamples", type=int, default=2000, help="bootstrap resamples")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="stage-accuracy and method-ranking tables plus plots")
    p.add_argument("--events", help="events.jsonl of a training run")
    p.add_argument("--metrics", nargs="+", help="evaluate reports or mean-value tables (JSON)")
    p.add_argument("--out", required=True)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, KeyError, OSError, RuntimeError) as exc:
        print(f"stageunlearn {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
