"""Command-line front end and run orchestration.

Subcommands: train-victim, craft, eval, defend, analyze, compare (plus
make-data for materializing the synthetic corpora). Each run writes a
self-describing directory: manifest.json, weights/, perturbations/,
reports/, plots/. All randomness flows from config seeds.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import traceback
from pathlib import Path
from urllib.parse import parse_qs, urlparse

import jsonschema
import numpy as np

from . import analysis, datasets, defenses
from .adapter import load_weights
from .crafting import (CraftConfig, craft, load_perturbation,
                       perturbed_predictions, random_baseline)
from .metrics import MetricReport, dump_report, fooling_rate, miou
from .priors import (build_data_prior, build_none_prior, build_range_prior,
                     curate_less_bg)
from .training import VictimSpec, top1_accuracy, train_victim

CACHE_ENV = "GDUAP_CACHE_DIR"

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "paths": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dataset_root": {"type": "string"},
                "substitute_root": {"type": "string"},
                "output_dir": {"type": "string"},
                "weights": {"type": "string"},
                "perturbations": {
                    "type": "object",
                    "additionalProperties": {"type": "string"},
                },
            },
        },
        "victim": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "architecture_id": {
                    "enum": ["small_conv_a", "small_conv_b", "toy_fcn"]},
                "num_classes": {"type": "integer", "minimum": 2},
                "train_dataset_id": {"type": "string"},
                "seed": {"type": "integer"},
                "epochs": {"type": "integer", "minimum": 1},
                "model_id": {"type": "string"},
            },
            "required": ["architecture_id", "num_classes"],
        },
        "craft": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "xi": {"type": "number", "exclusiveMinimum": 0},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "theta": {"type": "number", "exclusiveMinimum": 0},
                "patience_H": {"type": "integer", "minimum": 1},
                "val_every_saturating": {"type": "integer", "minimum": 1},
                "val_every_quiet": {"type": "integer", "minimum": 1},
                "max_iterations": {"type": "integer", "minimum": 1},
                "prior_mode": {"enum": ["none", "range", "data"]},
                "aggregation": {"enum": ["log_product", "mean"]},
                "seed": {"type": "integer"},
                "batch_size": {"type": "integer", "minimum": 1},
                "range_mean": {"type": ["number", "array"]},
                "curate_less_bg": {"type": "boolean"},
                "bg_class": {"type": "integer", "minimum": 0},
                "name": {"type": "string"},
            },
        },
        "defense": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "properties": {
                    "kind": {"enum": list(defenses.TRANSFORM_KINDS)},
                    "params": {"type": "object"},
                },
                "required": ["kind"],
            },
        },
        "seed": {"type": "integer"},
    },
}


class SchemaViolation(Exception):
    pass


def _load_config(path: str | None, overrides: dict) -> dict:
    config = {}
    if path:
        try:
            config = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise SchemaViolation(f"{path}: {exc}") from exc
    for dotted, value in overrides.items():
        node = config
        keys = dotted.split(".")
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    try:
        jsonschema.validate(config, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SchemaViolation(f"config key {where}: {exc.message}") from exc
    return config


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _prepare_out(config: dict, args) -> Path:
    out = Path(args.out or config.get("paths", {}).get("output_dir", ""))
    if not str(out):
        raise SchemaViolation("no output directory (use --out or paths.output_dir)")
    if (out / "manifest.json").exists() and not args.overwrite:
        raise RuntimeError(
            f"{out} already holds a run; pass --overwrite to replace it")
    for sub in ("weights", "perturbations", "reports", "plots"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, config: dict,
                    input_files: list, artifacts: list) -> None:
    manifest = {
        "command": command,
        "config": config,
        "inputs": {str(p): _sha256(Path(p)) for p in input_files
                   if Path(p).is_file()},
        "artifacts": sorted(str(Path(a).relative_to(out)) for a in artifacts),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1,
                                                  sort_keys=True))


def _cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV,
                               Path.home() / ".cache" / "gduap"))


def resolve_dataset(root: str, split: str = "train") -> datasets.Corpus:
    """Load a manifest directory, or materialize a synthetic corpus.

    Synthetic URIs look like ``synthetic:desk10?n_train=2000&n_test=400&
    seed=0`` and are cached under $GDUAP_CACHE_DIR.
    """
    if root.startswith("synthetic:"):
        parsed = urlparse(root)
        kind = parsed.path
        q = {k: int(v[0]) for k, v in parse_qs(parsed.query).items()}
        seed = q.get("seed", 0)
        n_train = q.get("n_train", 1000)
        n_test = q.get("n_test", 200)
        cache = _cache_dir() / f"{kind}_tr{n_train}_te{n_test}_s{seed}"
        if not (cache / "manifest.json").exists():
            datasets.materialize(
                datasets.make_synthetic(kind, n_train, seed), cache, "train")
            datasets.materialize(
                datasets.make_synthetic(kind, n_test, seed + 1), cache, "test")
        root = str(cache)
    return datasets.load_corpus(root, split)


def _dataset_id(config: dict) -> str:
    return config.get("paths", {}).get("dataset_root", "")


# -- subcommands ----------------------------------------------------------

def cmd_train_victim(config: dict, args) -> int:
    out = _prepare_out(config, args)
    vc = config["victim"]
    root = config["paths"]["dataset_root"]
    train = resolve_dataset(root, "train")
    test = resolve_dataset(root, "test")
    spec = VictimSpec(vc["architecture_id"], vc["num_classes"],
                      vc.get("train_dataset_id", root),
                      vc.get("seed", config.get("seed", 0)))
    adapter = train_victim(spec, train, epochs=vc.get("epochs", 8),
                           model_id=vc.get("model_id", ""))
    acc = top1_accuracy(adapter, test)
    weights_path = out / "weights" / f"{adapter.model_id}.uapw"
    adapter.save(weights_path)
    report_path = out / "reports" / "training.json"
    report_path.write_text(dump_report(
        {"model_id": adapter.model_id, "test_top1": acc,
         "dataset": root, "n_train": len(train), "n_test": len(test)}))
    _write_manifest(out, "train-victim", config, [], [weights_path,
                                                      report_path])
    print(f"trained {adapter.model_id}: test top-1 {acc:.4f}")
    return 0


def _build_prior(config: dict, adapter, train_corpus):
    cc = config.get("craft", {})
    mode = cc.get("prior_mode", "none")
    seed = cc.get("seed", config.get("seed", 0))
    if mode == "none":
        return build_none_prior(adapter.input_shape)
    if mode == "range":
        mean = cc.get("range_mean")
        if mean is None:
            if train_corpus is None:
                raise RuntimeError("range prior needs range_mean or a dataset")
            mean = train_corpus.images.mean(axis=(0, 1, 2))
        return build_range_prior(mean, adapter.input_shape, seed)
    if train_corpus is None:
        raise RuntimeError("data prior needs paths.dataset_root")
    stream = train_corpus
    if cc.get("curate_less_bg") and stream.task == "segmentation":
        stream, _ = curate_less_bg(stream, cc.get("bg_class", 0))
    return build_data_prior(stream, adapter.input_shape)


def cmd_craft(config: dict, args) -> int:
    out = _prepare_out(config, args)
    paths = config["paths"]
    adapter = load_weights(paths["weights"])
    substitute = resolve_dataset(paths["substitute_root"], "train").images
    train_corpus = None
    if paths.get("dataset_root"):
        train_corpus = resolve_dataset(paths["dataset_root"], "train")
    cc = dict(config.get("craft", {}))
    name = cc.pop("name", None)
    for extra in ("range_mean", "curate_less_bg", "bg_class"):
        cc.pop(extra, None)
    if "seed" not in cc and "seed" in config:
        cc["seed"] = config["seed"]
    craft_config = CraftConfig(**cc)
    prior = _build_prior(config, adapter, train_corpus)
    result = craft(adapter, craft_config, prior, substitute,
                   log_every=200 if args.verbose else 0)
    name = name or f"{adapter.model_id}_{craft_config.prior_mode}"
    pert_path = out / "perturbations" / f"{name}.uapf"
    result.best.save(pert_path)
    snaps_path = out / "reports" / "craft_snapshots.npz"
    np.savez_compressed(
        snaps_path,
        iterations=np.asarray([i for i, _ in result.pre_rescale_snapshots]),
        deltas=np.stack([d for _, d in result.pre_rescale_snapshots])
        if result.pre_rescale_snapshots else np.empty((0,)),
    )
    hist_path = out / "reports" / "craft_history.json"
    hist_path.write_text(dump_report({
        "model_id": adapter.model_id,
        "prior_mode": craft_config.prior_mode,
        "best": result.best.meta,
        "rescale_events": result.rescale_events,
        "truncated": result.truncated,
        "checkpoints": [
            {"iteration": it, "p": p, "validation_fooling_rate": fr}
            for it, _, p, fr in result.history if fr is not None],
    }))
    _write_manifest(out, "craft", config, [paths["weights"]],
                    [pert_path, snaps_path, hist_path])
    print(f"crafted {pert_path.name}: validation fooling "
          f"{result.best.meta['validation_fooling_rate']:.4f} "
          f"({len(result.history)} iterations, "
          f"{len(result.rescale_events)} rescales)")
    return 0


def _load_perturbations(config: dict, adapter):
    named = {}
    for name, p in config["paths"].get("perturbations", {}).items():
        if p == "random_baseline":
            named[name] = random_baseline(adapter.input_shape, 10.0,
                                          config.get("seed", 0))
        else:
            named[name] = load_perturbation(p)
    if not named:
        raise RuntimeError("no perturbations given (paths.perturbations)")
    for name, pert in named.items():
        if tuple(pert.delta.shape) != tuple(adapter.input_shape):
            raise SchemaViolation(
                f"perturbation {name!r} shape {pert.delta.shape} does not "
                f"match victim input {adapter.input_shape}")
    return named


def cmd_eval(config: dict, args) -> int:
    out = _prepare_out(config, args)
    paths = config["paths"]
    adapter = load_weights(paths["weights"])
    test = resolve_dataset(paths["dataset_root"], "test")
    named = _load_perturbations(config, adapter)
    clean_pred = perturbed_predictions(adapter, test.images, None)
    results = {}
    for name, pert in named.items():
        adv_pred = perturbed_predictions(adapter, test.images, pert.delta)
        report = MetricReport(n_samples=len(test))
        report.clean["top1"] = float((clean_pred == test.labels).mean())
        report.adversarial["top1"] = float((adv_pred == test.labels).mean())
        report.gfr["top1"] = fooling_rate(adv_pred, clean_pred)
        if adapter.task == "segmentation":
            report.clean["miou"] = miou(clean_pred, test.labels,
                                        adapter.num_classes)
            report.adversarial["miou"] = miou(adv_pred, test.labels,
                                              adapter.num_classes)
            m = miou(adv_pred, clean_pred, adapter.num_classes)
            report.gfr["miou"] = 1.0 - m
        results[name] = {"clean": report.clean,
                         "adversarial": report.adversarial,
                         "gfr": report.gfr,
                         "fooling_rate": report.gfr["top1"],
                         "perturbation_meta": pert.meta}
    report_path = out / "reports" / "eval.json"
    report_path.write_text(dump_report({
        "model_id": adapter.model_id,
        "dataset": paths["dataset_root"],
        "n_samples": len(test),
        "results": results,
    }))
    inputs = [paths["weights"]] + [p for p in
                                   paths.get("perturbations", {}).values()
                                   if p != "random_baseline"]
    _write_manifest(out, "eval", config, inputs, [report_path])
    for name, r in results.items():
        print(f"{name}: fooling {r['fooling_rate']:.4f}")
    return 0


def cmd_defend(config: dict, args) -> int:
    out = _prepare_out(config, args)
    paths = config["paths"]
    adapter = load_weights(paths["weights"])
    test = resolve_dataset(paths["dataset_root"], "test")
    named = _load_perturbations(config, adapter)
    specs = [defenses.TransformSpec(d["kind"], d.get("params", {}))
             for d in config.get("defense", [])]
    if not specs:
        specs = [defenses.TransformSpec("identity"),
                 defenses.TransformSpec("median_smooth", {"k": 3}),
                 defenses.TransformSpec("jpeg", {"quality": 50}),
                 defenses.TransformSpec("bit_reduce", {"bits": 3})]
    rows = [defenses.evaluate_defended(adapter, t, named, test.images,
                                       test.labels) for t in specs]
    csv_path = out / "reports" / "defense_grid.csv"
    csv_path.write_text(defenses.grid_to_csv(rows))
    json_path = out / "reports" / "defense_grid.json"
    json_path.write_text(dump_report({"model_id": adapter.model_id,
                                      "rows": rows}))
    _write_manifest(out, "defend", config, [paths["weights"]],
                    [csv_path, json_path])
    for row in rows:
        fools = ", ".join(f"{k}={v:.3f}" for k, v in row["fooling"].items())
        print(f"{row['transform']}: clean {row.get('clean_top1', 0):.3f}, "
              f"{fools}")
    return 0


def cmd_analyze(config: dict, args) -> int:
    out = _prepare_out(config, args)
    paths = config["paths"]
    adapter = load_weights(paths["weights"])
    test = resolve_dataset(paths["dataset_root"], "test")
    named = _load_perturbations(config, adapter)
    artifacts = []
    first = next(iter(named.values()))
    profile = analysis.layer_shift_profile(adapter, first, test.images)
    ppath = out / "reports" / "shift_profile.csv"
    ppath.write_text(analysis.profile_to_csv(profile))
    plot_path = out / "plots" / "shift_profile.png"
    analysis.plot_profile(profile, plot_path)
    artifacts += [ppath, plot_path]
    table = analysis.shift_vs_fooling_table(adapter, named, test.images)
    tpath = out / "reports" / "shift_vs_fooling.csv"
    tpath.write_text(analysis.table_to_csv(table))
    artifacts.append(tpath)
    snaps = args.snapshots
    if snaps:
        data = np.load(snaps)
        pairs = list(zip(data["iterations"], data["deltas"]))
        trace = analysis.correlation_trace(pairs, adapter,
                                           test.images[:64])
        trace_path = out / "plots" / "correlation.png"
        analysis.plot_trace(trace, trace_path)
        cpath = out / "reports" / "correlation.json"
        cpath.write_text(dump_report({
            "pearson_r": trace.pearson_r,
            "degenerate": trace.degenerate,
            "uniform_fallback": trace.uniform_fallback,
            "n_points": len(trace.points)}))
        artifacts += [trace_path, cpath]
    _write_manifest(out, "analyze", config, [paths["weights"]], artifacts)
    print(analysis.table_to_csv(table).strip())
    return 0


def cmd_compare(config: dict, args) -> int:
    rows = []
    victims = set()
    datasets_seen = set()
    for run_dir in args.run_dirs:
        report_path = Path(run_dir) / "reports" / "eval.json"
        if not report_path.exists():
            raise RuntimeError(f"run {run_dir}: missing {report_path}")
        report = json.loads(report_path.read_text())
        victims.add(report["model_id"])
        datasets_seen.add(report["dataset"])
        for name, r in report["results"].items():
            rows.append({"run": str(run_dir), "perturbation": name, **{
                f"clean_{k}": v for k, v in r["clean"].items()}, **{
                f"adv_{k}": v for k, v in r["adversarial"].items()},
                "fooling_rate": r["fooling_rate"]})
    if len(victims) > 1:
        raise RuntimeError(f"runs use different victims: {sorted(victims)}")
    if len(datasets_seen) > 1:
        raise RuntimeError(
            f"runs use different test sets: {sorted(datasets_seen)}")
    rows.sort(key=lambda r: r["fooling_rate"])
    cols = ["run", "perturbation", "clean_top1", "adv_top1", "fooling_rate"]
    print(",".join(cols))
    for r in rows:
        print(",".join(f"{r.get(c, ''):.6g}"
                       if isinstance(r.get(c), float) else str(r.get(c, ""))
                       for c in cols))
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(dump_report({"rows": rows}))
    return 0


def cmd_make_data(config: dict, args) -> int:
    root = Path(args.out)
    for split, n in (("train", args.n_train), ("test", args.n_test)):
        seed = args.seed if split == "train" else args.seed + 1
        datasets.materialize(datasets.make_synthetic(args.kind, n, seed),
                             root, split)
    print(f"wrote {args.kind} corpus under {root}")
    return 0


# -- entry point ----------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--overwrite", action="store_true",
                   help="allow reusing an existing run directory")
    p.add_argument("--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gduap",
        description="Craft and evaluate data-free universal adversarial "
                    "perturbations on desk-scale victims.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train-victim", "craft", "eval", "defend"):
        _add_common(sub.add_parser(name))
    pa = sub.add_parser("analyze")
    _add_common(pa)
    pa.add_argument("--snapshots",
                    help="craft_snapshots.npz from a craft run, enables the "
                         "correlation trace")
    pc = sub.add_parser("compare")
    pc.add_argument("run_dirs", nargs="+")
    pc.add_argument("--out", help="optional JSON table destination")
    pm = sub.add_parser("make-data")
    pm.add_argument("--kind", required=True,
                    choices=sorted(datasets._GENERATORS))
    pm.add_argument("--out", required=True)
    pm.add_argument("--n-train", type=int, default=1000)
    pm.add_argument("--n-test", type=int, default=200)
    pm.add_argument("--seed", type=int, default=0)
    return parser


_HANDLERS = {
    "train-victim": cmd_train_victim,
    "craft": cmd_craft,
    "eval": cmd_eval,
    "defend": cmd_defend,
    "analyze": cmd_analyze,
    "compare": cmd_compare,
    "make-data": cmd_make_data,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command in ("compare", "make-data"):
            config = {}
        else:
            overrides = {}
            if args.seed is not None:
                overrides["seed"] = args.seed
            config = _load_config(args.config, overrides)
        return _HANDLERS[args.command](config, args)
    except SchemaViolation as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure -> structured error log
        log = {"error": type(exc).__name__, "message": str(exc),
               "trace": traceback.format_exc().splitlines()[-4:]}
        print(json.dumps(log), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
