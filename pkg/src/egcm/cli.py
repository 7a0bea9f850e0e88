"""Command-line front end: synth, build-graph, train, evaluate, sweep, rerun.

Exit codes: 0 success, 2 input/config error, 3 artifact/file-format error,
4 numerical abort.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ARTIFACT_VERSION, ConfigError, RunConfig, file_sha256, load_config, render_ini
from .flows import (
    CapacityError,
    FlowSchema,
    RowError,
    SchemaError,
    apply_normalizer,
    class_counts,
    fit_normalizer,
    generate_synthetic,
    read_flows,
    remap_ips,
    stratified_split,
    write_flow_csv,
)
from .graph import build_graph, save_graph
from .training import (
    SPLIT_FRACTIONS,
    Checkpoint,
    CheckpointError,
    NumericalError,
    evaluate,
    fraction_sweep,
    mixup_count_sweep,
    sweep_digest,
    train,
    write_history,
    write_sweep_csv,
)

log = logging.getLogger("egcm")

EXIT_OK, EXIT_INPUT, EXIT_ARTIFACT, EXIT_NUMERIC = 0, 2, 3, 4


class InputError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_records(cfg: RunConfig, schema: FlowSchema | None = None, path: str | None = None):
    path = path or cfg.input
    if not path:
        raise InputError("no input CSV given (use --input or [paths] input)")
    if not Path(path).is_file():
        raise InputError(f"input file not found: {path}")
    with open(path, "rb") as fh:
        records, resolved = read_flows(fh, schema or cfg.schema)
    if not records:
        raise InputError(f"{path}: no data rows")
    return records, resolved


def _write_manifest(out: Path, command: str, cfg: RunConfig, started: str, outputs: list[Path], args: dict | None = None, **extra) -> Path:
    manifest = {
        "artifact_version": ARTIFACT_VERSION,
        "command": command,
        "args": args or {},
        "method": cfg.train.method,
        "config": cfg.to_dict(),
        "input_sha256": file_sha256(cfg.input) if cfg.input and Path(cfg.input).is_file() else None,
        "started": started,
        "finished": _now(),
        "outputs": {p.name: file_sha256(p) for p in outputs},
    }
    manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("EGCM_THREADS", "1")))
    except ValueError:
        return 1


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, args) -> int:
    started = _now()
    n_endpoints = args.n_endpoints or max(2, args.n_flows)
    try:
        records = generate_synthetic(n_endpoints, args.n_flows, args.attack_ratio, args.separation, args.feature_dim, cfg.seed)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    out = _out_dir(cfg)
    path = out / args.file
    with open(path, "w", newline="") as fh:
        write_flow_csv(records, fh, [f"f{i}" for i in range(args.feature_dim)])
    counts = class_counts(records)
    print(f"wrote {len(records)} flows ({counts[1]} attack, {counts[0]} benign) to {path}")
    synth_args = {k: getattr(args, k) for k in ("n_flows", "n_endpoints", "attack_ratio", "separation", "feature_dim", "file")}
    _write_manifest(out, "synth", cfg, started, [path], synth_args)
    return EXIT_OK


def _prepare(cfg: RunConfig):
    records, schema = _load_records(cfg)
    records = remap_ips(records, cfg.remap_range, cfg.seed)
    return records, schema


def cmd_build_graph(cfg: RunConfig, args) -> int:
    started = _now()
    records, schema = _prepare(cfg)
    train_r, val_r, test_r = stratified_split(records, SPLIT_FRACTIONS, cfg.seed)
    norm = fit_normalizer(train_r, cfg.train.normalization)
    ordered = train_r + val_r + test_r
    graph = build_graph(apply_normalizer(ordered, norm))
    split = np.repeat(np.array([0, 1, 2], dtype=np.int8), [len(train_r), len(val_r), len(test_r)])
    out = _out_dir(cfg)
    gpath, npath = out / "graph.npz", out / "norm_stats.json"
    save_graph(graph, gpath, split=split)
    npath.write_text(norm.to_json() + "\n")
    counts = class_counts(records)
    print(f"nodes: {graph.num_nodes}")
    print(f"edges: {graph.num_edges}")
    print(f"features: {graph.feature_dim}")
    print(f"classes: benign={counts[0]} attack={counts[1]} ({counts[1] / len(records):.2%} attack)")
    for name, part in (("train", train_r), ("val", val_r), ("test", test_r)):
        c = class_counts(part)
        print(f"  {name}: {len(part)} flows (benign={c[0]} attack={c[1]})")
    _write_manifest(out, "build-graph", replace(cfg, schema=schema), started, [gpath, npath])
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    started = _now()
    records, schema = _prepare(cfg)
    train_r, val_r, test_r = stratified_split(records, SPLIT_FRACTIONS, cfg.seed)
    meta = {"schema": schema.to_dict(), "remap_range": list(cfg.remap_range)}
    ckpt, history = train(train_r, val_r, cfg.train, seed=cfg.seed, remap_seed=cfg.seed, metadata=meta)
    out = _out_dir(cfg)
    cpath, hpath, mpath = out / "checkpoint.egcm", out / "history.csv", out / "metrics.json"
    ckpt.save(cpath)
    with open(hpath, "w", newline="") as fh:
        write_history(history, fh)
    report = evaluate(ckpt, test_r, context=train_r) if test_r else None
    mpath.write_text((report.to_json() if report else "{}") + "\n")
    print(f"method: {cfg.train.method}")
    print(f"epochs: {len(history)}  final L={history[-1].loss:.6f}  best val macro-F1={ckpt.metadata['best_val_macro_f1']:.4f}")
    if report:
        print(f"test macro-F1: {report.macro_f1:.4f}")
    # metrics.json carries wall-clock time, so it is listed but not hashed
    _write_manifest(out, "train", replace(cfg, schema=schema), started, [cpath, hpath], reports=[mpath.name])
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, args) -> int:
    started = _now()
    ckpt = Checkpoint.load(args.checkpoint)
    schema = FlowSchema.from_dict(ckpt.metadata["schema"]) if "schema" in ckpt.metadata else cfg.schema
    data = args.data or cfg.input
    records, _ = _load_records(cfg, schema, data)
    remap_range = tuple(ckpt.metadata.get("remap_range", cfg.remap_range))
    records = remap_ips(records, remap_range, ckpt.remap_seed if ckpt.remap_seed is not None else cfg.seed)
    if len(records[0].features) != ckpt.feature_dim:
        raise InputError(f"data has {len(records[0].features)} features, checkpoint expects {ckpt.feature_dim}")
    report = evaluate(ckpt, records)
    out = _out_dir(cfg)
    jpath, cpath = out / "metrics.json", out / "metrics.csv"
    jpath.write_text(report.to_json() + "\n")
    with open(cpath, "w") as fh:
        fh.write("class,precision,recall,f1\n")
        for c, name in enumerate(("benign", "attack")):
            fh.write(f"{name},{report.precision[c]!r},{report.recall[c]!r},{report.f1[c]!r}\n")
        fh.write(f"macro,,,{report.macro_f1!r}\n")
    print(f"macro-F1: {report.macro_f1:.4f}")
    for c, name in enumerate(("benign", "attack")):
        print(f"  {name:>6}: precision={report.precision[c]:.4f} recall={report.recall[c]:.4f} f1={report.f1[c]:.4f}")
    cfg = replace(cfg, input=data)
    _write_manifest(out, "evaluate", cfg, started, [cpath], {"checkpoint": str(args.checkpoint), "data": data}, reports=[jpath.name])
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, args) -> int:
    started = _now()
    records, schema = _prepare(cfg)
    workers = _workers()
    if args.kind == "fraction":
        rows = fraction_sweep(records, cfg.train, cfg.fractions, workers)
    else:
        rows = mixup_count_sweep(records, cfg.train, cfg.sigmas, workers)
    out = _out_dir(cfg)
    path = out / f"sweep_{args.kind}.csv"
    with open(path, "w", newline="") as fh:
        write_sweep_csv(rows, fh)
    for r in rows:
        print(f"{r.value:>8g}  macro-F1 {r.macro_f1_mean:.4f} ± {r.macro_f1_std:.4f}  ({r.wall_seconds:.1f}s)")
    _write_manifest(
        out, "sweep", replace(cfg, schema=schema), started, [path], {"kind": args.kind}, result_digest=sweep_digest(rows)
    )
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "build-graph": cmd_build_graph,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
}


def cmd_rerun(args) -> int:
    """Re-execute a command from its manifest and report whether outputs match."""
    try:
        manifest = json.loads(Path(args.manifest).read_text())
        cfg = RunConfig.from_dict(manifest["config"])
        command = manifest["command"]
    except (OSError, KeyError, ValueError) as exc:
        raise InputError(f"cannot read manifest {args.manifest}: {exc}") from exc
    if args.out:
        cfg = replace(cfg, out=args.out)
    if cfg.input and manifest.get("input_sha256") and Path(cfg.input).is_file():
        if file_sha256(cfg.input) != manifest["input_sha256"]:
            raise InputError(f"input {cfg.input} changed since the manifest was written")
    ns = argparse.Namespace(**manifest.get("args", {}))
    if command == "evaluate":
        ns.data = manifest["args"].get("data")
    code = COMMANDS[command](cfg, ns)
    new = json.loads((Path(cfg.out) / "manifest.json").read_text())
    same = new["outputs"] == manifest["outputs"] if command != "sweep" else new.get("result_digest") == manifest.get("result_digest")
    print("reproduced: " + ("yes" if same else "NO"))
    return code if same else EXIT_ARTIFACT


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration")
    g.add_argument("--config", help="INI config file or run manifest")
    g.add_argument("--input", help="flow CSV")
    g.add_argument("--out", help="output directory")
    g.add_argument("--seed", type=int)
    g.add_argument("--no-mixup", action="store_true", help="disable MP-Mixup augmentation")
    g.add_argument("--no-contrastive", action="store_true", help="disable the InfoNCE term")
    g.add_argument("--theta", type=float, help="weight of the contrastive loss")
    g.add_argument("--sigma", type=int, help="Mixup pairs per pattern")
    g.add_argument("--gamma", type=int, help="negatives per contrastive anchor")
    g.add_argument("--alpha", type=float, help="Beta parameter for harmful/unharmful mixing")
    g.add_argument("--beta", type=float, help="Beta parameter for harmful/harmful mixing")
    g.add_argument("--fraction", type=float, help="fraction of the train split to use")
    g.add_argument("--epochs", type=int)
    g.add_argument("--seeds", help="comma-separated seeds for multi-seed runs")
    g.add_argument("--show-config", action="store_true", help="print the resolved configuration and exit")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="egcm", description="Graph-based NetFlow intrusion detection")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic flow CSV")
    _common(p)
    p.add_argument("--n-flows", type=int, default=1000)
    p.add_argument("--n-endpoints", type=int, default=None, help="server/client pool size (default: n-flows)")
    p.add_argument("--attack-ratio", type=float, default=0.05)
    p.add_argument("--separation", type=float, default=6.0)
    p.add_argument("--feature-dim", type=int, default=8)
    p.add_argument("--file", default="flows.csv", help="file name inside the output directory")

    p = sub.add_parser("build-graph", help="parse, remap, normalize and build the traffic graph")
    _common(p)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _common(p)

    p = sub.add_parser("evaluate", help="score a flow CSV with a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="flow CSV to score (default: --input)")

    p = sub.add_parser("sweep", help="training-fraction or Mixup-count sweep")
    _common(p)
    p.add_argument("--kind", choices=("fraction", "sigma"), required=True)

    p = sub.add_parser("rerun", help="re-execute a run from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", help="write to this directory instead of the recorded one")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    t = cfg.train
    if args.no_mixup:
        t = replace(t, enable_mixup=False)
    if args.no_contrastive:
        t = replace(t, enable_contrastive=False)
    mix = {k: getattr(args, k) for k in ("alpha", "beta", "sigma") if getattr(args, k) is not None}
    if mix:
        t = replace(t, mixup=replace(t.mixup, **mix))
    con = {k: getattr(args, k) for k in ("gamma", "theta") if getattr(args, k) is not None}
    if con:
        t = replace(t, contrastive=replace(t.contrastive, **con))
    if args.fraction is not None:
        t = replace(t, train_fraction=args.fraction)
    if args.epochs is not None:
        t = replace(t, epochs=args.epochs)
    if args.seeds:
        t = replace(t, seeds=tuple(int(s) for s in args.seeds.split(",") if s.strip()))
    cfg = replace(cfg, train=t)
    if args.input:
        cfg = replace(cfg, input=args.input)
    if args.out:
        cfg = replace(cfg, out=args.out)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "rerun":
            return cmd_rerun(args)
        cfg = resolve_config(args)
        if args.show_config:
            print(render_ini(cfg), end="")
            return EXIT_OK
        return COMMANDS[args.command](cfg, args)
    except (InputError, ConfigError, SchemaError, RowError, CapacityError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
