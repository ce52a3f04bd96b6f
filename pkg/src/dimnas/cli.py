"""Command-line surface: gen-data, search, train, eval, report.

Every command writes a run manifest (atomically, at start and finish) next
to its main output, captures its full configuration, and is reproducible
from the recorded seeds. Exit codes: 0 success, 1 usage error, 2 data
error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, datagen, metrics, search, supernet
from .dten import DtenError, write_json_atomic
from .search import DivergenceError, SearchSchedule
from .search_space import FixedBlock, GenomeFormatError, decode, encode, preset
from .supernet import SupernetSpec

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3

DESK_SEARCH_EPOCHS = 20
DESK_TRAIN_EPOCHS = {1: 75, 2: 30}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


class RunManifest:
    """Written before the command body runs and rewritten when it ends, so a
    run directory always tells what produced it."""

    def __init__(self, path: Path, command: str, config: dict, seeds: dict):
        self.path = path
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.payload = {
            "command": command,
            "config": config,
            "seeds": seeds,
            "tool_version": __version__,
            "started_utc": _utc_now(),
            "finished_utc": None,
            "outputs": [],
        }
        write_json_atomic(self.path, self.payload)

    def finish(self, outputs: list[str]) -> None:
        self.payload["finished_utc"] = _utc_now()
        self.payload["outputs"] = [str(o) for o in outputs]
        write_json_atomic(self.path, self.payload)


def _manifest_path(target: Path) -> Path:
    if target.suffix:
        return target.with_name(target.name + ".manifest.json")
    return target / "run_manifest.json"


def _parse_splits(text: str) -> datagen.SplitSpec:
    try:
        parts = [int(p) for p in text.split(",")]
    except ValueError:
        raise UsageError(f"--splits must be four comma-separated integers, got {text!r}")
    if len(parts) != 4:
        raise UsageError(f"--splits must be train,reward,val,test (4 values), got {len(parts)}")
    return datagen.SplitSpec(*parts)


def _load_data(path: str):
    try:
        return datagen.load_dataset(path)
    except (FileNotFoundError, DtenError) as e:
        raise DataError(str(e)) from e


def _dataset_fingerprint(meta: dict) -> dict:
    return {k: meta.get(k) for k in ("seed", "rank", "depth", "width", "noise_sigma")}


# -- commands -----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DataError(f"{out} exists and is not empty (use --force to overwrite)")
    splits = _parse_splits(args.splits)
    config = {
        "seed": args.seed, "rank": args.rank, "depth": args.depth,
        "width": args.width, "splits": splits.as_dict(),
        "noise_sigma": args.noise_sigma, "drusen_prob": args.drusen_prob,
        "derive_from": args.derive_from, "columns_per_scan": args.columns_per_scan,
        "generator": datagen.GENERATOR_NAME,
    }
    manifest = RunManifest(_manifest_path(out), "gen-data", config, {"seed": args.seed})
    if args.derive_from:
        if args.rank != 1:
            raise UsageError("--derive-from produces rank-1 data; pass --rank 1")
        src_splits, src_meta = _load_data(args.derive_from)
        data = datagen.ascans_from_bscans(src_splits, args.columns_per_scan)
        meta = {**config, "seed": src_meta.get("seed"),
                "noise_sigma": src_meta.get("noise_sigma"),
                "depth": src_meta.get("depth")}
    else:
        data = datagen.generate(
            seed=args.seed, rank=args.rank, depth=args.depth, width=args.width,
            splits=splits, noise_sigma=args.noise_sigma, drusen_prob=args.drusen_prob,
        )
        meta = config
    datagen.save_dataset(out, data, meta)
    manifest.finish([str(out)])
    print(f"wrote {sum(len(v) for v in data.values())} volumes to {out}")
    return EXIT_OK


def _schedule_from_args(args) -> SearchSchedule:
    if args.preset == "desk":
        sched = SearchSchedule.desk(rank=args.rank, seed=args.seed,
                                    epochs=args.epochs or DESK_SEARCH_EPOCHS)
    else:
        sched = SearchSchedule(epochs=args.epochs or DESK_SEARCH_EPOCHS, seed=args.seed)
    return sched


def cmd_search(args) -> int:
    data, meta = _load_data(args.data)
    if meta.get("rank") not in (None, args.rank):
        raise DataError(f"dataset rank {meta.get('rank')} != --rank {args.rank}")
    for split in ("train", "reward", "val"):
        if not data.get(split):
            raise DataError(f"dataset {args.data} is missing the {split!r} split")
    spec = SupernetSpec(rank=args.rank, n_stages=args.stages,
                        base_channels=args.base_channels)
    sched = _schedule_from_args(args)
    config = {"data": str(args.data), "spec": spec.to_dict(), "schedule": sched.to_dict(),
              "policy": args.policy, "dataset": _dataset_fingerprint(meta)}
    manifest = RunManifest(_manifest_path(Path(args.report)), "search", config,
                           {"seed": args.seed})
    runner = search.search if args.policy == "controller" else search.random_search_baseline
    result = runner(data, spec, sched)
    Path(args.out).write_text(encode(result.best_genome))
    report = result.to_dict()
    report["dataset"] = _dataset_fingerprint(meta)
    write_json_atomic(Path(args.report), report)
    manifest.finish([args.out, args.report])
    print(f"search done in {result.wall_clock_seconds:.1f}s; "
          f"best validation dice {max(d for _, d in result.candidates):.4f}; "
          f"genome -> {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    data, meta = _load_data(args.data)
    if meta.get("rank") not in (None, args.rank) and args.genome is None:
        raise DataError(f"dataset rank {meta.get('rank')} != --rank {args.rank}")
    if (args.genome is None) == (args.preset_block is None):
        raise UsageError("pass exactly one of --genome FILE or --preset-block NAME")
    if args.genome is not None:
        try:
            arch = decode(Path(args.genome).read_text())
        except FileNotFoundError as e:
            raise DataError(str(e)) from e
        except GenomeFormatError as e:
            raise DataError(f"{args.genome}: {e}") from e
        model_name = Path(args.genome).name
    else:
        arch = preset(args.preset_block)
        if not isinstance(arch, FixedBlock):
            model_name = args.preset_block
        else:
            model_name = arch.name
    epochs = args.epochs or DESK_TRAIN_EPOCHS[args.rank]
    spec = SupernetSpec(rank=args.rank, n_stages=args.stages,
                        base_channels=args.base_channels)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DataError(f"{out} exists and is not empty (use --force to overwrite)")
    config = {"data": str(args.data), "spec": spec.to_dict(), "epochs": epochs,
              "model": model_name, "dataset": _dataset_fingerprint(meta)}
    manifest = RunManifest(_manifest_path(out), "train", config, {"seed": args.seed})
    weights, report = search.retrain(data, spec, arch, epochs=epochs, seed=args.seed)
    extra = {
        "model": model_name,
        "dataset": _dataset_fingerprint(meta),
        "train_seed": args.seed,
        "train_report": report.to_dict(),
    }
    if isinstance(arch, FixedBlock):
        supernet.save_weights(out, weights, spec, "baseline", extra)
    else:
        extra["genome"] = json.loads(encode(arch))
        supernet.save_weights(out, weights, spec, "search", extra)
    manifest.finish([str(out)])
    print(f"trained {model_name}: test dice {report.mean:.4f} "
          f"+/- {report.std_over_volumes:.4f}; checkpoint -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    data, meta = _load_data(args.data)
    try:
        weights, spec, mode, extra = supernet.load_weights(args.ckpt)
    except (FileNotFoundError, DtenError) as e:
        raise DataError(str(e)) from e
    if meta.get("rank") not in (None, spec.rank):
        raise DataError(
            f"checkpoint is rank {spec.rank} but dataset {args.data} is rank {meta.get('rank')}"
        )
    vols = data.get(args.split)
    if not vols:
        raise DataError(f"dataset {args.data} has no {args.split!r} split")
    genome = None
    if mode == "search":
        genome = decode(json.dumps(extra["genome"]))
    manifest = RunManifest(_manifest_path(Path(args.out)), "eval",
                           {"data": str(args.data), "ckpt": str(args.ckpt),
                            "split": args.split}, {})
    report = metrics.evaluate(weights, spec, genome, vols)
    payload = {
        "model": extra.get("model", mode),
        "rank": spec.rank,
        "split": args.split,
        "dataset": _dataset_fingerprint(meta),
        **report.to_dict(),
    }
    write_json_atomic(Path(args.out), payload)
    manifest.finish([args.out])
    print(f"{payload['model']} on {args.split}: dice {report.mean:.4f} "
          f"+/- {report.std_over_volumes:.4f} -> {args.out}")
    return EXIT_OK


def _classify_input(path: Path) -> tuple[str, dict]:
    try:
        payload = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: {e}") from e
    if "candidates" in payload:
        return "search", payload
    if "per_class" in payload:
        return "eval", payload
    raise DataError(f"{path}: neither a search result nor an eval report")


def cmd_report(args) -> int:
    if not args.inputs:
        raise UsageError("at least one --inputs file is required")
    rows = []
    curves = []
    fingerprints = []
    for raw in args.inputs:
        kind, payload = _classify_input(Path(raw))
        fp = payload.get("dataset")
        if fp:
            fingerprints.append((raw, json.dumps({k: fp[k] for k in sorted(fp) if k != "rank"},
                                                 sort_keys=True)))
        if kind == "search":
            rank = payload["config"]["spec"]["rank"]
            best = max(c["val_dice"] for c in payload["candidates"])
            rows.append({
                "model": f"search-{payload['config']['policy']}-{rank}d",
                "kind": "search",
                "mean_dice": f"{best:.4f}",
                "std": "",
                "search_seconds": f"{payload['wall_clock_seconds']:.1f}",
            })
            for epoch, r in enumerate(payload["reward_curve"]):
                curves.append({"run": Path(raw).name, "epoch": epoch, "mean_reward": r})
        else:
            rows.append({
                "model": payload["model"],
                "kind": "eval",
                "mean_dice": f"{payload['mean']:.4f}",
                "std": f"{payload['std_over_volumes']:.4f}",
                "search_seconds": "",
            })
    distinct = {fp for _, fp in fingerprints}
    if len(distinct) > 1 and not args.allow_mixed:
        raise DataError(
            "inputs come from different datasets "
            f"({len(distinct)} distinct fingerprints); pass --allow-mixed to combine them"
        )
    times = [float(r["search_seconds"]) for r in rows if r["search_seconds"]]
    ratio = f"{min(times) / max(times):.4f}" if len(times) >= 2 and max(times) > 0 else ""
    for r in rows:
        r["search_time_ratio"] = ratio if r["kind"] == "search" else ""
    manifest = RunManifest(_manifest_path(Path(args.out_table)), "report",
                           {"inputs": list(args.inputs)}, {})
    with open(args.out_table, "w", newline="") as f:
        writer = csv.DictWriter(
            f, fieldnames=["model", "kind", "mean_dice", "std", "search_seconds",
                           "search_time_ratio"])
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r[k] for k in writer.fieldnames})
    with open(args.out_curves, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["run", "epoch", "mean_reward"])
        writer.writeheader()
        writer.writerows(curves)
    manifest.finish([args.out_table, args.out_curves])
    print(f"wrote {len(rows)} rows -> {args.out_table}; "
          f"{len(curves)} curve points -> {args.out_curves}")
    return EXIT_OK


# -- wiring ----------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="dimnas", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic layered dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rank", type=int, choices=(1, 2), default=1)
    p.add_argument("--depth", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--splits", default="60,24,2,24", help="train,reward,val,test counts")
    p.add_argument("--noise-sigma", type=float, default=0.1)
    p.add_argument("--drusen-prob", type=float, default=0.3)
    p.add_argument("--derive-from", default=None,
                   help="slice rank-1 profiles out of an existing rank-2 dataset")
    p.add_argument("--columns-per-scan", type=int, default=16)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("search", help="run the architecture search")
    p.add_argument("--data", required=True)
    p.add_argument("--rank", type=int, choices=(1, 2), required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--preset", choices=("desk",), default="desk")
    p.add_argument("--policy", choices=("controller", "random"), default="controller")
    p.add_argument("--stages", type=int, default=3)
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--out", required=True, help="best genome JSON path")
    p.add_argument("--report", required=True, help="search result JSON path")
    p.set_defaults(fn=cmd_search)

    p = sub.add_parser("train", help="train a model from scratch")
    p.add_argument("--data", required=True)
    p.add_argument("--genome", default=None, help="genome JSON file")
    p.add_argument("--preset-block", default=None,
                   choices=("baseline_resnet", "enas_block_a", "enas_block_b"))
    p.add_argument("--rank", type=int, choices=(1, 2), required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stages", type=int, default=3)
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="test", choices=datagen.SPLIT_NAMES)
    p.add_argument("--out", required=True, help="dice report JSON path")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("report", help="aggregate runs into plot-ready CSV tables")
    p.add_argument("--inputs", nargs="+", required=True,
                   help="search result and eval report JSON files")
    p.add_argument("--out-table", required=True)
    p.add_argument("--out-curves", required=True)
    p.add_argument("--allow-mixed", action="store_true",
                   help="combine inputs from different datasets")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, GenomeFormatError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"diverged: {e}\ndiagnostics: {json.dumps(e.diagnostics)}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
