"""Command-line entry point: ``eyenet <command> [options]``.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .blocks import EyeNet
from .config import RunConfig, load_config
from .errors import ConfigError, EyeNetError
from .geometry import init_potentials, sample_human_vision_batch, select_inference_center, update_potentials
from .pcio import DEFAULT_CLASSES, load_cloud, load_predictions, save_ply, save_predictions
from .selfcheck import network_gradient_check
from .synth import generate_benchmark_suite
from .training import Scene, TrainState, derived_rng, load_checkpoint, save_checkpoint, train

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageError(message)


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(what, f"path {path!r} does not exist")
    return p


def _split_files(data: Path, split: str) -> list[Path]:
    folder = data / split
    files = sorted(folder.glob("*.ply")) if folder.is_dir() else []
    if not files:
        raise ConfigError("--data", f"no {split}/*.ply files under {data}")
    return files


def _write_lines(path, records) -> None:
    Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


# --------------------------------------------------------------------------
# commands


def cmd_synth_gen(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    suite = generate_benchmark_suite(cfg.synth_seed, cfg.n_train, cfg.n_test, cfg.scene)
    for split, clouds, specs in (("train", suite.train, suite.train_specs), ("test", suite.test, suite.test_specs)):
        (out / split).mkdir(parents=True, exist_ok=True)
        for i, cloud in enumerate(clouds):
            save_ply(cloud, out / split / f"scene_{i:02d}.ply")
        _write_lines(out / f"{split}_specs.jsonl", [s.to_dict() for s in specs])
    report = suite.frequency_report()
    (out / "class_frequencies.txt").write_text(report + "\n")
    print(report)
    return EXIT_OK


def cmd_sample(args, cfg: RunConfig) -> int:
    cloud = load_cloud(_existing(args.input, "--in"))
    scene = Scene.from_cloud(cloud, cfg.train.voxel_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_ply(scene.sampled, out / "sampled.ply")
    pots = init_potentials(len(scene.sampled), derived_rng(cfg.seed, 0))
    records = []
    for i in range(args.count):
        center = select_inference_center(pots)
        batch = sample_human_vision_batch(scene.sampled, scene.index, center, cfg.N, derived_rng(cfg.seed, i, 1))
        update_potentials(pots, scene.sampled.positions, center, batch.output_ids(), batch.radius)
        batch.save(out / f"batch_{i:04d}.hvb")
        unique = len(np.unique(np.concatenate([batch.central, batch.peripheral])))
        records.append({"batch": i, "center": batch.center_index, "radius": batch.radius,
                        "unique_points": unique, "duplicated": batch.duplicated})
        print(f"batch {i:4d}  center {center:8d}  R {batch.radius:8.3f}  unique {unique:6d}"
              f"{'  duplicated' if batch.duplicated else ''}")
    _write_lines(out / "batches.jsonl", records)
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    data = _existing(args.data, "--data")
    scenes = [Scene.from_cloud(load_cloud(f), cfg.train.voxel_size) for f in _split_files(data, "train")]
    tcfg = replace(cfg.train, workers=args.workers)
    if args.resume:
        model, state, saved = load_checkpoint(_existing(args.resume, "--resume"))
        if model.config != cfg.model:
            raise ConfigError("--resume", "checkpoint architecture differs from the config")
        tcfg = replace(saved, workers=args.workers, epochs=tcfg.epochs)
    else:
        model, state = EyeNet.create(cfg.model, tcfg.seed), None
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path, timing_path = Path(f"{out}.log"), Path(f"{out}.timing")
    if not args.resume:
        log_path.write_text("")
        timing_path.write_text("")
    start = time.perf_counter()

    def on_epoch(report, st: TrainState):
        with log_path.open("a") as fh:
            fh.write(report.to_line() + "\n")
        elapsed = time.perf_counter() - start
        with timing_path.open("a") as fh:
            fh.write(json.dumps({"epoch": report.epoch, "seconds": round(elapsed, 3)}) + "\n")
        save_checkpoint(out, model, st, tcfg)
        print(f"epoch {report.epoch:3d}  lr {report.lr:.6f}  loss {report.mean_loss:.5f}  {elapsed:8.1f}s", flush=True)

    state, _ = train(model, scenes, tcfg, state, on_epoch=on_epoch)
    save_checkpoint(out, model, state, tcfg)
    return EXIT_OK


def _eval_predictions(pred_dir: Path) -> tuple[ev.ConfusionMatrix, list[dict]]:
    files = sorted(pred_dir.glob("*.ply"))
    if not files:
        raise ConfigError("--pred", f"no *.ply files under {pred_dir}")
    cm = ev.ConfusionMatrix.empty(DEFAULT_CLASSES.count)
    records = []
    for f in files:
        cloud, pred = load_predictions(f, DEFAULT_CLASSES.count)
        if cloud.labels is None:
            raise ConfigError("--pred", f"{f.name} has no ground-truth labels")
        one = ev.ConfusionMatrix.from_labels(cloud.labels, pred, DEFAULT_CLASSES.count)
        cm = cm + one
        records.append(ev.compute_metrics(one).to_record(scene=f.name))
    return cm, records


def cmd_eval(args, cfg: RunConfig | None) -> int:
    if bool(args.ckpt) == bool(args.pred):
        raise ConfigError("eval", "pass exactly one of --ckpt or --pred")
    if args.pred:
        cm, records = _eval_predictions(_existing(args.pred, "--pred"))
    else:
        data = _existing(args.data, "--data") if args.data else None
        if data is None:
            raise ConfigError("--data", "required with --ckpt")
        model, _, tcfg = load_checkpoint(_existing(args.ckpt, "--ckpt"))
        files = _split_files(data, "test")
        scenes = [Scene.from_cloud(load_cloud(f, model.config.num_classes), tcfg.voxel_size) for f in files]
        seed = cfg.seed if cfg else tcfg.seed
        cm = ev.ConfusionMatrix.empty(model.config.num_classes)
        records = []
        for j, (f, scene) in enumerate(zip(files, scenes)):
            res = ev.infer_scene(model, scene, tcfg.N, seed=int(derived_rng(seed, j).integers(2**31)),
                                 workers=args.workers)
            one = ev.ConfusionMatrix.from_labels(scene.full.labels, res.labels, model.config.num_classes)
            cm = cm + one
            records.append(ev.compute_metrics(one).to_record(scene=f.name, batches=res.batches))
    total = ev.compute_metrics(cm)
    records.append(total.to_record(scene="all"))
    print(ev.metrics_table([(r["scene"], _from_record(r)) for r in records], DEFAULT_CLASSES.names))
    print(f"OA {total.oa:.4f}  mIoU {total.miou:.4f}")
    if args.out:
        _write_lines(args.out, records)
    return EXIT_OK


def _from_record(r: dict) -> ev.Metrics:
    return ev.Metrics(r["oa"], np.array([np.nan if v is None else v for v in r["iou"]]), r["miou"])


def cmd_infer(args, cfg: RunConfig | None) -> int:
    model, _, tcfg = load_checkpoint(_existing(args.ckpt, "--ckpt"))
    cloud = load_cloud(_existing(args.input, "--in"), model.config.num_classes)
    scene = Scene.from_cloud(cloud, tcfg.voxel_size)
    seed = cfg.seed if cfg else tcfg.seed
    res = ev.infer_scene(model, scene, tcfg.N, seed=seed, workers=args.workers)
    save_predictions(cloud, res.labels, args.out)
    counts = np.bincount(res.labels, minlength=model.config.num_classes)
    print(f"labeled {len(cloud)} points with {res.batches} batches")
    for name, c in zip(DEFAULT_CLASSES.names, counts):
        print(f"  {name:<12}{c:>10d}")
    return EXIT_OK


def cmd_bench_coverage(args, cfg: RunConfig) -> int:
    records = []
    for n in cfg.coverage_N:
        rep = ev.coverage_benchmark(cfg.coverage_density, n, seed=cfg.seed)
        print(rep.to_table())
        print()
        records.append(rep.to_record())
    if args.out:
        _write_lines(args.out, records)
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    g = cfg.gradcheck
    start = time.perf_counter()
    report = network_gradient_check(g)
    worst = max(report, key=report.get)
    err = report[worst]
    print(f"parameters checked: {len(report)} tensors")
    print(f"max relative error: {err:.3e} ({worst})")
    print(f"tolerance {g.tolerance:.1e}: {'pass' if err < g.tolerance else 'FAIL'}  "
          f"({time.perf_counter() - start:.1f}s)")
    if args.out:
        _write_lines(args.out, [{"parameter": k, "max_rel_error": v} for k, v in report.items()])
    return EXIT_OK if err < g.tolerance else EXIT_RUNTIME


def cmd_ablate(args, cfg: RunConfig) -> int:
    data = _existing(args.data, "--data")
    train_clouds = [load_cloud(f) for f in _split_files(data, "train")]
    test_clouds = [load_cloud(f) for f in _split_files(data, "test")]
    tcfg = replace(cfg.train, workers=args.workers)

    def log(rec):
        print(f"{rec['variant']:<16} seed {rec['seed']:3d}  OA {rec['oa']:.4f}  mIoU {rec['miou']:.4f}", flush=True)

    result = ev.ablation_run(train_clouds, test_clouds, cfg.eval_variants, cfg.eval_seeds, cfg.model, tcfg, log)
    print(result.to_table())
    if args.out:
        Path(args.out).write_text(result.to_jsonl())
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="eyenet", description="Human-vision point-cloud segmentation pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-gen", help="generate the synthetic benchmark suite")
    p.add_argument("--spec", required=True, help="run config JSON (synth section)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("sample", help="cut human-vision batches from a cloud")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=1)

    p = sub.add_parser("train", help="train a model on <data>/train/*.ply")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--epochs", type=int, help="override train.epochs")

    p = sub.add_parser("eval", help="evaluate a checkpoint or saved predictions")
    p.add_argument("--ckpt")
    p.add_argument("--pred", help="directory of PLY files carrying label and pred")
    p.add_argument("--data")
    p.add_argument("--config")
    p.add_argument("--out", help="metric records (JSON lines)")

    p = sub.add_parser("infer", help="label every point of a cloud")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")

    p = sub.add_parser("bench-coverage", help="point-budget comparison against fixed density")
    p.add_argument("--config", required=True)
    p.add_argument("--out")

    p = sub.add_parser("gradcheck", help="finite-difference check of the whole network")
    p.add_argument("--config", required=True)
    p.add_argument("--out")

    p = sub.add_parser("ablate", help="train and evaluate every variant over several seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")

    for sp in sub.choices.values():
        sp.add_argument("--workers", type=int, default=1, help="parallel batch preparation (default 1)")
    return parser


COMMANDS = {
    "synth-gen": (cmd_synth_gen, "spec"),
    "sample": (cmd_sample, "config"),
    "train": (cmd_train, "config"),
    "eval": (cmd_eval, "config"),
    "infer": (cmd_infer, "config"),
    "bench-coverage": (cmd_bench_coverage, "config"),
    "gradcheck": (cmd_gradcheck, "config"),
    "ablate": (cmd_ablate, "config"),
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError:
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    handler, cfg_attr = COMMANDS[args.command]
    try:
        if args.workers < 1:
            raise ConfigError("--workers", "must be at least 1")
        path = getattr(args, cfg_attr, None)
        cfg = load_config(_existing(path, f"--{cfg_attr}")) if path else None
        return handler(args, cfg)
    except ConfigError as exc:
        print(f"eyenet: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (EyeNetError, OSError) as exc:
        print(f"eyenet: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
