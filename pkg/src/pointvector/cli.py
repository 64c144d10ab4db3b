"""Command-line entry point: train, eval, ablate, gradcheck, bench, gen-data.

Configuration is one JSON document with sections `model`, `train`, `data`,
and optionally `ablate`; unknown keys anywhere are hard errors. Run artifacts
live under the run directory: config.json, metrics.csv, best.ckpt.npz,
log.txt.

Exit codes: 0 success, 2 configuration error, 3 numeric fault, 4 gradient
check failure, 5 checkpoint error.
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataio, gradcheck, model as model_mod, nnops, setabs, train as train_mod
from .errors import (
    CheckpointError,
    ConfigError,
    NumericFaultError,
    PointVectorError,
)
from .geometry import PointSetBatch
from .model import ModelConfig, build_model, param_count, preset_config
from .train import TrainConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_GRADCHECK = 4
EXIT_CHECKPOINT = 5


@dataclass
class DataConfig:
    task: str = "segmentation"
    num_scenes: int = 200
    num_points: int = 512
    kinds: list = field(default_factory=lambda: list(dataio.KINDS))
    noise_sigma: float = 0.01
    num_primitives: int = 3
    seed: int = 0
    val_fraction: float = 0.2
    manifest: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown data config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def build_dataset(dc: DataConfig) -> dataio.Dataset:
    if dc.manifest is not None:
        return dataio.load_dataset_from_manifest(dc.manifest, dc.task, len(dc.kinds))
    if dc.task == "segmentation":
        return dataio.make_segmentation_dataset(
            num_scenes=dc.num_scenes, num_points=dc.num_points,
            kinds=tuple(dc.kinds), noise_sigma=dc.noise_sigma,
            num_primitives=dc.num_primitives, seed=dc.seed,
            val_fraction=dc.val_fraction)
    if dc.task == "classification":
        return dataio.make_classification_dataset(
            num_clouds=dc.num_scenes, num_points=dc.num_points,
            kinds=tuple(dc.kinds), noise_sigma=dc.noise_sigma, seed=dc.seed,
            val_fraction=dc.val_fraction)
    raise ConfigError(f"unknown data task {dc.task!r}")


def model_config_from_section(section: dict, num_classes: int) -> ModelConfig:
    section = dict(section)
    preset = section.pop("preset", None)
    if preset is not None:
        return preset_config(preset, num_classes=num_classes, **section)
    section.setdefault("num_classes", num_classes)
    return ModelConfig.from_dict(section)


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = set(doc) - {"model", "train", "data", "ablate"}
    if unknown:
        raise ConfigError(f"{path}: unknown config sections: {sorted(unknown)}")
    return doc


def resolve_configs(doc: dict, seed_override: int | None = None):
    data_cfg = DataConfig.from_dict(doc.get("data", {}))
    train_cfg = TrainConfig.from_dict(doc.get("train", {}))
    if seed_override is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=seed_override)
    num_classes = len(data_cfg.kinds)
    model_cfg = model_config_from_section(doc.get("model", {}), num_classes)
    if model_cfg.task != data_cfg.task:
        raise ConfigError(
            f"model task {model_cfg.task!r} != data task {data_cfg.task!r}")
    return model_cfg, train_cfg, data_cfg


class RunLogger:
    def __init__(self, path=None, quiet=False):
        self.path = Path(path) if path is not None else None
        self.quiet = quiet
        if self.path is not None:
            self.path.write_text("", encoding="utf-8")

    def __call__(self, msg: str) -> None:
        if not self.quiet:
            print(msg)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
                fh.write(msg + "\n")


def _prepare_run_dir(args, config_path) -> Path:
    name = args.name or Path(config_path).stem
    run_dir = Path(args.run_dir) if args.run_dir else Path("run") / name
    if run_dir.exists() and any(run_dir.iterdir()):
        if not args.overwrite:
            raise ConfigError(
                f"run directory {run_dir} already exists; pass --overwrite to reuse it")
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    doc = load_config(args.config)
    model_cfg, train_cfg, data_cfg = resolve_configs(doc, args.seed)
    run_dir = _prepare_run_dir(args, args.config)
    log = RunLogger(run_dir / "log.txt", quiet=args.quiet)
    resolved = {
        "model": model_cfg.to_dict(),
        "train": train_cfg.to_dict(),
        "data": data_cfg.to_dict(),
    }
    (run_dir / "config.json").write_text(
        json.dumps(resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log(f"building dataset ({data_cfg.task}, {data_cfg.num_scenes} scenes)")
    dataset = build_dataset(data_cfg)
    log(f"training for {train_cfg.epochs} epochs, seed {train_cfg.seed}, "
        f"precision {args.precision}")
    report = train_mod.train_loop(model_cfg, train_cfg, dataset,
                                  run_dir=run_dir, log=log)
    train_mod.write_metrics_csv(report, run_dir / "metrics.csv")
    log(f"best epoch {report.best_epoch} "
        f"({'val mIoU' if dataset.task == 'segmentation' else 'val OA'} "
        f"{report.best_metric:.4f}); metrics in {run_dir / 'metrics.csv'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    mdl, extra = model_mod.load_checkpoint(args.checkpoint)
    doc = load_config(args.config)
    _, train_cfg, data_cfg = resolve_configs(doc)
    dataset = build_dataset(data_cfg)
    eps = train_cfg.label_smoothing
    if args.perturbations == "none":
        specs = [("none", train_mod.AugmentSpec(), 1.0)]
    else:
        specs = train_mod.table8_specs(rescale_radius=args.rescale_radius)
    rows = train_mod.perturbation_eval(mdl, dataset, specs, split=args.split,
                                       eps=eps, batch_size=train_cfg.batch_size)
    metric_key = "miou" if dataset.task == "segmentation" else "oa"
    header = " ".join(f"{r['name']:>10}" for r in rows)
    values = " ".join(f"{r[metric_key] * 100:10.2f}" for r in rows)
    print(f"{metric_key:>6} | {header}")
    print(f"{'':>6} | {values}")
    if args.csv:
        lines = ["name,loss,oa,macc,miou"]
        for r in rows:
            lines.append(f"{r['name']},{r['loss']!r},{r['oa']!r},{r['macc']!r},{r['miou']!r}")
        Path(args.csv).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return EXIT_OK


def _ablate_cell(payload: dict) -> dict:
    """One ablation cell; runs in a worker process."""
    with nnops.precision(payload["precision"]):
        model_cfg = ModelConfig.from_dict(payload["model"])
        train_cfg = TrainConfig.from_dict(payload["train"])
        data_cfg = DataConfig.from_dict(payload["data"])
        dataset = build_dataset(data_cfg)
        mdl_for_count = build_model(
            train_mod.apply_ablation_switches(model_cfg, train_cfg), seed=0)
        n_params = param_count(mdl_for_count)
        report = train_mod.train_loop(model_cfg, train_cfg, dataset)
        best_rows = [r for r in report.rows
                     if r.split == "val" and r.epoch == report.best_epoch]
        row = best_rows[0]
        return {
            "aggregation": train_cfg.aggregation or model_cfg.resolved_aggregation(),
            "encoder": train_cfg.encoder or model_cfg.encoder,
            "m": train_cfg.vector_dim or model_cfg.vector_dim,
            "seed": train_cfg.seed,
            "param_count": n_params,
            "best_epoch": report.best_epoch,
            "loss": row.loss,
            "oa": row.oa,
            "macc": row.macc,
            "miou": row.miou,
        }


ABLATE_KEYS = {"aggregations", "encoders", "vector_dims", "seeds", "epochs"}


def cmd_ablate(args) -> int:
    doc = load_config(args.config)
    model_cfg, train_cfg, data_cfg = resolve_configs(doc, args.seed)
    ablate = doc.get("ablate", {})
    unknown = set(ablate) - ABLATE_KEYS
    if unknown:
        raise ConfigError(f"unknown ablate config keys: {sorted(unknown)}")
    aggregations = ablate.get("aggregations", [model_cfg.resolved_aggregation()])
    encoders = ablate.get("encoders", [model_cfg.encoder])
    vector_dims = ablate.get("vector_dims", [model_cfg.vector_dim])
    seeds = ablate.get("seeds", [train_cfg.seed])
    for agg in aggregations:
        if agg not in setabs.AGGREGATION_MODES:
            raise ConfigError(f"unknown aggregation {agg!r}")
    epochs = ablate.get("epochs", train_cfg.epochs)
    run_dir = _prepare_run_dir(args, args.config)
    log = RunLogger(run_dir / "log.txt", quiet=args.quiet)

    payloads = []
    for agg, enc, m, seed in itertools.product(aggregations, encoders,
                                               vector_dims, seeds):
        cell_train = dataclasses.replace(
            train_cfg, aggregation=agg, encoder=enc, vector_dim=m, seed=seed,
            epochs=epochs)
        payloads.append({
            "model": model_cfg.to_dict(),
            "train": cell_train.to_dict(),
            "data": data_cfg.to_dict(),
            "precision": args.precision,
        })
    log(f"{len(payloads)} ablation cells, jobs={args.jobs}")
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_ablate_cell, payloads))
    else:
        rows = [_ablate_cell(p) for p in payloads]
    header = "aggregation,encoder,m,seed,param_count,best_epoch,loss,oa,macc,miou"
    lines = [header]
    for r in rows:
        lines.append(
            f"{r['aggregation']},{r['encoder']},{r['m']},{r['seed']},"
            f"{r['param_count']},{r['best_epoch']},{r['loss']!r},{r['oa']!r},"
            f"{r['macc']!r},{r['miou']!r}")
        log(lines[-1])
    (run_dir / "ablate.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    log(f"wrote {run_dir / 'ablate.csv'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    corrupt = "linear" if args.inject_fault else None
    failures = []

    def progress(name, worst):
        status = "PASS" if worst < gradcheck.TOLERANCE else "FAIL"
        print(f"{name:30s} worst_rel_err {worst:12.3e}  {status}")
        if worst >= gradcheck.TOLERANCE:
            failures.append(name)

    gradcheck.run_all(instances=args.instances, seed=args.seed or 0,
                      corrupt_case=corrupt, progress=progress)
    if failures:
        print(f"gradient check FAILED for: {', '.join(failures)}")
        return EXIT_GRADCHECK
    print("all gradient checks passed")
    return EXIT_OK


def cmd_bench(args) -> int:
    from . import geometry

    rng = np.random.default_rng(0)
    b, n, c = args.batch, args.points, args.channels
    cloud = PointSetBatch(positions=rng.uniform(-1, 1, size=(b, n, 3)),
                          features=rng.standard_normal((b, n, c)))

    def timeit(fn, repeat=args.repeat):
        fn()  # warm up
        t0 = time.perf_counter()
        for _ in range(repeat):
            fn()
        return (time.perf_counter() - t0) / repeat * 1000.0

    rows = []
    rows.append(("farthest_point_sample",
                 timeit(lambda: geometry.farthest_point_sample(cloud, n // 4))))
    centers = geometry.farthest_point_sample(cloud, n // 4)
    rows.append(("knn", timeit(lambda: geometry.knn(centers, cloud, 16))))
    rows.append(("ball_query",
                 timeit(lambda: geometry.ball_query(centers, cloud, 0.5, 16))))

    cfg = setabs.BlockConfig(in_channels=c, out_channels=2 * c, k_neighbors=16,
                             stride=4)
    p = setabs.sa_block_params(rng, cfg)
    rows.append(("sa_block fwd", timeit(lambda: setabs.sa_block(cloud, cfg, p))))

    vcfg = setabs.BlockConfig(in_channels=c, out_channels=c, k_neighbors=8)
    vp = setabs.vpsa_block_params(rng, vcfg)
    rows.append(("vpsa_block fwd", timeit(lambda: setabs.vpsa_block(cloud, vcfg, vp))))

    def vpsa_fwd_bwd():
        with nnops.GradTape() as tape:
            out = setabs.vpsa_block(cloud, vcfg, vp)
            loss = nnops.mean_all(out.features)
            nnops.backward(tape, loss)

    rows.append(("vpsa_block fwd+bwd", timeit(vpsa_fwd_bwd)))
    print(f"{'operation':25s} {'ms/call':>10s}   "
          f"(B={b}, N={n}, C={c}, {args.precision})")
    for name, ms in rows:
        print(f"{name:25s} {ms:10.2f}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    doc = load_config(args.config)
    data_cfg = DataConfig.from_dict(doc.get("data", {}))
    dataset = build_dataset(data_cfg)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.overwrite:
        raise ConfigError(f"{out} already exists; pass --overwrite to reuse it")
    manifest = dataio.save_dataset_scenes(dataset, out)
    print(f"wrote {dataset.num_scenes} scenes and manifest {manifest}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pointvector",
        description="Vector-encoding point-cloud networks at desk scale")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the training seed")
    parser.add_argument("--jobs", type=int, default=1,
                        help="parallel workers for ablation cells")
    parser.add_argument("--overwrite", action="store_true",
                        help="allow reuse of an existing run directory")
    parser.add_argument("--precision", choices=("single", "double"),
                        default="double", help="float precision for training")
    parser.add_argument("--quiet", action="store_true", help="suppress stdout logs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("config")
    p.add_argument("--run-dir", default=None)
    p.add_argument("--name", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint, optionally perturbed")
    p.add_argument("checkpoint")
    p.add_argument("config")
    p.add_argument("--split", default="val")
    p.add_argument("--perturbations", choices=("none", "table8"), default="none")
    p.add_argument("--rescale-radius", action="store_true",
                   help="scale ball-query radii together with scaling perturbations")
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep aggregation/encoder/vector-dim cells")
    p.add_argument("config")
    p.add_argument("--run-dir", default=None)
    p.add_argument("--name", default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="time core operations")
    p.add_argument("--points", type=int, default=512)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--channels", type=int, default=32)
    p.add_argument("--repeat", type=int, default=3)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gen-data", help="write synthetic scenes and a manifest")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        with nnops.precision(args.precision):
            return args.func(args)
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except NumericFaultError as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, PointVectorError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc.filename}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
