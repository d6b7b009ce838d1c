"""Experiment orchestration CLI.

Subcommands: ``synth-gen``, ``train-base``, ``train-aggregator``, ``adapt``,
``fit-approx``, ``eval``, ``sweep``, ``plot``.  Every run writes its
artifacts plus a ``manifest.json`` (command, effective config, seed, code
version) and the effective config as ``config.yaml``, so re-running a stage
from its own artifacts reproduces it.  Exit status is 0 on success; errors
print a structured record to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import pathlib
import sys

import numpy as np

from . import __version__
from .approx import FitConfig, fit_homography_set
from .config import ExperimentConfig, dump_config, load_config
from .detector import BackboneConfig
from .evaluation import EvalReport
from .geometry import GeometryError
from .mappings import spherical_fov_mapping, viewpoint_tilt_mapping
from .multiwarp import (
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from .synthbench import generate_domain_pair, load_manifest, load_split
from .training import (
    ConfigError,
    TrainingConfig,
    adapt,
    evaluate_detector,
    train_aggregator,
    train_base,
)


class DependencyError(RuntimeError):
    """A required upstream artifact is missing; the message names the stage."""


def _out_dir(path) -> pathlib.Path:
    out = pathlib.Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: pathlib.Path, command: str, config: ExperimentConfig,
                    inputs: dict, extra: dict | None = None):
    manifest = {
        "command": command,
        "config": config.to_dict(),
        "seed": config.seed,
        "code_version": __version__,
        "inputs": inputs,
    }
    if extra:
        manifest.update(extra)
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    dump_config(config, out / "config.yaml")


def _write_trace(out: pathlib.Path, trace: list[dict], name: str = "trace.jsonl"):
    with open(out / name, "w") as fh:
        for rec in trace:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _require(path, stage: str):
    if path is None or not pathlib.Path(path).exists():
        raise DependencyError(
            f"missing artifact {path!r}: run the `{stage}` stage first"
        )
    return path


def _dataset_info(data_dir):
    _require(pathlib.Path(data_dir) / "manifest.json", "synth-gen")
    manifest = load_manifest(data_dir)
    return manifest


def _checkpoint_config(config: ExperimentConfig) -> dict:
    return {
        "backbone": dataclasses.asdict(config.backbone),
        "num_classes": config.num_classes,
        "training": dataclasses.asdict(config.training),
    }


def _eval_to_file(report: EvalReport, out: pathlib.Path, name: str):
    with open(out / name, "w") as fh:
        fh.write(report.to_json() + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth_gen(args):
    config = load_config(args.config, args.set or [])
    out = _out_dir(args.out)
    manifest = generate_domain_pair(config.scene, config.shift, config.counts, out)
    # fold the stage metadata into the dataset's own manifest
    manifest.update(
        {
            "command": "synth-gen",
            "config": config.to_dict(),
            "code_version": __version__,
        }
    )
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    dump_config(config, out / "config.yaml")
    print(f"dataset written to {out}")
    return 0


def cmd_train_base(args):
    config = load_config(args.config, args.set or [])
    data_manifest = _dataset_info(args.data)
    out = _out_dir(args.out)
    src_train = load_split(args.data, "src_train")
    src_val = load_split(args.data, "src_val")
    num_classes = data_manifest["num_classes"]
    model, result = train_base(
        src_train, num_classes, config.training, config.backbone, source_val=src_val
    )
    cfg_snapshot = _checkpoint_config(config)
    save_checkpoint(
        out / "base.ckpt",
        model,
        cfg_snapshot,
        step=config.training.base_steps,
        extra={"source_val_ap50": result.get("source_val_ap50")},
    )
    _write_trace(out, result["trace"])
    _write_manifest(
        out,
        "train-base",
        config,
        inputs={"data": str(args.data)},
        extra={"source_val_ap50": result.get("source_val_ap50")},
    )
    print(f"base checkpoint: {out / 'base.ckpt'} "
          f"(source val AP@0.5 = {result.get('source_val_ap50'):.3f})")
    return 0


def cmd_train_aggregator(args):
    config = load_config(args.config, args.set or [])
    _dataset_info(args.data)
    _require(args.base, "train-base")
    out = _out_dir(args.out)
    record = load_checkpoint(args.base)
    base_model = model_from_checkpoint(record)
    if record["kind"] != "BaseDetector":
        raise DependencyError("train-aggregator expects a train-base checkpoint")
    src_train = load_split(args.data, "src_train")
    num_classes = record["config"]["num_classes"]
    model, result = train_aggregator(base_model, src_train, num_classes, config.training)
    save_checkpoint(
        out / "aggregator.ckpt",
        model,
        _checkpoint_config(config),
        step=config.training.aggregator_steps,
    )
    _write_trace(out, result["trace"])
    _write_manifest(
        out,
        "train-aggregator",
        config,
        inputs={"data": str(args.data), "base": str(args.base)},
    )
    print(f"aggregator checkpoint: {out / 'aggregator.ckpt'}")
    return 0


def cmd_adapt(args):
    config = load_config(args.config, args.set or [])
    _dataset_info(args.data)
    stage = "train-base" if config.training.model_kind == "plain" else "train-aggregator"
    _require(args.ckpt, stage)
    out = _out_dir(args.out)
    record = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(record)
    src_train = load_split(args.data, "src_train")
    tgt_train = load_split(args.data, "tgt_train")
    tgt_val = load_split(args.data, "tgt_val")
    num_classes = record["config"]["num_classes"]
    state, trace = adapt(
        model, src_train, tgt_train, num_classes, config.training, target_val=tgt_val
    )
    save_checkpoint(
        out / "student.ckpt",
        state.student,
        _checkpoint_config(config),
        step=config.training.adapt_steps,
    )
    save_checkpoint(
        out / "teacher.ckpt",
        state.teacher,
        _checkpoint_config(config),
        step=config.training.adapt_steps,
    )
    _write_trace(out, trace)
    report = evaluate_detector(
        state.student, tgt_val, config.evaluation.tau, config.evaluation.nms_iou
    )
    _eval_to_file(report, out, "target_eval.json")
    _write_manifest(
        out,
        "adapt",
        config,
        inputs={"data": str(args.data), "ckpt": str(args.ckpt)},
        extra={"target_ap50": report.mean_ap50},
    )
    print(f"adapted student: {out / 'student.ckpt'} "
          f"(target AP@0.5 = {report.mean_ap50:.3f})")
    return 0


def cmd_fit_approx(args):
    out = _out_dir(args.out)
    src = tuple(float(v) for v in args.src_fov.split(","))
    dst = tuple(float(v) for v in args.dst_fov.split(","))
    if args.mapping == "fov":
        mapping = spherical_fov_mapping(src[0], src[1], dst[0], dst[1])
    elif args.mapping == "viewpoint":
        mapping = viewpoint_tilt_mapping(args.tilt, src[0], src[1])
    else:
        raise ConfigError(f"unknown mapping {args.mapping!r}")
    report = fit_homography_set(
        mapping, args.n, (args.grid, args.grid), FitConfig(seed=args.seed)
    )
    payload = {
        "mapping": {"name": mapping.name, "params": dict(mapping.params)},
        "grid": [args.grid, args.grid],
        "n": args.n,
        "seed": args.seed,
        "report": report.to_dict(),
    }
    with open(out / "fit_report.json", "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    if args.viz:
        from .plots import plot_fit_report

        paths = plot_fit_report(report, mapping, out)
        print(f"visualization: {paths[0]}")
    print(
        f"fit: n={args.n} rmse={report.rmse:.4f}px max={report.max_error:.4f}px "
        f"({report.iterations} rounds) -> {out / 'fit_report.json'}"
    )
    return 0


def cmd_eval(args):
    config = load_config(args.config, args.set or [])
    _dataset_info(args.data)
    _require(args.ckpt, "train-base (or adapt)")
    out = _out_dir(args.out)
    record = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(record)
    samples = load_split(args.data, args.split)
    if any(s.boxes is None for s in samples):
        raise ConfigError(f"split {args.split!r} has no annotations to evaluate against")
    report = evaluate_detector(
        model, samples, config.evaluation.tau, config.evaluation.nms_iou
    )
    _eval_to_file(report, out, "eval.json")
    _write_manifest(
        out,
        "eval",
        config,
        inputs={"data": str(args.data), "ckpt": str(args.ckpt), "split": args.split},
        extra={"ap50": report.mean_ap50},
    )
    print(f"{args.split} AP@0.5 = {report.mean_ap50:.4f} -> {out / 'eval.json'}")
    return 0


def cmd_sweep(args):
    config = load_config(args.config, args.set or [])
    _dataset_info(args.data)
    _require(args.base, "train-base")
    out = _out_dir(args.out)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    record = load_checkpoint(args.base)
    base_model = model_from_checkpoint(record)
    num_classes = record["config"]["num_classes"]
    src_train = load_split(args.data, "src_train")
    tgt_train = load_split(args.data, "tgt_train")
    tgt_val = load_split(args.data, "tgt_val")

    results = []
    for raw in values:
        if args.param == "N":
            value = int(raw)
            train_cfg = dataclasses.replace(config.training, n_homographies=value)
        elif args.param == "lambda":
            value = float(raw)
            train_cfg = dataclasses.replace(config.training, lam=value)
        elif args.param == "tau":
            value = float(raw)
            train_cfg = dataclasses.replace(config.training, tau=value)
        else:
            raise ConfigError(f"unknown sweep parameter {args.param!r}")
        agg_model, _ = train_aggregator(base_model, src_train, num_classes, train_cfg)
        aps = []
        for seed in seeds:
            run_cfg = dataclasses.replace(train_cfg, seed=seed)
            state, trace = adapt(
                agg_model, src_train, tgt_train, num_classes, run_cfg
            )
            report = evaluate_detector(
                state.student, tgt_val, config.evaluation.tau, config.evaluation.nms_iou
            )
            aps.append(report.mean_ap50)
            run_dir = _out_dir(out / f"{args.param}={raw}_seed{seed}")
            save_checkpoint(
                run_dir / "student.ckpt",
                state.student,
                _checkpoint_config(config),
                step=run_cfg.adapt_steps,
            )
            _write_trace(run_dir, trace)
        results.append(
            {
                "value": value,
                "target_ap50": aps,
                "mean_target_ap50": float(np.mean(aps)),
                "std_target_ap50": float(np.std(aps)),
            }
        )
    summary = {"param": args.param, "seeds": seeds, "results": results}
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
    lines = [f"{'value':>10} {'mean AP':>10} {'std':>8}  runs"]
    for entry in results:
        lines.append(
            f"{entry['value']:>10} {entry['mean_target_ap50']:>10.4f} "
            f"{entry['std_target_ap50']:>8.4f}  "
            + ", ".join(f"{a:.4f}" for a in entry["target_ap50"])
        )
    (out / "table.txt").write_text("\n".join(lines) + "\n")
    _write_manifest(
        out,
        "sweep",
        config,
        inputs={"data": str(args.data), "base": str(args.base)},
        extra={"summary": summary},
    )
    print("\n".join(lines))
    return 0


def cmd_plot(args):
    from .plots import plot_fit_report, plot_sweep, plot_trace

    out = _out_dir(args.out)
    written = []
    if args.trace:
        _require(args.trace, "adapt")
        trace = [json.loads(line) for line in open(args.trace)]
        written += plot_trace(trace, out)
    if args.sweep:
        _require(args.sweep, "sweep")
        with open(args.sweep) as fh:
            written += plot_sweep(json.load(fh), out)
    if args.fit:
        _require(args.fit, "fit-approx")
        with open(args.fit) as fh:
            payload = json.load(fh)
        from .approx import FitReport
        from .geometry import HomographyParams

        report = FitReport(
            homographies=[
                HomographyParams.from_array(row)
                for row in payload["report"]["homographies"]
            ],
            selection=np.asarray(payload["report"]["selection"]),
            rmse=payload["report"]["rmse"],
            max_error=payload["report"]["max_error"],
            iterations=payload["report"]["iterations"],
            reference_resolution=payload["report"]["reference_resolution"],
        )
        params = payload["mapping"]["params"]
        if payload["mapping"]["name"] == "spherical_fov":
            mapping = spherical_fov_mapping(
                params["src_fov_x"], params["src_fov_y"],
                params["dst_fov_x"], params["dst_fov_y"],
            )
        else:
            mapping = viewpoint_tilt_mapping(
                params["tilt_deg"], params["fov_x"], params["fov_y"]
            )
        written += plot_fit_report(report, mapping, out)
    if not written:
        raise ConfigError("nothing to plot: pass --trace, --sweep, or --fit")
    for path in written:
        print(path)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="homadapt",
        description="Homography-set learning laboratory for geometric domain shift",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument(
            "--set",
            action="append",
            metavar="KEY.PATH=VALUE",
            help="override a config entry (repeatable); wins over the file",
        )

    p = sub.add_parser("synth-gen", help="generate a synthetic domain pair")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth_gen)

    p = sub.add_parser("train-base", help="stage 1: source-only detector")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_base)

    p = sub.add_parser("train-aggregator", help="stage 2: aggregator on random sets")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--base", required=True, help="train-base checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_aggregator)

    p = sub.add_parser("adapt", help="stage 3: mean-teacher adaptation")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True, help="aggregator (or base, for plain) checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_adapt)

    p = sub.add_parser("fit-approx", help="fit a homography set to a dense mapping")
    p.add_argument("--mapping", choices=("fov", "viewpoint"), default="fov")
    p.add_argument("--src-fov", default="50,26", help="source FoV x,y in degrees")
    p.add_argument("--dst-fov", default="90,34", help="destination FoV x,y in degrees")
    p.add_argument("--tilt", type=float, default=25.0, help="viewpoint tilt (degrees)")
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--grid", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--viz", action="store_true", help="write the remap comparison image")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_fit_approx)

    p = sub.add_parser("eval", help="AP@0.5 of a checkpoint on a dataset split")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="tgt_val")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="repeat adaptation over a parameter grid")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--base", required=True, help="train-base checkpoint")
    p.add_argument("--param", choices=("N", "lambda", "tau"), required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("plot", help="render plots from traces / sweeps / fits")
    p.add_argument("--trace", help="adapt trace.jsonl")
    p.add_argument("--sweep", help="sweep summary.json")
    p.add_argument("--fit", help="fit-approx fit_report.json")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, DependencyError, GeometryError, ValueError, OSError) as exc:
        record = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
