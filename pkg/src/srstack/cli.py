"""Command-line entry points: gen-data, train, eval, report, ablate.

Configs are TOML; every run directory receives a manifest echoing the
fully resolved configuration, so any output is reproducible from its
config file and master seed alone. Errors exit nonzero with one
machine-readable line on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import dataset as dsmod
from . import metrics as metmod
from . import scene as scmod
from . import stack as stmod
from . import svgplot
from .arrayio import canonical_json
from .loss import LossConfig
from .model import ModelConfig, StudentModel
from .train import TrainConfig, load_checkpoint, run_config_hash, train_loop


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Config plumbing


def _coerce(cls, data: dict, where: str):
    """Build a (frozen) config dataclass from a TOML table, strictly."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)} in [{where}]")

    def fix(value):
        if isinstance(value, list):
            return tuple(fix(v) for v in value)
        if isinstance(value, dict):
            return tuple((k, fix(v)) for k, v in value.items())
        return value

    kwargs = {k: fix(v) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad [{where}] config: {exc}") from exc


def load_toml(path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def dataset_config_from(data: dict) -> dsmod.DatasetConfig:
    section = dict(data.get("dataset", {}))
    scene = _coerce(scmod.SceneConfig, section.pop("scene", {}), "dataset.scene")
    stack = _coerce(stmod.StackSimConfig, section.pop("stack", {}), "dataset.stack")
    splat = _coerce(scmod.SplatSpec, section.pop("splat", {}), "dataset.splat")
    cfg = _coerce(dsmod.DatasetConfig, section, "dataset")
    return dataclasses.replace(cfg, scene=scene, stack=stack, splat=splat)


def run_configs_from(data: dict) -> tuple[ModelConfig, LossConfig, TrainConfig]:
    model = _coerce(ModelConfig, data.get("model", {}), "model")
    loss = _coerce(LossConfig, data.get("loss", {}), "loss")
    train = _coerce(TrainConfig, data.get("train", {}), "train")
    return model, loss, train


def eval_options_from(data: dict) -> dict:
    allowed = {
        "hr_override_deg",
        "oracle_injection",
        "frame_mode",
        "against_ortho_truth",
        "thresholds",
        "dilation_radii",
    }
    section = dict(data.get("eval", {}))
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)} in [eval]")
    return section


def _apply_overrides(data: dict, overrides: dict) -> dict:
    out = json.loads(json.dumps(data))  # deep copy of plain data
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return out


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_data(args) -> int:
    cfg = dataset_config_from(load_toml(args.config))
    out = Path(args.out)
    manifest = dsmod.write_dataset(out, cfg, progress=None)
    print(f"wrote {manifest.example_count} examples to {out} (hash {manifest.config_hash})")
    return 0


def _latest_checkpoint(run_dir: Path) -> Path | None:
    final = run_dir / "ckpt_final.bin"
    if final.exists():
        return final
    steps = sorted(run_dir.glob("ckpt_*.bin"))
    return steps[-1] if steps else None


def cmd_train(args) -> int:
    data = load_toml(args.config)
    model_cfg, loss_cfg, train_cfg = run_configs_from(data)
    dataset = dsmod.load_dataset(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    chash = run_config_hash(model_cfg, loss_cfg, train_cfg)
    resume = None
    if args.resume:
        latest = _latest_checkpoint(out)
        if latest is not None:
            resume = load_checkpoint(latest, expect_hash=chash)
            if resume.step >= train_cfg.steps:
                print(f"run already complete at step {resume.step}")
                return 0

    manifest = {
        "command": "train",
        "config": {
            "model": dataclasses.asdict(model_cfg),
            "loss": dataclasses.asdict(loss_cfg),
            "train": dataclasses.asdict(train_cfg),
        },
        "config_hash": chash,
        "dataset_hash": dataset.manifest.config_hash,
    }
    (out / "run_manifest.json").write_text(canonical_json(manifest) + "\n")

    log_path = out / "loss_log.jsonl"
    mode = "a" if resume is not None else "w"
    with open(log_path, mode) as log_fh:
        def on_log(step, loss):
            log_fh.write(canonical_json({"step": step, "loss": loss}) + "\n")

        train_loop(dataset, model_cfg, loss_cfg, train_cfg, out_dir=out, resume=resume, progress=on_log)
    print(f"trained {train_cfg.steps} steps -> {out / 'ckpt_final.bin'}")
    return 0


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    manifest = json.loads((run_dir / "run_manifest.json").read_text())
    data = manifest["config"]
    model_cfg, loss_cfg, train_cfg = run_configs_from(data)

    eval_opts = eval_options_from(load_toml(args.eval_config)) if args.eval_config else {}
    sweep_kwargs = {}
    if "thresholds" in eval_opts:
        sweep_kwargs["thresholds"] = tuple(eval_opts.pop("thresholds"))
    if "dilation_radii" in eval_opts:
        sweep_kwargs["dilation_radii"] = tuple(eval_opts.pop("dilation_radii"))
    sweep = metmod.SweepSpec(**sweep_kwargs) if sweep_kwargs else metmod.SweepSpec()
    if "hr_override_deg" in eval_opts:
        eval_opts["hr_override_deg"] = tuple(eval_opts["hr_override_deg"])

    dataset = dsmod.load_dataset(args.dataset)
    ckpt_path = Path(args.checkpoint) if args.checkpoint else _latest_checkpoint(run_dir)
    if ckpt_path is None:
        raise ConfigError(f"no checkpoint found in {run_dir}")
    ckpt = load_checkpoint(ckpt_path, expect_hash=manifest["config_hash"])

    model = StudentModel(model_cfg, seed=train_cfg.seed)
    try:
        model.load_arrays(ckpt.params, ckpt.state)
    except KeyError as exc:
        raise ConfigError(f"checkpoint is missing arrays for this model: {exc}") from exc

    report, packs = metmod.evaluate_model(model, dataset, loss_cfg, train_cfg, sweep=sweep, **eval_opts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(canonical_json(report.to_dict()) + "\n")

    cal = metmod.CountCalibration(dataset.splat.integral)
    _write_csv(
        out / "counts.csv",
        ["tile", "true_count", "estimated_count"],
        [[i, p.true_count, metmod.estimate_count(p.centroid_pred, cal)] for i, p in enumerate(packs)],
    )
    _write_csv(
        out / "height_ae.csv",
        ["bucket", "count", "mean", "p50", "p90", "p95", "p99"],
        [
            [name, row.get("count", 0)] + [row.get(k, "") for k in ("mean", "p50", "p90", "p95", "p99")]
            for name, row in report.height_ae.items()
        ],
    )
    _write_csv(
        out / "metrics.csv",
        ["metric", "value"],
        [
            ["miou", report.miou],
            ["miou_threshold", report.miou_threshold],
            ["miou_dilation", report.miou_dilation],
            ["road_miou", report.road_miou],
            ["count_r2", report.count_r2],
            ["count_mae", report.count_mae],
            ["builtup_area_error", report.builtup_area_error],
            ["builtup_area_threshold", report.builtup_area_threshold],
            ["mean_registered_mse", report.mean_registered_mse],
            ["n_tiles", report.n_tiles],
        ],
    )
    print(f"mIoU {report.miou:.4f}  count R2 {report.count_r2:.4f}  -> {out}")
    return 0


def cmd_report(args) -> int:
    runs = []
    for run in args.runs:
        run = Path(run)
        manifest = json.loads((run / "run_manifest.json").read_text())
        report_path = run / "eval" / "report.json"
        if not report_path.exists():
            raise ConfigError(f"{run} has no eval/report.json; run `srstack eval` first")
        report = json.loads(report_path.read_text())
        counts_csv = run / "eval" / "counts.csv"
        counts = []
        if counts_csv.exists():
            rows = counts_csv.read_text().strip().splitlines()[1:]
            counts = [tuple(float(x) for x in r.split(",")[1:]) for r in rows]
        runs.append({"dir": run, "manifest": manifest, "report": report, "counts": counts})

    hashes = {r["manifest"]["dataset_hash"] for r in runs}
    if len(hashes) > 1:
        raise ConfigError(f"runs evaluated on different datasets: {sorted(hashes)}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for r in sorted(runs, key=lambda r: r["manifest"]["config"]["model"]["frames"]):
        cfgm = r["manifest"]["config"]["model"]
        cfgt = r["manifest"]["config"]["train"]
        rep = r["report"]
        rows.append(
            [
                r["dir"].name,
                cfgm["frames"],
                cfgm["fusion_mode"],
                cfgt["frame_mode"],
                cfgt["seed"],
                rep["miou"],
                rep["count_r2"],
                rep["count_mae"],
                rep["builtup_area_error"],
            ]
        )
    _write_csv(
        out / "comparison.csv",
        ["run", "frames", "fusion", "frame_mode", "seed", "miou", "count_r2", "count_mae", "builtup_area_error"],
        rows,
    )

    by_frames: dict[int, list[float]] = {}
    for r in runs:
        by_frames.setdefault(r["manifest"]["config"]["model"]["frames"], []).append(r["report"]["miou"])
    if len(by_frames) > 1:
        frames = sorted(by_frames)
        means = [float(np.mean(by_frames[f])) for f in frames]
        _write_csv(out / "timeframes.csv", ["frames", "mean_miou"], list(map(list, zip(frames, means))))
        (out / "miou_vs_frames.svg").write_text(
            svgplot.line_svg(frames, means, "Building mIoU vs frames", "frames in stack", "mIoU")
        )

    for r in runs:
        if r["counts"]:
            truths = [c[0] for c in r["counts"]]
            ests = [c[1] for c in r["counts"]]
            r2 = r["report"]["count_r2"]
            svg = svgplot.scatter_svg(
                truths,
                ests,
                f"Building counts: {r['dir'].name}",
                "true count",
                "estimated count",
                annotation=f"R² = {r2:.3f}",
                identity=True,
            )
            (out / f"counts_{r['dir'].name}.svg").write_text(svg)

    height_rows = []
    for r in runs:
        for bucket, row in r["report"]["height_ae"].items():
            if row.get("count", 0):
                height_rows.append(
                    [r["dir"].name, bucket, row["count"], row["mean"], row["p50"], row["p90"], row["p95"], row["p99"]]
                )
    _write_csv(
        out / "height_ae.csv",
        ["run", "bucket", "count", "mean", "p50", "p90", "p95", "p99"],
        height_rows,
    )
    print(f"report over {len(runs)} runs -> {out}")
    return 0


def cmd_ablate(args) -> int:
    base = load_toml(args.config)
    spec = load_toml(args.spec)
    ablations = spec.get("ablation", [])
    if not ablations:
        raise ConfigError("ablation spec lists no [[ablation]] entries")
    names = [a.get("name") for a in ablations]
    if len(set(names)) != len(names) or None in names:
        raise ConfigError("ablation names must be present and unique")

    dataset = dsmod.load_dataset(args.dataset)
    out = Path(args.out)
    rows = []
    for ab in ablations:
        repeats = int(ab.get("repeats", 1))
        overrides = ab.get("overrides", {})
        metrics_per_rep = []
        for rep in range(repeats):
            data = _apply_overrides(base, overrides)
            data.setdefault("train", {})
            data["train"]["seed"] = int(data["train"].get("seed", 0)) + rep
            model_cfg, loss_cfg, train_cfg = run_configs_from(data)
            run_dir = out / ab["name"] / f"rep{rep}"
            run_dir.mkdir(parents=True, exist_ok=True)

            chash = run_config_hash(model_cfg, loss_cfg, train_cfg)
            manifest = {
                "command": "ablate",
                "ablation": ab["name"],
                "config": {
                    "model": dataclasses.asdict(model_cfg),
                    "loss": dataclasses.asdict(loss_cfg),
                    "train": dataclasses.asdict(train_cfg),
                },
                "config_hash": chash,
                "dataset_hash": dataset.manifest.config_hash,
            }
            (run_dir / "run_manifest.json").write_text(canonical_json(manifest) + "\n")
            model, _, _ = train_loop(dataset, model_cfg, loss_cfg, train_cfg, out_dir=run_dir)
            report, _ = metmod.evaluate_model(model, dataset, loss_cfg, train_cfg)
            eval_dir = run_dir / "eval"
            eval_dir.mkdir(exist_ok=True)
            (eval_dir / "report.json").write_text(canonical_json(report.to_dict()) + "\n")
            metrics_per_rep.append(report)
            print(f"{ab['name']} rep{rep}: mIoU {report.miou:.4f} R2 {report.count_r2:.4f}")

        rows.append(
            [
                ab["name"],
                repeats,
                float(np.mean([r.miou for r in metrics_per_rep])),
                float(np.mean([r.count_r2 for r in metrics_per_rep])),
                float(np.mean([r.count_mae for r in metrics_per_rep])),
            ]
        )
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "ablations.csv", ["name", "repeats", "mean_miou", "mean_count_r2", "mean_count_mae"], rows)
    print(f"ablations -> {out / 'ablations.csv'}")
    return 0


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="srstack", description="multi-frame super-resolution segmentation pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--config", required=True, help="dataset TOML")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--dataset", required=True)
    t.add_argument("--config", required=True, help="model/loss/train TOML")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a trained run")
    e.add_argument("--run", required=True, help="run directory (with run_manifest.json)")
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", required=True, help="evaluation output directory")
    e.add_argument("--checkpoint", default=None, help="checkpoint path (default: latest in run)")
    e.add_argument("--eval-config", default=None, help="optional eval TOML")
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("report", help="comparison tables and plots over runs")
    r.add_argument("--runs", nargs="+", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_report)

    a = sub.add_parser("ablate", help="run an ablation list")
    a.add_argument("--dataset", required=True)
    a.add_argument("--config", required=True, help="base model/loss/train TOML")
    a.add_argument("--spec", required=True, help="ablation TOML")
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # the CLI contract: one machine-readable line, nonzero exit
        sys.stderr.write("ERROR " + json.dumps({"type": type(exc).__name__, "message": str(exc)}) + "\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
