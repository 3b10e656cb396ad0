"""Command-line runner: run, sweep, synth, inspect, report.

Run artifacts live under ``<out>/<config-hash>/<seed>/`` and the seed
aggregate under ``<out>/<config-hash>/aggregate.{json,csv,md}``.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt
from .config import (
    ConfigError,
    ExperimentConfig,
    canonical_json,
    check_axis,
    load_data,
    normalize_family,
    read_config,
    resolve,
    set_path,
)
from .continuum import load_model, predict_all, save_model
from .data import DatasetError, SyntheticSpec, generate_synthetic, load_dataset, save_dataset
from .evaluation import (
    SUMMARY_COLUMNS,
    EvaluationReport,
    aggregate_runs,
    render_csv,
    render_markdown,
    table_rows,
    two_step_score,
)
from .training import RunRecord, TrainingError, train

log = logging.getLogger("perspectra")

FORMATS = ("json", "csv", "md")
ENV_OUT = "PERSPECTRA_OUT"


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def _write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def output_root(cli_out: str | None, config_out: Path | None) -> Path:
    if cli_out:
        return Path(cli_out)
    if os.environ.get(ENV_OUT):
        return Path(os.environ[ENV_OUT])
    return Path(config_out or "out")


# ---------------------------------------------------------------------------
# one seed


@dataclass
class SeedOutcome:
    seed: int
    status: str  # trained | reused | failed
    message: str = ""
    report: EvaluationReport | None = None


def run_seed(cfg: ExperimentConfig, seed: int, run_dir: Path, force: bool = False) -> SeedOutcome:
    """Train (or reuse) one seed and write its evaluation report."""
    h = cfg.config_hash
    ckpt_path = run_dir / "checkpoint.prsc"
    record_path = run_dir / "record.json"
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        if ckpt_path.exists() and record_path.exists() and not force:
            model, meta = load_model(ckpt_path.read_bytes())
            if meta.get("config_hash") != h or meta.get("seed") != seed:
                raise ckpt.CheckpointError(f"{ckpt_path} belongs to config {meta.get('config_hash')} seed {meta.get('seed')}")
            status = "reused"
        else:
            model, record = train(cfg.architecture, cfg.dataset, cfg.training, seed, config_hash=h)
            record.checkpoint = ckpt_path.name
            blob = save_model(model, {"config_hash": h, "seed": seed, "family": cfg.architecture.family})
            ckpt_path.with_name(ckpt_path.name + ".tmp").write_bytes(blob)
            os.replace(ckpt_path.with_name(ckpt_path.name + ".tmp"), ckpt_path)
            _write(run_dir / "loss.csv", record.loss_csv())
            _write(record_path, _dump(record.to_dict()))
            status = "trained"
        report = two_step_score(model, cfg.dataset, seed=seed, config_hash=h)
        _write(run_dir / "report.json", _dump(report.to_dict()))
        return SeedOutcome(seed, status, report=report)
    except (TrainingError, ckpt.CheckpointError, ValueError, FloatingPointError) as e:
        log.error("seed %s failed: %s", seed, e)
        return SeedOutcome(seed, "failed", str(e))


def _run_seed_job(args):
    return run_seed(*args)


# ---------------------------------------------------------------------------
# aggregation


def load_reports(run_root: Path, seeds: Sequence[int] | None = None) -> list[EvaluationReport]:
    if seeds is None:
        dirs = sorted((p for p in run_root.iterdir() if p.is_dir() and (p / "report.json").exists()),
                      key=lambda p: int(p.name) if p.name.isdigit() else p.name)
    else:
        dirs = [run_root / str(s) for s in seeds]
    return [EvaluationReport.from_dict(json.loads((d / "report.json").read_text("utf-8"))) for d in dirs]


def write_aggregate(run_root: Path, name: str, task: str, formats: Sequence[str],
                    seeds: Sequence[int] | None = None) -> dict:
    """Aggregate the per-seed reports on disk; output depends only on those files."""
    reports = load_reports(run_root, seeds)
    agg = aggregate_runs(reports)
    payload = {
        "model": name,
        "task": task,
        "config_hash": reports[0].config_hash,
        "seeds": [r.seed for r in reports],
        "metrics": {k: {"mean": v.mean, "std": v.std} for k, v in agg.items()},
    }
    rows = table_rows([(name, task, agg)])
    writers = {
        "json": lambda: _dump(payload),
        "csv": lambda: render_csv(rows, SUMMARY_COLUMNS),
        "md": lambda: render_markdown(rows, SUMMARY_COLUMNS),
    }
    for fmt in formats:
        _write(run_root / f"aggregate.{fmt}", writers[fmt]())
    return payload


# ---------------------------------------------------------------------------
# run


def execute(cfg: ExperimentConfig, root: Path, force: bool = False, jobs: int = 1) -> tuple[int, dict | None]:
    """Run every seed of ``cfg`` in order; returns (exit code, aggregate payload)."""
    run_root = root / cfg.config_hash
    run_root.mkdir(parents=True, exist_ok=True)
    _write(run_root / "config.json", _dump({"config": cfg.raw, "architecture": cfg.architecture.to_dict(),
                                            "training": cfg.training.to_dict(), "name": cfg.name,
                                            "task": cfg.task, "config_hash": cfg.config_hash}))
    seeds = list(cfg.training.seeds)
    jobs_args = [(cfg, s, run_root / str(s), force) for s in seeds]
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_seed_job, jobs_args))
    else:
        outcomes = [_run_seed_job(a) for a in jobs_args]
    for o in outcomes:
        extra = f" avg={o.report.annotator_average:.2f}" if o.report else f" ({o.message})"
        print(f"[{cfg.config_hash}] seed {o.seed}: {o.status}{extra}")
    done = [o.seed for o in outcomes if o.status != "failed"]
    payload = write_aggregate(run_root, cfg.name, cfg.task, cfg.formats, done) if done else None
    return (0 if len(done) == len(seeds) else 1), payload


def _parse_seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None


def _load_experiment(args, raw: dict | None = None, dataset=None) -> ExperimentConfig:
    path = Path(args.config)
    raw = read_config(path) if raw is None else raw
    cfg = resolve(raw, base_dir=path.parent, dataset=dataset)
    if args.seeds:
        cfg.training = replace(cfg.training, seeds=tuple(args.seeds))
    if args.format:
        cfg.formats = tuple(dict.fromkeys(args.format))
    return cfg


def cmd_run(args) -> int:
    cfg = _load_experiment(args)
    code, _ = execute(cfg, output_root(args.out, cfg.output), args.force, args.jobs)
    return code


# ---------------------------------------------------------------------------
# sweep


def sweep_cells(base: dict, axes: dict[str, list]) -> list[tuple[str, dict]]:
    """Cartesian product of axis values applied to ``base``; returns (label, raw config)."""
    for key in axes:
        check_axis(key)
        if not isinstance(axes[key], list):
            raise ConfigError(f"sweep axis {key!r} must be a list")
    keys = list(axes)
    cells = []
    for values in itertools.product(*(axes[k] for k in keys)):
        raw = copy.deepcopy(base)
        for k, v in zip(keys, values):
            set_path(raw, k, v)
        if "architecture.family" in axes:
            normalize_family(raw)
        label = ", ".join(f"{k.split('.')[-1]}={v}" for k, v in zip(keys, values)) or raw.get("name") or "base"
        cells.append((label, raw))
    return cells


def cmd_sweep(args) -> int:
    base = read_config(args.config)
    sweep = read_config(args.sweep)
    axes = sweep.get("axes", {})
    if not isinstance(axes, dict):
        raise ConfigError("sweep file needs an 'axes' object")
    cells = sweep_cells(base, axes)
    datasets: dict[str, object] = {}
    entries, code = [], 0
    root = None
    for label, raw in cells:
        key = canonical_json(raw["data"])
        if key not in datasets:
            datasets[key] = load_data(raw["data"], Path(args.config).parent)
        raw = {**raw, "name": label}
        cfg = _load_experiment(args, raw, datasets[key])
        root = output_root(args.out, cfg.output)
        cell_code, payload = execute(cfg, root, args.force, args.jobs)
        code = max(code, cell_code)
        if payload:
            entries.append((label, cfg.task, aggregate_runs(load_reports(root / cfg.config_hash, payload["seeds"]))))
    entries.sort(key=lambda e: -e[2]["annotator_average"].mean)
    rows = table_rows(entries)
    base_clean = {k: v for k, v in base.items() if k not in ("output", "formats")}
    base_clean.get("training", {}).pop("seeds", None)
    tag = hashlib.sha256(canonical_json({"base": base_clean, "axes": axes}).encode()).hexdigest()[:12]
    formats = tuple(dict.fromkeys(args.format)) if args.format else tuple(base.get("formats", FORMATS))
    if root is not None:
        out = {
            "json": lambda: _dump({"axes": axes, "rows": rows}),
            "csv": lambda: render_csv(rows, SUMMARY_COLUMNS),
            "md": lambda: render_markdown(rows, SUMMARY_COLUMNS),
        }
        for fmt in formats:
            _write(root / f"sweep-{tag}.{fmt}", out[fmt]())
    print(render_markdown(rows, SUMMARY_COLUMNS), end="")
    return code


# ---------------------------------------------------------------------------
# synth / inspect / report


def cmd_synth(args) -> int:
    raw = read_config(args.config)
    try:
        spec = SyntheticSpec.from_dict(raw.get("synthetic", raw))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid synthetic dataset parameters: {e}") from e
    dataset, oracle = generate_synthetic(spec, args.seed)
    out = Path(args.out or os.environ.get(ENV_OUT) or "synthetic")
    save_dataset(dataset, out)
    _write(out / "oracle.json", _dump({"seed": args.seed, **oracle.to_dict(dataset)}))
    counts = {s: len(dataset.split(s)) for s in ("train", "dev", "test")}
    print(f"wrote {sum(counts.values())} instances {counts} to {out}")
    return 0


def format_inspection(model, dataset, instance_id: str) -> str:
    inst = dataset.get(instance_id)
    probs = predict_all(model, inst.text, inst.text_pair)
    pred = np.argmax(probs, axis=1)
    gold = [str(inst.annotations[a]) if a in inst.annotations else "-" for a in dataset.meta.annotators]
    lines = [
        f"instance: {inst.id} ({inst.split})",
        f"text: {inst.text}" + (f" | {inst.text_pair}" if inst.text_pair else ""),
        f"annotators: {','.join(dataset.meta.annotators)}",
        f"gold: {','.join(gold)}",
        f"pred: {','.join(str(int(p)) for p in pred)}",
    ]
    return "\n".join(lines) + "\n"


def cmd_inspect(args) -> int:
    if args.data:
        dataset = load_dataset(args.data)
    elif args.config:
        path = Path(args.config)
        dataset = load_data(read_config(path)["data"], path.parent)
    else:
        raise ConfigError("inspect needs --data or --config")
    model, _ = load_model(Path(args.checkpoint).read_bytes())
    if model.spec.n_annotators != dataset.meta.n_annotators or model.spec.k != dataset.meta.k:
        raise ConfigError("checkpoint and dataset disagree on annotators or classes")
    sys.stdout.write(format_inspection(model, dataset, args.instance))
    return 0


def cmd_report(args) -> int:
    root = output_root(args.out, None)
    targets = [root] if (root / "config.json").exists() else sorted(p.parent for p in root.glob("*/config.json"))
    if not targets:
        raise ConfigError(f"no run directories under {root}")
    formats = tuple(dict.fromkeys(args.format)) if args.format else FORMATS
    for run_root in targets:
        info = json.loads((run_root / "config.json").read_text("utf-8"))
        payload = write_aggregate(run_root, info["name"], info["task"], formats)
        avg = payload["metrics"]["annotator_average"]
        print(f"[{run_root.name}] {info['name']}: {avg['mean']:.2f} ± {avg['std']:.2f} over {len(payload['seeds'])} seeds")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="perspectra", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seeds=True):
        sp.add_argument("--config", required=True, help="experiment config (JSON)")
        sp.add_argument("--out", help=f"output root (overrides ${ENV_OUT} and the config)")
        sp.add_argument("--format", action="append", choices=FORMATS, help="report format; repeatable")
        if seeds:
            sp.add_argument("--seeds", type=_parse_seeds, help="comma-separated seeds replacing the config list")
            sp.add_argument("--force", action="store_true", help="retrain seeds that already have checkpoints")
            sp.add_argument("--jobs", type=int, default=1, help="parallel seed jobs")

    common(sub.add_parser("run", help="train and evaluate every seed of one config"))
    sw = sub.add_parser("sweep", help="run the Cartesian product of sweep axes")
    common(sw)
    sw.add_argument("--sweep", required=True, help="sweep file with an 'axes' object of dotted keys")

    sy = sub.add_parser("synth", help="write a synthetic dataset and its oracle")
    sy.add_argument("--config", required=True, help="synthetic dataset parameters (JSON)")
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--out", help="dataset directory")

    ins = sub.add_parser("inspect", help="per-annotator predictions for one instance")
    ins.add_argument("--checkpoint", required=True)
    ins.add_argument("--data", help="dataset directory or JSONL file")
    ins.add_argument("--config", help="experiment config whose data section to use")
    ins.add_argument("--instance", required=True, help="instance id")

    rep = sub.add_parser("report", help="regenerate aggregate reports from per-seed reports on disk")
    rep.add_argument("--out", help="output root or a single <config-hash> directory")
    rep.add_argument("--format", action="append", choices=FORMATS)
    return p


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "synth": cmd_synth, "inspect": cmd_inspect, "report": cmd_report}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DatasetError, ckpt.CheckpointError, KeyError, OSError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
