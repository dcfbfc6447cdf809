"""Command-line entry point: ``stsens <command> --config PATH [--out DIR] [--seed N]``.

Every command writes into a fresh run directory ``<out>/<command>-<UTC>-<seed>``
holding its outputs and a ``manifest.json``.  Later commands find the inputs
of earlier ones (synthetic CSVs, prepared archive, checkpoint) either from the
config or as the newest matching run directory under ``--out``.
"""

from __future__ import annotations

import os

# cap BLAS threads before numpy is imported
if os.environ.get("STSENS_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["STSENS_THREADS"])

import argparse
import csv
import datetime as dt
import json
import logging
import platform
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from . import attention as attn
from . import morris as mr
from .config import ConfigError, RunConfig
from .data import PanelError, generate_synthetic, load_panel, to_date, write_panel_csvs
from .metrics import write_reports
from .model import CheckpointError, load_checkpoint, save_checkpoint
from .pipeline import analyse_attention, evaluate_split, load_prepared, prepare, save_prepared, train_model
from .train import grid_search

log = logging.getLogger("stsens")


class CommandError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# run directories


def _run_dir(out: Path, command: str, seed: int) -> Path:
    stamp = dt.datetime.now(dt.timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
    path = out / f"{command}-{stamp}-{seed}"
    path.mkdir(parents=True, exist_ok=False)
    return path


def _latest(out: Path, command: str, filename: str) -> Path | None:
    runs = sorted(p for p in out.glob(f"{command}-*") if (p / filename).exists())
    return runs[-1] / filename if runs else None


def _manifest(run: Path, command: str, cfg: RunConfig, inputs: dict, outputs: list[str]) -> None:
    manifest = {
        "command": command,
        "seed": cfg.seed,
        "config_file": cfg.source,
        "config": dict(sorted(cfg.raw.items())),
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": sorted(outputs),
        "versions": {"stsens": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "created_utc": dt.datetime.now(dt.timezone.utc).isoformat(),
    }
    (run / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _prepared_path(cfg: RunConfig, out: Path) -> Path:
    p = cfg.get("data.prepared")
    if p:
        return Path(p)
    found = _latest(out, "prepare", "prepared.npz")
    if found is None:
        raise CommandError(f"no prepared panel: set data.prepared or run 'prepare' with --out {out}")
    return found


def _checkpoint_path(cfg: RunConfig, out: Path, flag: str | None) -> Path:
    p = flag or cfg.get("model.checkpoint")
    if p:
        if not Path(p).exists():
            raise CommandError(f"checkpoint {p} not found")
        return Path(p)
    found = _latest(out, "train", "model.ckpt")
    if found is None:
        raise CommandError(f"no checkpoint: run 'train' first or pass --checkpoint (searched {out})")
    return found


def _load_prepared_for(cfg, out, args):
    path = _prepared_path(cfg, out)
    if not path.exists():
        raise CommandError(f"prepared panel {path} not found")
    prep = load_prepared(path)
    if args.split:
        prep.split_spec = cfg.split_spec(prep.raw.dates, args.split)
    return prep, path


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig, args, run: Path):
    panel = generate_synthetic(cfg.synth_config())
    paths = write_panel_csvs(panel, run)
    return {}, [str(p.relative_to(run)) for p in paths.values()]


def cmd_prepare(cfg: RunConfig, args, run: Path):
    out = Path(args.out)
    keys = ("data.static", "data.dynamic", "data.targets")
    if all(cfg.get(k) for k in keys):
        static, dynamic, targets = (cfg.get(k) for k in keys)
    else:
        found = _latest(out, "synth", "static.csv")
        if found is None:
            raise CommandError("set data.static/data.dynamic/data.targets or run 'synth' first")
        static, dynamic, targets = found, found.parent / "dynamic", found.parent / "targets"
    for p in (static, dynamic, targets):
        if not Path(p).exists():
            raise CommandError(f"input {p} does not exist")
    rng = (cfg.get("data.start"), cfg.get("data.end")) if cfg.get("data.start") else None
    panel = load_panel(static, dynamic, targets, rng)
    spec = cfg.split_spec(panel.dates, args.split)
    prep = prepare(
        panel,
        spec,
        multiplier=cfg.get("clean.multiplier", 7.5),
        window_spec=cfg.window_spec(),
        clean=cfg.get("clean.enabled", True),
    )
    save_prepared(prep, run / "prepared.npz")
    outputs = ["prepared.npz"]
    if prep.clean_report is not None:
        rows = prep.clean_report.rows()
        _write_csv(run / "clean_report.csv", list(rows[0]), [list(r.values()) for r in rows])
        outputs.append("clean_report.csv")
    return {"static": static, "dynamic": dynamic, "targets": targets}, outputs


def cmd_train(cfg: RunConfig, args, run: Path):
    prep, ppath = _load_prepared_for(cfg, Path(args.out), args)
    params, mc, report = train_model(prep, cfg.model_kwargs(), cfg.train_config())
    save_checkpoint(params, mc, prep.scaler, run / "model.ckpt")
    _write_csv(run / "train_log.csv", ["epoch", "train_loss", "val_loss", "seconds"], report.log_rows())
    summary = {
        "best_epoch": report.best_epoch,
        "best_val_loss": report.best_val_loss,
        "train_loss_at_best": report.train_loss[report.best_epoch],
        "epochs_run": len(report.train_loss),
        "wall_time_seconds": report.wall_time,
    }
    (run / "train_report.json").write_text(json.dumps(summary, indent=2) + "\n")
    return {"prepared": ppath}, ["model.ckpt", "train_log.csv", "train_report.json"]


def cmd_evaluate(cfg: RunConfig, args, run: Path):
    out = Path(args.out)
    ckpt = _checkpoint_path(cfg, out, args.checkpoint)
    params, mc, scaler = load_checkpoint(ckpt)
    prep, ppath = _load_prepared_for(cfg, out, args)
    _, _, test = prep.windows()
    tft, base = evaluate_split(params, mc, scaler, test)
    write_reports([tft, base], run)
    return {"checkpoint": ckpt, "prepared": ppath}, ["metrics.json", "metrics.csv"]


def _holidays() -> list[tuple[str, str]]:
    text = resources.files("stsens").joinpath("holidays.txt").read_text()
    rows = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            d, name = line.split(",", 1)
            rows.append((d.strip(), name.strip()))
    return rows


def cmd_attention(cfg: RunConfig, args, run: Path):
    out = Path(args.out)
    ckpt = _checkpoint_path(cfg, out, args.checkpoint)
    params, mc, _ = load_checkpoint(ckpt)
    prep, ppath = _load_prepared_for(cfg, out, args)
    train_w, _, _ = prep.windows()
    target = cfg.get("attention.target", mc.target_names[0])
    a = analyse_attention(params, mc, train_w, prep.raw, mc.target_names.index(target))
    attn.write_all(run, a.mean, a.profile, a.daily, a.importance)
    lo, hi = a.daily[0][0], a.daily[0][-1]
    hol = [(d, n) for d, n in _holidays() if lo <= to_date(d) <= hi]
    _write_csv(run / "holidays.csv", ["date", "holiday"], hol)
    outputs = ["attention_mean.csv", "lag_profile.csv", "daily_attention.csv", "importance.csv", "holidays.csv"]
    return {"checkpoint": ckpt, "prepared": ppath}, outputs


def cmd_morris(cfg: RunConfig, args, run: Path):
    out = Path(args.out)
    ckpt = _checkpoint_path(cfg, out, args.checkpoint)
    params, mc, scaler = load_checkpoint(ckpt)
    prep, ppath = _load_prepared_for(cfg, out, args)
    features = args.feature or cfg.get("morris.features") or (prep.raw.static_names + prep.raw.dynamic_names)
    deltas = args.delta or cfg.get("morris.deltas") or [0.005]
    target = cfg.get("morris.target", mc.target_names[0])
    if cfg.get("morris.start"):
        rng = (cfg.get("morris.start"), cfg.get("morris.end"))
    else:
        rng = prep.split_spec.train
    model = mr.one_step_model(params, mc, target, date_range=rng)
    base = model(prep.scaled)
    results = []
    for f in features:
        if f not in scaler.names:
            raise CommandError(f"feature {f!r} not available for sensitivity (choose from {scaler.names})")
        sigma = float(scaler.std[scaler.index(f)])
        results.append(mr.delta_sweep(model, prep.scaled, f, deltas, sigma, base))
    mr.write_csv(results, run / "morris.csv")
    return {"checkpoint": ckpt, "prepared": ppath}, ["morris.csv"]


def cmd_grid(cfg: RunConfig, args, run: Path):
    from .model import ModelConfig
    from .train import DEFAULT_GRID

    prep, ppath = _load_prepared_for(cfg, Path(args.out), args)
    tr, va, _ = prep.windows()
    grid = cfg.grid() or DEFAULT_GRID
    base_model = ModelConfig.from_batch(tr, **cfg.model_kwargs())
    result = grid_search(grid, tr, va, base_model, cfg.train_config())
    keys = list(grid)
    _write_csv(
        run / "grid_report.csv",
        keys + ["val_loss", "train_loss", "best_epoch", "error"],
        [[r.get(k) for k in keys] + [r.get("val_loss"), r.get("train_loss"), r.get("best_epoch"), r.get("error", "")] for r in result.rows],
    )
    best = {"index": result.best_index, **{k: result.rows[result.best_index][k] for k in keys}}
    (run / "grid_best.json").write_text(json.dumps(best, indent=2) + "\n")
    return {"prepared": ppath}, ["grid_report.csv", "grid_best.json"]


def cmd_subgroup(cfg: RunConfig, args, run: Path):
    prep, ppath = _load_prepared_for(cfg, Path(args.out), args)
    columns = cfg.get("subgroup.columns") or prep.raw.static_names
    shared = cfg.get("subgroup.shared")
    if not shared:
        raise CommandError("subgroup.shared (the shared dynamic feature) is required")
    deltas = args.delta or cfg.get("morris.deltas") or [0.005]
    rows = mr.subgroup_experiment(
        prep.raw,
        columns,
        shared,
        prep.split_spec,
        cfg.model_kwargs(),
        cfg.train_config(),
        deltas=deltas,
        report_delta=deltas[0],
        target=cfg.get("morris.target", prep.raw.target_names[0]),
        window_spec=prep.window_spec,
    )
    mr.write_subgroup_csv(rows, shared, deltas[0], run / "subgroup.csv")
    return {"prepared": ppath}, ["subgroup.csv"]


COMMANDS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "attention": cmd_attention,
    "morris": cmd_morris,
    "grid": cmd_grid,
    "subgroup": cmd_subgroup,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stsens", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--seed", type=int, help="overrides the config seed")
    parser.add_argument("--out", default="runs", help="base directory for run directories")
    parser.add_argument("--delta", type=lambda s: [float(x) for x in s.split(",")], help="comma-separated deltas (morris)")
    parser.add_argument("--feature", action="append", help="feature to perturb (morris); repeatable")
    parser.add_argument("--split", choices=["primary", "custom"], help="split definition")
    parser.add_argument("--checkpoint", help="checkpoint path (defaults to newest train run)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg.override("seed", str(args.seed))
        if args.split:
            cfg.override("split.kind", args.split)
        out = Path(args.out)
        run = _run_dir(out, args.command, cfg.seed)
        try:
            inputs, outputs = COMMANDS[args.command](cfg, args, run)
        except BaseException:
            # leave no half-written run directory behind
            for p in sorted(run.rglob("*"), reverse=True):
                p.unlink() if p.is_file() else p.rmdir()
            run.rmdir()
            raise
        _manifest(run, args.command, cfg, inputs, outputs)
    except (ConfigError, CommandError, PanelError, CheckpointError, KeyError, ValueError) as exc:
        print(f"stsens {args.command}: error: {exc}", file=sys.stderr)
        return 2
    print(run)
    return 0


if __name__ == "__main__":
    sys.exit(main())
