"""Command-line entry point: ``python -m ghostcl {run,plot,compare,eval}``."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, config_from_dict, load_config
from .engine import evaluate, prepare_data, run_experiment
from .model import UNSEEN, load_model
from .plot import latent_svg

HEADER = ["task", "mode", "seed", "acc_all", "acc_seen", "acc_unseen", "continual_acc_so_far", "wallclock_s"]
log = logging.getLogger("ghostcl")


class UsageError(Exception):
    """Bad input that should exit with status 2."""


def _fmt(x) -> str:
    return "" if x is None else f"{x:.6f}"


def metrics_csv(metrics, timing: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    accs = []
    for r in metrics.reports:
        accs.append(r.acc_all)
        w.writerow([r.task, metrics.mode, metrics.seed, _fmt(r.acc_all), _fmt(r.acc_seen),
                    _fmt(r.acc_unseen), _fmt(float(np.mean(accs))),
                    f"{r.wallclock_s:.3f}" if timing else ""])
    return buf.getvalue()


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise UsageError(f"{path}: no rows")
    return rows


def _load_run(run_dir):
    run_dir = Path(run_dir)
    snap = run_dir / "config.json"
    if not snap.exists():
        raise UsageError(f"{run_dir}: no config.json (not a run directory?)")
    return config_from_dict(json.loads(snap.read_text()))


def _checkpoint_path(run_dir, task):
    ckdir = Path(run_dir) / "checkpoints"
    if task is None:
        found = sorted(ckdir.glob("task*.ckpt"), key=lambda p: int(p.stem[4:]))
        if not found:
            raise UsageError(f"{ckdir}: no checkpoints")
        return found[-1]
    path = ckdir / f"task{task}.ckpt"
    if not path.exists():
        raise UsageError(f"{path}: no checkpoint for task {task}")
    return path


# ----------------------------------------------------------------- commands
def cmd_run(config_path, seed, out_dir, timing: bool = False) -> dict:
    config = load_config(config_path, seed=seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(config.dumps())
    metrics = run_experiment(config, checkpoint_dir=out / "checkpoints")
    (out / "metrics.csv").write_text(metrics_csv(metrics, timing))
    (out / "timing.json").write_text(json.dumps({"wallclock_s": metrics.wallclock}) + "\n")
    checkpoints = sorted(str(p) for p in (out / "checkpoints").glob("*.ckpt"))
    return {"out": str(out), "config": config.to_dict(), "metrics": metrics, "checkpoints": checkpoints}


def cmd_plot(run_dir, task, out_path, per_class: int = 150) -> Path:
    config = _load_run(run_dir)
    extractor, bank, header = load_model(_checkpoint_path(run_dir, task))
    if extractor.out_dim != 2:
        raise UsageError(f"latent dimension is {extractor.out_dim}; plots need 2")
    test = prepare_data(config).test
    keep = np.concatenate([np.flatnonzero(test.labels == c)[:per_class] for c in test.classes])
    feats = extractor.features(test.samples[keep])
    unseen = [bank.status.get(c) == UNSEEN for c in bank.class_ids]
    title = f"{config.mode} seed {config.seed} task {header['task']}"
    svg = latent_svg(feats, test.labels[keep], bank.theta.data, bank.class_ids, unseen, title=title)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(svg)
    return out_path


def _scenario_key(config) -> tuple:
    d = config.dataset
    source = d.path if d.kind == "mnist" else (d.num_classes, d.attr_dim, d.input_dim, d.noise_scale)
    return d.kind, source, d.data_seed, config.scenario.split, tuple(config.scenario.order or ())


def summarize(records) -> list[dict]:
    """records: (mode, continual, final) triples -> per-mode mean and population std."""
    groups: dict[str, list[tuple[float, float]]] = {}
    for mode, cont, final in records:
        groups.setdefault(mode, []).append((cont, final))
    rows = []
    for mode in sorted(groups):
        arr = np.array(groups[mode])
        rows.append({"mode": mode, "runs": len(arr),
                     "continual_mean": float(arr[:, 0].mean()), "continual_std": float(arr[:, 0].std()),
                     "final_mean": float(arr[:, 1].mean()), "final_std": float(arr[:, 1].std())})
    return rows


def cmd_compare(run_dirs, out_path) -> list[dict]:
    if len(run_dirs) < 2:
        raise UsageError("compare needs at least two run directories")
    records, keys = [], set()
    for rd in run_dirs:
        config = _load_run(rd)
        if config.mode != "joint-oracle":
            keys.add(_scenario_key(config))
        rows = read_metrics(Path(rd) / "metrics.csv")
        records.append((config.mode, float(rows[-1]["continual_acc_so_far"]), float(rows[-1]["acc_all"])))
    if len(keys) > 1:
        raise UsageError("runs use incompatible scenarios")
    table = summarize(records)
    cols = ["mode", "runs", "continual_mean", "continual_std", "final_mean", "final_std"]
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in table:
            w.writerow([r["mode"], r["runs"]] + [f"{r[c]:.6f}" for c in cols[2:]])
    out_path.with_suffix(".txt").write_text(format_table(table))
    return table


def format_table(table) -> str:
    lines = [f"{'mode':<14}{'runs':>5}  {'continual':>17}  {'final':>17}"]
    for r in table:
        cont = f"{100 * r['continual_mean']:.2f} ± {100 * r['continual_std']:.2f}"
        fin = f"{100 * r['final_mean']:.2f} ± {100 * r['final_std']:.2f}"
        lines.append(f"{r['mode']:<14}{r['runs']:>5}  {cont:>17}  {fin:>17}")
    return "\n".join(lines) + "\n"


def cmd_eval(run_dir, task=None) -> dict:
    config = _load_run(run_dir)
    path = _checkpoint_path(run_dir, task)
    extractor, bank, header = load_model(path)
    seen = [c for c in bank.class_ids if bank.status.get(c) != UNSEEN]
    rep = evaluate(extractor, bank, prepare_data(config).test, seen, task=header["task"])
    return {"task": rep.task, "acc_all": rep.acc_all, "acc_seen": rep.acc_seen,
            "acc_unseen": rep.acc_unseen, "per_class": rep.per_class}


# --------------------------------------------------------------------- main
def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ghostcl")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--timing", action="store_true", help="fill wallclock_s in metrics.csv")

    p = sub.add_parser("plot", help="SVG of the 2-D latent space at a task")
    p.add_argument("run_dir")
    p.add_argument("--task", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("compare", help="per-mode mean and std over runs")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="re-evaluate a checkpoint on the test set")
    p.add_argument("run_dir")
    p.add_argument("--task", type=int)
    p.add_argument("--out")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "run":
            rec = cmd_run(args.config, args.seed, args.out, timing=args.timing)
            m = rec["metrics"]
            print(f"{m.mode} seed {m.seed}: final {m.final:.4f} continual {m.continual:.4f} -> {rec['out']}")
        elif args.command == "plot":
            print(cmd_plot(args.run_dir, args.task, args.out))
        elif args.command == "compare":
            print(format_table(cmd_compare(args.run_dirs, args.out)), end="")
        else:
            result = cmd_eval(args.run_dir, args.task)
            text = json.dumps(result, indent=2)
            if args.out:
                Path(args.out).write_text(text + "\n")
            print(text)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to status 1
        log.debug("run failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
