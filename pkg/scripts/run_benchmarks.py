"""Run a config under several modes and seeds, then summarise with `compare`.

    python scripts/run_benchmarks.py configs/synth8.json --modes base ghost ghost-svm ghost-real \
        --seeds 1 2 3 --out runs/synth8
"""
import argparse
import json
import tempfile
from pathlib import Path

from ghostcl.cli import cmd_compare, cmd_run, format_table


def run_grid(config_path, modes, seeds, out_root, timing=False):
    raw = json.loads(Path(config_path).read_text())
    out_root = Path(out_root)
    dirs = []
    with tempfile.TemporaryDirectory() as tmp:
        for mode in modes:
            cfg = Path(tmp) / f"{mode}.json"
            cfg.write_text(json.dumps({**raw, "mode": mode}))
            for seed in seeds if mode != "joint-oracle" else seeds[:1]:
                rd = out_root / f"{mode}-s{seed}"
                rec = cmd_run(cfg, seed, rd, timing=timing)
                m = rec["metrics"]
                print(f"{mode:<12} seed {seed}: " + " ".join(f"{r.acc_all:.3f}" for r in m.reports)
                      + f"  continual {m.continual:.3f}", flush=True)
                dirs.append(rd)
    return dirs


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("config")
    ap.add_argument("--modes", nargs="+", default=["base", "ghost", "ghost-svm", "ghost-real"])
    ap.add_argument("--seeds", nargs="+", type=int, default=[1, 2, 3])
    ap.add_argument("--out", required=True)
    ap.add_argument("--timing", action="store_true")
    args = ap.parse_args()
    dirs = run_grid(args.config, args.modes, args.seeds, args.out, args.timing)
    if len(dirs) >= 2:
        print(format_table(cmd_compare(dirs, Path(args.out) / "compare.csv")), end="")


if __name__ == "__main__":
    main()
