"""Drive the batch command line end to end from Python.

Simulates a panel, writes a config file, runs the fit subcommand, and shows
the produced tables.  Everything lands in ./demo-output (safe to delete).

Run:  python3 demos/cli_workflow.py
"""

import json
from pathlib import Path

from mqmix.cli import main

ROOT = Path("demo-output")


def run(argv):
    print("$ mqmix " + " ".join(argv))
    code = main(argv)
    print(f"(exit code {code})\n")
    assert code == 0


def show(path, max_lines=12):
    print(f"--- {path} ---")
    lines = path.read_text(encoding="utf-8").splitlines()
    for line in lines[:max_lines]:
        print(line)
    if len(lines) > max_lines:
        print(f"... ({len(lines) - max_lines} more lines)")
    print()


def main_demo():
    ROOT.mkdir(exist_ok=True)

    sim_cfg = ROOT / "simulate.json"
    sim_cfg.write_text(json.dumps({
        "seed": 12,
        "scenario": {
            "n": 200, "t": 3, "h": 1, "k": 2,
            "beta": [[0.5, 1.0, -0.7, 0.4]],
            "zeta": [[-2.0], [2.0]],
            "pi": [0.5, 0.5],
            "sigma": [1.0],
        },
    }, indent=2), encoding="utf-8")
    run(["simulate", "--config", str(sim_cfg), "--out", str(ROOT / "data")])

    fit_cfg = ROOT / "fit.json"
    fit_cfg.write_text(json.dumps({
        "data": str(ROOT / "data" / "panel.csv"),
        "roles": {
            "x_occ": "fixed",
            "x_end": "decomposed",
            "x_exo": "decomposed",
            "x_bin": "time_constant",
        },
        "q": [0.5, 0.75],
        "k_min": 1,
        "k_max": 3,
        "d": 2,
        "seed": 12,
    }, indent=2), encoding="utf-8")
    run(["fit", "--config", str(fit_cfg), "--out", str(ROOT / "results")])

    run(["summarize", "--data", str(ROOT / "data" / "panel.csv"),
         "--out", str(ROOT / "summary")])

    for name in ("selection_q0.5.csv", "coefficients_q0.5.csv", "mixing_q0.5.csv",
                 "manifest.json"):
        show(ROOT / "results" / name)


if __name__ == "__main__":
    main_demo()
