"""Batch command-line front end.

Subcommands: fit (per-level sweep and report tables), simulate (write one
synthetic panel plus its truth record), coverage (replicated interval-coverage
study), summarize (dataset description).  All options live in a JSON config
file and every scalar option can be overridden by a flag.  Each run writes a
manifest sufficient to reproduce the outputs; repeated runs with the same seed
produce identical tables for any worker count.

Exit codes: 0 success, 2 configuration problem, 3 data problem, 4 numerical
failure, 5 no admissible model.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .design import CovariateRole, build_design
from .em import EmControls
from .errors import (
    ConfigError,
    DataError,
    DomainError,
    MqmixError,
    NoAdmissibleModelError,
    NumericalError,
)
from .inference import sandwich
from .loss import LossConfig
from .panel import ColumnSchema, PanelDataset, load_csv, summarize, write_csv
from .selection import sweep
from .simulate import SimScenario, generate, write_truth
from .studies import pmap, run_coverage

__all__ = ["RunConfig", "main"]

_CONFIG_KEYS = {
    "data", "columns", "covariates", "roles", "mundlak", "q", "k_min", "k_max",
    "c", "em", "d", "seed", "workers", "out", "criterion", "replicates",
    "scenario",
}


@dataclass
class RunConfig:
    data: str | None = None
    columns: dict = field(default_factory=dict)
    covariates: list | None = None
    roles: dict | None = None
    mundlak: bool = True
    q: tuple = (0.5,)
    k_min: int = 1
    k_max: int = 3
    c: float = 1.345
    em: EmControls = field(default_factory=EmControls)
    d: int = 3
    seed: int = 0
    workers: int = 1
    out: str = "mqmix-out"
    criterion: str = "bic"
    replicates: int = 2
    scenario: dict = field(default_factory=dict)

    def echo(self) -> dict:
        """Config as written to the manifest.  Worker count and output
        location are execution details, not inputs to the numbers; the
        former is echoed separately and the latter is the manifest's own
        directory."""
        em = self.em
        return {
            "data": self.data,
            "columns": dict(self.columns),
            "covariates": list(self.covariates) if self.covariates is not None else None,
            "roles": dict(self.roles) if self.roles is not None else None,
            "mundlak": self.mundlak,
            "q": list(self.q),
            "k_min": self.k_min,
            "k_max": self.k_max,
            "c": self.c,
            "em": {
                "epsilon": em.epsilon,
                "max_iter": em.max_iter,
                "min_mass": em.min_mass,
                "criterion": em.criterion,
            },
            "d": self.d,
            "seed": self.seed,
            "criterion": self.criterion,
            "replicates": self.replicates,
            "scenario": dict(self.scenario),
        }


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mqmix",
        description="Finite mixtures of M-quantile regressions for longitudinal data",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, doc in (
        ("fit", "fit the model at each level and write report tables"),
        ("simulate", "write a synthetic panel and its truth record"),
        ("coverage", "replicated Wald-interval coverage study"),
        ("summarize", "describe a panel dataset"),
    ):
        sp = sub.add_parser(name, help=doc)
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--data", help="panel CSV path")
        sp.add_argument("--q", help="comma-separated levels in (0,1)")
        sp.add_argument("--k-min", type=int, dest="k_min")
        sp.add_argument("--k-max", type=int, dest="k_max")
        sp.add_argument("--c", type=float, help="loss tuning constant")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int)
        sp.add_argument("--d", type=int, help="extra starts per added component")
        sp.add_argument("--replicates", type=int)
        sp.add_argument("--out", help="output directory")
    return parser


def _load_config_file(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    unknown = set(raw) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return raw


def resolve_config(args: argparse.Namespace) -> RunConfig:
    raw = _load_config_file(args.config) if args.config else {}

    em_spec = raw.get("em", {})
    if not isinstance(em_spec, dict):
        raise ConfigError("'em' must be an object of EM control settings")
    try:
        em = EmControls(**em_spec)
    except TypeError as exc:
        raise ConfigError(f"bad EM controls: {exc}") from exc

    cfg = RunConfig(
        data=raw.get("data"),
        columns=raw.get("columns", {}),
        covariates=raw.get("covariates"),
        roles=raw.get("roles"),
        mundlak=bool(raw.get("mundlak", True)),
        q=tuple(raw.get("q", [0.5])),
        k_min=int(raw.get("k_min", 1)),
        k_max=int(raw.get("k_max", 3)),
        c=float(raw.get("c", 1.345)),
        em=em,
        d=int(raw.get("d", 3)),
        seed=int(raw.get("seed", 0)),
        workers=int(raw.get("workers", 1)),
        out=str(raw.get("out", "mqmix-out")),
        criterion=str(raw.get("criterion", "bic")),
        replicates=int(raw.get("replicates", 2)),
        scenario=raw.get("scenario", {}),
    )

    if args.data is not None:
        cfg.data = args.data
    if args.q is not None:
        try:
            cfg.q = tuple(float(tok) for tok in args.q.split(",") if tok.strip())
        except ValueError as exc:
            raise ConfigError(f"--q must be comma-separated numbers: {args.q!r}") from exc
    if args.k_min is not None:
        cfg.k_min = args.k_min
    if args.k_max is not None:
        cfg.k_max = args.k_max
    if args.c is not None:
        cfg.c = args.c
    if args.seed is not None:
        cfg.seed = args.seed
    if args.workers is not None:
        cfg.workers = args.workers
    if args.d is not None:
        cfg.d = args.d
    if args.replicates is not None:
        cfg.replicates = args.replicates
    if args.out is not None:
        cfg.out = args.out

    if not cfg.q:
        raise ConfigError("at least one level q is required")
    for q in cfg.q:
        if not 0.0 < q < 1.0:
            raise ConfigError(f"levels must lie in (0,1), got {q}")
    if len(set(cfg.q)) != len(cfg.q):
        raise ConfigError("levels must be distinct")
    if cfg.k_min < 1 or cfg.k_max < cfg.k_min:
        raise ConfigError(f"need 1 <= k_min <= k_max, got [{cfg.k_min}, {cfg.k_max}]")
    if cfg.c <= 0:
        raise ConfigError("c must be positive")
    if cfg.d < 1:
        raise ConfigError("d must be at least 1")
    if cfg.workers < 1:
        raise ConfigError("workers must be at least 1")
    if cfg.criterion not in ("bic", "aic"):
        raise ConfigError("criterion must be 'bic' or 'aic'")
    return cfg


def _schema(cfg: RunConfig) -> ColumnSchema:
    cols = cfg.columns
    return ColumnSchema(
        unit=cols.get("unit", "unit"),
        occasion=cols.get("occasion", "occasion"),
        outcome=cols.get("outcome", "outcome"),
        response=cols.get("response", "y"),
        covariates=tuple(cfg.covariates) if cfg.covariates is not None else None,
    )


def _load_data(cfg: RunConfig) -> PanelDataset:
    if not cfg.data:
        raise ConfigError("a data path is required (config 'data' or --data)")
    try:
        return load_csv(cfg.data, _schema(cfg))
    except FileNotFoundError as exc:
        raise ConfigError(f"data file not found: {cfg.data}") from exc


def infer_roles(data: PanelDataset) -> list[CovariateRole]:
    """Covariates constant within every unit become time-constant terms;
    all others are decomposed into within and between columns."""
    roles = []
    for j, name in enumerate(data.covariate_names):
        col = data.X[:, j]
        constant = True
        for i in range(data.n_units):
            vals = col[data.unit_idx == i]
            if vals.size and np.ptp(vals) > 0.0:
                constant = False
                break
        roles.append(CovariateRole(name, "time_constant" if constant else "decomposed"))
    return roles


def _roles_for(cfg: RunConfig, data: PanelDataset) -> list[CovariateRole]:
    if cfg.roles is None:
        return infer_roles(data)
    try:
        return [CovariateRole(name, str(role)) for name, role in cfg.roles.items()]
    except DomainError as exc:
        raise ConfigError(str(exc)) from exc


def _fmt_q(q: float) -> str:
    return f"{q:g}"


# ------------------------------------------------------------ fit command

def _fit_level_task(arg):
    data, roles, mundlak, q, c, em, k_range, d, seed, criterion = arg
    loss = LossConfig(q=q, c=c)
    bundle = build_design(data, roles, mundlak=mundlak)
    report, fit = sweep(data, bundle, loss, k_range, controls=em, d=d, seed=seed,
                        criterion=criterion)
    est = sandwich(fit, data, bundle)
    return _render_level(q, data, bundle, report, fit, est)


def _render_level(q, data, bundle, report, fit, est):
    tag = _fmt_q(q)
    h_count = bundle.n_outcomes
    p = bundle.n_columns
    k = fit.k

    coef_lines = ["outcome,term,estimate,se"]
    for h in range(h_count):
        out = bundle.outcome_names[h]
        for j, term in enumerate(bundle.labels):
            coef_lines.append(
                f"{out},{term},{fit.beta[h, j]:.3f},{est.se[h * p + j]:.3f}"
            )
        sig_pos = h_count * p + k * h_count + h
        coef_lines.append(f"{out},sigma,{fit.sigma[h]:.3f},{est.se[sig_pos]:.3f}")

    head = ["component", "pi", "pi_se"]
    for out in bundle.outcome_names:
        head.extend([f"zeta_{out}", f"se_zeta_{out}"])
    mix_lines = [",".join(head)]
    for comp in range(k):
        cells = [str(comp + 1), f"{fit.pi[comp]:.3f}", f"{est.pi_se[comp]:.3f}"]
        for h in range(h_count):
            z_pos = h_count * p + comp * h_count + h
            cells.extend([f"{fit.zeta[comp, h]:.3f}", f"{est.se[z_pos]:.3f}"])
        mix_lines.append(",".join(cells))

    cls_lines = ["unit,component,probability"]
    map_comp = fit.map_components()
    for i, unit in enumerate(data.unit_ids):
        prob = fit.responsibilities[i, map_comp[i]]
        cls_lines.append(f"{unit},{map_comp[i] + 1},{prob:.6f}")

    summary = [
        f"level q = {tag} (c = {fit.c:g})",
        report.format_table().rstrip("\n"),
        f"chosen K = {report.chosen_k}, loglik = {fit.loglik:.3f}, "
        f"iterations = {fit.iterations}, start = {fit.seed}",
        "",
        "coefficients (estimate / se):",
    ]
    for h in range(h_count):
        out = bundle.outcome_names[h]
        for j, term in enumerate(bundle.labels):
            summary.append(
                f"  {out:>10} {term:>18} {fit.beta[h, j]:>10.3f} {est.se[h * p + j]:>8.3f}"
            )
        sig_pos = h_count * p + k * h_count + h
        summary.append(
            f"  {out:>10} {'sigma':>18} {fit.sigma[h]:>10.3f} {est.se[sig_pos]:>8.3f}"
        )
    summary.append("")
    summary.append("mixing distribution:")
    for comp in range(k):
        zvals = ", ".join(
            f"{bundle.outcome_names[h]}: {fit.zeta[comp, h]:.3f}" for h in range(h_count)
        )
        summary.append(f"  component {comp + 1}: pi = {fit.pi[comp]:.3f} ({zvals})")

    return {
        "q": tag,
        f"coefficients_q{tag}.csv": "\n".join(coef_lines) + "\n",
        f"mixing_q{tag}.csv": "\n".join(mix_lines) + "\n",
        f"selection_q{tag}.csv": report.to_csv_text(),
        f"classification_q{tag}.csv": "\n".join(cls_lines) + "\n",
        "summary": "\n".join(summary) + "\n",
    }


def run_fit(cfg: RunConfig, out_dir) -> list[str]:
    data = _load_data(cfg)
    roles = _roles_for(cfg, data)
    k_range = range(cfg.k_min, cfg.k_max + 1)
    tasks = [
        (data, roles, cfg.mundlak, q, cfg.c, cfg.em, k_range, cfg.d, cfg.seed,
         cfg.criterion)
        for q in cfg.q
    ]
    rendered = pmap(_fit_level_task, tasks, cfg.workers)

    written = []
    summaries = []
    for block in rendered:
        summaries.append(block.pop("summary"))
        block.pop("q")
        for name, text in block.items():
            (out_dir / name).write_text(text, encoding="utf-8")
            written.append(name)
    (out_dir / "summary.txt").write_text(
        ("\n" + "=" * 70 + "\n\n").join(summaries), encoding="utf-8"
    )
    written.append("summary.txt")
    return written


# ------------------------------------------------------- simulate command

def run_simulate(cfg: RunConfig, out_dir) -> list[str]:
    overrides = dict(cfg.scenario)
    if "seed" in overrides:
        raise ConfigError("set the seed at top level, not inside 'scenario'")
    overrides["seed"] = cfg.seed
    try:
        scenario = SimScenario(**{k: _listify(v) for k, v in overrides.items()})
    except TypeError as exc:
        raise ConfigError(f"bad scenario: {exc}") from exc
    data, truth = generate(scenario)
    write_csv(data, out_dir / "panel.csv")
    write_truth(truth, out_dir / "truth.json")
    return ["panel.csv", "truth.json"]


def _listify(value):
    if isinstance(value, list):
        return tuple(_listify(v) for v in value)
    return value


# ------------------------------------------------------- coverage command

def run_coverage_study(cfg: RunConfig, out_dir) -> list[str]:
    if cfg.replicates < 2:
        raise ConfigError("coverage needs at least 2 replicates")
    n = int(cfg.scenario.get("n", 500))
    written = []
    for q in cfg.q:
        result = run_coverage(cfg.replicates, seed=cfg.seed, d=cfg.d,
                              workers=cfg.workers, q=q, n=n)
        lines = ["label,outcome,coverage,bias,rmse,replicates"]
        for label in sorted(result["coverage"]):
            cov = result["coverage"][label]
            err = result["coef_err"][label]
            for h in range(err.shape[1]):
                bias = float(err[:, h].mean())
                rmse = float(np.sqrt(np.mean(err[:, h] ** 2)))
                lines.append(
                    f"{label},{h + 1},{cov[h]:.4f},{bias:.6f},{rmse:.6f},{result['n_ok']}"
                )
        name = f"coverage_q{_fmt_q(q)}.csv"
        (out_dir / name).write_text("\n".join(lines) + "\n", encoding="utf-8")
        written.append(name)

        rep_lines = ["replicate,status,detail"]
        for r, status in enumerate(result["status"]):
            if status == "ok":
                rep_lines.append(f"{r + 1},ok,")
            else:
                rep_lines.append(f"{r + 1},failed,{status.replace(',', ';')}")
        rep_name = f"replicates_q{_fmt_q(q)}.csv"
        (out_dir / rep_name).write_text("\n".join(rep_lines) + "\n", encoding="utf-8")
        written.append(rep_name)
    return written


# ------------------------------------------------------ summarize command

def _render_summary(data: PanelDataset) -> str:
    s = summarize(data)
    lines = [
        f"units: {s.n_units}",
        f"rows: {s.n_rows}",
        f"outcomes ({s.n_outcomes}): {', '.join(s.outcome_names)}",
        f"covariates ({s.n_covariates}): {', '.join(s.covariate_names)}",
        "occasions per unit: "
        + ", ".join(f"{t}: {c}" for t, c in sorted(s.t_distribution.items())),
        f"complete fraction: {s.complete_fraction:.3f}",
        "response by outcome:",
    ]
    for name in s.outcome_names:
        st = s.response_stats[name]
        lines.append(
            f"  {name}: n={st['n']:.0f} mean={st['mean']:.3f} sd={st['sd']:.3f} "
            f"min={st['min']:.3f} q25={st['q25']:.3f} median={st['median']:.3f} "
            f"q75={st['q75']:.3f} max={st['max']:.3f}"
        )
    return "\n".join(lines) + "\n"


def run_summarize(cfg: RunConfig, out_dir) -> list[str]:
    data = _load_data(cfg)
    text = _render_summary(data)
    (out_dir / "summary.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return ["summary.txt"]


# ---------------------------------------------------------------- driver

def _write_manifest(out_dir, command, cfg, written, elapsed):
    manifest = {
        "command": command,
        "config": cfg.echo(),
        "seed": cfg.seed,
        "versions": {
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "mqmix": __version__,
        },
        "outputs": sorted(written),
        "workers": cfg.workers,
        "timing_seconds": round(elapsed, 3),
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        out_dir = Path(cfg.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        start = time.monotonic()
        if args.command == "fit":
            written = run_fit(cfg, out_dir)
        elif args.command == "simulate":
            written = run_simulate(cfg, out_dir)
        elif args.command == "coverage":
            written = run_coverage_study(cfg, out_dir)
        else:
            written = run_summarize(cfg, out_dir)
        _write_manifest(out_dir, args.command, cfg, written, time.monotonic() - start)
        return 0
    except (ConfigError, DomainError) as exc:
        return _fail(exc, 2)
    except DataError as exc:
        return _fail(exc, 3)
    except NoAdmissibleModelError as exc:
        return _fail(exc, 5)
    except NumericalError as exc:
        return _fail(exc, 4)
    except MqmixError as exc:
        return _fail(exc, 4)


def _fail(exc: Exception, code: int) -> int:
    detail = str(exc)
    first = detail.splitlines()[0] if detail else ""
    sys.stderr.write(f"{type(exc).__name__}: {first}\n")
    rest = detail.splitlines()[1:]
    for line in rest:
        sys.stderr.write(line + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
