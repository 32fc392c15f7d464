"""Command-line front end: ``geostack {fit,simulate,diagnostics}``.

Configuration is a YAML mapping; every section is optional and missing
values take the defaults below. A minimal ``fit`` config::

    data:
      path: train.csv
      coords: [x, y]
      covariates: [x1]
      outcome: obs
    predict:
      path: test.csv        # optional; outcome column scored if present

See ``README.md`` for the full schema.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .conjugate import PriorSpec, SpatialDataset
from .kernel import DuplicateLocationError, MaternParams, as_locations, has_duplicates
from .predict import StackedModel, fit_candidates, stacked_log_density
from .serialize import write_csv, write_json
from .stacking import (
    DEFAULT_GRID,
    CandidateGrid,
    assign_folds,
    build_cv_table,
    solve_weights_densities,
    solve_weights_means,
)

__all__ = ["ConfigError", "DataError", "RunConfig", "parse_config", "ingest_csv", "run", "main"]

log = logging.getLogger("geostack")

MODES = ("fit", "simulate", "diagnostics")
SOLVERS = ("stack_means", "stack_densities")


class ConfigError(ValueError):
    """Invalid configuration; the message names the field and, when known, the line."""


class DataError(ValueError):
    """Malformed input table."""


# --------------------------------------------------------------------------- config

_SCHEMA = {
    "mode": str,
    "seed": int,
    "threads": int,
    "output": str,
    "data": {
        "path": str, "coords": list, "covariates": list, "outcome": str,
        "intercept": bool, "allow_duplicates": bool,
    },
    "predict": {"path": str, "outcome": str},
    "grid": {"phi": list, "nu": list, "delta2": list},
    "prior": {"mu_beta": list, "V_beta": (float, list), "a_sigma": float, "b_sigma": float},
    "cv": {"K": int},
    "solver": {"nonneg": bool, "mc_lppd_draws": int},
    "simulate": {
        "preset": str, "n": int, "n_holdout": int, "d": int, "replicates": int,
        "beta": list, "sigma2": float, "tau2": float, "phi": float, "nu": float,
    },
    "diagnostics": {
        "ns": list, "seeds": list, "phi": float, "nu": float, "delta2": float,
        "tau2": float, "d": int, "e2_ns": list, "sigma2_ns": list, "sigma2_phis": list,
        "blp_ns": list,
    },
}


@dataclass
class RunConfig:
    """Validated run configuration with defaults filled in."""

    mode: str = "fit"
    seed: int = 0
    threads: int = 1
    output: str = "out"
    data: dict = field(default_factory=dict)
    predict: dict = field(default_factory=dict)
    grid: CandidateGrid = DEFAULT_GRID
    prior: dict = field(default_factory=dict)
    K: int = 10
    nonneg: bool = True
    mc_lppd_draws: int = 0
    simulate: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    base_dir: Path = Path(".")

    def prior_spec(self, p: int) -> PriorSpec:
        mu = self.prior.get("mu_beta")
        mu = np.zeros(p) if mu is None else np.asarray(mu, dtype=float)
        V = self.prior.get("V_beta", 4.0)
        V = V * np.eye(p) if np.isscalar(V) else np.asarray(V, dtype=float)
        if mu.shape != (p,) or V.shape != (p, p):
            raise ConfigError(f"field 'prior': mu_beta/V_beta do not match p={p} regression columns")
        return PriorSpec(mu, V, float(self.prior.get("a_sigma", 2.0)),
                         float(self.prior.get("b_sigma", 2.0)))

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p


def _line_index(node, prefix=(), out=None):
    """Map key paths in a composed YAML tree to 1-based line numbers."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = prefix + (k.value,)
            out[key] = k.start_mark.line + 1
            _line_index(v, key, out)
    return out


def _check_type(value, expected, where):
    types = expected if isinstance(expected, tuple) else (expected,)
    for t in types:
        if t is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            return
        if t is int and isinstance(value, int) and not isinstance(value, bool):
            return
        if t not in (int, float) and isinstance(value, t):
            return
    names = " or ".join("number" if t is float else t.__name__ for t in types)
    raise ConfigError(f"{where}: expected {names}, got {type(value).__name__}")


def _validate(tree: dict, schema: dict, lines: dict, prefix=()):
    for key, value in tree.items():
        path = prefix + (key,)
        where = f"field '{'.'.join(map(str, path))}'"
        if path in lines:
            where += f" (line {lines[path]})"
        if key not in schema:
            raise ConfigError(f"{where}: unknown field")
        spec = schema[key]
        if isinstance(spec, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected a mapping")
            _validate(value, spec, lines, path)
        else:
            _check_type(value, spec, where)
            if spec is list and len(value) == 0:
                raise ConfigError(f"{where}: must be a non-empty list")


def _where(path, lines):
    s = f"field '{'.'.join(path)}'"
    return s + (f" (line {lines[path]})" if path in lines else "")


def parse_config(path, mode: str | None = None) -> RunConfig:
    """Read and validate a YAML run configuration.

    Omitted values default to ``K = 10``, the 4 x 4 x 4 candidate grid,
    ``a_sigma = b_sigma = 2``, ``V_beta = 4 I`` and ``mu_beta = 0``.

    Raises
    ------
    ConfigError
        On unreadable YAML, unknown fields, wrong types or empty lists; the
        message names the offending field and its line.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        node = yaml.compose(text)
        tree = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    tree = {} if tree is None else tree
    if not isinstance(tree, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    lines = _line_index(node) if node is not None else {}
    _validate(tree, _SCHEMA, lines)

    cfg = RunConfig(base_dir=path.parent)
    cfg.mode = mode or tree.get("mode", "fit")
    if cfg.mode not in MODES:
        raise ConfigError(f"{_where(('mode',), lines)}: must be one of {', '.join(MODES)}")
    cfg.seed = tree.get("seed", 0)
    cfg.threads = tree.get("threads", 1)
    cfg.output = tree.get("output", "out")
    cfg.data = dict(tree.get("data", {}))
    cfg.predict = dict(tree.get("predict", {}))
    cfg.prior = dict(tree.get("prior", {}))
    cfg.simulate = dict(tree.get("simulate", {}))
    cfg.diagnostics = dict(tree.get("diagnostics", {}))
    cfg.K = tree.get("cv", {}).get("K", 10)
    if cfg.K < 2:
        raise ConfigError(f"{_where(('cv', 'K'), lines)}: K must be at least 2")
    solver = tree.get("solver", {})
    cfg.nonneg = solver.get("nonneg", True)
    cfg.mc_lppd_draws = solver.get("mc_lppd_draws", 0)

    g = tree.get("grid", {})
    try:
        cfg.grid = CandidateGrid(
            tuple(g.get("phi", DEFAULT_GRID.phi)),
            tuple(g.get("nu", DEFAULT_GRID.nu)),
            tuple(g.get("delta2", DEFAULT_GRID.delta2)),
        )
    except (ValueError, TypeError) as exc:
        fld = next((k for k in ("phi", "nu", "delta2") if k in str(exc)), None)
        where = _where(("grid", fld), lines) if fld else "field 'grid'"
        raise ConfigError(f"{where}: {exc}") from exc

    for key in ("a_sigma", "b_sigma"):
        if key in cfg.prior and cfg.prior[key] <= 0:
            raise ConfigError(f"{_where(('prior', key), lines)}: must be positive")

    if cfg.mode == "fit":
        for key in ("path", "coords", "outcome"):
            if key not in cfg.data:
                raise ConfigError(f"field 'data.{key}': required in fit mode")
        for section in ("data", "predict"):
            if "path" in getattr(cfg, section) and not cfg.resolve(getattr(cfg, section)["path"]).exists():
                raise ConfigError(f"{_where((section, 'path'), lines)}: file not found")
    return cfg


# --------------------------------------------------------------------------- data

_MISSING = {"", "na", "nan", "null", "none"}


def _read_table(path, columns: list[str], optional: tuple = ()):
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file (header row expected)") from None
        missing = [c for c in columns if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
        wanted = list(columns) + [c for c in optional if c in header]
        pos = [header.index(c) for c in wanted]
        out = {c: [] for c in wanted}
        for r, row in enumerate(reader, start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            for c, j in zip(wanted, pos):
                cell = row[j].strip() if j < len(row) else ""
                if cell.lower() in _MISSING:
                    raise DataError(f"{path}: missing value in column '{c}' at data row {r} "
                                    f"(line {r + 1})")
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"{path}: non-numeric value {cell!r} in column '{c}' at "
                                    f"data row {r} (line {r + 1})") from None
                if not math.isfinite(v):
                    raise DataError(f"{path}: non-finite value in column '{c}' at data row {r}")
                out[c].append(v)
    return {c: np.asarray(v, dtype=float) for c, v in out.items()}


def _design(cols, covariates, intercept, n):
    parts = ([np.ones((n, 1))] if intercept else []) + [cols[c][:, None] for c in covariates]
    return np.hstack(parts) if parts else np.zeros((n, 0))


def ingest_csv(path, coords: list[str], outcome: str, covariates: list[str] = (), *,
               intercept: bool = True, allow_duplicates: bool = False) -> SpatialDataset:
    """Load a spatial table.

    Parameters
    ----------
    coords : list of str
        Coordinate column names (one or two).
    outcome : str
    covariates : list of str
        Covariate columns; an intercept column is prepended unless
        ``intercept=False``.
    allow_duplicates : bool
        Coincident locations make the correlation matrix singular and are
        rejected by default.

    Raises
    ------
    DataError
        Missing columns, missing or non-numeric cells (with row number).
    DuplicateLocationError
        Coincident coordinates without ``allow_duplicates``.
    """
    coords, covariates = list(coords), list(covariates)
    cols = _read_table(path, coords + covariates + [outcome])
    chi = np.column_stack([cols[c] for c in coords])
    n = chi.shape[0]
    if n == 0:
        raise DataError(f"{path}: no data rows")
    if not allow_duplicates and has_duplicates(chi):
        raise DuplicateLocationError(
            f"{path}: coincident coordinates; the Matérn correlation matrix would be singular. "
            "Set data.allow_duplicates to accept them with diagonal jitter")
    return SpatialDataset(chi, _design(cols, covariates, intercept, n), cols[outcome])


# --------------------------------------------------------------------------- modes

def _mixture_sd(preds, w):
    mean = sum(w[g] * pr.mean for g, pr in preds.items())
    second = sum(w[g] * (pr.variance + pr.mean ** 2) for g, pr in preds.items())
    return np.sqrt(np.maximum(second - mean ** 2, 0.0))


def run_fit(cfg: RunConfig, out: Path) -> dict:
    d = cfg.data
    covariates = d.get("covariates", [])
    data = ingest_csv(cfg.resolve(d["path"]), d["coords"], d["outcome"], covariates,
                      intercept=d.get("intercept", True),
                      allow_duplicates=d.get("allow_duplicates", False))
    prior = cfg.prior_spec(data.p)
    grid = cfg.grid
    folds = assign_folds(data.n, cfg.K, seed=cfg.seed)
    cv = build_cv_table(data, prior, grid, folds, threads=cfg.threads,
                        mc_draws=cfg.mc_lppd_draws, seed=cfg.seed,
                        allow_duplicates=d.get("allow_duplicates", False))
    weights = {
        "stack_means": solve_weights_means(data.y, cv.yhat, nonneg=cfg.nonneg),
        "stack_densities": solve_weights_densities(cv.lp),
    }
    needed = np.flatnonzero(sum(w.w for w in weights.values()) > 0)
    fits = fit_candidates(data, prior, grid, threads=cfg.threads, only=needed)
    models = {s: StackedModel(weights[s], fits, grid) for s in SOLVERS}

    write_json({
        "order": "phi outer, nu middle, delta2 inner",
        "K": cfg.K,
        "seed": cfg.seed,
        "n": data.n,
        "candidates": [
            {"phi": phi, "nu": nu, "delta2": d2,
             "w_stack_means": float(weights["stack_means"].w[g]),
             "w_stack_densities": float(weights["stack_densities"].w[g])}
            for g, (phi, nu, d2) in enumerate(grid.candidates)
        ],
        **{s: {"objective": weights[s].objective, "converged": weights[s].converged,
               "iterations": weights[s].iterations,
               "nonzero": weights[s].nonzero(1e-3)} for s in SOLVERS},
    }, out / "weights.json")

    pr_cfg = cfg.predict
    if "path" in pr_cfg:
        outcome = pr_cfg.get("outcome", d["outcome"])
        cols = _read_table(cfg.resolve(pr_cfg["path"]), list(d["coords"]) + list(covariates),
                           optional=(outcome,))
        chi_new = np.column_stack([cols[c] for c in d["coords"]])
        X_new = _design(cols, covariates, d.get("intercept", True), chi_new.shape[0])
        y_new = cols.get(outcome)
    else:
        chi_new, X_new, y_new = data.coords, data.X, None
        outcome = None

    rows = [dict(zip(d["coords"], map(float, s))) for s in as_locations(chi_new)]
    metrics = {"n_train": data.n, "n_predict": len(rows), "candidates": grid.size}
    for s in SOLVERS:
        preds = models[s].predictions(chi_new, X_new)
        w = weights[s].w
        mean = sum(w[g] * pr.mean for g, pr in preds.items())
        sd = _mixture_sd(preds, w)
        dof = next(iter(preds.values())).dof
        for i, row in enumerate(rows):
            row[f"mean_{s}"] = float(mean[i])
            row[f"sd_{s}"] = float(sd[i])
        entry = {"objective": weights[s].objective, "nonzero": weights[s].nonzero(1e-3)}
        if y_new is not None:
            lpd = stacked_log_density(models[s], chi_new, X_new, y_new)
            for i, row in enumerate(rows):
                row[f"lpd_{s}"] = float(lpd[i])
            entry["mspe"] = float(np.mean((mean - y_new) ** 2))
            entry["mlpd"] = float(np.mean(lpd))
        metrics[s] = entry
    for i, row in enumerate(rows):
        row["dof"] = float(dof)
        if y_new is not None:
            row[outcome] = float(y_new[i])
    write_csv(rows, out / "predictions.csv")
    write_json(metrics, out / "metrics.json")
    return metrics


def run_simulate(cfg: RunConfig, out: Path) -> dict:
    from .sim import SIM1, SIM2, SimConfig, run_study

    s = cfg.simulate
    preset = s.get("preset", "sim2")
    if preset not in ("sim1", "sim2"):
        raise ConfigError(f"field 'simulate.preset': unknown preset {preset!r}")
    base = SIM1 if preset == "sim1" else SIM2
    kt = base.kernel_true
    sc = SimConfig(
        n=s.get("n", base.n), n_holdout=s.get("n_holdout", base.n_holdout), d=s.get("d", base.d),
        beta_true=tuple(s.get("beta", base.beta_true)),
        sigma2_true=s.get("sigma2", base.sigma2_true), tau2_true=s.get("tau2", base.tau2_true),
        kernel_true=MaternParams(s.get("phi", kt.phi), s.get("nu", kt.nu)),
        replicates=s.get("replicates", base.replicates), seed=cfg.seed,
    )
    result = run_study(sc, cfg.grid, cfg.prior_spec(sc.p), K=cfg.K, threads=cfg.threads)
    result.to_csv(out / "study.csv")
    result.to_json(out / "summary.json")
    return result.summary()


def run_diagnostics(cfg: RunConfig, out: Path) -> dict:
    from . import theory
    from .sim import SimConfig, generate

    s = cfg.diagnostics
    kernel = MaternParams(s.get("phi", 7.0), s.get("nu", 1.0))
    delta2, tau2, d = s.get("delta2", 1.0), s.get("tau2", 1.0), s.get("d", 2)
    seeds = s.get("seeds", list(range(cfg.seed, cfg.seed + 10)))
    proj = theory.projection_curve(s.get("ns", [50, 100, 200]), seeds, kernel, delta2, d=d)
    theory.write_curve(proj, out / "projection.csv")
    e2 = theory.e2_curve(s.get("e2_ns", [100, 200, 400]), kernel, delta2=delta2, tau2=tau2,
                         d=d, seed=cfg.seed)
    theory.write_curve(e2, out / "e2.csv")

    ns = sorted(s.get("sigma2_ns", [100, 200, 400, 800]))
    truth = SimConfig(n=ns[-1], n_holdout=0, d=1, beta_true=(), sigma2_true=1.0,
                      tau2_true=tau2 * 1.0, kernel_true=kernel, replicates=1, seed=cfg.seed)
    rep = generate(truth, 0)
    trace = []
    for phi in s.get("sigma2_phis", [kernel.phi / 2, kernel.phi * 2]):
        trace += theory.sigma2_posterior_trace(rep.dataset.coords, rep.dataset.y,
                                               MaternParams(phi, kernel.nu), delta2, ns)
    theory.write_curve(trace, out / "sigma2_trace.csv")

    blp = [{"n": n, "e": theory.blp_error_1d(n, kernel, 1.0, tau2, kernel, delta2)}
           for n in s.get("blp_ns", [25, 50, 100, 200])]
    theory.write_curve(blp, out / "blp.csv")
    return {"projection": len(proj), "e2": len(e2), "sigma2": len(trace), "blp": len(blp)}


RUNNERS = {"fit": run_fit, "simulate": run_simulate, "diagnostics": run_diagnostics}


def run(cfg: RunConfig, out=None) -> int:
    """Execute ``cfg`` and write its artifacts; returns a process exit status."""
    out = Path(out if out is not None else cfg.resolve(cfg.output))
    out.mkdir(parents=True, exist_ok=True)
    RUNNERS[cfg.mode](cfg, out)
    return 0


def _error(kind: str, exc: BaseException) -> None:
    print(json.dumps({"level": "error", "kind": kind, "type": type(exc).__name__,
                      "message": str(exc)}), file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geostack",
                                     description="Stacked conjugate Bayesian geostatistics")
    sub = parser.add_subparsers(dest="mode", required=True)
    for mode, help_ in (("fit", "fit and stack candidate models on a CSV"),
                        ("simulate", "run the replicated simulation study"),
                        ("diagnostics", "emit infill diagnostic curves")):
        p = sub.add_parser(mode, help=help_)
        p.add_argument("--config", required=True, help="YAML configuration file")
        p.add_argument("--threads", type=int, default=None, help="worker pool size")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config, mode=args.mode)
    except ConfigError as exc:
        _error("config", exc)
        return 2
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        if args.threads < 1:
            _error("config", ValueError("--threads must be at least 1"))
            return 2
        cfg.threads = args.threads
    try:
        return run(cfg, args.out)
    except (ConfigError, DataError, DuplicateLocationError) as exc:
        _error("input", exc)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as a structured record
        _error("runtime", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
