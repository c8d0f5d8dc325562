"""Command-line interface: ``drlogit fit | simulate | validate``.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical failure
(including an estimating equation without a root).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .core import Dataset, DrlogitError, NumericalError, ValidationError

SCHEMA_VERSION = "1"
EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3
METHODS = ("lowdim", "hd", "ml")
PHIS = ("none", "simp", "opt")
LINKS = ("identity", "expit", "exp")
SIM_DGPS = ("cond_gaussian", "sparse_gaussian", "nonlinear")

log = logging.getLogger("drlogit")


# ---------------------------------------------------------------- configuration

@dataclass
class RunConfig:
    """Everything a run needs. Built from a JSON file plus command-line overrides."""

    method: str = "lowdim"
    link: str = "identity"
    phi: str = "none"
    learner: str = "ridge"
    learner_params: dict = field(default_factory=dict)
    hd: dict = field(default_factory=dict)
    refit: dict = field(default_factory=dict)
    level: float = 0.95
    seed: int = 0
    data: str | None = None
    out: str | None = None
    outcome: str | None = None
    exposure: str | None = None
    covariates: list | None = None
    # simulation settings
    scenario: str = "both_correct"
    dgp: str | None = None
    reps: int = 100
    n: list = field(default_factory=lambda: [1000])
    p: int | None = None

    @classmethod
    def from_mapping(cls, raw: dict, where: str = "config") -> "RunConfig":
        if not isinstance(raw, dict):
            raise ValidationError(f"{where}: expected a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ValidationError(f"{where}: unknown keys {unknown}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    def validate(self):
        def need(ok, msg):
            if not ok:
                raise ValidationError(msg)

        need(self.method in METHODS, f"method must be one of {METHODS}")
        need(self.link in LINKS, f"link must be one of {LINKS}")
        need(self.phi in PHIS, f"phi must be one of {PHIS}")
        need(isinstance(self.level, (int, float)) and 0 < self.level < 1,
             "level must lie in (0, 1)")
        need(isinstance(self.seed, int) and not isinstance(self.seed, bool),
             "seed must be an integer")
        need(isinstance(self.reps, int) and self.reps >= 1, "reps must be a positive integer")
        if isinstance(self.n, int):
            self.n = [self.n]
        need(isinstance(self.n, list) and self.n and all(isinstance(v, int) and v >= 10
                                                         for v in self.n),
             "n must be an integer >= 10 or a list of them")
        need(self.p is None or (isinstance(self.p, int) and self.p >= 1),
             "p must be a positive integer")
        need(self.dgp is None or self.dgp in SIM_DGPS, f"dgp must be one of {SIM_DGPS}")
        for name in ("learner_params", "hd", "refit"):
            need(isinstance(getattr(self, name), dict), f"{name} must be an object")
        need(self.covariates is None or (isinstance(self.covariates, list)
                                         and all(isinstance(c, str) for c in self.covariates)),
             "covariates must be a list of column names")
        # building the typed configs checks their own invariants and key names
        self.hd_config()
        self.refit_config()
        self.make_learner()
        from .simulate import SCENARIOS

        need(self.scenario in SCENARIOS, f"scenario must be one of {SCENARIOS}")

    def hd_config(self):
        from .hd_sparse import HdConfig

        return _typed(HdConfig, self.hd, "hd")

    def refit_config(self):
        from .ml_crossfit import RefitConfig

        params = {"seed": self.seed, **self.refit}
        return _typed(RefitConfig, params, "refit")

    def make_learner(self):
        from .learners import make_learner

        return make_learner(self.learner, **self.learner_params)


def _typed(cls, params: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(params) - known)
    if unknown:
        raise ValidationError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**params)
    except TypeError as exc:
        raise ValidationError(f"{where}: {exc}") from None


def load_config(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path} is not valid JSON: {exc}") from None


def build_config(args) -> RunConfig:
    raw = load_config(args.config) if getattr(args, "config", None) else {}
    cfg = RunConfig.from_mapping(raw, args.config or "config")
    overrides = {
        "method": args.method, "link": args.link, "phi": args.phi, "learner": args.learner,
        "level": args.level, "seed": args.seed, "data": args.data, "out": args.out,
        "outcome": args.outcome, "exposure": args.exposure,
        "scenario": getattr(args, "scenario", None), "dgp": getattr(args, "dgp", None),
        "reps": getattr(args, "reps", None), "n": getattr(args, "n", None),
        "p": getattr(args, "p", None),
    }
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    if args.learner is not None and "learner" in raw and raw["learner"] != args.learner:
        cfg.learner_params = {}
    cfg.validate()
    return cfg


def resolve_threads(flag) -> int:
    if flag is not None:
        value, source = flag, "--threads"
    elif os.environ.get("DRLOGIT_THREADS"):
        value, source = os.environ["DRLOGIT_THREADS"], "DRLOGIT_THREADS"
    else:
        return os.cpu_count() or 1
    try:
        threads = int(value)
    except ValueError:
        raise ValidationError(f"{source} must be a positive integer") from None
    if threads < 1:
        raise ValidationError(f"{source} must be a positive integer")
    return threads


# ---------------------------------------------------------------- CSV input/output

def read_csv_dataset(path, outcome: str, exposure: str, covariates=None) -> Dataset:
    """Read a UTF-8 CSV with a header row; every cell must be a finite number.

    Covariates default to every column other than ``outcome`` and ``exposure``.
    Errors name the offending (1-based data) row and column.
    """
    if not outcome or not exposure:
        raise ValidationError("--outcome and --exposure are required")
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        try:
            rows = list(csv.reader(fh))
        except (csv.Error, UnicodeDecodeError) as exc:
            raise ValidationError(f"{path}: unreadable CSV ({exc})") from None
    if not rows or not any(c.strip() for c in rows[0]):
        raise ValidationError(f"{path}: missing header row")
    header = [c.strip() for c in rows[0]]
    if len(set(header)) != len(header):
        raise ValidationError(f"{path}: duplicate column names in header")
    try:
        float(header[0])
    except ValueError:
        pass
    else:
        raise ValidationError(f"{path}: missing header row (first row is numeric)")
    body = rows[1:]
    if not body:
        raise ValidationError(f"{path}: no data rows")
    for name in (outcome, exposure):
        if name not in header:
            raise ValidationError(f"{path}: column {name!r} not found")
    if covariates is None:
        covariates = [c for c in header if c not in (outcome, exposure)]
    for name in covariates:
        if name not in header:
            raise ValidationError(f"{path}: covariate column {name!r} not found")
    if not covariates:
        raise ValidationError(f"{path}: no covariate columns")
    values = np.empty((len(body), len(header)))
    for i, row in enumerate(body, start=1):
        if len(row) != len(header):
            raise ValidationError(f"{path}: row {i} has {len(row)} cells, expected {len(header)}")
        for j, cell in enumerate(row):
            try:
                v = float(cell)
            except ValueError:
                v = math.nan
            if not math.isfinite(v):
                raise ValidationError(
                    f"{path}: row {i}, column {header[j]!r}: {cell!r} is not a finite number")
            values[i - 1, j] = v
    col = {name: j for j, name in enumerate(header)}
    y = values[:, col[outcome]]
    bad = np.flatnonzero((y != 0.0) & (y != 1.0))
    if bad.size:
        raise ValidationError(
            f"{path}: row {bad[0] + 1}, column {outcome!r}: outcome must be 0 or 1")
    x = values[:, [col[c] for c in covariates]]
    return Dataset(y, values[:, col[exposure]], x, tuple(covariates))


def write_csv_dataset(data: Dataset, path, outcome: str = "y", exposure: str = "a"):
    """Write ``data`` with shortest round-trip float formatting."""
    names = list(data.column_names or [f"x{j + 1}" for j in range(data.p)])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([outcome, exposure] + names)
        for i in range(data.n):
            w.writerow([_num(data.y[i]), _num(data.a[i])] + [_num(v) for v in data.x[i]])


def _num(v) -> str:
    v = float(v)
    return repr(int(v)) if v.is_integer() and abs(v) < 1e15 else repr(v)


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _echo(cfg: RunConfig) -> dict:
    """Configuration echoed into reports; the output location is left out."""
    d = asdict(cfg)
    d.pop("out")
    return d


def _write_json(obj, out):
    text = json.dumps(_json_safe(obj), indent=2, sort_keys=True) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


# ---------------------------------------------------------------- commands

def estimate(data: Dataset, cfg: RunConfig, threads: int = 1):
    """Dispatch to the estimator named by ``cfg.method``."""
    if cfg.method == "lowdim":
        from .lowdim import estimate_lowdim

        return estimate_lowdim(data, link=cfg.link, phi=cfg.phi, level=cfg.level)
    if cfg.method == "hd":
        from .hd_sparse import estimate_hd

        return estimate_hd(data, link=cfg.link, cfg=cfg.hd_config(), phi=cfg.phi,
                           level=cfg.level, seed=cfg.seed)
    from .ml_crossfit import estimate_ml

    return estimate_ml(data, cfg.make_learner(), cfg.refit_config(), phi=cfg.phi,
                       level=cfg.level, n_jobs=threads)


def cmd_fit(args) -> int:
    cfg = build_config(args)
    threads = resolve_threads(args.threads)
    if cfg.data is None:
        raise ValidationError("--data is required")
    data = read_csv_dataset(cfg.data, cfg.outcome, cfg.exposure, cfg.covariates)
    rep = estimate(data, cfg, threads)
    report = {"schema_version": SCHEMA_VERSION, "n": data.n, "p": data.p, **rep.to_dict()}
    report["config"] = _echo(cfg)
    _write_json(report, cfg.out)
    if not rep.converged:
        log.error("estimating equation has no root within the search range")
        return EXIT_NUMERICAL
    return EXIT_OK


def _sim_dgp(cfg: RunConfig):
    from .simulate import nonlinear_spec, sparse_gaussian_spec

    dgp = cfg.dgp or ("sparse_gaussian" if cfg.method == "hd" else "cond_gaussian")
    n0 = cfg.n[0]
    if dgp == "nonlinear":
        return nonlinear_spec(n=n0, p=cfg.p or 5)
    if dgp == "sparse_gaussian":
        return sparse_gaussian_spec(n=n0, p=cfg.p or 1000, s=3)
    return sparse_gaussian_spec(n=n0, p=cfg.p or 5, s=3)


def _sim_options(cfg: RunConfig) -> dict:
    if cfg.method == "lowdim":
        return {"link": cfg.link, "phi": cfg.phi}
    if cfg.method == "hd":
        return {"link": cfg.link, "phi": cfg.phi, "cfg": cfg.hd_config()}
    return {"learner": cfg.make_learner(), "cfg": cfg.refit_config(), "phi": cfg.phi}


def cmd_simulate(args) -> int:
    from .simulate import ScenarioConfig, run_monte_carlo

    cfg = build_config(args)
    threads = resolve_threads(args.threads)
    if cfg.out is None:
        raise ValidationError("--out DIR is required for simulate")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    sc = ScenarioConfig(cfg.method, cfg.scenario, cfg.reps, tuple(cfg.n), cfg.level, cfg.seed,
                        _sim_options(cfg))
    res = run_monte_carlo(sc, _sim_dgp(cfg), threads=threads, max_failure_rate=1.0)
    with open(out / "replicates.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["replicate", "n", "beta_hat", "se", "covered", "failed"])
        for i in range(res.n.shape[0]):
            w.writerow([int(res.replicate[i]), int(res.n[i]), _num(res.beta_hat[i]),
                        _num(res.se[i]), int(res.covered[i]), int(res.failed[i])])
    summary = {
        "schema_version": SCHEMA_VERSION,
        "method": cfg.method,
        "scenario": cfg.scenario,
        "beta0": res.beta0,
        "no_validity_guarantee": cfg.scenario == "both_wrong",
        "summaries": {str(n): s for n, s in res.summaries.items()},
        "config": _echo(cfg),
    }
    _write_json(summary, out / "summary.json")
    worst = max(s["failure_rate"] for s in res.summaries.values())
    if worst > 0.05:
        log.error("%.1f%% of replicates failed", 100 * worst)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = build_config(args)
    resolve_threads(args.threads)
    if cfg.data is not None:
        data = read_csv_dataset(cfg.data, cfg.outcome, cfg.exposure, cfg.covariates)
        sys.stdout.write(f"ok: {data.n} rows, {data.p} covariates\n")
    else:
        sys.stdout.write("ok: configuration valid\n")
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def _float(text):
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None


def _n_list(text):
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers separated by commas: {text!r}") \
            from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drlogit", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data")
    common.add_argument("--outcome")
    common.add_argument("--exposure")
    common.add_argument("--method", choices=METHODS)
    common.add_argument("--link", choices=LINKS)
    common.add_argument("--phi", choices=PHIS)
    common.add_argument("--learner")
    common.add_argument("--config")
    common.add_argument("--seed", type=int)
    common.add_argument("--level", type=_float)
    common.add_argument("--out")
    common.add_argument("--threads", type=int)
    sub.add_parser("fit", parents=[common], help="estimate beta on a CSV file")
    sim = sub.add_parser("simulate", parents=[common], help="run a Monte Carlo campaign")
    sim.add_argument("--reps", type=int)
    sim.add_argument("--scenario")
    sim.add_argument("--dgp", choices=SIM_DGPS)
    sim.add_argument("--n", type=_n_list, help="sample size(s), comma separated")
    sim.add_argument("--p", type=int)
    sub.add_parser("validate", parents=[common], help="check data and configuration")
    return parser


COMMANDS = {"fit": cmd_fit, "simulate": cmd_simulate, "validate": cmd_validate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="drlogit: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ValidationError as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except DrlogitError as exc:
        log.error("%s", exc)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
