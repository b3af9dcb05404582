"""Command line front end: config parsing, experiment runs and output files.

Config files hold one ``key = value`` per line; ``#`` starts a comment.
See ``horizon-nmpc run --help`` for the flags and ``CONFIG_KEYS`` for the
accepted keys.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .adapt import AdaptationConfig, Status
from .cloop import (
    CapHitError,
    ClosedLoopTrace,
    StepRecord,
    Summary,
    report_suboptimality,
    run_closed_loop,
    run_fixed_horizon,
    summarize,
)
from .model import (
    ARP_FIELDS,
    ArpParameters,
    ReferenceSignal,
    arp_system,
    double_integrator,
    scalar_linear,
    zeta_reference,
)
from .ocp import ControlGrid, OCPSolver, SolverOptions

log = logging.getLogger("horizon_nmpc")

EXIT_OK, EXIT_ERROR, EXIT_CAP = 0, 1, 2

MODELS = ("arp", "scalar_linear", "double_integrator")
MODEL_PARAMS = {
    "arp": ARP_FIELDS,
    "scalar_linear": ("a", "b", "rho"),
    "double_integrator": ("q_pos", "q_vel", "rho"),
}
STATE_DIMS = {"arp": 8, "scalar_linear": 1, "double_integrator": 2}
U_MAX_DEFAULT = {"arp": 10.0, "scalar_linear": 1.0, "double_integrator": 1.0}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    model: str
    x0: tuple[float, ...]
    steps: int
    params: dict = field(default_factory=dict)
    param_file: str | None = None
    T: float = 0.2
    substeps: int = 10
    u_max: float | None = None
    reference: str | None = None
    reference_file: str | None = None
    alpha_bar: float = 0.5
    epsilon: float = 1e-5
    N0: int = 2
    N_hat: int = 2
    N_min: int = 2
    N_max: int = 30
    sigma: int = 5
    estimate: str = "aposteriori"
    strategy: str = "simple"
    shorten: bool = True
    tol: float = 1e-6
    max_iter: int = 500
    restarts: int = 0
    seed: int = 0
    oracle_grid: int | None = None
    out: str = "out"
    on_cap: str = "abort"
    accept_unconverged: bool = False
    compare_fixed: int | None = None

    def adaptation(self) -> AdaptationConfig:
        return AdaptationConfig(
            alpha_bar=self.alpha_bar,
            estimate_method=self.estimate,
            prolong_strategy=self.strategy,
            shorten_enabled=self.shorten,
            N_hat=self.N_hat,
            sigma=self.sigma,
            N_min=self.N_min,
            N_max=self.N_max,
            epsilon=self.epsilon,
            accept_unconverged=self.accept_unconverged,
        )


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _vector(text: str) -> tuple[float, ...]:
    parts = [p for p in text.replace(",", " ").split() if p]
    if not parts:
        raise ValueError("empty vector")
    return tuple(float(p) for p in parts)


def _choice(*options):
    def parse(text):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text

    return parse


def _in_range(kind, lo=None, hi=None, lo_open=False, hi_open=False, label=None):
    def parse(text):
        v = kind(text)
        bad = (
            (lo is not None and (v <= lo if lo_open else v < lo))
            or (hi is not None and (v >= hi if hi_open else v > hi))
            or (kind is float and not math.isfinite(v))
        )
        if bad:
            raise ValueError(f"{v} outside {label}")
        return v

    return parse


def _optional_int(lo):
    inner = _in_range(int, lo, label=f"[{lo}, inf)")
    return lambda text: None if text.lower() == "none" else inner(text)


# key -> (parser, description); default values live on ExperimentConfig
CONFIG_KEYS = {
    "model": (_choice(*MODELS), "system: arp, scalar_linear or double_integrator"),
    "x0": (_vector, "initial state, comma or space separated"),
    "steps": (_in_range(int, 1, label="[1, inf)"), "number of closed-loop steps"),
    "param_file": (str, "ARP parameter file (name = value lines)"),
    "T": (_in_range(float, 0, lo_open=True, label="(0, inf)"), "sampling period"),
    "substeps": (_in_range(int, 1, label="[1, inf)"), "RK4 substeps per sampling period"),
    "u_max": (_in_range(float, 0, lo_open=True, label="(0, inf)"), "control bound |u| <= u_max"),
    "reference": (str, "ARP reference: 'zeta' or segments 'start:stop:value, ...'"),
    "reference_file": (str, "ARP reference as a two-column time/value file"),
    "alpha_bar": (_in_range(float, 0, 1, True, True, "(0, 1)"), "required suboptimality degree"),
    "epsilon": (_in_range(float, 0, label="[0, inf)"), "practical threshold on the stage cost"),
    "N0": (_in_range(int, 1, label="[1, inf)"), "initial horizon"),
    "N_hat": (_in_range(int, 2, label="[2, inf)"), "a priori estimate parameter"),
    "N_min": (_in_range(int, 2, label="[2, inf)"), "smallest horizon"),
    "N_max": (_in_range(int, 2, label="[2, inf)"), "largest horizon"),
    "sigma": (_in_range(int, 1, label="[1, inf)"), "largest horizon change per fixed-point iteration"),
    "estimate": (_choice("aposteriori", "apriori"), "suboptimality estimate"),
    "strategy": (_choice("simple", "fixedpoint", "monotone"), "prolongation strategy"),
    "shorten": (_bool, "enable horizon shortening"),
    "tol": (_in_range(float, 0, lo_open=True, label="(0, inf)"), "solver first-order tolerance"),
    "max_iter": (_in_range(int, 1, label="[1, inf)"), "solver iteration cap"),
    "restarts": (_in_range(int, 0, label="[0, inf)"), "extra randomised solver starts"),
    "seed": (int, "seed for the randomised starts"),
    "oracle_grid": (_optional_int(1), "solve by exhaustive search on this many points per control"),
    "out": (str, "output directory"),
    "on_cap": (_choice("abort", "continue"), "what to do when N_max does not certify"),
    "accept_unconverged": (_bool, "let unconverged solves take part in shortening and the report"),
    "compare_fixed": (_optional_int(1), "also run a fixed-horizon baseline with this N"),
}
REQUIRED = ("model", "x0", "steps")


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse and validate a config; applied defaults are logged at INFO level."""
    values: dict = {}
    params: dict = {}
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        where = f"{source}:{lineno}"
        if not sep or not key:
            raise ConfigError(f"{where}: expected 'key = value', got {raw.strip()!r}")
        if key in seen:
            raise ConfigError(f"{where}: duplicate key {key!r} (first set on line {seen[key]})")
        seen[key] = lineno
        if key.startswith("param."):
            name = key[len("param."):]
            try:
                params[name] = (float(val), lineno)
            except ValueError:
                raise ConfigError(f"{where}: {key}: expected a number, got {val!r}") from None
            continue
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{where}: unknown key {key!r}")
        try:
            values[key] = CONFIG_KEYS[key][0](val)
        except ValueError as exc:
            raise ConfigError(f"{where}: {key}: {exc}") from None
    missing = [k for k in REQUIRED if k not in values]
    if missing:
        raise ConfigError(f"{source}: missing required key(s): {', '.join(missing)}")

    model = values["model"]
    allowed = MODEL_PARAMS[model]
    for name, (_, lineno) in params.items():
        if name not in allowed:
            raise ConfigError(f"{source}:{lineno}: unknown parameter {name!r} for model {model}")
    if len(values["x0"]) != STATE_DIMS[model]:
        raise ConfigError(
            f"{source}:{seen['x0']}: x0 has {len(values['x0'])} entries, model {model} needs {STATE_DIMS[model]}"
        )
    if "reference" in values and "reference_file" in values:
        raise ConfigError(f"{source}:{seen['reference_file']}: set reference or reference_file, not both")
    if model != "arp":
        for key in ("reference", "reference_file", "param_file"):
            if key in values:
                raise ConfigError(f"{source}:{seen[key]}: {key} only applies to the arp model")

    for f in fields(ExperimentConfig):
        if f.name in REQUIRED or f.name == "params" or f.name in values or f.default is None:
            continue
        if f.name == "substeps" and model == "scalar_linear":
            continue
        log.info("default applied: %s = %s", f.name, f.default)
    if "u_max" not in values:
        log.info("default applied: u_max = %s", U_MAX_DEFAULT[model])
    if model == "arp" and "reference" not in values and "reference_file" not in values:
        log.info("default applied: reference = zeta")
    if model == "arp" and "param_file" not in values:
        log.info("default applied: param_file = bundled illustrative ARP parameters")
    cfg = ExperimentConfig(params={k: v for k, (v, _) in params.items()}, **values)
    try:
        cfg.adaptation()
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    if not cfg.N_min <= cfg.N0 <= cfg.N_max:
        log.info("N0 = %d lies outside [N_min, N_max] and will be clamped", cfg.N0)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    return parse_config(text, str(path))


# ---------------------------------------------------------------------------
# building and running
# ---------------------------------------------------------------------------


def build_model(cfg: ExperimentConfig):
    u_max = cfg.u_max if cfg.u_max is not None else U_MAX_DEFAULT[cfg.model]
    if cfg.model == "scalar_linear":
        return scalar_linear(T=cfg.T, u_max=u_max, **cfg.params)
    if cfg.model == "double_integrator":
        return double_integrator(T=cfg.T, substeps=cfg.substeps, u_max=u_max, **cfg.params)
    params = ArpParameters.from_file(cfg.param_file)
    if cfg.params:
        params = replace(params, **cfg.params)
    if cfg.reference_file:
        ref = ReferenceSignal.from_file(cfg.reference_file)
    elif cfg.reference in (None, "zeta"):
        ref = zeta_reference()
    else:
        ref = ReferenceSignal.parse(cfg.reference)
    return arp_system(params, T=cfg.T, substeps=cfg.substeps, u_max=u_max, reference=ref)


def build_solver(cfg: ExperimentConfig, system, cost) -> OCPSolver:
    opts = SolverOptions(tol=cfg.tol, max_iter=cfg.max_iter, restarts=cfg.restarts, seed=cfg.seed)
    grid = None
    if cfg.oracle_grid:
        grid = ControlGrid.uniform(system.lower, system.upper, cfg.oracle_grid)
    return OCPSolver(system, cost, opts, grid)


@dataclass
class RunResult:
    trace: ClosedLoopTrace
    cap_hit: bool
    baseline: ClosedLoopTrace | None = None
    report: object | None = None


def run_experiment(cfg: ExperimentConfig, report: bool = True) -> RunResult:
    system, cost = build_model(cfg)
    solver = build_solver(cfg, system, cost)
    acfg = cfg.adaptation()
    cap_hit = False
    try:
        trace = run_closed_loop(system, acfg, solver, cfg.x0, cfg.steps, cfg.N0, on_cap=cfg.on_cap)
    except CapHitError as exc:
        log.error("%s", exc)
        trace, cap_hit = exc.trace, True
    cap_hit = cap_hit or any(s.status is Status.CAP_HIT for s in trace.steps)
    result = RunResult(trace, cap_hit)
    if cfg.compare_fixed:
        result.baseline = run_fixed_horizon(system, acfg, solver, cfg.x0, cfg.steps, cfg.compare_fixed)
    if report:
        result.report = report_suboptimality(trace, solver, cfg.accept_unconverged)
    return result


# ---------------------------------------------------------------------------
# output files
# ---------------------------------------------------------------------------


def _num(v: float) -> str:
    return format(float(v), ".17g")


def trace_header(state_dim: int, control_dim: int) -> list[str]:
    return (
        ["n", "t"]
        + [f"x{i}" for i in range(state_dim)]
        + [f"u{i}" for i in range(control_dim)]
        + ["N", "alpha", "V", "l", "inner_iters", "ocp_solves", "wall_ms"]
    )


def emit_trace_csv(trace: ClosedLoopTrace, path) -> None:
    path = Path(path)
    first = trace.steps[0]
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(trace_header(len(first.x), len(first.u)))
            for s in trace.steps:
                w.writerow(
                    [s.n, _num(s.t)]
                    + [_num(v) for v in s.x]
                    + [_num(v) for v in s.u]
                    + [s.N, "skip" if s.alpha is None else _num(s.alpha), _num(s.V), _num(s.l)]
                    + [s.inner_iterations, s.ocp_solves, _num(s.wall_time * 1e3)]
                )
    except OSError as exc:
        raise OSError(f"cannot write trace to {path}: {exc.strerror or exc}") from exc


def read_trace_csv(path) -> list[dict]:
    """Rows of a trace file with numbers parsed back; ``alpha`` is ``None`` for ``skip``."""
    rows = []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        for raw in reader:
            row = {}
            for k, v in raw.items():
                if k in ("n", "N", "inner_iters", "ocp_solves"):
                    row[k] = int(v)
                elif k == "alpha" and v == "skip":
                    row[k] = None
                else:
                    row[k] = float(v)
            rows.append(row)
    return rows


def _label(cfg: ExperimentConfig) -> str:
    return f"adaptive {cfg.strategy}/{cfg.estimate}"


def write_outputs(cfg: ExperimentConfig, result: RunResult, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trace = result.trace
    written = []
    p = out / "trace.csv"
    emit_trace_csv(trace, p)
    written.append(p)

    lines = [Summary.header(), summarize(trace).row(_label(cfg))]
    if result.baseline is not None:
        lines.append(summarize(result.baseline).row(f"standard N={cfg.compare_fixed}"))
        uncert = sum(s.status is Status.CAP_HIT for s in result.baseline.steps)
        lines.append(f"# baseline steps below alpha_bar: {uncert}")
    lines.append("")
    lines.append(f"steps run: {len(trace)} of {cfg.steps}; N* = {trace.N_star}")
    lines.append(f"certified: {'no (horizon cap hit)' if result.cap_hit else 'yes'}")
    rep = result.report
    if rep is not None:
        lines.append("")
        lines.append(f"{'':<24}{'C_l min':>10}{'C_l max':>10}{'C_a min':>10}{'C_a max':>10}{'alpha_C':>10}")
        lines.append(
            f"{_label(cfg):<24}{rep.C_l_min:>10.4f}{rep.C_l_max:>10.4f}"
            f"{rep.C_alpha_min:>10.4f}{rep.C_alpha_max:>10.4f}{rep.alpha_C:>10.4f}"
        )
        excluded = [r.n for r in rep.rows if r.excluded]
        if excluded:
            lines.append(f"# steps left out of the report: {excluded}")
    p = out / "summary.txt"
    p.write_text("\n".join(lines) + "\n")
    written.append(p)

    if rep is not None:
        p = out / "report.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["n", "N", "C_l", "C_alpha", "alpha_Nstar", "excluded"])
            for r in rep.rows:
                w.writerow([r.n, r.N, _num(r.C_l), _num(r.C_alpha), _num(r.alpha_star), r.excluded])
        written.append(p)

    p = out / "horizons.dat"
    p.write_text("# n N_n\n" + "".join(f"{s.n} {s.N}\n" for s in trace.steps))
    written.append(p)
    p = out / "alphas.dat"
    p.write_text("# n alpha (nan: practical skip)\n" + "".join(f"{s.n} {'nan' if s.alpha is None else _num(s.alpha)}\n" for s in trace.steps))
    written.append(p)
    return written


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------

# flag -> config key
RUN_FLAGS = {"strategy": "strategy", "estimate": "estimate", "out": "out", "compare_fixed": "compare_fixed"}


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="horizon-nmpc", description="Adaptive-horizon receding horizon control experiments.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log debug messages")
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one experiment", description="Run one experiment; flags override config keys.")
    run.add_argument("--config", required=True, metavar="PATH", help="experiment config file")
    run.add_argument("--strategy", choices=("simple", "fixedpoint", "monotone"), help="config key: strategy")
    run.add_argument("--estimate", choices=("aposteriori", "apriori"), help="config key: estimate")
    run.add_argument("--out", metavar="DIR", help="config key: out")
    run.add_argument("--compare-fixed", type=int, metavar="N", dest="compare_fixed", help="config key: compare_fixed")
    run.add_argument("--no-report", action="store_true", help="skip the closed-loop suboptimality report")
    batch = sub.add_parser("batch", help="run several configs concurrently, one output directory each")
    batch.add_argument("configs", nargs="+", metavar="PATH")
    batch.add_argument("--jobs", type=int, default=None, help="worker processes (default: one per CPU)")
    batch.add_argument("--no-report", action="store_true", help="skip the closed-loop suboptimality report")
    return ap


def _setup_logging(verbose: bool):
    log.setLevel(logging.DEBUG if verbose else logging.INFO)
    if not any(type(h) is logging.StreamHandler for h in log.handlers):
        h = logging.StreamHandler(sys.stderr)
        h.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
        log.addHandler(h)


def _run_one(cfg: ExperimentConfig, report: bool) -> int:
    out = Path(cfg.out)
    result = run_experiment(cfg, report=report)
    for p in write_outputs(cfg, result, out):
        log.info("wrote %s", p)
    return EXIT_CAP if result.cap_hit else EXIT_OK


def _attach_run_log(out_dir: Path) -> logging.Handler:
    out_dir.mkdir(parents=True, exist_ok=True)
    fh = logging.FileHandler(out_dir / "run.log", mode="w")
    fh.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    log.addHandler(fh)
    return fh


def _detach(fh: logging.Handler):
    log.removeHandler(fh)
    fh.close()


def _locate_output(path, override: str | None) -> Path:
    # a silent first parse, only to find where run.log goes
    level = log.level
    log.setLevel(logging.WARNING)
    try:
        cfg = load_config(path)
    finally:
        log.setLevel(level)
    return Path(override or cfg.out)


def cmd_run(args) -> int:
    overrides = {key: getattr(args, flag) for flag, key in RUN_FLAGS.items() if getattr(args, flag) is not None}
    fh = _attach_run_log(_locate_output(args.config, overrides.get("out")))
    try:
        log.info("config %s", args.config)
        cfg = load_config(args.config)
        for k, v in overrides.items():
            log.info("flag override: %s = %s", k, v)
        cfg = replace(cfg, **overrides)
        cfg.adaptation()
        return _run_one(cfg, not args.no_report)
    finally:
        _detach(fh)


def _batch_worker(path: str, report: bool) -> tuple[str, int, str]:
    try:
        _setup_logging(False)
        fh = _attach_run_log(_locate_output(path, None))
        try:
            return path, _run_one(load_config(path), report), ""
        finally:
            _detach(fh)
    except (ConfigError, OSError, ValueError) as exc:
        return path, EXIT_ERROR, str(exc)


def cmd_batch(args) -> int:
    cfgs = [load_config(p) for p in args.configs]
    outs = [str(Path(c.out).resolve()) for c in cfgs]
    dupes = {o for o in outs if outs.count(o) > 1}
    if dupes:
        raise ConfigError(f"batch configs share output directories: {', '.join(sorted(dupes))}")
    with ProcessPoolExecutor(args.jobs) as pool:
        results = list(pool.map(_batch_worker, args.configs, [not args.no_report] * len(args.configs)))
    status = EXIT_OK
    for path, code, err in results:
        print(f"{path}: exit {code}{' ' + err if err else ''}")
        status = max(status, code) if code != EXIT_ERROR else EXIT_ERROR
    return status


def main(argv=None) -> int:
    ap = _parser()
    args = ap.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        if args.command == "run":
            return cmd_run(args)
        return cmd_batch(args)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
