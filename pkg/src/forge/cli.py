"""``forge`` command line: widths, compile, verify, topo.

Exit codes: 0 success, 2 configuration error, 3 verification or budget
failure, 4 I/O error.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import click
import numpy as np
import tomli

from .flow import BudgetExhausted, serialize_field
from .lift import VerificationFailed
from .nn_core import BoxDomain, NetworkError, deserialize_net, eval_net, min_width, serialize_net
from .pipeline import PipelineConfig, StageFailure, run_pipeline, verification_points
from .split_compile import BudgetExceeded, CompileError
from .target_lang import BUILTINS, TargetError, TargetFunction, builtin, eval_target, parse_target
from . import topology as topo

EXIT_OK, EXIT_CONFIG, EXIT_FAIL, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("forge")


class ConfigError(ValueError):
    pass


# --- configuration -------------------------------------------------------------


@dataclass
class RunConfig:
    target: str
    d_x: int
    lo: list
    hi: list
    eps: float
    seed: int = 0
    degree: int | list = 8
    flow: dict = field(default_factory=dict)
    split: dict = field(default_factory=dict)
    lift: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)
    base_dir: str = "."

    def paths(self) -> dict:
        out = Path(self.base_dir) / self.output.get("dir", "out")
        return {
            "net": str(out / self.output.get("net", "net.json")),
            "report": str(out / self.output.get("report", "report.json")),
            "field": str(out / self.output.get("field", "field.json")),
        }


def resolve_target(spec: str, d_x: int | None = None) -> TargetFunction:
    """Parse ``spec`` as a builtin name (``builtin:name`` or bare) or an expression."""
    name = spec[len("builtin:") :] if spec.startswith("builtin:") else spec
    if name in BUILTINS:
        return builtin(name, d_x or 2)
    if d_x is None:
        raise TargetError("an expression target needs d_x")
    return parse_target(spec, d_x)


_FLOW_KEYS = {"terms", "intervals", "seed", "budget", "steps"}
_SPLIT_KEYS = {"n", "tol", "max_depth", "alpha", "max_n"}
_LIFT_KEYS = {"policy", "layers", "budget"}
_OUT_KEYS = {"dir", "net", "report", "field"}


def _check_keys(section: dict, allowed: set, name: str):
    extra = set(section) - allowed
    if extra:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(extra))}")


def load_config(path) -> RunConfig:
    """Read a TOML run configuration.

    Raises :class:`OSError` if the file cannot be read and
    :class:`ConfigError` for schema problems.
    """
    with open(path, "rb") as fh:
        try:
            doc = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    try:
        tgt = doc["target"]
        spec = tgt.get("expr") or tgt.get("builtin")
        if not spec or ("expr" in tgt and "builtin" in tgt):
            raise ConfigError("[target] needs exactly one of 'expr' or 'builtin'")
        if "builtin" in tgt:
            spec = "builtin:" + tgt["builtin"]
        dom = doc["domain"]
        run = doc.get("run", {})
        cfg = RunConfig(
            target=spec,
            d_x=int(tgt.get("d_x", len(dom["lo"]))),
            lo=[float(v) for v in dom["lo"]],
            hi=[float(v) for v in dom["hi"]],
            eps=float(run["eps"]),
            seed=int(run.get("seed", 0)),
            degree=run.get("degree", 8),
            flow=dict(doc.get("flow", {})),
            split=dict(doc.get("split", {})),
            lift=dict(doc.get("lift", {})),
            output=dict(doc.get("output", {})),
            base_dir=str(Path(path).resolve().parent),
        )
    except KeyError as exc:
        raise ConfigError(f"missing required key {exc.args[0]!r}") from exc
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    _check_keys(cfg.flow, _FLOW_KEYS, "flow")
    _check_keys(cfg.split, _SPLIT_KEYS, "split")
    _check_keys(cfg.lift, _LIFT_KEYS, "lift")
    _check_keys(cfg.output, _OUT_KEYS, "output")
    if not cfg.eps > 0:
        raise ConfigError("eps must be positive")
    if len(cfg.lo) != cfg.d_x or len(cfg.hi) != cfg.d_x:
        raise ConfigError("domain bounds must have d_x entries")
    return cfg


def pipeline_config(cfg: RunConfig) -> PipelineConfig:
    try:
        target = resolve_target(cfg.target, cfg.d_x)
        box = BoxDomain(np.array(cfg.lo), np.array(cfg.hi))
    except (TargetError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if target.d_x != box.dim:
        raise ConfigError(f"target takes {target.d_x} inputs but the domain has {box.dim}")
    fl, sp, li = cfg.flow, cfg.split, cfg.lift
    n = sp.get("n", "auto")
    tol = sp.get("tol", "auto")
    degree = cfg.degree if isinstance(cfg.degree, int) else tuple(cfg.degree)
    return PipelineConfig(
        target=target,
        box=box,
        eps=cfg.eps,
        degree=degree,
        lift_policy=li.get("policy", "auto"),
        coupling_layers=int(li.get("layers", 6)),
        coupling_budget=int(li.get("budget", 60)),
        terms=int(fl.get("terms", 8)),
        intervals=int(fl.get("intervals", 4)),
        flow_seed=int(fl.get("seed", cfg.seed)),
        flow_budget=int(fl.get("budget", 30)),
        flow_steps=int(fl.get("steps", 8)),
        n=None if n == "auto" else int(n),
        max_n=int(sp.get("max_n", 1024)),
        step_tol=None if tol == "auto" else float(tol),
        max_depth=int(sp.get("max_depth", 400)),
        leaky_alpha=float(sp.get("alpha", 0.99)),
        seed=cfg.seed,
    )


# --- persistence ----------------------------------------------------------------


def atomic_write(path, text: str) -> None:
    """Write ``text`` to ``path`` through a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    mask = os.umask(0)
    os.umask(mask)
    try:
        os.chmod(tmp, 0o666 & ~mask)
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def report_json(report: dict) -> str:
    return json.dumps(_jsonable(report), indent=1, sort_keys=True) + "\n"


# --- commands ----------------------------------------------------------------------


def reference_rows(d_x: int, d_y: int) -> list[tuple[str, str, str, str]]:
    """Known minimum-width results as static reference data.

    Each row is (function class, activation, formula, value at ``(d_x, d_y)``)
    with ``n/a`` where the row's function class does not apply.
    """
    na = "n/a"
    return [
        ("C(K, R)", "ReLU", "d_x+1", str(d_x + 1) if d_y == 1 else na),
        ("L^p(R^dx, R^dy)", "ReLU", "max(d_x+1, d_y)", str(max(d_x + 1, d_y))),
        ("C([0,1], R^2)", "ReLU", "3", "3" if (d_x, d_y) == (1, 2) else na),
        ("C(K, R^dy)", "ReLU+STEP", "max(d_x+1, d_y)", str(max(d_x + 1, d_y))),
        ("L^p(K, R^dy)", "leaky-ReLU", "max(d_x, d_y, 2)", str(max(d_x, d_y, 2))),
        ("C(K, R^dy)", "ReLU+FLOOR", "max(d_x, d_y, 2)", str(max(d_x, d_y, 2))),
        ("C(K, R^dy)", "leaky-ReLU", "max(d_x+1, d_y) + 1[d_y=d_x+1]", str(min_width(d_x, d_y))),
    ]


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Construct and check minimum-width leaky-ReLU networks."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.argument("d_x", type=click.IntRange(min=1))
@click.argument("d_y", type=click.IntRange(min=1))
def widths(d_x, d_y):
    """Print the minimum width for D_X inputs and D_Y outputs."""
    w = min_width(d_x, d_y)
    note = "  (indicator case d_y=d_x+1)" if d_y == d_x + 1 else ""
    click.echo(f"w_min({d_x}, {d_y}) = {w}{note}")
    click.echo("")
    rows = reference_rows(d_x, d_y)
    widths_ = [max(len(r[k]) for r in rows) for k in range(4)]
    head = ("functions", "activation", "minimum width", "value")
    widths_ = [max(a, len(b)) for a, b in zip(widths_, head)]
    fmt = "  ".join(f"{{:<{k}}}" for k in widths_)
    click.echo(fmt.format(*head))
    for r in rows:
        click.echo(fmt.format(*r))


@main.command()
@click.option("-c", "--config", "config_path", required=True, type=click.Path(dir_okay=False), help="TOML run file.")
def compile(config_path):
    """Run the full construction described by a TOML config."""
    try:
        cfg = load_config(config_path)
        pcfg = pipeline_config(cfg)
    except OSError as exc:
        click.echo(f"error: cannot read config: {exc}", err=True)
        sys.exit(EXIT_IO)
    except (ConfigError, TargetError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    paths = cfg.paths()
    code, report, result = EXIT_OK, None, None
    try:
        result = run_pipeline(pcfg)
        report = result.report
    except (StageFailure, VerificationFailed, BudgetExceeded, BudgetExhausted, CompileError) as exc:
        report = getattr(exc, "report", None) or {}
        report = dict(report)
        report["success"] = False
        report["failure"] = {"stage": _stage_of(exc), "message": str(exc)}
        if isinstance(exc, BudgetExceeded):
            report["stage_errors"] = exc.stage_errors
        code = EXIT_FAIL
    except (ValueError, TargetError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    report["config"] = {k: v for k, v in asdict(cfg).items() if k != "base_dir"}
    report["artifacts"] = {}
    try:
        if result is not None:
            atomic_write(paths["net"], serialize_net(result.net))
            atomic_write(paths["field"], serialize_field(result.flow_field))
            report["artifacts"] = {"net": paths["net"], "field": paths["field"]}
        report["artifacts"]["report"] = paths["report"]
        atomic_write(paths["report"], report_json(report))
    except OSError as exc:
        click.echo(f"error: cannot write artifacts: {exc}", err=True)
        sys.exit(EXIT_IO)
    if code == EXIT_OK:
        click.echo(f"ok: end-to-end error {report['end_to_end']:.6g} <= eps {cfg.eps:g}; net written to {paths['net']}")
    else:
        click.echo(f"failed ({report['failure']['stage']}): {report['failure']['message']}", err=True)
    sys.exit(code)


def _stage_of(exc) -> str:
    if isinstance(exc, StageFailure):
        return exc.stage
    if isinstance(exc, VerificationFailed):
        return "lift"
    if isinstance(exc, BudgetExhausted):
        return "BudgetExhausted"
    if isinstance(exc, BudgetExceeded):
        return "BudgetExceeded"
    return "compile"


def _parse_dom(values, d_x):
    bounds = []
    for v in values:
        parts = v.split(",")
        if len(parts) != 2:
            raise ConfigError(f"--dom expects LO,HI, got {v!r}")
        bounds.append((float(parts[0]), float(parts[1])))
    if len(bounds) == 1 and d_x > 1:
        bounds = bounds * d_x
    if len(bounds) != d_x:
        raise ConfigError(f"need {d_x} --dom ranges, got {len(bounds)}")
    lo, hi = zip(*bounds)
    return BoxDomain(np.array(lo), np.array(hi))


def verify_error(net, target: TargetFunction, box: BoxDomain, per_dim: int) -> tuple[float, float]:
    """Sup error on the report grid and its change under twofold refinement."""
    if net.input_dim != target.d_x or net.output_dim != target.d_y:
        raise ConfigError(
            f"network maps R^{net.input_dim} -> R^{net.output_dim} but target maps R^{target.d_x} -> R^{target.d_y}"
        )
    X = verification_points(box, per_dim)
    e1 = float(np.max(np.abs(eval_net(net, X) - eval_target(target, X))))
    X2 = verification_points(box, 2 * per_dim - 1)
    e2 = float(np.max(np.abs(eval_net(net, X2) - eval_target(target, X2))))
    return e1, e2 - e1


@main.command()
@click.argument("net_path", type=click.Path(dir_okay=False))
@click.option("--target", "target_spec", required=True, help="Expression or builtin name.")
@click.option("--dom", "doms", multiple=True, default=("-1,1",), show_default=True, help="LO,HI per input (repeat or broadcast).")
@click.option("--grid", "per_dim", default=257, show_default=True, type=click.IntRange(min=2))
@click.option("--dx", "d_x", type=click.IntRange(min=1), default=None, help="Input dimension (defaults to the net's).")
def verify(net_path, target_spec, doms, per_dim, d_x):
    """Measure the grid sup error of a saved network against a target."""
    try:
        with open(net_path) as fh:
            net = deserialize_net(fh.read())
    except OSError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_IO)
    except NetworkError as exc:
        click.echo(f"error: bad network file: {exc}", err=True)
        sys.exit(EXIT_IO)
    try:
        target = resolve_target(target_spec, d_x or net.input_dim)
        box = _parse_dom(doms, target.d_x)
        err, delta = verify_error(net, target, box, per_dim)
    except (ConfigError, TargetError, ValueError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    click.echo(f"sup_error {err!r}")
    click.echo(f"refined_delta {delta!r}")


DEMOS = ("four2d", "four3d", "forced", "monotone1")


def topo_rows(demo: str, seed: int, count: int, eps: float, amplitude: float, eps0: float):
    """Header and rows of the witness table for ``demo``."""
    if demo == "four2d":
        hits = topo.self_intersections(topo.four_curve(2), 1e-12)
        return ["s", "t", "x", "y"], [(h.s, h.t, *h.point) for h in hits]
    if demo == "four3d":
        hits = topo.self_intersections(topo.four_curve(3, eps), 1e-9)
        return ["s", "t", "x", "y", "z"], [(h.s, h.t, *h.point) for h in hits]
    if demo == "forced":
        rows = []
        for k in range(count):
            h = topo.perturb_curve(topo.four_curve(2), np.random.default_rng([seed, k]), amplitude)
            v = topo.forced_intersection_check(h, eps0)
            x, y = v.point if v.point else (float("nan"), float("nan"))
            rows.append((k, str(v), x, y, v.distance))
        return ["index", "verdict", "x", "y", "distance"], rows
    if demo == "monotone1":
        rng = np.random.default_rng(seed)
        rows = []
        for k in range(count):
            depth = int(rng.integers(1, 11))
            net = topo.random_width1_net(rng, depth)
            mono, err = topo.monotone_width1_probe(net)
            rows.append(("random", k, depth, mono, err))
        net, err = topo.search_width1(seed)
        rows.append(("search", count, net.depth, topo.monotone_width1_probe(net)[0], err))
        return ["kind", "index", "depth", "is_monotone", "sup_error"], rows
    raise click.BadParameter(f"unknown demo {demo!r}")


@main.command(name="topo")
@click.argument("demo", type=click.Choice(DEMOS))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--count", default=100, show_default=True, type=click.IntRange(min=0))
@click.option("--eps", default=0.1, show_default=True, type=float, help="z-lift of the 3-D curve.")
@click.option("--amplitude", default=0.3, show_default=True, type=float)
@click.option("--eps0", default=0.5, show_default=True, type=float)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None, help="CSV file (stdout if omitted).")
def topo_cmd(demo, seed, count, eps, amplitude, eps0, out_path):
    """Emit witness tables for the topological obstructions."""
    try:
        header, rows = topo_rows(demo, seed, count, eps, amplitude, eps0)
    except topo.PreconditionViolated as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_FAIL)
    if out_path is None:
        w = csv.writer(sys.stdout)
        w.writerow(header)
        w.writerows(rows)
        return
    try:
        topo.write_rows_csv(out_path, header, rows)
    except OSError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_IO)
    click.echo(f"{len(rows)} row(s) written to {out_path}")


if __name__ == "__main__":
    main()
