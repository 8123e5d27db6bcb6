"""End-to-end construction: surrogate, lift, flow fit, splitting and compilation.

Every stage error is measured in output space (after ``beta``) on the same
verification grid, so the end-to-end error is bounded by their sum.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .flow import FlowBlowUp, PiecewiseConstantField, fit_flow, flow_map
from .lift import LiftTriple, select_lift
from .nn_core import AffineMap, BoxDomain, NarrowNet, compose, eval_net, min_width, net_from_affines
from .poly_approx import fit_polynomial
from .split_compile import (
    BudgetExceeded,
    CompiledBlock,
    SplitSchedule,
    ToleranceUnreachable,
    assemble,
    compile_step,
    make_schedule,
    plan_budget,
    schedule_boxes,
)
from .target_lang import TargetFunction, eval_target

__all__ = [
    "PipelineConfig",
    "PipelineResult",
    "StageFailure",
    "run_pipeline",
    "verification_points",
    "pad_target",
    "refined_error",
]

log = logging.getLogger(__name__)


class StageFailure(RuntimeError):
    """A pipeline stage missed its allocation; ``stage`` names it."""

    def __init__(self, stage: str, message: str, report: dict | None = None):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.report = report or {}


@dataclass
class PipelineConfig:
    target: TargetFunction
    box: BoxDomain
    eps: float
    degree: int | tuple = 8
    proportions: tuple = (1 / 3, 1 / 3, 1 / 3)
    lift_policy: str = "auto"
    coupling_layers: int = 6
    coupling_budget: int = 60
    terms: int = 8
    intervals: int = 4
    flow_seed: int = 0
    flow_budget: int = 30
    flow_steps: int = 8
    fit_per_dim: int = 33
    n: int | None = None
    max_n: int = 1024
    step_tol: float | None = None
    max_depth: int = 400
    leaky_alpha: float = 0.99
    seed: int = 0
    verify_per_dim: int = 257
    retries: int = 4


@dataclass
class PipelineResult:
    net: NarrowNet | None
    report: dict
    flow_field: PiecewiseConstantField | None = None
    lift: LiftTriple | None = None
    schedule: SplitSchedule | None = None
    blocks: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return bool(self.report.get("success"))


def verification_points(box: BoxDomain, per_dim: int) -> np.ndarray:
    """Grid used for every stage error; capped at about 10^5 points."""
    per = per_dim if box.dim == 1 else max(9, min(per_dim, int(1e5 ** (1.0 / box.dim))))
    return box.grid(per)


def pad_target(f: TargetFunction, box: BoxDomain) -> tuple[TargetFunction, BoxDomain]:
    """Square up ``f`` to ``d = max(d_x, d_y)`` by zero filling.

    Extra inputs range over ``[-1, 1]`` and are ignored; extra outputs are 0.
    """
    d = max(f.d_x, f.d_y)
    if f.d_x == f.d_y:
        return f, box
    lo = np.concatenate([box.lo, -np.ones(d - f.d_x)])
    hi = np.concatenate([box.hi, np.ones(d - f.d_x)])

    def padded(X):
        Y = np.zeros((X.shape[0], d))
        Y[:, : f.d_y] = eval_target(f, X[:, : f.d_x])
        return Y

    return TargetFunction(d, d, None, f"pad({f.name})", padded), BoxDomain(lo, hi)


def _embed_maps(d_x: int, d_y: int, d: int):
    P = AffineMap(np.eye(d)[:, :d_x], np.zeros(d))
    Q = AffineMap(np.eye(d)[:d_y, :], np.zeros(d_y))
    return P, Q


def _sup(a, b, cols: int | None = None) -> float:
    diff = np.asarray(a) - np.asarray(b)
    if cols is not None:
        diff = diff[:, :cols]
    return float(np.max(np.abs(diff)))


def run_pipeline(cfg: PipelineConfig) -> PipelineResult:
    """Build a width ``max(d_x, d_y) + 1`` network approximating ``cfg.target``.

    Raises :class:`StageFailure` when a stage misses its share of the budget;
    the partial report is attached.
    """
    f0, box0 = cfg.target, cfg.box
    f, box = pad_target(f0, box0)
    d = f.d_x
    N = d + 1
    budget = plan_budget(cfg.eps, cfg.proportions)
    report: dict = {
        "target": str(f0),
        "d_x": f0.d_x,
        "d_y": f0.d_y,
        "eps": cfg.eps,
        "width": N,
        "w_min": min_width(f0.d_x, f0.d_y),
        "budget": {"lift": budget.lift, "flow": budget.flow, "discretization": budget.discretization},
        "stage_errors": {},
        "timings": {},
        "success": False,
    }
    stages = report["stage_errors"]
    dy = f0.d_y

    def sup(a, b):
        # padded output coordinates are dropped by the final projection
        return _sup(a, b, dy)

    clock = time.perf_counter()

    def lap(name):
        nonlocal clock
        now = time.perf_counter()
        report["timings"][name] = now - clock
        clock = now

    X = verification_points(box, cfg.verify_per_dim)
    fX = eval_target(f, X)

    p = fit_polynomial(f, box, cfg.degree)
    report["poly"] = {"degree": list(p.degree), "eps_p": p.eps_p, "kappa": p.kappa, "grid_per_dim": p.grid_per_dim}
    stages["poly"] = p.eps_p
    lap("poly")

    lift, attempts = select_lift(
        p, policy=cfg.lift_policy, coupling_layers=cfg.coupling_layers, seed=cfg.seed, budget=cfg.coupling_budget
    )
    report["lift"] = {"backend": lift.backend, "attempts": [r.to_dict() for r in attempts]}
    Z = lift.alpha_map(X)
    lift_out = lift.beta_map(lift.phi(Z))
    stages["lift"] = sup(lift_out, fX)
    lap("lift")
    if stages["lift"] > budget.lift:
        raise StageFailure("lift", f"error {stages['lift']:.4g} exceeds allocation {budget.lift:.4g}", report)

    Xfit = box.grid(cfg.fit_per_dim if d == 1 else max(5, int(round(400 ** (1.0 / d)))))
    Zfit = lift.alpha_map(Xfit)
    fit = fit_flow(
        lift.phi,
        Zfit,
        terms=cfg.terms,
        intervals=cfg.intervals,
        seed=cfg.flow_seed,
        budget=cfg.flow_budget,
        steps_per_interval=cfg.flow_steps,
    )
    fld = fit.field
    ref_steps = 4 * cfg.flow_steps
    try:
        flowZ = flow_map(fld, Z, ref_steps)
    except FlowBlowUp as exc:
        raise StageFailure("flow", f"fitted field blows up at t={exc.t:g}", report) from exc
    stages["flow"] = sup(lift.beta_map(flowZ), lift_out)
    report["flow"] = {
        "terms": cfg.terms,
        "intervals": cfg.intervals,
        "seed": cfg.flow_seed,
        "budget": cfg.flow_budget,
        "fit_sup_error": fit.sup_error,
        "evaluations": fit.evaluations,
    }
    lap("flow")
    if stages["flow"] > budget.flow:
        raise StageFailure(
            "flow", f"BudgetExhausted: best fit error {stages['flow']:.4g} exceeds allocation {budget.flow:.4g}", report
        )

    # unused lift and flow allowance moves to discretization
    disc = cfg.eps - stages["lift"] - stages["flow"]
    flow_out = lift.beta_map(flowZ)
    n, schedule, split_err = _choose_n(cfg, fld, lift, Z, flow_out, 0.5 * disc, dy)
    stages["splitting"] = split_err
    report["split"] = {"n": n, "steps": len(schedule)}
    lap("splitting")
    if split_err > 0.5 * disc:
        raise StageFailure("splitting", f"error {split_err:.4g} at n={n} exceeds {0.5 * disc:.4g}", report)

    sched_out = lift.beta_map(schedule(Z))
    compile_room = cfg.eps - stages["lift"] - stages["flow"] - split_err
    boxes = schedule_boxes(schedule, Z)
    active = sum(not s.is_identity for s in schedule.steps)
    beta_gain = float(np.max(np.sum(np.abs(lift.beta_map.W[:dy]), axis=1)))
    tol = cfg.step_tol or compile_room / (beta_gain * max(1.0, math.sqrt(active)))
    P, Q = _embed_maps(f0.d_x, f0.d_y, d)
    X0 = verification_points(box0, cfg.verify_per_dim)
    f0X = eval_target(f0, X0)
    for attempt in range(cfg.retries + 1):
        blocks = _compile_schedule(schedule, boxes, cfg, tol)
        square = assemble(lift.alpha_map, [b.net for b in blocks], lift.beta_map, N, cfg.leaky_alpha)
        stages["compile"] = sup(eval_net(square, X), sched_out)
        net = _wrap(square, P, Q, N, cfg.leaky_alpha)
        end = _sup(eval_net(net, X0), f0X)
        log.info("compile attempt %d: step tol %.3g, compile %.4g, end-to-end %.4g", attempt, tol, stages["compile"], end)
        if end <= cfg.eps or cfg.step_tol is not None:
            break
        tol *= 0.5
    lap("compile")
    depths = [b.depth for b in blocks]
    report["split"].update(
        step_tol=tol,
        depths=depths,
        backends={k: sum(b.backend == k for b in blocks) for k in sorted({b.backend for b in blocks})},
        max_step_error=max((b.error for b in blocks), default=0.0),
    )
    report["net"] = {"depth": net.depth, "declared_width": net.declared_width, "alpha": cfg.leaky_alpha}
    report["end_to_end"] = end
    report["verify_grid"] = {"per_dim": cfg.verify_per_dim, "points": len(X0)}
    report["success"] = end <= cfg.eps
    result = PipelineResult(net, report, fld, lift, schedule, blocks)
    if not report["success"]:
        raise BudgetExceeded(dict(stages), end, cfg.eps)
    return result


def _choose_n(cfg, fld, lift, Z, flow_out, target, cols=None):
    """Smallest ``intervals * 2^m`` whose splitting error is at most ``target``."""
    if cfg.n is not None:
        sched = make_schedule(fld, cfg.n)
        return cfg.n, sched, _sup(lift.beta_map(sched(Z)), flow_out, cols)
    n = cfg.intervals
    while True:
        sched = make_schedule(fld, n)
        err = _sup(lift.beta_map(sched(Z)), flow_out, cols)
        if err <= target or 2 * n > cfg.max_n:
            return n, sched, err
        n *= 2


def _compile_schedule(schedule, boxes, cfg, tol) -> list[CompiledBlock]:
    blocks = []
    for idx, (step, bx) in enumerate(zip(schedule.steps, boxes)):
        try:
            blk = compile_step(step, bx, cfg.leaky_alpha, tol, cfg.max_depth, seed=cfg.seed + idx)
        except ToleranceUnreachable as exc:
            if exc.best is None:
                raise
            blk = exc.best
        blocks.append(blk)
    return blocks


def _wrap(net: NarrowNet, P: AffineMap, Q: AffineMap, width: int, alpha: float) -> NarrowNet:
    if P.in_dim == P.out_dim and np.array_equal(P.W, np.eye(P.out_dim)) and np.array_equal(Q.W, np.eye(Q.in_dim)):
        return net
    net = compose(net, net_from_affines([P], width, alpha), width)
    return compose(net_from_affines([Q], width, alpha), net, width)


def refined_error(net: NarrowNet, f: TargetFunction, box: BoxDomain, per_dim: int) -> tuple[float, float]:
    """Sup error on the grid and on the grid refined by two; returns both."""
    X1 = verification_points(box, per_dim)
    X2 = verification_points(box, 2 * per_dim - 1)
    e1 = _sup(eval_net(net, X1), eval_target(f, X1))
    e2 = _sup(eval_net(net, X2), eval_target(f, X2))
    return e1, e2
