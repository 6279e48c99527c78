"""Bounded optimisation and grid sweeps over the full sensing chain."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .nv_levels import diamond_response
from .sensing import (
    MAX_THRESHOLD_CURRENT,
    Chain,
    NoiseModel,
    chain_sensitivity,
    classify,
    current_shot_noise,
    evaluate_chain,
)

# where each tunable lives in a Chain, and whether it is searched in log10
VARIABLES = {
    "R1": ("cavity", "R1", False),
    "Gamma": ("diode", "Gamma", False),
    "a": ("diode", "a", True),
    "T2_star": ("nv", "t2_star", True),
    "N_NV": ("nv", "density_ppm", True),
}
# extra knobs accepted by sweep() only
SWEEP_VARIABLES = {
    **VARIABLES,
    "alpha_c": ("cavity", "alpha_c", False),
    "L_r": ("cavity", "L_r", False),
    "beta": ("diode", "beta", False),
    "N_tr": ("diode", "N_tr", False),
    "thickness": ("nv", "thickness", False),
    "intensity": ("pump", "intensity", False),
    "rabi": ("pump", "rabi_frequency", False),
}

DEFAULT_STARTS = 16
MAX_START_BATCHES = 8  # Latin batches drawn while looking for feasible starts
MAX_ITER = 500
FTOL = 1e-8
FD_STEP = 1e-4
ARMIJO_C = 1e-4
MAX_BACKTRACK = 40


class OptimizationError(RuntimeError):
    pass


class InfeasibleStartError(OptimizationError):
    def __init__(self, violations: Mapping[str, int], tried: int):
        self.violations = dict(violations)
        self.tried = tried
        parts = ", ".join(f"{k} in {v}/{tried}" for k, v in self.violations.items())
        super().__init__(f"no feasible starting point in {tried} candidates; violated: {parts}")


def apply_values(chain: Chain, values: Mapping[str, float], table=SWEEP_VARIABLES) -> Chain:
    """Return a copy of ``chain`` with the named parameters replaced."""
    groups: dict[str, dict] = {}
    for name, v in values.items():
        if name not in table:
            raise KeyError(f"unknown variable {name!r}")
        part, attr, _ = table[name]
        groups.setdefault(part, {})[attr] = float(v)
    out = chain
    for part, changes in groups.items():
        out = replace(out, **{part: replace(getattr(out, part), **changes)})
    return out


# --------------------------------------------------------------------------
# generic projected gradient descent on a box


@dataclass
class DescentResult:
    x: np.ndarray
    fun: float
    trace: list[float]
    n_iter: int
    converged: bool


def _fd_gradient(f, x, fx, lo, hi, step, central=False):
    g = np.zeros_like(x)
    for i in range(x.size):
        h = step * max(abs(x[i]), 1.0)
        xp = x.copy()
        if x[i] + h <= hi[i]:
            xp[i] = x[i] + h
        else:
            h = -h
            xp[i] = x[i] + h
        fp = f(xp)
        if not math.isfinite(fp):
            # forward point infeasible: try the other side
            h = -h
            xp[i] = x[i] + h
            if not lo[i] <= xp[i] <= hi[i]:
                continue
            fp = f(xp)
            if not math.isfinite(fp):
                continue
        g[i] = (fp - fx) / h
        if central:
            xm = x.copy()
            xm[i] = x[i] - h
            if lo[i] <= xm[i] <= hi[i]:
                fm = f(xm)
                if math.isfinite(fm):
                    g[i] = (fp - fm) / (2.0 * h)
    return g


def projected_gradient_descent(
    f: Callable[[np.ndarray], float],
    x0: Sequence[float],
    lower: Sequence[float],
    upper: Sequence[float],
    max_iter: int = MAX_ITER,
    ftol: float = FTOL,
    step: float = FD_STEP,
) -> DescentResult:
    """Minimise ``f`` over a box; non-finite values of f mark infeasible points.

    Variables are rescaled to the unit box. Gradients are forward differences
    until progress stalls; the O(h) bias of those would then park the iterate
    about h/2 off the minimum, so the search switches to central differences
    and only stops once those stall too. Steps are projected onto the box and
    accepted on the Armijo condition, so an infeasible trial point is simply
    rejected by backtracking.
    """
    lo = np.asarray(lower, dtype=float)
    hi = np.asarray(upper, dtype=float)
    span = hi - lo
    if np.any(~np.isfinite(span)) or np.any(span <= 0):
        raise OptimizationError("bounds must be finite with lower < upper")

    def fu(u):
        return f(lo + u * span)

    u = np.clip((np.asarray(x0, dtype=float) - lo) / span, 0.0, 1.0)
    fx = fu(u)
    if not math.isfinite(fx):
        raise OptimizationError("objective is not finite at the starting point")
    trace = [fx]
    t = 0.1
    converged = False
    central = False
    n = 0
    for n in range(1, max_iter + 1):
        g = _fd_gradient(fu, u, fx, np.zeros_like(u), np.ones_like(u), step, central)
        if not np.any(g):
            if central:
                converged = True
                break
            central = True
            continue
        t = min(t * 4.0, 1e6)
        accepted = False
        for _ in range(MAX_BACKTRACK):
            trial = np.clip(u - t * g, 0.0, 1.0)
            d = trial - u
            if not np.any(d):
                break
            ft = fu(trial)
            if math.isfinite(ft) and ft <= fx + ARMIJO_C * float(g @ d):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            if central:
                converged = True
                break
            central = True
            t = 0.1
            continue
        change = abs(fx - ft) / max(abs(fx), 1e-300)
        u, fx = trial, ft
        trace.append(fx)
        if change < ftol:
            if central:
                converged = True
                break
            central = True
    return DescentResult(lo + u * span, fx, trace, n, converged)


# --------------------------------------------------------------------------
# the sensing problem


@dataclass(frozen=True)
class OptimizationProblem:
    base: Chain
    bounds: Mapping[str, tuple[float, float]]
    noise: NoiseModel = NoiseModel("optical_shot")
    max_current: float = MAX_THRESHOLD_CURRENT
    n_starts: int = DEFAULT_STARTS
    max_iter: int = MAX_ITER
    fixed: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.bounds:
            raise OptimizationError("at least one free variable is required")
        for name, (lo, hi) in self.bounds.items():
            if name not in VARIABLES:
                raise OptimizationError(f"{name!r} cannot be optimised; choose from {sorted(VARIABLES)}")
            if not (math.isfinite(lo) and math.isfinite(hi) and 0 < lo < hi):
                raise OptimizationError(f"bounds for {name} must be finite, positive and increasing")
        overlap = set(self.bounds) & set(self.fixed)
        if overlap:
            raise OptimizationError(f"variables both free and fixed: {sorted(overlap)}")
        if self.n_starts < 1:
            raise OptimizationError("n_starts must be >= 1")

    @property
    def names(self) -> list[str]:
        return list(self.bounds)

    def chain_at(self, values: Mapping[str, float]) -> Chain:
        return apply_values(apply_values(self.base, self.fixed), values)

    def _to_internal(self, name, v):
        return math.log10(v) if VARIABLES[name][2] else v

    def _to_external(self, name, x):
        return 10.0**x if VARIABLES[name][2] else x

    def internal_bounds(self):
        lo = [self._to_internal(n, self.bounds[n][0]) for n in self.names]
        hi = [self._to_internal(n, self.bounds[n][1]) for n in self.names]
        return np.array(lo), np.array(hi)

    def values(self, x: Sequence[float]) -> dict[str, float]:
        return {n: self._to_external(n, float(xi)) for n, xi in zip(self.names, x)}


@dataclass
class OptimizationResult:
    params: dict[str, float]
    sensitivity: float
    trace: list[float]
    n_iter: int
    converged: bool
    I_th: float
    delta_I_th: float
    shot_noise: float
    constraints_active: dict[str, bool]
    start_values: list[float]  # best delta B reached from each start
    seed: int


class _Objective:
    """log delta B at a chain point; +inf where a constraint is violated."""

    def __init__(self, problem: OptimizationProblem):
        self.problem = problem
        self._responses: dict = {}
        self.n_evals = 0

    def _response(self, chain: Chain):
        # occupancies do not depend on NV density, but keep it simple: key on the
        # full diamond + pump state
        key = (chain.nv.density_ppm, chain.nv.t2_star, chain.nv.thickness, chain.pump)
        r = self._responses.get(key)
        if r is None:
            if len(self._responses) > 50000:
                self._responses.clear()
            r = diamond_response(chain.nv, chain.pump)
            self._responses[key] = r
        return r

    def evaluate(self, values: Mapping[str, float]):
        p = self.problem
        chain = p.chain_at(values)
        point = evaluate_chain(chain, self._response(chain))
        rep = chain_sensitivity(chain, p.noise, point=point)
        return chain, point, rep

    def feasible(self, point, bandwidth) -> bool:
        return classify(point.I_th_off, point.delta_I_th, current_shot_noise(point.I_th_off, bandwidth), self.problem.max_current) == "B"

    def __call__(self, x) -> float:
        self.n_evals += 1
        values = self.problem.values(x)
        try:
            _, point, rep = self.evaluate(values)
        except (ValueError, ArithmeticError):
            return math.inf
        if not self.feasible(point, self.problem.noise.bandwidth) or not rep.sensitivity > 0:
            return math.inf
        return math.log(rep.sensitivity)


def latin_starts(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """n points in the unit cube, one per stratum along every axis."""
    u = np.empty((n, dim))
    for j in range(dim):
        u[:, j] = (rng.permutation(n) + rng.random(n)) / n
    return u


def optimize(problem: OptimizationProblem, seed: int = 0) -> OptimizationResult:
    """Multi-start projected gradient descent of the shot-noise-limited delta B."""
    obj = _Objective(problem)
    lo, hi = problem.internal_bounds()
    rng = np.random.default_rng(seed)
    starts: list[np.ndarray] = []
    violations = {"I_th > max current": 0, "delta I_th < shot noise": 0, "chain error": 0}
    tried = 0
    for _ in range(MAX_START_BATCHES):
        for u in latin_starts(problem.n_starts, lo.size, rng):
            x = lo + u * (hi - lo)
            tried += 1
            try:
                _, point, _ = obj.evaluate(problem.values(x))
            except (ValueError, ArithmeticError):
                violations["chain error"] += 1
                continue
            if point.I_th_off > problem.max_current:
                violations["I_th > max current"] += 1
            elif point.delta_I_th < current_shot_noise(point.I_th_off, problem.noise.bandwidth):
                violations["delta I_th < shot noise"] += 1
            elif math.isfinite(obj(x)):
                starts.append(x)
            if len(starts) == problem.n_starts:
                break
        if len(starts) == problem.n_starts:
            break
    if not starts:
        raise InfeasibleStartError({k: v for k, v in violations.items() if v}, tried)

    runs = [projected_gradient_descent(obj, x0, lo, hi, max_iter=problem.max_iter) for x0 in starts]
    # first index wins ties so the result is order-deterministic
    best = min(range(len(runs)), key=lambda i: (runs[i].fun, i))
    run = runs[best]
    params = problem.values(run.x)
    _, point, rep = obj.evaluate(params)
    i_sh = current_shot_noise(point.I_th_off, problem.noise.bandwidth)
    active = {
        "threshold_current": point.I_th_off >= problem.max_current * (1 - 1e-3),
        "shot_noise": point.delta_I_th <= i_sh * (1 + 1e-3),
    }
    for n, xi, l, h in zip(problem.names, run.x, lo, hi):
        tol = 1e-6 * (h - l)
        active[f"{n}_bound"] = bool(xi <= l + tol or xi >= h - tol)
    return OptimizationResult(
        params=params,
        sensitivity=rep.sensitivity,
        trace=[math.exp(v) for v in run.trace],
        n_iter=run.n_iter,
        converged=run.converged,
        I_th=point.I_th_off,
        delta_I_th=point.delta_I_th,
        shot_noise=i_sh,
        constraints_active=active,
        start_values=[math.exp(r.fun) for r in runs],
        seed=seed,
    )


# --------------------------------------------------------------------------
# sweeps

DEFAULT_CELL_BUDGET = 1_000_000
SWEEP_COLUMNS = ("I_th_A", "delta_I_th_A", "shot_noise_A", "sensitivity_T_rtHz", "region", "error")


def sweep(
    variables: Mapping[str, Iterable[float]],
    base: Chain,
    noise: NoiseModel | None = None,
    checkpoint: str | Path | None = None,
    budget: int = DEFAULT_CELL_BUDGET,
    max_current: float = MAX_THRESHOLD_CURRENT,
) -> list[dict]:
    """Row-major grid evaluation of the chain.

    Each row holds the grid point, threshold current and shift, drive-current
    shot noise, sensitivity for ``noise`` and the region label. A failing cell
    keeps its row with the error message and NaNs. With ``checkpoint`` set,
    finished rows are appended to that file as they complete and a rerun
    resumes from it.
    """
    from .config_io import CheckpointFile  # checkpoint format lives with the other IO

    noise = noise or NoiseModel("current_shot")
    names = list(variables)
    for n in names:
        if n not in SWEEP_VARIABLES:
            raise KeyError(f"unknown sweep variable {n!r}; choose from {sorted(SWEEP_VARIABLES)}")
    grids = [np.asarray(list(variables[n]), dtype=float) for n in names]
    for n, g in zip(names, grids):
        if g.ndim != 1 or g.size == 0 or not np.all(np.isfinite(g)):
            raise ValueError(f"grid for {n} must be a non-empty list of finite numbers")
    total = int(np.prod([g.size for g in grids]))
    if total > budget:
        raise ValueError(f"sweep has {total} cells, over the budget of {budget}")

    key = json.dumps(
        {"vars": {n: g.tolist() for n, g in zip(names, grids)}, "base": base.fingerprint(), "noise": repr(noise), "max_current": max_current},
        sort_keys=True,
    )
    ckpt = CheckpointFile(checkpoint, key) if checkpoint is not None else None
    done = ckpt.load() if ckpt else {}

    responses: dict = {}
    rows = []
    for idx, combo in enumerate(np.ndindex(*[g.size for g in grids])):
        if idx in done:
            rows.append(done[idx])
            continue
        point_vals = {n: float(g[i]) for n, g, i in zip(names, grids, combo)}
        row = dict(point_vals)
        try:
            chain = apply_values(base, point_vals)
            rkey = (chain.nv, chain.pump)
            if rkey not in responses:
                responses[rkey] = diamond_response(chain.nv, chain.pump)
            pt = evaluate_chain(chain, responses[rkey])
            i_sh = current_shot_noise(pt.I_th_off, noise.bandwidth)
            rep = chain_sensitivity(chain, noise, point=pt)
            row.update(
                I_th_A=pt.I_th_off,
                delta_I_th_A=pt.delta_I_th,
                shot_noise_A=i_sh,
                sensitivity_T_rtHz=rep.sensitivity,
                region=classify(pt.I_th_off, pt.delta_I_th, i_sh, max_current),
                error="",
            )
        except Exception as exc:  # a bad cell never aborts the sweep
            row.update(
                I_th_A=math.nan,
                delta_I_th_A=math.nan,
                shot_noise_A=math.nan,
                sensitivity_T_rtHz=math.nan,
                region="",
                error=f"{type(exc).__name__}: {exc}",
            )
        if ckpt:
            ckpt.append(idx, row)
        rows.append(row)
    return rows
