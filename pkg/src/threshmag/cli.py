"""Command-line entry point: ``threshmag <subcommand> --scenario NAME|PATH ...``.

Every subcommand writes one output file (CSV or JSON) and prints a single
``key=value`` summary line whose numbers are formatted exactly as in the file.
Failures print one line to stderr::

    threshmag: error kind=<family> code=<exit> msg=<json string>
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config_io import (
    ConfigError,
    OutputError,
    Scenario,
    _cell,
    emit_results,
    load_scenario,
    parse_config_text,
    scenario_from_values,
    format_scenario,
)
from .laser import ConvergenceError
from .nv_levels import DegenerateSteadyState, GridCellError, contrast_map
from .optimize import InfeasibleStartError, OptimizationError, OptimizationProblem, optimize, sweep
from .sensing import (
    NOISE_KINDS,
    NoiseModel,
    OdmrConfig,
    SensingError,
    chain_sensitivity,
    evaluate_chain,
    feasibility_map,
    fwhm,
    sensitivity,
    spontaneous_emission_study,
    threshold_contrast_to_spectrum,
)

# exit-code families
EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DOMAIN = 4
EXIT_NUMERIC = 5
EXIT_INFEASIBLE = 6
EXIT_IO = 7

DEFAULT_GRIDS = {
    "rabi": "1e3:1e6:64:log",
    "intensity": "1e2:1e9:64:log",
    "a": "1e-23:3.1622776601683795e-20:36:log",
    "gamma": "0.01:0.1:19",
}


class UsageError(ValueError):
    pass


def parse_grid(spec: str) -> np.ndarray:
    """``start:stop:count[:log]``, a comma list, or a single number."""
    spec = spec.strip()
    try:
        if ":" not in spec:
            vals = np.array([float(s) for s in spec.split(",") if s.strip()])
            if vals.size == 0:
                raise ValueError
            return vals
        parts = spec.split(":")
        if len(parts) not in (3, 4) or (len(parts) == 4 and parts[3] not in ("log", "lin")):
            raise ValueError
        start, stop, count = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise UsageError(f"bad grid spec {spec!r}; expected start:stop:count[:log]") from None
    if count < 1:
        raise UsageError(f"grid {spec!r} needs count >= 1")
    if len(parts) == 4 and parts[3] == "log":
        if start <= 0 or stop <= 0:
            raise UsageError(f"log grid {spec!r} needs positive end points")
        g = np.logspace(math.log10(start), math.log10(stop), count)
    else:
        g = np.linspace(start, stop, count)
    g[0] = start
    if count > 1:
        g[-1] = stop
    return g


def _scenario(args) -> Scenario:
    scn = load_scenario(args.scenario)
    overrides = list(args.set or [])
    for flag, key in (("a", "diode.a"), ("gamma", "diode.Gamma"), ("beta", "diode.beta"), ("t2_star", "nv.t2_star"), ("R1", "cavity.R1"), ("alpha_c", "cavity.alpha_c")):
        v = getattr(args, flag, None)
        if v is not None:
            overrides.append(f"{key}={v!r}")
    if not overrides:
        return scn
    values = parse_config_text(format_scenario(scn), scn.name)
    for i, ov in enumerate(overrides, 1):
        if "=" not in ov:
            raise UsageError(f"--set expects key=value, got {ov!r}")
        one = parse_config_text(ov, f"--set[{i}]")
        values.update(one)
    return scenario_from_values(values, f"{args.scenario} (with overrides)")


def _out(args, default: str) -> tuple[Path, str]:
    path = Path(args.output or default)
    fmt = args.format or ("json" if path.suffix == ".json" else "csv")
    return path, fmt


def _summary(**kv) -> str:
    return " ".join(f"{k}={_cell(v)}" for k, v in kv.items())


# --------------------------------------------------------------------------
# subcommands


def cmd_contrast_map(args):
    scn = _scenario(args)
    cmap = contrast_map(scn.nv, parse_grid(args.rabi), parse_grid(args.intensity))
    path, fmt = _out(args, "contrast_map.csv")
    emit_results(cmap, fmt, path, scn)
    k = np.unravel_index(int(np.argmax(cmap.contrast)), cmap.contrast.shape)
    return _summary(
        scenario=scn.name,
        C_max=cmap.contrast[k],
        rabi_hz=cmap.rabi[k[0]],
        intensity_w_m2=cmap.intensity[k[1]],
        output=str(path),
    )


def cmd_threshold_map(args):
    scn = _scenario(args)
    fmap = feasibility_map(scn.chain, parse_grid(args.a_grid), parse_grid(args.gamma_grid), bandwidth=scn.noise("current_shot").bandwidth)
    path, fmt = _out(args, "threshold_map.csv")
    emit_results(fmap, fmt, path, scn)
    return _summary(scenario=scn.name, I_th_min_A=float(fmap.I_th.min()), delta_I_th_max_A=float(fmap.delta_I_th.max()), output=str(path))


def cmd_regions(args):
    scn = _scenario(args)
    fmap = feasibility_map(scn.chain, parse_grid(args.a_grid), parse_grid(args.gamma_grid), bandwidth=scn.noise("current_shot").bandwidth)
    path, fmt = _out(args, "regions.csv")
    emit_results(fmap, fmt, path, scn)
    counts = {r: int(np.sum(fmap.labels == r)) for r in "ABC"}
    return _summary(scenario=scn.name, region_A=counts["A"], region_B=counts["B"], region_C=counts["C"], output=str(path))


def _odmr_config(scn: Scenario, args) -> OdmrConfig:
    cfg = scn.odmr
    if getattr(args, "points", None):
        cfg = OdmrConfig(cfg.center_frequency, cfg.linewidth, cfg.drive_current, None, cfg.span_linewidths, args.points)
    return cfg


def cmd_odmr(args):
    scn = _scenario(args)
    chain = scn.chain
    point = evaluate_chain(chain)
    spec = threshold_contrast_to_spectrum(chain, _odmr_config(scn, args), point)
    path, fmt = _out(args, "odmr.csv")
    emit_results(spec, fmt, path, scn)
    try:
        width = fwhm(spec)
    except SensingError:
        width = math.nan
    return _summary(
        scenario=scn.name,
        I_th_off_A=point.I_th_off,
        delta_I_th_A=point.delta_I_th,
        C=point.contrast,
        P_peak_W=float(np.max(spec.powers)),
        fwhm_hz=width,
        output=str(path),
    )


def cmd_sensitivity(args):
    scn = _scenario(args)
    chain = scn.chain
    point = evaluate_chain(chain)
    kinds = [args.noise] if args.noise else list(NOISE_KINDS)
    rows = []
    for k in kinds:
        noise = NoiseModel(k, scn.noise(k).bandwidth, scn.noise(k).relative_level)
        if args.grid:
            spec = threshold_contrast_to_spectrum(chain, _odmr_config(scn, args), point)
            rep = sensitivity(spec, noise, chain, point)
        else:
            rep = chain_sensitivity(chain, noise, point=point, center=scn.odmr.center_frequency, linewidth=scn.odmr.linewidth)
        rows.append(
            {
                "noise": k,
                "sensitivity_T_rtHz": rep.sensitivity,
                "slope_max_W_Hz": rep.slope_max,
                "slope_frequency_Hz": rep.slope_frequency,
                "operating_power_W": rep.operating_power,
                "drive_current_A": rep.drive_current,
                "noise_level": rep.noise_level,
                "I_th_off_A": rep.I_th_off,
                "delta_I_th_A": rep.delta_I_th,
                "threshold_ok": rep.threshold_ok,
                "shot_ok": rep.shot_ok,
            }
        )
    path, fmt = _out(args, "sensitivity.csv")
    emit_results({"kind": "sensitivity", "rows": rows}, fmt, path, scn)
    return _summary(scenario=scn.name, I_th_off_A=point.I_th_off, C=point.contrast, **{f"dB_{r['noise']}_T_rtHz": r["sensitivity_T_rtHz"] for r in rows}, output=str(path))


def cmd_beta_study(args):
    scn = _scenario(args)
    betas = [float(b) for b in parse_grid(args.betas)]
    res = spontaneous_emission_study(scn.chain, betas, _odmr_config(scn, args), NoiseModel("optical_shot", scn.noise("optical_shot").bandwidth))
    rows = []
    for r in res:
        for i, p in zip(r.currents, r.powers):
            rows.append({"beta": r.beta, "current_A": i, "power_W": p, "sensitivity_T_rtHz": r.report.sensitivity})
    path, fmt = _out(args, "beta_study.csv")
    emit_results({"kind": "beta_study", "rows": rows}, fmt, path, scn)
    ratio = res[-1].report.sensitivity / res[0].report.sensitivity
    return _summary(scenario=scn.name, n_beta=len(res), dB_first_T_rtHz=res[0].report.sensitivity, dB_last_T_rtHz=res[-1].report.sensitivity, degradation=ratio, output=str(path))


def _parse_free(spec: str) -> dict[str, tuple[float, float]]:
    out = {}
    for item in spec.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            name, rng = item.split("=", 1)
            lo, hi = (float(x) for x in rng.split(":"))
        except ValueError:
            raise UsageError(f"bad --free entry {item!r}; expected name=lo:hi") from None
        out[name.strip()] = (lo, hi)
    return out


def cmd_optimize(args):
    scn = _scenario(args)
    problem = OptimizationProblem(
        scn.chain,
        _parse_free(args.free),
        noise=NoiseModel("optical_shot", scn.noise("optical_shot").bandwidth),
        n_starts=args.starts,
        max_iter=args.max_iter,
    )
    res = optimize(problem, seed=args.seed)
    path, fmt = _out(args, "optimize.json")
    row = {f"{k}": v for k, v in res.params.items()}
    row.update(sensitivity_T_rtHz=res.sensitivity, I_th_A=res.I_th, delta_I_th_A=res.delta_I_th, shot_noise_A=res.shot_noise, n_iter=res.n_iter, converged=res.converged, seed=res.seed)
    meta = {"trace_T_rtHz": res.trace, "start_values_T_rtHz": res.start_values, "constraints_active": res.constraints_active}
    emit_results({"kind": "optimization", "rows": [row], "metadata": meta}, fmt, path, scn)
    return _summary(scenario=scn.name, seed=args.seed, dB_T_rtHz=res.sensitivity, I_th_A=res.I_th, **res.params, output=str(path))


def cmd_sweep(args):
    scn = _scenario(args)
    variables = {}
    for v in args.var:
        if "=" not in v:
            raise UsageError(f"--var expects name=grid, got {v!r}")
        name, grid = v.split("=", 1)
        variables[name.strip()] = parse_grid(grid)
    noise = NoiseModel(args.noise, scn.noise(args.noise).bandwidth, scn.noise(args.noise).relative_level)
    try:
        rows = sweep(variables, scn.chain, noise, checkpoint=args.checkpoint, budget=args.budget)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    path, fmt = _out(args, "sweep.csv")
    cols = list(variables) + ["I_th_A", "delta_I_th_A", "shot_noise_A", "sensitivity_T_rtHz", "region", "error"]
    emit_results({"kind": "sweep", "rows": rows, "columns": cols}, fmt, path, scn)
    ok = [r["sensitivity_T_rtHz"] for r in rows if not r["error"]]
    viable = [r["sensitivity_T_rtHz"] for r in rows if r["region"] == "B"]
    return _summary(
        scenario=scn.name,
        cells=len(rows),
        failed=sum(1 for r in rows if r["error"]),
        dB_best_T_rtHz=min(ok) if ok else math.nan,
        dB_best_viable_T_rtHz=min(viable) if viable else math.nan,
        output=str(path),
    )


# --------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="threshmag", description="Laser-threshold NV magnetometry model.")
    p.add_argument("--version", action="version", version=f"threshmag {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp, default_out):
        sp.add_argument("--scenario", required=True, help="preset name (D1, D2, D3, experimental) or scenario file")
        sp.add_argument("-o", "--output", help=f"output file (default {default_out})")
        sp.add_argument("--format", choices=("csv", "json"), help="default: from the file extension, else csv")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any scenario key, e.g. cavity.R1=0.5")
        sp.add_argument("--seed", type=int, default=0)
        for flag, dest in (("--a", "a"), ("--gamma", "gamma"), ("--beta", "beta"), ("--t2-star", "t2_star"), ("--R1", "R1"), ("--alpha-c", "alpha_c")):
            sp.add_argument(flag, dest=dest, type=float)

    sp = sub.add_parser("contrast-map", help="absorption contrast over Rabi frequency x intensity")
    common(sp, "contrast_map.csv")
    sp.add_argument("--rabi", default=DEFAULT_GRIDS["rabi"], help="Hz grid")
    sp.add_argument("--intensity", default=DEFAULT_GRIDS["intensity"], help="W/m^2 grid")
    sp.set_defaults(func=cmd_contrast_map)

    for name, func, out in (("threshold-map", cmd_threshold_map, "threshold_map.csv"), ("regions", cmd_regions, "regions.csv")):
        sp = sub.add_parser(name, help="threshold current and shift over (a, Gamma)" if name == "threshold-map" else "feasibility regions A/B/C over (a, Gamma)")
        common(sp, out)
        sp.add_argument("--a-grid", default=DEFAULT_GRIDS["a"], help="m^2 grid")
        sp.add_argument("--gamma-grid", default=DEFAULT_GRIDS["gamma"])
        sp.set_defaults(func=func)

    sp = sub.add_parser("odmr", help="laser output versus microwave frequency")
    common(sp, "odmr.csv")
    sp.add_argument("--points", type=int, help="number of frequency samples")
    sp.set_defaults(func=cmd_odmr)

    sp = sub.add_parser("sensitivity", help="noise-limited field sensitivity")
    common(sp, "sensitivity.csv")
    sp.add_argument("--noise", choices=NOISE_KINDS, help="default: all three")
    sp.add_argument("--grid", action="store_true", help="use the sampled spectrum instead of the continuous slope")
    sp.add_argument("--points", type=int)
    sp.set_defaults(func=cmd_sensitivity)

    sp = sub.add_parser("beta-study", help="P-I curves and sensitivity versus spontaneous emission factor")
    common(sp, "beta_study.csv")
    sp.add_argument("--betas", default="0,1e-5,1e-4,1e-3,1e-2")
    sp.add_argument("--points", type=int)
    sp.set_defaults(func=cmd_beta_study)

    sp = sub.add_parser("optimize", help="multi-start gradient descent of the optical-shot sensitivity")
    common(sp, "optimize.json")
    sp.add_argument("--free", default="R1=0.01:0.99,Gamma=0.01:0.1,a=1e-22:1e-17,N_NV=0.001:100", help="name=lo:hi list")
    sp.add_argument("--starts", type=int, default=16)
    sp.add_argument("--max-iter", type=int, default=500)
    sp.set_defaults(func=cmd_optimize)

    sp = sub.add_parser("sweep", help="grid sweep over named parameters")
    common(sp, "sweep.csv")
    sp.add_argument("--var", action="append", required=True, metavar="NAME=GRID")
    sp.add_argument("--noise", choices=NOISE_KINDS, default="current_shot")
    sp.add_argument("--checkpoint", help="JSON-lines file for resuming")
    sp.add_argument("--budget", type=int, default=1_000_000, help="maximum number of cells")
    sp.set_defaults(func=cmd_sweep)
    return p


def _classify_error(exc: BaseException) -> tuple[str, int]:
    if isinstance(exc, UsageError):
        return "usage", EXIT_USAGE
    if isinstance(exc, ConfigError):
        return "config", EXIT_CONFIG
    if isinstance(exc, (OutputError, OSError)):
        return "io", EXIT_IO
    if isinstance(exc, InfeasibleStartError):
        return "infeasible", EXIT_INFEASIBLE
    if isinstance(exc, (ConvergenceError, DegenerateSteadyState, GridCellError, OptimizationError, FloatingPointError)):
        return "numeric", EXIT_NUMERIC
    if isinstance(exc, (ValueError, KeyError, ArithmeticError)):
        return "domain", EXIT_DOMAIN
    return "internal", EXIT_INTERNAL


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        line = args.func(args)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except Exception as exc:
        kind, code = _classify_error(exc)
        msg = str(exc) if not isinstance(exc, KeyError) else str(exc.args[0])
        print(f"threshmag: error kind={kind} code={code} msg={json.dumps(msg)}", file=sys.stderr)
        return code
    print(line)
    return EXIT_OK


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
