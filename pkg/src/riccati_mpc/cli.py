"""Command-line front end.

Exit codes: 0 success, 1 configuration error, 2 solver error,
3 instability detected.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .discrete import DtLtiModel, dt_convergence_report, k0_dt, run_rhc_dt, theta_Ttau
from .errors import DimensionError, InstabilityError, PreconditionError, RiccatiMpcError
from .experiments import (
    DYADIC_STEP,
    EXAMPLES,
    FIG5_GAPS,
    FIG5_TAUS,
    ExampleSpec,
    perturbed_plant,
    reproduce_figures,
    resolve_parallel,
    sweep_mpc_tau,
    sweep_rhc_horizon,
)
from .horizon import disturbed_inf_horizon, simulate_inf_horizon
from .mpc import MpcConfig, limit_trajectory_zinf, run_mpc, run_rhc
from .report import dumps_json, save_text, write_csv
from .riccati import CostSpec, LtiModel, solve_care, solve_dare

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_UNSTABLE = 0, 1, 2, 3

_matrix = {"type": "array", "minItems": 1,
           "items": {"type": "array", "minItems": 1, "items": {"type": "number"}}}
_vector = {"type": "array", "minItems": 1, "items": {"type": "number"}}
_pos = {"type": "number", "exclusiveMinimum": 0}
_posint = {"type": "integer", "minimum": 1}

PROPS = {
    "example": {"enum": ["example1", "example2", "scalar"]},
    "model": {"type": "object", "additionalProperties": False,
              "required": ["A", "B"],
              "properties": {k: _matrix for k in ("A", "B", "C", "R", "E_T")}},
    "y0": _vector,
    "x0": _vector,
    "T": _pos,
    "tau": _pos,
    "step": _pos,
    "t_max": _pos,
    "tol": _pos,
    "mode": {"enum": ["rhc", "mpc", "inf", "zinf", "disturbed_inf"]},
    "perturbation": {"enum": ["none", "w", "A"]},
    "terminal": {"enum": ["zero", "P_inf"]},
    "reference": {"enum": ["none", "inf", "zinf", "disturbed_inf"]},
    "stride": _posint,
    "kind": {"enum": ["rhc_horizon", "mpc_tau", "dt"]},
    "gaps": {"type": "array", "minItems": 1, "items": {"type": "number", "minimum": 0}},
    "taus": {"type": "array", "minItems": 1, "items": _pos},
    "gap": {"type": "number", "minimum": 0},
    "T_list": {"type": "array", "minItems": 1, "items": _posint},
    "N": {"type": "integer", "minimum": 0},
    "parallel": _posint,
    "figures": {"type": "array", "minItems": 1, "items": {"enum": ["fig3", "fig4", "fig5"]}},
    "K_generic": _pos,
}

COMMAND_KEYS = {
    "solve-are": ["example", "model", "tol"],
    "solve-dare": ["example", "model", "tol"],
    "simulate": ["example", "model", "y0", "T", "tau", "step", "t_max", "mode",
                 "perturbation", "terminal", "reference", "stride"],
    "sweep": ["example", "model", "y0", "kind", "tau", "gap", "gaps", "taus", "step",
              "t_max", "perturbation", "parallel", "T_list", "N", "x0", "K_generic"],
    "reproduce-figures": ["figures", "step", "t_max", "parallel"],
    "dt-rhc": ["example", "model", "x0", "T", "tau", "N", "T_list"],
}

SWEEP_PRESETS = {
    "fig5-rhc": {"example": "example2", "kind": "rhc_horizon", "tau": 0.5,
                 "gaps": list(FIG5_GAPS), "step": 1e-3, "t_max": 20.0},
    "fig5-mpc-w": {"example": "example2", "kind": "mpc_tau", "gap": 4.0,
                   "taus": list(FIG5_TAUS), "perturbation": "w", "step": DYADIC_STEP,
                   "t_max": 20.0},
    "fig5-mpc-A": {"example": "example2", "kind": "mpc_tau", "gap": 4.0,
                   "taus": list(FIG5_TAUS), "perturbation": "A", "step": DYADIC_STEP,
                   "t_max": 20.0},
}
PRESETS = ("fig3", "fig4", "fig5", "example1", "example2", *SWEEP_PRESETS)


class ConfigError(Exception):
    pass


def schema_for(command: str) -> dict:
    return {"type": "object", "additionalProperties": False,
            "properties": {k: PROPS[k] for k in COMMAND_KEYS[command]}}


def validate(command: str, cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, schema_for(command))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path)
        raise ConfigError(f"invalid config{' at ' + where if where else ''}: {exc.message}")


def load_config(args) -> dict:
    cfg = {}
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}")
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object")
    preset = getattr(args, "preset", None)
    if preset:
        cfg = {**_preset_config(args.command, preset), **cfg}
    for flag, key in (("step", "step"), ("t_max", "t_max"), ("T", "T"), ("tau", "tau")):
        val = getattr(args, flag, None)
        if val is not None:
            cfg[key] = val
    if args.command in ("sweep", "reproduce-figures") and args.parallel is not None:
        cfg["parallel"] = args.parallel
    validate(args.command, cfg)
    return cfg


def _preset_config(command, preset):
    if preset in ("example1", "example2"):
        return {"example": preset}
    if preset in SWEEP_PRESETS and command == "sweep":
        return dict(SWEEP_PRESETS[preset])
    if preset in ("fig3", "fig4", "fig5") and command == "reproduce-figures":
        return {"figures": [preset]}
    if preset == "fig5" and command == "sweep":
        return dict(SWEEP_PRESETS["fig5-rhc"])
    raise ConfigError(f"preset {preset!r} does not apply to {command}")


def _scalar_example() -> ExampleSpec:
    model = LtiModel(np.zeros((1, 1)), np.ones((1, 1)))
    return ExampleSpec("scalar", model, CostSpec(np.ones((1, 1)), np.ones((1, 1)),
                                                 np.zeros((1, 1))), np.ones(1))


def _example(cfg: dict, need_y0: bool = False) -> ExampleSpec:
    if "model" in cfg and "example" in cfg:
        raise ConfigError("give either 'example' or 'model', not both")
    if "model" in cfg:
        m = cfg["model"]
        try:
            A = np.array(m["A"], dtype=float)
            B = np.array(m["B"], dtype=float)
            n = A.shape[0]
            C = np.array(m.get("C", np.eye(n)), dtype=float)
            R = np.array(m.get("R", np.eye(B.shape[1])), dtype=float)
            E = np.array(m.get("E_T", np.zeros((n, n))), dtype=float)
            model, cost = LtiModel(A, B), CostSpec(C, R, E)
        except (ValueError, IndexError) as exc:
            raise ConfigError(f"invalid model: {exc}")
        if "y0" not in cfg and need_y0:
            raise ConfigError("an inline model needs 'y0'")
        y0 = np.array(cfg.get("y0", np.ones(n)), dtype=float)
        return ExampleSpec("inline", model, cost, y0)
    name = cfg.get("example", "scalar")
    ex = _scalar_example() if name == "scalar" else EXAMPLES[name]()
    if "y0" in cfg:
        y0 = np.array(cfg["y0"], dtype=float)
        if y0.shape != (ex.model.n,):
            raise ConfigError(f"y0 must have length {ex.model.n}")
        ex = ExampleSpec(ex.name, ex.model, ex.cost, y0, ex.w_bar, ex.A_tilde, ex.mu_range)
    return ex


def _write(out: Path, name: str, text: str) -> Path:
    return save_text(out / name, text)


def cmd_solve_are(cfg, out: Path) -> int:
    ex = _example(cfg)
    sol = solve_care(ex.model, ex.cost, cfg.get("tol", 1e-10))
    summary = {"config": cfg, "version": __version__, "P_inf": sol.P, "mu_inf": sol.mu,
               "M_inf": sol.M, "K0": sol.K0, "residual": sol.residual,
               "newton_iterations": sol.newton_iterations}
    text = dumps_json(summary)
    _write(out, "solve_are.json", text)
    sys.stdout.write(text)
    return EXIT_OK


def _dt_example(cfg):
    if "model" in cfg:
        ex = _example(cfg)
        return DtLtiModel(ex.model.A, ex.model.B), ex.cost
    if cfg.get("example", "scalar") != "scalar":
        raise ConfigError("discrete commands take 'model' or the scalar example")
    one = np.ones((1, 1))
    return DtLtiModel(one, one), CostSpec(one, one, np.zeros((1, 1)))


def cmd_solve_dare(cfg, out: Path) -> int:
    model, cost = _dt_example(cfg)
    dare = solve_dare(model.A, model.B, cost, cfg.get("tol", 1e-13))
    summary = {"config": cfg, "version": __version__, "Q_inf": dare.Q, "rho": dare.rho,
               "K0": k0_dt(dare, model, cost), "residual": dare.residual,
               "iterations": dare.iterations}
    text = dumps_json(summary)
    _write(out, "solve_dare.json", text)
    sys.stdout.write(text)
    return EXIT_OK


def _trajectory_rows(tr, ref=None, stride=1):
    n = tr.states.shape[1]
    m = tr.controls.shape[1]
    rows = []
    N = len(tr.times) - 1
    for k in list(range(0, N, stride)) + [N]:
        u = tr.controls[k] if k < N else [""] * m
        row = [tr.times[k], *tr.states[k], *u]
        if ref is not None:
            ur = ref.controls[k] if k < N else [""] * m
            gap = (np.linalg.norm(tr.states[k] - ref.states[k])
                   + (np.linalg.norm(tr.controls[k] - ref.controls[k]) if k < N else 0.0))
            row += [*ref.states[k], *ur, gap]
        rows.append(row)
    cols = ["t", *[f"y_{i + 1}" for i in range(n)], *[f"u_{j + 1}" for j in range(m)]]
    if ref is not None:
        cols += [f"yref_{i + 1}" for i in range(n)] + [f"uref_{j + 1}" for j in range(m)]
        cols += ["gap"]
    return cols, rows


def _mpc_config(T, tau, step, t_max) -> MpcConfig:
    try:
        return MpcConfig(T, tau, step, t_max)
    except PreconditionError as exc:
        raise ConfigError(str(exc))


def cmd_simulate(cfg, out: Path) -> int:
    ex = _example(cfg, need_y0=True)
    mode = cfg.get("mode", "rhc")
    step = cfg.get("step", 1e-3)
    t_max = cfg.get("t_max", 20.0)
    tau = cfg.get("tau", 0.5)
    T = cfg.get("T", tau + 4.0)
    cost = ex.cost
    sol = solve_care(ex.model, ex.cost)
    if cfg.get("terminal") == "P_inf":
        cost = cost.with_terminal(sol.P)
    kind = cfg.get("perturbation", "none")
    if kind != "none" and ex.w_bar is None:
        raise ConfigError("perturbations are only defined for the built-in examples")
    plant = perturbed_plant(ex, kind)
    if mode == "rhc":
        tr = run_rhc(ex.model, cost, _mpc_config(T, tau, step, t_max), ex.y0).trajectory
    elif mode == "mpc":
        tr = run_mpc(plant, ex.model, cost, _mpc_config(T, tau, step, t_max), ex.y0).trajectory
    elif mode == "inf":
        tr = simulate_inf_horizon(ex.model, sol, ex.y0, t_max, step)
    elif mode == "zinf":
        tr = limit_trajectory_zinf(plant, sol, ex.y0, t_max, step)
    else:
        tr = disturbed_inf_horizon(ex.model, ex.cost, sol, plant.w, ex.y0, t_max, step)
    ref_kind = cfg.get("reference", "none")
    ref = None
    if ref_kind == "inf":
        ref = simulate_inf_horizon(ex.model, sol, ex.y0, t_max, step)
    elif ref_kind == "zinf":
        ref = limit_trajectory_zinf(plant, sol, ex.y0, t_max, step)
    elif ref_kind == "disturbed_inf":
        ref = disturbed_inf_horizon(ex.model, ex.cost, sol, plant.w, ex.y0, t_max, step)
    cols, rows = _trajectory_rows(tr, ref, cfg.get("stride", 1))
    _write(out, "simulate.csv", write_csv(cols, rows, {"config": cfg}))
    print(f"max |y| = {np.abs(tr.states).max():.6g}")
    return EXIT_OK


def cmd_sweep(cfg, out: Path) -> int:
    kind = cfg.get("kind", "rhc_horizon")
    par = resolve_parallel(cfg.get("parallel"))
    if kind == "dt":
        model, cost = _dt_example(cfg)
        x0 = np.array(cfg.get("x0", np.ones(model.n)), dtype=float)
        table = dt_convergence_report(model, cost, cfg.get("T_list", [2, 4, 6, 8]),
                                      int(cfg.get("tau", 1)), int(cfg.get("N", 50)), x0)
    else:
        ex = _example(cfg, need_y0=True)
        step = cfg.get("step")
        t_max = cfg.get("t_max", 20.0)
        if kind == "rhc_horizon":
            table = sweep_rhc_horizon(ex, cfg.get("tau", 0.5), cfg.get("gaps", list(FIG5_GAPS)),
                                      step or 1e-3, t_max, par)
        else:
            if "perturbation" in cfg and cfg["perturbation"] != "none" and ex.w_bar is None:
                raise ConfigError("perturbations are only defined for the built-in examples")
            table = sweep_mpc_tau(ex, cfg.get("gap", 4.0), cfg.get("taus", list(FIG5_TAUS)),
                                  cfg.get("perturbation", "w"), step or DYADIC_STEP, t_max, par,
                                  K_generic=cfg.get("K_generic", 1.0))
    _write(out, "sweep.csv", table.to_csv({"config": cfg}))
    text = dumps_json({"config": cfg, "version": __version__, "fit": table.fit,
                       "meta": table.meta})
    _write(out, "sweep_fit.json", text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_reproduce(cfg, out: Path) -> int:
    figs = cfg.get("figures", ["fig3", "fig4", "fig5"])
    paths = reproduce_figures(figs, out, step=cfg.get("step"), t_max=cfg.get("t_max"),
                              parallel=cfg.get("parallel"))
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_dt_rhc(cfg, out: Path) -> int:
    model, cost = _dt_example(cfg)
    T = int(cfg.get("T", 3))
    tau = int(cfg.get("tau", 1))
    N = int(cfg.get("N", 20))
    x0 = np.array(cfg.get("x0", np.ones(model.n)), dtype=float)
    if x0.shape != (model.n,):
        raise ConfigError(f"x0 must have length {model.n}")
    tr = run_rhc_dt(model, cost, T, tau, N, x0)
    dare = solve_dare(model.A, model.B, cost)
    cols = ["t", *[f"x_{i + 1}" for i in range(model.n)], *[f"u_{j + 1}" for j in range(model.m)]]
    rows = [[t, *tr.states[t], *(tr.controls[t] if t < N else [""] * model.m)]
            for t in range(N + 1)]
    _write(out, "dt_rhc.csv", write_csv(cols, rows, {"config": cfg}))
    summary = {"config": cfg, "version": __version__, "rho": dare.rho,
               "theta": theta_Ttau(dare, model, cost, T, tau)}
    text = dumps_json(summary)
    _write(out, "dt_rhc.json", text)
    sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "solve-are": cmd_solve_are,
    "solve-dare": cmd_solve_dare,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "reproduce-figures": cmd_reproduce,
    "dt-rhc": cmd_dt_rhc,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="riccati-mpc", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON configuration file")
        s.add_argument("--out", default=".", help="output directory")
        s.add_argument("--step", type=float)
        s.add_argument("--t-max", dest="t_max", type=float)
        s.add_argument("--T", dest="T", type=float)
        s.add_argument("--tau", type=float)
        s.add_argument("--parallel", type=int,
                       help="worker processes (RICCATI_MPC_THREADS overrides)")
        s.add_argument("--preset", choices=PRESETS)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](cfg, Path(args.out))
    except (ConfigError, DimensionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InstabilityError as exc:
        print(f"instability: {exc} (last stable t = {exc.t_stable})", file=sys.stderr)
        return EXIT_UNSTABLE
    except (RiccatiMpcError, np.linalg.LinAlgError) as exc:
        print(f"solver error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
