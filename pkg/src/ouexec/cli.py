"""Command-line interface: estimate, solve, schedule, montecarlo, merton, replay.

Each command resolves its inputs into a job dictionary, runs it and writes a
``manifest.json`` holding that job, so ``replay`` can rebuild every output from
the manifest alone. Wall-clock timings go to ``timing.json`` and are the only
output that differs between runs.
"""

from __future__ import annotations

import argparse
import sys
import time
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from . import serialize as sz
from .closed_form import BrownianClosedForm, MertonSolution
from .estimation import fit_bachelier, fit_var1, johansen_trace, var1_to_ou
from .model import ExecutionState, NumericalError, SpecError, TimeGrid, validate_spec
from .riccati import SCHEMES, solve_backward
from .simulation import monte_carlo_pnl, rollout
from .strategy import KINDS, PRESETS, StrategyConfig, build_strategy

EXIT_OK, EXIT_SPEC, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def tool_version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0+unknown"


def _vec(text: str | None):
    if text is None:
        return None
    try:
        return [float(x) for x in text.split(",")]
    except ValueError:
        raise SpecError(f"expected comma-separated numbers, got {text!r}") from None


# ---------------------------------------------------------------- job resolution

def _model_inputs(args) -> dict:
    """OU and execution dictionaries, plus initial state, from a preset or files."""
    job: dict = {"inputs": {}}
    if args.preset:
        p = PRESETS[args.preset]() if args.preset == "cdu1" else PRESETS[args.preset](args.gamma or 2e-5)
        job["ou"] = sz.ou_to_dict(p.ou, p.names)
        job["exec"] = sz.exec_to_dict(p.ex)
        job["q0"] = p.q0.tolist()
        job["S0"] = p.S0.tolist()
        job["steps"] = p.bars
        job["inputs"]["preset"] = args.preset
    else:
        if not (args.params and args.exec):
            raise SpecError("give --params and --exec, or --preset")
        job["ou"] = sz.load_json(args.params)
        job["exec"] = sz.load_json(args.exec)
        job["inputs"].update(params=str(args.params), exec=str(args.exec))
        d = len(job["ou"].get("Sbar", []))
        job["q0"] = job["exec"].pop("q0", [0.0] * d)
        job["S0"] = job["exec"].pop("S0", job["ou"].get("Sbar"))
    if getattr(args, "gamma", None) is not None:
        job["exec"]["gamma"] = args.gamma
    if getattr(args, "q0", None):
        job["q0"] = _vec(args.q0)
    if getattr(args, "S0", None):
        job["S0"] = _vec(args.S0)
    if getattr(args, "steps", None):
        job["steps"] = args.steps
    job.setdefault("steps", 1000)
    return job


def _strategy_dict(args) -> dict:
    if getattr(args, "config", None):
        cfg = StrategyConfig.from_dict(sz.load_json(args.config))
        if args.mode:
            cfg = StrategyConfig(cfg.kind, args.mode, cfg.base, cfg.factor, cfg.max_rate, cfg.overrides)
    else:
        mode = args.mode or "liquidation"
        base = StrategyConfig(args.strategy, mode, max_rate=args.max_rate)
        cfg = base if args.scale == 1.0 else StrategyConfig("scaled", mode, base=base, factor=args.scale,
                                                            max_rate=args.max_rate)
    return cfg.to_dict()


def _load(job):
    ou = sz.ou_from_dict(job["ou"])
    ex = sz.exec_from_dict(job["exec"])
    problems = validate_spec(ou, ex)
    if problems:
        raise SpecError("; ".join(problems))
    return ou, ex


def _write_manifest(job: dict, out: Path) -> None:
    manifest = dict(job)
    manifest["output_dir"] = str(out)
    manifest["tool_version"] = tool_version()
    sz.dump_json(manifest, out / "manifest.json")


def _solve_for(cfg: StrategyConfig, ou, ex, q0, grid, scheme):
    ex_eff, q0_eff = cfg.resolve(ex, q0)
    needs = cfg.kind == "optimal_ou" or (cfg.kind == "scaled" and cfg.base.kind == "optimal_ou")
    sol = solve_backward(ou, ex_eff, grid, scheme=scheme) if needs else None
    return ex_eff, q0_eff, sol


# ---------------------------------------------------------------- commands

def cmd_estimate(job: dict, out: Path) -> dict:
    mp, tfmt = sz.read_prices_csv(Path(job["inputs"]["prices"]))
    fit = fit_var1(mp)
    ou = var1_to_ou(fit, strict=False)
    sig_ac = fit_bachelier(mp)
    sz.dump_json(sz.ou_to_dict(ou, mp.names), out / "params.json")
    diag = {
        "time_format": tfmt,
        "nObs": fit.nObs,
        "dt_days": fit.dt,
        "r_squared": [float(x) for x in fit.r2],
        "residual_std": np.sqrt(np.diag(fit.Qres)).tolist(),
        "Phi": fit.Phi.tolist(),
        "intercept": fit.a.tolist(),
        "Sigma_AC": sig_ac.tolist(),
        "sigma_AC": np.sqrt(np.diag(sig_ac)).tolist(),
    }
    if mp.d >= 2:
        jr = johansen_trace(mp)
        diag["johansen"] = {
            "table": jr.table(),
            "selectedRank": jr.selectedRank,
            "eigenvalues": jr.eigenvalues.tolist(),
            "cointVectors": jr.cointVectors.tolist(),
        }
    sz.dump_json(diag, out / "diagnostics.json")
    job["time_format"] = tfmt
    return {}


def cmd_solve(job: dict, out: Path) -> dict:
    ou, ex = _load(job)
    cfg = StrategyConfig.from_dict(job["strategy"])
    ex_eff, _ = cfg.resolve(ex, job["q0"])
    grid = TimeGrid(ex.T, job["steps"])
    t0 = time.perf_counter()
    sol = solve_backward(ou, ex_eff, grid, scheme=job["scheme"])
    elapsed = time.perf_counter() - t0
    sz.write_riccati_csv(sol, out / "riccati.csv")
    summary = {
        "scheme": sol.scheme,
        "steps": grid.N,
        "boundsOk": sol.bounds_ok,
        "boundsMargin": sol.bounds_margin,
        "notes": list(sol.notes),
        "t0": {"A": sol.A[0].tolist(), "B": sol.B[0].tolist(), "C": sol.C[0].tolist(),
               "D": sol.D[0].tolist(), "E": sol.E[0].tolist(), "F": float(sol.F[0])},
    }
    if not np.any(ou.R) and np.linalg.eigvalsh(ou.Sigma)[0] > 0:
        ref = BrownianClosedForm.from_params(ou, ex_eff).A(grid.times)
        scale = np.maximum(np.linalg.norm(ref, axis=(1, 2)), 1e-300)
        summary["closedFormMaxRelError"] = float(np.max(np.linalg.norm(sol.A - ref, axis=(1, 2)) / scale))
    sz.dump_json(summary, out / "solution.json")
    return {"solve_seconds": elapsed}


def cmd_schedule(job: dict, out: Path) -> dict:
    ou, ex = _load(job)
    cfg = StrategyConfig.from_dict(job["strategy"])
    grid = TimeGrid(ex.T, job["steps"])
    ex_eff, q0, sol = _solve_for(cfg, ou, ex, job["q0"], grid, job["scheme"])
    st = build_strategy(cfg, ou, ex, job["q0"], grid, sol)
    S0 = np.asarray(job["S0"], dtype=float)
    init = ExecutionState(0.0, q0, S0)
    prices = job["inputs"].get("prices")
    if prices:
        mp, _ = sz.read_prices_csv(Path(prices))
        tr = rollout(st, ou, ex_eff, init, path=mp)
    else:
        tr = rollout(st, ou, ex_eff, init, grid=grid, seed=job["seed"])
    sz.write_trace_csv(tr, out / "trace.csv")
    dt = np.diff(tr.times)
    costs = float(np.sum(np.einsum("ki,ij,kj->k", tr.v, ex_eff.eta, tr.v) * dt))
    final = tr.final_state(market=True)
    summary = {
        "strategy": cfg.kind,
        "mode": cfg.mode,
        "q0": q0.tolist(),
        "terminalInventory": tr.q[-1].tolist(),
        "executionCosts": costs,
        "pnl": float(tr.pnl[-1]),
        "terminalWealthMarket": float(final.X + final.q @ final.Stilde - final.q @ ex_eff.GammaTilde @ final.q),
    }
    sz.dump_json(summary, out / "summary.json")
    return {}


def cmd_montecarlo(job: dict, out: Path) -> dict:
    ou, ex = _load(job)
    cfg = StrategyConfig.from_dict(job["strategy"])
    grid = TimeGrid(ex.T, job["steps"])
    ex_eff, q0, sol = _solve_for(cfg, ou, ex, job["q0"], grid, job["scheme"])
    st = build_strategy(cfg, ou, ex, job["q0"], grid, sol)
    init = ExecutionState(0.0, q0, np.asarray(job["S0"], dtype=float))
    t0 = time.perf_counter()
    summ = monte_carlo_pnl(st, ou, ex_eff, init, grid, job["paths"], job["seed"], workers=job.get("workers", 1),
                           bins=job["bins"])
    elapsed = time.perf_counter() - t0
    sz.dump_json(summ.to_dict(), out / "pnl_summary.json")
    sz.write_histogram_csv(summ, out / "histogram.csv")
    return {"simulate_seconds": elapsed}


def cmd_merton(job: dict, out: Path) -> dict:
    ou = sz.ou_from_dict(job["ou"])
    gamma, T = float(job["exec"]["gamma"]), float(job["exec"]["T"])
    ms = MertonSolution.build(ou, gamma, T)
    grid = TimeGrid(T, job["steps"])
    S = np.asarray(job["S0"], dtype=float)
    d = ou.d
    header = ["t", *[f"Chat_{i + 1}{j + 1}" for i in range(d) for j in range(d)],
              *[f"Ehat_{i + 1}" for i in range(d)], "Fhat", *[f"qstar_{i + 1}" for i in range(d)]]
    lines = [",".join(header)]
    for t in grid.times:
        vals = [t, *ms.Chat(t).ravel(), *ms.Ehat(t), ms.Fhat(t), *ms.position(t, S)]
        lines.append(",".join(map(sz.fmt, vals)))
    (out / "merton.csv").write_text("\n".join(lines) + "\n")
    sz.dump_json({"S": S.tolist(), "position_t0": ms.position(0.0, S).tolist(),
                  "theta_t0": ms.theta(0.0, S)}, out / "merton.json")
    return {}


COMMANDS = {"estimate": cmd_estimate, "solve": cmd_solve, "schedule": cmd_schedule,
            "montecarlo": cmd_montecarlo, "merton": cmd_merton}


def run_job(job: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    timing = COMMANDS[job["command"]](job, out)
    _write_manifest(job, out)
    if timing:
        sz.dump_json(timing, out / "timing.json")


# ---------------------------------------------------------------- argument parsing

def _add_model_args(p: argparse.ArgumentParser, steps: bool = True) -> None:
    p.add_argument("--params", type=Path, help="OU parameter JSON (R, Sbar, Sigma)")
    p.add_argument("--exec", type=Path, help="execution JSON (eta, K, GammaTilde, gamma, T; optional q0, S0)")
    p.add_argument("--preset", choices=sorted(PRESETS), help="built-in calibrated parameter set")
    p.add_argument("--gamma", type=float, help="override risk aversion")
    p.add_argument("--q0", help="initial inventory, comma separated")
    p.add_argument("--S0", help="initial prices, comma separated")
    if steps:
        p.add_argument("--steps", type=int, help="time steps on [0, T]")


def _add_strategy_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=["liquidation", "statarb"])
    p.add_argument("--strategy", choices=[k for k in KINDS if k != "scaled"], default="optimal_ou")
    p.add_argument("--scale", type=float, default=1.0, help="multiply the rates of the chosen strategy")
    p.add_argument("--max-rate", type=float, help="cap on |rate| per asset (shares/day)")
    p.add_argument("--config", type=Path, help="strategy configuration JSON")
    p.add_argument("--scheme", choices=SCHEMES, default="hamiltonian")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ouexec", description="Optimal execution and statistical arbitrage under OU prices")
    ap.add_argument("--version", action="version", version=tool_version())
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="fit OU parameters from a price CSV")
    p.add_argument("prices", type=Path)
    p.add_argument("--out", type=Path, default=Path("out"))

    p = sub.add_parser("solve", help="solve the coefficient ODEs backward in time")
    _add_model_args(p)
    _add_strategy_args(p)
    p.add_argument("--out", type=Path, default=Path("out"))

    p = sub.add_parser("schedule", help="roll out one execution on a price CSV or a simulated path")
    _add_model_args(p)
    _add_strategy_args(p)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--prices", type=Path)
    src.add_argument("--simulate", action="store_true", help="simulate prices (default)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("out"))

    p = sub.add_parser("montecarlo", help="PnL distribution over simulated paths")
    _add_model_args(p)
    _add_strategy_args(p)
    p.add_argument("--paths", type=int, default=1500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--bins", type=int, default=60)
    p.add_argument("--out", type=Path, default=Path("out"))

    p = sub.add_parser("merton", help="frictionless benchmark coefficients and positions")
    _add_model_args(p)
    p.add_argument("--out", type=Path, default=Path("out"))

    p = sub.add_parser("replay", help="re-run a command from its manifest")
    p.add_argument("manifest", type=Path)
    p.add_argument("--out", type=Path, help="output directory (default: the manifest's)")
    return ap


def job_from_args(args) -> dict:
    if args.command == "estimate":
        return {"command": "estimate", "inputs": {"prices": str(args.prices)}}
    job = _model_inputs(args)
    job["command"] = args.command
    if args.command == "merton":
        return job
    job["strategy"] = _strategy_dict(args)
    job["scheme"] = args.scheme
    if args.command == "schedule":
        job["seed"] = args.seed
        if args.prices:
            job["inputs"]["prices"] = str(args.prices)
    if args.command == "montecarlo":
        if args.paths < 1:
            raise SpecError("--paths must be at least 1")
        job.update(paths=args.paths, seed=args.seed, workers=args.workers, bins=args.bins)
    return job


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "replay":
            job = sz.load_json(args.manifest)
            out = args.out or Path(job["output_dir"])
            for key in ("output_dir", "tool_version"):
                job.pop(key, None)
        else:
            job = job_from_args(args)
            out = args.out
        run_job(job, out)
    except SpecError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_SPEC
    except (NumericalError, np.linalg.LinAlgError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
