"""Command line harness.

Subcommands: simulate, fit, bias-report, control, experiment, verify.
All numeric CSV output uses round-trip precision and fixed seeds, so any
invocation repeated with the same flags reproduces its files byte for byte.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from ddpclab.artifacts import (
    read_trajectory_csv,
    sha256_file,
    write_json,
    write_matrix_csv,
    write_table_csv,
    write_trajectory_csv,
)
from ddpclab.bias_analysis import build_bias_report
from ddpclab.controllers import (
    DeepcPlanner,
    GammaDdpcPlanner,
    PredictorPlanner,
    benchmark_tracking_cost,
    run_receding_horizon,
)
from ddpclab.estimators import (
    estimate_bias_predictor,
    estimate_innovations,
    fit_subspace,
    fit_transient_bank,
    lq_decompose,
)
from ddpclab.experiments import (
    EXPERIMENTS,
    ExperimentConfig,
    realize_plan,
    run_experiment,
    simulate_training,
    verify_manifest,
)
from ddpclab.hankel import build_hankel_set
from ddpclab.lti_sim import DoubleIntegratorConfig, TrajectoryData, make_double_integrator


def _parse_config_file(path: str) -> dict:
    """Flat key=value text; lists are comma separated, '#' starts a comment."""
    out = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"bad config line (expected key=value): {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


_TUPLE_KEYS = {"n_grid", "lambda_grid", "feedback_gain"}
_INT_KEYS = {"repeats", "seed", "rho", "tau", "t_train", "burn_in", "t_sim", "workers"}
_FLOAT_KEYS = {"dt", "noise_var", "excitation_std", "lam_plan"}


def _coerce_config(key: str, value: str):
    if key in _TUPLE_KEYS:
        return tuple(float(v) for v in value.split(","))
    if key in _INT_KEYS:
        return int(value)
    if key in _FLOAT_KEYS:
        return float(value)
    return value


def build_experiment_config(args) -> ExperimentConfig:
    values = {"experiment": args.figure, "output_dir": args.out}
    if getattr(args, "config", None):
        known = {f.name for f in fields(ExperimentConfig)}
        for key, raw in _parse_config_file(args.config).items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            values[key] = _coerce_config(key, raw)
    flag_map = {
        "repeats": args.repeats,
        "seed": args.seed,
        "dt": args.dt,
        "noise_var": args.noise_var,
        "excitation_std": args.excitation_std,
        "rho": args.rho,
        "tau": args.tau,
        "t_train": args.t_train,
        "burn_in": args.burn_in,
        "t_sim": args.t_sim,
        "lam_plan": args.lam_plan,
        "workers": args.workers,
    }
    for key, value in flag_map.items():
        if value is not None:
            values[key] = value
    if args.n_grid is not None:
        values["n_grid"] = tuple(int(v) for v in args.n_grid.split(","))
    if args.lambda_grid is not None:
        values["lambda_grid"] = tuple(float(v) for v in args.lambda_grid.split(","))
    if args.gain is not None:
        values["feedback_gain"] = tuple(float(v) for v in args.gain.split(","))
    return ExperimentConfig(**values)


def _add_experiment_flags(parser):
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--repeats", type=int, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--dt", type=float, default=None)
    parser.add_argument("--noise-var", dest="noise_var", type=float, default=None)
    parser.add_argument("--excitation-std", dest="excitation_std", type=float, default=None)
    parser.add_argument("--gain", help="feedback gain entries, comma separated")
    parser.add_argument("--rho", type=int, default=None)
    parser.add_argument("--tau", type=int, default=None)
    parser.add_argument("--t-train", dest="t_train", type=int, default=None)
    parser.add_argument("--burn-in", dest="burn_in", type=int, default=None)
    parser.add_argument("--t-sim", dest="t_sim", type=int, default=None)
    parser.add_argument("--lam-plan", dest="lam_plan", type=float, default=None)
    parser.add_argument("--n-grid", dest="n_grid", help="Hankel column counts, comma separated")
    parser.add_argument(
        "--lambda-grid", dest="lambda_grid", help="regularisation sweep, comma separated"
    )
    parser.add_argument("--workers", type=int, default=None)


def _simulation_config(args) -> ExperimentConfig:
    return ExperimentConfig(
        experiment="custom",
        output_dir=args.out if hasattr(args, "out") else "out",
        repeats=1,
        seed=args.seed or 0,
        dt=args.dt if args.dt is not None else 1.0,
        noise_var=args.noise_var,
        excitation_std=args.excitation_std if args.excitation_std is not None else 0.1,
        feedback_gain=(
            tuple(float(v) for v in args.gain.split(",")) if args.gain else (-2.5, -3.0)
        ),
        rho=args.rho if args.rho is not None else 10,
        tau=args.tau if args.tau is not None else 10,
        t_train=args.t_steps if getattr(args, "t_steps", None) else 1000,
        burn_in=args.burn_in if args.burn_in is not None else 200,
    )


def cmd_simulate(args) -> int:
    cfg = _simulation_config(args)
    data = simulate_training(cfg, args.mode, cfg.seed)
    data.meta["dt"] = cfg.dt
    write_trajectory_csv(args.out, data)
    print(f"wrote {args.out} ({data.length} steps, mode={args.mode})")
    return 0


def _fit_all(args):
    data = read_trajectory_csv(args.data)
    rho, tau = args.rho or 10, args.tau or 10
    h = build_hankel_set(data, rho, tau)
    s = fit_subspace(h)
    bank = fit_transient_bank(data, rho, tau)
    innov = estimate_innovations(bank, data)
    beta = estimate_bias_predictor(bank, innov, h)
    lq = lq_decompose(h)
    return data, h, s, bank, innov, beta, lq


def cmd_fit(args) -> int:
    data, h, s, bank, innov, beta, lq = _fit_all(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    matrices = {
        "subspace_predictor": s.s,
        "multistep_predictor": bank.h_hat,
        "bias_predictor": beta.beta_hat,
        "l_vv": lq.l_vv,
        "l_yv": lq.l_yv,
        "l_ye": lq.l_ye,
    }
    for name, matrix in matrices.items():
        write_matrix_csv(out / f"{name}.csv", matrix)
    write_json(
        out / "fit_meta.json",
        {
            "rho": h.rho,
            "tau": h.tau,
            "q": h.q,
            "m": h.m,
            "n_cols": h.n_cols,
            "source_sha256": sha256_file(args.data),
        },
    )
    print(f"wrote {len(matrices)} predictor matrices to {out}")
    return 0


def cmd_bias_report(args) -> int:
    data, h, s, bank, innov, beta, lq = _fit_all(args)
    report = build_bias_report(s, bank, innov, beta, lq, h)
    mode = data.meta.get("mode", "unknown")
    header = ["n_cols", "mode", "seed"] + list(report.scalars().keys())
    row = [str(report.n_cols), str(mode), str(data.seed)] + list(report.scalars().values())
    write_table_csv(args.out, header, [row])
    print(f"wrote {args.out}")
    for key, value in report.scalars().items():
        print(f"  {key} = {value:.6g}")
    return 0


def _build_planner(args, h, s, bank, lq):
    cost = benchmark_tracking_cost(h.tau)
    method = args.method
    if method == "spc":
        return PredictorPlanner(s.s, cost, (h.q + h.m) * h.rho, "spc")
    if method == "tpc":
        return PredictorPlanner(bank.h_hat, cost, (h.q + h.m) * h.rho, "tpc")
    if method == "2norm_ddpc":
        return GammaDdpcPlanner(lq, cost, args.lam, squared_reg=not args.unsquared)
    if method == "deepc":
        return DeepcPlanner(h, cost, args.lam, squared_reg=not args.unsquared)
    raise ValueError(f"unknown method {method!r}")


def _plant_from_meta(meta: dict):
    """Rebuild the benchmark plant from a trajectory sidecar."""
    dt = float(meta.get("dt", 1.0))
    noise_raw = meta.get("noise_cov", "0.0001")
    if isinstance(noise_raw, str):
        noise = float(noise_raw.split(",")[0])
    else:
        noise = float(np.asarray(noise_raw).ravel()[0])
    return make_double_integrator(DoubleIntegratorConfig(dt, noise))


def cmd_control(args) -> int:
    data, h, s, bank, innov, beta, lq = _fit_all(args)
    planner = _build_planner(args, h, s, bank, lq)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sys = _plant_from_meta(data.meta)
    if args.receding:
        run = run_receding_horizon(sys, planner, args.receding, seed=args.seed or 0)
        write_trajectory_csv(out / "realized.csv", run)
        position = run.y[:, 0]
        reached = np.nonzero(position >= 0.9)[0]
        time_to_90 = int(reached[0]) + 1 if reached.size else args.receding + 1
        summary = [
            args.method,
            str(args.lam),
            str(args.seed or 0),
            abs(position[-1] - 1.0),
            float(time_to_90),
        ]
    else:
        result = planner.solve(np.zeros((h.q + h.m) * h.rho))
        realized = realize_plan(sys, result.u_f)
        planned = result.y_pred.reshape(h.tau, h.q)
        plan_traj = TrajectoryData(
            result.u_f.reshape(h.tau, h.m), planned, args.seed or 0, {"kind": "planned"}
        )
        real_traj = TrajectoryData(
            result.u_f.reshape(h.tau, h.m), realized, args.seed or 0, {"kind": "realized"}
        )
        write_trajectory_csv(out / "planned.csv", plan_traj)
        write_trajectory_csv(out / "realized.csv", real_traj)
        summary = [
            args.method,
            str(args.lam),
            str(args.seed or 0),
            abs(realized[-1, 0] - 1.0),
            float("nan"),
        ]
    write_table_csv(
        out / "summary.csv",
        ["method", "lam", "seed", "terminal_abs_error", "time_to_90"],
        [summary],
    )
    print(f"wrote control artifacts to {out}")
    return 0


def cmd_experiment(args) -> int:
    cfg = build_experiment_config(args)
    manifest = run_experiment(cfg)
    print(f"manifest: {manifest}")
    return 0


def cmd_verify(args) -> int:
    ok, results = verify_manifest(args.manifest)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  {r.detail}")
    print(f"verify: {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ddpclab",
        description="Data-driven predictive control experiments on the double integrator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="record a training trajectory to CSV")
    p_sim.add_argument("--mode", choices=("open", "closed"), default="open")
    p_sim.add_argument("--t-steps", dest="t_steps", type=int, default=1000)
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--dt", type=float, default=None)
    p_sim.add_argument("--noise-var", dest="noise_var", type=float, default=None)
    p_sim.add_argument("--excitation-std", dest="excitation_std", type=float, default=None)
    p_sim.add_argument("--gain", default=None)
    p_sim.add_argument("--rho", type=int, default=None)
    p_sim.add_argument("--tau", type=int, default=None)
    p_sim.add_argument("--burn-in", dest="burn_in", type=int, default=None)
    p_sim.add_argument("--out", required=True)
    p_sim.set_defaults(func=cmd_simulate)

    p_fit = sub.add_parser("fit", help="fit all predictors from a trajectory CSV")
    p_fit.add_argument("--data", required=True)
    p_fit.add_argument("--rho", type=int, default=10)
    p_fit.add_argument("--tau", type=int, default=10)
    p_fit.add_argument("--out", required=True)
    p_fit.set_defaults(func=cmd_fit)

    p_bias = sub.add_parser("bias-report", help="closed-form bias summaries from a trajectory CSV")
    p_bias.add_argument("--data", required=True)
    p_bias.add_argument("--rho", type=int, default=10)
    p_bias.add_argument("--tau", type=int, default=10)
    p_bias.add_argument("--out", required=True)
    p_bias.set_defaults(func=cmd_bias_report)

    p_ctl = sub.add_parser("control", help="solve a tracking problem from fitted data")
    p_ctl.add_argument("--data", required=True)
    p_ctl.add_argument("--method", choices=("spc", "tpc", "2norm_ddpc", "deepc"), default="tpc")
    p_ctl.add_argument("--rho", type=int, default=10)
    p_ctl.add_argument("--tau", type=int, default=10)
    p_ctl.add_argument("--lam", type=float, default=0.1)
    p_ctl.add_argument("--unsquared", action="store_true", help="penalise ||gamma|| instead of ||gamma||^2")
    p_ctl.add_argument("--receding", type=int, default=0, help="run closed loop for this many steps")
    p_ctl.add_argument("--seed", type=int, default=0)
    p_ctl.add_argument("--out", required=True)
    p_ctl.set_defaults(func=cmd_control)

    p_exp = sub.add_parser("experiment", help="run a full experiment family")
    p_exp.add_argument("figure", choices=EXPERIMENTS)
    p_exp.add_argument("--out", required=True)
    _add_experiment_flags(p_exp)
    p_exp.set_defaults(func=cmd_experiment)

    p_ver = sub.add_parser("verify", help="re-check a manifest's predicates")
    p_ver.add_argument("--manifest", required=True)
    p_ver.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
