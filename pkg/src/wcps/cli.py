"""Command-line front end.

Exit codes: 0 success / stable, 2 unstable (or a switching script rejected),
1 configuration or runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .config import ConfigError, build_scenario, horizon_steps, load_config, loop_models, switching_signal
from .net import JitterParams, check_delivery_order, jitter_bound, trace_to_csv
from .sim import compute_metrics, run_scenario, trial_seed
from .stability import (
    CertificateUnavailable,
    NoSteadyStateError,
    SwitchedSystem,
    build_augmented,
    check_mss,
    dwell_time_violation,
    min_avg_dwell_time,
    second_moment_operator,
    steady_state_correlation,
)

EXIT_OK, EXIT_ERROR, EXIT_UNSTABLE = 0, 1, 2


def _write_json(out_dir, name, doc):
    if out_dir is None:
        return None
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _require_config(args):
    if not args.config:
        raise ConfigError("$: no configuration given (use --config PATH)")
    return load_config(args.config)


def cmd_analyze(args, out=sys.stdout):
    doc = _require_config(args)
    loops = loop_models(doc, args.mode)
    if not loops:
        raise ConfigError("$.network.modes: no remote loop to analyze")
    report = {"schema_version": 1, "loops": []}
    all_stable = True
    for lm in loops:
        acl = build_augmented(lm.A, lm.B, lm.F, lm.mu_theta, lm.mu_phi, lm.Sigma_proc, lm.Sigma_meas)
        cert = check_mss(acl, args.tol)
        entry = {"plant": lm.plant, "mode": lm.mode, "T_U": lm.T_U, "mu_theta": lm.mu_theta, "mu_phi": lm.mu_phi,
                 "sigma2_1": acl.sigma2_1, "sigma2_2": acl.sigma2_2, **cert.to_json()}
        del entry["schema_version"]
        print(f"plant {lm.plant} mode {lm.mode} (T_U = {lm.T_U * 1e3:g} ms): {cert.verdict}"
              f"{' (borderline)' if cert.borderline else ''}", file=out)
        print(f"  effective mu_theta = {lm.mu_theta:.6g}, mu_phi = {lm.mu_phi:.6g}; "
              f"sigma2 = ({acl.sigma2_1:.6g}, {acl.sigma2_2:.6g})", file=out)
        print(f"  spectral radius of the second-moment operator: {cert.spectral_radius:.6f}", file=out)
        if cert.stable:
            W_bar = steady_state_correlation(second_moment_operator(acl))
            n = lm.A.shape[0]
            std = np.sqrt(np.clip(np.diag(W_bar)[:n], 0, None))
            entry["steady_state_std"] = std.tolist()
            print("  steady-state plant std: " + ", ".join(f"{v:.4g}" for v in std), file=out)
        else:
            all_stable = False
        report["loops"].append(entry)
    report["verdict"] = "stable" if all_stable else "unstable"
    _write_json(args.out_dir, "analysis.json", report)
    return EXIT_OK if all_stable else EXIT_UNSTABLE


def cmd_dwell(args, out=sys.stdout):
    doc = _require_config(args)
    loops = loop_models(doc)
    by_plant = {}
    for lm in loops:
        by_plant.setdefault(lm.plant, []).append(lm)
    report = {"schema_version": 1, "plants": {}}
    horizon = horizon_steps(doc)
    sig = switching_signal(doc, horizon)
    code = EXIT_OK
    for plant, lms in by_plant.items():
        if len(lms) < 2:
            continue
        acls = [build_augmented(lm.A, lm.B, lm.F, lm.mu_theta, lm.mu_phi) for lm in lms]
        try:
            cert = min_avg_dwell_time(SwitchedSystem(tuple(acls)), args.tol, method=args.method)
        except CertificateUnavailable as exc:
            bad = lms[exc.mode_index]
            print(f"plant {plant}: mode {bad.mode} is not mean-square stable: {exc}", file=out)
            report["plants"][plant] = {"error": str(exc), "unstable_mode": bad.mode}
            code = EXIT_UNSTABLE
            continue
        print(f"plant {plant}: modes {[lm.mode for lm in lms]}", file=out)
        for lm, rho in zip(lms, cert.spectral_radii):
            print(f"  mode {lm.mode} (T_U = {lm.T_U * 1e3:g} ms): spectral radius {rho:.6f}", file=out)
        print(f"  alpha = {cert.alpha:.6g}, mu = {cert.mu:.6g}, tau_a* = {cert.tau_a_star} steps", file=out)
        entry = cert.to_json()
        del entry["schema_version"]
        entry["modes"] = [lm.mode for lm in lms]
        if sig.switch_steps:
            viol = dwell_time_violation(sig, cert.tau_a_star)
            if viol is None:
                print(f"  signal accepted ({len(sig.switch_steps)} switches, N0 = {sig.N0:g})", file=out)
            else:
                ks, ke, count = viol
                print(f"  signal rejected: {count} switches in steps [{ks}, {ke}] exceed "
                      f"N0 + (k_e - k_s)/tau_a = {sig.N0 + (ke - ks) / cert.tau_a_star:.4g}", file=out)
                code = max(code, EXIT_UNSTABLE)
            entry["signal"] = {"accepted": viol is None, "violation": list(viol) if viol else None}
        report["plants"][plant] = entry
    if not report["plants"]:
        raise ConfigError("$.network.modes: need a plant that appears in at least two modes")
    _write_json(args.out_dir, "dwell.json", report)
    return code


def cmd_simulate(args, out=sys.stdout):
    doc = _require_config(args)
    seed = args.seed if args.seed is not None else doc.get("run", {}).get("seed", 0)
    trials = args.trials if args.trials is not None else doc.get("run", {}).get("trials", 1)
    opts = doc.get("output", {})
    results = []
    for i in range(trials):
        s = seed if trials == 1 else trial_seed(seed, i)
        sc = build_scenario(doc, seed=s)
        tr = run_scenario(sc)
        met = compute_metrics(tr)
        bad_order = check_delivery_order(tr.rounds)
        if bad_order:
            raise RuntimeError(f"delivery trace violates ordering/uniqueness: {bad_order[0]}")
        results.append(met)
        if args.out_dir is not None:
            tag = "" if trials == 1 else f"_{i:03d}"
            os.makedirs(args.out_dir, exist_ok=True)
            if opts.get("trace_csv", True):
                with open(os.path.join(args.out_dir, f"trace{tag}.csv"), "w", encoding="utf-8", newline="") as fh:
                    tr.to_csv(fh)
            if opts.get("network_csv", True):
                with open(os.path.join(args.out_dir, f"network{tag}.csv"), "w", encoding="utf-8", newline="") as fh:
                    trace_to_csv(tr.rounds, fh)
            _write_json(args.out_dir, f"metrics{tag}.json", {**met.to_json(), "seed": s, "steps": int(tr.steps)})
        status = "ok" if met.success else f"terminated ({met.termination['cause']} of {met.termination['plant']} " \
                                           f"at step {met.termination['step']})"
        dist = ", ".join(f"{n}: {pm.traveled_distance:.3f} m" for n, pm in met.plants.items())
        line = f"trial {i} seed {s}: {status}; traveled {dist}"
        if met.sync_error:
            line += f"; mean sync error {met.mean_sync_error:.4f} m"
        print(line, file=out)
    rate = float(np.mean([m.success for m in results]))
    print(f"success rate {rate:.3f} over {trials} trial(s)", file=out)
    _write_json(args.out_dir, "summary.json", {"schema_version": 1, "trials": trials, "seed": seed,
                                               "success_rate": rate})
    return EXIT_OK


def cmd_jitter(args, out=sys.stdout):
    p = JitterParams(args.e_ref, args.e_sync, args.rho_ap * 1e-6, args.rho_cp * 1e-6, args.e_task, args.t_end * 1e3)
    J = jitter_bound(p)
    print(f"worst-case jitter bound: +/-{J:.4f} us", file=out)
    _write_json(args.out_dir, "jitter.json", {"schema_version": 1, "jitter_bound_us": J, **vars(p)})
    return EXIT_OK


def _nonneg(text):
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be nonnegative, got {text}")
    return v


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="scenario JSON file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (overrides run.seed)")
    common.add_argument("--out-dir", default=argparse.SUPPRESS, help="directory for JSON/CSV outputs")
    common.add_argument("--trials", type=int, default=argparse.SUPPRESS, help="number of seeded trials")

    parser = argparse.ArgumentParser(prog="wcps", parents=[common],
                                     description="Control over lossy round-based wireless networks.")
    sub = parser.add_subparsers(dest="verb", required=True)
    a = sub.add_parser("analyze", parents=[common], help="mean-square stability of each remote loop")
    a.add_argument("--mode", type=int, default=None, help="analyze only this mode id")
    a.add_argument("--tol", type=float, default=1e-6)
    a.set_defaults(func=cmd_analyze)
    d = sub.add_parser("dwell", parents=[common], help="minimum average dwell time across modes")
    d.add_argument("--tol", type=float, default=1e-6)
    d.add_argument("--method", choices=("vectorized", "trace"), default="vectorized",
                   help="Lyapunov construction (default: quadratic on the vectorized moments)")
    d.set_defaults(func=cmd_dwell)
    s = sub.add_parser("simulate", parents=[common], help="run the scenario and write traces/metrics")
    s.set_defaults(func=cmd_simulate)
    j = sub.add_parser("jitter", parents=[common], help="worst-case jitter bound in microseconds")
    j.add_argument("--e-ref", type=_nonneg, default=10.0, help="reference time error [us]")
    j.add_argument("--e-sync", type=_nonneg, default=1.0 / 48.0, help="SYNC line error [us]")
    j.add_argument("--rho-ap", type=_nonneg, default=50.0, help="application clock drift [ppm]")
    j.add_argument("--rho-cp", type=_nonneg, default=50.0, help="communication clock drift [ppm]")
    j.add_argument("--e-task", type=_nonneg, default=10.0, help="task release error [us]")
    j.add_argument("--t-end", type=_nonneg, default=100.0, help="end-to-end time span [ms]")
    j.set_defaults(func=cmd_jitter)
    return parser


def main(argv=None, out=sys.stdout, err=sys.stderr):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_ERROR if exc.code else EXIT_OK
    for name in ("config", "seed", "out_dir", "trials"):
        if not hasattr(args, name):
            setattr(args, name, None)
    try:
        return args.func(args, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=err)
    except (NoSteadyStateError, RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=err)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
