"""Command-line entry point.

Every subcommand writes ``<command>.csv`` and/or ``<command>.json`` plus a
``manifest.json`` into ``--out``.  A manifest can be replayed with
``varprof --manifest path/manifest.json`` and reproduces the outputs bit for
bit.  Exit status: 0 on success, 2 on invalid input, 3 on numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import platform
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import scipy

from . import __version__
from .annealed import annealed_f, classify_2x2, maximizer_path, small_theta_check
from .errors import ConvergenceError
from .freeprob import build_transforms
from .mc import EntryLaw, tail_estimate
from .profile import BlockProfile, GridProfile, check_concavity, discretize, load_profile, profile_to_dict
from .qve import density, edges, moments_oracle
from .rate import combine_rates, rate_closed_form, rate_function, tilt_solve

__all__ = ["main", "build_parser", "parse_grid", "run"]

COMMANDS = ("density", "edges", "transforms", "annealed", "rate", "tilt", "classify2x2", "simulate", "verify")

# module.operation named in diagnostics for each subcommand
_OPERATION = {
    "density": "qve.density",
    "edges": "qve.edges",
    "transforms": "freeprob.transforms",
    "annealed": "annealed.maximizer_path",
    "rate": "rate.rate_function",
    "tilt": "rate.tilt_solve",
    "classify2x2": "annealed.classify_2x2",
    "simulate": "mc.tail_estimate",
    "verify": "cli.verify",
}


def parse_grid(text: str) -> np.ndarray:
    """Parse ``start:stop:count`` (inclusive) into an increasing grid."""
    parts = text.split(":")
    if len(parts) != 3:
        raise ValueError(f"grid {text!r} must look like start:stop:count")
    a, b, n = float(parts[0]), float(parts[1]), int(parts[2])
    if n < 1 or (n > 1 and b <= a):
        raise ValueError(f"grid {text!r} must be increasing with a positive count")
    return np.linspace(a, b, n)


def _fmt(v: Any) -> str:
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return str(v)


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _dumps(obj: Any, indent: int = 0) -> str:
    """JSON text with every float written to 17 significant digits."""
    pad, inner = "  " * indent, "  " * (indent + 1)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{inner}{json.dumps(str(k))}: {_dumps(obj[k], indent + 1)}" for k in sorted(obj, key=str)]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        return "[\n" + ",\n".join(inner + _dumps(v, indent + 1) for v in seq) + "\n" + pad + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return "%.17g" % obj if np.isfinite(obj) else json.dumps(str(float(obj)))
    return json.dumps(str(obj))


def _write_json(path: Path, data: Any) -> None:
    path.write_text(_dumps(data) + "\n")


def _block(profile, blocks: int) -> BlockProfile:
    return discretize(profile, blocks) if isinstance(profile, GridProfile) else profile


def _need(args, *names) -> None:
    for name in names:
        if getattr(args, name.replace("-", "_")) is None:
            raise ValueError(f"--{name} is required for '{args.command}'")


def _cmd_density(args, p, out):
    grid = parse_grid(args.e_grid) if args.e_grid else None
    d = density(p, grid)
    _write_csv(out / "density.csv", ["E", "rho"], zip(d.grid, d.density))
    _write_json(out / "density.json", {"l": d.l, "r": d.r, "mass_defect": d.total_mass_defect, "flagged": list(d.flagged)})
    return [f"density.csv: {d.grid.size} points, edges [{d.l:.6g}, {d.r:.6g}], mass defect {d.total_mass_defect:.3g}"]


def _cmd_edges(args, p, out):
    l, r = edges(p)
    _write_csv(out / "edges.csv", ["l", "r"], [(l, r)])
    _write_json(out / "edges.json", {"l": l, "r": r})
    return [f"edges.csv: l = {l:.17g}, r = {r:.17g}"]


def _cmd_transforms(args, p, out):
    t = build_transforms(p)
    xs = parse_grid(args.x_grid) if args.x_grid else np.linspace(t.r + 0.01, t.r + 3.0, 50)
    G = t.G(xs)
    ok, reason = t.check_monotone(float(xs.max()))
    Gb = t.g_bar(xs) if ok else np.full(xs.size, np.nan)
    R = t.R(G)
    _write_csv(out / "transforms.csv", ["x", "G", "R_of_G", "Gbar"], zip(xs, G, R, Gb))
    _write_json(out / "transforms.json", {"r": t.r, "g_edge": t.g_edge, "r_monotone": ok, "reason": reason})
    return [f"transforms.csv: {xs.size} points, g_edge = {t.g_edge:.6g}, R monotone: {ok}"]


def _cmd_annealed(args, p, out):
    _need(args, "theta-grid")
    thetas = parse_grid(args.theta_grid)
    path = maximizer_path(p, thetas, args.beta, seed=args.seed)
    spreads = [annealed_f(p, th, args.beta, warm=psi, seed=args.seed).multistart_spread for th, psi in zip(thetas, path.psis)]
    header = ["theta", "F"] + [f"psi_{k + 1}" for k in range(p.n)] + ["spread"]
    rows = ([th, v, *ps, sp] for th, v, ps, sp in zip(thetas, path.values, path.psis, spreads))
    _write_csv(out / "annealed.csv", header, rows)
    conc = check_concavity(p)
    report: dict[str, Any] = {
        "concave": conc.concave,
        "continuous": path.continuous,
        "jump_locations": list(path.jump_locations),
    }
    if conc.witness is not None:
        report["concavity_witness"] = conc.witness
    if p.n == 2:
        c = classify_2x2(p.sigma[0, 0], p.sigma[1, 1], p.sigma[0, 1], p.alpha[0], args.beta)
        report["classification"] = {k: getattr(c, k) for k in ("a", "b", "c", "alpha", "x_min", "case_tag", "theta_crit", "theta_bifurcation", "swapped")}
    _write_json(out / "annealed.json", report)
    return [f"annealed.csv: {thetas.size} theta values, path continuous: {path.continuous}"]


def _cmd_rate(args, p, out):
    _need(args, "x-grid")
    xs = parse_grid(args.x_grid)
    t = build_transforms(p)
    direct = rate_function(p, args.beta, xs, t=t, seed=args.seed)
    curve = direct
    closed_err = None
    if args.method in ("closed", "both"):
        try:
            closed = rate_closed_form(p, t, args.beta, xs)
        except ConvergenceError as exc:
            if args.method == "closed":
                raise
            closed_err = str(exc)
        else:
            curve = closed if args.method == "closed" else combine_rates(direct, closed)
    _write_csv(out / "rate.csv", ["x", "I", "theta_star", "method"], zip(curve.xs, curve.values, curve.theta_stars, curve.method))
    diag = dict(curve.diagnostics)
    diag.update({"beta": args.beta, "upper_bound_only": curve.upper_bound_only, "closed_form_error": closed_err})
    _write_json(out / "rate.json", diag)
    lines = [f"rate.csv: {xs.size} points, I(x_max) = {curve.values[-1]:.17g}"]
    if curve.upper_bound_only:
        print(
            "warning: the annealed maximiser path has jumps; the sup-form values only bound "
            "the rate from above and the true large deviation rate may differ",
            file=sys.stderr,
        )
    return lines


def _cmd_tilt(args, p, out):
    _need(args, "x-grid")
    xs = parse_grid(args.x_grid)
    t = build_transforms(p)
    thetas = parse_grid(args.theta_grid) if args.theta_grid else np.linspace(0.0, 0.5 * args.beta * 4.0 * float(t.g_bar(xs.max())), 41)
    path = maximizer_path(p, thetas, args.beta, seed=args.seed)
    rows = []
    for x in xs:
        s = tilt_solve(p, args.beta, float(x), path, t=t, seed=args.seed)
        rows.append([s.x, s.theta_x, s.rho_value, *s.psi_at_theta])
    _write_csv(out / "tilt.csv", ["x", "theta_x", "rho"] + [f"psi_{k + 1}" for k in range(p.n)], rows)
    return [f"tilt.csv: {len(rows)} points"]


def _cmd_classify(args, p, out):
    for name in ("a", "b", "c", "alpha"):
        if getattr(args, name) is None:
            raise ValueError(f"--{name} is required for 'classify2x2'")
    c = classify_2x2(args.a, args.b, args.c, args.alpha, args.beta)
    report = {k: getattr(c, k) for k in ("a", "b", "c", "alpha", "x_min", "case_tag", "theta_crit", "theta_bifurcation", "swapped")}
    _write_json(out / "classify2x2.json", report)
    return [f"classify2x2.json: case {c.case_tag}"]


def _cmd_simulate(args, p, out):
    _need(args, "thresholds")
    Ns = [int(v) for v in args.n_list.split(",")]
    thr = [float(v) for v in args.thresholds.split(",")]
    law = EntryLaw(args.law, args.beta)
    reports = tail_estimate(p, Ns, law, thr, args.trials, args.seed, threads=args.threads)
    rows = ((rep.N, t_, lam) for rep in reports for t_, lam in enumerate(rep.lambda_max_samples))
    _write_csv(out / "simulate.csv", ["N", "trial", "lambda_max"], rows)
    summary = {str(rep.N): {str(k): v for k, v in rep.tail_estimates.items()} for rep in reports}
    _write_json(out / "simulate.json", {"trials": args.trials, "seed": args.seed, "law": args.law, "tails": summary})
    return [f"simulate.csv: {len(Ns)} sizes x {args.trials} trials"]


def _cmd_verify(args, p, out):
    suites: dict[str, dict] = {}
    conc = check_concavity(p)
    suites["concavity"] = {"pass": True, "concave": conc.concave, "max_eigenvalue": conc.max_eigenvalue}
    d = density(p)
    worst = 0.0
    for k in range(1, 5):
        exact = moments_oracle(p, k)
        worst = max(worst, abs(d.moment(2 * k) - exact) / max(exact, 1e-300))
    suites["moment_oracle"] = {"pass": worst <= 1e-3, "max_relative_error": worst}
    t = build_transforms(p, d)
    if conc.concave:
        defect = small_theta_check(p, t, args.beta)
        suites["small_theta_identity"] = {"pass": defect <= 1e-4, "max_defect": defect}
    else:
        suites["small_theta_identity"] = {"pass": True, "skipped": "profile is not concave"}
    xs = t.r + np.array([0.0, 0.25, 0.5, 1.0])
    r1 = rate_function(p, 1, xs, t=t)
    r2 = rate_function(p, 2, xs, t=t)
    gap = float(np.abs(r2.values - 2.0 * r1.values).max())
    suites["rate_beta_doubling"] = {"pass": gap <= 1e-8, "max_difference": gap}
    _write_json(out / "verify.json", suites)
    ok = all(s["pass"] for s in suites.values())
    return [f"verify.json: {sum(s['pass'] for s in suites.values())}/{len(suites)} suites pass" + ("" if ok else " (FAIL)")]


_HANDLERS = {
    "density": _cmd_density,
    "edges": _cmd_edges,
    "transforms": _cmd_transforms,
    "annealed": _cmd_annealed,
    "rate": _cmd_rate,
    "tilt": _cmd_tilt,
    "classify2x2": _cmd_classify,
    "simulate": _cmd_simulate,
    "verify": _cmd_verify,
}

_NO_PROFILE = {"classify2x2"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="varprof", description="Spectra, transforms and largest-eigenvalue rate functions of variance-profile Wigner matrices."
    )
    parser.add_argument("--manifest", help="replay the run recorded in a manifest.json")
    parser.add_argument("--out", help="output directory (overrides the manifest when replaying)")
    sub = parser.add_subparsers(dest="command")
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--profile", help="profile document (JSON)")
        sp.add_argument("--beta", type=int, choices=(1, 2), default=1)
        sp.add_argument("--theta-grid", help="start:stop:count")
        sp.add_argument("--x-grid", help="start:stop:count")
        sp.add_argument("--e-grid", help="start:stop:count")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--trials", type=int, default=1000)
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--blocks", type=int, default=64, help="blocks used for grid profiles")
        sp.add_argument("--out", dest="sub_out", default=None)
        if name == "rate":
            sp.add_argument("--method", choices=("sup", "closed", "both"), default="both")
        if name == "classify2x2":
            for v in ("a", "b", "c", "alpha"):
                sp.add_argument(f"--{v}", type=float)
        if name == "simulate":
            sp.add_argument("--n-list", default="100")
            sp.add_argument("--thresholds")
            sp.add_argument("--law", choices=("gaussian", "rademacher", "uniform_sqrt3"), default="gaussian")
    return parser


def _config(args) -> dict[str, Any]:
    keys = ("command", "profile", "beta", "theta_grid", "x_grid", "e_grid", "seed", "trials", "threads", "blocks",
            "method", "a", "b", "c", "alpha", "n_list", "thresholds", "law")
    return {k: getattr(args, k, None) for k in keys if getattr(args, k, None) is not None}


def run(args: argparse.Namespace, out: Path, profile_doc: dict | None = None) -> list[str]:
    """Execute one subcommand and write its outputs and manifest."""
    out.mkdir(parents=True, exist_ok=True)
    p = None
    if args.command not in _NO_PROFILE:
        if profile_doc is None:
            if args.profile is None:
                raise ValueError(f"--profile is required for '{args.command}'")
            if not Path(args.profile).exists():
                raise ValueError(f"profile document {args.profile} does not exist")
            profile_doc = profile_to_dict(load_profile(Path(args.profile)))
        p = _block(load_profile(profile_doc), args.blocks)
    lines = _HANDLERS[args.command](args, p, out)
    manifest = {
        "config": _config(args),
        "profile": profile_doc,
        "seeds": {"master": args.seed},
        "versions": {"varprof": __version__, "numpy": np.__version__, "scipy": scipy.__version__, "python": platform.python_version()},
    }
    _write_json(out / "manifest.json", manifest)
    return lines


def _from_manifest(path: str, parser: argparse.ArgumentParser):
    data = json.loads(Path(path).read_text())
    cfg = dict(data["config"])
    argv = [cfg.pop("command")]
    for k, v in cfg.items():
        if k == "profile":
            continue
        argv.append(f"--{k.replace('_', '-')}={v}")
    args = parser.parse_args(argv)
    args.profile = cfg.get("profile")
    return args, data.get("profile")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    profile_doc = None
    try:
        if args.manifest:
            out_override = args.out
            args, profile_doc = _from_manifest(args.manifest, parser)
            args.out = out_override
            args.manifest = None
        elif args.command is None:
            parser.print_usage(sys.stderr)
            return 2
        out = Path(args.sub_out or args.out or ".")
        for line in run(args, out, profile_doc):
            print(line)
    except ConvergenceError as exc:
        print(f"varprof {args.command}: numerical failure in {exc}", file=sys.stderr)
        return 3
    except RuntimeError as exc:
        print(f"varprof {args.command}: numerical failure in {_OPERATION.get(args.command, 'cli')}: {exc}", file=sys.stderr)
        return 3
    except (ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"varprof {args.command}: invalid input for {_OPERATION.get(args.command, 'cli')}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
