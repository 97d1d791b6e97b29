"""Command-line front end.

Exit codes: 0 ok, 1 bad input, 2 solver failure, 3 stability condition
violated, 4 certificate construction failed.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from .equilibrium import (
    NoConvergence, RankDeficiency, check_condition1, equilibrium_to_dict, solve_equilibrium,
)
from .linearization import (
    CertificateRefused, InstabilityDetected, LyapunovSolveError, certificate_to_dict,
    lyapunov_certificate, write_matrix,
)
from .model import ParameterError, ShapeError, TopologyError, load_network, quotient_distance
from .simulation import (
    DivergenceError, SweepSpec, Trajectory, estimate_region, integrate, region_csv, region_json,
    tangent_proxy, trajectory_csv,
)

EXIT_OK, EXIT_INPUT, EXIT_SOLVER, EXIT_CONDITION, EXIT_CERT = 0, 1, 2, 3, 4


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors, which is the solver code here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _positive(kind):
    def conv(text):
        try:
            val = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid value {text!r}")
        if not val > 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return val
    return conv


def _horizon(text):
    if text == "auto":
        return None
    return _positive(float)(text)


def _offsets(text):
    try:
        return [float(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="matchsync", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--network", required=True, help="network JSON file")
    common.add_argument("--out", default=".", help="output directory (default: .)")
    common.add_argument("--gauge", type=float, default=0.0, help="angle of converter 1 (rad)")
    common.add_argument("--b-load-override", type=float, default=None,
                        help="replace the reactive load b from the network file")
    common.add_argument("--seed", type=int, default=0, help="seed for randomized checks")
    common.add_argument("--max-iter", type=int, default=50, help="Newton iteration cap")
    common.add_argument("--random-guess", type=_positive(float), default=None, metavar="SCALE",
                        help="start Newton from a seeded random state of this scale")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("equilibrium", parents=[common], help="solve for the synchronous equilibrium")
    sub.add_parser("condition", parents=[common], help="check the reactive-power condition")

    cert = argparse.ArgumentParser(add_help=False)
    cert.add_argument("--q1", type=_positive(float), default=1.0)
    cert.add_argument("--q2", type=_positive(float), default=1.0)
    cert.add_argument("--sigma", type=_positive(float), default=1e-6)
    cert.add_argument("--q-mode", choices=("regularized", "rank1"), default="regularized")
    c = sub.add_parser("certify", parents=[common, cert], help="build the Lyapunov certificate")
    c.add_argument("--samples", type=int, default=1000,
                   help="random directions for the sampled decrease check")

    s = sub.add_parser("simulate", parents=[common, cert], help="integrate one trajectory")
    s.add_argument("--dt", type=_positive(float), default=1e-5)
    s.add_argument("--horizon", type=_positive(float), default=1.0)
    s.add_argument("--method", choices=("rk4", "rk45"), default="rk4")
    s.add_argument("--record-every", type=_positive(int), default=100,
                   help="write every k-th step")
    s.add_argument("--offset", type=_offsets, default=None,
                   help="initial angle offsets, comma separated (rad)")

    r = sub.add_parser("region", parents=[common, cert], help="sweep initial angle offsets")
    r.add_argument("--dt", type=_positive(float), default=1e-5)
    r.add_argument("--horizon", type=_horizon, default=None,
                   help="seconds, or 'auto' for the adaptive horizon (default)")
    r.add_argument("--max-horizon", type=_positive(float), default=300.0)
    r.add_argument("--grid", type=_positive(int), default=41, help="points per angle axis")
    r.add_argument("--span", type=_positive(float), default=math.pi / 2,
                   help="offsets range over [-span, span]")
    r.add_argument("--epsilon", type=_positive(float), default=3.5)
    r.add_argument("--tol", type=_positive(float), default=1e-4)
    r.add_argument("--workers", type=_positive(int), default=1)
    return p


def _write(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _dump_json(path: Path, obj) -> None:
    _write(path, json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


def _equilibrium(model, args):
    guess = None
    if args.random_guess is not None:
        rng = np.random.default_rng(args.seed)
        guess = args.random_guess * rng.standard_normal(model.N)
    return solve_equilibrium(model, model.nominal_input(), gauge_angle=args.gauge, guess=guess,
                             max_iter=args.max_iter)


def _certificate(model, eq, args):
    return lyapunov_certificate(model, eq, q1=args.q1, q2=args.q2, sigma=args.sigma,
                                q_mode=args.q_mode)


def cmd_equilibrium(model, eq, args, out: Path) -> int:
    _dump_json(out / "equilibrium.json", equilibrium_to_dict(model, eq))
    print(f"equilibrium: residual {eq.residual_norm:.3e} after {eq.iterations} iterations")
    return EXIT_OK


def cmd_condition(model, eq, args, out: Path) -> int:
    recs = check_condition1(model, eq)
    doc = {"condition1": [r.to_dict() for r in recs], "pass": all(r.passed for r in recs)}
    _dump_json(out / "condition.json", doc)
    for r in recs:
        print(f"converter {r.k}: q_sw {r.q_sw:.6g} threshold {r.threshold:.6g} "
              f"margin {r.margin:+.6g} {'pass' if r.passed else 'FAIL'}")
    return EXIT_OK if doc["pass"] else EXIT_CONDITION


def _sampled_decrease(cert, samples: int, seed: int) -> dict:
    # random directions made P-orthogonal to v
    rng = np.random.default_rng(seed)
    P, v, Pi, A = cert.p_matrix, cert.v_star, cert.pi_matrix, cert.a_matrix
    D = rng.standard_normal((samples, len(v)))
    D -= np.outer(D @ P @ v / (v @ P @ v), v)
    S = Pi @ A + A.T @ Pi
    vals = np.einsum("ij,jk,ik->i", D, S, D)
    return {"samples": samples, "seed": seed, "negative": int(np.sum(vals < 0)),
            "max": float(vals.max()) if samples else None}


def cmd_certify(model, eq, args, out: Path) -> int:
    cert = _certificate(model, eq, args)
    doc = certificate_to_dict(cert)
    doc["sampled_decrease"] = _sampled_decrease(cert, args.samples, args.seed)
    _dump_json(out / "certificate.json", doc)
    write_matrix(out / "P.bin", cert.p_matrix)
    write_matrix(out / "Pi.bin", cert.pi_matrix)
    print(f"certificate: block deviation {cert.block_deviation:.3e}, "
          f"reduced spectral abscissa {cert.reduced_spectrum.real.max():.4g}")
    return EXIT_OK


def cmd_simulate(model, eq, args, out: Path) -> int:
    z0 = eq.z_star.copy()
    if args.offset is not None:
        if len(args.offset) != model.n:
            raise InputError(f"--offset needs {model.n} values, got {len(args.offset)}")
        z0[model.sl_gamma] += args.offset
    try:
        cert = _certificate(model, eq, args)
    except (CertificateRefused, InstabilityDetected, LyapunovSolveError):
        cert = None
    traj = integrate(model, z0, eq.u_star, t_end=args.horizon, dt=args.dt, method=args.method,
                     record_every=args.record_every)
    dist, lyap = np.empty(len(traj)), None
    if cert is not None:
        lyap = np.empty(len(traj))
    for k, z in enumerate(traj.states):
        dist[k] = quotient_distance(model, z, eq.z_star)[0]
        if cert is not None:
            lyap[k] = cert.value(tangent_proxy(model, z, eq.z_star)[0])
    traj = Trajectory(traj.times, traj.states, lyapunov=lyap, distances=dist)
    _write(out / "trajectory.csv", trajectory_csv(model, traj))
    print(f"simulate: {len(traj)} rows, final orbit distance {dist[-1]:.3e}")
    return EXIT_OK


def cmd_region(model, eq, args, out: Path) -> int:
    cert = _certificate(model, eq, args)
    sweep = SweepSpec.grid(model.n, args.grid, -args.span, args.span)
    est = estimate_region(model, eq, cert, sweep, horizon=args.horizon, dt=args.dt, tol=args.tol,
                          max_horizon=args.max_horizon, workers=args.workers)
    _write(out / "region.csv", region_csv(est))
    _write(out / "region.json", region_json(est, args.epsilon))
    conv = sum(s.converged for s in est.samples)
    print(f"region: {conv}/{len(est.samples)} converged, epsilon_star {est.epsilon_star:.6g}")
    return EXIT_OK


COMMANDS = {
    "equilibrium": cmd_equilibrium,
    "condition": cmd_condition,
    "certify": cmd_certify,
    "simulate": cmd_simulate,
    "region": cmd_region,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        model = load_network(args.network, args.b_load_override)
    except (OSError, json.JSONDecodeError, ParameterError, TopologyError, ShapeError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        eq = _equilibrium(model, args)
        return COMMANDS[args.command](model, eq, args, out)
    except (NoConvergence, RankDeficiency, DivergenceError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except CertificateRefused as exc:
        print(f"certificate refused: {exc}", file=sys.stderr)
        return EXIT_CONDITION
    except (InstabilityDetected, LyapunovSolveError) as exc:
        print(f"certificate error: {exc}", file=sys.stderr)
        return EXIT_CERT
    except (InputError, ParameterError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
