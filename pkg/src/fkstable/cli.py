"""Command-line front end: ``fkstable <subcommand> [--config PATH] [--out DIR] ...``.

Exit codes: 0 success, 1 configuration or input error (unknown key, missing
file, bad value), 2 model validation failure, 3 failed check.  Every artifact
starts with ``#`` header lines recording the tool version, the SHA-256 of the
effective configuration, the seed and the configuration itself.
"""
from __future__ import annotations

import argparse
import sys
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .config import (
    DEFAULTS,
    ConfigError,
    RunConfig,
    build_grid,
    build_model,
    build_path_config,
    build_perturbation,
    build_probes,
    epsilon_warning,
    load_config,
    start_point,
)
from .jumpalgebra import JumpSequence, power_backward, power_forward
from .model import NonFiniteValueError, validate_model

EXIT_OK, EXIT_INPUT, EXIT_VALIDATION, EXIT_BOUND = 0, 1, 2, 3


class ValidationFailure(Exception):
    pass


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


class Run:
    """Parsed arguments plus effective config, shared by the subcommands."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.cfg: RunConfig = load_config(args.config, args.set or ())
        self.seed = args.seed if args.seed is not None else self.cfg.int("sim", "seed")
        self.threads = args.threads
        self.extra: dict = {}

    def header(self) -> str:
        lines = [f"# fkstable {__version__}", f"# subcommand {self.args.command}",
                 f"# config_sha256 {self.cfg.digest()}", f"# seed {self.seed}"]
        lines += [f"# arg {k} = {v}" for k, v in self.extra.items()]
        lines += ["# " + line for line in self.cfg.canonical().splitlines()]
        return "\n".join(lines) + "\n"

    def target(self, default_name: str) -> Path:
        out = Path(self.args.out)
        if out.suffix and not out.is_dir():
            out.parent.mkdir(parents=True, exist_ok=True)
            return out
        out.mkdir(parents=True, exist_ok=True)
        return out / default_name

    def write(self, default_name: str, body: str) -> Path:
        path = self.target(default_name)
        path.write_text(self.header() + body)
        print(f"wrote {path}")
        return path

    def model(self, validate: bool = True):
        try:
            model = build_model(self.cfg)
            pert = build_perturbation(self.cfg)
        except ConfigError:
            raise
        except (ValueError, NonFiniteValueError) as exc:
            raise ValidationFailure(str(exc)) from None
        if validate:
            try:
                violations = validate_model(model, pert, build_probes(self.cfg))
            except NonFiniteValueError as exc:
                raise ValidationFailure(str(exc)) from None
            if violations:
                raise ValidationFailure("; ".join(str(v) for v in violations))
        return model, pert


def _csv(header: Sequence[str], rows) -> str:
    lines = [",".join(header)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# subcommands


def cmd_validate(run: Run) -> int:
    try:
        model = build_model(run.cfg)
        pert = build_perturbation(run.cfg)
        violations = validate_model(model, pert, build_probes(run.cfg))
        lines = [str(v) for v in violations]
    except ConfigError:
        raise
    except (ValueError, NonFiniteValueError) as exc:
        lines = [str(exc)]
    status = "valid" if not lines else f"invalid ({len(lines)} violations)"
    run.write("validate.txt", "\n".join([f"status: {status}"] + lines) + "\n")
    print(status)
    return EXIT_OK if not lines else EXIT_VALIDATION


def cmd_simulate(run: Run) -> int:
    from .pathsim import batch_records

    model, pert = run.model()
    pcfg = build_path_config(run.cfg)
    warn = epsilon_warning(run.cfg, pert)
    if warn:
        print(f"warning: {warn}", file=sys.stderr)
    x0 = start_point(run.cfg, model.dimension)
    ids, counts, A, X = batch_records(model, pert, pcfg, x0, pcfg.t_horizon, run.cfg.int("sim", "paths"),
                                      run.seed, run.threads)
    d = model.dimension
    cols = ["X_t"] if d == 1 else [f"X_t_{i + 1}" for i in range(d)]
    rows = ((i, c, a, *x) for i, c, a, x in zip(ids, counts, A, X))
    run.write("simulate.csv", _csv(["path_id", "n_jumps", "A_t", *cols], rows))
    return EXIT_OK


def cmd_mc(run: Run) -> int:
    from .pathsim import RngStream, feynman_kac_mc, moment_mc, smallball_density_mc

    model, pert = run.model()
    pcfg = build_path_config(run.cfg)
    warn = epsilon_warning(run.cfg, pert)
    if warn:
        print(f"warning: {warn}", file=sys.stderr)
    x0 = start_point(run.cfg, model.dimension)
    t, n_paths = pcfg.t_horizon, run.cfg.int("sim", "paths")
    rng = RngStream(run.seed)
    which = run.cfg.get("sim", "estimator").lower()
    n, z, r = run.cfg.int("sim", "moment"), run.cfg.floats("sim", "z"), run.cfg.float("sim", "r")
    if which == "fk":
        est = feynman_kac_mc(model, pert, pcfg, x0, None, t, n_paths, rng, run.threads)
    elif which == "moment":
        est = moment_mc(model, pert, pcfg, x0, None, t, n, n_paths, rng, run.threads)
    elif which == "smallball":
        zz = z * model.dimension if len(z) == 1 else z
        est = smallball_density_mc(model, pert, pcfg, x0, zz, r, t, n_paths, rng, run.threads)
    else:
        raise ConfigError(f"sim.estimator = {which!r} is not fk, moment or smallball")
    row = (which, t, est.estimate, est.std_error, est.n_paths, -1 if est.hits is None else est.hits,
           int(est.inconclusive))
    run.write("mc.csv", _csv(["estimator", "t", "estimate", "std_error", "n_paths", "hits", "inconclusive"], [row]))
    print(f"{which}: {est.estimate:.6g} +- {est.std_error:.2e}")
    return EXIT_OK


def random_rational_sequence(rng: np.random.Generator, max_len: int = 12, bound: int = 3,
                             max_denom: int = 9) -> JumpSequence:
    """Jump marks with rational times and values ``p/q`` in ``[-bound, bound]``, ``q <= max_denom``."""
    length = int(rng.integers(0, max_len + 1))
    steps = [Fraction(int(a), int(b)) for a, b in zip(rng.integers(1, 10, length), rng.integers(1, 10, length))]
    times = list(np.cumsum(steps)) if length else []
    denoms = rng.integers(1, max_denom + 1, length)
    values = [Fraction(int(rng.integers(-bound * q, bound * q + 1)), int(q)) for q in denoms]
    horizon = (times[-1] if times else Fraction(0)) + 1
    return JumpSequence(tuple(times), tuple(values), horizon)


def identity_rows(n_max: int, trials: int, seed: int):
    """``(trial, n, lhs, rhs, residual, exact_ok)`` for both expansions of ``A_t^n``.

    ``lhs`` and ``rhs`` are the floating forward expansion; the residual is the
    larger relative residual of the two floating expansions.
    """
    rng = np.random.default_rng(seed)
    for trial in range(trials):
        seq = random_rational_sequence(rng)
        fseq = JumpSequence(tuple(float(s) for s in seq.times), tuple(float(v) for v in seq.values),
                            float(seq.t_horizon))
        for n in range(1, n_max + 1):
            ef, eb = power_forward(seq, n), power_backward(seq, n)
            exact = ef.lhs == ef.rhs and eb.lhs == eb.rhs
            ff, fb = power_forward(fseq, n), power_backward(fseq, n)
            yield trial, n, float(ff.lhs), float(ff.rhs), max(ff.residual, fb.residual), exact


def cmd_identity_check(run: Run) -> int:
    a = run.args
    run.extra = {"n_max": a.n_max, "trials": a.trials, "tol": a.tol}
    rows, worst, inexact = [], 0.0, 0
    for trial, n, lhs, rhs, res, exact in identity_rows(a.n_max, a.trials, run.seed):
        rows.append((trial, n, lhs, rhs, res))
        worst = max(worst, res)
        inexact += not exact
    run.write("identity.csv", _csv(["trial", "n", "lhs", "rhs", "residual"], rows))
    ok = worst <= a.tol and inexact == 0
    print(f"{len(rows)} rows, max residual {worst:.3e}, exact failures {inexact}")
    return EXIT_OK if ok else EXIT_BOUND


def cmd_qn(run: Run) -> int:
    from .series import pointwise_table

    model, pert = run.model()
    grid = build_grid(run.cfg)
    grid.check(model.alpha)
    c = run.cfg
    rows = pointwise_table(model, pert, c.ints("series", "orders"), c.floats("series", "t"),
                           c.floats("series", "x"), c.floats("series", "z"), grid)
    run.write("qn.csv", _csv(["n", "t", "x", "z", "q", "qbar"], rows))
    return EXIT_OK


def cmd_density(run: Run) -> int:
    from .kernel import make_evaluator
    from .series import build_ledger, truncated_density

    model, pert = run.model()
    grid = build_grid(run.cfg)
    grid.check(model.alpha)
    c = run.cfg
    N = c.int("series", "N")
    ledger = build_ledger(model, pert, grid, c.float("series", "K"), n_max=max(N, 2))
    ev = make_evaluator(model)
    rows = []
    for t in c.floats("series", "t"):
        for x in c.floats("series", "x"):
            for z in c.floats("series", "z"):
                v = truncated_density(model, pert, N, t, x, z, grid, ledger)
                rows.append((t, x, z, N, v.value, float(ev.density(t, x, z)), v.tail, v.certified))
    run.write("density.csv", _csv(["t", "x", "z", "N", "q", "p", "tail", "certified"], rows))
    return EXIT_OK


def cmd_kato(run: Run) -> int:
    from .series import kato_Ct

    model, pert = run.model()
    grid = build_grid(run.cfg)
    grid.check(model.alpha)
    xs = run.cfg.floats("series", "x")
    rows = [(t, kato_Ct(model, pert, t, xs, grid)) for t in run.cfg.floats("series", "t")]
    run.write("kato.csv", _csv(["t", "C_t"], rows))
    return EXIT_OK


def cmd_constants(run: Run) -> int:
    from io import StringIO

    from .series import build_ledger, build_series_table

    model, pert = run.model()
    grid = build_grid(run.cfg)
    grid.check(model.alpha)
    c = run.cfg
    table = build_series_table(model, pert, grid, c.int("series", "n_max"),
                               self_convergence=c.bool("series", "self_convergence"),
                               declared_tol=c.float("series", "declared_tol"))
    ledger = build_ledger(model, pert, grid, c.float("series", "K"), table=table)
    body = ledger.report()
    body += f"quadrature self-convergence: {table.quad_tol:.6e} (declared {table.declared_tol:g})\n"
    body += "".join(f"diagnostic: {d}\n" for d in table.diagnostics)
    run.write("constants.txt", body)
    orders = [n for n in c.ints("series", "orders") if n <= table.n_max]
    buf = StringIO()
    table.to_csv(buf, orders=orders, header=run.header(), times=c.floats("series", "t"))
    path = run.target("constants.txt").with_name("series_table.csv")
    path.write_text(buf.getvalue())
    print(f"wrote {path}")
    return EXIT_OK


def cmd_bounds_report(run: Run) -> int:
    from .verify import VerifyOptions, bounds_report

    model, pert = run.model()
    grid = build_grid(run.cfg)
    grid.check(model.alpha)
    c = run.cfg
    opts = VerifyOptions(
        K=c.float("series", "K"), n_max=c.int("series", "n_max"), growth_n_max=c.int("verify", "growth_n_max"),
        semigroup_N=c.int("verify", "semigroup_n"), compositions=c.int("verify", "compositions"),
        mc_paths=c.int("verify", "mc_paths"), holder_paths=c.int("verify", "holder_paths"),
        seed=run.seed, threads=run.threads, include_mc=c.bool("verify", "include_mc"),
    )
    report, _, _ = bounds_report(model, pert, grid, opts)
    run.write("report.txt", report.text())
    n_fail = sum(not ch.passed for ch in report.checks)
    print(f"{len(report.checks) - n_fail} passed, {n_fail} failed")
    return EXIT_OK if report.passed else EXIT_BOUND


COMMANDS = {
    "validate": (cmd_validate, "check the model invariants on the probe grid"),
    "simulate": (cmd_simulate, "simulate paths and write path_id,n_jumps,A_t,X_t"),
    "mc": (cmd_mc, "Monte Carlo estimate selected by sim.estimator"),
    "identity-check": (cmd_identity_check, "check both power expansions of A_t^n on random sequences"),
    "qn": (cmd_qn, "series terms q_n and qbar_n at series.orders, series.t, series.x, series.z"),
    "density": (cmd_density, "truncated density q^(N) with its tail bound and the baseline p"),
    "kato": (cmd_kato, "Kato quantity C_t at series.t"),
    "constants": (cmd_constants, "constant ledger and the series table"),
    "bounds-report": (cmd_bounds_report, "run every bound check; exit 3 on failure"),
}


def _keys_epilog() -> str:
    lines = ["config keys (section.key = default):"]
    for section, keys in DEFAULTS.items():
        for key, (default, doc) in keys.items():
            lines.append(f"  {section}.{key} = {default or '(empty)'}  {doc}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="sectioned key=value config file")
    common.add_argument("--out", metavar="DIR", default=".", help="output directory (or file name)")
    common.add_argument("--seed", type=int, help="overrides sim.seed")
    common.add_argument("--threads", type=int, default=1, help="worker threads, 0 = auto")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config key")
    parser = argparse.ArgumentParser(prog="fkstable", description=__doc__.splitlines()[0],
                                     epilog=_keys_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"fkstable {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, doc) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=doc, description=doc)
        if name == "identity-check":
            p.add_argument("--n-max", type=int, default=8, help="highest power n")
            p.add_argument("--trials", type=int, default=1000, help="number of random sequences")
            p.add_argument("--tol", type=float, default=1e-10, help="largest accepted relative residual")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run = Run(args)
        return COMMANDS[args.command][0](run)
    except (FileNotFoundError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValidationFailure as exc:
        print(f"validation failed: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    raise SystemExit(main())
