"""Command-line runner.

Every subcommand reads one experiment config, writes its artifacts into
``<out>/<config-hash>-s<seed>/`` and records a ``manifest_<command>.json``
there.  Exit codes: 0 pass, 2 hypothesis or condition failure, 3 more than
1% of paths excluded as degenerate, 4 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path
from typing import Optional

import numpy as np

from . import config as cfgmod
from . import expr as ex
from .malliavin import density, lyapunov_audit, nondegeneracy_tail
from .model import check_growth, check_hypotheses, gronwall_envelope, hormander_check, GrowthError
from .simulator import (SimConfig, equispaced_r_grid, estimate_moments, level_convergence,
                        moment_time_indices, simulate)
from .truncation import CutoffScheme, TruncatedModel

EXIT_OK, EXIT_FAIL, EXIT_DEGENERATE, EXIT_USAGE = 0, 2, 3, 4
DEGENERACY_LIMIT = 0.01

log = logging.getLogger("malliavin_lab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunContext:
    cfg: cfgmod.ExperimentConfig
    out: Path
    command: str
    explosions: int = 0
    excluded: int = 0
    outputs: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def sim_config(self, **kw) -> SimConfig:
        s = self.cfg.sim
        return SimConfig(s.steps, s.paths, s.seed, s.scheme, **kw)

    def write_csv(self, name: str, header: list, rows) -> Path:
        path = self.out / name
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
        self.outputs.append(name)
        return path

    def write_json(self, name: str, obj) -> Path:
        path = self.out / name
        path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False, default=_json_default) + "\n")
        self.outputs.append(name)
        return path


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return _clean(float(o))
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return [_clean(float(v)) for v in o]
    raise TypeError(f"not serialisable: {type(o).__name__}")


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    return v


def _versions() -> dict:
    out = {"python": sys.version.split()[0]}
    for pkg in ("artifact", "numpy", "scipy"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def _xi(ctx: RunContext, model) -> float:
    if ctx.cfg.truncation.xi is not None:
        return ctx.cfg.truncation.xi
    try:
        return check_growth(model).xi
    except GrowthError as err:
        raise UsageError(f"truncation.xi is required: {err}") from None


def _degeneracy_code(excluded: int, paths: int) -> int:
    return EXIT_DEGENERATE if paths and excluded / paths > DEGENERACY_LIMIT else EXIT_OK


# ---------------------------------------------------------------------------
# subcommands


def cmd_check(ctx: RunContext) -> int:
    model = ctx.cfg.build_model()
    report = check_hypotheses(model, p_list=(1, 2), R=ctx.cfg.analysis.R)
    d = report.to_dict()
    ctx.write_json("check.json", d)
    print(json.dumps(_clean(d), sort_keys=True))
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_hormander(ctx: RunContext) -> int:
    res = hormander_check(ctx.cfg.build_model())
    d = res.to_dict()
    ctx.write_json("hormander.json", d)
    print(json.dumps(_clean(d), sort_keys=True, ensure_ascii=False))
    return EXIT_OK if res.passed else EXIT_FAIL


def cmd_simulate(ctx: RunContext) -> int:
    model = ctx.cfg.build_model()
    steps = ctx.cfg.sim.steps
    record = (0,) + moment_time_indices(steps)
    run = ctx.sim_config(record=record)
    rows, degenerate, paths = [], 0, 0
    for b in simulate(model, run):
        ctx.explosions += int(b.exploded.sum())
        degenerate += int(b.degenerate.sum())
        paths += len(b)
        for i, p in enumerate(b.paths):
            for j in range(b.t.size):
                rows.append((int(p), float(b.t[j]), b.X[i, j], b.Z[i, j], b.C[i, j]))
    ctx.excluded = degenerate + ctx.explosions
    ctx.write_csv("paths.csv", ["path", "t", "X", "Z", "C"], rows)
    return _degeneracy_code(degenerate, paths)


def cmd_moments(ctx: RunContext) -> int:
    c = ctx.cfg
    model = c.build_model()
    run = ctx.sim_config()
    rows = []
    if c.truncation.levels:
        xi = _xi(ctx, model)
        for n in c.truncation.levels:
            rows += estimate_moments(TruncatedModel(model, CutoffScheme(xi, n)), run, c.analysis.p_list,
                                     with_sup=c.analysis.with_sup)
    else:
        rows = estimate_moments(model, run, c.analysis.p_list, with_sup=c.analysis.with_sup)
    ctx.explosions = sum({r.level: r.explosions for r in rows}.values())
    ctx.excluded = ctx.explosions
    ctx.write_csv("moments.csv", ["level", "t", "p", "mean", "stderr", "explosions"], [r.as_csv() for r in rows])

    report = check_hypotheses(model, p_list=(1,), R=c.analysis.R)
    b1 = report.bound_for(1)
    f0 = float(ex.evaluate(model.f, 0.0))
    summary = {"explosions": ctx.explosions, "envelope": None, "max_second_moment": None, "pass": ctx.explosions == 0}
    second = [r.mean for r in rows if r.p == 2.0 and r.kind == "pointwise"]
    if b1.passed and second:
        env = gronwall_envelope(model.x0, b1.alpha, b1.beta, report.k1, f0, model.T)
        summary.update(envelope=env, max_second_moment=max(second),
                       alpha=b1.alpha, beta=b1.beta, k1=report.k1)
        summary["pass"] = summary["pass"] and max(second) <= env
    ctx.write_json("moments_summary.json", summary)
    return EXIT_OK if summary["pass"] else EXIT_FAIL


def cmd_convergence(ctx: RunContext) -> int:
    c = ctx.cfg
    model = c.build_model()
    levels = c.truncation.levels or [2, 4, 8]
    rows = level_convergence(model, _xi(ctx, model), levels, c.truncation.reference, ctx.sim_config())
    ctx.explosions = max((r.explosions for r in rows), default=0)
    ctx.excluded = ctx.explosions
    ctx.write_csv("convergence.csv", ["level", "mse", "stderr", "exit_fraction", "explosions"],
                  [(r.level, r.mse, r.stderr, r.exit_fraction, r.explosions) for r in rows])
    mse = [r.mse for r in sorted(rows, key=lambda r: r.level)]
    monotone = all(b <= a for a, b in zip(mse, mse[1:]))
    ctx.extra["nonincreasing"] = monotone
    return EXIT_OK if monotone else EXIT_FAIL


def cmd_nondeg(ctx: RunContext) -> int:
    c = ctx.cfg
    table = nondegeneracy_tail(c.build_model(), ctx.sim_config(), c.analysis.eps_list, c.analysis.p_list)
    ctx.explosions = table.explosions
    ctx.excluded = table.excluded
    ctx.extra["hormander"] = table.hormander
    ctx.extra["moment_factors"] = {repr(k): v for k, v in table.moments.items()}
    ctx.write_csv("nondeg.csv", ["eps", "p_hat", "ci_lo", "ci_hi", "bound", "p"], [r.as_csv() for r in table.rows])
    return _degeneracy_code(table.excluded - table.explosions, table.paths + table.excluded)


def cmd_density(ctx: RunContext) -> int:
    c = ctx.cfg
    run = ctx.sim_config(r_grid=equispaced_r_grid(c.sim.steps, c.sim.r_grid_size))
    est = density(c.build_model(), run, c.analysis.x_grid, bandwidth=c.analysis.bandwidth,
                  grid_points=c.analysis.grid_points)
    ctx.explosions = est.explosions
    ctx.excluded = est.excluded
    ctx.write_csv("density.csv", ["x", "ibp", "ibp_se", "kde", "kde_se"], est.rows())
    mass_ok = 0.98 <= est.mass_ibp <= 1.02 and 0.98 <= est.mass_kde <= 1.02
    ctx.write_json("density_summary.json", {
        "bandwidth": est.bandwidth, "paths_used": est.paths, "excluded": est.excluded,
        "mass_ibp": est.mass_ibp, "mass_kde": est.mass_kde, "mass_pass": mass_ok,
        "weight_mean": est.weight_mean, "weight_se": est.weight_se,
    })
    code = _degeneracy_code(est.excluded - est.explosions, est.paths + est.excluded)
    if code:
        return code
    return EXIT_OK if mass_ok else EXIT_FAIL


def cmd_audit(ctx: RunContext) -> int:
    c = ctx.cfg
    model = c.build_model()
    targets = [("raw", model)]
    if c.truncation.levels:
        xi = _xi(ctx, model)
        targets += [(str(n), TruncatedModel(model, CutoffScheme(xi, n))) for n in c.truncation.levels]
    audits, ok = [], True
    for label, target in targets:
        for q in c.analysis.q:
            a = lyapunov_audit(target, q, M=c.analysis.M, R=c.analysis.R)
            d = a.to_dict()
            d["level"] = label
            audits.append(d)
            ok = ok and a.passed
    ctx.write_json("lyapunov.json", {"audits": audits, "pass": ok})
    print(json.dumps({"pass": ok, "c_q_min": {f"{d['level']}:q{d['q']}": d["c_q_min"] for d in audits}},
                     sort_keys=True))
    return EXIT_OK if ok else EXIT_FAIL


COMMANDS = {
    "check": (cmd_check, "check the coefficient hypotheses"),
    "hormander": (cmd_hormander, "test the Hormander condition at x0"),
    "simulate": (cmd_simulate, "simulate paths and export X, Z, C"),
    "moments": (cmd_moments, "estimate E|X_t|^p per truncation level"),
    "convergence": (cmd_convergence, "mean-square convergence in the truncation level"),
    "nondeg": (cmd_nondeg, "empirical tails of the Malliavin covariance"),
    "density": (cmd_density, "IBP and kernel density estimates of X_T"),
    "audit-lyapunov": (cmd_audit, "audit the Lyapunov generator inequality"),
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="malliavin-lab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        s = sub.add_parser(name, help=help_text)
        s.add_argument("--config", required=True, type=Path, help="TOML or JSON experiment config")
        s.add_argument("--seed", type=int, help="override sim.seed")
        s.add_argument("--out", type=Path, default=Path("runs"), help="parent directory for run directories")
        s.add_argument("--paths", type=int, help="override sim.paths")
        s.add_argument("--steps", type=int, help="override sim.steps")
    return p


def run_dir(cfg: cfgmod.ExperimentConfig, out: Path) -> Path:
    return out / f"{cfg.digest()}-s{cfg.sim.seed}"


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = cfgmod.with_overrides(cfgmod.load(args.config), args.seed, args.paths, args.steps)
    except cfgmod.ConfigError as err:
        print(f"malliavin-lab: config error: {err}", file=sys.stderr)
        return EXIT_USAGE

    out = run_dir(cfg, args.out)
    out.mkdir(parents=True, exist_ok=True)
    ctx = RunContext(cfg, out, args.command)
    started = datetime.now(timezone.utc).isoformat(timespec="seconds")
    t0 = time.perf_counter()
    fn = COMMANDS[args.command][0]
    error = None
    try:
        code = fn(ctx)
    except UsageError as err:
        print(f"malliavin-lab: {err}", file=sys.stderr)
        code, error = EXIT_USAGE, str(err)
    except (ValueError, ArithmeticError) as err:
        log.error("%s failed: %s", args.command, err)
        code, error = EXIT_FAIL, f"{type(err).__name__}: {err}"
    manifest = {
        "command": args.command,
        "config": cfg.to_dict(),
        "seed": cfg.sim.seed,
        "started": started,
        "elapsed_s": round(time.perf_counter() - t0, 3),
        "explosions": ctx.explosions,
        "excluded_paths": ctx.excluded,
        "exit_code": code,
        "error": error,
        "outputs": ctx.outputs,
        "versions": _versions(),
        **ctx.extra,
    }
    (out / f"manifest_{args.command}.json").write_text(
        json.dumps(_clean(manifest), indent=2, sort_keys=True, default=_json_default) + "\n")
    log.info("wrote %s", out)
    return code


if __name__ == "__main__":
    sys.exit(main())
