"""Joint discretisation of the SDE and its derivative processes.

For every path the following are advanced on the same Brownian increments:

* the state ``X`` (explicit, tamed or drift-implicit Euler);
* the first variation ``Z`` (derivative in the initial condition);
* ``C_t = int_0^t (sigma(X_s) / Z_s)^2 ds`` by the trapezoid rule;
* the Malliavin derivatives ``D_r X`` launched at ``sigma(X_r)`` for every
  launch time ``r`` of the r-grid;
* optionally the second-order processes ``D_r Z`` and ``D_r C_T`` needed by
  the integration-by-parts weight.

The linear processes share one step multiplier per path and step, so the
discrete flow identity ``D_r X_t = Z_t Z_r^{-1} sigma(X_r)`` holds up to
rounding.  Paths are processed in fixed-size chunks; the chunking never
depends on the worker count, so results are bit-identical across
``MALLIAVIN_LAB_THREADS`` settings.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from .model import Coefficients, SdeModel, raw_coefficients
from .rng import brownian_increments
from .truncation import CutoffScheme, TruncatedModel

SCHEMES = ("explicit-euler", "tamed-euler", "drift-implicit-euler")
EXPLOSION_THRESHOLD = 1e15
CHUNK_SIZE = 2048
NEWTON_TOL = 1e-12
NEWTON_MAX_ITER = 50
THREADS_ENV = "MALLIAVIN_LAB_THREADS"


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def equispaced_r_grid(steps: int, size: int) -> tuple[int, ...]:
    """Up to ``size`` launch indices spread evenly over 0..steps (endpoints included)."""
    if size >= steps + 1:
        return tuple(range(steps + 1))
    if size == 1:
        return (0,)
    return tuple(int(i) for i in np.unique(np.round(np.linspace(0, steps, size)).astype(int)))


@dataclass(frozen=True)
class SimConfig:
    steps: int
    paths: int
    seed: int
    scheme: Optional[str] = None
    r_grid: tuple[int, ...] = ()
    record: Optional[tuple[int, ...]] = None  # time indices kept in bundles; None keeps all
    second_order: bool = False
    record_malliavin: bool = False  # keep D_r X at the record indices as well
    keep_increments: bool = False
    truncation_level: Optional[int] = None  # simulate the level-n truncation of a raw model
    xi: Optional[float] = None  # cutoff exponent for truncation_level; default: the growth exponent

    def __post_init__(self):
        if self.steps < 1 or self.paths < 1:
            raise ValueError("steps and paths must be >= 1")
        if self.scheme is not None and self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        r = list(self.r_grid)
        if any(b <= a for a, b in zip(r, r[1:])):
            raise ValueError("r_grid indices must be strictly increasing")
        if r and (r[0] < 0 or r[-1] > self.steps):
            raise ValueError("r_grid indices must lie in [0, steps]")
        if self.record is not None:
            rec = list(self.record)
            if any(b <= a for a, b in zip(rec, rec[1:])) or (rec and (rec[0] < 0 or rec[-1] > self.steps)):
                raise ValueError("record indices must be strictly increasing within [0, steps]")
        if self.second_order and not r:
            raise ValueError("second-order processes need a nonempty r_grid")


@dataclass
class PathBundle:
    """Simulated paths ``paths[i]`` of one chunk.

    ``X``, ``Z``, ``C`` are recorded at ``record`` (time indices, times
    ``t``).  Malliavin quantities are indexed by launch ``j`` (time index
    ``r_grid[j]``); ``D_r X_t`` is zero for ``t < r`` and stored as such.
    """

    paths: np.ndarray
    dt: float
    record: np.ndarray
    t: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    C: np.ndarray
    r_grid: np.ndarray
    X_at_r: np.ndarray
    Z_at_r: np.ndarray
    DX_T: np.ndarray
    DZ_T: Optional[np.ndarray]
    DC_T: Optional[np.ndarray]
    DX: Optional[np.ndarray]
    ito: np.ndarray  # int_0^T sigma(X_s)/Z_s dW_s, left-point sums
    sup_abs: np.ndarray
    tau: np.ndarray
    exploded: np.ndarray
    degenerate: np.ndarray
    dW: Optional[np.ndarray] = None

    @property
    def X_T(self) -> np.ndarray:
        return self.X[:, -1]

    @property
    def Z_T(self) -> np.ndarray:
        return self.Z[:, -1]

    @property
    def C_T(self) -> np.ndarray:
        return self.C[:, -1]

    @property
    def valid(self) -> np.ndarray:
        return ~(self.exploded | self.degenerate)

    def __len__(self) -> int:
        return int(self.paths.size)


def as_coefficients(obj: Union[SdeModel, TruncatedModel, Coefficients]) -> Coefficients:
    if isinstance(obj, Coefficients):
        return obj
    if isinstance(obj, TruncatedModel):
        return obj.coefficients()
    if isinstance(obj, SdeModel):
        return raw_coefficients(obj)
    raise TypeError(f"cannot simulate {type(obj).__name__}")


def _base_model(obj) -> Optional[SdeModel]:
    if isinstance(obj, TruncatedModel):
        return obj.base
    if isinstance(obj, SdeModel):
        return obj
    return None


def _implicit_solve(co: Coefficients, rhs: np.ndarray, guess: np.ndarray, dt: float) -> np.ndarray:
    """Solve y - dt B(y) = rhs elementwise by Newton's method."""
    y = guess.copy()
    for _ in range(NEWTON_MAX_ITER):
        F = y - dt * co.drift(y) - rhs
        dF = 1.0 - dt * co.drift_d1(y)
        step = F / dF
        y = y - step
        if np.all(np.abs(step) <= NEWTON_TOL * (1.0 + np.abs(y))):
            break
    return y


def _run_chunk(co: Coefficients, x0: float, T: float, cfg: SimConfig, scheme: str,
               first: int, last: int, dW: Optional[np.ndarray] = None) -> PathBundle:
    n, steps = last - first, cfg.steps
    dt = T / steps
    paths = np.arange(first, last)
    if dW is None:
        dW = brownian_increments(cfg.seed, paths, steps, dt)

    record = np.arange(steps + 1) if cfg.record is None else np.asarray(cfg.record, dtype=int)
    rec_pos = np.full(steps + 1, -1)
    rec_pos[record] = np.arange(record.size)
    r_idx = np.asarray(cfg.r_grid, dtype=int)
    nr = r_idx.size
    launch = np.full(steps + 1, -1)
    launch[r_idx] = np.arange(nr)
    so = cfg.second_order

    Xr = np.empty((n, record.size))
    Zr = np.empty((n, record.size))
    Cr = np.empty((n, record.size))
    DXr = np.zeros((n, nr, record.size)) if cfg.record_malliavin else None
    X_at_r = np.zeros((n, nr))
    Z_at_r = np.zeros((n, nr))

    x = np.full(n, float(x0))
    z = np.ones(n)
    c = np.zeros(n)
    dx = np.zeros((n, nr))
    dz = np.zeros((n, nr)) if so else None
    dc = np.zeros((n, nr)) if so else None
    ito = np.zeros(n)
    alive = np.ones(n, dtype=bool)
    degenerate = np.zeros(n, dtype=bool)
    tau = np.full(n, math.inf)
    sup_abs = np.abs(x)
    plateau = co.plateau

    with np.errstate(all="ignore"):
        s = co.diffusion(x)
        s1 = co.diffusion_d1(x)
        a = s / z
        g = a * a
        for k in range(steps + 1):
            j = launch[k]
            if j >= 0:
                dx[:, j] = s
                X_at_r[:, j] = x
                Z_at_r[:, j] = z
                if so:
                    dz[:, j] = s1 * z
            if so:
                # D_r of the C-integrand (sigma/Z)^2, trapezoid over s in [r, T]
                h = 2.0 * a[:, None] * (s1[:, None] * dx - a[:, None] * dz) / z[:, None]
                dc += dt * h
                if j >= 0:
                    dc[:, j] -= 0.5 * dt * h[:, j]
                if k == steps:
                    dc -= 0.5 * dt * h
            p = rec_pos[k]
            if p >= 0:
                Xr[:, p], Zr[:, p], Cr[:, p] = x, z, c
                if DXr is not None:
                    DXr[:, :, p] = dx
            if k == steps:
                break

            dw = dW[:, k]
            b = co.drift(x)
            b1 = co.drift_d1(x)
            ito += a * dw
            if scheme == "explicit-euler":
                x_new = x + b * dt + s * dw
                theta = 1.0
                mult = 1.0 + b1 * dt + s1 * dw
                den = 1.0
            elif scheme == "tamed-euler":
                x_new = x + b * dt / (1.0 + np.abs(b) * dt) + s * dw
                theta = 1.0 / (1.0 + np.abs(b1) * dt)
                mult = 1.0 + theta * b1 * dt + s1 * dw
                den = 1.0
            else:
                rhs = x + s * dw
                x_new = _implicit_solve(co, rhs, rhs + b * dt, dt)
                theta = 1.0
                den = 1.0 - co.drift_d1(x_new) * dt
                mult = (1.0 + s1 * dw) / den
            if so:
                src = (dx * z[:, None]) * ((theta * co.drift_d2(x) * dt + co.diffusion_d2(x) * dw) / den)[:, None]
                dz = dz * mult[:, None] + src
            dx = dx * mult[:, None]
            z_new = z * mult
            degenerate |= alive & ((z_new == 0.0) | (np.sign(z_new) != np.sign(z)))

            bad = ~np.isfinite(x_new) | (np.abs(x_new) > EXPLOSION_THRESHOLD)
            alive &= ~bad
            if not alive.all():
                x_new = np.where(alive, x_new, x)
                z_new = np.where(alive, z_new, z)
            x, z = x_new, z_new
            tau = np.where(np.isinf(tau) & (np.abs(x) > plateau), (k + 1) * dt, tau)
            sup_abs = np.maximum(sup_abs, np.abs(x))
            s = co.diffusion(x)
            s1 = co.diffusion_d1(x)
            a = s / z
            g_new = a * a
            c = c + 0.5 * dt * (g + g_new)
            g = g_new

    return PathBundle(
        paths=paths, dt=dt, record=record, t=record * dt, X=Xr, Z=Zr, C=Cr,
        r_grid=r_idx, X_at_r=X_at_r, Z_at_r=Z_at_r, DX_T=dx, DZ_T=dz, DC_T=dc, DX=DXr,
        ito=ito, sup_abs=sup_abs, tau=tau, exploded=~alive, degenerate=degenerate,
        dW=dW if cfg.keep_increments else None,
    )


def resolve_scheme(co: Coefficients, cfg: SimConfig) -> str:
    return cfg.scheme or co.default_scheme


def _apply_truncation(model, cfg: SimConfig):
    if cfg.truncation_level is None:
        return model
    if not isinstance(model, SdeModel):
        raise ValueError("truncation_level applies to raw models only")
    xi = cfg.xi
    if xi is None:
        from .model import check_growth
        xi = check_growth(model).xi
    return TruncatedModel(model, CutoffScheme(float(xi), int(cfg.truncation_level)))


def simulate_with_increments(model, cfg: SimConfig, dW: np.ndarray, x0: Optional[float] = None,
                             T: Optional[float] = None) -> PathBundle:
    """Run ``dW.shape[0]`` paths on caller-supplied Brownian increments."""
    model = _apply_truncation(model, cfg)
    base = _base_model(model)
    x0 = base.x0 if x0 is None else x0
    T = base.T if T is None else T
    dW = np.atleast_2d(np.asarray(dW, dtype=float))
    if dW.shape[1] != cfg.steps:
        raise ValueError("increments must have one column per step")
    co = as_coefficients(model)
    return _run_chunk(co, x0, T, cfg, resolve_scheme(co, cfg), 0, dW.shape[0], dW)


def simulate(model, cfg: SimConfig, x0: Optional[float] = None, T: Optional[float] = None,
             threads: Optional[int] = None) -> Iterator[PathBundle]:
    """Yield PathBundles chunk by chunk, in path order.

    ``model`` is an SdeModel, a TruncatedModel or a bare Coefficients (then
    ``x0`` and ``T`` are required).
    """
    model = _apply_truncation(model, cfg)
    base = _base_model(model)
    if x0 is None or T is None:
        if base is None:
            raise ValueError("x0 and T are required when simulating bare coefficients")
        x0 = base.x0 if x0 is None else x0
        T = base.T if T is None else T
    co = as_coefficients(model)
    scheme = resolve_scheme(co, cfg)
    chunks = [(i, min(i + CHUNK_SIZE, cfg.paths)) for i in range(0, cfg.paths, CHUNK_SIZE)]
    threads = worker_count() if threads is None else threads
    if threads <= 1:
        for first, last in chunks:
            yield _run_chunk(co, x0, T, cfg, scheme, first, last)
        return
    window = 2 * threads
    with ThreadPoolExecutor(max_workers=threads) as pool:
        pending = []
        for first, last in chunks:
            pending.append(pool.submit(_run_chunk, co, x0, T, cfg, scheme, first, last))
            if len(pending) >= window:
                yield pending.pop(0).result()
        for fut in pending:
            yield fut.result()


def simulate_all(model, cfg: SimConfig, **kw) -> PathBundle:
    """Concatenate every chunk into one bundle (small runs only)."""
    parts = list(simulate(model, cfg, **kw))
    if len(parts) == 1:
        return parts[0]
    first = parts[0]

    def cat(name):
        vals = [getattr(p, name) for p in parts]
        return None if vals[0] is None else np.concatenate(vals, axis=0)

    arrays = {name: cat(name) for name in (
        "paths", "X", "Z", "C", "X_at_r", "Z_at_r", "DX_T", "DZ_T", "DC_T", "DX", "ito",
        "sup_abs", "tau", "exploded", "degenerate", "dW")}
    return PathBundle(dt=first.dt, record=first.record, t=first.t, r_grid=first.r_grid, **arrays)


# ---------------------------------------------------------------------------
# order-fixed reductions


def mean_se(values: np.ndarray) -> tuple[float, float]:
    """Sample mean and standard error with exactly rounded sums (order independent)."""
    v = np.asarray(values, dtype=float).ravel()
    n = v.size
    if n == 0:
        return math.nan, math.nan
    mean = math.fsum(v) / n
    if n == 1:
        return mean, 0.0
    var = math.fsum((v - mean) ** 2) / (n - 1)
    return mean, math.sqrt(var / n)


@dataclass
class MomentRow:
    level: str
    t: float
    p: float
    mean: float
    stderr: float
    explosions: int
    kind: str = "pointwise"  # or "sup"

    def as_csv(self) -> list:
        return [self.level if self.kind == "pointwise" else f"{self.level}:sup", self.t, self.p,
                self.mean, self.stderr, self.explosions]


def moment_time_indices(steps: int, count: int = 8) -> tuple[int, ...]:
    """``count`` equispaced time indices in (0, steps]."""
    idx = np.maximum(np.round(np.linspace(steps / count, steps, count)).astype(int), 1)
    return tuple(int(i) for i in np.unique(idx))


def estimate_moments(model, cfg: SimConfig, p_list: Sequence[float], times: Optional[Sequence[int]] = None,
                     with_sup: bool = False, level: Optional[str] = None) -> list[MomentRow]:
    """Monte Carlo E|X_t|^p on a time subgrid (and E sup_t |X_t|^p if asked).

    Exploded paths are left out of the averages and counted in every row.
    """
    times = tuple(times) if times is not None else moment_time_indices(cfg.steps)
    run = replace(cfg, record=times, r_grid=(), second_order=False, record_malliavin=False,
                  keep_increments=False, truncation_level=None)
    model = _apply_truncation(model, cfg)
    co = as_coefficients(model)
    level = level if level is not None else co.label
    xs, sups, exploded = [], [], 0
    for bundle in simulate(model, run):
        ok = ~bundle.exploded
        exploded += int(bundle.exploded.sum())
        xs.append(bundle.X[ok])
        sups.append(bundle.sup_abs[ok])
    X = np.concatenate(xs, axis=0)
    S = np.concatenate(sups)
    dt = _base_model(model).T / cfg.steps
    rows = []
    for p in p_list:
        for col, k in enumerate(times):
            mean, se = mean_se(np.abs(X[:, col]) ** p)
            rows.append(MomentRow(level, k * dt, float(p), mean, se, exploded))
        if with_sup:
            mean, se = mean_se(S ** p)
            rows.append(MomentRow(level, cfg.steps * dt, float(p), mean, se, exploded, kind="sup"))
    return rows


@dataclass
class ConvergenceRow:
    level: int
    mse: float
    stderr: float
    exit_fraction: float
    explosions: int


def level_convergence(m: SdeModel, xi: float, levels: Sequence[int], reference: int,
                      cfg: SimConfig) -> list[ConvergenceRow]:
    """E|X^n_T - X^N_T|^2 for truncation levels n against reference level N.

    All levels share the Brownian increments (same seed and path indices),
    so paths coincide until they leave the smaller plateau.
    """
    run = SimConfig(cfg.steps, cfg.paths, cfg.seed, cfg.scheme, record=(cfg.steps,))
    ref_model = TruncatedModel(m, CutoffScheme(xi, reference))
    ref_bundles = list(simulate(ref_model, run))
    ref = np.concatenate([b.X_T for b in ref_bundles])
    ref_bad = np.concatenate([b.exploded for b in ref_bundles])
    rows = []
    for n in levels:
        bundles = list(simulate(TruncatedModel(m, CutoffScheme(xi, n)), run))
        xT = np.concatenate([b.X_T for b in bundles])
        bad = np.concatenate([b.exploded for b in bundles]) | ref_bad
        tau = np.concatenate([b.tau for b in bundles])
        mse, se = mean_se((xT[~bad] - ref[~bad]) ** 2)
        rows.append(ConvergenceRow(int(n), mse, se, float(np.mean(np.isfinite(tau))), int(bad.sum())))
    return rows
