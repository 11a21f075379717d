"""Malliavin covariance, nondegeneracy tails, IBP density and the Lyapunov audit.

The Malliavin covariance of X_T is ``Lambda = int_0^T (D_r X_T)^2 dr``.  By
the flow identity ``D_r X_T = Z_T Z_r^{-1} sigma(X_r)`` this equals
``Z_T^2 C_T`` with ``C_T = int_0^T (sigma(X_r) / Z_r)^2 dr``.

The density estimator uses the direction ``a_r = sigma(X_r) / Z_r`` for
which ``<D X_T, a> = Z_T C_T``.  With ``G = 1 / (Z_T C_T)`` the Skorokhod
weight is::

    H = G int_0^T a_r dW_r + int_0^T G^2 D_r(Z_T C_T) a_r dr

and ``p(x) = E[1{X_T > x} H]``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy.stats import binomtest

from .model import Coefficients, SdeModel, hormander_check, raw_coefficients
from .simulator import (PathBundle, SimConfig, equispaced_r_grid, mean_se, moment_time_indices,
                        simulate)
from .truncation import TruncatedModel

LOCALIZATION = 1e-12


# ---------------------------------------------------------------------------
# covariance


@dataclass
class CovarianceSample:
    lam: np.ndarray
    z_T: np.ndarray
    c_T: np.ndarray
    excluded: int = 0  # exploded or degenerate paths left out


def covariance(bundle: PathBundle) -> CovarianceSample:
    """Lambda = Z_T^2 C_T on the valid paths of a bundle."""
    ok = bundle.valid
    z, c = bundle.Z_T[ok], bundle.C_T[ok]
    return CovarianceSample(z * z * c, z, c, int((~ok).sum()))


def covariance_from_derivatives(bundle: PathBundle) -> np.ndarray:
    """Trapezoid of (D_r X_T)^2 over the bundle's r-grid (all paths)."""
    r = bundle.r_grid * bundle.dt
    return np.trapezoid(bundle.DX_T ** 2, r, axis=1)


def exponential_C(co: Coefficients, bundle: PathBundle) -> np.ndarray:
    """C_T from the closed form of Z_r^{-2} along the recorded path.

    Uses ``Z_r^{-2} = exp{-2 int_0^r (B' - sigma'^2 / 2) ds - 2 int_0^r sigma' dW}``
    with ``B = b + f``; needs every time index recorded and the increments kept.
    """
    if bundle.dW is None or bundle.X.shape[1] != bundle.dW.shape[1] + 1:
        raise ValueError("exponential form needs the full path and its increments")
    dt = bundle.dt
    X = bundle.X[:, :-1]
    s1 = co.diffusion_d1(X)
    inc = (co.drift_d1(X) - 0.5 * s1 * s1) * dt + s1 * bundle.dW
    log_z = np.concatenate([np.zeros((X.shape[0], 1)), np.cumsum(inc, axis=1)], axis=1)
    g = co.diffusion(bundle.X) ** 2 * np.exp(-2.0 * log_z)
    return np.trapezoid(g, dx=dt, axis=1)


# ---------------------------------------------------------------------------
# nondegeneracy tails


@dataclass
class TailRow:
    eps: float
    p: float
    p_hat: float
    ci_lo: float
    ci_hi: float
    bound: float
    hits: int
    n: int

    @property
    def half_width(self) -> float:
        return 0.5 * (self.ci_hi - self.ci_lo)

    def as_csv(self) -> list:
        return [self.eps, self.p_hat, self.ci_lo, self.ci_hi, self.bound, self.p]


@dataclass
class TailTable:
    rows: list
    moments: dict  # p -> estimated sup_t E|Z_t|^p
    paths: int
    excluded: int
    explosions: int
    hormander: dict


def wilson_interval(hits: int, n: int, level: float = 0.95) -> tuple[float, float]:
    ci = binomtest(hits, n).proportion_ci(confidence_level=level, method="wilson")
    return float(ci.low), float(ci.high)


def nondegeneracy_tail(model, cfg: SimConfig, eps_list: Sequence[float], p_list: Sequence[float],
                       level: float = 0.95) -> TailTable:
    """Empirical P(Lambda <= eps) with Wilson intervals and the bound eps^p (1 + l_p).

    ``l_p`` is the largest Monte Carlo estimate of E|Z_t|^p over eight time
    points.
    """
    base = model.base if isinstance(model, TruncatedModel) else model
    hc = hormander_check(base) if isinstance(base, SdeModel) else None
    if hc is not None and not hc.passed:
        warnings.warn("Hormander condition fails at x0; the tail bound is vacuous", RuntimeWarning)
    times = moment_time_indices(cfg.steps)
    run = replace(cfg, record=times, r_grid=(), second_order=False, record_malliavin=False,
                  keep_increments=False)
    lams, zs, excluded, exploded = [], [], 0, 0
    for bundle in simulate(model, run):
        cs = covariance(bundle)
        lams.append(cs.lam)
        zs.append(np.abs(bundle.Z[bundle.valid]))
        excluded += cs.excluded
        exploded += int(bundle.exploded.sum())
    lam = np.concatenate(lams)
    Z = np.concatenate(zs, axis=0)
    n = lam.size
    moments = {float(p): max(mean_se(Z[:, j] ** p)[0] for j in range(Z.shape[1])) for p in p_list}
    rows = []
    for p in p_list:
        for e in sorted(eps_list):
            hits = int(np.count_nonzero(lam <= e))
            lo, hi = wilson_interval(hits, n, level)
            rows.append(TailRow(float(e), float(p), hits / n, lo, hi,
                                float(e) ** p * (1.0 + moments[float(p)]), hits, n))
    return TailTable(rows, moments, n, excluded, exploded, hc.to_dict() if hc is not None else {})


# ---------------------------------------------------------------------------
# integration-by-parts density


def ibp_weight(bundle: PathBundle) -> tuple[np.ndarray, np.ndarray]:
    """Per-path Skorokhod weights H and the mask of paths they are defined on.

    Paths that exploded, went degenerate or have Z_T C_T below the
    localization threshold are masked out.
    """
    if bundle.DZ_T is None or bundle.DC_T is None:
        raise ValueError("the weight needs second-order processes (second_order=True)")
    zT, cT = bundle.Z_T, bundle.C_T
    zc = zT * cT
    ok = bundle.valid & np.isfinite(zc) & (np.abs(zc) >= LOCALIZATION)
    H = np.zeros(zT.shape)
    with np.errstate(all="ignore"):
        G = 1.0 / zc[ok]
        # a_r = sigma(X_r)/Z_r equals D_r X_T / Z_T by the flow identity
        a_r = bundle.DX_T[ok] / zT[ok, None]
        d_zc = bundle.DZ_T[ok] * cT[ok, None] + zT[ok, None] * bundle.DC_T[ok]
        r = bundle.r_grid * bundle.dt
        corr = np.trapezoid(d_zc * a_r, r, axis=1)
        H[ok] = G * bundle.ito[ok] + G * G * corr
    ok &= np.isfinite(H)
    H[~ok] = 0.0
    return H, ok


@dataclass
class DensityEstimate:
    grid: np.ndarray
    ibp: np.ndarray
    ibp_se: np.ndarray
    kde: np.ndarray
    kde_se: np.ndarray
    bandwidth: float
    paths: int
    excluded: int
    explosions: int
    mass_ibp: float = math.nan
    mass_kde: float = math.nan
    mass_grid: Optional[np.ndarray] = None
    weight_mean: float = math.nan
    weight_se: float = math.nan

    def rows(self) -> list:
        return [[x, a, b, c, d] for x, a, b, c, d in
                zip(self.grid, self.ibp, self.ibp_se, self.kde, self.kde_se)]


def silverman_bandwidth(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=float)
    sd = float(np.std(x, ddof=1))
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    return 0.9 * spread * x.size ** -0.2


def ibp_estimate(xT: np.ndarray, H: np.ndarray, grid: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    est, se = [], []
    for x in grid:
        m, s = mean_se(np.where(xT > x, H, 0.0))
        est.append(m)
        se.append(s)
    return np.array(est), np.array(se)


def kde_estimate(xT: np.ndarray, grid: Sequence[float], h: float) -> tuple[np.ndarray, np.ndarray]:
    est, se = [], []
    c = 1.0 / (h * math.sqrt(2.0 * math.pi))
    for x in grid:
        k = c * np.exp(-0.5 * ((x - xT) / h) ** 2)
        m, s = mean_se(k)
        est.append(m)
        se.append(s)
    return np.array(est), np.array(se)


def density_config(cfg: SimConfig, r_grid_size: int = 64) -> SimConfig:
    """cfg with the r-grid and recording the density run needs."""
    r = cfg.r_grid or equispaced_r_grid(cfg.steps, r_grid_size)
    return replace(cfg, r_grid=tuple(r), record=(cfg.steps,), second_order=True,
                   record_malliavin=False, keep_increments=False)


def _collect(model, cfg: SimConfig, with_weight: bool):
    xs, hs, oks, explosions = [], [], [], 0
    for bundle in simulate(model, cfg):
        explosions += int(bundle.exploded.sum())
        xs.append(bundle.X_T)
        if with_weight:
            H, ok = ibp_weight(bundle)
        else:
            H, ok = np.zeros(len(bundle)), bundle.valid
        hs.append(H)
        oks.append(ok)
    return np.concatenate(xs), np.concatenate(hs), np.concatenate(oks), explosions


def density(model, cfg: SimConfig, x_grid: Optional[Sequence[float]] = None,
            bandwidth: Optional[float] = None, r_grid_size: int = 64, mass_points: int = 101,
            grid_points: int = 11) -> DensityEstimate:
    """IBP and kernel estimates of the density of X_T from one set of paths.

    Without ``x_grid`` the estimates are taken at ``grid_points`` points over
    ``mean +- 3 sd`` of the simulated X_T.  The mass check integrates both
    estimates by the trapezoid rule over ``mean +- 5 sd``.
    """
    run = density_config(cfg, r_grid_size)
    xT, H, ok, explosions = _collect(model, run, True)
    x, H = xT[ok], H[ok]
    mu, sd = mean_se(x)[0], float(np.std(x, ddof=1))
    if x_grid is None:
        grid = np.linspace(mu - 3 * sd, mu + 3 * sd, grid_points)
    else:
        grid = np.asarray(x_grid, dtype=float)
    h = silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
    ibp, ibp_se = ibp_estimate(x, H, grid)
    kde, kde_se = kde_estimate(x, grid, h)
    mg = np.linspace(mu - 5 * sd, mu + 5 * sd, mass_points)
    mass_ibp = float(np.trapezoid(ibp_estimate(x, H, mg)[0], mg))
    mass_kde = float(np.trapezoid(kde_estimate(x, mg, h)[0], mg))
    wm, ws = mean_se(H)
    return DensityEstimate(grid, ibp, ibp_se, kde, kde_se, h, int(x.size), int((~ok).sum()),
                           explosions, mass_ibp, mass_kde, mg, wm, ws)


def density_ibp(model, cfg: SimConfig, x_grid: Sequence[float], r_grid_size: int = 64) -> DensityEstimate:
    return density(model, cfg, x_grid, r_grid_size=r_grid_size)


def density_kde(model, cfg: SimConfig, x_grid: Sequence[float],
                bandwidth: Optional[float] = None) -> DensityEstimate:
    """Kernel estimate alone; skips the Malliavin processes."""
    run = replace(cfg, r_grid=(), record=(cfg.steps,), second_order=False, record_malliavin=False)
    xT, _, ok, explosions = _collect(model, run, False)
    x = xT[ok]
    grid = np.asarray(x_grid, dtype=float)
    h = silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
    kde, kde_se = kde_estimate(x, grid, h)
    nan = np.full(grid.shape, np.nan)
    return DensityEstimate(grid, nan, nan, kde, kde_se, h, int(x.size), int((~ok).sum()), explosions)


# ---------------------------------------------------------------------------
# Lyapunov generator audit


@dataclass(frozen=True)
class LyapunovFunction:
    """V(x, y) = x^{4q} + x^{2q} y^{2q} + y^{2q} + M, or a sum of such terms."""

    q: int
    M: float = 1.0

    def __post_init__(self):
        if self.q < 1 or self.M <= 0:
            raise ValueError("need q >= 1 and M > 0")

    def derivatives(self, x, y):
        """(V, V_x, V_y, V_xx, V_xy, V_yy)."""
        q = self.q
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        a, c = 4 * q, 2 * q
        x2q, y2q = x ** c, y ** c
        V = x ** a + x2q * y2q + y2q + self.M
        Vx = a * x ** (a - 1) + c * x ** (c - 1) * y2q
        Vy = c * (x2q + 1.0) * y ** (c - 1)
        Vxx = a * (a - 1) * x ** (a - 2) + c * (c - 1) * x ** (c - 2) * y2q
        Vxy = c * c * x ** (c - 1) * y ** (c - 1)
        Vyy = c * (c - 1) * (x2q + 1.0) * y ** (c - 2)
        return V, Vx, Vy, Vxx, Vxy, Vyy


@dataclass(frozen=True)
class LyapunovSum:
    terms: tuple

    def derivatives(self, x, y):
        parts = [t.derivatives(x, y) for t in self.terms]
        return tuple(sum(p[i] for p in parts) for i in range(6))


def _coeffs(model) -> Coefficients:
    if isinstance(model, Coefficients):
        return model
    if isinstance(model, TruncatedModel):
        return model.coefficients()
    return raw_coefficients(model)


def generator_apply(model, V, x, y):
    """L V for the pair (X, D_r X) of the (possibly truncated) model."""
    co = _coeffs(model)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    with np.errstate(all="ignore"):
        _, Vx, Vy, Vxx, Vxy, Vyy = V.derivatives(x, y)
        B, B1 = co.drift(x), co.drift_d1(x)
        s, s1 = co.diffusion(x), co.diffusion_d1(x)
        out = Vx * B + Vy * B1 * y + 0.5 * Vxx * s * s + Vxy * s * s1 * y + 0.5 * Vyy * (s1 * y) ** 2
    return out if out.ndim else float(out)


def generator_terms(model, q: int, x, y) -> tuple:
    """(I1, I2, I3, I4) of the grouped expansion of L V_q."""
    co = _coeffs(model)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    with np.errstate(all="ignore"):
        B, B1 = co.drift(x), co.drift_d1(x)
        s, s1 = co.diffusion(x), co.diffusion_d1(x)
        y2q = y ** (2 * q)
        I1 = 4 * q * x ** (4 * q - 2) * (x * B + 0.5 * (4 * q - 1) * s * s)
        I2 = 2 * q * y2q * x ** (2 * q - 2) * (x * B + 0.5 * (2 * q - 1) * s * s)
        I3 = 2 * q * y2q * (2 * q * x ** (2 * q - 1) * s * s1 + 0.5 * (2 * q - 1) * s1 * s1 * (x ** (2 * q) + 1.0))
        I4 = 2 * q * y2q * B1 * (x ** (2 * q) + 1.0)
    return I1, I2, I3, I4


def audit_grid(R: float, per_decade: int = 40, r_min: float = 1e-3) -> np.ndarray:
    """Symmetric 1-d axis: 0 and +-10^k log-spaced from r_min to R.

    Points sit on a fixed lattice in log10, so the axis for 2R contains the
    axis for R.
    """
    lo = math.floor(math.log10(r_min) * per_decade)
    hi = math.floor(math.log10(R) * per_decade + 1e-9)
    pos = 10.0 ** (np.arange(lo, hi + 1) / per_decade)
    if pos[-1] < R * (1 - 1e-12):
        pos = np.append(pos, R)
    return np.concatenate([-pos[::-1], [0.0], pos])


@dataclass
class GeneratorAudit:
    q: int
    M: float
    R: float
    x: np.ndarray
    y: np.ndarray
    lhs: np.ndarray
    rhs_budget: np.ndarray
    c_q_min: float
    c_q_doubled: float
    passed: bool

    def to_dict(self) -> dict:
        def num(v):
            return v if math.isfinite(v) else None
        return {"q": self.q, "M": self.M, "R": self.R, "grid_points": int(self.lhs.size),
                "c_q_min": num(self.c_q_min), "c_q_min_doubled": num(self.c_q_doubled),
                "pass": self.passed}


def _c_q_min(model, co, q: int, M: float, R: float, per_decade: int):
    axis = audit_grid(R, per_decade)
    x, y = np.meshgrid(axis, axis, indexing="ij")
    x, y = x.ravel(), y.ravel()
    V = LyapunovFunction(q, M)
    lhs = generator_apply(co, V, x, y)
    with np.errstate(all="ignore"):
        excess = 2 * q * (2 * q - 1) * y ** (2 * q) * co.raw_diffusion_d1(x) ** 2
        vq = V.derivatives(x, y)[0]
        ratio = (lhs - excess) / vq
    c = float(np.max(ratio)) if np.all(np.isfinite(ratio)) else math.inf
    # the smallest c with lhs <= c V + excess at every point
    return x, y, lhs, excess, c


def lyapunov_audit(model, q: int, M: float = 1.0, R: float = 10.0, per_decade: int = 40,
                   rtol: float = 0.05) -> GeneratorAudit:
    """c_q_min on the grid of radius R; pass iff finite and within rtol at 2R."""
    co = _coeffs(model)
    x, y, lhs, excess, c = _c_q_min(model, co, q, M, R, per_decade)
    c2 = _c_q_min(model, co, q, M, 2 * R, per_decade)[4]
    passed = math.isfinite(c) and math.isfinite(c2) and abs(c2 - c) <= rtol * abs(c) + 1e-9
    rhs = c * V_values(q, M, x, y) + excess if math.isfinite(c) else np.full(lhs.shape, np.inf)
    return GeneratorAudit(q, M, R, x, y, lhs, rhs, c, c2, passed)


def V_values(q: int, M: float, x, y):
    return LyapunovFunction(q, M).derivatives(x, y)[0]
