"""Smooth cutoffs and globally Lipschitz truncations of the coefficients.

In one dimension the mollified indicator ``psi_eps * 1_(-r, r)`` reduces to
a difference of the bump's cumulative integral::

    phi_n(x) = Psi((x + r) / eps) - Psi((x - r) / eps)

with plateau ``P = n**xi``, ``eps = P / 2`` and ``r = P + eps``, so that
``phi_n = 1`` on ``|x| <= P`` and ``phi_n = 0`` on ``|x| >= 2P``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from scipy.integrate import quad
from scipy.interpolate import CubicHermiteSpline

from . import expr as ex
from .model import Coefficients, SdeModel, check_growth, GrowthError

TABLE_INTERVALS = 4096


def _bump_raw(t):
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    inside = np.abs(t) < 1.0
    ti = t[inside]
    out[inside] = np.exp(-1.0 / (1.0 - ti * ti))
    return out


@lru_cache(maxsize=1)
def _bump_table() -> tuple[float, CubicHermiteSpline]:
    f = lambda t: math.exp(-1.0 / (1.0 - t * t)) if abs(t) < 1.0 else 0.0
    norm = 2.0 * quad(f, 0.0, 1.0, epsabs=1e-14, epsrel=1e-13, limit=200)[0]
    half = TABLE_INTERVALS // 2
    nodes = np.linspace(0.0, 1.0, half + 1)
    pieces = [quad(f, a, b, epsabs=1e-16, epsrel=1e-14)[0] for a, b in zip(nodes[:-1], nodes[1:])]
    right = 0.5 + np.concatenate([[0.0], np.cumsum(pieces)]) / norm
    right[-1] = 1.0
    # mirror so Psi(-t) = 1 - Psi(t) holds exactly on the nodes
    t = np.concatenate([-nodes[:0:-1], nodes])
    vals = np.concatenate([1.0 - right[:0:-1], right])
    # Hermite data with exact slopes psi(t_i); monotone at this resolution
    return norm, CubicHermiteSpline(t, vals, _bump_raw(t) / norm)


def bump(t):
    """Normalised bump psi(t), supported on [-1, 1], integrating to 1."""
    norm, _ = _bump_table()
    return _bump_raw(t) / norm


def bump_d1(t):
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    inside = np.abs(t) < 1.0
    ti = t[inside]
    out[inside] = -2.0 * ti / (1.0 - ti * ti) ** 2
    return out * bump(t)


def bump_cdf(t):
    """Psi(t) = integral of the bump up to t, clamped to exactly 0 and 1 off [-1, 1]."""
    _, table = _bump_table()
    t = np.asarray(t, dtype=float)
    inner = np.clip(t, -1.0, 1.0)
    v = table(inner)
    return np.where(t <= -1.0, 0.0, np.where(t >= 1.0, 1.0, np.clip(v, 0.0, 1.0)))


def bump_sup() -> float:
    """||psi||_inf = psi(0)."""
    return float(bump(0.0))


@dataclass(frozen=True)
class CutoffScheme:
    xi: float
    n: int

    def __post_init__(self):
        if self.xi < 0 or self.n < 1:
            raise ValueError("need xi >= 0 and n >= 1")

    @property
    def plateau(self) -> float:
        return float(self.n) ** self.xi

    @property
    def eps(self) -> float:
        return self.plateau / 2.0

    @property
    def radius(self) -> float:
        return self.plateau + self.eps

    def phi(self, x):
        x = np.asarray(x, dtype=float)
        e, r = self.eps, self.radius
        a = np.abs(x)  # evaluate on |x| so phi is exactly even
        out = bump_cdf((a + r) / e) - bump_cdf((a - r) / e)
        return out if out.ndim else float(out)

    def derivative(self, x, order: int):
        x = np.asarray(x, dtype=float)
        e, r = self.eps, self.radius
        a = np.abs(x)
        if order == 1:
            out = np.sign(x) * (bump((a + r) / e) - bump((a - r) / e)) / e
        elif order == 2:
            out = (bump_d1((a + r) / e) - bump_d1((a - r) / e)) / e ** 2
        else:
            raise ValueError("order must be 1 or 2")
        return out if out.ndim else float(out) + 0.0

    def __call__(self, x):
        return self.phi(x)


def build_cutoff(xi: float, n: int) -> CutoffScheme:
    return CutoffScheme(float(xi), int(n))


def cutoff_derivative(s: CutoffScheme, x, order: int):
    return s.derivative(x, order)


@dataclass(frozen=True)
class TruncatedModel:
    """b_n = phi_n b and sigma_n = phi_n sigma; f is left untouched."""

    base: SdeModel
    scheme: CutoffScheme

    def _parts(self, e: ex.Expr, x, order: int):
        x = np.asarray(x, dtype=float)
        s = self.scheme
        pt = float(x) if x.ndim == 0 else x  # scalars take the same path as ex.evaluate(e, float)
        with np.errstate(over="ignore", invalid="ignore"):
            g = [ex.evaluate(ex.diff(e, k), pt) for k in range(order + 1)]
            p0 = s.phi(x)
            if order == 0:
                return p0 * g[0]
            p1 = s.derivative(x, 1)
            if order == 1:
                return p1 * g[0] + p0 * g[1]
            p2 = s.derivative(x, 2)
            return p2 * g[0] + 2.0 * p1 * g[1] + p0 * g[2]

    def b_n(self, x, order: int = 0):
        return self._parts(self.base.b, x, order)

    def sigma_n(self, x, order: int = 0):
        return self._parts(self.base.sigma, x, order)

    def coefficients(self) -> Coefficients:
        m, s = self.base, self.scheme
        b = [ex.compile_expr(ex.diff(m.b, k)) for k in range(3)]
        sg = [ex.compile_expr(ex.diff(m.sigma, k)) for k in range(3)]
        f = [ex.compile_expr(ex.diff(m.f, k)) for k in range(3)]

        def prod(g, order):
            def fn(x):
                p0 = s.phi(x)
                if order == 0:
                    return p0 * g[0](x)
                p1 = s.derivative(x, 1)
                if order == 1:
                    return p1 * g[0](x) + p0 * g[1](x)
                return s.derivative(x, 2) * g[0](x) + 2.0 * p1 * g[1](x) + p0 * g[2](x)
            return fn

        bn = [prod(b, k) for k in range(3)]
        sn = [prod(sg, k) for k in range(3)]
        return Coefficients(
            drift=lambda x: bn[0](x) + f[0](x),
            drift_d1=lambda x: bn[1](x) + f[1](x),
            drift_d2=lambda x: bn[2](x) + f[2](x),
            diffusion=sn[0], diffusion_d1=sn[1], diffusion_d2=sn[2],
            raw_diffusion_d1=sg[1],
            plateau=s.plateau, label=str(s.n), default_scheme="explicit-euler",
        )


def truncate(m: SdeModel, s: CutoffScheme, check: bool = True) -> TruncatedModel:
    """Truncate ``m`` with cutoff ``s``; optionally require s.xi >= the model's growth exponent."""
    if check:
        try:
            xi = check_growth(m, j_max=5).xi
        except GrowthError:
            xi = None
        if xi is not None and s.xi < xi:
            raise ValueError(f"cutoff exponent {s.xi} below growth exponent {xi}")
    return TruncatedModel(m, s)


QUANTITIES = ("sup_abs_phi_d1", "sup_abs_b_phi_d1", "sup_abs_sigma_phi_d1", "sup_b_n_d1",
              "sup_sigma_n_d1_sq_excess")


def cutoff_sups(t: TruncatedModel, R: Optional[float] = None, grid_points: int = 40001) -> dict:
    """Grid sups of the quantities whose n-uniform bounds the moment estimates use."""
    P = t.scheme.plateau
    if R is None:
        R = 2.2 * P
    if R < 2 * P:
        raise ValueError("sweep radius must cover the cutoff support")
    xs = np.linspace(-R, R, grid_points)
    m = t.base
    with np.errstate(over="ignore", invalid="ignore"):
        d1 = t.scheme.derivative(xs, 1)
        b, s = ex.evaluate(m.b, xs), ex.evaluate(m.sigma, xs)
        s1 = ex.evaluate(ex.diff(m.sigma, 1), xs)
        out = {
            "sup_abs_phi_d1": np.max(np.abs(d1)),
            "sup_abs_b_phi_d1": np.max(np.abs(b * d1)),
            "sup_abs_sigma_phi_d1": np.max(np.abs(s * d1)),
            "sup_b_n_d1": np.max(t.b_n(xs, 1)),
            "sup_sigma_n_d1_sq_excess": np.max(t.sigma_n(xs, 1) ** 2 - 2.0 * s1 ** 2),
        }
    return {k: float(v) for k, v in out.items()}


@dataclass
class CutoffBoundReport:
    xi: float
    levels: list[int]
    sups: dict  # quantity -> list over levels
    passed: dict  # quantity -> bool

    @property
    def all_passed(self) -> bool:
        return all(self.passed.values())

    def to_dict(self) -> dict:
        return {"xi": self.xi, "levels": self.levels, "sups": self.sups, "pass": self.passed}


def verify_cutoff_bounds(m: SdeModel, xi: float, levels: Sequence[int] = tuple(range(1, 9)),
                         rtol: float = 0.05) -> CutoffBoundReport:
    """Sweep the truncation levels; a quantity passes when its sup does not grow with n.

    Each grid is scaled with the plateau so the transition band is resolved
    equally at every level.
    """
    levels = list(levels)
    rows = [cutoff_sups(TruncatedModel(m, CutoffScheme(xi, n))) for n in levels]
    sups = {q: [r[q] for r in rows] for q in QUANTITIES}
    passed = {}
    for q, vals in sups.items():
        if not all(math.isfinite(v) for v in vals):
            passed[q] = False
            continue
        head = max(vals[: max(1, len(vals) // 2)])
        tail = max(vals[len(vals) // 2:])
        passed[q] = tail <= head + rtol * abs(head) + 1e-9
    return CutoffBoundReport(xi, levels, sups, passed)
