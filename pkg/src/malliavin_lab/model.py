"""SDE definition and checkers for the standing assumptions.

The model is ``dX = [b(X) + f(X)] dt + sigma(X) dW`` on ``[0, T]``.  The
checkers verify, on a finite window ``[-R, R]``, the growth, monotonicity
and coercivity conditions the moment bounds rely on, and the scalar
Hörmander condition at the initial point.  Whenever the relevant function
is a polynomial the global answer is decided from its leading term and
its extrema are computed from the critical points; otherwise a dense grid
plus an R-doubling stability test is used.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from numpy.polynomial import polynomial as P
from scipy.optimize import minimize_scalar

from . import expr as ex
from .expr import Expr

HORMANDER_TOL = 1e-12
BETA_LADDER = (0.0,) + tuple(float(2 ** k) for k in range(11))
STABILITY_RTOL = 0.01


class GrowthError(ex.ExprError):
    """Non-polynomial coefficient without a declared growth exponent."""


@dataclass(frozen=True)
class SdeModel:
    b: Expr
    f: Expr
    sigma: Expr
    x0: float
    T: float
    growth_exponents: Optional[tuple[tuple[int, float], ...]] = None

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("time horizon T must be positive")
        if not math.isfinite(self.x0):
            raise ValueError("x0 must be finite")

    @classmethod
    def from_text(cls, b: str, sigma: str, f: str = "0", x0: float = 0.0, T: float = 1.0,
                  growth_exponents: Optional[dict] = None) -> "SdeModel":
        ge = None
        if growth_exponents:
            ge = tuple(sorted((int(j), float(q)) for j, q in growth_exponents.items()))
        return cls(ex.parse(b), ex.parse(f), ex.parse(sigma), float(x0), float(T), ge)

    @property
    def drift(self) -> Expr:
        """B = b + f, the drift actually integrated."""
        return ex.add(self.b, self.f)

    def declared_exponent(self, j: int) -> Optional[float]:
        if not self.growth_exponents:
            return None
        return dict(self.growth_exponents).get(j)

    def to_dict(self) -> dict:
        d = {"b": ex.to_text(self.b), "f": ex.to_text(self.f), "sigma": ex.to_text(self.sigma),
             "x0": self.x0, "T": self.T}
        if self.growth_exponents:
            d["growth_exponents"] = {str(j): q for j, q in self.growth_exponents}
        return d


# ---------------------------------------------------------------------------
# suprema on an interval


def _poly_sup(c: np.ndarray, R: float) -> tuple[float, float]:
    """Exact max of a polynomial on [-R, R] from its critical points."""
    cands = [-R, R]
    if len(c) > 2:
        roots = P.polyroots(P.polyder(c))
        scale = max(1.0, float(np.max(np.abs(roots)))) if roots.size else 1.0
        for z in roots:
            if abs(z.imag) <= 1e-7 * scale and -R <= z.real <= R:
                r = z.real
                d1, d2 = P.polyder(c), P.polyder(c, 2)
                for _ in range(3):
                    h = P.polyval(r, d2)
                    if h == 0.0:
                        break
                    step = P.polyval(r, d1) / h
                    if not math.isfinite(step) or abs(step) > 1e-3 * scale:
                        break
                    r = min(R, max(-R, r - step))
                cands.append(r)
    vals = [float(P.polyval(a, c)) for a in cands]
    k = int(np.argmax(vals))
    return vals[k], float(cands[k])


def _grid_sup(fn: Callable, R: float, grid_points: int) -> tuple[float, float]:
    xs = np.linspace(-R, R, grid_points)
    vals = np.asarray(fn(xs), dtype=float)
    if not np.all(np.isfinite(vals)):
        return math.inf, float(xs[np.argmax(np.where(np.isfinite(vals), -np.inf, 1.0))])
    best_i = int(np.argmax(vals))
    best, arg = float(vals[best_i]), float(xs[best_i])
    interior = np.flatnonzero((vals[1:-1] >= vals[:-2]) & (vals[1:-1] >= vals[2:])) + 1
    # refine the few highest local maxima
    for i in interior[np.argsort(vals[interior])[::-1][:8]]:
        res = minimize_scalar(lambda a: -float(fn(a)), bounds=(xs[i - 1], xs[i + 1]),
                              method="bounded", options={"xatol": 1e-12})
        if -res.fun > best:
            best, arg = float(-res.fun), float(res.x)
    return best, arg


def sup_on_interval(e: Expr, R: float, grid_points: int = 4001) -> tuple[float, float]:
    """(max, argmax) of ``e`` over [-R, R]."""
    c = ex.poly_coeffs(e)
    if c is not None:
        return _poly_sup(c, R)
    return _grid_sup(lambda a: ex.evaluate(e, a), R, grid_points)


def poly_bounded_above(e: Expr) -> Optional[bool]:
    """Whether a polynomial is bounded above on the real line; None if not a polynomial."""
    c = ex.poly_coeffs(e)
    if c is None:
        return None
    d = len(c) - 1
    return d == 0 or (d % 2 == 0 and c[-1] < 0)


def _stable(v1: float, v2: float, rtol: float = STABILITY_RTOL) -> bool:
    return math.isfinite(v1) and math.isfinite(v2) and abs(v2 - v1) <= rtol * abs(v1) + 1e-9


# ---------------------------------------------------------------------------
# checkers


@dataclass
class MonotoneResult:
    K_best: float
    K_doubled: float
    passed: bool
    method: str

    @property
    def strictly_monotone(self) -> bool:
        return self.K_best > 0


def check_monotone(m: SdeModel, R: float = 10.0, grid_points: int = 2001) -> MonotoneResult:
    """Best constant K with (b(y)-b(x))(y-x) <= -K (y-x)^2 on [-R, R].

    K is taken as ``-max b'``.  Any finite, stable K passes; a nonpositive
    K only means the drift is semi-monotone rather than dissipative.
    """
    if R <= 0 or grid_points < 3:
        raise ValueError("need R > 0 and grid_points >= 3")
    db = ex.diff(m.b, 1)
    K1 = 0.0 - sup_on_interval(db, R, grid_points)[0]
    K2 = 0.0 - sup_on_interval(db, 2 * R, 2 * grid_points - 1)[0]
    bounded = poly_bounded_above(db)
    if bounded is not None:
        return MonotoneResult(K1, K2, bool(bounded) and math.isfinite(K1), "polynomial")
    return MonotoneResult(K1, K2, _stable(K1, K2), "grid")


def bound_function(m: SdeModel, p: int) -> Expr:
    """g(a) = a b(a) + (12p-1) sigma(a)^2 + (4p-1) (a sigma'(a))^2."""
    s1 = ex.diff(m.sigma, 1)
    return ex.add(
        ex.add(ex.mul(ex.X, m.b), ex.mul(ex.Const(12.0 * p - 1), ex.power(m.sigma, 2))),
        ex.mul(ex.Const(4.0 * p - 1), ex.power(ex.mul(ex.X, s1), 2)),
    )


@dataclass
class BoundResult:
    p: int
    alpha: float
    beta: float
    passed: bool
    negative_beta_admissible: bool
    method: str

    def to_dict(self) -> dict:
        return {"p": self.p, "alpha": _json_num(self.alpha), "beta": _json_num(self.beta),
                "pass": self.passed, "beta_minus_one_admissible": self.negative_beta_admissible,
                "method": self.method}


def check_bound(m: SdeModel, p: int, R: float = 10.0, grid_points: int = 4001) -> BoundResult:
    """Find (alpha_p, beta_p) with g(a) <= alpha_p + beta_p a^2.

    beta_p is the first admissible entry of the ladder 0, 1, 2, 4, ..., 1024;
    alpha_p is then the max of g(a) - beta_p a^2 on [-R, R].
    """
    if p < 1 or R <= 0:
        raise ValueError("need p >= 1 and R > 0")
    g = bound_function(m, p)

    def shifted(beta: float) -> Expr:
        return ex.sub(g, ex.mul(ex.Const(beta), ex.power(ex.X, 2)))

    def admissible(beta: float) -> tuple[bool, float, str]:
        h = shifted(beta)
        a1 = sup_on_interval(h, R, grid_points)[0]
        bounded = poly_bounded_above(h)
        if bounded is not None:
            return bool(bounded), a1, "polynomial"
        a2 = sup_on_interval(h, 2 * R, 2 * grid_points - 1)[0]
        return _stable(a1, a2), a1, "grid"

    neg_ok = admissible(-1.0)[0]
    method = "grid"
    for beta in BETA_LADDER:
        ok, alpha, method = admissible(beta)
        if ok:
            return BoundResult(p, alpha, beta, True, neg_ok, method)
    return BoundResult(p, math.inf, math.nan, False, neg_ok, method)


@dataclass
class GrowthRow:
    j: int
    lam: float
    q: float
    declared: bool = False

    def to_dict(self) -> dict:
        return {"j": self.j, "lambda": _json_num(self.lam), "q": self.q, "declared": self.declared}


@dataclass
class GrowthTable:
    rows: list[GrowthRow]
    xi: float


def check_growth(m: SdeModel, j_max: int = 5, R: float = 10.0, grid_points: int = 4001) -> GrowthTable:
    """Polynomial growth constants: |b^(j)| + |sigma^(j)| <= lambda_j (1 + |x|^q_j)."""
    if j_max < 0:
        raise ValueError("j_max must be nonnegative")
    xs = np.linspace(-R, R, grid_points)
    rows = []
    for j in range(j_max + 1):
        bj, sj = ex.diff(m.b, j), ex.diff(m.sigma, j)
        cb, cs = ex.poly_coeffs(bj), ex.poly_coeffs(sj)
        declared = m.declared_exponent(j)
        if declared is not None:
            q, is_declared = float(declared), True
        elif cb is not None and cs is not None:
            q, is_declared = float(max(len(cb), len(cs)) - 1), False
        else:
            raise GrowthError(f"non-polynomial coefficient needs a declared growth exponent q_{j}")
        num = np.abs(ex.evaluate(bj, xs)) + np.abs(ex.evaluate(sj, xs))
        lam = float(np.max(num / (1.0 + np.abs(xs) ** q)))
        if cb is not None and cs is not None and q >= 1:
            # the ratio tends to the sum of leading coefficients of degree q
            tail = sum(abs(c[-1]) for c in (cb, cs) if len(c) - 1 == q)
            lam = max(lam, float(tail))
        rows.append(GrowthRow(j, lam, q, is_declared))
    xi = max((r.q for r in rows if r.j >= 1), default=0.0)
    return GrowthTable(rows, xi)


@dataclass
class HormanderResult:
    passed: bool
    witness: Union[str, int, None]
    values: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"pass": self.passed, "witness": self.witness, "values": self.values}


def hormander_check(m: SdeModel, n_max: int = 10, tol: float = HORMANDER_TOL) -> HormanderResult:
    """Scalar Hörmander test at x0: sigma(x0) != 0, or sigma^(n)(x0) B(x0) != 0 for some n."""
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    s0 = float(ex.evaluate(m.sigma, m.x0))
    if abs(s0) > tol:
        return HormanderResult(True, "A(x0)≠0", [s0])
    B0 = float(ex.evaluate(m.drift, m.x0))
    values = [s0]
    for n in range(1, n_max + 1):
        v = float(ex.evaluate(ex.diff(m.sigma, n), m.x0)) * B0 + 0.0
        values.append(v)
        if abs(v) > tol:
            return HormanderResult(True, n, values)
    return HormanderResult(False, None, values)


def lipschitz_f(m: SdeModel, R: float = 10.0, grid_points: int = 4001) -> tuple[float, bool]:
    """(k1, pass): sup |f'| on [-R, R] and whether it is globally bounded."""
    df = ex.diff(m.f, 1)
    k1 = max(sup_on_interval(df, R, grid_points)[0], sup_on_interval(ex.neg(df), R, grid_points)[0])
    c = ex.poly_coeffs(df)
    if c is not None:
        return k1, len(c) == 1
    k2 = max(sup_on_interval(df, 2 * R, 2 * grid_points - 1)[0],
             sup_on_interval(ex.neg(df), 2 * R, 2 * grid_points - 1)[0])
    return k1, _stable(k1, k2)


@dataclass
class HypothesisReport:
    K_best: float
    k1: float
    bounds: list[BoundResult]
    growth: list[GrowthRow]
    xi: float
    R: float
    grid_points: int
    monotone_pass: bool
    bound_pass: bool
    growth_pass: bool
    f_pass: bool
    K_doubled: float = math.nan
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.monotone_pass and self.bound_pass and self.growth_pass and self.f_pass

    def bound_for(self, p: int) -> BoundResult:
        for b in self.bounds:
            if b.p == p:
                return b
        raise KeyError(p)

    def to_dict(self) -> dict:
        return {
            "K_best": _json_num(self.K_best),
            "k1": _json_num(self.k1),
            "bounds": [b.to_dict() for b in self.bounds],
            "growth": [g.to_dict() for g in self.growth],
            "xi": self.xi,
            "pass": self.passed,
            "flags": {"monotone": self.monotone_pass, "bound": self.bound_pass,
                      "growth": self.growth_pass, "f_lipschitz": self.f_pass,
                      "semi_monotone_only": bool(self.K_best <= 0)},
            "grid": {"R": self.R, "points": self.grid_points},
            "failures": list(self.failures),
        }


def check_hypotheses(m: SdeModel, p_list: Sequence[int] = (1, 2), R: float = 10.0,
                     grid_points: int = 2001, j_max: int = 5) -> HypothesisReport:
    mono = check_monotone(m, R, grid_points)
    bounds = [check_bound(m, p, R, grid_points) for p in p_list]
    failures = []
    try:
        table = check_growth(m, j_max, R, grid_points)
        growth, xi, growth_ok = table.rows, table.xi, True
    except GrowthError as err:
        growth, xi, growth_ok = [], math.nan, False
        failures.append(f"growth: {err}")
    k1, f_ok = lipschitz_f(m, R, grid_points)
    if not mono.passed:
        failures.append(f"monotone: K_best unstable ({mono.K_best} -> {mono.K_doubled})")
    for b in bounds:
        if not b.passed:
            failures.append(f"bound: no admissible beta for p={b.p}")
    if not f_ok:
        failures.append("f: derivative not bounded")
    return HypothesisReport(
        K_best=mono.K_best, k1=k1, bounds=bounds, growth=growth, xi=xi, R=R,
        grid_points=grid_points, monotone_pass=mono.passed,
        bound_pass=all(b.passed for b in bounds), growth_pass=growth_ok, f_pass=f_ok,
        K_doubled=mono.K_doubled, failures=failures,
    )


def gronwall_envelope(x0: float, alpha: float, beta: float, k1: float, f0: float, T: float) -> float:
    """Second-moment envelope (|x0|^2 + a'/b') exp(3 b' T) - a'/b' with p = 1.

    Here a' = 2(alpha + f(0)^2) and b' = 2 beta + 2 k1^2 + 1.
    """
    a_p = 2.0 * (alpha + f0 ** 2)
    b_p = 2.0 * beta + 2.0 * k1 ** 2 + 1.0
    if b_p == 0:
        return x0 ** 2 + 3.0 * a_p * T
    return (x0 ** 2 + a_p / b_p) * math.exp(3.0 * b_p * T) - a_p / b_p


def _json_num(v: float):
    return v if math.isfinite(v) else None


@dataclass(frozen=True)
class Coefficients:
    """Vectorised drift/diffusion and their first two derivatives.

    This is what the simulator integrates; raw models and truncated models
    both produce one.  ``plateau`` is the radius on which the coefficients
    coincide with the raw ones (infinite for the raw model).
    """

    drift: Callable
    drift_d1: Callable
    drift_d2: Callable
    diffusion: Callable
    diffusion_d1: Callable
    diffusion_d2: Callable
    raw_diffusion_d1: Callable
    plateau: float
    label: str
    default_scheme: str


def raw_coefficients(m: SdeModel) -> Coefficients:
    B, S = m.drift, m.sigma

    def fn(e: Expr) -> Callable:
        return ex.compile_expr(e)

    return Coefficients(
        drift=fn(B), drift_d1=fn(ex.diff(B, 1)), drift_d2=fn(ex.diff(B, 2)),
        diffusion=fn(S), diffusion_d1=fn(ex.diff(S, 1)), diffusion_d2=fn(ex.diff(S, 2)),
        raw_diffusion_d1=fn(ex.diff(S, 1)),
        plateau=math.inf, label="raw", default_scheme="tamed-euler",
    )
