"""One-way ANOVA and Tukey HSD on per-run reward samples.

The studentized range distribution is evaluated by piecewise
Gauss-Legendre quadrature of its usual double-integral form. For ``df > 10_000`` the outer integral over
the variance estimate is dropped (the infinite-df range distribution); the
difference is below 1e-4 in probability at df = 10,000 and shrinks as 1/df.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Mapping, Sequence

import numpy as np
from scipy import optimize, special

ASYMPTOTIC_DF = 10_000
_Z_LIM = 8.5  # normal density below 1e-15 beyond this


class DegenerateInput(ValueError):
    pass


@dataclass(frozen=True)
class AnovaResult:
    f_stat: float
    df_between: int
    df_within: int
    p_value: float


@dataclass(frozen=True)
class TukeyPair:
    group_a: str
    group_b: str
    mean_diff: float  # mean(b) - mean(a)
    p_adj: float
    lower: float
    upper: float
    reject: bool


@dataclass
class TukeyResult:
    pairs: list[TukeyPair]
    alpha: float
    q_crit: float
    df_within: int
    msw: float
    means: dict[str, float] = field(default_factory=dict)

    def pair(self, a: str, b: str) -> TukeyPair:
        for p in self.pairs:
            if {p.group_a, p.group_b} == {a, b}:
                return p
        raise KeyError((a, b))


def _named(groups) -> tuple[list[str], list[np.ndarray]]:
    if isinstance(groups, Mapping):
        names, data = list(groups), list(groups.values())
    else:
        data = list(groups)
        names = [f"group{i + 1}" for i in range(len(data))]
    return names, [np.asarray(g, dtype=float) for g in data]


def _check(data: Sequence[np.ndarray]) -> None:
    if len(data) < 2:
        raise DegenerateInput("need at least two groups")
    if any(g.size < 2 for g in data):
        raise DegenerateInput("every group needs at least two observations")


def _within(data: Sequence[np.ndarray]) -> tuple[float, int]:
    ssw = math.fsum(float(((g - g.mean()) ** 2).sum()) for g in data)
    if ssw == 0.0:
        raise DegenerateInput("no within-group variance in any group")
    return ssw, sum(g.size for g in data) - len(data)


def f_sf(f: float, d1: float, d2: float) -> float:
    """Upper tail of the F distribution via the regularized incomplete beta."""
    if f <= 0:
        return 1.0
    return float(special.betainc(d2 / 2, d1 / 2, d2 / (d2 + d1 * f)))


def one_way_anova(groups) -> AnovaResult:
    _, data = _named(groups)
    _check(data)
    ssw, df_w = _within(data)
    grand = np.concatenate(data).mean()
    ssb = math.fsum(g.size * (g.mean() - grand) ** 2 for g in data)
    df_b = len(data) - 1
    f = (ssb / df_b) / (ssw / df_w)
    return AnovaResult(float(f), df_b, df_w, f_sf(f, df_b, df_w))


_GL_X, _GL_W = np.polynomial.legendre.leggauss(64)


def _gauss_legendre(a, b):
    """Nodes and weights mapping the fixed rule onto ``[a, b]`` (broadcast over ``a``)."""
    a = np.asarray(a, dtype=float)[..., None]
    b = np.asarray(b, dtype=float)[..., None]
    h = (b - a) / 2
    return a + h * (_GL_X + 1), h * _GL_W


def _range_sf_inf(w, k: int) -> np.ndarray:
    """P(range of k iid standard normals > w), vectorised over ``w``."""
    w = np.atleast_1d(np.asarray(w, dtype=float))
    zero = np.zeros_like(w)
    total = np.zeros_like(w)
    # piecewise rule; the integrand has kinks in curvature near 0 and w
    for a, b in ((zero - _Z_LIM, zero), (zero, w / 2), (w / 2, w), (w, w + _Z_LIM)):
        z, wt = _gauss_legendre(a, b)
        big = special.ndtr(z)
        inner = big - special.ndtr(z - w[:, None])
        f = k * np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi) * (big ** (k - 1) - inner ** (k - 1))
        total += (f * wt).sum(axis=-1)
    return np.where(w <= 0, 1.0, np.clip(total, 0.0, 1.0))


def studentized_range_sf(q: float, k: int, df: float) -> float:
    """P(Q > q) for the studentized range with ``k`` groups and ``df`` degrees of freedom."""
    if k < 2:
        raise ValueError("k must be >= 2")
    if df <= 0:
        raise ValueError("df must be positive")
    if q <= 0:
        return 1.0
    if math.isinf(df) or df > ASYMPTOTIC_DF:
        return float(_range_sf_inf(q, k)[0])
    # S = sqrt(chi2_df / df); integrate its density against the infinite-df tail
    lo = math.sqrt(special.chdtri(df, 1 - 1e-16) / df)
    hi = math.sqrt(special.chdtri(df, 1e-16) / df)
    total = 0.0
    for a, b in ((lo, 1.0), (1.0, hi)):
        s, wt = _gauss_legendre(a, b)
        log_dens = (0.5 * df * math.log(df) - special.gammaln(0.5 * df)
                    - (0.5 * df - 1) * math.log(2) + (df - 1) * np.log(s) - 0.5 * df * s * s)
        total += float((np.exp(log_dens) * _range_sf_inf(q * s, k) * wt).sum())
    return min(1.0, max(0.0, total))


def studentized_range_cdf(q: float, k: int, df: float) -> float:
    return 1.0 - studentized_range_sf(q, k, df)


def studentized_range_ppf(p: float, k: int, df: float) -> float:
    """Critical value ``q`` with ``P(Q <= q) = p``."""
    if not 0 < p < 1:
        raise ValueError("p must lie in (0, 1)")
    target = 1 - p
    f = lambda q: studentized_range_sf(q, k, df) - target
    hi = 10.0
    while f(hi) > 0:
        hi *= 2
    return optimize.brentq(f, 0.0, hi, xtol=1e-10, rtol=1e-12)


def tukey_hsd(groups, alpha: float = 0.05) -> TukeyResult:
    """All-pairs Tukey HSD (Tukey-Kramer for unequal group sizes)."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    names, data = _named(groups)
    _check(data)
    ssw, df_w = _within(data)
    msw = ssw / df_w
    k = len(data)
    q_crit = studentized_range_ppf(1 - alpha, k, df_w)
    pairs = []
    for i, j in combinations(range(k), 2):
        diff = float(data[j].mean() - data[i].mean())
        se = math.sqrt(msw / 2 * (1 / data[i].size + 1 / data[j].size))
        p = studentized_range_sf(abs(diff) / se, k, df_w)
        pairs.append(TukeyPair(names[i], names[j], diff, p, diff - q_crit * se,
                               diff + q_crit * se, p < alpha))
    return TukeyResult(pairs, alpha, q_crit, df_w, msw,
                       {n: float(g.mean()) for n, g in zip(names, data)})


def format_comparison(anova: AnovaResult, tukey: TukeyResult) -> str:
    from .evaluate import aligned_table

    lines = [f"One-way ANOVA: F({anova.df_between}, {anova.df_within}) = {anova.f_stat:.6g}, "
             f"p = {anova.p_value:.4g}", "",
             f"Tukey HSD (alpha = {tukey.alpha}, q_crit = {tukey.q_crit:.4f})",
             aligned_table(("group A", "group B", "mean diff", "p-adj", "lower", "upper", "reject"),
                           [(p.group_a, p.group_b, f"{p.mean_diff:.4f}", f"{p.p_adj:.4f}",
                             f"{p.lower:.4f}", f"{p.upper:.4f}", p.reject) for p in tukey.pairs])]
    return "\n".join(lines) + "\n"
