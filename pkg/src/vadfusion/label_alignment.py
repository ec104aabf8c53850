"""Beta-CDF quantile mapping between label scales.

Labels from different corpora live on different native scales and follow
different distributions. Each corpus gets a fitted Beta distribution over its
min-max-normalized labels; a source value is mapped to its source quantile and
then through the target inverse CDF, so aligned labels share the target
distribution. Everything here is per-dimension and purely functional.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

ALPHA_MIN, ALPHA_MAX = 0.05, 500.0

# endpoint nudge (normalized scale) applied before CDF evaluation so that
# infinite-density endpoints of Beta(a<1, .) never get evaluated exactly
_EDGE_NUDGE = 1e-6

_CF_EPS = 1e-15
_CF_FPMIN = 1e-300
_CF_MAX_ITER = 500


class BetaFitError(ValueError):
    """Raised when label values cannot support a method-of-moments Beta fit."""


@dataclass(frozen=True)
class BetaParams:
    """Beta shape parameters plus the native-scale bounds they were fitted on."""

    alpha: float
    beta: float
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError(f"alpha and beta must be positive, got {self.alpha}, {self.beta}")
        if not self.hi > self.lo:
            raise ValueError(f"hi must exceed lo, got lo={self.lo}, hi={self.hi}")

    def normalize(self, v: float) -> float:
        return (v - self.lo) / (self.hi - self.lo)

    def denormalize(self, x: float) -> float:
        return self.lo + x * (self.hi - self.lo)


def fit_beta(values, lo: float, hi: float) -> BetaParams:
    """Method-of-moments Beta fit on min-max-normalized values.

    alpha = m*(m*(1-m)/v - 1), beta = (1-m)*(m*(1-m)/v - 1) with population
    variance v; both clamped to [0.05, 500].
    """
    values = [float(v) for v in values]
    if len(set(values)) < 2:
        raise BetaFitError("need at least 2 distinct values to fit")
    if not hi > lo:
        raise ValueError(f"hi must exceed lo, got lo={lo}, hi={hi}")
    for v in values:
        if not (lo <= v <= hi):
            raise ValueError(f"value {v} outside [{lo}, {hi}]")

    xs = [(v - lo) / (hi - lo) for v in values]
    n = len(xs)
    m = sum(xs) / n
    var = sum((x - m) ** 2 for x in xs) / n
    if var <= 0.0:
        raise BetaFitError("zero variance: all values equal after normalization")
    if var >= m * (1.0 - m):
        raise BetaFitError(
            f"variance {var:.6g} >= m(1-m) = {m * (1 - m):.6g}: "
            "moments incompatible with a Beta distribution"
        )
    common = m * (1.0 - m) / var - 1.0
    alpha = min(max(m * common, ALPHA_MIN), ALPHA_MAX)
    beta = min(max((1.0 - m) * common, ALPHA_MIN), ALPHA_MAX)
    return BetaParams(alpha=alpha, beta=beta, lo=lo, hi=hi)


def _beta_contfrac(a: float, b: float, x: float) -> float:
    """Continued fraction for the regularized incomplete beta (modified Lentz)."""
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _CF_FPMIN:
        d = _CF_FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_FPMIN:
            d = _CF_FPMIN
        c = 1.0 + aa / c
        if abs(c) < _CF_FPMIN:
            c = _CF_FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_FPMIN:
            d = _CF_FPMIN
        c = 1.0 + aa / c
        if abs(c) < _CF_FPMIN:
            c = _CF_FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def beta_cdf(x: float, p: BetaParams) -> float:
    """Regularized incomplete beta I_x(alpha, beta) on the normalized scale."""
    if not (0.0 <= x <= 1.0):
        raise ValueError(f"x must be in [0, 1], got {x}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    a, b = p.alpha, p.beta
    ln_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    # symmetry switch keeps the continued fraction in its fast-converging region
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_contfrac(a, b, x) / a
    return 1.0 - front * _beta_contfrac(b, a, 1.0 - x) / b


def _beta_pdf(x: float, p: BetaParams) -> float:
    if x <= 0.0 or x >= 1.0:
        return 0.0
    a, b = p.alpha, p.beta
    ln_pdf = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + (a - 1.0) * math.log(x) + (b - 1.0) * math.log1p(-x)
    )
    return math.exp(ln_pdf) if ln_pdf < 700.0 else math.inf


def beta_icdf(u: float, p: BetaParams) -> float:
    """Inverse beta CDF by bracketed Newton iteration with bisection fallback."""
    if not (0.0 <= u <= 1.0):
        raise ValueError(f"u must be in [0, 1], got {u}")
    if u == 0.0:
        return 0.0
    if u == 1.0:
        return 1.0
    lo, hi = 0.0, 1.0
    x = p.alpha / (p.alpha + p.beta)  # start at the mean
    for _ in range(200):
        f = beta_cdf(x, p) - u
        if f > 0.0:
            hi = x
        else:
            lo = x
        if hi - lo < 1e-14:
            break
        dens = _beta_pdf(x, p)
        if dens > 0.0 and math.isfinite(dens):
            step = f / dens
            x_new = x - step
        else:
            x_new = math.nan
        if not (lo < x_new < hi):
            x_new = 0.5 * (lo + hi)
        if abs(x_new - x) < 1e-15 and abs(f) < 1e-12:
            x = x_new
            break
        x = x_new
    return min(max(x, 0.0), 1.0)


def _nudged(x: float) -> float:
    if x == 0.0:
        return _EDGE_NUDGE
    if x == 1.0:
        return 1.0 - _EDGE_NUDGE
    return x


def align_label(v: float, src: BetaParams, tgt: BetaParams) -> float:
    """Map a native source-scale label onto the target scale via quantiles."""
    if not (src.lo <= v <= src.hi):
        raise ValueError(f"label {v} outside source range [{src.lo}, {src.hi}]")
    # exact endpoints map exactly (quantiles 0 and 1); no CDF evaluation needed
    if v == src.lo:
        return tgt.lo
    if v == src.hi:
        return tgt.hi
    u = beta_cdf(_nudged(src.normalize(v)), src)
    return tgt.denormalize(beta_icdf(u, tgt))


def invert_label(v_aligned: float, src: BetaParams, tgt: BetaParams) -> float:
    """Inverse of align_label: target-scale value back to the source scale."""
    if not (tgt.lo <= v_aligned <= tgt.hi):
        raise ValueError(f"aligned label {v_aligned} outside target range [{tgt.lo}, {tgt.hi}]")
    if v_aligned == tgt.lo:
        return src.lo
    if v_aligned == tgt.hi:
        return src.hi
    u = beta_cdf(_nudged(tgt.normalize(v_aligned)), tgt)
    return src.denormalize(beta_icdf(u, src))


DIMS = ("v", "a", "d")


def read_params_file(path) -> dict[str, BetaParams]:
    """Read per-dimension Beta params from `<dim>.<field>=<float>` lines."""
    raw: dict[str, dict[str, float]] = {d: {} for d in DIMS}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, val = line.partition("=")
            key = key.strip().lower()
            try:
                dim, field = key.split(".")
                raw[dim][field] = float(val)
            except (ValueError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: bad entry {line!r}") from exc
    out = {}
    for dim in DIMS:
        fields = raw[dim]
        missing = {"alpha", "beta", "lo", "hi"} - set(fields)
        if missing:
            raise ValueError(f"{path}: dimension {dim!r} missing fields {sorted(missing)}")
        out[dim] = BetaParams(fields["alpha"], fields["beta"], fields["lo"], fields["hi"])
    return out


def write_params_file(path, params: dict[str, BetaParams]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for dim in DIMS:
            p = params[dim]
            for field in ("alpha", "beta", "lo", "hi"):
                fh.write(f"{dim}.{field}={getattr(p, field)!r}\n")


def identity_params() -> dict[str, BetaParams]:
    """Uniform Beta(1,1) on [0,1] for every dimension: align == identity."""
    return {d: BetaParams(1.0, 1.0, 0.0, 1.0) for d in DIMS}
