"""TeLU activation ``phi(t) = t * tanh(exp(t))`` with exact derivatives and property checks.

Write ``u = exp(t)``. Then

    phi'(t)  = tanh(u) + t u sech^2(u)
    phi''(t) = u sech^2(u) + (1 + t) u sech^2(u) - 2 t u^2 tanh(u) sech^2(u)

The first ``u sech^2(u)`` in ``phi''`` comes from differentiating ``tanh(u)``;
the second from the product rule on ``t u sech^2(u)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractViolationError, InvalidInputError

# tanh(exp(30)) == 1.0 in float64 and u*sech^2(u) underflows to 0 well before this.
SATURATION_T = 30.0

BRACKET = (-6.0, -1e-6)
BOUND_SLACK = 1e-12


def _finite(t):
    arr = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("TeLU input must be finite")
    return arr


def _pieces(t: np.ndarray):
    u = np.exp(np.minimum(t, SATURATION_T))
    tanh_u = np.tanh(u)
    q = np.exp(-2.0 * u)
    sech2 = 4.0 * q / (1.0 + q) ** 2
    saturated = t > SATURATION_T
    return u, np.where(saturated, 1.0, tanh_u), np.where(saturated, 0.0, sech2)


def _out(arr, like):
    return float(arr) if np.ndim(like) == 0 else arr


def telu(t):
    t = _finite(t)
    _, tanh_u, _ = _pieces(t)
    return _out(t * tanh_u, t)


def telu_d1(t):
    t = _finite(t)
    u, tanh_u, sech2 = _pieces(t)
    return _out(tanh_u + t * u * sech2, t)


def telu_d2(t):
    t = _finite(t)
    u, tanh_u, sech2 = _pieces(t)
    us = u * sech2
    return _out(us + (1.0 + t) * us - 2.0 * t * u * us * tanh_u, t)


def relu(t):
    return _out(np.maximum(0.0, np.asarray(t, dtype=np.float64)), t)


def relu_d1(t):
    # subgradient 0 at the kink
    return _out((np.asarray(t, dtype=np.float64) > 0).astype(np.float64), t)


ACTIVATIONS = {"telu": (telu, telu_d1), "relu": (relu, relu_d1)}


def find_critical_point(tol: float = 1e-10, bracket=BRACKET, max_iter: int = 200):
    """Bisect ``phi'`` for its unique zero on the negative axis.

    Returns ``(t0, (lo, hi))`` with ``hi - lo <= tol``. Raises
    :class:`ContractViolationError` if the bracket does not straddle a sign
    change or the sign pattern around ``t0`` is wrong.
    """
    if not tol > 0:
        raise InvalidInputError("tol must be > 0")
    lo, hi = map(float, bracket)
    f_lo, f_hi = telu_d1(lo), telu_d1(hi)
    if not (f_lo < 0 < f_hi):
        raise ContractViolationError(f"phi' has no sign change on [{lo}, {hi}]: {f_lo:.3e}, {f_hi:.3e}")
    for _ in range(max_iter):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        f_mid = telu_d1(mid)
        if f_mid < 0:
            lo = mid
        elif f_mid > 0:
            hi = mid
        else:
            lo = hi = mid
    t0 = 0.5 * (lo + hi)
    for k in (1, 2, 4):
        if not (telu_d1(t0 - 0.25 * k) < 0 < telu_d1(t0 + 0.25 * k)):
            raise ContractViolationError(f"phi' sign pattern broken around t0={t0}")
    return t0, (lo, hi)


def slope_bound_violations(grid) -> int:
    """Count points where ``-|t|e^t <= phi'(t) <= 1 + |t|e^t`` fails beyond slack."""
    t = _finite(grid).ravel()
    s = telu_d1(t)
    # clamp only to keep exp finite; bounds are astronomically loose there anyway
    m = np.abs(t) * np.exp(np.minimum(t, 700.0))
    return int(np.count_nonzero((s < -m - BOUND_SLACK) | (s > 1.0 + m + BOUND_SLACK)))


def magnitude_violations(grid) -> int:
    """Count points where ``|phi(t)| <= |t|`` fails."""
    t = _finite(grid).ravel()
    return int(np.count_nonzero(np.abs(telu(t)) > np.abs(t)))


def sign_changes(values) -> int:
    s = np.sign(np.asarray(values, dtype=np.float64))
    s = s[s != 0]
    return int(np.count_nonzero(s[1:] != s[:-1]))


@dataclass
class TeluAnalysis:
    t0: float
    t0_bracket: tuple[float, float]
    bound_violations: int
    magnitude_violations: int
    sign_changes_on_bracket: int
    increasing_right_of_t0: bool
    negative_side_gradient_nonzero: bool
    asymptotic_residuals: dict
    grid_spec: dict
    certified: bool = field(default=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["t0_bracket"] = list(self.t0_bracket)
        return d


def analyze(grid_lo: float = -30.0, grid_hi: float = 30.0, grid_n: int = 100_000, tol: float = 1e-10) -> TeluAnalysis:
    """Run every numerical TeLU property check and collect the results."""
    if not grid_lo < grid_hi:
        raise InvalidInputError("grid_lo must be < grid_hi")
    if int(grid_n) < 2:
        raise InvalidInputError("grid_n must be >= 2")
    grid = np.linspace(grid_lo, grid_hi, int(grid_n))
    t0, bracket = find_critical_point(tol)

    neg = np.linspace(BRACKET[0], 0.0, 60_001)
    right = np.linspace(t0 + 1e-3, 40.0, 100_001)
    active = np.linspace(t0 + 1e-3, 0.0, 10_001)
    left_tail = -np.arange(25.0, 101.0)
    right_tail = np.arange(40.0, 201.0)

    residuals = {
        "left_limit_residual": float(np.max(np.abs(telu(left_tail)))),
        "right_ratio_residual": float(np.max(np.abs(telu(right_tail) / right_tail - 1.0))),
        "right_slope_residual": float(np.max(np.abs(telu_d1(right_tail) - 1.0))),
    }
    report = TeluAnalysis(
        t0=float(t0),
        t0_bracket=(float(bracket[0]), float(bracket[1])),
        bound_violations=slope_bound_violations(grid),
        magnitude_violations=magnitude_violations(grid),
        sign_changes_on_bracket=sign_changes(telu_d1(neg)),
        increasing_right_of_t0=bool(np.all(np.diff(telu(right)) > 0)),
        negative_side_gradient_nonzero=bool(np.all(telu_d1(active) > 0)),
        asymptotic_residuals=residuals,
        grid_spec={"lo": float(grid_lo), "hi": float(grid_hi), "n": int(grid_n), "tol": float(tol)},
    )
    report.certified = (
        report.t0 < 0
        and report.t0_bracket[1] - report.t0_bracket[0] <= tol
        and report.bound_violations == 0
        and report.magnitude_violations == 0
        and report.sign_changes_on_bracket == 1
        and report.increasing_right_of_t0
        and report.negative_side_gradient_nonzero
        and residuals["left_limit_residual"] < 1e-6
        and residuals["right_ratio_residual"] < 1e-12
        and residuals["right_slope_residual"] < 1e-12
    )
    return report
