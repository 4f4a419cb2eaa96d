"""Runtime certification: replay a traced run against the certified bounds.

Every check states the observed value, the bound, the margin and the
tolerance it was judged with, so reports are machine-parseable and a CI job
can gate on the aggregate flag. Checks never mutate traces.

Tolerances are keyed by the precision the trace carries (file-persisted deep
traces are always float32 snapshots, in-memory traces keep the engine's
working precision):

    f64: 1e-8 absolute on reconstructions, 1e-9 relative on bounds
    f32: 1e-3 absolute on reconstructions, 1e-4 relative on bounds

Bound tolerances are taken relative to xi_internal, the natural scale of
every certified bound: several bounds cancel to ~0 at t close to T, where a
bound-proportional slack would amplify ordinary floating-point noise of the
O(1) states into spurious violations.

The projection premise |delta_t| <= rho is exact in memory (the engine clips
in delta space). Casting an exactly-at-the-boundary f64 delta to the f32 file
snapshot can round it one f32 ulp past rho, so file-replay premise checks
allow exactly that much.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import TrajectoryTrace
from .imagecore import ImageTensor, ValueRange
from .schedule import Schedule

TOLERANCES = {
    "f64": {"recon_abs": 1e-8, "bound_rel": 1e-9, "premise_slack": 0.0},
    "f32": {"recon_abs": 1e-3, "bound_rel": 1e-4,
            "premise_slack": float(np.finfo(np.float32).eps)},
}


class MissingTraceError(ValueError):
    """The requested check needs deep trace tensors that are not present."""


@dataclass
class CheckResult:
    name: str
    observed: float     # worst observed value
    bound: float        # the bound it was compared against
    tolerance: float
    passed: bool
    detail: str = ""

    @property
    def margin(self) -> float:
        return self.bound - self.observed

    def to_json(self) -> dict:
        return {"name": self.name, "observed": self.observed, "bound": self.bound,
                "margin": self.margin, "tolerance": self.tolerance,
                "passed": bool(self.passed), "detail": self.detail}


@dataclass
class VerificationReport:
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, check: CheckResult):
        self.checks.append(check)

    def extend(self, other: "VerificationReport"):
        self.checks.extend(other.checks)

    def to_json(self) -> dict:
        return {"passed": self.passed, "checks": [c.to_json() for c in self.checks]}


def _unit_data(img) -> np.ndarray:
    if isinstance(img, ImageTensor):
        if img.range_tag is ValueRange.BYTE:
            return np.asarray(img.data, dtype=np.float64) / 127.5 - 1.0
        return np.asarray(img.data, dtype=np.float64)
    return np.asarray(img, dtype=np.float64)


def _require_deep(trace: TrajectoryTrace, op: str):
    if not trace.is_deep:
        raise MissingTraceError(f"{op} needs a deep trace (delta/x0_pred tensors)")


def _tols(trace: TrajectoryTrace) -> dict:
    return TOLERANCES["f32" if trace.precision == "f32" else "f64"]


def check_theorem1(trace: TrajectoryTrace, x_ori, s: Schedule,
                   xi_internal: float) -> VerificationReport:
    """Premise |delta_t| <= rho at every step (exact, up to the documented
    f32-snapshot slack), plus the three conclusions: the noisy-state bound,
    the endpoint-prediction bound, and the final-output bound."""
    _require_deep(trace, "check_theorem1")
    tol = _tols(trace)
    x0_unit = _unit_data(x_ori)
    rep = VerificationReport()

    premise_per_step = np.abs(trace.delta).max(axis=(1, 2, 3))
    worst = int(premise_per_step.argmax())
    slack = trace.rho * tol["premise_slack"]
    rep.add(CheckResult(
        name="theorem1_premise",
        observed=float(premise_per_step[worst]), bound=trace.rho + slack,
        tolerance=tol["premise_slack"],
        passed=bool(premise_per_step[worst] <= trace.rho + slack),
        detail=f"worst step t={trace.T - worst}"))

    nsr_T = s.nsr[s.T]
    sqrt_a = np.sqrt(s.alpha)
    sqrt_1ma = np.sqrt(1.0 - s.alpha)
    slack = tol["bound_rel"] * xi_internal
    worst_xhat = (-np.inf, 0, 0.0)   # (excess over tolerated bound, t, observed)
    worst_x0 = (-np.inf, 0, 0.0)
    for i in range(trace.T):
        t = trace.T - i
        xhat_bound = max((sqrt_a[t] - sqrt_1ma[t] / nsr_T) * xi_internal, 0.0)
        obs_xhat = float(np.abs(trace.x_hat_at(t, s)
                                - (sqrt_a[t] * x0_unit + sqrt_1ma[t] * trace.eps0)).max())
        excess = obs_xhat - (xhat_bound + slack)
        if excess > worst_xhat[0]:
            worst_xhat = (excess, t, obs_xhat)
        obs_x0 = float(np.abs(trace.x0_pred[i] - x0_unit).max())
        excess = obs_x0 - (xi_internal + slack)
        if excess > worst_x0[0]:
            worst_x0 = (excess, t, obs_x0)
    rep.add(CheckResult(
        name="theorem1_xhat_bound", observed=worst_xhat[2],
        bound=worst_xhat[2] - worst_xhat[0], tolerance=tol["bound_rel"],
        passed=bool(worst_xhat[0] <= 0.0), detail=f"worst step t={worst_xhat[1]}"))
    rep.add(CheckResult(
        name="theorem1_x0_pred_bound", observed=worst_x0[2],
        bound=xi_internal + slack, tolerance=tol["bound_rel"],
        passed=bool(worst_x0[0] <= 0.0), detail=f"worst step t={worst_x0[1]}"))

    final = float(np.abs(trace.x_adv_unit - x0_unit).max())
    rep.add(CheckResult(
        name="theorem1_final_bound", observed=final,
        bound=xi_internal + slack, tolerance=tol["bound_rel"],
        passed=bool(final <= xi_internal + slack)))
    return rep


def check_prop1(trace: TrajectoryTrace, x_ori, x_adv, s: Schedule) -> VerificationReport:
    """Reconstruct x_ori + sum_t lambda_t * delta_t and compare to the
    pre-quantization output in unit range."""
    _require_deep(trace, "check_prop1")
    tol = _tols(trace)
    x0_unit = _unit_data(x_ori)
    adv_unit = _unit_data(x_adv)
    lam = s.lam[1:][::-1]                       # loop order: i=0 is t=T
    recon = x0_unit + np.einsum("i,ihwc->hwc", lam,
                                trace.delta.astype(np.float64))
    resid = float(np.abs(adv_unit - recon).max())
    rep = VerificationReport()
    rep.add(CheckResult(
        name="prop1_reconstruction", observed=resid, bound=tol["recon_abs"],
        tolerance=tol["recon_abs"], passed=bool(resid <= tol["recon_abs"])))
    return rep


def check_prop2(trace: TrajectoryTrace, x_adv, s: Schedule,
                xi_internal: float) -> VerificationReport:
    """Per-step approximation error |x_adv - x0_pred_t| against the bound
    2 * nsr_t / nsr_T * xi_internal; at t=T the bound is exactly 2*xi."""
    _require_deep(trace, "check_prop2")
    tol = _tols(trace)
    adv_unit = _unit_data(x_adv)
    nsr_T = s.nsr[s.T]
    slack = tol["bound_rel"] * xi_internal
    rep = VerificationReport()
    worst = (-np.inf, 0, 0.0, 0.0)
    for i in range(trace.T):
        t = trace.T - i
        bound = 2.0 * s.nsr[t] / nsr_T * xi_internal
        obs = float(np.abs(adv_unit - trace.x0_pred[i]).max())
        excess = obs - (bound + slack)
        if excess > worst[0]:
            worst = (excess, t, obs, bound)
    rep.add(CheckResult(
        name="prop2_step_bound", observed=worst[2], bound=worst[3],
        tolerance=tol["bound_rel"], passed=bool(worst[0] <= 0.0),
        detail=f"worst step t={worst[1]}"))
    bound_at_T = 2.0 * s.nsr[s.T] / nsr_T * xi_internal
    rep.add(CheckResult(
        name="prop2_bound_at_T", observed=bound_at_T, bound=2.0 * xi_internal,
        tolerance=1e-10,
        passed=bool(abs(bound_at_T - 2.0 * xi_internal) <= 1e-10 * 2.0 * xi_internal),
        detail="algebraic cancellation to 2*xi_internal"))
    return rep


def decay_stats(traces) -> dict:
    """Aggregate per-step guidance strength across traces.

    Emits the per-step mean and max of |delta_t| and of lambda_t * |delta_t|
    (plotting-ready series, first entry is t=T), plus the first-decile vs
    last-decile ordering of the mean |delta_t| that the decay property
    asserts."""
    traces = list(traces)
    if not traces:
        raise ValueError("decay_stats needs at least one trace")
    T = traces[0].T
    if any(tr.T != T for tr in traces):
        raise ValueError("all traces must share one T")
    per_step = np.array([[rec.delta_linf for rec in tr.steps] for tr in traces])
    lam = np.array([rec.lambda_t for rec in traces[0].steps])
    weighted = per_step * lam
    mean_series = per_step.mean(axis=0)
    decile = max(1, T // 10)
    first_decile_mean = float(mean_series[:decile].mean())
    last_decile_mean = float(mean_series[-decile:].mean())
    return {
        "num_traces": len(traces),
        "T": T,
        "delta_linf_mean": mean_series.tolist(),
        "delta_linf_max": per_step.max(axis=0).tolist(),
        "weighted_mean": weighted.mean(axis=0).tolist(),
        "weighted_max": weighted.max(axis=0).tolist(),
        "lambda_t": lam.tolist(),
        "first_decile_mean": first_decile_mean,
        "last_decile_mean": last_decile_mean,
        "decayed": bool(last_decile_mean <= first_decile_mean),
    }


def verify_trace(trace: TrajectoryTrace, s: Schedule) -> VerificationReport:
    """All checks that a self-contained deep trace supports."""
    _require_deep(trace, "verify_trace")
    rep = VerificationReport()
    rep.extend(check_theorem1(trace, trace.x_ori_unit, s, trace.xi_internal))
    rep.extend(check_prop1(trace, trace.x_ori_unit, trace.x_adv_unit, s))
    rep.extend(check_prop2(trace, trace.x_adv_unit, s, trace.xi_internal))
    return rep
