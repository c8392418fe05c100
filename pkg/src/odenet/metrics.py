"""Evaluation metrics: normalized error norms, oracle comparisons, sweeps.

All error matrices are min-max normalized per variable by the true values
before the norms are taken.  The L2 form divides the sum of per-row root
norms by (rows * variables) — deliberately kept verbatim even though it is
not a conventional RMSE; deviating implementations must flag it, so the
report metadata records the convention.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, PeriodDetectionError
from .model import LearnedRhs
from .systems import (
    CycleResult,
    TruthSystem,
    find_limit_cycle,
    reference_integrate,
)
from .training import OdeNetModel, infer_trajectory

_DEGENERATE_RTOL = 1e-6


@dataclass(frozen=True)
class NormTriple:
    l1: float
    l2: float
    linf: float

    def as_dict(self) -> dict:
        return {"l1": self.l1, "l2": self.l2, "linf": self.linf}


def norms(y_true: np.ndarray, y_pred: np.ndarray) -> NormTriple:
    """Min-max normalized L1 / L2 / Linf error norms.

    Both arrays are scaled by y_true's per-channel min/max.  Channels whose
    true range is degenerate are excluded with a warning; if every channel
    is degenerate the errors fall back to unnormalized deviations.
    """
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape or y_true.ndim != 2 or y_true.shape[0] < 1:
        raise ConfigError(f"norms needs matching [N, d] arrays, got {y_true.shape} vs {y_pred.shape}")
    lo = y_true.min(axis=0)
    hi = y_true.max(axis=0)
    span = hi - lo
    degenerate = span <= _DEGENERATE_RTOL * np.maximum(1.0, np.maximum(np.abs(lo), np.abs(hi)))
    if np.all(degenerate):
        warnings.warn("all channels are degenerate; norms are unnormalized deviations")
        keep = np.ones_like(degenerate)
        lo = np.zeros_like(lo)
        span = np.ones_like(span)
    else:
        if np.any(degenerate):
            warnings.warn(
                f"excluding degenerate channels {np.nonzero(degenerate)[0].tolist()} from norms"
            )
        keep = ~degenerate
        lo = lo[keep]
        span = span[keep]
    yt = (y_true[:, keep] - lo) / span
    yp = (y_pred[:, keep] - lo) / span
    delta = np.abs(yt - yp)
    n, d = delta.shape
    l1 = delta.sum() / (n * d)
    l2 = np.sqrt((delta**2).sum(axis=1)).sum() / (n * d)
    linf = delta.max(axis=1).sum() / n
    return NormTriple(float(l1), float(l2), float(linf))


# -- test point protocol ---------------------------------------------------------


@dataclass
class TestPointSet:
    """Post-transient states sampled from randomized trajectories."""

    __test__ = False  # pytest: not a test class

    states: np.ndarray            # [N, d]
    params: np.ndarray | None     # [N, P] per-point trajectory parameters
    seed: int
    meta: dict = field(default_factory=dict)


def build_test_points(
    system: TruthSystem,
    n_points: int,
    seed: int,
    ic_box,
    param_ranges: dict[str, tuple[float, float]] | None = None,
    t_settle: float = 30.0,
    t_spread: float = 10.0,
    rtol: float = 1e-9,
    atol: float = 1e-11,
) -> TestPointSet:
    """Randomize ICs, integrate past the transients, keep one point each."""
    states = np.empty((n_points, system.dim))
    names = sorted(param_ranges) if param_ranges else []
    params = np.empty((n_points, len(names))) if names else None
    for i in range(n_points):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
        x0 = np.array([rng.uniform(lo, hi) for lo, hi in ic_box])
        sys_i = system
        if names:
            draw = {k: float(rng.uniform(*param_ranges[k])) for k in names}
            params[i] = [draw[k] for k in names]
            sys_i = system.with_params(**draw)
        t_end = t_settle + rng.uniform(0.0, t_spread)
        states[i] = reference_integrate(sys_i, x0, np.array([0.0, t_end]), rtol, atol)[-1]
    return TestPointSet(states, params, seed, {"t_settle": t_settle, "t_spread": t_spread})


# -- oracle-based errors ------------------------------------------------------------


def _physical_rhs(model):
    if isinstance(model, OdeNetModel):
        model = model.rhs
    if isinstance(model, LearnedRhs):
        return lambda s, p: model.rhs_physical(s, p)
    if isinstance(model, TruthSystem):
        return lambda s, p: model.rhs(s, p)
    return lambda s, p: np.asarray(model(s))


def rhs_error(model, truth: TruthSystem, pts: TestPointSet) -> NormTriple:
    """Norms between the true and learned vector fields at the test points."""
    y_true = truth.rhs(pts.states, pts.params)
    y_pred = _physical_rhs(model)(pts.states, pts.params)
    return norms(y_true, y_pred)


def kinetic_error(model, truth: TruthSystem, pts: TestPointSet, per_unit: bool = False) -> NormTriple:
    """Norms between true and predicted kinetic quantities (gray box only).

    For the co-culture the primary comparison is growth-rate-times-biomass;
    ``per_unit=True`` divides by the biomass (points with biomass below
    1e-8 are dropped) for the secondary rate comparison.
    """
    if isinstance(model, OdeNetModel):
        model = model.rhs
    if isinstance(model, TruthSystem):
        y_pred = model.kinetics(pts.states, pts.params)
    else:
        y_pred = model.kinetics_physical(pts.states, pts.params)
    y_true = truth.kinetics(pts.states, pts.params)
    if per_unit:
        if truth.tag != "BF":
            raise ConfigError("per-unit rates are only defined for the co-culture")
        biomass = pts.states[:, 0:3]
        keep = np.all(np.abs(biomass) > 1e-8, axis=1)
        y_true = y_true[keep] / biomass[keep]
        y_pred = y_pred[keep] / biomass[keep]
    return norms(y_true, y_pred)


def param_error(kappa_true, kappa_learned) -> float:
    """Mean relative error over the experimental parameters."""
    if isinstance(kappa_true, dict):
        names = sorted(kappa_true)
        t = np.array([kappa_true[k] for k in names], dtype=np.float64)
        l = np.array([kappa_learned[k] for k in names], dtype=np.float64)
    else:
        t = np.asarray(kappa_true, dtype=np.float64)
        l = np.asarray(kappa_learned, dtype=np.float64)
    if t.size == 0:
        raise ConfigError("no experimental parameters to compare")
    return float(np.mean(np.abs((t - l) / t)))


CYCLE_DEFAULTS = {
    "URP": {"probe_ic": (0.7, 2.0), "t_end": 500.0, "t_cut": 300.0},
    # the co-culture cycle period is ~219, longer than the default
    # post-transient window, so both horizons are extended
    "BF": {"probe_ic": (5.0, 5.0, 5.0, 50.0, 10.0, 2.0), "t_end": 2000.0, "t_cut": 1200.0},
}


def true_cycle(truth: TruthSystem, n_points: int = 50, **overrides) -> CycleResult:
    opts = dict(CYCLE_DEFAULTS[truth.tag])
    opts.update(overrides)
    probe = np.asarray(opts.pop("probe_ic"), dtype=np.float64)
    return find_limit_cycle(truth, probe, n_points=n_points, **opts)


def solution_error(
    model,
    truth: TruthSystem,
    cycle: CycleResult | None = None,
    horizon: float = 20.0,
    dt_eval: float = 0.25,
    max_dt: float = 0.1,
    n_cycle_points: int = 50,
    rtol: float = 1e-9,
    atol: float = 1e-11,
) -> NormTriple:
    """Short-term prediction error from starts spread around the true cycle.

    True and learned dynamics are both integrated for ``horizon`` from each
    start; a learned model steps with its own fixed-step integrator at
    ``max_dt``, while truth (and truth-oracle models) use the reference
    integrator.
    """
    if cycle is None:
        cycle = true_cycle(truth, n_points=n_cycle_points)
    starts = cycle.states
    t_eval = np.arange(0.0, horizon + dt_eval / 2, dt_eval)
    n_params = len(truth.param_names)
    params = None
    if n_params:
        params = np.array([[getattr(truth.params, n) for n in truth.param_names]])
        params = np.broadcast_to(params, (starts.shape[0], n_params)).copy()
    y_true = np.concatenate(
        [reference_integrate(truth, s, t_eval, rtol, atol) for s in starts]
    )
    if isinstance(model, OdeNetModel) or isinstance(model, LearnedRhs):
        pred = infer_trajectory(model, starts, params, t_eval, max_dt=max_dt)
        y_pred = pred.reshape(-1, truth.dim)
    else:
        f = _physical_rhs(model)
        y_pred = np.concatenate(
            [
                reference_integrate(lambda s: f(s[None, :], None if params is None else params[:1])[0],
                                    starts[i], t_eval, rtol, atol)
                for i in range(starts.shape[0])
            ]
        )
    return norms(y_true, y_pred)


# -- bifurcation sweeps ---------------------------------------------------------------


@dataclass
class SweepRow:
    value: float
    kind: str  # "steady" | "cycle" | "unresolved"
    channel_min: np.ndarray
    channel_max: np.ndarray


@dataclass
class SweepResult:
    rows: list[SweepRow]
    hopf_estimates: list[float]


def bifurcation_sweep(
    make_rhs,
    values,
    probe_ic,
    t_end: float = 500.0,
    t_cut: float = 300.0,
    amp_tol: float = 1e-3,
    rtol: float = 1e-9,
    atol: float = 1e-11,
) -> SweepResult:
    """Classify the attractor for each parameter value; estimate flips.

    ``make_rhs(value)`` returns the RHS callable at that parameter value.
    A Hopf estimate is the midpoint of every grid interval over which the
    steady/cycle classification flips.
    """
    probe = np.asarray(probe_ic, dtype=np.float64)
    rows = []
    for v in values:
        try:
            res = find_limit_cycle(
                make_rhs(v), probe, n_points=64, t_end=t_end, t_cut=t_cut,
                amp_tol=amp_tol, rtol=rtol, atol=atol,
            )
            rows.append(SweepRow(float(v), res.kind, res.channel_min, res.channel_max))
        except PeriodDetectionError:
            d = probe.size
            rows.append(SweepRow(float(v), "unresolved", np.full(d, np.nan), np.full(d, np.nan)))
    resolved = [r for r in rows if r.kind != "unresolved"]
    hopf = [
        0.5 * (a.value + b.value)
        for a, b in zip(resolved, resolved[1:])
        if a.kind != b.kind
    ]
    return SweepResult(rows, hopf)


# -- report ------------------------------------------------------------------------


@dataclass
class MetricsReport:
    """Error summary for one trained model; absent metrics stay None."""

    solution: NormTriple | None = None
    rhs: NormTriple | None = None
    kinetic: NormTriple | None = None
    param_rel_error: float | None = None
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "solution": self.solution.as_dict() if self.solution else None,
            "rhs": self.rhs.as_dict() if self.rhs else None,
            "kinetic": self.kinetic.as_dict() if self.kinetic else None,
            "param_rel_error": self.param_rel_error,
            "metadata": self.metadata,
        }

    CSV_FIELDS = (
        "name", "solution_l1", "solution_l2", "solution_linf",
        "rhs_l1", "rhs_l2", "rhs_linf",
        "kinetic_l1", "kinetic_l2", "kinetic_linf", "param_rel_error",
    )

    def csv_row(self, name: str) -> list:
        def tri(t):
            return [t.l1, t.l2, t.linf] if t else ["", "", ""]

        return [name, *tri(self.solution), *tri(self.rhs), *tri(self.kinetic),
                self.param_rel_error if self.param_rel_error is not None else ""]


def zigzag_fraction(series: np.ndarray) -> float:
    """Fraction of consecutive increment pairs with opposite signs.

    A resonance-style discrete map produces alternating slopes between the
    repeated solver steps, pushing this well above what a smooth trajectory
    sampled at the same times shows.
    """
    d = np.diff(np.asarray(series, dtype=np.float64))
    if d.size < 2:
        return 0.0
    return float(np.mean(d[:-1] * d[1:] < 0))
