"""Closed-form ground-truth systems and reference numerics.

Two benchmark systems are provided:

* ``URP``: the non-isothermal CSTR in dimensionless form (conversion x1,
  temperature x2), parameterized by the heat coupling ``b``, the heat
  transfer coefficient ``beta`` and the Damkohler number ``da``.
* ``BF``: a six-dimensional three-species co-culture (host x, commensals
  y/z, host substrate u, growth factor v, inhibition factor g).

Each system is expressed as a conservation skeleton composed with kinetic
sub-functions; the skeleton is written over plain arithmetic so the same
code runs on numpy arrays and on autodiff tensors.  The full RHS is the
composition, exactly, which is what makes gray-box oracle checks exact.

The reference integrator (an adaptive 5(4) Runge-Kutta pair via scipy) is
used for data generation and metric oracles only, never inside training.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.integrate import solve_ivp

from . import autodiff as ad
from .errors import ConfigError, IntegrationError, NumericError, PeriodDetectionError


def _exp(v):
    return ad.exp(v) if isinstance(v, ad.Tensor) else np.exp(v)


# -- URP CSTR -----------------------------------------------------------------


@dataclass(frozen=True)
class UrpParams:
    b: float = 11.0
    beta: float = 3.0
    da: float = 0.3

    def __post_init__(self):
        if self.b <= 0 or self.beta < 0:
            raise ConfigError("URP requires b > 0 and beta >= 0")
        if not 0.0 < self.da < 1.0:
            raise ConfigError(f"Damkohler number must be in (0, 1), got {self.da}")


def urp_kinetics(x1, x2, da):
    """Reaction-rate term da * (1 - x1) * exp(x2); generic over array/tensor."""
    return da * (1.0 - x1) * _exp(x2)


def urp_skeleton(x1, x2, phi, b, beta):
    """Mass/energy balance shell around the reaction rate ``phi``."""
    dx1 = -x1 + phi
    dx2 = -x2 + b * phi - beta * x2
    return dx1, dx2


# -- B&F three-species co-culture ----------------------------------------------


@dataclass(frozen=True)
class BfParams:
    alpha: float = 1.0 / 7.3
    u_f: float = 250.0
    omega: float = 9.7
    sigma: float = 10.0
    rho: float = 0.13138686
    eta: float = 1.29166
    phi1: float = 0.2941176
    phi2: float = 0.367647
    mu_c1: float = 0.367647
    mu_c2: float = 0.117647
    mu_c3: float = 0.1617647

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value <= 0:
                raise ConfigError(f"B&F parameter {name} must be positive")


def bf_growth_rates(u, v, g, p: BfParams):
    """Specific growth rates of the three species; generic over array/tensor."""
    mu1 = u / ((1.0 + u) * (1.0 + g))
    mu2 = p.phi1 * v / (1.0 + v)
    mu3 = p.phi2 * v / (p.sigma + v)
    return mu1, mu2, mu3


def bf_skeleton(channels, q, kappa, p: BfParams):
    """Mass-balance shell of the co-culture.

    ``q = (q1, q2, q3)`` are the growth rates already multiplied by the
    respective biomass; ``kappa = (omega, sigma, rho, eta)`` are the
    coupling constants (possibly trainable tensors).
    """
    x, y, z, u, v, g = channels
    q1, q2, q3 = q
    omega, sigma, rho, eta = kappa
    dx = -p.alpha * x + q1 - p.mu_c1 * x
    dy = -p.alpha * y + q2 - p.mu_c2 * y
    dz = -p.alpha * z + q3 - p.mu_c3 * z
    du = p.alpha * (p.u_f - u) - q1
    dv = -p.alpha * v + omega * q1 - q2 - sigma * q3
    dg = -p.alpha * g + rho * q2 + eta * q3
    return dx, dy, dz, du, dv, dg


# -- system objects -------------------------------------------------------------


class TruthSystem:
    """Closed-form system: tag, parameters, RHS and kinetic sub-functions.

    ``traj_params`` carries per-trajectory quantities (the Damkohler number
    for URP; B&F has none) as a trailing [..., n_params] array.
    """

    def __init__(self, tag: str, params, dim: int, param_names: tuple[str, ...]):
        self.tag = tag
        self.params = params
        self.dim = dim
        self.param_names = param_names

    def with_params(self, **updates) -> "TruthSystem":
        return type(self)(replace(self.params, **updates))

    def rhs(self, state: np.ndarray, traj_params=None) -> np.ndarray:
        raise NotImplementedError

    def kinetics(self, state: np.ndarray, traj_params=None) -> np.ndarray:
        raise NotImplementedError

    def kappa_true(self) -> dict[str, float]:
        raise NotImplementedError

    def rhs_at(self, traj_params=None):
        return lambda s: self.rhs(s, traj_params)


class UrpSystem(TruthSystem):
    def __init__(self, params: UrpParams = UrpParams()):
        super().__init__("URP", params, 2, ("da",))

    def _da(self, state, traj_params):
        if traj_params is None:
            return self.params.da
        tp = np.asarray(traj_params, dtype=np.float64)
        return tp[..., 0]

    def rhs(self, state, traj_params=None):
        state = np.asarray(state, dtype=np.float64)
        x1, x2 = state[..., 0], state[..., 1]
        phi = urp_kinetics(x1, x2, self._da(state, traj_params))
        dx1, dx2 = urp_skeleton(x1, x2, phi, self.params.b, self.params.beta)
        return np.stack([dx1, dx2], axis=-1)

    def kinetics(self, state, traj_params=None):
        state = np.asarray(state, dtype=np.float64)
        phi = urp_kinetics(state[..., 0], state[..., 1], self._da(state, traj_params))
        return phi[..., None]

    def kappa_true(self):
        return {"b": self.params.b, "beta": self.params.beta}


class BfSystem(TruthSystem):
    def __init__(self, params: BfParams = BfParams()):
        super().__init__("BF", params, 6, ())

    def _guard(self, u, v, g):
        p = self.params
        if np.any((1.0 + u) * (1.0 + g) <= 0) or np.any(1.0 + v <= 0) or np.any(p.sigma + v <= 0):
            raise NumericError("B&F growth-rate denominator is non-positive")

    def rhs(self, state, traj_params=None):
        state = np.asarray(state, dtype=np.float64)
        ch = tuple(state[..., i] for i in range(6))
        x, y, z, u, v, g = ch
        self._guard(u, v, g)
        mu1, mu2, mu3 = bf_growth_rates(u, v, g, self.params)
        q = (mu1 * x, mu2 * y, mu3 * z)
        p = self.params
        derivs = bf_skeleton(ch, q, (p.omega, p.sigma, p.rho, p.eta), p)
        return np.stack(derivs, axis=-1)

    def kinetics(self, state, traj_params=None):
        """Growth rates multiplied by the respective biomass, [..., 3]."""
        state = np.asarray(state, dtype=np.float64)
        x, y, z, u, v, g = (state[..., i] for i in range(6))
        self._guard(u, v, g)
        mu1, mu2, mu3 = bf_growth_rates(u, v, g, self.params)
        return np.stack([mu1 * x, mu2 * y, mu3 * z], axis=-1)

    def kappa_true(self):
        p = self.params
        return {"omega": p.omega, "sigma": p.sigma, "rho": p.rho, "eta": p.eta}


def make_system(tag: str, **params) -> TruthSystem:
    if tag == "URP":
        return UrpSystem(UrpParams(**params))
    if tag == "BF":
        return BfSystem(BfParams(**params))
    raise ConfigError(f"unknown system tag '{tag}'")


# -- reference integration -------------------------------------------------------


def reference_integrate(
    rhs,
    x0: np.ndarray,
    t_eval: np.ndarray,
    rtol: float = 1e-9,
    atol: float = 1e-11,
) -> np.ndarray:
    """Integrate an autonomous RHS at the requested times (adaptive RK 5(4)).

    ``rhs`` is either a ``TruthSystem`` or a callable ``state -> derivative``.
    """
    f = rhs.rhs_at() if isinstance(rhs, TruthSystem) else rhs
    t_eval = np.asarray(t_eval, dtype=np.float64)
    if t_eval.ndim != 1 or np.any(np.diff(t_eval) <= 0):
        raise ConfigError("t_eval must be strictly increasing")
    x0 = np.asarray(x0, dtype=np.float64)
    if t_eval.size == 1:
        return x0[None, :].copy()
    sol = solve_ivp(
        lambda t, s: f(s),
        (t_eval[0], t_eval[-1]),
        x0,
        method="RK45",
        t_eval=t_eval,
        rtol=rtol,
        atol=atol,
    )
    if not sol.success:
        raise IntegrationError(f"reference integration failed: {sol.message}", time=sol.t[-1] if sol.t.size else t_eval[0])
    return sol.y.T.copy()


def _dense_solution(rhs, x0, t_end, rtol, atol):
    f = rhs.rhs_at() if isinstance(rhs, TruthSystem) else rhs
    sol = solve_ivp(
        lambda t, s: f(s),
        (0.0, t_end),
        np.asarray(x0, dtype=np.float64),
        method="RK45",
        dense_output=True,
        rtol=rtol,
        atol=atol,
    )
    if not sol.success:
        raise IntegrationError(f"reference integration failed: {sol.message}", time=sol.t[-1] if sol.t.size else 0.0)
    return sol


# -- Jacobian eigen-analysis -------------------------------------------------------


def finite_difference_jacobian(rhs, point: np.ndarray, h_rel: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian with per-component step 1e-6 * max(1, |x_i|)."""
    f = rhs.rhs_at() if isinstance(rhs, TruthSystem) else rhs
    point = np.asarray(point, dtype=np.float64)
    n = point.size
    jac = np.empty((n, n))
    for i in range(n):
        h = h_rel * max(1.0, abs(point[i]))
        xp = point.copy()
        xp[i] += h
        xm = point.copy()
        xm[i] -= h
        jac[:, i] = (np.asarray(f(xp)) - np.asarray(f(xm))) / (2.0 * h)
    return jac


def jacobian_eigs(rhs, point: np.ndarray) -> np.ndarray:
    """Eigenvalues of the finite-difference Jacobian, sorted by real part."""
    jac = finite_difference_jacobian(rhs, point)
    try:
        eig = np.linalg.eigvals(jac)
    except np.linalg.LinAlgError as err:
        raise NumericError(f"eigenvalue solve failed: {err}") from err
    order = np.lexsort((eig.imag, eig.real))
    return eig[order]


# -- limit-cycle extraction -----------------------------------------------------------


@dataclass
class CycleResult:
    kind: str  # "steady" | "cycle"
    states: np.ndarray  # [n_points, d] on a cycle, [1, d] at a steady state
    period: float | None = None

    @property
    def channel_min(self) -> np.ndarray:
        return self.states.min(axis=0)

    @property
    def channel_max(self) -> np.ndarray:
        return self.states.max(axis=0)


def find_limit_cycle(
    rhs,
    probe_ic: np.ndarray,
    n_points: int = 200,
    t_end: float = 500.0,
    t_cut: float = 300.0,
    amp_tol: float = 1e-3,
    rtol: float = 1e-9,
    atol: float = 1e-11,
    n_dense: int = 8001,
) -> CycleResult:
    """Classify the attractor reached from ``probe_ic``.

    Integrates to ``t_end``, discards everything before ``t_cut``, and calls
    the attractor a steady state when every channel's post-transient
    peak-to-peak amplitude is below ``amp_tol``.  Otherwise the period is
    detected from successive upward crossings of channel 0's mean and one
    period is returned resampled at ``n_points`` evenly spaced times.

    For slow cycles (the co-culture period is ~219 time units) callers must
    extend ``t_end``/``t_cut`` so the retained window covers at least two
    crossings.
    """
    sol = _dense_solution(rhs, probe_ic, t_end, rtol, atol)
    ts = np.linspace(t_cut, t_end, n_dense)
    ys = sol.sol(ts)  # [d, n_dense]
    amplitude = ys.max(axis=1) - ys.min(axis=1)
    if np.all(amplitude < amp_tol):
        return CycleResult("steady", ys.mean(axis=1)[None, :])
    level = ys[0].mean()
    s = ys[0] - level
    up = np.nonzero((s[:-1] < 0) & (s[1:] >= 0))[0]
    if up.size < 2:
        raise PeriodDetectionError(
            f"oscillation amplitude {amplitude.max():.3g} above threshold but "
            f"fewer than two upward crossings in [{t_cut}, {t_end}]"
        )
    crossings = ts[up] - s[up] * (ts[1] - ts[0]) / (s[up + 1] - s[up])
    period = float(np.median(np.diff(crossings)))
    t0 = crossings[-1] - period
    sample_ts = t0 + period * np.arange(n_points) / n_points
    states = sol.sol(sample_ts).T
    return CycleResult("cycle", states, period)


def steady_state_residual(rhs, point: np.ndarray) -> float:
    f = rhs.rhs_at() if isinstance(rhs, TruthSystem) else rhs
    return float(np.linalg.norm(np.asarray(f(np.asarray(point, dtype=np.float64)))))
