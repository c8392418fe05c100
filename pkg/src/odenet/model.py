"""The RK4-templated predictor: learned RHS, gray-box composers, stepping.

The learned right-hand side is an MLP either predicting the full state
derivative (black box) or only kinetic quantities that a fixed physics
skeleton turns into derivatives (gray box).  Trainable experimental
parameters enter the skeleton as scalar leaves.

Training happens in a per-channel min-max scaled state space (identity for
the CSTR system, corpus-derived for the co-culture whose channels span
O(1) to O(2000)); all public physical-space evaluators unscale
transparently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, axpy, concat, rk4_combine
from .errors import ConfigError, RolloutError
from .nn import Mlp
from .systems import BfParams, UrpParams, bf_skeleton, urp_skeleton

COMPOSERS = ("BLACK_BOX", "GRAY_FUNCTIONAL", "GRAY_ADDITIVE", "GRAY_MULTIPLICATIVE")
KAPPA_LAYOUT = {"URP": ("b", "beta"), "BF": ("omega", "sigma", "rho", "eta")}
STATE_DIM = {"URP": 2, "BF": 6}
PARAM_NAMES = {"URP": ("da",), "BF": ()}


@dataclass
class ChannelScaling:
    """Per-channel affine map to the training space: (x - lo) / (hi - lo)."""

    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def identity(cls, dim: int) -> "ChannelScaling":
        return cls(np.zeros(dim), np.ones(dim))

    @classmethod
    def from_corpus(cls, trajs, dim: int) -> "ChannelScaling":
        lo = np.full(dim, np.inf)
        hi = np.full(dim, -np.inf)
        for t in trajs:
            for o in t.observations:
                for c, v in o.channels.items():
                    lo[c] = min(lo[c], v)
                    hi[c] = max(hi[c], v)
        if not np.all(np.isfinite(lo)):
            raise ConfigError("corpus does not observe every channel; cannot scale")
        span = hi - lo
        degenerate = span <= 0
        hi = np.where(degenerate, lo + 1.0, hi)
        return cls(lo, hi)

    @property
    def span(self) -> np.ndarray:
        return self.hi - self.lo

    def is_identity(self) -> bool:
        return bool(np.all(self.lo == 0.0) and np.all(self.hi == 1.0))

    def scale_state(self, x):
        return (x - self.lo) * (1.0 / self.span)

    def unscale_state(self, x):
        return x * self.span + self.lo

    def scale_deriv(self, d):
        return d * (1.0 / self.span)

    def unscale_deriv(self, d):
        return d * self.span

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelScaling":
        return cls(np.asarray(d["lo"], dtype=np.float64), np.asarray(d["hi"], dtype=np.float64))


@dataclass
class Kappa:
    """One experimental parameter: a scalar leaf when trainable, else a constant."""

    name: str
    tensor: Tensor
    trainable: bool

    @property
    def value(self) -> float:
        return float(self.tensor.data)


class LearnedRhs:
    """MLP-backed right-hand side with optional physics composition.

    ``composer`` selects how the network output enters the derivative:

    * ``BLACK_BOX``: the network maps (state, params) directly to the
      state derivative.
    * ``GRAY_FUNCTIONAL``: the network predicts kinetic quantities (the
      reaction rate for URP; growth-rate-times-biomass triple for BF) and
      a fixed conservation skeleton with coupling constants ``kappa``
      produces the derivative.
    * ``GRAY_ADDITIVE`` / ``GRAY_MULTIPLICATIVE``: the network corrects a
      supplied white-box prior ``f_wb``.
    """

    def __init__(
        self,
        mlp: Mlp,
        composer: str,
        system: str,
        kappa_values: dict[str, float] | None = None,
        kappa_trainable: tuple[str, ...] = (),
        f_wb=None,
        scaling: ChannelScaling | None = None,
        dim: int | None = None,
        param_names: tuple[str, ...] | None = None,
        system_params=None,
    ):
        if composer not in COMPOSERS:
            raise ConfigError(f"unknown composer '{composer}'")
        if system not in ("URP", "BF", "CUSTOM"):
            raise ConfigError(f"unknown system tag '{system}'")
        if system == "CUSTOM":
            if dim is None:
                raise ConfigError("CUSTOM system needs an explicit state dimension")
            self.dim = dim
            self.param_names = param_names or ()
        else:
            self.dim = STATE_DIM[system]
            self.param_names = PARAM_NAMES[system]
        self.system = system
        self.composer = composer
        self.mlp = mlp
        self.f_wb = f_wb
        self.scaling = scaling or ChannelScaling.identity(self.dim)
        self._identity = self.scaling.is_identity()
        if system == "URP":
            self.system_params = system_params or UrpParams()
        elif system == "BF":
            self.system_params = system_params or BfParams()
        else:
            self.system_params = system_params

        layout = KAPPA_LAYOUT.get(system, ())
        defaults = {}
        if system == "URP":
            defaults = {"b": self.system_params.b, "beta": self.system_params.beta}
        elif system == "BF":
            p = self.system_params
            defaults = {"omega": p.omega, "sigma": p.sigma, "rho": p.rho, "eta": p.eta}
        self.kappa: dict[str, Kappa] = {}
        for name in layout:
            trainable = name in kappa_trainable
            if kappa_values and name in kappa_values:
                value = kappa_values[name]
            elif trainable:
                value = 1.0  # unconstrained start; true values are O(0.1-10)
            else:
                value = defaults[name]
            self.kappa[name] = Kappa(name, Tensor(np.float64(value), requires_grad=trainable), trainable)
        unknown = set(kappa_trainable) - set(layout)
        if unknown:
            raise ConfigError(f"kappa entries {sorted(unknown)} not in layout {layout}")

        self._check_widths()

    def _check_widths(self):
        n_in = self.mlp.in_width
        n_out = self.mlp.out_width
        n_p = len(self.param_names)
        if self.composer == "BLACK_BOX":
            want_in, want_out = self.dim + n_p, self.dim
        elif self.composer == "GRAY_FUNCTIONAL":
            if self.system == "URP":
                want_in, want_out = 2 + n_p, 1
            elif self.system == "BF":
                want_in, want_out = 6, 3
            else:
                raise ConfigError("GRAY_FUNCTIONAL requires URP or BF skeletons")
        else:
            if self.f_wb is None:
                raise ConfigError(f"{self.composer} requires a white-box prior f_wb")
            want_in, want_out = self.dim + n_p, self.dim
        if (n_in, n_out) != (want_in, want_out):
            raise ConfigError(
                f"{self.system}/{self.composer} needs MLP {want_in}->{want_out}, "
                f"got {n_in}->{n_out}"
            )

    # -- evaluation -----------------------------------------------------------

    def kappa_value(self, name: str) -> float:
        return self.kappa[name].value

    def _net_input(self, state_s: Tensor, params) -> Tensor:
        if params is None:
            return state_s
        if not isinstance(params, Tensor):
            params = Tensor(params)
        return concat([state_s, params], axis=1)

    def eval_scaled(self, state_s: Tensor, params: np.ndarray | None = None) -> Tensor:
        """Derivative of the scaled state, differentiable w.r.t. weights/kappa/state."""
        sc = self.scaling
        if self.composer == "BLACK_BOX":
            return self.mlp(self._net_input(state_s, params))  # params may be pre-wrapped
        if self.composer == "GRAY_FUNCTIONAL":
            if self.system == "URP":
                phi = self.mlp(self._net_input(state_s, params))
                x1 = state_s[:, 0:1]
                x2 = state_s[:, 1:2]
                if not self._identity:
                    x1 = x1 * sc.span[0] + sc.lo[0]
                    x2 = x2 * sc.span[1] + sc.lo[1]
                dx1, dx2 = urp_skeleton(
                    x1, x2, phi, self.kappa["b"].tensor, self.kappa["beta"].tensor
                )
                if self._identity:
                    return concat([dx1, dx2], axis=1)
                return concat([dx1 * (1.0 / sc.span[0]), dx2 * (1.0 / sc.span[1])], axis=1)
            q = self.mlp(state_s)
            channels = []
            for c in range(6):
                col = state_s[:, c : c + 1]
                if not self._identity:
                    col = col * sc.span[c] + sc.lo[c]
                channels.append(col)
            derivs = bf_skeleton(
                tuple(channels),
                (q[:, 0:1], q[:, 1:2], q[:, 2:3]),
                tuple(self.kappa[n].tensor for n in ("omega", "sigma", "rho", "eta")),
                self.system_params,
            )
            if self._identity:
                return concat(list(derivs), axis=1)
            return concat([d * (1.0 / sc.span[c]) for c, d in enumerate(derivs)], axis=1)
        # corrective composers: prior in physical space, correction from the net
        phys = state_s if self._identity else self.scaling.unscale_state(state_s)
        prior = self.f_wb(phys, params)
        prior_s = prior if self._identity else prior * (1.0 / sc.span)
        net = self.mlp(self._net_input(state_s, params))
        if self.composer == "GRAY_ADDITIVE":
            return prior_s + net
        return prior_s * net

    def bound(self, params: np.ndarray | None):
        """Scaled-space RHS with the per-row parameters baked in."""
        if params is not None and len(self.param_names):
            params = Tensor(np.asarray(params, dtype=np.float64))
        return lambda state_s: self.eval_scaled(state_s, params)

    def rhs_physical(self, state: np.ndarray, params: np.ndarray | None = None) -> np.ndarray:
        """Physical-units derivative at physical states; no graph recorded."""
        state = np.atleast_2d(np.asarray(state, dtype=np.float64))
        if params is not None:
            params = np.atleast_2d(np.asarray(params, dtype=np.float64))
            if params.shape[0] == 1 and state.shape[0] > 1:
                params = np.broadcast_to(params, (state.shape[0], params.shape[1]))
        with ad.no_grad():
            out = self.eval_scaled(Tensor(self.scaling.scale_state(state)), params)
        return self.scaling.unscale_deriv(out.data)

    def kinetics_physical(self, state: np.ndarray, params: np.ndarray | None = None) -> np.ndarray:
        """Network-predicted kinetic quantities at physical states (gray-box only)."""
        if self.composer != "GRAY_FUNCTIONAL":
            raise ConfigError("kinetic output is only defined for GRAY_FUNCTIONAL models")
        state = np.atleast_2d(np.asarray(state, dtype=np.float64))
        if params is not None:
            params = np.atleast_2d(np.asarray(params, dtype=np.float64))
            if params.shape[0] == 1 and state.shape[0] > 1:
                params = np.broadcast_to(params, (state.shape[0], params.shape[1]))
        with ad.no_grad():
            state_s = Tensor(self.scaling.scale_state(state))
            out = self.mlp(self._net_input(state_s, params))
        return out.data

    def physical_rhs_at(self, params_row: np.ndarray | None = None):
        """Single-state physical RHS closure for eigen/bifurcation analysis."""

        def f(state):
            return self.rhs_physical(state[None, :], None if params_row is None else params_row[None, :])[0]

        return f

    def leaves(self) -> dict[str, Tensor]:
        out = dict(self.mlp.leaves())
        for name, k in self.kappa.items():
            if k.trainable:
                out[f"kappa.{name}"] = k.tensor
        return out

    # -- serialization -----------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "system": self.system,
            "composer": self.composer,
            "mlp": self.mlp.to_dict(),
            "kappa": {
                name: {"value": k.value, "trainable": k.trainable}
                for name, k in self.kappa.items()
            },
            "scaling": self.scaling.to_dict(),
            "dim": self.dim,
            "param_names": list(self.param_names),
        }

    @classmethod
    def from_dict(cls, d: dict, f_wb=None) -> "LearnedRhs":
        return cls(
            mlp=Mlp.from_dict(d["mlp"]),
            composer=d["composer"],
            system=d["system"],
            kappa_values={k: v["value"] for k, v in d["kappa"].items()},
            kappa_trainable=tuple(k for k, v in d["kappa"].items() if v["trainable"]),
            f_wb=f_wb,
            scaling=ChannelScaling.from_dict(d["scaling"]),
            dim=d["dim"],
            param_names=tuple(d["param_names"]),
        )


# -- stepping -----------------------------------------------------------------


def rk4_step(f, state: Tensor, dt) -> Tensor:
    """One classical Runge-Kutta step of the callable RHS ``f``.

    ``dt`` is a float or a per-row [B, 1] column (a zero entry makes the
    step an exact identity, which is how padded rows ride along).
    """
    half = dt * 0.5 if np.isscalar(dt) else np.asarray(dt) * 0.5
    k1 = f(state)
    k2 = f(axpy(state, k1, half))
    k3 = f(axpy(state, k2, half))
    k4 = f(axpy(state, k3, dt))
    return rk4_combine(state, k1, k2, k3, k4, dt)


def integrate_gap(f, state: Tensor, substeps, trajectory=None, time=None) -> Tensor:
    """Chain rk4_step over the planned sub-steps, graph intact."""
    for j, dt in enumerate(substeps):
        state = rk4_step(f, state, dt)
        if not np.all(np.isfinite(state.data)):
            raise RolloutError(
                f"non-finite state after sub-step {j}",
                trajectory=trajectory,
                time=time,
                step=j,
            )
    return state
