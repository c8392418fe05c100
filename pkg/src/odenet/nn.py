"""Multilayer perceptron and the Adam-based parameter store.

The MLP is the learned approximator for either the full right-hand side
(black box) or the kinetic sub-functions (gray box): SiLU on every hidden
layer, linear output.  ``ParamStore`` owns every trainable leaf (network
weights, experimental parameters, per-trajectory initial conditions) plus
the shared Adam state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff
from .autodiff import Tensor
from .errors import ConfigError, NumericError

ACT_SILU = "silu"
ACT_LINEAR = "linear"


@dataclass
class Layer:
    w: Tensor  # [fan_in, fan_out]
    b: Tensor  # [fan_out]
    act: str


class Mlp:
    """Dense feed-forward network over batched inputs [batch, in_width]."""

    def __init__(self, layers: list[Layer]):
        if not layers:
            raise ConfigError("Mlp needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.w.shape[1] != nxt.w.shape[0]:
                raise ConfigError(
                    f"layer widths do not chain: {prev.w.shape} -> {nxt.w.shape}"
                )
        if layers[-1].act != ACT_LINEAR:
            raise ConfigError("final layer must have linear activation")
        if any(l.act != ACT_SILU for l in layers[:-1]):
            raise ConfigError("hidden layers must use SiLU activation")
        self.layers = layers

    @property
    def in_width(self) -> int:
        return self.layers[0].w.shape[0]

    @property
    def out_width(self) -> int:
        return self.layers[-1].w.shape[1]

    @property
    def widths(self) -> list[int]:
        return [self.in_width] + [l.w.shape[1] for l in self.layers]

    def __call__(self, x: Tensor) -> Tensor:
        """Evaluate the network as a single fused tape node.

        Keeping the whole forward/backward chain in one closure (instead of
        one node per layer) is what makes long unrolled rollouts cheap.
        """
        if x.shape[-1] != self.in_width:
            raise ConfigError(
                f"input width {x.shape[-1]} does not match network input {self.in_width}"
            )
        layers = self.layers
        h = x.data
        acts = [h]  # layer inputs
        gates = []  # silu sigmoid factors, per hidden layer
        pres = []
        for layer in layers:
            z = h @ layer.w.data + layer.b.data
            if layer.act == ACT_SILU:
                with np.errstate(over="ignore"):
                    s = 1.0 / (1.0 + np.exp(-z))
                h = z * s
                gates.append(s)
                pres.append(z)
            else:
                h = z
                gates.append(None)
                pres.append(None)
            acts.append(h)
        if not autodiff.grad_enabled():
            return Tensor(h)
        track_x = x.requires_grad
        track_w = any(l.w.requires_grad for l in layers)
        if not (track_x or track_w):
            return Tensor(h)

        def back(g):
            for i in range(len(layers) - 1, -1, -1):
                layer = layers[i]
                if gates[i] is not None:
                    s = gates[i]
                    g = g * (s * (1.0 + pres[i] * (1.0 - s)))
                if layer.w.requires_grad:
                    autodiff._accum(layer.w, acts[i].T @ g)
                    autodiff._accum(layer.b, g.sum(axis=0))
                if i > 0 or track_x:
                    g = g @ layer.w.data.T
            if track_x:
                autodiff._accum(x, g)

        parents = [x] if track_x else []
        for layer in layers:
            if layer.w.requires_grad:
                parents.append(layer.w)
                parents.append(layer.b)
        return autodiff._make(h, tuple(parents), back)

    def leaves(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"layer{i}.w"] = layer.w
            out[f"layer{i}.b"] = layer.b
        return out

    def to_dict(self) -> dict:
        return {
            "widths": self.widths,
            "activations": [l.act for l in self.layers],
            "weights": [l.w.data.tolist() for l in self.layers],
            "biases": [l.b.data.tolist() for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Mlp":
        layers = []
        for w, b, act in zip(d["weights"], d["biases"], d["activations"]):
            layers.append(Layer(Tensor(w), Tensor(b), act))
        return cls(layers)


def init_weights(widths: list[int], seed: int, output_scale: float = 1.0) -> Mlp:
    """Build an MLP with fan-in uniform initialization.

    Every entry of layer i is drawn uniform in +-sqrt(1/fan_in); the output
    layer (weights and biases) is then multiplied by ``output_scale``.
    Scaling the output layer down by 100x is the initialization mitigation
    for the step-size resonance pathology.
    """
    if len(widths) < 2:
        raise ConfigError("need at least input and output widths")
    if output_scale <= 0:
        raise ConfigError("output_scale must be positive")
    rng = np.random.default_rng(seed)
    layers = []
    last = len(widths) - 2
    for i, (fan_in, fan_out) in enumerate(zip(widths, widths[1:])):
        bound = np.sqrt(1.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = rng.uniform(-bound, bound, size=fan_out)
        if i == last:
            w = w * output_scale
            b = b * output_scale
        act = ACT_LINEAR if i == last else ACT_SILU
        layers.append(Layer(Tensor(w), Tensor(b), act))
    return Mlp(layers)


class ParamStore:
    """Named registry of trainable leaves with shared Adam state.

    The step count is shared across all leaves; each leaf keeps its own
    first/second moment arrays.  ``adam_step`` consumes and zeroes the
    gradients.
    """

    def __init__(self):
        self._leaves: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step = 0

    def register(self, name: str, leaf: Tensor) -> Tensor:
        if name in self._leaves:
            raise ConfigError(f"leaf '{name}' already registered")
        leaf.requires_grad = True
        self._leaves[name] = leaf
        self._m[name] = np.zeros_like(leaf.data)
        self._v[name] = np.zeros_like(leaf.data)
        return leaf

    def __contains__(self, name: str) -> bool:
        return name in self._leaves

    def __getitem__(self, name: str) -> Tensor:
        return self._leaves[name]

    def names(self) -> list[str]:
        return list(self._leaves)

    def grad(self, name: str) -> np.ndarray:
        g = self._leaves[name].grad
        if g is None:
            return np.zeros_like(self._leaves[name].data)
        return g

    def zero_grad(self) -> None:
        for leaf in self._leaves.values():
            leaf.grad = None

    def adam_step(
        self,
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.step += 1
        t = self.step
        c1 = 1.0 - beta1**t
        c2 = 1.0 - beta2**t
        for name, leaf in self._leaves.items():
            g = leaf.grad
            if g is None:
                g = np.zeros_like(leaf.data)
            elif not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in leaf '{name}'")
            m = self._m[name]
            v = self._v[name]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * (g * g)
            leaf.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        self.zero_grad()

    def state_dict(self) -> dict:
        return {
            "step": self.step,
            "m": {k: v.tolist() for k, v in self._m.items()},
            "v": {k: v.tolist() for k, v in self._v.items()},
        }

    def load_state_dict(self, d: dict) -> None:
        self.step = d["step"]
        for k in self._leaves:
            if k in d["m"]:
                self._m[k] = np.asarray(d["m"][k], dtype=np.float64).reshape(
                    self._leaves[k].data.shape
                )
                self._v[k] = np.asarray(d["v"][k], dtype=np.float64).reshape(
                    self._leaves[k].data.shape
                )
