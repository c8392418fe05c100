"""Training loop: semi-teacher-forced rollouts, masked MSE, trainable ICs.

During training, predictions are generated by iterating each trajectory's
time grid through the RK4 step; after every key time the observed channels
of the running state are overwritten with their measurements (teacher
forcing) while unobserved channels keep the model's own prediction.  At
inference time the rollout is purely autoregressive.

Trajectories whose first key time does not measure every channel get
trainable initial-condition entries for the missing channels; channels
measured at the start stay clamped to their measurements and receive no
gradient.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, mask_mix, stack, take_rows, tsum
from .data import (
    Batch,
    CHUNKING_MODES,
    TimeGrid,
    Trajectory,
    chunk_gap,
    key_schedule,
    make_batches,
    plan_time_grid,
)
from .errors import ConfigError, NumericError, RolloutError
from .model import (
    ChannelScaling,
    LearnedRhs,
    PARAM_NAMES,
    STATE_DIM,
    rk4_step,
)
from .nn import ParamStore, init_weights

MODES = ("TEACHER_FORCED_TRAIN", "AUTOREGRESSIVE_INFER")


@dataclass(frozen=True)
class RolloutConfig:
    mode: str = "TEACHER_FORCED_TRAIN"
    max_dt: float = 0.1
    chunking: str = "GREEDY"
    epochs: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    output_scale: float = 1.0
    hidden: tuple[int, ...] = (64, 64)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    holdout_fraction: float = 0.0
    lr_min_fraction: float = 1.0  # cosine-decay floor; 1.0 keeps lr constant

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.max_dt <= 0:
            raise ConfigError("max_dt must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.chunking not in CHUNKING_MODES:
            raise ConfigError(f"chunking must be one of {CHUNKING_MODES}")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must be in [0, 1)")
        if not 0.0 < self.lr_min_fraction <= 1.0:
            raise ConfigError("lr_min_fraction must be in (0, 1]")

    def lr_at(self, epoch: int) -> float:
        if self.lr_min_fraction >= 1.0 or self.epochs <= 1:
            return self.lr
        span = 0.5 * (1.0 + np.cos(np.pi * epoch / (self.epochs - 1)))
        floor = self.lr * self.lr_min_fraction
        return floor + (self.lr - floor) * span


@dataclass
class TrainableIc:
    """Per-trajectory start states, learnable only where unobserved at t=0."""

    ids: np.ndarray        # [n] trajectory ids
    leaf: Tensor           # [n, C] scaled-space values for unclamped channels
    clamp: np.ndarray      # [n, C] 1 where the channel was measured at the first key
    measured: np.ndarray   # [n, C] scaled measurements (0 where unclamped)
    row_of: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.row_of:
            self.row_of = {int(t): r for r, t in enumerate(self.ids)}

    @property
    def any_trainable(self) -> bool:
        return bool(np.any(self.clamp == 0.0))

    def assemble(self, traj_ids: np.ndarray) -> Tensor:
        rows = np.array([self.row_of[int(t)] for t in traj_ids])
        return mask_mix(take_rows(self.leaf, rows), self.measured[rows], self.clamp[rows])

    def learned_physical(self, traj_id: int, scaling: ChannelScaling) -> np.ndarray:
        r = self.row_of[int(traj_id)]
        scaled = self.leaf.data[r] * (1.0 - self.clamp[r]) + self.measured[r] * self.clamp[r]
        return scaling.unscale_state(scaled)


@dataclass
class OdeNetModel:
    """Learned RHS plus everything the optimizer owns."""

    rhs: LearnedRhs
    store: ParamStore
    ics: TrainableIc | None
    seed: int

    def leaf_values(self) -> dict[str, np.ndarray]:
        return {k: self.store[k].data.copy() for k in self.store.names()}


def mlp_widths(system: str, composer: str, hidden: tuple[int, ...]) -> list[int]:
    dim = STATE_DIM[system]
    n_p = len(PARAM_NAMES[system])
    if composer == "GRAY_FUNCTIONAL":
        if system == "URP":
            return [dim + n_p, *hidden, 1]
        return [dim, *hidden, 3]
    return [dim + n_p, *hidden, dim]


def _derive_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence((seed, *tags)).generate_state(1, np.uint64)[0] & 0x7FFFFFFF)


def build_model(
    system: str,
    composer: str,
    config: RolloutConfig,
    corpus: list[Trajectory],
    kappa_trainable: tuple[str, ...] = (),
    kappa_init: dict[str, float] | None = None,
    f_wb=None,
    normalize_channels: bool | None = None,
    base_params=None,
) -> OdeNetModel:
    """Initialize network, scaling, experimental parameters and IC table."""
    if normalize_channels is None:
        normalize_channels = system == "BF"
    dim = STATE_DIM[system]
    scaling = (
        ChannelScaling.from_corpus(corpus, dim)
        if normalize_channels
        else ChannelScaling.identity(dim)
    )
    mlp = init_weights(mlp_widths(system, composer, config.hidden), config.seed, config.output_scale)
    rhs = LearnedRhs(
        mlp,
        composer,
        system,
        kappa_values=kappa_init,
        kappa_trainable=kappa_trainable,
        f_wb=f_wb,
        scaling=scaling,
        system_params=base_params,
    )
    store = ParamStore()
    for name, leaf in rhs.leaves().items():
        store.register(name, leaf)
    ics = _build_ic_table(corpus, dim, scaling)
    if ics.any_trainable:
        store.register("trainable_ic", ics.leaf)
    return OdeNetModel(rhs=rhs, store=store, ics=ics, seed=config.seed)


def _build_ic_table(corpus: list[Trajectory], dim: int, scaling: ChannelScaling) -> TrainableIc:
    n = len(corpus)
    clamp = np.zeros((n, dim))
    measured = np.zeros((n, dim))
    ids = np.zeros(n, dtype=np.intp)
    for r, traj in enumerate(corpus):
        ids[r] = traj.id
        _, observed = key_schedule(traj)
        for c, v in observed[0].items():
            clamp[r, c] = 1.0
            measured[r, c] = (v - scaling.lo[c]) / scaling.span[c]
    # unclamped channels start at the scaled-space origin (the channel minimum)
    leaf = Tensor(np.zeros((n, dim)))
    return TrainableIc(ids=ids, leaf=leaf, clamp=clamp, measured=measured)


# -- rollout and loss -----------------------------------------------------------


def _gap_step_matrices(batch: Batch, grids: dict[int, "TimeGrid"]) -> list[np.ndarray]:
    """Per key gap, the [B, S] sub-step lengths, zero-padded row-wise."""
    subs = [grids[int(t)].substeps for t in batch.traj_ids]
    k_max = batch.values.shape[1]
    out = []
    for k in range(k_max - 1):
        widths = [len(s[k]) if k < len(s) else 0 for s in subs]
        s_max = max(widths)
        if s_max == 0:
            out.append(np.zeros((len(subs), 1)))
            continue
        mat = np.zeros((len(subs), s_max))
        for r, s in enumerate(subs):
            if k < len(s):
                mat[r, : len(s[k])] = s[k]
        out.append(mat)
    return out


def rollout(
    model: OdeNetModel,
    batch: Batch,
    gap_steps: list[np.ndarray],
    mode: str = "TEACHER_FORCED_TRAIN",
    ics: Tensor | None = None,
) -> Tensor:
    """Predicted values at the batch's key times, [B, K, C], scaled space.

    ``batch.values``/``obs_mask`` must already be in scaled space.  In
    teacher-forced mode every observed channel of the running state is
    overwritten with its measurement after the prediction is recorded.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    teacher = mode == "TEACHER_FORCED_TRAIN"
    f = model.rhs.bound(batch.params if batch.params.shape[1] else None)
    state = ics if ics is not None else model.ics.assemble(batch.traj_ids)
    preds = [state]
    if teacher:
        state = mask_mix(state, batch.values[:, 0, :], batch.obs_mask[:, 0, :])
    k_max = batch.values.shape[1]
    for k in range(1, k_max):
        mat = gap_steps[k - 1]
        for j in range(mat.shape[1]):
            state = rk4_step(f, state, mat[:, j : j + 1])
        if not np.all(np.isfinite(state.data)):
            bad = int(np.argmin(np.all(np.isfinite(state.data), axis=1)))
            raise RolloutError(
                f"non-finite state for trajectory {batch.traj_ids[bad]} "
                f"near t={batch.times[bad, k]:.6g}",
                trajectory=int(batch.traj_ids[bad]),
                time=float(batch.times[bad, k]),
                step=k,
            )
        preds.append(state)
        if teacher:
            state = mask_mix(state, batch.values[:, k, :], batch.obs_mask[:, k, :])
    return stack(preds, axis=1)


def masked_mse(preds: Tensor, batch: Batch) -> Tensor:
    """Mean squared error over observed channel values only.

    The mean is over the number of measured (trajectory, time, channel)
    entries; padded and unobserved entries contribute exactly zero.
    """
    n_data = batch.n_data
    if n_data == 0:
        raise ValueError("batch has no observed entries")
    diff = (preds - batch.values) * batch.obs_mask
    return tsum(diff * diff) * (1.0 / n_data)


def _scaled_batches(trajs, batch_size, seed, dim, param_names, scaling):
    batches = make_batches(trajs, batch_size, seed, n_channels=dim, param_names=param_names)
    if not scaling.is_identity():
        for b in batches:
            b.values = (b.values - scaling.lo) / scaling.span * b.obs_mask
    return batches


def train(model: OdeNetModel, corpus: list[Trajectory], config: RolloutConfig) -> list[float]:
    """Optimize weights, trainable kappa and trainable ICs; returns epoch losses.

    Each epoch reshuffles the batches; RANDOM chunking re-randomizes the
    solver sub-steps every epoch.  Deterministic for a fixed config.
    """
    if not corpus:
        raise ConfigError("corpus is empty")
    trajs = corpus
    if config.holdout_fraction > 0:
        rng = np.random.default_rng(_derive_seed(config.seed, 5))
        order = rng.permutation(len(corpus))
        keep = int(round(len(corpus) * (1.0 - config.holdout_fraction)))
        trajs = [corpus[i] for i in order[:keep]]
    dim = model.rhs.dim
    param_names = model.rhs.param_names
    scaling = model.rhs.scaling
    grids = None
    if config.chunking != "RANDOM":
        grids = {
            t.id: plan_time_grid(t, config.max_dt, config.chunking, seed=_derive_seed(config.seed, 7))
            for t in trajs
        }
    history = []
    for epoch in range(config.epochs):
        if config.chunking == "RANDOM":
            grids = {
                t.id: plan_time_grid(t, config.max_dt, "RANDOM", seed=_derive_seed(config.seed, 7, epoch))
                for t in trajs
            }
        batches = _scaled_batches(
            trajs, config.batch_size, _derive_seed(config.seed, 3, epoch), dim, param_names, scaling
        )
        sq_sum = 0.0
        n_sum = 0
        for b_idx, batch in enumerate(batches):
            gap_steps = _gap_step_matrices(batch, grids)
            preds = rollout(model, batch, gap_steps, mode="TEACHER_FORCED_TRAIN")
            loss = masked_mse(preds, batch)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(f"loss diverged at epoch {epoch}, batch {b_idx}")
            ad.backward(loss)
            model.store.adam_step(config.lr_at(epoch), config.beta1, config.beta2, config.eps)
            sq_sum += value * batch.n_data
            n_sum += batch.n_data
        history.append(sq_sum / n_sum)
    return history


# -- inference -------------------------------------------------------------------


def infer_trajectory(
    model: OdeNetModel | LearnedRhs,
    ic: np.ndarray,
    params: np.ndarray | None,
    t_eval: np.ndarray,
    max_dt: float,
    chunking: str = "GREEDY",
    seed: int = 0,
    dense: bool = False,
):
    """Autoregressive rollout from a physical-space initial condition.

    ``ic`` may be [C] or [N, C] (batched starts sharing t_eval); the result
    is [T, C] or [N, T, C] in physical units.  With ``dense=True`` returns
    ``(times, states)`` including every solver sub-step, which is how the
    step-pattern (zig-zag) diagnostics sample a model.
    """
    rhs = model.rhs if isinstance(model, OdeNetModel) else model
    t_eval = np.asarray(t_eval, dtype=np.float64)
    if t_eval.ndim != 1 or (t_eval.size > 1 and np.any(np.diff(t_eval) <= 0)):
        raise ConfigError("t_eval must be strictly increasing")
    ic = np.asarray(ic, dtype=np.float64)
    squeeze = ic.ndim == 1
    ic2 = np.atleast_2d(ic)
    n = ic2.shape[0]
    if params is not None:
        params = np.atleast_2d(np.asarray(params, dtype=np.float64))
        if params.shape[0] == 1 and n > 1:
            params = np.broadcast_to(params, (n, params.shape[1])).copy()
    rng = np.random.default_rng(seed)
    f = rhs.bound(params)
    with ad.no_grad():
        state = Tensor(rhs.scaling.scale_state(ic2))
        states = [state.data]
        times = [t_eval[0]]
        key_flags = [True]
        for t_prev, t_next in zip(t_eval, t_eval[1:]):
            steps = chunk_gap(t_next - t_prev, max_dt, chunking, rng)
            t = t_prev
            for j, dt in enumerate(steps):
                state = rk4_step(f, state, dt)
                if not np.all(np.isfinite(state.data)):
                    raise RolloutError(
                        f"non-finite state near t={t + dt:.6g}", time=float(t + dt), step=j
                    )
                t += dt
                states.append(state.data)
                times.append(t)
                key_flags.append(j == len(steps) - 1)
    states = np.stack(states, axis=1)  # [N, T_all, C]
    states = rhs.scaling.unscale_state(states)
    if dense:
        if squeeze:
            return np.array(times), states[0]
        return np.array(times), states
    keys = np.array(key_flags)
    out = states[:, keys, :]
    return out[0] if squeeze else out


# -- checkpointing ------------------------------------------------------------------


def save_checkpoint(path, model: OdeNetModel, meta: dict | None = None) -> None:
    """Self-describing JSON checkpoint; floats round-trip bit-exactly."""
    opt = model.store.state_dict()
    doc = {
        "format": "odenet-checkpoint-v1",
        "seed": model.seed,
        "rhs": model.rhs.to_dict(),
        "trainable_ic": None,
        "optimizer": {
            "step": opt["step"],
            "m": {k: opt["m"][k] for k in sorted(opt["m"])},
            "v": {k: opt["v"][k] for k in sorted(opt["v"])},
        },
        "meta": meta or {},
    }
    if model.ics is not None:
        doc["trainable_ic"] = {
            "ids": model.ics.ids.tolist(),
            "values": model.ics.leaf.data.tolist(),
            "clamp": model.ics.clamp.tolist(),
            "measured": model.ics.measured.tolist(),
        }
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_checkpoint(path, f_wb=None) -> OdeNetModel:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "odenet-checkpoint-v1":
        raise ConfigError(f"not an odenet checkpoint: {path}")
    rhs = LearnedRhs.from_dict(doc["rhs"], f_wb=f_wb)
    store = ParamStore()
    for name, leaf in rhs.leaves().items():
        store.register(name, leaf)
    ics = None
    if doc["trainable_ic"] is not None:
        d = doc["trainable_ic"]
        ics = TrainableIc(
            ids=np.asarray(d["ids"], dtype=np.intp),
            leaf=Tensor(np.asarray(d["values"], dtype=np.float64)),
            clamp=np.asarray(d["clamp"], dtype=np.float64),
            measured=np.asarray(d["measured"], dtype=np.float64),
        )
        if ics.any_trainable:
            store.register("trainable_ic", ics.leaf)
    model = OdeNetModel(rhs=rhs, store=store, ics=ics, seed=doc["seed"])
    model.store.load_state_dict(doc["optimizer"])
    return model
