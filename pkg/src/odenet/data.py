"""Corpus generation, time-grid planning, batching and serialization.

A corpus is a list of trajectories.  Each trajectory carries per-time-point
partial channel measurements plus fixed per-trajectory parameters (the
Damkohler number for the CSTR system).  Measurement pathologies are
controlled by :class:`PathologySpec`: fixed vs gamma-distributed sampling
intervals, full vs per-channel observation grids, and withheld initial
conditions.

Key time points are where at least one channel is measured (loss evaluated
there); solver time points are extra sub-steps inserted so no integration
step exceeds the solver cap.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, CorpusFormatError, IntegrationError
from .systems import TruthSystem, make_system, reference_integrate

SAMPLING_MODES = ("FIXED", "GAMMA")
OBSERVATION_MODES = ("FULL", "PER_CHANNEL")
CHUNKING_MODES = ("GREEDY", "UNIFORM", "RANDOM")

_GAP_EPS = 1e-12


@dataclass(frozen=True)
class Observation:
    t: float
    channels: dict[int, float]  # channel index -> measured value; absent = unobserved


@dataclass
class Trajectory:
    id: int
    params: dict[str, float]
    observations: list[Observation]
    ic_given: bool
    true_x0: np.ndarray | None = None  # oracle scoring only; never fed to training

    def times(self) -> np.ndarray:
        return np.array([o.t for o in self.observations])


@dataclass(frozen=True)
class PathologySpec:
    mean_dt: float | tuple[float, ...] = 0.1
    sampling: str = "FIXED"
    gamma_shape: float = 4.0
    observation: str = "FULL"
    withhold_ic: bool = False
    horizon: float = 10.0
    n_trajectories: int = 100
    ic_box: tuple[tuple[float, float], ...] = ((0.0, 1.0), (0.0, 6.0))
    param_ranges: dict[str, tuple[float, float]] = field(default_factory=dict)
    noise_std: float = 0.0
    ic_settle: float = 0.0  # pre-evolve sampled ICs onto the attractor tube

    def __post_init__(self):
        if self.sampling not in SAMPLING_MODES:
            raise ConfigError(f"sampling must be one of {SAMPLING_MODES}")
        if self.observation not in OBSERVATION_MODES:
            raise ConfigError(f"observation must be one of {OBSERVATION_MODES}")
        means = np.atleast_1d(np.asarray(self.mean_dt, dtype=np.float64))
        if np.any(means <= 0):
            raise ConfigError("mean_dt must be positive")
        if self.gamma_shape <= 0:
            raise ConfigError("gamma_shape must be positive")
        if self.horizon <= float(means.mean()):
            raise ConfigError("horizon must exceed the mean sampling interval")
        if self.n_trajectories < 1:
            raise ConfigError("need at least one trajectory")
        if self.ic_settle < 0:
            raise ConfigError("ic_settle must be non-negative")

    def channel_mean_dt(self, channel: int, n_channels: int) -> float:
        means = np.atleast_1d(np.asarray(self.mean_dt, dtype=np.float64))
        if means.size == 1:
            return float(means[0])
        if means.size != n_channels:
            raise ConfigError(
                f"mean_dt has {means.size} entries for {n_channels} channels"
            )
        return float(means[channel])


def sample_times(mean_dt: float, mode: str, gamma_shape: float, horizon: float, rng) -> np.ndarray:
    """Sampling times in [0, horizon], always including t=0.

    FIXED: exact multiples of mean_dt.  GAMMA: cumulative sums of gamma
    draws with the requested mean (shape k, scale mean/k).
    """
    if mode == "FIXED":
        n = int(np.floor(horizon / mean_dt + 1e-9))
        return np.arange(n + 1) * mean_dt
    ts = [0.0]
    t = 0.0
    while True:
        t += rng.gamma(gamma_shape, mean_dt / gamma_shape)
        if t > horizon:
            break
        ts.append(t)
    return np.array(ts)


def generate_corpus(system: TruthSystem, spec: PathologySpec, seed: int) -> list[Trajectory]:
    """Simulate trajectories with the requested sampling pathologies.

    Per trajectory: the initial condition is drawn uniformly from the IC
    box and per-trajectory parameters uniformly from their ranges, states
    are computed by the reference integrator at the union of all channel
    sampling times, and each channel is kept only at its own times.  When
    initial conditions are withheld the t=0 observation is dropped
    entirely.  Deterministic given the seed; trajectories that fail to
    integrate are skipped with a warning.
    """
    if len(spec.ic_box) != system.dim:
        raise ConfigError(
            f"ic_box has {len(spec.ic_box)} channels for a {system.dim}-dimensional system"
        )
    trajectories = []
    skipped = 0
    for i in range(spec.n_trajectories):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
        x0 = np.array([rng.uniform(lo, hi) for lo, hi in spec.ic_box])
        params = {
            name: float(rng.uniform(lo, hi))
            for name, (lo, hi) in sorted(spec.param_ranges.items())
        }
        sys_i = system.with_params(**params) if params else system
        if spec.ic_settle > 0:
            try:
                x0 = reference_integrate(sys_i, x0, np.array([0.0, spec.ic_settle]))[-1]
            except IntegrationError:
                skipped += 1
                continue
        if spec.observation == "FULL":
            shared = sample_times(
                spec.channel_mean_dt(0, system.dim), spec.sampling, spec.gamma_shape,
                spec.horizon, rng,
            )
            channel_times = [shared] * system.dim
        else:
            channel_times = [
                sample_times(
                    spec.channel_mean_dt(c, system.dim), spec.sampling,
                    spec.gamma_shape, spec.horizon, rng,
                )
                for c in range(system.dim)
            ]
        observed_at: dict[float, list[int]] = {}
        for c, ts in enumerate(channel_times):
            for t in ts:
                observed_at.setdefault(float(t), []).append(c)
        union = np.array(sorted(observed_at))
        try:
            states = reference_integrate(sys_i, x0, union)
        except IntegrationError:
            skipped += 1
            continue
        observations = []
        for k, t in enumerate(union):
            if spec.withhold_ic and t == 0.0:
                continue
            channels = {}
            for c in observed_at[t]:
                value = float(states[k, c])
                if spec.noise_std > 0:
                    value += float(rng.normal(0.0, spec.noise_std))
                channels[c] = value
            observations.append(Observation(float(t), channels))
        trajectories.append(
            Trajectory(
                id=i,
                params=params,
                observations=observations,
                ic_given=not spec.withhold_ic,
                true_x0=x0,
            )
        )
    if skipped:
        warnings.warn(f"skipped {skipped} trajectories that failed to integrate")
    return trajectories


# -- time grids -------------------------------------------------------------


def chunk_gap(gap: float, max_dt: float, mode: str, rng=None) -> list[float]:
    """Split one key-time gap into solver sub-steps, none exceeding max_dt.

    GREEDY walks in steps of exactly max_dt and finishes with the
    remainder (a gap of 8.333 under a cap of 5 becomes [5, 3.333]).
    UNIFORM uses ceil(gap/max_dt) equal parts.  RANDOM draws steps uniform
    in (0.2*max_dt, max_dt] until the remainder fits under the cap.
    """
    if max_dt <= 0:
        raise ConfigError("max_dt must be positive")
    if mode not in CHUNKING_MODES:
        raise ConfigError(f"chunking must be one of {CHUNKING_MODES}")
    if gap <= max_dt + _GAP_EPS:
        return [gap]
    if mode == "GREEDY":
        steps = []
        remaining = gap
        while remaining > max_dt + _GAP_EPS:
            steps.append(max_dt)
            remaining -= max_dt
        steps.append(remaining)
        return steps
    if mode == "UNIFORM":
        n = int(np.ceil(gap / max_dt - _GAP_EPS))
        return [gap / n] * n
    steps = []
    remaining = gap
    while remaining > max_dt + _GAP_EPS:
        step = rng.uniform(0.2 * max_dt, max_dt)
        steps.append(step)
        remaining -= step
    steps.append(remaining)
    return steps


def key_schedule(traj: Trajectory, start_time: float = 0.0):
    """Key times and the observed channel map at each, for one trajectory.

    The rollout start is always a key time; when the initial condition was
    withheld it appears with an empty observed set.
    """
    times = [start_time]
    observed: list[dict[int, float]] = [{}]
    for obs in traj.observations:
        if obs.t == start_time:
            observed[0] = dict(obs.channels)
        else:
            times.append(obs.t)
            observed.append(dict(obs.channels))
    return np.array(times), observed


@dataclass
class TimeGrid:
    """Merged key/solver time points for one trajectory rollout."""

    times: np.ndarray        # all grid times, strictly increasing
    is_key: np.ndarray       # bool mask over times
    observed: list[dict[int, float]]  # one entry per key time, in order
    substeps: list[np.ndarray]        # per key gap, the solver step lengths

    @property
    def key_times(self) -> np.ndarray:
        return self.times[self.is_key]


def plan_time_grid(
    traj: Trajectory,
    max_dt: float,
    chunking: str = "GREEDY",
    seed: int = 0,
    start_time: float = 0.0,
) -> TimeGrid:
    key_times, observed = key_schedule(traj, start_time)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(traj.id,)))
    times = [key_times[0]]
    is_key = [True]
    substeps = []
    for t_prev, t_next in zip(key_times, key_times[1:]):
        steps = np.array(chunk_gap(t_next - t_prev, max_dt, chunking, rng))
        interior = t_prev + np.cumsum(steps)
        interior[-1] = t_next  # pin the endpoint against float drift
        times.extend(interior)
        is_key.extend([False] * (len(steps) - 1) + [True])
        substeps.append(steps)
    return TimeGrid(np.array(times), np.array(is_key), observed, substeps)


# -- batching ----------------------------------------------------------------


@dataclass
class Batch:
    traj_ids: np.ndarray      # [B]
    values: np.ndarray        # [B, K, C] measured values (0 where unobserved)
    obs_mask: np.ndarray      # [B, K, C] 1 where measured
    times: np.ndarray         # [B, K] key times; padding repeats the final real time
    pad_mask: np.ndarray      # [B, K] 1 for real key entries
    params: np.ndarray        # [B, P]

    @property
    def n_data(self) -> int:
        return int(self.obs_mask.sum())


def _batch_from(trajs: list[Trajectory], n_channels: int, param_names: tuple[str, ...]) -> Batch:
    schedules = [key_schedule(t) for t in trajs]
    k_max = max(len(s[0]) for s in schedules)
    b = len(trajs)
    values = np.zeros((b, k_max, n_channels))
    obs_mask = np.zeros((b, k_max, n_channels))
    times = np.zeros((b, k_max))
    pad_mask = np.zeros((b, k_max))
    params = np.zeros((b, len(param_names)))
    for r, (traj, (key_times, observed)) in enumerate(zip(trajs, schedules)):
        k = len(key_times)
        times[r, :k] = key_times
        times[r, k:] = key_times[-1]
        pad_mask[r, :k] = 1.0
        for j, channels in enumerate(observed):
            for c, v in channels.items():
                values[r, j, c] = v
                obs_mask[r, j, c] = 1.0
        for p, name in enumerate(param_names):
            params[r, p] = traj.params[name]
    return Batch(
        traj_ids=np.array([t.id for t in trajs]),
        values=values,
        obs_mask=obs_mask,
        times=times,
        pad_mask=pad_mask,
        params=params,
    )


def corpus_channel_count(trajs: list[Trajectory]) -> int:
    n = 0
    for t in trajs:
        for o in t.observations:
            if o.channels:
                n = max(n, max(o.channels) + 1)
        if t.true_x0 is not None:
            n = max(n, len(t.true_x0))
    return n


def make_batches(
    trajs: list[Trajectory],
    batch_size: int,
    seed: int,
    n_channels: int | None = None,
    param_names: tuple[str, ...] | None = None,
) -> list[Batch]:
    """Shuffle the corpus and pad it into fixed-size batches."""
    if not trajs:
        raise ConfigError("cannot batch an empty corpus")
    if n_channels is None:
        n_channels = corpus_channel_count(trajs)
    if param_names is None:
        param_names = tuple(sorted(trajs[0].params))
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(trajs))
    return [
        _batch_from([trajs[i] for i in order[lo : lo + batch_size]], n_channels, param_names)
        for lo in range(0, len(trajs), batch_size)
    ]


# -- serialization --------------------------------------------------------------


def save_corpus(trajs: list[Trajectory], path) -> None:
    """One JSON document per line; floats round-trip bit-exactly."""
    with open(path, "w") as fh:
        for t in trajs:
            doc = {
                "id": t.id,
                "params": {k: t.params[k] for k in sorted(t.params)},
                "ic_given": t.ic_given,
                "observations": [
                    {"t": o.t, "c": {str(c): o.channels[c] for c in sorted(o.channels)}}
                    for o in t.observations
                ],
            }
            if t.true_x0 is not None:
                doc["true_x0"] = [float(v) for v in t.true_x0]
            fh.write(json.dumps(doc) + "\n")


def load_corpus(path) -> list[Trajectory]:
    trajs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                traj = Trajectory(
                    id=doc["id"],
                    params={k: float(v) for k, v in doc["params"].items()},
                    observations=[
                        Observation(float(o["t"]), {int(c): float(v) for c, v in o["c"].items()})
                        for o in doc["observations"]
                    ],
                    ic_given=doc["ic_given"],
                    true_x0=np.array(doc["true_x0"]) if "true_x0" in doc else None,
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
                raise CorpusFormatError(f"malformed corpus line {lineno}: {err}", line=lineno) from err
            trajs.append(traj)
    return trajs


def generate_named(system_tag: str, spec: PathologySpec, seed: int, **base_params) -> list[Trajectory]:
    return generate_corpus(make_system(system_tag, **base_params), spec, seed)
