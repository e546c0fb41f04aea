"""Round-by-round federated training with partial pruning and personalization.

Each round samples a channel, allocates bandwidth and pruning ratios, trains
every participating device (personalized steps, probe steps, mask, masked
global steps) and aggregates the uploaded global coordinates on the server.
"""

import logging
import math
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from fedprune.allocator import (
    AllocationError,
    AllocationInstance,
    RoundAllocation,
    build_instance,
    equal_allocation,
    solve_bandwidth,
)
from fedprune.data import (
    LabeledDataset,
    load_idx,
    partition_noniid,
    split_by_labels,
    synth_blobs,
    train_test_split,
)
from fedprune.fileio import atomic_write_csv
from fedprune.model import (
    Architecture,
    PartitionedModel,
    PruningMask,
    apply_mask,
    build_mask,
    forward_loss,
    global_step,
    global_step_masked,
    importance_scores,
    initialize,
    joint_step,
    personalized_step,
    predict,
    pruned_count,
)
from fedprune.presets import build_architecture
from fedprune.wireless import (
    ChannelState,
    DeviceProfile,
    LatencyBreakdown,
    db_to_linear,
    dbm_to_watts,
    latency_breakdown,
    round_latency,
    sample_channel,
)

logger = logging.getLogger(__name__)

# Independent RNG streams derived from the experiment seed.
_CHANNEL_STREAM = 0
_BATCH_STREAM = 1
_INIT_STREAM = 2
_CPU_STREAM = 3
_DATA_STREAM = 4
_PARTITION_STREAM = 5
_SPLIT_STREAM = 6

DEADLINE_TOLERANCE_S = 1e-9


class SimulationError(Exception):
    """Raised when a round cannot be executed."""
    pass


class ExperimentError(SimulationError):
    """One or more rounds failed; ``metrics`` holds the rounds that completed."""

    def __init__(self, errors: list[SimulationError], metrics: list["RoundMetrics"]):
        self.errors = errors
        self.metrics = metrics
        super().__init__(f"{len(errors)} round(s) failed: " + "; ".join(str(e) for e in errors))


class Mode(str, Enum):
    PROPOSED = "proposed"
    EQUAL_RESOURCE_PRUNING = "equal_resource_pruning"
    PERSONALIZATION_ONLY = "personalization_only"
    PRUNING_ONLY = "pruning_only"


class Schedule(str, Enum):
    ALTERNATING = "alternating"
    SIMULTANEOUS = "simultaneous"


class DatasetConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["synth", "idx"] = "synth"
    images_path: Path | None = None
    labels_path: Path | None = None
    classes: int = Field(10, ge=1)
    per_class: int = Field(200, ge=1)
    dims: int = Field(784, ge=1)
    std: float = Field(0.3, ge=0)

    @model_validator(mode="after")
    def _idx_needs_paths(self):
        if self.kind == "idx" and (self.images_path is None or self.labels_path is None):
            raise ValueError("idx datasets need images_path and labels_path")
        return self


class ExperimentConfig(BaseModel):
    """Experiment parameters; radio quantities are given in dBm/dB and converted on access."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    k_devices: int = Field(10, ge=1)
    rounds: int = Field(50, ge=0)
    tau_v: int = Field(10, ge=1)
    tau_u: int = Field(10, ge=1)
    tau_u_probe: int = Field(1, ge=1)
    eta_u: float = Field(0.001, ge=0)
    eta_v: float = Field(0.001, ge=0)
    batch_size: int = Field(128, ge=1)
    latency_threshold_s: float = Field(0.025, gt=0)
    bandwidth_hz: float = Field(20e6, gt=0)
    q_bits: float = Field(32, gt=0)
    transmit_power_dbm: float = 28.0
    noise_power_dbm: float = -110.0
    cpu_frequency_hz: float = Field(3e9, gt=0)
    cpu_frequency_spread: float = Field(0.0, ge=0, lt=1)
    cycles_per_weight: float = Field(20.0, gt=0)
    # Calibration that puts the unpruned cnn round near twice the 25 ms deadline; not a path loss.
    mean_gain_db: float = 664.0
    seed: int = Field(0, ge=0)
    mode: Mode = Mode.PROPOSED
    schedule: Schedule = Schedule.ALTERNATING
    fixed_pruning_ratio: float | None = Field(None, ge=0, le=1)
    architecture: str = "cnn"
    labels_per_device: int = Field(2, ge=1)
    test_fraction: float = Field(0.2, gt=0, lt=1)
    eval_samples: int = Field(512, ge=1)
    accuracy: Literal["device", "pooled"] = "device"
    workers: int = Field(1, ge=1)
    dataset: DatasetConfig = DatasetConfig()

    @property
    def transmit_power_w(self) -> float:
        return dbm_to_watts(self.transmit_power_dbm)

    @property
    def noise_power_w(self) -> float:
        return dbm_to_watts(self.noise_power_dbm)

    @property
    def mean_gain(self) -> float:
        return db_to_linear(self.mean_gain_db)


class DeviceRound(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    device: int = Field(ge=0)
    bandwidth_fraction: float = Field(ge=0, le=1)
    pruning_ratio: float = Field(ge=0, le=1)
    latency_s: float = Field(ge=0, allow_inf_nan=False)
    retained_weights: int = Field(ge=0)
    skipped: bool = False
    deadline_met: bool = True


class RoundMetrics(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    round: int = Field(ge=0)
    mode: Mode
    global_loss: float
    test_loss: float
    test_accuracy: float = Field(ge=0, le=1)
    round_latency_s: float = Field(ge=0, allow_inf_nan=False)
    communicated_weights: int = Field(ge=0)
    min_retention: int = Field(ge=0)
    deadline_violations: int = Field(0, ge=0)
    per_device: list[DeviceRound]

    @model_validator(mode="after")
    def _consistent(self):
        active = [d for d in self.per_device if not d.skipped]
        if not active:
            raise ValueError("round has no participating device")
        if self.round_latency_s != max(d.latency_s for d in active):
            raise ValueError("round_latency_s must equal the slowest participating device")
        if self.communicated_weights != sum(d.retained_weights for d in active):
            raise ValueError("communicated_weights must equal the retained weights of participating devices")
        return self


@dataclass(frozen=True, eq=False)
class DeviceState:
    profile: DeviceProfile
    train_indices: np.ndarray
    test_indices: np.ndarray
    label_set: frozenset[int]
    personalized_params: np.ndarray

    @property
    def device_id(self) -> int:
        return self.profile.device_id


@dataclass(frozen=True, eq=False)
class SimulationState:
    architecture: Architecture
    global_params: np.ndarray
    devices: tuple[DeviceState, ...]
    train: LabeledDataset
    test: LabeledDataset
    round: int = 0

    def device_model(self, device: int) -> PartitionedModel:
        return PartitionedModel(self.architecture, self.devices[device].personalized_params, self.global_params)


@dataclass(frozen=True, eq=False)
class RoundPlan:
    round: int
    channel: ChannelState
    instance: AllocationInstance
    allocation: RoundAllocation
    latencies: tuple[LatencyBreakdown, ...]
    threshold_s: float

    @property
    def participating(self) -> list[int]:
        return [k for k in range(len(self.latencies)) if k not in self.allocation.infeasible_devices]

    @property
    def round_latency_s(self) -> float:
        return round_latency([self.latencies[k].total_s for k in self.participating])

    def deadline_met(self, device: int) -> bool:
        return self.latencies[device].total_s <= self.threshold_s + DEADLINE_TOLERANCE_S


@dataclass(frozen=True, eq=False)
class DeviceUpdate:
    personalized_params: np.ndarray
    global_params: np.ndarray
    mask: PruningMask


class BatchSampler:
    """Mini-batches without replacement; reshuffles once the epoch runs out."""

    def __init__(self, size: int, batch_size: int, seed):
        if size < 1:
            raise SimulationError("cannot sample batches from an empty shard")
        self._size = size
        self._batch = min(batch_size, size)
        self._rng = np.random.default_rng(seed)
        self._order = self._rng.permutation(size)
        self._pos = 0

    def next_indices(self) -> np.ndarray:
        if self._pos + self._batch > self._size:
            self._order = self._rng.permutation(self._size)
            self._pos = 0
        chunk = self._order[self._pos:self._pos + self._batch]
        self._pos += self._batch
        return chunk


def batch_seed(seed: int, device: int, round: int) -> tuple[int, int, int, int]:
    """Seed of the mini-batch stream of one device in one round."""
    return (seed, _BATCH_STREAM, device, round)


def device_profiles(cfg: ExperimentConfig) -> list[DeviceProfile]:
    """One profile per device; CPU frequencies spread uniformly around the nominal value."""
    k = cfg.k_devices
    if cfg.cpu_frequency_spread > 0:
        rng = np.random.default_rng((cfg.seed, _CPU_STREAM))
        s = cfg.cpu_frequency_spread
        freqs = rng.uniform(cfg.cpu_frequency_hz * (1 - s), cfg.cpu_frequency_hz * (1 + s), size=k)
    else:
        freqs = np.full(k, cfg.cpu_frequency_hz)
    return [
        DeviceProfile(
            device_id=d,
            cpu_frequency_hz=float(freqs[d]),
            cycles_per_weight=cfg.cycles_per_weight,
            transmit_power_w=cfg.transmit_power_w,
            dataset_shard=d,
        )
        for d in range(k)
    ]


def load_dataset(cfg: ExperimentConfig) -> LabeledDataset:
    ds = cfg.dataset
    if ds.kind == "idx":
        return load_idx(ds.images_path, ds.labels_path, ds.classes)
    return synth_blobs((cfg.seed, _DATA_STREAM), ds.classes, ds.per_class, ds.dims, ds.std)


def model_architecture(cfg: ExperimentConfig, feature_count: int, classes: int) -> Architecture:
    arch = build_architecture(cfg.architecture, feature_count, classes)
    # Single-part pruning baseline: nothing stays on the device.
    if cfg.mode == Mode.PRUNING_ONLY:
        arch = arch.all_global()
    return arch


def build_federation(cfg: ExperimentConfig, dataset: LabeledDataset | None = None) -> SimulationState:
    """Split the data, partition it by label and initialize server and device models."""
    full = load_dataset(cfg) if dataset is None else dataset
    train, test = train_test_split(full, cfg.test_fraction, (cfg.seed, _SPLIT_STREAM))
    partition = partition_noniid(train, cfg.k_devices, cfg.labels_per_device, (cfg.seed, _PARTITION_STREAM))
    label_sets = partition.label_sets(train)
    test_indices = split_by_labels(test, label_sets)
    arch = model_architecture(cfg, train.feature_count, train.class_count)

    server = initialize(arch, (cfg.seed, _INIT_STREAM, 0))
    devices = tuple(
        DeviceState(
            profile=profile,
            train_indices=partition.indices[profile.device_id],
            test_indices=test_indices[profile.device_id],
            label_set=label_sets[profile.device_id],
            personalized_params=initialize(arch, (cfg.seed, _INIT_STREAM, profile.device_id + 1)).personalized_params,
        )
        for profile in device_profiles(cfg)
    )
    logger.info(
        "federation: %d devices, %d train / %d test samples, N_v=%d N_u=%d",
        len(devices), len(train), len(test), arch.n_personalized, arch.n_global,
    )
    return SimulationState(arch, server.global_params, devices, train, test)


def _allocate(cfg: ExperimentConfig, inst: AllocationInstance) -> RoundAllocation:
    if cfg.mode in (Mode.PROPOSED, Mode.PRUNING_ONLY):
        allocation = solve_bandwidth(inst)
    elif cfg.mode == Mode.EQUAL_RESOURCE_PRUNING:
        allocation = equal_allocation(inst)
    else:
        allocation = equal_allocation(inst, ratio=0.0)
    if cfg.fixed_pruning_ratio is not None:
        allocation = allocation.with_ratios(cfg.fixed_pruning_ratio)
    return allocation


def plan_round(cfg: ExperimentConfig, profiles: Sequence[DeviceProfile], architecture: Architecture, round: int) -> RoundPlan:
    """Channel draw, allocation and modeled per-device latency for one round, without training."""
    n_v, n_u = architecture.n_personalized, architecture.n_global
    channel = sample_channel(
        (cfg.seed, _CHANNEL_STREAM, round),
        cfg.mean_gain,
        len(profiles),
        noise_power_w=cfg.noise_power_w,
        total_bandwidth_hz=cfg.bandwidth_hz,
        round=round,
    )
    timing = dict(n_v=n_v, n_u=n_u, tau_v=cfg.tau_v, tau_u=cfg.tau_u, tau_u_probe=cfg.tau_u_probe, q_bits=cfg.q_bits)
    inst = build_instance(profiles, channel, latency_threshold_s=cfg.latency_threshold_s, **timing)
    allocation = _allocate(cfg, inst)
    latencies = tuple(
        latency_breakdown(
            dev, channel, float(allocation.fractions[k]), rho=float(allocation.pruning_ratios[k]), **timing
        )
        for k, dev in enumerate(profiles)
    )
    return RoundPlan(round, channel, inst, allocation, latencies, cfg.latency_threshold_s)


def train_device(state: SimulationState, cfg: ExperimentConfig, device: int, rho: float) -> DeviceUpdate:
    """Local phase of one device: personalized steps, probe, mask, masked global steps."""
    dev = state.devices[device]
    sampler = BatchSampler(dev.train_indices.size, cfg.batch_size, batch_seed(cfg.seed, device, state.round))

    def next_batch():
        return state.train.batch(dev.train_indices[sampler.next_indices()])

    model = state.device_model(device)
    if cfg.schedule == Schedule.ALTERNATING:
        for _ in range(cfg.tau_v):
            model = personalized_step(model, next_batch(), cfg.eta_v)

    probe = model
    for _ in range(cfg.tau_u_probe):
        probe = global_step(probe, next_batch(), cfg.eta_u)
    mask = build_mask(importance_scores(probe.global_params, model.global_params), rho)

    model = apply_mask(model.replace(global_=state.global_params), mask)
    if cfg.schedule == Schedule.ALTERNATING:
        if mask.retained:
            for _ in range(cfg.tau_u):
                model = global_step_masked(model, next_batch(), cfg.eta_u, mask)
    else:
        for i in range(max(cfg.tau_v, cfg.tau_u)):
            eta_v = cfg.eta_v if i < cfg.tau_v else 0.0
            eta_u = cfg.eta_u if i < cfg.tau_u and mask.retained else 0.0
            model = joint_step(model, next_batch(), eta_v, eta_u, mask)
    return DeviceUpdate(model.personalized_params, model.global_params, mask)


def aggregate_global(uploads: Sequence[tuple[np.ndarray, PruningMask]], previous_u: np.ndarray) -> np.ndarray:
    """Per-coordinate mean over the devices that retained it.

    Coordinates nobody retained keep ``previous_u``. When every retaining
    device uploads the same value, that value is returned unchanged.
    """
    previous = np.asarray(previous_u, dtype=np.float64)
    n = previous.size
    sums = np.zeros(n)
    counts = np.zeros(n, dtype=np.int64)
    lo = np.full(n, np.inf)
    hi = np.full(n, -np.inf)
    for u, mask in uploads:
        u = np.asarray(u, dtype=np.float64)
        if u.shape != (n,) or mask.bits.shape != (n,):
            raise SimulationError(f"upload has {u.size} values and {mask.bits.size} mask bits, expected {n}")
        bits = mask.bits
        sums += np.where(bits, u, 0.0)
        counts += bits
        lo = np.where(bits, np.minimum(lo, u), lo)
        hi = np.where(bits, np.maximum(hi, u), hi)
    mean = sums / np.maximum(counts, 1)
    return np.where(counts == 0, previous, np.where(lo == hi, lo, mean))


def retention_counts(masks: Sequence[PruningMask]) -> np.ndarray:
    return np.sum([m.bits for m in masks], axis=0, dtype=np.int64)


def evaluate(
    state: SimulationState,
    test_set: LabeledDataset | None = None,
    *,
    pooled: bool = False,
    max_samples: int | None = None,
) -> tuple[float, float]:
    """Unweighted device mean of (loss, accuracy) using each device's ``(u, v_k)``.

    Device mode scores each device on test samples of its own labels; pooled
    mode scores every device on the same shared test samples.
    """
    ts = state.test if test_set is None else test_set
    if len(ts) == 0:
        raise SimulationError("empty test set")
    shared = np.arange(len(ts))[:max_samples]
    losses, accuracies = [], []
    for k, dev in enumerate(state.devices):
        if pooled:
            idx = shared
        elif test_set is None:
            idx = dev.test_indices[:max_samples]
        else:
            idx = split_by_labels(ts, [dev.label_set])[0][:max_samples]
        if idx.size == 0:
            logger.warning("device %d has no test samples for its labels", k)
            continue
        batch = ts.batch(idx)
        model = state.device_model(k)
        losses.append(forward_loss(model, batch))
        accuracies.append(float(np.mean(predict(model, batch.inputs) == batch.labels)))
    if not losses:
        raise SimulationError("no device has test samples")
    return float(np.mean(losses)), float(np.mean(accuracies))


def training_loss(state: SimulationState, max_samples: int | None = None) -> float:
    """Mean over devices of the local training loss at ``(u, v_k)``."""
    losses = [
        forward_loss(state.device_model(k), state.train.batch(dev.train_indices[:max_samples]))
        for k, dev in enumerate(state.devices)
    ]
    return float(np.mean(losses))


def run_round(state: SimulationState, cfg: ExperimentConfig, executor: Executor | None = None) -> tuple[SimulationState, RoundMetrics]:
    g = state.round
    profiles = [dev.profile for dev in state.devices]
    try:
        plan = plan_round(cfg, profiles, state.architecture, g)
    except AllocationError as e:
        raise SimulationError(f"round {g}: {e}") from e

    participating = plan.participating
    for k in sorted(plan.allocation.infeasible_devices):
        logger.warning("round %d: device %d skipped, personalized compute exceeds %.4g s", g, k, cfg.latency_threshold_s)
    if not participating:
        raise SimulationError(f"round {g}: all devices skipped")

    def work(k: int) -> DeviceUpdate:
        return train_device(state, cfg, k, float(plan.allocation.pruning_ratios[k]))

    if executor is None:
        updates = dict(zip(participating, map(work, participating)))
    else:
        updates = dict(zip(participating, executor.map(work, participating)))

    uploads = [(updates[k].global_params, updates[k].mask) for k in participating]
    new_u = aggregate_global(uploads, state.global_params)
    devices = tuple(
        replace(dev, personalized_params=updates[k].personalized_params) if k in updates else dev
        for k, dev in enumerate(state.devices)
    )
    new_state = replace(state, global_params=new_u, devices=devices, round=g + 1)

    n_u = state.architecture.n_global
    counts = retention_counts([updates[k].mask for k in participating])
    per_device = []
    for k in range(len(state.devices)):
        skipped = k not in updates
        met = plan.deadline_met(k)
        if not skipped and not met:
            logger.warning("round %d: device %d misses the deadline (%.4g s > %.4g s)", g, k, plan.latencies[k].total_s, cfg.latency_threshold_s)
        per_device.append(DeviceRound(
            device=k,
            bandwidth_fraction=float(plan.allocation.fractions[k]),
            pruning_ratio=float(plan.allocation.pruning_ratios[k]),
            latency_s=plan.latencies[k].total_s,
            retained_weights=0 if skipped else updates[k].mask.retained,
            skipped=skipped,
            deadline_met=met,
        ))

    test_loss, test_accuracy = evaluate(new_state, pooled=cfg.accuracy == "pooled", max_samples=cfg.eval_samples)
    metrics = RoundMetrics(
        round=g,
        mode=cfg.mode,
        global_loss=training_loss(new_state, cfg.eval_samples),
        test_loss=test_loss,
        test_accuracy=test_accuracy,
        round_latency_s=plan.round_latency_s,
        communicated_weights=sum(d.retained_weights for d in per_device),
        min_retention=int(counts.min()) if n_u else 0,
        deadline_violations=sum(1 for d in per_device if not d.skipped and not d.deadline_met),
        per_device=per_device,
    )
    logger.info(
        "round %d: loss=%.4f acc=%.3f latency=%.2f ms comm=%d",
        g, metrics.global_loss, metrics.test_accuracy, metrics.round_latency_s * 1e3, metrics.communicated_weights,
    )
    return new_state, metrics


def run_rounds(
    cfg: ExperimentConfig,
    state: SimulationState,
    sink: Callable[[RoundMetrics], None] | None = None,
) -> tuple[SimulationState, list[RoundMetrics]]:
    """Run ``cfg.rounds`` rounds from ``state``.

    Failed rounds are collected and reported together as an
    :class:`ExperimentError` once every round has been attempted.
    """
    metrics: list[RoundMetrics] = []
    errors: list[SimulationError] = []
    executor = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    try:
        for _ in range(cfg.rounds):
            try:
                state, m = run_round(state, cfg, executor)
            except SimulationError as e:
                logger.warning("%s", e)
                errors.append(e)
                state = replace(state, round=state.round + 1)
                continue
            metrics.append(m)
            if sink is not None:
                sink(m)
    finally:
        if executor is not None:
            executor.shutdown()
    if errors:
        raise ExperimentError(errors, metrics)
    return state, metrics


def run_experiment(cfg: ExperimentConfig, sink: Callable[[RoundMetrics], None] | None = None) -> list[RoundMetrics]:
    if cfg.rounds == 0:
        return []
    _, metrics = run_rounds(cfg, build_federation(cfg), sink)
    return metrics


ROUNDS_CSV_HEADER = [
    "round", "mode", "global_loss", "test_loss", "test_accuracy", "round_latency_s",
    "communicated_weights", "min_retention", "deadline_violations",
]


def write_rounds_csv(path: Path, metrics: Sequence[RoundMetrics]) -> None:
    rows = (
        [m.round, m.mode.value, repr(m.global_loss), repr(m.test_loss), repr(m.test_accuracy),
         repr(m.round_latency_s), m.communicated_weights, m.min_retention, m.deadline_violations]
        for m in metrics
    )
    atomic_write_csv(Path(path), ROUNDS_CSV_HEADER, rows)


@dataclass(frozen=True)
class SweepPoint:
    threshold_s: float
    mean_pruning_ratio: float
    mean_round_latency_s: float
    mean_communicated_weights: float
    infeasible_rounds: int


def sweep_thresholds(cfg: ExperimentConfig, thresholds: Sequence[float], architecture: Architecture | None = None) -> list[SweepPoint]:
    """Allocation-only sweep over latency thresholds, ``cfg.rounds`` channel draws each."""
    if architecture is None:
        ds = cfg.dataset
        if ds.kind == "idx":
            full = load_dataset(cfg)
            architecture = model_architecture(cfg, full.feature_count, full.class_count)
        else:
            architecture = model_architecture(cfg, ds.dims, ds.classes)
    profiles = device_profiles(cfg)
    n_u = architecture.n_global
    points = []
    for t_th in thresholds:
        run_cfg = cfg.model_copy(update={"latency_threshold_s": float(t_th)})
        ratios, latencies, comm, infeasible = [], [], [], 0
        for g in range(cfg.rounds):
            try:
                plan = plan_round(run_cfg, profiles, architecture, g)
            except AllocationError:
                infeasible += 1
                continue
            active = plan.participating
            rho = plan.allocation.pruning_ratios[active]
            ratios.extend(rho.tolist())
            latencies.append(plan.round_latency_s)
            comm.append(sum(n_u - pruned_count(n_u, float(r)) for r in rho))
        points.append(SweepPoint(
            threshold_s=float(t_th),
            mean_pruning_ratio=float(np.mean(ratios)) if ratios else math.nan,
            mean_round_latency_s=float(np.mean(latencies)) if latencies else math.nan,
            mean_communicated_weights=float(np.mean(comm)) if comm else math.nan,
            infeasible_rounds=infeasible,
        ))
        logger.info("sweep T_th=%.4g s: mean rho=%.4f", t_th, points[-1].mean_pruning_ratio)
    return points
