"""Uplink channel and per-round latency model.

All quantities are SI (Hz, W, s, bits). dBm/dB inputs are converted at the
config boundary with :func:`dbm_to_watts` and :func:`db_to_linear`.
"""

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class WirelessError(ValueError):
    """Raised for invalid radio/compute parameters or impossible transmissions."""
    pass


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def db_to_linear(db: float) -> float:
    return 10.0 ** (db / 10.0)


@dataclass(frozen=True)
class DeviceProfile:
    device_id: int
    cpu_frequency_hz: float
    cycles_per_weight: float
    transmit_power_w: float
    dataset_shard: int = 0

    def __post_init__(self):
        if self.cpu_frequency_hz <= 0:
            raise WirelessError(f"device {self.device_id}: cpu_frequency_hz must be > 0")
        if self.cycles_per_weight <= 0:
            raise WirelessError(f"device {self.device_id}: cycles_per_weight must be > 0")
        if self.transmit_power_w <= 0:
            raise WirelessError(f"device {self.device_id}: transmit_power_w must be > 0")


@dataclass(frozen=True, eq=False)
class ChannelState:
    round: int
    gains_linear: np.ndarray
    noise_power_w: float
    total_bandwidth_hz: float

    def __post_init__(self):
        gains = np.asarray(self.gains_linear, dtype=np.float64)
        if gains.ndim != 1 or gains.size == 0:
            raise WirelessError("gains_linear must be a nonempty 1-D vector")
        if np.any(gains <= 0):
            raise WirelessError("every channel gain must be > 0")
        if self.noise_power_w <= 0:
            raise WirelessError("noise_power_w must be > 0")
        if self.total_bandwidth_hz <= 0:
            raise WirelessError("total_bandwidth_hz must be > 0")
        object.__setattr__(self, "gains_linear", gains)

    def snr(self, dev: DeviceProfile) -> float:
        return float(self.gains_linear[dev.device_id]) * dev.transmit_power_w / self.noise_power_w


@dataclass(frozen=True)
class LatencyBreakdown:
    t_cmp_personalized_s: float
    t_cmp_global_s: float
    t_cmp_probe_s: float
    t_com_global_s: float
    rho: float = field(default=0.0)

    @property
    def total_s(self) -> float:
        fixed = self.t_cmp_personalized_s + self.t_cmp_probe_s
        if self.rho >= 1.0:
            return fixed
        return fixed + (1.0 - self.rho) * (self.t_cmp_global_s + self.t_com_global_s)


def _check_ratio(rho: float) -> None:
    if not 0.0 <= rho <= 1.0:
        raise WirelessError(f"pruning ratio must be in [0, 1], got {rho}")


def uplink_rate(b: float, ch: ChannelState, dev: DeviceProfile) -> float:
    """Shannon rate in bit/s for bandwidth fraction ``b`` of the shared band."""
    if not 0.0 <= b <= 1.0:
        raise WirelessError(f"bandwidth fraction must be in [0, 1], got {b}")
    return b * ch.total_bandwidth_hz * math.log2(1.0 + ch.snr(dev))


def computation_latency(
    dev: DeviceProfile,
    n_v: float,
    n_u: float,
    rho: float,
    tau_v: int,
    tau_u: int,
    tau_u_probe: int,
) -> float:
    """Personalized steps, unpruned probe steps and masked global steps, in seconds."""
    _check_ratio(rho)
    if min(n_v, n_u, tau_v, tau_u, tau_u_probe) < 0:
        raise WirelessError("counts must be >= 0")
    c = dev.cycles_per_weight
    cycles = tau_v * c * n_v + tau_u_probe * c * n_u + (1.0 - rho) * tau_u * c * n_u
    return cycles / dev.cpu_frequency_hz


def uplink_latency(q_bits: float, rho: float, n_u: float, rate: float) -> float:
    _check_ratio(rho)
    payload = q_bits * (1.0 - rho) * n_u
    if payload == 0:
        return 0.0
    if rate <= 0:
        raise WirelessError("zero rate with nonzero payload")
    return payload / rate


def round_latency(per_device_totals: Sequence[float]) -> float:
    """Synchronous round: the slowest device sets the pace."""
    if len(per_device_totals) == 0:
        raise WirelessError("round latency needs at least one device")
    return float(max(per_device_totals))


def latency_breakdown(
    dev: DeviceProfile,
    ch: ChannelState,
    b: float,
    *,
    n_v: float,
    n_u: float,
    rho: float,
    tau_v: int,
    tau_u: int,
    tau_u_probe: int,
    q_bits: float,
) -> LatencyBreakdown:
    _check_ratio(rho)
    f, c = dev.cpu_frequency_hz, dev.cycles_per_weight
    rate = uplink_rate(b, ch, dev)
    full_payload = q_bits * n_u
    if full_payload == 0:
        t_com = 0.0
    elif rate > 0:
        t_com = full_payload / rate
    else:
        t_com = math.inf
    return LatencyBreakdown(
        t_cmp_personalized_s=tau_v * c * n_v / f,
        t_cmp_global_s=tau_u * c * n_u / f,
        t_cmp_probe_s=tau_u_probe * c * n_u / f,
        t_com_global_s=t_com,
        rho=rho,
    )


def sample_channel(
    seed,
    mean_gain: float,
    k_devices: int,
    *,
    noise_power_w: float = dbm_to_watts(-110.0),
    total_bandwidth_hz: float = 20e6,
    round: int = 0,
) -> ChannelState:
    """Draw i.i.d. Rayleigh-fading power gains (exponential with the given mean).

    ``seed`` is anything :func:`numpy.random.default_rng` accepts, so callers
    can pass ``(experiment_seed, round)`` to get one stream per round.
    """
    if mean_gain <= 0:
        raise WirelessError("mean_gain must be > 0")
    if k_devices < 1:
        raise WirelessError("k_devices must be >= 1")
    rng = np.random.default_rng(seed)
    gains = rng.exponential(mean_gain, size=k_devices)
    gains = np.maximum(gains, np.finfo(np.float64).tiny * mean_gain)
    return ChannelState(
        round=round,
        gains_linear=gains,
        noise_power_w=noise_power_w,
        total_bandwidth_hz=total_bandwidth_hz,
    )
