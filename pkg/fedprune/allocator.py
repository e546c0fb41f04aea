"""Per-round joint bandwidth-fraction and pruning-ratio allocation.

Each device k contributes the term ``1 - b*V1 / (b*V2 + V3)`` to the objective,
with ``V1 = R*(T_th - T_cmp_per)``, ``V2 = R*T_cmp_g`` and ``V3 = payload``,
where ``R`` is the device's rate at full bandwidth. The closed-form KKT
solution gives ``b_k(lambda)``; the multiplier is found by bisection on the
budget ``sum(b) = 1``.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from fedprune.wireless import ChannelState, DeviceProfile, computation_latency, uplink_rate

logger = logging.getLogger(__name__)

LAMBDA_MIN = 1e-30
LAMBDA_MAX = 1e30
BUDGET_TOLERANCE = 1e-10
MAX_BISECTION_STEPS = 200


class AllocationError(ValueError):
    """Raised when no allocation exists or an instance is malformed."""
    pass


@dataclass(frozen=True)
class RatioBound:
    """A pruning ratio plus whether the device can meet the deadline at all."""
    ratio: float
    feasible: bool


def _vector(name: str, values: Any) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(values, dtype=np.float64))
    if arr.ndim != 1:
        raise AllocationError(f"{name} must be a 1-D vector")
    return arr


@dataclass(frozen=True, eq=False)
class AllocationInstance:
    latency_threshold_s: float
    t_cmp_per_s: np.ndarray
    t_cmp_g_s: np.ndarray
    payload_bits: np.ndarray
    spectral_rate_hz_coeff: np.ndarray

    def __post_init__(self):
        fields_ = {
            "t_cmp_per_s": _vector("t_cmp_per_s", self.t_cmp_per_s),
            "t_cmp_g_s": _vector("t_cmp_g_s", self.t_cmp_g_s),
            "payload_bits": _vector("payload_bits", self.payload_bits),
            "spectral_rate_hz_coeff": _vector("spectral_rate_hz_coeff", self.spectral_rate_hz_coeff),
        }
        sizes = {arr.size for arr in fields_.values()}
        if len(sizes) != 1 or 0 in sizes:
            raise AllocationError("per-device fields must be nonempty and of equal length")
        if self.latency_threshold_s <= 0:
            raise AllocationError("latency_threshold_s must be > 0")
        # Personalized compute may be zero when the whole model is global.
        if np.any(fields_["t_cmp_per_s"] < 0):
            raise AllocationError("t_cmp_per_s must be >= 0")
        for name in ("t_cmp_g_s", "payload_bits", "spectral_rate_hz_coeff"):
            if np.any(fields_[name] <= 0):
                raise AllocationError(f"{name} must be > 0 for every device")
        for name, arr in fields_.items():
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def device_count(self) -> int:
        return int(self.t_cmp_per_s.size)

    @property
    def slack(self) -> np.ndarray:
        """Time left for the pruned global part: ``T_th - T_cmp_per``."""
        return self.latency_threshold_s - self.t_cmp_per_s

    def to_json_dict(self) -> dict:
        return {
            "latency_threshold_s": self.latency_threshold_s,
            "t_cmp_per_s": self.t_cmp_per_s.tolist(),
            "t_cmp_g_s": self.t_cmp_g_s.tolist(),
            "payload_bits": self.payload_bits.tolist(),
            "spectral_rate_hz_coeff": self.spectral_rate_hz_coeff.tolist(),
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "AllocationInstance":
        expected = {"latency_threshold_s", "t_cmp_per_s", "t_cmp_g_s", "payload_bits", "spectral_rate_hz_coeff"}
        unknown = set(data) - expected
        missing = expected - set(data)
        if unknown:
            raise AllocationError(f"unknown keys: {', '.join(sorted(unknown))}")
        if missing:
            raise AllocationError(f"missing keys: {', '.join(sorted(missing))}")
        return cls(**data)


@dataclass(frozen=True, eq=False)
class RoundAllocation:
    fractions: np.ndarray
    pruning_ratios: np.ndarray
    lambda_star: float | None
    infeasible_devices: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        b = _vector("fractions", self.fractions)
        rho = _vector("pruning_ratios", self.pruning_ratios)
        if b.size != rho.size:
            raise AllocationError("fractions and pruning_ratios differ in length")
        if np.any(b < 0) or np.any(b > 1):
            raise AllocationError("bandwidth fractions must lie in [0, 1]")
        if b.sum() > 1 + 1e-9:
            raise AllocationError(f"bandwidth fractions sum to {b.sum()} > 1")
        if np.any(rho < 0) or np.any(rho > 1):
            raise AllocationError("pruning ratios must lie in [0, 1]")
        object.__setattr__(self, "fractions", b)
        object.__setattr__(self, "pruning_ratios", rho)
        object.__setattr__(self, "infeasible_devices", frozenset(int(k) for k in self.infeasible_devices))

    def with_ratios(self, ratio: float) -> "RoundAllocation":
        """Same bandwidth split, one fixed pruning ratio for every device that has bandwidth.

        Infeasible devices and devices left with no bandwidth keep ``rho = 1``.
        """
        rho = np.full(self.fractions.size, float(ratio))
        rho[self.fractions == 0] = 1.0
        for k in self.infeasible_devices:
            rho[k] = 1.0
        return RoundAllocation(self.fractions, rho, self.lambda_star, self.infeasible_devices)

    def to_json_dict(self) -> dict:
        return {
            "fractions": self.fractions.tolist(),
            "pruning_ratios": self.pruning_ratios.tolist(),
            "lambda_star": self.lambda_star,
            "infeasible_devices": sorted(self.infeasible_devices),
        }


def build_instance(
    profiles: Sequence[DeviceProfile],
    channel: ChannelState,
    *,
    n_v: float,
    n_u: float,
    latency_threshold_s: float,
    tau_v: int,
    tau_u: int,
    tau_u_probe: int,
    q_bits: float,
) -> AllocationInstance:
    """Collect the allocation data for one round.

    The probe-step compute is not scaled by (1 - rho), so it is folded into
    ``t_cmp_per_s`` together with the personalized compute.
    """
    t_per, t_g, rates = [], [], []
    for dev in profiles:
        t_per.append(computation_latency(dev, n_v, n_u, 1.0, tau_v, tau_u, tau_u_probe))
        t_g.append(tau_u * dev.cycles_per_weight * n_u / dev.cpu_frequency_hz)
        rates.append(uplink_rate(1.0, channel, dev))
    return AllocationInstance(
        latency_threshold_s=latency_threshold_s,
        t_cmp_per_s=np.array(t_per),
        t_cmp_g_s=np.array(t_g),
        payload_bits=np.full(len(profiles), q_bits * n_u),
        spectral_rate_hz_coeff=np.array(rates),
    )


def pruning_ratio_lower_bound(t_th: float, t_cmp_per: float, t_cmp_g: float, t_com_g: float) -> RatioBound:
    """Smallest ratio that keeps the device inside ``t_th``.

    Infeasible when the personalized compute alone already exceeds the
    deadline; a slack of exactly zero is met by pruning everything.
    """
    if t_cmp_g + t_com_g <= 0:
        raise AllocationError("t_cmp_g + t_com_g must be > 0")
    slack = t_th - t_cmp_per
    if slack < 0:
        return RatioBound(ratio=1.0, feasible=False)
    ratio = 1.0 - slack / (t_cmp_g + t_com_g)
    return RatioBound(ratio=min(max(ratio, 0.0), 1.0), feasible=True)


def _coefficients(inst: AllocationInstance) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    r = inst.spectral_rate_hz_coeff
    return r * inst.slack, r * inst.t_cmp_g_s, inst.payload_bits


def _unclamped_fractions(lam: float, inst: AllocationInstance) -> np.ndarray:
    v1, v2, v3 = _coefficients(inst)
    root = np.sqrt(np.maximum(v1, 0.0) * v3 / lam)
    return (root - v3) / v2


def bandwidth_from_lambda(lam: float, inst: AllocationInstance, device: int) -> float:
    if lam <= 0:
        raise AllocationError(f"lambda must be > 0, got {lam}")
    b = _unclamped_fractions(lam, inst)[device]
    return float(min(max(b, 0.0), 1.0))


def pruning_ratio(b: float, inst: AllocationInstance, device: int) -> RatioBound:
    """Ratio implied by bandwidth fraction ``b``: the lower bound with T_com at rate ``b*R``."""
    if not 0.0 <= b <= 1.0:
        raise AllocationError(f"bandwidth fraction must be in [0, 1], got {b}")
    slack = inst.slack[device]
    if b == 0:
        return RatioBound(ratio=1.0, feasible=False)
    if slack < 0:
        return RatioBound(ratio=1.0, feasible=False)
    r = inst.spectral_rate_hz_coeff[device]
    ratio = 1.0 - b * slack * r / (b * inst.t_cmp_g_s[device] * r + inst.payload_bits[device])
    return RatioBound(ratio=float(min(max(ratio, 0.0), 1.0)), feasible=True)


def allocation_objective(inst: AllocationInstance, fractions: np.ndarray) -> float:
    """``sum_k 1 - b_k V1 / (b_k V2 + V3)``; the pruning-ratio sum before clamping."""
    b = np.asarray(fractions, dtype=np.float64)
    v1, v2, v3 = _coefficients(inst)
    return float(np.sum(1.0 - b * v1 / (b * v2 + v3)))


def device_latency(inst: AllocationInstance, device: int, b: float, rho: float) -> float:
    t = inst.t_cmp_per_s[device]
    if rho >= 1.0:
        return float(t)
    if b <= 0:
        return math.inf
    t_com = inst.payload_bits[device] / (b * inst.spectral_rate_hz_coeff[device])
    return float(t + (1.0 - rho) * (inst.t_cmp_g_s[device] + t_com))


def solve_bandwidth(inst: AllocationInstance) -> RoundAllocation:
    """Closed-form fractions with lambda* from bisection on ``sum(b) = 1``.

    Devices whose personalized compute exceeds the deadline are excluded
    (b=0, rho=1) and reported in ``infeasible_devices``.
    """
    slack = inst.slack
    infeasible = frozenset(int(k) for k in np.flatnonzero(slack < 0))
    if len(infeasible) == inst.device_count:
        raise AllocationError("all devices infeasible")
    active = slack > 0
    k = inst.device_count

    if not active.any():
        # Only zero-slack devices remain: no bandwidth helps, everything is pruned.
        return RoundAllocation(np.zeros(k), np.ones(k), 0.0, infeasible)

    def fractions_at(lam: float) -> np.ndarray:
        b = np.clip(_unclamped_fractions(lam, inst), 0.0, 1.0)
        b[~active] = 0.0
        return b

    lo, hi = LAMBDA_MIN, LAMBDA_MAX
    if fractions_at(lo).sum() < 1.0 - BUDGET_TOLERANCE or fractions_at(hi).sum() > 1.0 + BUDGET_TOLERANCE:
        raise AllocationError("bisection bracket not found")

    lam = math.sqrt(lo * hi)
    for step in range(MAX_BISECTION_STEPS):
        lam = math.sqrt(lo * hi)
        total = fractions_at(lam).sum()
        if abs(total - 1.0) <= BUDGET_TOLERANCE:
            break
        if total > 1.0:
            lo = lam
        else:
            hi = lam
    else:
        logger.debug("bisection hit %d steps, |sum(b)-1|=%.3e", MAX_BISECTION_STEPS, abs(total - 1.0))
    logger.debug("lambda*=%.6e after %d steps", lam, step + 1)

    fractions = fractions_at(lam)
    ratios = np.ones(k)
    for d in np.flatnonzero(active & (fractions > 0)):
        ratios[d] = pruning_ratio(float(fractions[d]), inst, int(d)).ratio
    return RoundAllocation(fractions, ratios, lam, infeasible)


def equal_allocation(inst: AllocationInstance, ratio: float | None = None) -> RoundAllocation:
    """Equal bandwidth share ``1/K``.

    With ``ratio=None`` each device prunes just enough to meet the deadline at
    its share; otherwise every device uses ``ratio`` and nobody is excluded.
    """
    k = inst.device_count
    share = 1.0 / k
    fractions = np.full(k, share)
    if ratio is not None:
        return RoundAllocation(fractions, np.full(k, float(ratio)), None, frozenset())
    bounds = [pruning_ratio(share, inst, d) for d in range(k)]
    infeasible = frozenset(d for d, bound in enumerate(bounds) if not bound.feasible)
    if len(infeasible) == k:
        raise AllocationError("all devices infeasible")
    return RoundAllocation(fractions, np.array([bound.ratio for bound in bounds]), None, infeasible)


def _project_to_simplex(y: np.ndarray) -> np.ndarray:
    """Euclidean projection onto ``{x >= 0, sum(x) = 1}``."""
    u = np.sort(y)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, y.size + 1)
    cond = u - css / idx > 0
    r = idx[cond][-1]
    theta = css[cond][-1] / r
    return np.maximum(y - theta, 0.0)


def oracle_allocation(inst: AllocationInstance, iterations: int = 100_000) -> np.ndarray:
    """Projected gradient descent on the allocation objective, independent of the closed form.

    Starts from the uniform split over devices with positive slack and steps
    with ``1 / (L * (1 + t/iterations))``, where ``L`` bounds the curvature.
    Returns the best iterate seen.
    """
    if iterations < 1:
        raise AllocationError("iterations must be >= 1")
    fractions = np.zeros(inst.device_count)
    active = inst.slack > 0
    n = int(active.sum())
    if n == 0:
        return fractions
    v1, v2, v3 = (c[active] for c in _coefficients(inst))

    def objective(x: np.ndarray) -> float:
        return float(np.sum(1.0 - x * v1 / (x * v2 + v3)))

    x = np.full(n, 1.0 / n)
    best, best_value = x, objective(x)
    curvature = float(np.max(2.0 * v1 * v2 / v3**2))
    for t in range(iterations):
        grad = -v1 * v3 / (x * v2 + v3) ** 2
        x = _project_to_simplex(x - grad / (curvature * (1.0 + t / iterations)))
        value = objective(x)
        if value < best_value:
            best, best_value = x, value
    fractions[active] = best
    return fractions
