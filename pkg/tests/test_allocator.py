"""Tests for the bandwidth/pruning allocator."""

import numpy as np
import pytest

from fedprune.allocator import (
    AllocationError,
    AllocationInstance,
    RatioBound,
    RoundAllocation,
    allocation_objective,
    bandwidth_from_lambda,
    build_instance,
    device_latency,
    equal_allocation,
    oracle_allocation,
    pruning_ratio,
    pruning_ratio_lower_bound,
    solve_bandwidth,
)
from fedprune.wireless import ChannelState, DeviceProfile


def _instance(t_per, t_g, payload, rate, t_th=2.0):
    return AllocationInstance(
        latency_threshold_s=t_th,
        t_cmp_per_s=np.asarray(t_per, dtype=float),
        t_cmp_g_s=np.asarray(t_g, dtype=float),
        payload_bits=np.asarray(payload, dtype=float),
        spectral_rate_hz_coeff=np.asarray(rate, dtype=float),
    )


def _random_instance(rng, k=10):
    # b*V2 and V3 are of the same order, so optima are interior.
    r = rng.uniform(0.8, 1.25, size=k)
    v1 = rng.uniform(0.5, 1.5, size=k)
    v2 = rng.uniform(0.3, 0.8, size=k)
    return _instance(t_per=2.0 - v1 / r, t_g=v2 / r, payload=np.full(k, 1e6), rate=1e6 * r)


def _identical(k):
    return _instance([0.5] * k, [0.4] * k, [1e6] * k, [2e6] * k)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


class TestAllocationInstance:
    def test_length_mismatch(self):
        with pytest.raises(AllocationError):
            _instance([0.1, 0.2], [0.1], [1.0, 1.0], [1.0, 1.0])

    def test_nonpositive_threshold(self):
        with pytest.raises(AllocationError):
            _instance([0.1], [0.1], [1.0], [1.0], t_th=-1.0)

    def test_json_round_trip(self):
        inst = _identical(3)
        again = AllocationInstance.from_json_dict(inst.to_json_dict())
        assert np.array_equal(again.t_cmp_g_s, inst.t_cmp_g_s)

    def test_unknown_key_rejected(self):
        data = _identical(2).to_json_dict()
        data["bogus"] = 1
        with pytest.raises(AllocationError, match="unknown keys: bogus"):
            AllocationInstance.from_json_dict(data)

    def test_missing_key_rejected(self):
        data = _identical(2).to_json_dict()
        del data["payload_bits"]
        with pytest.raises(AllocationError, match="missing keys"):
            AllocationInstance.from_json_dict(data)


class TestRoundAllocation:
    def test_budget_overflow_rejected(self):
        with pytest.raises(AllocationError):
            RoundAllocation(np.array([0.6, 0.6]), np.zeros(2), 1.0)

    def test_with_ratios_keeps_infeasible_pruned(self):
        alloc = RoundAllocation(np.array([0.0, 1.0]), np.array([1.0, 0.2]), 1.0, frozenset({0}))
        fixed = alloc.with_ratios(0.3)
        assert fixed.pruning_ratios.tolist() == [1.0, 0.3]

    def test_with_ratios_keeps_unserved_devices_pruned(self):
        alloc = RoundAllocation(np.array([1.0, 0.0]), np.array([0.0, 1.0]), 1.0)
        assert alloc.with_ratios(0.3).pruning_ratios.tolist() == [0.3, 1.0]

    def test_fixed_ratio_after_solver_clamps_device_out(self):
        inst = _instance([0.1, 0.999], [0.5, 0.5], [1e6, 1e6], [1e7, 1e5], t_th=1.0)
        alloc = solve_bandwidth(inst)
        assert alloc.fractions[1] == 0.0
        assert not alloc.infeasible_devices
        fixed = alloc.with_ratios(0.3)
        assert fixed.pruning_ratios[1] == 1.0
        assert fixed.pruning_ratios[0] == 0.3
        assert device_latency(inst, 1, 0.0, 1.0) == pytest.approx(0.999)


class TestPruningRatioLowerBound:
    def test_hand_value(self):
        bound = pruning_ratio_lower_bound(25e-3, 5e-3, 10e-3, 30e-3)
        assert bound.ratio == pytest.approx(0.5)
        assert bound.feasible

    def test_loose_deadline_gives_zero(self):
        assert pruning_ratio_lower_bound(1.0, 0.1, 0.2, 0.3).ratio == 0.0

    def test_boundary_gives_one(self):
        bound = pruning_ratio_lower_bound(0.1, 0.1, 0.2, 0.3)
        assert bound.ratio == 1.0
        assert bound.feasible

    def test_personalized_overrun_is_infeasible(self):
        assert not pruning_ratio_lower_bound(0.1, 0.2, 0.2, 0.3).feasible

    def test_zero_denominator(self):
        with pytest.raises(AllocationError):
            pruning_ratio_lower_bound(0.1, 0.0, 0.0, 0.0)


class TestBandwidthFromLambda:
    def test_large_lambda_gives_zero(self):
        assert bandwidth_from_lambda(1e30, _identical(2), 0) == 0.0

    def test_numerator_root_gives_zero(self):
        inst = _identical(1)
        v1 = inst.spectral_rate_hz_coeff[0] * inst.slack[0]
        v3 = inst.payload_bits[0]
        # sqrt(v1 * v3 / lam) == v3
        assert bandwidth_from_lambda(v1 / v3, inst, 0) == pytest.approx(0.0, abs=1e-12)

    def test_matches_direct_substitution(self, rng):
        for _ in range(50):
            inst = _random_instance(rng)
            lam = float(rng.uniform(1e-3, 1.0))
            d = int(rng.integers(0, inst.device_count))
            r, qn = inst.spectral_rate_hz_coeff[d], inst.payload_bits[d]
            direct = (np.sqrt(inst.slack[d] * qn * r / lam) - qn) / (r * inst.t_cmp_g_s[d])
            assert bandwidth_from_lambda(lam, inst, d) == pytest.approx(min(max(direct, 0.0), 1.0), rel=1e-12, abs=1e-12)

    def test_nonpositive_lambda(self):
        with pytest.raises(AllocationError):
            bandwidth_from_lambda(0.0, _identical(2), 0)


class TestPruningRatio:
    def test_matches_lower_bound_with_implied_uplink(self, rng):
        for _ in range(100):
            inst = _random_instance(rng)
            d = int(rng.integers(0, inst.device_count))
            b = float(rng.uniform(0.01, 1.0))
            t_com = inst.payload_bits[d] / (b * inst.spectral_rate_hz_coeff[d])
            expected = pruning_ratio_lower_bound(inst.latency_threshold_s, inst.t_cmp_per_s[d], inst.t_cmp_g_s[d], t_com)
            got = pruning_ratio(b, inst, d)
            assert got.feasible == expected.feasible
            assert got.ratio == pytest.approx(expected.ratio, rel=1e-12, abs=1e-12)

    def test_generous_bandwidth_gives_zero(self):
        inst = _instance([0.1], [0.1], [1.0], [1e9], t_th=1.0)
        assert pruning_ratio(1.0, inst, 0).ratio == 0.0

    def test_no_slack_gives_one(self):
        inst = _instance([1.0], [0.1], [1.0], [1e3], t_th=1.0)
        assert pruning_ratio(0.5, inst, 0).ratio == 1.0

    def test_zero_bandwidth_is_infeasible(self):
        assert pruning_ratio(0.0, _identical(2), 0) == RatioBound(1.0, False)


class TestSolveBandwidth:
    @pytest.mark.parametrize("k", [1, 2, 5, 10])
    def test_identical_devices_share_equally(self, k):
        alloc = solve_bandwidth(_identical(k))
        assert alloc.fractions == pytest.approx(np.full(k, 1.0 / k), abs=1e-9)

    def test_budget_and_ranges(self, rng):
        for _ in range(50):
            alloc = solve_bandwidth(_random_instance(rng))
            assert abs(alloc.fractions.sum() - 1.0) <= 1e-9
            assert np.all((alloc.pruning_ratios >= 0) & (alloc.pruning_ratios <= 1))

    def test_deadline_met_at_selected_ratio(self, rng):
        for _ in range(50):
            inst = _random_instance(rng)
            alloc = solve_bandwidth(inst)
            for d in range(inst.device_count):
                t = device_latency(inst, d, alloc.fractions[d], alloc.pruning_ratios[d])
                assert t <= inst.latency_threshold_s * (1 + 1e-9)

    def test_matches_oracle(self, rng):
        for _ in range(200):
            inst = _random_instance(rng)
            closed = allocation_objective(inst, solve_bandwidth(inst).fractions)
            oracle = allocation_objective(inst, oracle_allocation(inst, iterations=500))
            assert closed <= oracle + 1e-6 * abs(oracle)

    def test_matches_converged_oracle(self, rng):
        for _ in range(3):
            inst = _random_instance(rng)
            closed = allocation_objective(inst, solve_bandwidth(inst).fractions)
            oracle = allocation_objective(inst, oracle_allocation(inst, iterations=100_000))
            assert abs(closed - oracle) <= 1e-6 * abs(oracle)

    def test_kkt_stationarity(self, rng):
        for _ in range(50):
            inst = _random_instance(rng)
            alloc = solve_bandwidth(inst)
            lam = alloc.lambda_star
            for d in range(inst.device_count):
                b = alloc.fractions[d]
                if not 0 < b < 1:
                    continue
                r, qn = inst.spectral_rate_hz_coeff[d], inst.payload_bits[d]
                grad = inst.slack[d] * qn * r / (b * r * inst.t_cmp_g_s[d] + qn) ** 2
                assert abs(lam - grad) <= 1e-8 * lam

    def test_complementary_slackness(self, rng):
        inst = _random_instance(rng)
        alloc = solve_bandwidth(inst)
        assert alloc.lambda_star * abs(alloc.fractions.sum() - 1.0) <= 1e-9

    def test_worse_channel_gets_more_bandwidth(self):
        # Compute-heavy regime: b * R * T_g exceeds the payload at the optimum.
        inst = _instance(t_per=[0.5, 0.5], t_g=[1.0, 1.0], payload=[1e5, 1e5], rate=[1e6, 2e6])
        alloc = solve_bandwidth(inst)
        assert alloc.fractions[0] > alloc.fractions[1]

    def test_faster_device_gets_more_bandwidth(self):
        # Device 1 has twice the CPU: half the compute time for both terms.
        inst = _instance(t_per=[0.5, 0.25], t_g=[0.5, 0.25], payload=[1e5, 1e5], rate=[1e6, 1e6])
        alloc = solve_bandwidth(inst)
        assert alloc.fractions[1] > alloc.fractions[0]

    def test_ratio_nonincreasing_in_rate_and_frequency(self):
        base = _instance(t_per=[0.5], t_g=[0.5], payload=[1e6], rate=[1e6], t_th=1.5)
        faster_link = _instance(t_per=[0.5], t_g=[0.5], payload=[1e6], rate=[2e6], t_th=1.5)
        faster_cpu = _instance(t_per=[0.25], t_g=[0.25], payload=[1e6], rate=[1e6], t_th=1.5)
        rho = pruning_ratio(0.5, base, 0).ratio
        assert pruning_ratio(0.5, faster_link, 0).ratio <= rho
        assert pruning_ratio(0.5, faster_cpu, 0).ratio <= rho

    def test_infeasible_device_excluded(self):
        inst = _instance(t_per=[3.0, 0.5, 0.5], t_g=[0.4] * 3, payload=[1e6] * 3, rate=[2e6] * 3)
        alloc = solve_bandwidth(inst)
        assert alloc.infeasible_devices == frozenset({0})
        assert alloc.fractions[0] == 0.0
        assert alloc.pruning_ratios[0] == 1.0
        assert alloc.fractions[1:] == pytest.approx([0.5, 0.5], abs=1e-9)

    def test_all_infeasible(self):
        with pytest.raises(AllocationError, match="all devices infeasible"):
            solve_bandwidth(_instance([3.0, 3.0], [0.4] * 2, [1e6] * 2, [2e6] * 2))

    def test_zero_slack_devices_prune_everything(self):
        alloc = solve_bandwidth(_instance([2.0, 2.0], [0.4] * 2, [1e6] * 2, [2e6] * 2))
        assert alloc.fractions.tolist() == [0.0, 0.0]
        assert alloc.pruning_ratios.tolist() == [1.0, 1.0]
        assert not alloc.infeasible_devices


class TestEqualAllocation:
    def test_equal_shares(self, rng):
        inst = _random_instance(rng)
        alloc = equal_allocation(inst)
        assert alloc.fractions == pytest.approx(np.full(10, 0.1))
        for d in range(10):
            assert alloc.pruning_ratios[d] == pruning_ratio(0.1, inst, d).ratio

    def test_fixed_ratio_excludes_nobody(self):
        inst = _instance(t_per=[3.0, 0.5], t_g=[0.4] * 2, payload=[1e6] * 2, rate=[2e6] * 2)
        alloc = equal_allocation(inst, ratio=0.0)
        assert alloc.pruning_ratios.tolist() == [0.0, 0.0]
        assert not alloc.infeasible_devices

    def test_proposed_objective_never_worse(self, rng):
        for _ in range(20):
            inst = _random_instance(rng)
            assert allocation_objective(inst, solve_bandwidth(inst).fractions) <= allocation_objective(inst, equal_allocation(inst).fractions) + 1e-12


class TestOracle:
    def test_identical_devices_uniform(self):
        assert oracle_allocation(_identical(4), iterations=2000) == pytest.approx(np.full(4, 0.25), abs=1e-4)

    def test_single_device_takes_everything(self):
        assert oracle_allocation(_identical(1), iterations=10) == pytest.approx([1.0])

    def test_iterations_must_be_positive(self):
        with pytest.raises(AllocationError):
            oracle_allocation(_identical(2), iterations=0)

    def test_objective_is_convex_on_simplex(self, rng):
        for _ in range(100):
            inst = _random_instance(rng)
            b, b2 = rng.dirichlet(np.ones(10)), rng.dirichlet(np.ones(10))
            theta = float(rng.uniform())
            lhs = allocation_objective(inst, theta * b + (1 - theta) * b2)
            rhs = theta * allocation_objective(inst, b) + (1 - theta) * allocation_objective(inst, b2)
            assert lhs <= rhs + 1e-12


class TestBuildInstance:
    def test_probe_term_folded_into_personalized_time(self):
        dev = DeviceProfile(device_id=0, cpu_frequency_hz=1e9, cycles_per_weight=10, transmit_power_w=1.0)
        ch = ChannelState(round=0, gains_linear=np.array([1.0]), noise_power_w=1.0, total_bandwidth_hz=1e6)
        inst = build_instance([dev], ch, n_v=100, n_u=200, latency_threshold_s=1.0, tau_v=2, tau_u=3, tau_u_probe=1, q_bits=32)
        assert inst.t_cmp_per_s[0] == pytest.approx((2 * 10 * 100 + 10 * 200) / 1e9)
        assert inst.t_cmp_g_s[0] == pytest.approx(3 * 10 * 200 / 1e9)
        assert inst.payload_bits[0] == 32 * 200
        assert inst.spectral_rate_hz_coeff[0] == pytest.approx(1e6)
