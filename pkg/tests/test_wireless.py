"""Tests for the channel and latency model."""

import math

import numpy as np
import pytest

from fedprune.wireless import (
    ChannelState,
    DeviceProfile,
    WirelessError,
    computation_latency,
    db_to_linear,
    dbm_to_watts,
    latency_breakdown,
    round_latency,
    sample_channel,
    uplink_latency,
    uplink_rate,
)


def _device(**kw):
    defaults = dict(device_id=0, cpu_frequency_hz=3e9, cycles_per_weight=20, transmit_power_w=1.0)
    defaults.update(kw)
    return DeviceProfile(**defaults)


def _channel(snr, bandwidth=2.0e7):
    # noise 1 W and power 1 W so the gain is the SNR
    return ChannelState(round=0, gains_linear=np.array([snr]), noise_power_w=1.0, total_bandwidth_hz=bandwidth)


class TestConversions:
    def test_dbm_to_watts(self):
        assert dbm_to_watts(30.0) == pytest.approx(1.0)
        assert dbm_to_watts(28.0) == pytest.approx(0.630957, rel=1e-5)

    def test_db_to_linear(self):
        assert db_to_linear(20.0) == pytest.approx(100.0)


class TestDeviceProfile:
    @pytest.mark.parametrize("field", ["cpu_frequency_hz", "cycles_per_weight", "transmit_power_w"])
    def test_nonpositive_rejected(self, field):
        with pytest.raises(WirelessError):
            _device(**{field: 0})


class TestChannelState:
    def test_nonpositive_gain_rejected(self):
        with pytest.raises(WirelessError):
            ChannelState(round=0, gains_linear=np.array([1.0, 0.0]), noise_power_w=1.0, total_bandwidth_hz=1.0)

    def test_noise_must_be_positive(self):
        with pytest.raises(WirelessError):
            ChannelState(round=0, gains_linear=np.array([1.0]), noise_power_w=0.0, total_bandwidth_hz=1.0)


class TestUplinkRate:
    def test_hand_value(self):
        assert uplink_rate(0.1, _channel(1023.0), _device()) == pytest.approx(2.0e7, rel=1e-12)

    def test_zero_bandwidth(self):
        assert uplink_rate(0.0, _channel(1023.0), _device()) == 0.0

    def test_unit_snr(self):
        assert uplink_rate(1.0, _channel(1.0), _device()) == pytest.approx(2.0e7)

    def test_fraction_out_of_range(self):
        with pytest.raises(WirelessError):
            uplink_rate(1.5, _channel(1.0), _device())

    def test_monotone_in_fraction_and_snr(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            snr_a, snr_b = np.sort(rng.uniform(0.01, 1e4, size=2))
            b_a, b_b = np.sort(rng.uniform(0.01, 1.0, size=2))
            assert uplink_rate(b_a, _channel(snr_a), _device()) <= uplink_rate(b_b, _channel(snr_a), _device())
            assert uplink_rate(b_a, _channel(snr_a), _device()) <= uplink_rate(b_a, _channel(snr_b), _device())


class TestComputationLatency:
    def test_hand_value(self):
        t = computation_latency(_device(), 1000, 500, 0.5, 10, 10, 1)
        assert t == pytest.approx(260000 / 3e9, rel=1e-12)

    def test_fully_pruned_without_probe(self):
        t = computation_latency(_device(), 1000, 500, 1.0, 10, 10, 0)
        assert t == pytest.approx(10 * 20 * 1000 / 3e9)

    def test_empty_model(self):
        assert computation_latency(_device(), 0, 0, 0.3, 10, 10, 1) == 0.0

    def test_ratio_out_of_range(self):
        with pytest.raises(WirelessError):
            computation_latency(_device(), 10, 10, 1.2, 1, 1, 1)

    def test_decreasing_in_ratio(self):
        values = [computation_latency(_device(), 100, 100, r, 2, 2, 1) for r in np.linspace(0, 1, 11)]
        assert all(a > b for a, b in zip(values, values[1:]))


class TestUplinkLatency:
    def test_hand_value(self):
        assert uplink_latency(32, 0.5, 500, 2e7) == pytest.approx(4.0e-4)

    def test_fully_pruned_ignores_rate(self):
        assert uplink_latency(32, 1.0, 500, 0.0) == 0.0

    def test_one_second(self):
        assert uplink_latency(32, 0.0, 500, 1.6e4) == pytest.approx(1.0)

    def test_zero_rate_with_payload(self):
        with pytest.raises(WirelessError, match="zero rate with nonzero payload"):
            uplink_latency(32, 0.5, 500, 0.0)


class TestRoundLatency:
    def test_max(self):
        assert round_latency([1.0, 2.0, 0.5]) == 2.0

    def test_singleton(self):
        assert round_latency([0.7]) == 0.7

    def test_empty(self):
        with pytest.raises(WirelessError):
            round_latency([])


class TestLatencyBreakdown:
    def test_reconstructs_composition(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            dev = _device(cpu_frequency_hz=rng.uniform(1e9, 4e9), cycles_per_weight=rng.uniform(5, 40))
            ch = _channel(rng.uniform(1.0, 1e6))
            b, rho = rng.uniform(0.05, 1.0), rng.uniform(0.0, 1.0)
            n_v, n_u = rng.integers(1, 10_000), rng.integers(1, 100_000)
            br = latency_breakdown(dev, ch, b, n_v=n_v, n_u=n_u, rho=rho, tau_v=5, tau_u=7, tau_u_probe=1, q_bits=32)
            direct = computation_latency(dev, n_v, n_u, rho, 5, 7, 1) + uplink_latency(32, rho, n_u, uplink_rate(b, ch, dev))
            assert br.total_s == pytest.approx(direct, rel=1e-12)

    def test_unpruned_is_full_latency_plus_probe(self):
        br = latency_breakdown(_device(), _channel(1023.0), 0.1, n_v=1000, n_u=500, rho=0.0, tau_v=10, tau_u=10, tau_u_probe=1, q_bits=32)
        assert br.total_s == pytest.approx(br.t_cmp_personalized_s + br.t_cmp_probe_s + br.t_cmp_global_s + br.t_com_global_s)

    def test_fully_pruned_keeps_fixed_terms(self):
        br = latency_breakdown(_device(), _channel(1023.0), 0.0, n_v=1000, n_u=500, rho=1.0, tau_v=10, tau_u=10, tau_u_probe=1, q_bits=32)
        assert math.isinf(br.t_com_global_s)
        assert br.total_s == pytest.approx(br.t_cmp_personalized_s + br.t_cmp_probe_s)


class TestSampleChannel:
    def test_deterministic(self):
        a = sample_channel(7, 2.0, 10)
        b = sample_channel(7, 2.0, 10)
        assert np.array_equal(a.gains_linear, b.gains_linear)

    def test_empirical_mean(self):
        ch = sample_channel(1, 3.5, 1_000_000)
        assert ch.gains_linear.mean() == pytest.approx(3.5, rel=0.01)

    def test_single_device(self):
        ch = sample_channel(0, 1.0, 1)
        assert ch.gains_linear.shape == (1,)
        assert ch.gains_linear[0] > 0

    def test_tuple_seed_gives_distinct_rounds(self):
        a = sample_channel((0, 0, 1), 1.0, 5)
        b = sample_channel((0, 0, 2), 1.0, 5)
        assert not np.array_equal(a.gains_linear, b.gains_linear)

    def test_nonpositive_mean_rejected(self):
        with pytest.raises(WirelessError):
            sample_channel(0, 0.0, 3)
