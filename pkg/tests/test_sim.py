import math

import numpy as np
import pytest

from snowsim.scenario import (
    ChannelBlock,
    MacConfig,
    NodeSpec,
    PhyBlock,
    RunBlock,
    ScenarioConfig,
    TrafficSpec,
)
from snowsim.sim import (
    EnergyProfile,
    Simulator,
    account_energy,
    calibrate_chip_error,
    chip_error_probability,
    mobility_step,
    run_scenario,
    trace_csv,
)
from snowsim.channel import doppler_shift_hz

CC1070 = EnergyProfile()   # tx 17.5 mA, rx 18.8 mA, idle 0.5 mA, sleep 0.2 uA, 3 V

FRAME_OVERHEAD = 12


def airtime_ticks(payload_bytes, r=8):
    return (FRAME_OVERHEAD + payload_bytes) * 8 * r


def base_config(n_nodes=1, count=5, payload=28, ack="none", horizon=400_000,
                seed=7, **kw):
    nodes = [NodeSpec(i, position=(50.0 + 17.0 * i, 13.0 * i),
                      traffic=TrafficSpec(kind="saturated", count=count,
                                          payload_bytes=payload))
             for i in range(n_nodes)]
    mac = MacConfig(ack_mode=ack,
                    downlink_subcarrier=26 if ack == "bitvector" else None,
                    comm_range_m=kw.pop("comm_range_m", 1e6))
    cfg = ScenarioConfig(nodes=nodes, mac=mac,
                         run=RunBlock(horizon_ticks=horizon, seed=seed),
                         **kw)
    cfg.beacon_period_ticks = 0
    return cfg


# ---------------------------------------------------------------- energy

def test_energy_single_40_byte_frame():
    # 2560 chips at 400 kchip/s = 6.4 ms of Tx: 17.5 mA * 3 V * 6.4 ms = 0.336 mJ
    dur = airtime_ticks(28) * 2.5e-6
    assert dur == pytest.approx(6.4e-3)
    mj = account_energy({"tx": dur}, CC1070)
    assert mj == pytest.approx(0.336, rel=1e-9)
    assert mj == pytest.approx(0.34, rel=0.02)


def test_energy_zero_duration_and_linearity():
    assert account_energy({}, CC1070) == 0.0
    d = {"tx": 1e-3, "rx": 2e-3, "idle": 3e-3, "sleep": 4e-3}
    one = account_energy(d, CC1070)
    two = account_energy({k: 2 * v for k, v in d.items()}, CC1070)
    assert two == pytest.approx(2 * one, rel=1e-12)


def test_zero_traffic_energy_is_sleep_times_horizon():
    cfg = base_config(n_nodes=2, horizon=100_000)
    for n in cfg.nodes:
        n.traffic = TrafficSpec(kind="none")
    report = run_scenario(cfg)
    horizon_s = 100_000 * 2.5e-6
    expected = account_energy({"sleep": horizon_s}, CC1070)
    for m in report.per_node.values():
        assert m["energy_mj"] == pytest.approx(expected, rel=1e-12)


# ---------------------------------------------------------------- mobility

def test_mobility_static():
    pos, v, theta = mobility_step((10.0, 20.0), 0.0, 1.0, 5.0)
    assert pos == (10.0, 20.0)


def test_mobility_displacement_east():
    pos, v, _ = mobility_step((0.0, 0.0), 8.94, 0.0, 10.0)
    assert pos[0] == pytest.approx(89.4)
    assert pos[1] == pytest.approx(0.0)


def test_mobility_theta_feeds_doppler():
    # moving straight away from the BS: theta = pi, doppler negative
    pos, v, theta = mobility_step((100.0, 0.0), 10.0, 0.0, 1.0, bs_pos=(0, 0))
    assert theta == pytest.approx(math.pi)
    assert doppler_shift_hz(500e6, v, theta) == pytest.approx(
        -500e6 * 10.0 / 299_792_458.0, rel=1e-9)


def test_sim_hands_doppler_to_link():
    cfg = base_config(n_nodes=1, count=1)
    cfg.nodes[0].speed_mps = 10.0
    cfg.nodes[0].heading_deg = 0.0
    cfg.nodes[0].mobility_update_ticks = 1000
    sim = Simulator(cfg)
    sim.run()
    sn = sim.nodes[0]
    f_c = sim.plan.center(sn.rec.assigned)
    expected = doppler_shift_hz(f_c, 10.0, sn.theta_rad)
    assert sn.rec.cfo_hz == pytest.approx(expected, rel=1e-12)


# ---------------------------------------------------------------- single node

def test_single_node_noiseless_prr_and_latency():
    """PRR 1.0 and mean latency = E[backoff] + 2 + airtime ticks.

    The automaton spends the arrival tick waking, k ticks counting down,
    one tick entering CCA, transmits on the next, so delivery lands at
    arrival + k + 2 + airtime with k uniform on [0, 32).
    """
    count = 100
    cfg = base_config(n_nodes=1, count=count, horizon=3_000_000)
    report = run_scenario(cfg)
    node = report.per_node[0]
    assert node["sent"] == count
    assert node["delivered"] == count
    assert node["prr"] == 1.0
    air = airtime_ticks(28)
    expected_ticks = (32 - 1) / 2 + 2 + air
    sigma_mean = 32 / math.sqrt(12 * count)
    measured_ticks = node["mean_latency_s"] / 2.5e-6
    assert abs(measured_ticks - expected_ticks) <= 4 * sigma_mean


def test_deterministic_replay_identical_bytes():
    cfg = base_config(n_nodes=5, count=8, ack="bitvector", seed=123)
    cfg.run.trace = True
    a = Simulator(cfg)
    ra = a.run()
    b = Simulator(base_config(n_nodes=5, count=8, ack="bitvector", seed=123))
    rb = b.run()
    assert ra.to_yaml() == rb.to_yaml()
    assert trace_csv(a.trace) == trace_csv(b.trace)


def test_different_seeds_differ():
    ra = run_scenario(base_config(n_nodes=3, count=5, seed=1))
    rb = run_scenario(base_config(n_nodes=3, count=5, seed=2))
    assert ra.mean_latency_s != rb.mean_latency_s


# ---------------------------------------------------------------- conservation

def outcome_counts(trace):
    from collections import Counter
    return Counter(e for _, _, e, _ in trace)


def test_every_attempt_has_exactly_one_outcome():
    cfg = base_config(n_nodes=6, count=10, ack="bitvector", seed=3,
                      comm_range_m=5.0)   # tiny range: hidden terminals collide
    sim = Simulator(cfg)
    sim.run()
    c = outcome_counts(sim.trace)
    attempts = c["tx_start"]
    resolved = c["delivered"] + c["collision"] + c["crc_fail"] + c["lost"]
    assert attempts == resolved
    # and every generated packet ended exactly one way (or is still queued)
    ghost = c.get("ghost_decode", 0)
    assert ghost == 0


def test_prr_less_than_one_under_forced_collisions():
    cfg = base_config(n_nodes=4, count=10, ack="bitvector", seed=5,
                      comm_range_m=1.0)
    # pin every node to one subcarrier by occupying all the others
    report = run_scenario(cfg)
    assert report.delivered <= report.packets_sent


# ---------------------------------------------------------------- dual radio

def test_bs_receives_while_acking_disjoint_subcarrier():
    """Rx keeps decoding during an ACK flight on another subcarrier."""
    cfg = base_config(n_nodes=8, count=6, ack="bitvector", seed=11)
    sim = Simulator(cfg)
    sim.run()
    ack_windows = []
    for t, n, e, sc in sim.trace:
        if e == "ack_tx" and n == "bs":
            ack_windows.append((t, t + sim.ack_airtime))
    deliveries_during_ack = [
        (t, sc) for t, n, e, sc in sim.trace if e == "delivered"
        and any(a < t < b for a, b in ack_windows)]
    assert deliveries_during_ack, "no reception completed during an ACK flight"


def test_ack_flight_blocks_shared_subcarrier_cca():
    # two nodes forced onto one subcarrier; the second node's CCA must read
    # busy while the BS acks the first on it (per-subcarrier ack mode)
    nodes = [NodeSpec(0, position=(10.0, 0.0),
                      traffic=TrafficSpec(kind="saturated", count=4,
                                          payload_bytes=28)),
             NodeSpec(1, position=(11.0, 0.0),
                      traffic=TrafficSpec(kind="saturated", count=4,
                                          payload_bytes=28,
                                          start_tick=500))]
    band_start = 547_000_000
    cfg = ScenarioConfig(band_start_hz=band_start,
                         band_end_hz=band_start + 400_000,
                         mac=MacConfig(ack_mode="per_subcarrier",
                                       comm_range_m=1e6),
                         nodes=nodes,
                         run=RunBlock(horizon_ticks=400_000, seed=2))
    cfg.beacon_period_ticks = 0
    sim = Simulator(cfg)
    sim.run()
    ack_windows = [(t, t + sim.ack_airtime)
                   for t, n, e, sc in sim.trace if e == "ack_tx"]
    busy_during_ack = [t for t, n, e, sc in sim.trace if e == "cca_busy"
                       and any(a <= t < b for a, b in ack_windows)]
    assert busy_during_ack, "CCA never sensed the BS ACK on the shared subcarrier"


# ---------------------------------------------------------------- relay

def test_peer_relay_via_bs_latency_closed_form():
    beacon_period = 60_000
    nodes = [NodeSpec(0, position=(10.0, 0.0),
                      traffic=TrafficSpec(kind="saturated", count=1),
                      peer_dst=1),
             NodeSpec(1, position=(20.0, 0.0),
                      traffic=TrafficSpec(kind="none"))]
    cfg = ScenarioConfig(nodes=nodes,
                         mac=MacConfig(ack_mode="none", comm_range_m=1e6,
                                       downlink_subcarrier=26),
                         run=RunBlock(horizon_ticks=200_000, seed=4))
    cfg.beacon_period_ticks = beacon_period
    sim = Simulator(cfg)
    sim.run()
    enq = next(t for t, n, e, _ in sim.trace if e == "relay_enqueue")
    deliver = next(t for t, n, e, _ in sim.trace if e == "relay_deliver")
    # next beacon after the uplink completes, plus the downlink airtime
    k = math.ceil(enq / beacon_period)
    assert deliver == k * beacon_period + sim.beacon_airtime


# ---------------------------------------------------------------- calibration

def test_calibration_monotone_and_interpolates():
    from snowsim.phy import ModulationScheme
    table = calibrate_chip_error(ModulationScheme("bpsk"), [-20, -10, 0, 10],
                                 chips_per_point=2000, seed=1)
    p_lo = sum(chip_error_probability(table, -20.0))
    p_hi = sum(chip_error_probability(table, 10.0))
    assert p_lo > p_hi
    mid = chip_error_probability(table, -15.0)
    lo, hi = table[-20.0], table[-10.0]
    assert min(lo[0], hi[0]) <= mid[0] <= max(lo[0], hi[0])


def test_abstract_noise_uses_calibration_table():
    from snowsim.phy import ModulationScheme
    table = calibrate_chip_error(ModulationScheme("bpsk"),
                                 [-40, -30, -20, -10, 0, 10],
                                 chips_per_point=2000, seed=2)
    cfg = base_config(n_nodes=1, count=40, seed=9,
                      channel=ChannelBlock(noise_floor_dbm=-10.0,
                                           calibration_table=table,
                                           path_loss_exponent=3.2))
    cfg.nodes[0].position = (80.0, 0.0)   # loss ~ 61 dB at 0 dBm: snr ~ -51 dB
    report = run_scenario(cfg)
    assert report.prr < 1.0

    cfg2 = base_config(n_nodes=1, count=40, seed=9,
                       channel=ChannelBlock(noise_floor_dbm=-120.0,
                                            calibration_table=table,
                                            path_loss_exponent=3.2))
    cfg2.nodes[0].position = (80.0, 0.0)  # snr ~ +59 dB: clean
    assert run_scenario(cfg2).prr == 1.0


def test_abstract_noise_without_table_raises():
    cfg = base_config(n_nodes=1, count=2,
                      channel=ChannelBlock(noise_floor_dbm=-90.0))
    with pytest.raises(RuntimeError, match="calibrat"):
        run_scenario(cfg)


# ---------------------------------------------------------------- ATPC in sim

def test_atpc_raises_power_until_pdr_recovers():
    from snowsim.scenario import AtpcBlock
    # cliff: clean at snr >= -4 dB, hopeless below -5
    table = {-100.0: (0.5, 0.5), -5.0: (0.5, 0.5), -4.0: (0.0, 0.0),
             100.0: (0.0, 0.0)}
    cfg = base_config(n_nodes=1, count=60, ack="none", seed=13,
                      horizon=30_000_000,
                      channel=ChannelBlock(noise_floor_dbm=-60.0,
                                           calibration_table=table))
    # loss at 200 m (exponent 3.2) is 73.6 dB: the cliff needs >= 9.6 dBm,
    # but the stale model starts the node at 6 dBm, which always fails
    cfg.nodes[0].position = (200.0, 0.0)
    cfg.atpc = AtpcBlock(enabled=True, update_every_packets=10,
                         initial_a=5.0, initial_b=60.0)
    sim = Simulator(cfg)
    report = sim.run()
    # first window of 10 all fail; the intercept update pushes power to the
    # top level and the remaining 50 packets get through
    assert report.delivered == 50
    assert sim.nodes[0].rec.tx_power_dbm >= 10.0
    assert any(e == "atpc_power" for _, _, e, _ in sim.trace)


# ---------------------------------------------------------------- legacy TDMA

def test_legacy_tdma_round_robin_with_repeats():
    nodes = [NodeSpec(i, position=(10.0 * (i + 1), 0.0),
                      traffic=TrafficSpec(kind="saturated", count=2,
                                          payload_bytes=4))
             for i in range(5)]
    cfg = ScenarioConfig(band_start_hz=547_000_000,
                         band_end_hz=547_000_000 + 600_000,   # 2 subcarriers
                         mac=MacConfig(ack_mode="none", comm_range_m=1e6),
                         mac_mode="legacy_tdma", gamma_repeats=2,
                         nodes=nodes,
                         run=RunBlock(horizon_ticks=600_000, seed=6))
    cfg.beacon_period_ticks = 4000
    sim = Simulator(cfg)
    report = sim.run()
    c = outcome_counts(sim.trace)
    # every serviced packet is transmitted gamma times (both repeats land)
    assert report.delivered == 10
    assert c["tx_start"] == 2 * report.delivered
    assert report.prr == 1.0
    # both subcarriers in use, groups of two
    used = {sc for _, _, e, sc in sim.trace if e == "tx_start"}
    assert used == {0, 1}


# ---------------------------------------------------------------- full mode

def full_config(n_nodes, count=2, payload=6, seed=21, **kw):
    nodes = [NodeSpec(i, position=(30.0 + 10.0 * i, 0.0),
                      traffic=TrafficSpec(kind="saturated", count=count,
                                          payload_bytes=payload))
             for i in range(n_nodes)]
    cfg = ScenarioConfig(nodes=nodes,
                         mac=MacConfig(ack_mode="none", comm_range_m=1e6),
                         run=RunBlock(horizon_ticks=60_000, seed=seed,
                                      phy_mode="full"),
                         **kw)
    cfg.beacon_period_ticks = 0
    return cfg


def test_full_mode_bit_exact_delivery():
    cfg = full_config(3, count=2)
    sim = Simulator(cfg)
    report = sim.run()
    assert report.delivered == 6
    assert report.prr == 1.0
    c = outcome_counts(sim.trace)
    assert c["delivered"] == 6 and c.get("lost", 0) == 0


def test_full_mode_one_transform_per_tick():
    from snowsim.phy import transform_counter
    cfg = full_config(4, count=1)
    sim = Simulator(cfg)
    transform_counter.reset()
    sim.run()
    assert transform_counter.count == cfg.run.horizon_ticks


def test_full_mode_uncompensated_cfo_breaks_link():
    cfg = full_config(1, count=3)
    cfg.nodes[0].cfo_ppm = 80.0         # ~44 kHz at 547 MHz: 0.22 of spacing
    cfg.channel.cfo_feedback = False
    report = run_scenario(cfg)
    assert report.prr < 1.0

    cfg2 = full_config(1, count=3)
    cfg2.nodes[0].cfo_ppm = 80.0
    cfg2.channel.cfo_feedback = True    # join feedback pre-compensates
    report2 = run_scenario(cfg2)
    assert report2.prr == 1.0


def test_full_and_abstract_agree_when_clean():
    full = run_scenario(full_config(2, count=2, seed=5))
    cfg = full_config(2, count=2, seed=5)
    cfg.run.phy_mode = "abstract"
    abstract = run_scenario(cfg)
    assert full.delivered == abstract.delivered == 4


def test_full_mode_waveform_dump(tmp_path):
    from snowsim.phy import load_waveform
    cfg = full_config(1, count=1)
    cfg.run.horizon_ticks = 3000
    cfg.run.waveform_dump = str(tmp_path / "capture.iq")
    sim = Simulator(cfg)
    sim.run()
    buf, meta = load_waveform(cfg.run.waveform_dump)
    assert meta["fft_size"] == 64
    assert meta["plan_hash"] == sim.plan.plan_hash()
    assert len(buf) == cfg.run.horizon_ticks * 64
    assert np.abs(buf.samples).max() > 0
