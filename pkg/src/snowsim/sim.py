"""Deterministic discrete-event network simulator.

Time advances in ticks of one chip period. Awake nodes step the CSMA/CA
automaton every tick; transmissions, ACK timeouts, beacons and mobility are
heap events ordered by (tick, sequence number), so identical configs replay
identically. The BS has two radios: the Rx path resolves uplink transmissions
while the Tx path carries ACKs, beacons and relays, concurrently.

Two PHY fidelities:

* "abstract": no waveform. Same-subcarrier overlap at the BS is mutual loss;
  chip errors, when a noise floor and a calibration table are configured, are
  drawn from per-link SNR. Scales to hundreds of nodes.
* "full": every transmission is a real baseband buffer; the BS sums the
  active slices each tick, runs the single G-FFT, and feeds the decode
  matrix, so deliveries are bit-exact decodes. Meant for small scenarios.

Carrier sensing is a received-magnitude threshold test evaluated on the
audibility graph (transmitter within the sensing node's communication range,
or any BS transmission on that subcarrier).
"""

from __future__ import annotations

from dataclasses import dataclass, field
import heapq
import math
from typing import Optional

import numpy as np
from scipy import stats as _stats

from . import atpc as _atpc
from .channel import LinkModel, doppler_shift_hz, path_loss_db
from .mac import (
    BaseStation,
    NodeRecord,
    allocate_subcarriers,
    bs_ack_encode,
    csma_step,
    on_ack,
    on_ack_timeout,
    on_tx_end,
    tdma_groups,
)
from .phy import (
    DEFAULT_FRAME,
    CrcFailure,
    DecodeMatrix,
    ModulationScheme,
    Packet,
    baseband_offset_hz,
    decode_step,
    frame_packet,
    gfft_tick,
    grid_sample_rate_hz,
    node_modulate,
)
from .scenario import EnergyBlock, ScenarioConfig

__all__ = [
    "EnergyProfile", "Event", "MetricsReport", "Simulator",
    "run_scenario", "account_energy", "mobility_step", "trace_csv",
    "calibrate_chip_error", "chip_error_probability",
]

EnergyProfile = EnergyBlock   # radio current profile (defaults: CC1070 at 3 V)

# node state -> radio mode for the energy ledger
_RADIO_MODE = {"sleep": "sleep", "backoff": "idle", "cca": "rx",
               "tx": "tx", "await_ack": "rx", "rx": "rx"}


def account_energy(durations_s: dict, profile: EnergyProfile) -> float:
    """Millijoules for per-mode dwell times: sum dur * I(mode) * V * 1000."""
    amps = {"tx": profile.tx_ma * 1e-3, "rx": profile.rx_ma * 1e-3,
            "idle": profile.idle_ma * 1e-3, "sleep": profile.sleep_ua * 1e-6}
    total = 0.0
    for mode, dur in durations_s.items():
        if dur < 0:
            raise ValueError("negative duration")
        total += dur * amps[mode] * profile.supply_v * 1000.0
    return total


def mobility_step(position, speed_mps: float, heading_rad: float, dt_s: float,
                  bs_pos=(0.0, 0.0)):
    """Straight-line displacement; returns (new_pos, speed, theta_to_bs)."""
    if speed_mps < 0:
        raise ValueError("speed must be >= 0")
    x = position[0] + speed_mps * dt_s * math.cos(heading_rad)
    y = position[1] + speed_mps * dt_s * math.sin(heading_rad)
    to_bs = (bs_pos[0] - x, bs_pos[1] - y)
    norm = math.hypot(*to_bs)
    if norm == 0 or speed_mps == 0:
        theta = 0.0
    else:
        cos_t = (math.cos(heading_rad) * to_bs[0]
                 + math.sin(heading_rad) * to_bs[1]) / norm
        theta = math.acos(max(-1.0, min(1.0, cos_t)))
    return (x, y), speed_mps, theta


# ---------------------------------------------------------------------------
# chip-error calibration (full-sample Monte-Carlo -> table for abstract mode)
# ---------------------------------------------------------------------------

def calibrate_chip_error(scheme: ModulationScheme, snr_grid_db,
                         chips_per_point: int = 4000, fft_size: int = 64,
                         seed: int = 0) -> dict:
    """Measure chip error probabilities through the real demodulation path.

    A unit tone carries random chips on a bin-aligned subcarrier; complex
    AWGN is added at each per-sample SNR; the G-FFT center-bin decision runs
    with the scheme's thresholds. Returns {snr_db: (p_one_to_zero,
    p_zero_to_one)} suitable for ChannelBlock.calibration_table.
    """
    rng = np.random.default_rng(seed)
    m = fft_size
    table = {}
    for snr_db in snr_grid_db:
        sigma = 10.0 ** (-float(snr_db) / 20.0)
        chips = rng.integers(0, 2, chips_per_point)
        sym = np.where(chips == 1, -1.0, 1.0) if scheme.kind == "bpsk" \
            else chips.astype(float)
        x = np.repeat(sym, m).astype(complex)     # DC-subcarrier tone
        noise = sigma / math.sqrt(2) * (rng.standard_normal(x.size)
                                        + 1j * rng.standard_normal(x.size))
        spec = np.fft.fft((x + noise).reshape(-1, m), axis=1)[:, 0]
        if scheme.kind == "ook":
            decided = np.abs(spec) >= scheme.amplitude_threshold
        else:
            # chip 0 transmits at phase 0; flips land near 180 degrees
            dphi = np.abs((np.degrees(np.angle(spec)) + 180) % 360 - 180)
            decided = dphi > 90.0
        ones = chips == 1
        p10 = float(np.mean(~decided[ones])) if ones.any() else 0.0
        p01 = float(np.mean(decided[~ones])) if (~ones).any() else 0.0
        table[float(snr_db)] = (p10, p01)
    return table


def chip_error_probability(table: dict, snr_db: float) -> tuple[float, float]:
    """Piecewise-linear interpolation of the calibration table in dB."""
    keys = sorted(float(k) for k in table)
    vals = [tuple(table[k]) for k in keys]
    if snr_db <= keys[0]:
        return vals[0]
    if snr_db >= keys[-1]:
        return vals[-1]
    hi = next(i for i, k in enumerate(keys) if k >= snr_db)
    lo = hi - 1
    w = (snr_db - keys[lo]) / (keys[hi] - keys[lo])
    return (vals[lo][0] * (1 - w) + vals[hi][0] * w,
            vals[lo][1] * (1 - w) + vals[hi][1] * w)


def _packet_survival_probability(frame_bits: np.ndarray, r: int,
                                 p10: float, p01: float) -> float:
    """Majority-despread packet survival given per-chip error rates."""
    if p10 == 0.0 and p01 == 0.0:
        return 1.0
    n1 = int(frame_bits.sum())
    n0 = int(frame_bits.size - n1)
    # a transmitted 1 survives iff more than r/2 chips read as 1
    good1 = 1.0 - float(_stats.binom.cdf(r // 2, r, 1.0 - p10))
    # a transmitted 0 survives unless more than r/2 chips read as 1 (tie -> 0)
    good0 = float(_stats.binom.cdf(r // 2, r, p01))
    return good1 ** n1 * good0 ** n0


# ---------------------------------------------------------------------------
# events and bookkeeping records
# ---------------------------------------------------------------------------

@dataclass(order=True)
class Event:
    tick: int
    seq: int
    kind: str = field(compare=False)
    data: object = field(compare=False, default=None)


@dataclass
class _Tx:
    node_id: int
    subcarrier: int
    start: int
    end: int
    packet: Packet
    arrival: int
    collided: bool = False
    resolved: bool = False
    tdma_final: bool = True                   # last repeat of a legacy burst
    samples: Optional[np.ndarray] = None      # full mode waveform at the BS


@dataclass
class _BsTx:
    subcarriers: tuple
    start: int
    end: int
    kind: str                                 # "ack" | "beacon"
    acked: tuple = ()                         # ((subcarrier, (node ids...)),)
    directed: tuple = ()                      # conflicted subcarriers
    relays: tuple = ()                        # (dst, payload) delivered at end


@dataclass
class _SimNode:
    spec: object
    rec: NodeRecord
    rng: np.random.Generator
    queue: list = field(default_factory=list)   # arrival ticks awaiting service
    arrival: Optional[int] = None               # arrival tick of packet in service
    seq: int = 0
    remaining: Optional[int] = None
    sent: int = 0
    delivered: int = 0
    dropped: int = 0
    delivered_current: bool = False             # legacy-mode repeat dedup
    latencies: list = field(default_factory=list)
    durations: dict = field(default_factory=lambda: {
        "sleep": 0, "idle": 0, "rx": 0, "tx": 0})
    since: int = 0
    ack_gen: int = 0
    window_outcomes: list = field(default_factory=list)
    power_model: Optional[object] = None
    heading_rad: float = 0.0
    theta_rad: float = 0.0

    def payload(self) -> bytes:
        base = bytes([self.rec.id & 0xFF, self.seq & 0xFF])
        need = self.spec.traffic.payload_bytes
        if need == 0:
            return b""
        reps = need // len(base) + 1
        return (base * reps)[:need]


@dataclass
class MetricsReport:
    horizon_ticks: int
    tick_duration_s: float
    per_node: dict
    packets_sent: int
    delivered: int
    prr: float
    throughput_bps: float
    mean_latency_s: float
    energy_mj: float

    def to_dict(self) -> dict:
        return {
            "horizon_ticks": self.horizon_ticks,
            "tick_duration_s": self.tick_duration_s,
            "aggregate": {
                "packets_sent": self.packets_sent,
                "delivered": self.delivered,
                "prr": self.prr,
                "throughput_bps": self.throughput_bps,
                "mean_latency_s": self.mean_latency_s,
                "energy_mj": self.energy_mj,
            },
            "per_node": {nid: dict(m) for nid, m in sorted(self.per_node.items())},
        }

    def to_yaml(self) -> str:
        import yaml
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


def trace_csv(rows) -> str:
    lines = ["tick,node,event,subcarrier"]
    lines += [f"{t},{n},{e},{sc}" for t, n, e, sc in rows]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# the simulator
# ---------------------------------------------------------------------------

class Simulator:
    def __init__(self, cfg: ScenarioConfig):
        cfg.validate()
        self.cfg = cfg
        self.plan = cfg.plan()
        self.scheme = ModulationScheme(cfg.phy.modulation,
                                       cfg.phy.spreading_factor,
                                       cfg.phy.amplitude_threshold,
                                       cfg.phy.phase_threshold_deg)
        self.mac_cfg = cfg.mac
        self.horizon = cfg.run.horizon_ticks
        self.tick_s = cfg.run.tick_duration_s
        self.full = cfg.run.phy_mode == "full"
        self.tdma = cfg.mac_mode == "legacy_tdma"
        self.trace: list = []
        self.heap: list = []
        self._seq = 0
        self.tick = -1

        seeds = np.random.SeedSequence(cfg.run.seed).spawn(len(cfg.nodes) + 2)
        self.noise_rng = np.random.default_rng(seeds[-1])
        self.bs_rng = np.random.default_rng(seeds[-2])

        self.bs = BaseStation(self.plan, cfg.mac, self.scheme)
        self.nodes: dict[int, _SimNode] = {}
        records = []
        for i, spec in enumerate(sorted(cfg.nodes, key=lambda s: s.id)):
            rec = NodeRecord(spec.id, position=tuple(spec.position),
                             tx_power_dbm=spec.tx_power_dbm)
            sn = _SimNode(spec, rec, np.random.default_rng(seeds[i]))
            sn.remaining = spec.traffic.count if spec.traffic.count else None
            sn.heading_rad = math.radians(spec.heading_deg)
            if cfg.atpc.enabled:
                sn.power_model = _atpc.PowerModel(
                    cfg.atpc.initial_a, cfg.atpc.initial_b,
                    tuple(cfg.atpc.tp_levels), cfg.atpc.pdr_threshold)
                rec.tx_power_dbm = _atpc.select_power(sn.power_model)
            self.nodes[spec.id] = sn
            records.append(rec)

        self.assignment = None
        if records:
            self.assignment = allocate_subcarriers(
                records, self.plan, cfg.mac.comm_range_m,
                reserved=sorted(self.bs.reserved))
            self.bs.assignment = self.assignment
            for rec in records:
                self.bs.nodes[rec.id] = rec
                self.bs.last_heard[rec.id] = 0
                self._trace(0, rec.id, "join", rec.assigned)

        # per-node CFO: crystal ppm scaled to the assigned center; the join
        # feedback (exact over a noiseless exchange) is subtracted at tx time
        for sn in self.nodes.values():
            f_c = self.plan.center(sn.rec.assigned)
            sn.rec.cfo_hz = sn.spec.cfo_ppm * f_c / 1e6
            sn.rec.cfo_feedback_hz = sn.rec.cfo_hz if cfg.channel.cfo_feedback \
                else 0.0

        self.active: dict[int, list] = {i: [] for i in range(self.plan.n)}
        self.bs_tx: list[_BsTx] = []
        self.pending_acks: dict[int, set] = {}
        self.pending_fails: set = set()
        self.unresolved: dict[int, list] = {i: [] for i in range(self.plan.n)}

        overhead = DEFAULT_FRAME.overhead_bytes
        r = self.scheme.spreading_factor
        self._uplink_airtimes = {
            sn.rec.id: (overhead + sn.spec.traffic.payload_bytes) * 8 * r
            for sn in self.nodes.values()}
        ack_payload = 1 + (self.plan.n + 7) // 8 \
            if cfg.mac.ack_mode == "bitvector" else 2
        self.ack_airtime = (overhead + ack_payload) * 8 * r
        self.beacon_airtime = (overhead + 1) * 8 * r

        if self.full:
            self.fs = grid_sample_rate_hz(self.plan, cfg.phy.fft_size)
            self.m = cfg.phy.fft_size
            self.matrix = DecodeMatrix(self.plan, self.scheme)
            self._dump_windows = [] if cfg.run.waveform_dump else None

        for sn in self.nodes.values():
            if sn.spec.traffic.kind != "none":
                self._push(sn.spec.traffic.start_tick, "pkt_arrival", sn.rec.id)
            if sn.spec.mobility_update_ticks:
                self._push(sn.spec.mobility_update_ticks, "mobility_update",
                           sn.rec.id)
        if self.tdma:
            candidates = [i for i in self.plan.usable_indices
                          if i not in self.bs.reserved]
            self._tdma_groups = tdma_groups(sorted(self.nodes), len(candidates))
            self._tdma_slot = {}
            for group in self._tdma_groups:
                for k, nid in enumerate(group):
                    self._tdma_slot[nid] = candidates[k]
            self._tdma_cycle = 0
            self._push(0, "tdma_phase", None)
        elif cfg.beacon_period_ticks:
            self._push(cfg.beacon_period_ticks, "beacon", None)

    # ------------------------------------------------------------ plumbing

    def _push(self, tick: int, kind: str, data) -> None:
        self._seq += 1
        heapq.heappush(self.heap, Event(int(tick), self._seq, kind, data))

    def _trace(self, tick: int, node, event: str, subcarrier) -> None:
        self.trace.append((tick, "bs" if node is None else node, event,
                           -1 if subcarrier is None else subcarrier))

    def _account_upto(self, sn: _SimNode, tick: int) -> None:
        """Close the dwell under the node's current state at `tick`."""
        mode = _RADIO_MODE[sn.rec.state]
        sn.durations[mode] += tick - sn.since
        sn.since = tick

    # ------------------------------------------------------------ channel

    def _link_loss_db(self, sn: _SimNode) -> float:
        d = max(1.0, math.hypot(*sn.rec.position))
        model = LinkModel(distance_m=d,
                          path_loss_exponent=self.cfg.channel.path_loss_exponent,
                          reference_loss_db=self.cfg.channel.reference_loss_db)
        return path_loss_db(d, model)

    def _link_snr_db(self, sn: _SimNode) -> Optional[float]:
        floor = self.cfg.channel.noise_floor_dbm
        if floor is None:
            return None
        return sn.rec.tx_power_dbm - self._link_loss_db(sn) - floor

    def _audible(self, listener: _SimNode, talker: _SimNode) -> bool:
        d = math.dist(listener.rec.position, talker.rec.position)
        return d <= self.cfg.mac.comm_range_m

    def _cca_busy(self, sn: _SimNode, tick: int) -> bool:
        sc = sn.rec.assigned
        for tx in self.active[sc]:
            if tx.node_id != sn.rec.id and tx.start <= tick < tx.end and \
                    self._audible(sn, self.nodes[tx.node_id]):
                return True
        return any(sc in btx.subcarriers and btx.start <= tick < btx.end
                   for btx in self.bs_tx)

    # ------------------------------------------------------------ traffic

    def _schedule_next_arrival(self, sn: _SimNode, tick: int) -> None:
        t = sn.spec.traffic
        if sn.remaining is not None and sn.remaining <= 0:
            return
        if t.kind == "saturated":
            self._push(tick + max(0, t.interval_ticks), "pkt_arrival", sn.rec.id)
        elif t.kind == "periodic":
            self._push(tick + max(1, t.interval_ticks), "pkt_arrival", sn.rec.id)
        elif t.kind == "uniform":
            a, b = t.interval_range
            gap = int(sn.rng.integers(a, b + 1)) if b > a else a
            self._push(tick + max(1, gap), "pkt_arrival", sn.rec.id)

    def _finish_packet(self, sn: _SimNode, tick: int) -> None:
        """Current packet reached a terminal state; service the queue."""
        sn.arrival = None
        sn.seq += 1
        sn.delivered_current = False
        if sn.queue:
            sn.arrival = sn.queue.pop(0)
            sn.rec.pending = True
        else:
            sn.rec.pending = False
        if sn.spec.traffic.kind == "saturated":
            self._schedule_next_arrival(sn, tick)

    # ------------------------------------------------------------ ATPC

    def _atpc_note(self, sn: _SimNode, ok: bool, tick: int) -> None:
        if sn.power_model is None:
            return
        sn.window_outcomes.append(bool(ok))
        if len(sn.window_outcomes) >= self.cfg.atpc.update_every_packets:
            pdr = 100.0 * sum(sn.window_outcomes) / len(sn.window_outcomes)
            sn.window_outcomes.clear()
            sn.power_model = _atpc.update_model(sn.power_model, [pdr])
            new_power = _atpc.select_power(sn.power_model)
            if new_power != sn.rec.tx_power_dbm:
                sn.rec.tx_power_dbm = new_power
                self._trace(tick, sn.rec.id, "atpc_power", sn.rec.assigned)

    # ------------------------------------------------------------ uplink

    def _make_tx(self, sn: _SimNode, tick: int, subcarrier: int,
                 tdma_final: bool = True) -> _Tx:
        pkt = frame_packet(sn.payload(), src=sn.rec.id, subcarrier=subcarrier)
        end = tick + self._uplink_airtimes[sn.rec.id]
        arrival = sn.arrival if sn.arrival is not None else tick
        tx = _Tx(sn.rec.id, subcarrier, tick, end, pkt, arrival,
                 tdma_final=tdma_final)
        for other in self.active[subcarrier]:
            if other.start < tx.end and other.end > tx.start:
                tx.collided = True
                other.collided = True
        if any(subcarrier in btx.subcarriers
               and btx.start < tx.end and btx.end > tx.start
               for btx in self.bs_tx):
            tx.collided = True
        if self.full:
            buf = node_modulate(pkt, self.scheme,
                                baseband_offset_hz(self.plan, subcarrier),
                                self.fs, self.m)
            amp = 10.0 ** ((sn.rec.tx_power_dbm - self._link_loss_db(sn)
                            + self.cfg.channel.rx_gain_db) / 20.0)
            x = buf.samples * amp
            df = sn.rec.cfo_hz - sn.rec.cfo_feedback_hz
            if df:
                x = x * np.exp(2j * np.pi * df * np.arange(x.size) / self.fs)
            tx.samples = x
            self.unresolved[subcarrier].append(tx)
            self._push(end + 16 * self.scheme.spreading_factor,
                       "decode_deadline", tx)
        self.active[subcarrier].append(tx)
        self._push(end, "tx_end", tx)
        self._trace(tick, sn.rec.id, "tx_start", subcarrier)
        return tx

    def _start_tx(self, sn: _SimNode, tick: int) -> None:
        if sn.rec.attempts == 0:
            sn.sent += 1
        self._make_tx(sn, tick, sn.rec.assigned)

    def _ack_timeout_ticks(self, sn: _SimNode) -> int:
        # the ack rides the BS Tx radio's next flight, which may start only
        # after a flight already in the air (plus at most one beacon) ends
        base = 1 + 2 * self.ack_airtime + self.beacon_airtime + 2
        occupants = len(self.assignment.occupants[sn.rec.assigned])
        if occupants > 1:
            # shared subcarrier: listen up to G * D_p before retransmitting
            base = max(base, occupants * self._uplink_airtimes[sn.rec.id])
        return base

    def _on_tx_end(self, tx: _Tx, tick: int) -> None:
        sn = self.nodes[tx.node_id]
        self.active[tx.subcarrier].remove(tx)
        if not self.full:
            self._resolve_abstract(tx, tick)
        if self.tdma:
            if tx.tdma_final:
                self._account_upto(sn, tick)
                sn.rec.state = "sleep"
                self._finish_packet(sn, tick)
            self._trace(tick, tx.node_id, "tx_end", tx.subcarrier)
            return
        self._account_upto(sn, tick)
        on_tx_end(sn.rec, self.mac_cfg)
        self._trace(tick, tx.node_id, "tx_end", tx.subcarrier)
        if self.mac_cfg.ack_mode != "none":
            sn.ack_gen += 1
            self._push(tick + self._ack_timeout_ticks(sn), "ack_timeout",
                       (tx.node_id, sn.ack_gen))
        else:
            self._finish_packet(sn, tick)

    def _resolve_abstract(self, tx: _Tx, tick: int) -> None:
        sn = self.nodes[tx.node_id]
        if tx.collided:
            self._deliver_failure(tx, tick, "collision")
            return
        snr = self._link_snr_db(sn)
        if snr is not None:
            table = self.cfg.channel.calibration_table
            if table is None:
                raise RuntimeError(
                    "abstract mode with a noise floor needs a calibration "
                    "table; run the calibrate command first")
            p10, p01 = chip_error_probability(table, snr)
            survive = _packet_survival_probability(
                tx.packet.frame_bits(), self.scheme.spreading_factor, p10, p01)
            if sn.rng.random() >= survive:
                self._deliver_failure(tx, tick, "crc_fail")
                return
        self._deliver_success(tx, tick)

    def _deliver_success(self, tx: _Tx, tick: int) -> None:
        sn = self.nodes[tx.node_id]
        if not sn.delivered_current:
            sn.delivered += 1
            sn.delivered_current = True
            sn.latencies.append(tick - tx.arrival)
        self.bs.note_uplink(tx.node_id, tick)
        self.bs.record_outcome(tx.subcarrier, True)
        self._atpc_note(sn, True, tick)
        self._trace(tick, tx.node_id, "delivered", tx.subcarrier)
        if sn.spec.peer_dst is not None:
            if self.bs.enqueue_peer(tx.node_id, sn.spec.peer_dst,
                                    tx.packet.payload):
                self._trace(tick, tx.node_id, "relay_enqueue", tx.subcarrier)
        if self.mac_cfg.ack_mode != "none" and not self.tdma:
            self.pending_acks.setdefault(tx.subcarrier, set()).add(tx.node_id)
            self._push(tick + 1, "bs_tx_kick", None)

    def _deliver_failure(self, tx: _Tx, tick: int, how: str) -> None:
        self.bs.record_outcome(tx.subcarrier, False)
        self._atpc_note(self.nodes[tx.node_id], False, tick)
        self._trace(tick, tx.node_id, how, tx.subcarrier)
        if self.mac_cfg.ack_mode != "none" and not self.tdma:
            self.pending_fails.add(tx.subcarrier)

    # ------------------------------------------------------------ BS Tx

    def _bs_radio_busy(self, tick: int) -> bool:
        return any(btx.end > tick for btx in self.bs_tx)

    def _bs_tx_kick(self, tick: int) -> None:
        if not self.pending_acks or self._bs_radio_busy(tick):
            return
        mode = self.mac_cfg.ack_mode
        acked = {sc: tuple(sorted(nids))
                 for sc, nids in sorted(self.pending_acks.items())}
        # a valid and an invalid completion on a shared subcarrier cannot be
        # acknowledged by the shared bit; clear it and ack directly instead
        conflicted = tuple(sorted(set(acked) & self.pending_fails)) \
            if mode == "bitvector" else ()
        self.pending_acks.clear()
        self.pending_fails.clear()
        if mode == "bitvector":
            subs = (self.mac_cfg.downlink_subcarrier,) + conflicted
            bs_ack_encode(set(acked) - set(conflicted), "bitvector", self.plan,
                          self.scheme, self.mac_cfg.downlink_subcarrier)
        else:
            subs = tuple(sorted(acked))
            bs_ack_encode(set(acked), "per_subcarrier", self.plan, self.scheme)
        btx = _BsTx(tuple(subs), tick, tick + self.ack_airtime, "ack",
                    acked=tuple(acked.items()), directed=conflicted)
        self.bs_tx.append(btx)
        self._push(btx.end, "bs_tx_end", btx)
        for sc in subs:
            self._trace(tick, None, "ack_tx", sc)

    def _on_bs_tx_end(self, btx: _BsTx, tick: int) -> None:
        self.bs_tx.remove(btx)
        if btx.kind == "ack":
            for sc, nids in btx.acked:
                for nid in nids:
                    sn = self.nodes.get(nid)
                    if sn is None or sn.rec.state != "await_ack":
                        continue
                    self._account_upto(sn, tick)
                    on_ack(sn.rec)
                    sn.ack_gen += 1
                    self._trace(tick, nid, "ack_rx", sc)
                    self._finish_packet(sn, tick)
        else:
            for dst, payload in btx.relays:
                self._trace(tick, dst, "relay_deliver",
                            self.assignment.by_node.get(dst, -1))
        if self.pending_acks:
            self._push(tick + 1, "bs_tx_kick", None)

    def _on_beacon(self, tick: int) -> None:
        if self._bs_radio_busy(tick):
            self._push(max(btx.end for btx in self.bs_tx) + 1, "beacon", None)
            return
        for nid in self.bs.evict_inactive(tick):
            self._trace(tick, nid, "evict", -1)
        payloads = self.bs.beacon_payloads()
        relays = tuple((p[1], p[2:]) for p in payloads.values()
                       if p and p[0] == 5)    # MSG_DATA
        if payloads:
            btx = _BsTx(tuple(sorted(payloads)), tick,
                        tick + self.beacon_airtime, "beacon", relays=relays)
            self.bs_tx.append(btx)
            self._push(btx.end, "bs_tx_end", btx)
            self._trace(tick, None, "beacon", self.mac_cfg.downlink_subcarrier)
        self._push(tick + self.cfg.beacon_period_ticks, "beacon", None)

    # ------------------------------------------------------------ legacy TDMA

    def _on_tdma_phase(self, tick: int) -> None:
        """Downward control message, then the current group's upward burst."""
        if self._tdma_groups:
            ctrl = self.mac_cfg.downlink_subcarrier
            if ctrl is not None:
                btx = _BsTx((ctrl,), tick, tick + self.beacon_airtime, "beacon")
                self.bs_tx.append(btx)
                self._push(btx.end, "bs_tx_end", btx)
                self._trace(tick, None, "beacon", ctrl)
            group = self._tdma_groups[self._tdma_cycle % len(self._tdma_groups)]
            self._tdma_cycle += 1
            up_start = tick + self.beacon_airtime
            gamma = max(1, self.cfg.gamma_repeats)
            for nid in group:
                sn = self.nodes[nid]
                if sn.arrival is None and not sn.rec.pending:
                    continue
                sc = self._tdma_slot[nid]
                sn.rec.assigned = sc
                self._account_upto(sn, up_start)
                sn.rec.state = "tx"
                sn.sent += 1
                airtime = self._uplink_airtimes[nid]
                for rep in range(gamma):
                    self._make_tx(sn, up_start + rep * airtime, sc,
                                  tdma_final=(rep == gamma - 1))
        self._push(tick + self.cfg.beacon_period_ticks, "tdma_phase", None)

    # ------------------------------------------------------------ full PHY

    def _full_tick(self, tick: int) -> None:
        window = np.zeros(self.m, dtype=np.complex128)
        for txs in self.active.values():
            for tx in txs:
                if tx.start <= tick < tx.end:
                    k = (tick - tx.start) * self.m
                    window += tx.samples[k:k + self.m]
        sigma = self.cfg.channel.noise_sigma
        if sigma:
            window = window + sigma / math.sqrt(2) * (
                self.noise_rng.standard_normal(self.m)
                + 1j * self.noise_rng.standard_normal(self.m))
        if self._dump_windows is not None:
            self._dump_windows.append(window)
        out = gfft_tick(window, self.plan, self.cfg.phy.window)
        suspended = {sc for btx in self.bs_tx if btx.start <= tick < btx.end
                     for sc in btx.subcarriers}
        if suspended:
            # the Tx radio owns these subcarriers right now; the decoder
            # ignores their bins and abandons any partial packet on them
            mags = out.magnitude.copy()
            for sc in suspended:
                mags[sc] = 0.0
                if self.matrix.state[sc] != 0:
                    self.matrix._reset_column(sc)
            out = out._replace(magnitude=mags)
        _, completed = decode_step(self.matrix, out, self.scheme)
        for rec in completed:
            self._match_decode(rec, tick)

    def _match_decode(self, rec, tick: int) -> None:
        pool = self.unresolved[rec.subcarrier]
        if isinstance(rec, CrcFailure):
            if pool:
                tx = pool.pop(0)
                tx.resolved = True
                self._deliver_failure(tx, tick, "crc_fail")
            return
        for i, tx in enumerate(pool):
            if tx.packet.payload == rec.payload:
                pool.pop(i)
                tx.resolved = True
                self._deliver_success(tx, tick)
                return
        self._trace(tick, "bs", "ghost_decode", rec.subcarrier)

    def _decode_deadline(self, tx: _Tx, tick: int) -> None:
        """Full mode: nothing decodable came out of this transmission."""
        if tx.resolved:
            return
        pool = self.unresolved[tx.subcarrier]
        if tx in pool:
            pool.remove(tx)
        tx.resolved = True
        self._deliver_failure(tx, tick, "lost")

    # ------------------------------------------------------------ mobility

    def _on_mobility(self, nid: int, tick: int) -> None:
        sn = self.nodes[nid]
        dt = sn.spec.mobility_update_ticks * self.tick_s
        pos, v, theta = mobility_step(sn.rec.position, sn.spec.speed_mps,
                                      sn.heading_rad, dt)
        sn.rec.position = pos
        sn.theta_rad = theta
        f_c = self.plan.center(sn.rec.assigned)
        doppler = doppler_shift_hz(f_c, v, theta)
        sn.rec.cfo_hz = sn.spec.cfo_ppm * f_c / 1e6 + doppler
        self._trace(tick, nid, "mobility", sn.rec.assigned)
        self._push(tick + sn.spec.mobility_update_ticks, "mobility_update", nid)

    # ------------------------------------------------------------ main loop

    def _any_stepping(self) -> bool:
        if self.tdma:
            return False
        return any(sn.rec.state in ("backoff", "cca")
                   or (sn.rec.state == "sleep" and sn.rec.pending)
                   for sn in self.nodes.values())

    def _step_nodes(self, tick: int) -> None:
        if self.tdma:
            return
        for nid in sorted(self.nodes):
            sn = self.nodes[nid]
            state = sn.rec.state
            if state in ("tx", "await_ack", "rx") or \
                    (state == "sleep" and not sn.rec.pending):
                continue
            busy = self._cca_busy(sn, tick) if state == "cca" else False
            if busy:
                self._trace(tick, nid, "cca_busy", sn.rec.assigned)
            self._account_upto(sn, tick)
            csma_step(sn.rec, busy, sn.rng, self.mac_cfg)
            if sn.rec.state == "tx" and state != "tx":
                self._start_tx(sn, tick)

    def run(self) -> MetricsReport:
        while True:
            if self.full or self._any_stepping():
                self.tick += 1
            elif self.heap:
                self.tick = max(self.heap[0].tick, self.tick + 1)
            else:
                self.tick = self.horizon
            if self.tick > self.horizon:
                self.tick = self.horizon
            while self.heap and self.heap[0].tick <= self.tick:
                ev = heapq.heappop(self.heap)
                self._dispatch(ev)
            if self.tick >= self.horizon:
                break
            self._step_nodes(self.tick)
            if self.full:
                self._full_tick(self.tick)
        if self.full and self._dump_windows is not None:
            from .phy import BasebandBuffer, dump_waveform
            capture = np.concatenate(self._dump_windows) \
                if self._dump_windows else np.zeros(0, dtype=complex)
            dump_waveform(BasebandBuffer(capture, self.fs),
                          self.cfg.run.waveform_dump, self.plan, self.m)
        return self._metrics()

    def _dispatch(self, ev: Event) -> None:
        tick = ev.tick
        if ev.kind == "pkt_arrival":
            sn = self.nodes[ev.data]
            if sn.remaining is not None:
                if sn.remaining <= 0:
                    return
                sn.remaining -= 1
            self._trace(tick, ev.data, "arrival", sn.rec.assigned)
            if sn.arrival is None and not sn.rec.pending:
                sn.arrival = tick
                sn.rec.pending = True
            else:
                sn.queue.append(tick)
            if sn.spec.traffic.kind in ("periodic", "uniform"):
                self._schedule_next_arrival(sn, tick)
        elif ev.kind == "tx_end":
            self._on_tx_end(ev.data, tick)
        elif ev.kind == "ack_timeout":
            nid, gen = ev.data
            sn = self.nodes[nid]
            if sn.ack_gen != gen or sn.rec.state != "await_ack":
                return
            self._account_upto(sn, tick)
            kept = on_ack_timeout(sn.rec, sn.rng, self.mac_cfg)
            self._trace(tick, nid, "ack_timeout", sn.rec.assigned)
            if not kept:
                sn.dropped += 1
                self._trace(tick, nid, "drop", sn.rec.assigned)
                self._finish_packet(sn, tick)
        elif ev.kind == "bs_tx_kick":
            self._bs_tx_kick(tick)
        elif ev.kind == "bs_tx_end":
            self._on_bs_tx_end(ev.data, tick)
        elif ev.kind == "beacon":
            self._on_beacon(tick)
        elif ev.kind == "tdma_phase":
            self._on_tdma_phase(tick)
        elif ev.kind == "mobility_update":
            self._on_mobility(ev.data, tick)
        elif ev.kind == "decode_deadline":
            self._decode_deadline(ev.data, tick)

    # ------------------------------------------------------------ metrics

    def _metrics(self) -> MetricsReport:
        profile = self.cfg.energy
        per_node = {}
        total_sent = total_delivered = 0
        total_bits = 0
        all_latencies = []
        total_energy = 0.0
        for nid, sn in sorted(self.nodes.items()):
            self._account_upto(sn, self.horizon)
            assert sum(sn.durations.values()) == self.horizon, \
                "energy ledger must cover the horizon exactly"
            durations_s = {k: v * self.tick_s for k, v in sn.durations.items()}
            energy = account_energy(durations_s, profile)
            lat = float(np.mean(sn.latencies)) * self.tick_s \
                if sn.latencies else 0.0
            per_node[nid] = {
                "sent": sn.sent,
                "delivered": sn.delivered,
                "prr": sn.delivered / sn.sent if sn.sent else 0.0,
                "throughput_bps": sn.delivered
                * sn.spec.traffic.payload_bytes * 8
                / (self.horizon * self.tick_s),
                "mean_latency_s": lat,
                "energy_mj": energy,
            }
            total_sent += sn.sent
            total_delivered += sn.delivered
            total_bits += sn.delivered * sn.spec.traffic.payload_bytes * 8
            all_latencies.extend(sn.latencies)
            total_energy += energy
        horizon_s = self.horizon * self.tick_s
        return MetricsReport(
            horizon_ticks=self.horizon,
            tick_duration_s=self.tick_s,
            per_node=per_node,
            packets_sent=total_sent,
            delivered=total_delivered,
            prr=total_delivered / total_sent if total_sent else 0.0,
            throughput_bps=total_bits / horizon_s,
            mean_latency_s=float(np.mean(all_latencies)) * self.tick_s
            if all_latencies else 0.0,
            energy_mj=total_energy,
        )


def run_scenario(cfg: ScenarioConfig) -> MetricsReport:
    return Simulator(cfg).run()
