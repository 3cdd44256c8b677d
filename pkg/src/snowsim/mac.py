"""MAC layer: subcarrier allocation, CSMA/CA, ACKs, join and relay logic.

The BS assigns every node one subcarrier, preferring assignments that keep
mutually-hidden nodes apart and loads balanced. Nodes run a TinyOS-flavored
CSMA/CA: random backoff in a fixed initial window, clear-channel assessment,
transmit, and on a busy channel a fixed congestion window; ACKs time out into
the congestion path. The BS has two radios, so it can acknowledge on any set
of subcarriers (or as a bit-vector on a dedicated downlink subcarrier) while
receptions continue everywhere else.

Downlink payloads carry a one-byte message type so nodes can tell ACK
bit-vectors, directed ACKs, beacons, join replies, and relayed data apart.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math
from typing import Optional, Sequence

import numpy as np

from .estimation import estimate_cfo, scale_cfo
from .phy import (
    DEFAULT_FRAME,
    FrameFormat,
    ModulationScheme,
    Packet,
    frame_packet,
    spread_bits,
)
from .spectrum import SubcarrierPlan

__all__ = [
    "MacError", "MacConfig", "NodeRecord", "Assignment", "AckBitVector",
    "JoinReply", "hidden_sets", "allocate_subcarriers", "choose_subcarrier",
    "csma_step", "bs_ack_encode", "BaseStation", "tdma_groups",
    "MSG_ACK_BITVECTOR", "MSG_ACK", "MSG_BEACON", "MSG_JOIN_REPLY", "MSG_DATA",
]

# downlink message types (first payload byte)
MSG_ACK_BITVECTOR = 1
MSG_ACK = 2
MSG_BEACON = 3
MSG_JOIN_REPLY = 4
MSG_DATA = 5


class MacError(ValueError):
    pass


@dataclass
class MacConfig:
    initial_window: int = 32
    congestion_window: int = 128
    retransmit_cap: int = 8            # attempts before drop; None = unbounded
    ack_mode: str = "bitvector"        # "bitvector" | "per_subcarrier" | "none"
    join_subcarrier: Optional[int] = None
    downlink_subcarrier: Optional[int] = None
    backup_subcarriers: tuple = ()
    comm_range_m: float = 100.0
    inactivity_window_ticks: Optional[int] = None
    swap_fail_threshold: float = 0.5   # failure rate that marks a subcarrier bad
    swap_window: int = 20              # sliding outcome window per subcarrier

    def __post_init__(self):
        if self.initial_window < 1 or self.congestion_window < 1:
            raise MacError("backoff windows must be >= 1")
        if self.ack_mode not in ("bitvector", "per_subcarrier", "none"):
            raise MacError(f"unknown ack mode {self.ack_mode!r}")


@dataclass
class NodeRecord:
    id: int
    position: tuple[float, float] = (0.0, 0.0)
    assigned: Optional[int] = None
    backup: tuple = ()
    state: str = "sleep"     # sleep|backoff|cca|tx|await_ack|rx
    backoff_remaining: int = 0
    attempts: int = 0
    pending: bool = False
    tx_power_dbm: float = 0.0
    cfo_hz: float = 0.0
    cfo_feedback_hz: float = 0.0
    draws: int = 0           # backoff draws taken (diagnostics)


def _dist(a, b) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def hidden_sets(nodes: Sequence[NodeRecord], comm_range_m: float,
                bs_pos=(0.0, 0.0),
                bs_range_m: float = math.inf) -> dict[int, set]:
    """H(u): nodes that reach the BS but cannot hear u (and vice versa)."""
    reach = {n.id: _dist(n.position, bs_pos) <= bs_range_m for n in nodes}
    hidden: dict[int, set] = {n.id: set() for n in nodes}
    for i, u in enumerate(nodes):
        for v in nodes[i + 1:]:
            if reach[u.id] and reach[v.id] and \
                    _dist(u.position, v.position) > comm_range_m:
                hidden[u.id].add(v.id)
                hidden[v.id].add(u.id)
    return hidden


@dataclass
class Assignment:
    plan: SubcarrierPlan
    by_node: dict = field(default_factory=dict)       # node id -> subcarrier
    occupants: list = field(default_factory=list)     # subcarrier -> set of ids

    def __post_init__(self):
        if not self.occupants:
            self.occupants = [set() for _ in range(self.plan.n)]

    def assign(self, node_id: int, subcarrier: int) -> None:
        if not self.plan.usable[subcarrier]:
            raise MacError(f"subcarrier {subcarrier} unusable")
        self.unassign(node_id)
        self.by_node[node_id] = subcarrier
        self.occupants[subcarrier].add(node_id)

    def unassign(self, node_id: int) -> None:
        old = self.by_node.pop(node_id, None)
        if old is not None:
            self.occupants[old].discard(node_id)


def choose_subcarrier(assignment: Assignment, hidden: set,
                      candidates: Sequence[int]) -> int:
    """The allocation rule for one node: fewest hidden co-occupants, then
    lowest occupancy, then lowest index."""
    if not candidates:
        raise MacError("no usable subcarriers")
    return min(candidates,
               key=lambda sc: (len(assignment.occupants[sc] & hidden),
                               len(assignment.occupants[sc]), sc))


def allocate_subcarriers(nodes: Sequence[NodeRecord], plan: SubcarrierPlan,
                         comm_range_m: float, bs_pos=(0.0, 0.0),
                         bs_range_m: float = math.inf,
                         reserved: Sequence[int] = ()) -> Assignment:
    """Assign every node (in id order) a subcarrier, hidden-terminal-aware.

    `reserved` subcarriers (join/downlink/backups) are never assigned.
    """
    hidden = hidden_sets(nodes, comm_range_m, bs_pos, bs_range_m)
    assignment = Assignment(plan)
    candidates = [i for i in plan.usable_indices if i not in set(reserved)]
    if not candidates:
        raise MacError("no usable subcarriers")
    for node in sorted(nodes, key=lambda n: n.id):
        sc = choose_subcarrier(assignment, hidden[node.id], candidates)
        assignment.assign(node.id, sc)
        node.assigned = sc
    return assignment


def csma_step(node: NodeRecord, carrier_busy: bool, rng,
              cfg: MacConfig) -> NodeRecord:
    """One tick of the node automaton.

    sleep --(pending packet)--> backoff(draw initial) --> ... --> cca
    cca --clear--> tx, --busy--> backoff(draw congestion).
    tx/await_ack/rx transitions are event-driven (see on_tx_end / on_ack /
    on_ack_timeout): airtimes and timeouts belong to the event loop.
    """
    if node.state == "sleep":
        if node.pending:
            node.state = "backoff"
            node.backoff_remaining = int(rng.integers(0, cfg.initial_window))
            node.draws += 1
    elif node.state == "backoff":
        if node.backoff_remaining > 0:
            node.backoff_remaining -= 1
        else:
            node.state = "cca"
    elif node.state == "cca":
        if carrier_busy:
            node.state = "backoff"
            node.backoff_remaining = int(rng.integers(0, cfg.congestion_window))
            node.draws += 1
        else:
            node.state = "tx"
    return node


def on_tx_end(node: NodeRecord, cfg: MacConfig) -> None:
    node.attempts += 1
    node.state = "await_ack" if cfg.ack_mode != "none" else "sleep"
    if cfg.ack_mode == "none":
        node.pending = False
        node.attempts = 0


def on_ack(node: NodeRecord) -> None:
    node.state = "sleep"
    node.pending = False
    node.attempts = 0


def on_ack_timeout(node: NodeRecord, rng, cfg: MacConfig) -> bool:
    """Retransmit via the congestion path; False when the retry cap drops it."""
    if cfg.retransmit_cap is not None and node.attempts >= cfg.retransmit_cap:
        node.state = "sleep"
        node.pending = False
        node.attempts = 0
        return False
    node.state = "backoff"
    node.backoff_remaining = int(rng.integers(0, cfg.congestion_window))
    node.draws += 1
    return True


@dataclass
class AckBitVector:
    bits: np.ndarray       # one per subcarrier

    @classmethod
    def for_plan(cls, plan: SubcarrierPlan,
                 received: Sequence[int] = ()) -> "AckBitVector":
        bits = np.zeros(plan.n, dtype=np.uint8)
        bits[list(received)] = 1
        return cls(bits)

    def to_payload(self) -> bytes:
        return bytes([MSG_ACK_BITVECTOR]) + np.packbits(self.bits).tobytes()

    @classmethod
    def from_payload(cls, payload: bytes, n: int) -> "AckBitVector":
        if not payload or payload[0] != MSG_ACK_BITVECTOR:
            raise MacError("not an ACK bit-vector payload")
        bits = np.unpackbits(np.frombuffer(payload[1:], dtype=np.uint8))[:n]
        return cls(bits.astype(np.uint8))


def _frame_chips(packet: Packet, scheme: ModulationScheme) -> np.ndarray:
    return spread_bits(packet.frame_bits(), scheme.spreading_factor)


def bs_ack_encode(received: set, mode: str, plan: SubcarrierPlan,
                  scheme: ModulationScheme,
                  downlink_subcarrier: Optional[int] = None,
                  exclude: frozenset = frozenset(),
                  fmt: FrameFormat = DEFAULT_FRAME) -> dict[int, np.ndarray]:
    """Chips to key per subcarrier for one ACK round.

    per_subcarrier: an ACK mini-frame on every acknowledged subcarrier.
    bitvector: one frame on the downlink subcarrier with bit i set per
    acknowledged subcarrier i. `exclude` clears bits for subcarriers whose
    valid/invalid collision forces a directed ACK instead.
    """
    bad = [sc for sc in received if not plan.usable[sc]]
    if bad:
        raise MacError(f"cannot ack unusable subcarriers {bad}")
    if mode == "per_subcarrier":
        out = {}
        for sc in sorted(received):
            ack = frame_packet(bytes([MSG_ACK, 0]), subcarrier=sc, fmt=fmt)
            out[sc] = _frame_chips(ack, scheme)
        return out
    if mode == "bitvector":
        if downlink_subcarrier is None:
            raise MacError("bitvector ack mode requires a downlink subcarrier")
        vec = AckBitVector.for_plan(plan, sorted(set(received) - set(exclude)))
        pkt = frame_packet(vec.to_payload(), subcarrier=downlink_subcarrier,
                           fmt=fmt)
        return {downlink_subcarrier: _frame_chips(pkt, scheme)}
    raise MacError(f"unknown ack mode {mode!r}")


@dataclass(frozen=True)
class JoinReply:
    node_id: int
    subcarrier: int
    cfo_feedback_hz: float
    downlink_subcarrier: Optional[int]
    backup_subcarriers: tuple


class BaseStation:
    """BS-side MAC bookkeeping: joins, liveness, relays, subcarrier health."""

    def __init__(self, plan: SubcarrierPlan, cfg: MacConfig,
                 scheme: ModulationScheme, bs_pos=(0.0, 0.0),
                 bs_range_m: float = math.inf):
        self.plan = plan
        self.cfg = cfg
        self.scheme = scheme
        self.bs_pos = bs_pos
        self.bs_range_m = bs_range_m
        self.assignment = Assignment(plan)
        self.nodes: dict[int, NodeRecord] = {}
        self.last_heard: dict[int, int] = {}
        self.relay_queue: list[tuple[int, bytes]] = []
        self.drops: list[tuple[int, str]] = []
        self._outcomes: dict[int, list] = {i: [] for i in range(plan.n)}
        self.swaps: list[tuple[int, int]] = []
        reserved = {cfg.join_subcarrier, cfg.downlink_subcarrier}
        reserved.update(cfg.backup_subcarriers)
        # the join subcarrier stays ICI-free: its neighbors are off limits too
        if cfg.join_subcarrier is not None:
            reserved.update({cfg.join_subcarrier - 1, cfg.join_subcarrier + 1})
        self.reserved = {sc for sc in reserved
                         if sc is not None and 0 <= sc < plan.n}

    def _candidates(self) -> list[int]:
        return [i for i in self.plan.usable_indices if i not in self.reserved]

    def handle_join(self, node: NodeRecord, tick: int = 0,
                    rx_join_preamble=None, known_preamble=None,
                    chip_period_s: Optional[float] = None) -> JoinReply:
        """Admit a node: estimate its CFO from the join preamble, pick the
        subcarrier by the allocation rule, and reply with the feedback set.

        With no capacity left the rule degrades to the least-occupied shared
        subcarrier on its own.
        """
        hidden = hidden_sets(list(self.nodes.values()) + [node],
                             self.cfg.comm_range_m, self.bs_pos,
                             self.bs_range_m)[node.id]
        sc = choose_subcarrier(self.assignment, hidden, self._candidates())
        self.assignment.assign(node.id, sc)
        node.assigned = sc
        node.backup = tuple(self.cfg.backup_subcarriers)
        self.nodes[node.id] = node
        self.last_heard[node.id] = tick

        feedback = 0.0
        if rx_join_preamble is not None and self.cfg.join_subcarrier is not None:
            est = estimate_cfo(rx_join_preamble, known_preamble, chip_period_s)
            f_join = self.plan.center(self.cfg.join_subcarrier)
            feedback = scale_cfo(est, f_join, self.plan.center(sc))
        node.cfo_feedback_hz = feedback
        return JoinReply(node.id, sc, feedback, self.cfg.downlink_subcarrier,
                         tuple(self.cfg.backup_subcarriers))

    def note_uplink(self, node_id: int, tick: int) -> None:
        self.last_heard[node_id] = tick

    def evict_inactive(self, tick: int) -> list[int]:
        """Drop nodes silent beyond the inactivity window from their omega set."""
        window = self.cfg.inactivity_window_ticks
        if window is None:
            return []
        gone = [nid for nid, seen in self.last_heard.items()
                if tick - seen > window]
        for nid in gone:
            self.assignment.unassign(nid)
            self.nodes.pop(nid, None)
            self.last_heard.pop(nid, None)
        return gone

    # ---- peer-to-peer relay (always through the BS, delivered on beacons)

    def enqueue_peer(self, src: int, dst: int, payload: bytes) -> bool:
        if dst not in self.nodes:
            self.drops.append((src, f"unknown destination {dst}"))
            return False
        self.relay_queue.append((dst, payload))
        return True

    def beacon_payloads(self) -> dict[int, bytes]:
        """Per-subcarrier payloads for the next beacon; drains the relay queue."""
        out: dict[int, bytes] = {}
        if self.cfg.downlink_subcarrier is not None:
            out[self.cfg.downlink_subcarrier] = bytes([MSG_BEACON])
        for dst, payload in self.relay_queue:
            sc = self.assignment.by_node.get(dst)
            if sc is not None:
                out[sc] = bytes([MSG_DATA, dst]) + payload
        self.relay_queue.clear()
        return out

    # ---- subcarrier health / swapping

    def record_outcome(self, subcarrier: int, ok: bool) -> None:
        window = self._outcomes[subcarrier]
        window.append(bool(ok))
        if len(window) > self.cfg.swap_window:
            window.pop(0)

    def failure_rate(self, subcarrier: int) -> float:
        window = self._outcomes[subcarrier]
        if not window:
            return 0.0
        return 1.0 - sum(window) / len(window)

    def maybe_swap(self) -> list[tuple[int, int]]:
        """Swap occupants between bad subcarriers only (never good ones)."""
        bad = [sc for sc in range(self.plan.n)
               if len(self._outcomes[sc]) >= self.cfg.swap_window
               and self.failure_rate(sc) > self.cfg.swap_fail_threshold
               and self.assignment.occupants[sc]]
        done = []
        for a, b in zip(bad[0::2], bad[1::2]):
            occ_a = sorted(self.assignment.occupants[a])
            occ_b = sorted(self.assignment.occupants[b])
            for nid in occ_a:
                self.assignment.assign(nid, b)
            for nid in occ_b:
                self.assignment.assign(nid, a)
            self._outcomes[a].clear()
            self._outcomes[b].clear()
            done.append((a, b))
        self.swaps.extend(done)
        return done


def tdma_groups(node_ids: Sequence[int], n_subcarriers: int) -> list[list[int]]:
    """Legacy phased mode: groups of n nodes, served round-robin per phase."""
    ids = sorted(node_ids)
    return [ids[k:k + n_subcarriers] for k in range(0, len(ids), n_subcarriers)]
