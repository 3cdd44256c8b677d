"""Scenario configuration: schema, defaults, validation, YAML round-trip.

A scenario is one YAML document with blocks for spectrum, PHY, channel, MAC,
ATPC, the node population, an optional multi-BS allocation instance, and the
run controls. Defaults mirror a metropolitan deployment on one 6 MHz TV
channel: BPSK, 400 kHz subcarriers overlapping 50%, spreading factor 8,
40-byte frames, 0 dBm nodes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import yaml

from .mac import MacConfig
from .spectrum import SpectrumBand, SubcarrierPlan, plan_subcarriers

__all__ = [
    "ScenarioError", "TrafficSpec", "NodeSpec", "PhyBlock", "ChannelBlock",
    "AtpcBlock", "RunBlock", "EnergyBlock", "ScenarioConfig",
    "load_config", "loads_config", "dump_config", "PRESETS", "preset",
]

MHZ = 1_000_000
KHZ = 1_000


class ScenarioError(ValueError):
    """Config violates the schema; message carries the offending field path."""


@dataclass
class TrafficSpec:
    kind: str = "saturated"          # saturated | periodic | uniform | none
    count: int = 10                  # packets to deliver (saturated/periodic)
    interval_ticks: int = 0          # periodic period / saturated gap
    interval_range: tuple = (0, 0)   # uniform arrival gap [a, b] ticks
    payload_bytes: int = 28
    start_tick: int = 0


@dataclass
class NodeSpec:
    id: int
    position: tuple = (100.0, 0.0)
    traffic: TrafficSpec = field(default_factory=TrafficSpec)
    tx_power_dbm: float = 0.0
    cfo_ppm: float = 0.0
    speed_mps: float = 0.0
    heading_deg: float = 0.0
    mobility_update_ticks: int = 0   # 0 = static
    peer_dst: Optional[int] = None   # send payloads to this node via the BS


@dataclass
class PhyBlock:
    modulation: str = "bpsk"
    spreading_factor: int = 8
    fft_size: int = 64
    amplitude_threshold: float = 3.0
    phase_threshold_deg: float = 90.0
    window: str = "none"


@dataclass
class ChannelBlock:
    path_loss_exponent: float = 3.2
    reference_loss_db: float = 0.0
    rx_gain_db: float = 100.0        # BS front-end scaling of the unit tone
    noise_floor_dbm: Optional[float] = None   # abstract mode; None = noiseless
    noise_sigma: float = 0.0                  # full mode per-sample amplitude
    calibration_table: Optional[dict] = None  # snr_db -> chip error prob
    cfo_feedback: bool = True                 # nodes pre-compensate with the
                                              # offset learned at join time


@dataclass
class AtpcBlock:
    enabled: bool = False
    tp_levels: tuple = tuple(float(x) for x in range(16))
    pdr_threshold: float = 90.0
    update_every_packets: int = 10
    margin: float = 5.0
    initial_a: float = 5.0
    initial_b: float = 20.0


@dataclass
class RunBlock:
    horizon_ticks: int = 200_000
    seed: int = 1
    tick_duration_s: float = 2.5e-6    # one chip at 400 kchip/s
    phy_mode: str = "abstract"         # abstract | full
    trace: bool = False
    out_dir: Optional[str] = None
    waveform_dump: Optional[str] = None   # full mode: BS rx capture file


@dataclass
class EnergyBlock:
    """Radio current profile; defaults are the CC1070 numbers at 3 V."""

    tx_ma: float = 17.5
    rx_ma: float = 18.8
    idle_ma: float = 0.5
    sleep_ua: float = 0.2
    supply_v: float = 3.0


@dataclass
class ScenarioConfig:
    band_start_hz: int = 547 * MHZ
    band_end_hz: int = 553 * MHZ
    occupied: tuple = ()
    subcarrier_width_hz: int = 400 * KHZ
    overlap: float = 0.5
    phy: PhyBlock = field(default_factory=PhyBlock)
    channel: ChannelBlock = field(default_factory=ChannelBlock)
    # join on the last subcarrier with its neighbor clear, downlink two
    # below: the deployment layout for the default 29-subcarrier plan
    mac: MacConfig = field(default_factory=lambda: MacConfig(
        join_subcarrier=28, downlink_subcarrier=26, backup_subcarriers=(25,)))
    mac_mode: str = "csma"             # csma | legacy_tdma
    gamma_repeats: int = 1             # legacy mode proactive redundancy
    beacon_period_ticks: int = 50_000
    atpc: AtpcBlock = field(default_factory=AtpcBlock)
    nodes: list = field(default_factory=list)
    energy: EnergyBlock = field(default_factory=EnergyBlock)
    run: RunBlock = field(default_factory=RunBlock)
    sop: Optional[dict] = None         # multi-BS allocation instance document

    def plan(self) -> SubcarrierPlan:
        band = SpectrumBand(self.band_start_hz, self.band_end_hz,
                            tuple(tuple(r) for r in self.occupied))
        return plan_subcarriers(band, self.subcarrier_width_hz, self.overlap)

    def validate(self) -> "ScenarioConfig":
        try:
            plan = self.plan()
        except ValueError as e:
            raise ScenarioError(f"spectrum: {e}") from None
        if self.mac.ack_mode == "bitvector" and \
                self.mac.downlink_subcarrier is None:
            raise ScenarioError("mac.downlink_subcarrier: required for "
                                "bitvector ack mode")
        if self.phy.modulation not in ("ook", "bpsk"):
            raise ScenarioError(f"phy.modulation: unknown {self.phy.modulation!r}")
        if self.phy.fft_size < plan.n:
            raise ScenarioError("phy.fft_size: smaller than subcarrier count")
        if self.run.phy_mode not in ("abstract", "full"):
            raise ScenarioError(f"run.phy_mode: unknown {self.run.phy_mode!r}")
        if self.mac_mode not in ("csma", "legacy_tdma"):
            raise ScenarioError(f"mac_mode: unknown {self.mac_mode!r}")
        ids = [n.id for n in self.nodes]
        if len(ids) != len(set(ids)):
            raise ScenarioError("nodes: duplicate ids")
        for sc_name in ("join_subcarrier", "downlink_subcarrier"):
            sc = getattr(self.mac, sc_name)
            if sc is not None:
                if not 0 <= sc < plan.n:
                    raise ScenarioError(f"mac.{sc_name}: index {sc} out of range")
                if not plan.usable[sc]:
                    raise ScenarioError(f"mac.{sc_name}: subcarrier {sc} unusable")
        for node in self.nodes:
            if node.traffic.kind not in ("saturated", "periodic", "uniform", "none"):
                raise ScenarioError(f"nodes[{node.id}].traffic.kind: unknown "
                                    f"{node.traffic.kind!r}")
            if node.traffic.payload_bytes > 255:
                raise ScenarioError(f"nodes[{node.id}].traffic.payload_bytes > 255")
        return self

    # ---- dict / YAML round-trip

    def to_dict(self) -> dict:
        d = asdict(self)
        return _plainify(d)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        kwargs = {}
        for key, sub in (("phy", PhyBlock), ("channel", ChannelBlock),
                         ("atpc", AtpcBlock), ("run", RunBlock),
                         ("energy", EnergyBlock), ("mac", MacConfig)):
            if key in d:
                kwargs[key] = _build(sub, d.pop(key), key)
        if "nodes" in d:
            nodes = []
            for i, nd in enumerate(d.pop("nodes")):
                nd = dict(nd)
                if "traffic" in nd:
                    nd["traffic"] = _build(TrafficSpec, nd["traffic"],
                                           f"nodes[{i}].traffic")
                if "position" in nd:
                    nd["position"] = tuple(nd["position"])
                nodes.append(_build(NodeSpec, nd, f"nodes[{i}]"))
            kwargs["nodes"] = nodes
        if "occupied" in d:
            d["occupied"] = tuple(tuple(r) for r in d.pop("occupied"))
        known = cls.__dataclass_fields__
        for key in d:
            if key not in known:
                raise ScenarioError(f"unknown top-level field {key!r}")
        return cls(**d, **kwargs)


def _plainify(x):
    if isinstance(x, dict):
        return {k: _plainify(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plainify(v) for v in x]
    return x


def _build(cls, d: dict, path: str):
    if not isinstance(d, dict):
        raise ScenarioError(f"{path}: expected a mapping")
    known = cls.__dataclass_fields__
    for key in d:
        if key not in known:
            raise ScenarioError(f"{path}.{key}: unknown field")
    d = dict(d)
    for key, value in d.items():
        if isinstance(value, list) and isinstance(
                known[key].default, tuple):
            d[key] = tuple(value)
    try:
        return cls(**d)
    except TypeError as e:
        raise ScenarioError(f"{path}: {e}") from None
    except ValueError as e:
        raise ScenarioError(f"{path}: {e}") from None


def loads_config(text: str) -> ScenarioConfig:
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ScenarioError("config document must be a mapping")
    return ScenarioConfig.from_dict(data).validate()


def load_config(path) -> ScenarioConfig:
    with open(path) as fh:
        return loads_config(fh.read())


def dump_config(cfg: ScenarioConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


# ---------------------------------------------------------------- presets

def _ch3_metro() -> ScenarioConfig:
    """One 6 MHz TV channel, BPSK, SF 8, 7 saturated nodes."""
    nodes = [NodeSpec(i, position=(50.0 + 30.0 * i, 0.0),
                      traffic=TrafficSpec(kind="saturated", count=20))
             for i in range(7)]
    return ScenarioConfig(nodes=nodes)


def _ch4_detroit() -> ScenarioConfig:
    """25 nodes on 29 subcarriers; join on 28 (neighbor 27 kept clear),
    downlink on 26, OOK nodes between 200 and 1000 m."""
    nodes = [NodeSpec(i, position=(200.0 + 800.0 * i / 24.0, float(7 * i)),
                      traffic=TrafficSpec(kind="uniform", count=5,
                                          interval_range=(0, 20_000),
                                          payload_bytes=30),
                      tx_power_dbm=15.0)
             for i in range(25)]
    cfg = ScenarioConfig(
        band_start_hz=500 * MHZ, band_end_hz=506 * MHZ,
        phy=PhyBlock(modulation="ook"),
        mac=MacConfig(join_subcarrier=28, downlink_subcarrier=26,
                      backup_subcarriers=(25,), comm_range_m=400.0),
        nodes=nodes,
    )
    cfg.run.horizon_ticks = 400_000
    return cfg


def _tree_instance_dict(n_bs: int) -> dict:
    """A metropolitan-shaped BS tree with mostly-shared white space.

    Every BS sees the 29 subcarriers of the common TV channel except for a
    couple of locally occupied ones; interference follows a 12 km radius.
    """
    spacing = 8000.0
    rows = []
    for i in range(n_bs):
        avail = [sc for sc in range(29) if (sc + 3 * i) % 17 != 0]
        rows.append({
            "id": i,
            "parent": None if i == 0 else (i - 1) // 2,   # binary-ish tree
            "position": [spacing * (i % 4), spacing * (i // 4)],
            "availability": avail,
            "sigma": 4,
        })
    return {"bs": rows, "interference_radius_m": 12_000.0}


def _ch5_tree(n_bs: int) -> ScenarioConfig:
    """SNOW-tree solver preset: the allocation instance plus light traffic."""
    cfg = _ch3_metro()
    cfg.run.seed = n_bs
    cfg.sop = _tree_instance_dict(n_bs)
    return cfg


PRESETS = {
    "ch3-defaults": _ch3_metro,
    "ch4-detroit": _ch4_detroit,
    "ch5-tree3": lambda: _ch5_tree(3),
    "ch5-tree15": lambda: _ch5_tree(15),
}


def preset(name: str) -> ScenarioConfig:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise ScenarioError(
            f"unknown preset {name!r}; available: {sorted(PRESETS)}") from None
    return factory().validate()
