"""End-to-end network runs: throughput scaling, hidden terminals, energy.

Three vignettes from the deterministic event simulator:

1. Concurrent uplink capacity - aggregate throughput grows linearly with
   the number of transmitters because the receiver's single transform
   decodes them all at once.
2. Hidden terminals - two nodes that cannot hear each other on one shared
   subcarrier collide relentlessly; the location-aware allocator splits
   them and the collisions vanish.
3. The energy ledger - every tick of every node lands in exactly one radio
   mode, so a zero-traffic node integrates to sleep current times horizon
   and a 40-byte uplink frame costs 0.336 mJ of Tx at the reference radio
   profile.

Run: python demos/05_network_simulation.py
"""

from snowsim.scenario import MacConfig, NodeSpec, RunBlock, ScenarioConfig, TrafficSpec
from snowsim.sim import EnergyProfile, Simulator, account_energy, run_scenario


def saturated(n_nodes, horizon=260_000, seed=1, ack="none", comm=1e6):
    nodes = [NodeSpec(i, position=(40.0 + 12.0 * i, 5.0 * i),
                      traffic=TrafficSpec(kind="saturated", count=0))
             for i in range(n_nodes)]
    cfg = ScenarioConfig(nodes=nodes,
                         mac=MacConfig(ack_mode=ack, comm_range_m=comm),
                         run=RunBlock(horizon_ticks=horizon, seed=seed))
    cfg.beacon_period_ticks = 0
    return cfg


print("== uplink scaling (noiseless, saturated nodes on distinct subcarriers)")
single = run_scenario(saturated(1)).throughput_bps
print(f"  k= 1: {single/1e3:7.2f} kbps")
for k in (4, 8, 16, 29):
    tput = run_scenario(saturated(k, seed=k)).throughput_bps
    print(f"  k={k:2d}: {tput/1e3:7.2f} kbps  ({tput/(k*single):.3f} of k x single)")

print("\n== hidden terminals on a shared subcarrier vs location-aware split")


def hidden_pair(seed, n_subcarriers, force_shared):
    nodes = [NodeSpec(0, position=(-150.0, 0.0),
                      traffic=TrafficSpec(kind="saturated", count=10,
                                          payload_bytes=12)),
             NodeSpec(1, position=(150.0, 0.0),
                      traffic=TrafficSpec(kind="saturated", count=10,
                                          payload_bytes=12, start_tick=700))]
    cfg = ScenarioConfig(band_start_hz=547_000_000,
                         band_end_hz=547_000_000 + (n_subcarriers + 1) * 200_000,
                         mac=MacConfig(ack_mode="per_subcarrier",
                                       comm_range_m=200.0),
                         nodes=nodes, run=RunBlock(horizon_ticks=700_000,
                                                   seed=seed))
    cfg.beacon_period_ticks = 0
    sim = Simulator(cfg)
    if force_shared:
        for nid in (0, 1):
            sim.assignment.assign(nid, 0)
            sim.nodes[nid].rec.assigned = 0
    report = sim.run()
    collisions = sum(e == "collision" for _, _, e, _ in sim.trace)
    return report, collisions


for label, shared in (("same subcarrier (hidden pair)", True),
                      ("location-aware split", False)):
    totals = [0, 0]
    for seed in range(10):
        report, coll = hidden_pair(100 + seed, 2, shared)
        totals[0] += coll
        totals[1] += report.delivered
    print(f"  {label:30s}: collisions={totals[0]:4d}  delivered={totals[1]}")

print("\n== energy ledger")
profile = EnergyProfile()
frame_s = (12 + 28) * 8 * 8 * 2.5e-6
print(f"  one 40-byte uplink frame: {account_energy({'tx': frame_s}, profile):.3f} mJ "
      f"({frame_s*1e3:.1f} ms of Tx at {profile.tx_ma} mA / {profile.supply_v} V)")
idle = saturated(1, horizon=400_000)
idle.nodes[0].traffic = TrafficSpec(kind="none")
report = run_scenario(idle)
print(f"  zero-traffic node over 1 s horizon: "
      f"{report.per_node[0]['energy_mj']*1000:.5f} uJ "
      f"(= sleep current x horizon exactly)")
busy = run_scenario(saturated(1, horizon=400_000))
print(f"  saturated node, same horizon: {busy.per_node[0]['energy_mj']:.3f} mJ "
      f"over {busy.per_node[0]['delivered']} delivered packets")
