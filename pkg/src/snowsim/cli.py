"""Command-line front end for batch experiments.

Subcommands:

* ``simulate``  - run a scenario (file or preset); writes metrics and trace.
* ``sop-solve`` - solve a multi-BS allocation instance with one algorithm.
* ``sop-sweep`` - seed sweep of the randomized allocator; prints statistics.
* ``phy-bench`` - asynchronous loopback benchmark of the baseband codec.
* ``calibrate`` - produce the SNR -> chip-error table for abstract mode.

Exit codes: 0 success, 2 configuration/validation error, 3 infeasible
allocation, 4 I/O error. Output files land in --out (or $SNOWSIM_OUT, or the
working directory).
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np
import yaml

from . import sop as _sop
from .phy import (
    DecodeMatrix,
    ModulationScheme,
    bs_ofdm_encode,
    compute_papr,
    decode_step,
    frame_packet,
    gfft_stream,
    transform_counter,
)
from .scenario import (
    PRESETS,
    ScenarioConfig,
    ScenarioError,
    dump_config,
    load_config,
    preset,
)
from .sim import Simulator, calibrate_chip_error, trace_csv

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_IO = 4


def _out_dir(args) -> str:
    out = args.out or os.environ.get("SNOWSIM_OUT") or "."
    os.makedirs(out, exist_ok=True)
    return out


def _load_scenario(args) -> ScenarioConfig:
    if args.config:
        cfg = load_config(args.config)
    elif args.preset:
        cfg = preset(args.preset)
    else:
        raise ScenarioError("need --config or --preset")
    if getattr(args, "seed", None) is not None:
        cfg.run.seed = args.seed
    if getattr(args, "phy_mode", None):
        cfg.run.phy_mode = args.phy_mode
    if getattr(args, "trace", False):
        cfg.run.trace = True
    if getattr(args, "nodes", None):
        cfg = _resize_nodes(cfg, args.nodes)
    return cfg.validate()


def _resize_nodes(cfg: ScenarioConfig, n: int) -> ScenarioConfig:
    """Clip or extend the node population, cloning the last node's shape."""
    if not cfg.nodes:
        raise ScenarioError("--nodes needs at least one template node")
    nodes = list(cfg.nodes[:n])
    template = cfg.nodes[-1]
    while len(nodes) < n:
        i = len(nodes)
        clone = type(template)(
            id=i, position=(template.position[0] + 25.0 * i,
                            template.position[1]),
            traffic=template.traffic, tx_power_dbm=template.tx_power_dbm)
        nodes.append(clone)
    cfg.nodes = nodes
    return cfg


def _instance_from_args(args) -> _sop.SopInstance:
    if args.instance:
        return _sop.load_instance(args.instance)
    if args.preset:
        cfg = preset(args.preset)
        if cfg.sop is None:
            raise ScenarioError(f"preset {args.preset!r} carries no "
                                "allocation instance")
        return _sop.instance_from_dict(cfg.sop)
    raise ScenarioError("need --instance or --preset")


# ------------------------------------------------------------- subcommands

def cmd_simulate(args) -> int:
    cfg = _load_scenario(args)
    sim = Simulator(cfg)
    report = sim.run()
    out = _out_dir(args)
    with open(os.path.join(out, "metrics.yaml"), "w") as fh:
        fh.write(report.to_yaml())
    if cfg.run.trace:
        with open(os.path.join(out, "trace.csv"), "w") as fh:
            fh.write(trace_csv(sim.trace))
    print(f"scenario: {args.config or args.preset}  seed={cfg.run.seed}  "
          f"mode={cfg.run.phy_mode}")
    print(f"nodes={len(cfg.nodes)}  horizon={cfg.run.horizon_ticks} ticks "
          f"({cfg.run.horizon_ticks * cfg.run.tick_duration_s * 1e3:.1f} ms)")
    print(f"sent={report.packets_sent}  delivered={report.delivered}  "
          f"prr={report.prr:.4f}")
    print(f"throughput={report.throughput_bps / 1e3:.2f} kbps  "
          f"mean_latency={report.mean_latency_s * 1e3:.3f} ms  "
          f"energy={report.energy_mj:.3f} mJ")
    print(f"report: {os.path.join(out, 'metrics.yaml')}")
    return EXIT_OK


def cmd_sop_solve(args) -> int:
    inst = _instance_from_args(args)
    if args.algo == "greedy":
        alloc = _sop.greedy_allocate(inst)
    elif args.algo == "approx":
        alloc = _sop.approx_allocate(inst, args.seed or 0)
    else:
        alloc, _ = _sop.brute_force_optimal(inst)
    report = _sop.check_feasibility(inst, alloc)
    doc = _sop.dump_result(inst, alloc, report)
    out = _out_dir(args)
    path = os.path.join(out, "sop_result.yaml")
    with open(path, "w") as fh:
        fh.write(doc)
    print(f"algo={args.algo}  bs={inst.n_bs}  objective={alloc.objective}  "
          f"feasible={report.feasible}")
    for v in report.violations:
        print(f"  violation: constraint {v.constraint} at {v.where}: {v.detail}")
    if args.links and report.feasible:
        links = _sop.assign_tree_links(inst, alloc)
        for (child, parent), sc in sorted(links.items()):
            print(f"  link BS{child}->BS{parent}: subcarrier {sc}")
    print(f"result: {path}")
    return EXIT_OK if report.feasible else EXIT_INFEASIBLE


def cmd_sop_sweep(args) -> int:
    inst = _instance_from_args(args)
    total_z = sum(len(z) for z in inst.availability)
    objs = np.empty(args.seeds)
    feasible = 0
    for s in range(args.seeds):
        alloc = _sop.approx_allocate(inst, s)
        objs[s] = alloc.objective
        feasible += _sop.check_feasibility(inst, alloc).feasible
    mean, std = float(objs.mean()), float(objs.std())
    print(f"seeds={args.seeds}  bs={inst.n_bs}  sum|Z|={total_z}")
    print(f"objective: mean={mean:.3f}  std={std:.3f}  "
          f"ratio_vs_sumZ={mean / total_z:.4f}")
    print(f"feasible: {feasible}/{args.seeds}")
    return EXIT_OK


def cmd_phy_bench(args) -> int:
    from .phy import baseband_offset_hz, grid_sample_rate_hz, node_modulate
    from .spectrum import SpectrumBand, plan_subcarriers

    plan = plan_subcarriers(SpectrumBand(547_000_000, 553_000_000),
                            400_000, 0.5)
    scheme = ModulationScheme(args.modulation)
    rng = np.random.default_rng(args.seed or 0)
    subs = rng.choice(plan.n, size=min(args.transmitters, plan.n),
                      replace=False)
    fs = grid_sample_rate_hz(plan, 64)
    total = np.zeros(0, dtype=complex)
    wanted = {}
    for sc in subs:
        payload = rng.bytes(args.payload)
        pkt = frame_packet(payload, subcarrier=int(sc))
        buf = node_modulate(pkt, scheme, baseband_offset_hz(plan, int(sc)),
                            fs, 64)
        off = int(rng.integers(0, 64)) * 64
        need = off + len(buf) + 8 * 64
        if need > total.size:
            total = np.concatenate([total, np.zeros(need - total.size,
                                                    dtype=complex)])
        total[off:off + len(buf)] += buf.samples
        wanted[int(sc)] = payload
    t0 = time.perf_counter()
    transform_counter.reset()
    matrix = DecodeMatrix(plan, scheme)
    got = {}
    for tick in gfft_stream(total, plan, 64):
        for rec in decode_step(matrix, tick)[1]:
            if hasattr(rec, "payload"):
                got[rec.subcarrier] = rec.payload
    dt = time.perf_counter() - t0
    ticks = total.size // 64
    ok = sum(got.get(sc) == pl for sc, pl in wanted.items())
    papr = compute_papr(bs_ofdm_encode(
        {int(s): 1 for s in subs if plan.usable[s]}, plan, 64, scheme=scheme))
    print(f"transmitters={len(subs)}  decoded={ok}/{len(subs)}  "
          f"ticks={ticks}  transforms={transform_counter.count}")
    print(f"decode rate: {ticks / dt / 1e3:.1f} kticks/s  "
          f"composite downlink papr={papr:.2f} dB")
    return EXIT_OK if ok == len(subs) else EXIT_CONFIG


def cmd_calibrate(args) -> int:
    lo, hi, step = (float(x) for x in args.snr_grid.split(":"))
    grid = np.arange(lo, hi + step / 2, step)
    scheme = ModulationScheme(args.modulation)
    table = calibrate_chip_error(scheme, grid, chips_per_point=args.chips,
                                 seed=args.seed or 0)
    out = _out_dir(args)
    path = os.path.join(out, "calibration.yaml")
    doc = {"modulation": args.modulation, "chips_per_point": args.chips,
           "table": {k: list(v) for k, v in sorted(table.items())}}
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=True)
    print(f"calibrated {len(table)} SNR points -> {path}")
    return EXIT_OK


# ------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="snowsim", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, scenario=False, instance=False):
        sp.add_argument("--out", help="output directory (default $SNOWSIM_OUT)")
        sp.add_argument("--seed", type=int, default=None)
        if scenario:
            sp.add_argument("--config", help="scenario YAML file")
            sp.add_argument("--preset", choices=sorted(PRESETS))
        if instance:
            sp.add_argument("--instance", help="allocation instance YAML file")
            sp.add_argument("--preset", choices=sorted(PRESETS))

    sp = sub.add_parser("simulate", help="run one scenario")
    common(sp, scenario=True)
    sp.add_argument("--nodes", type=int, help="override node count")
    sp.add_argument("--phy-mode", choices=["abstract", "full"])
    sp.add_argument("--trace", action="store_true", help="write trace.csv")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("sop-solve", help="solve one allocation instance")
    common(sp, instance=True)
    sp.add_argument("--algo", choices=["greedy", "approx", "brute"],
                    default="greedy")
    sp.add_argument("--links", action="store_true",
                    help="also assign distinct tree-link subcarriers")
    sp.set_defaults(func=cmd_sop_solve)

    sp = sub.add_parser("sop-sweep", help="seed sweep of the randomized solver")
    common(sp, instance=True)
    sp.add_argument("--algo", choices=["approx"], default="approx")
    sp.add_argument("--seeds", type=int, default=10_000)
    sp.set_defaults(func=cmd_sop_sweep)

    sp = sub.add_parser("phy-bench", help="asynchronous loopback benchmark")
    common(sp)
    sp.add_argument("--transmitters", type=int, default=29)
    sp.add_argument("--payload", type=int, default=12)
    sp.add_argument("--modulation", choices=["ook", "bpsk"], default="bpsk")
    sp.set_defaults(func=cmd_phy_bench)

    sp = sub.add_parser("calibrate", help="build the chip-error table")
    common(sp)
    sp.add_argument("--snr-grid", default="-20:10:2",
                    help="lo:hi:step in dB")
    sp.add_argument("--chips", type=int, default=4000)
    sp.add_argument("--modulation", choices=["ook", "bpsk"], default="bpsk")
    sp.set_defaults(func=cmd_calibrate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ScenarioError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except _sop.SopError as e:
        print(f"allocation error: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
