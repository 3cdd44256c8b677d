"""Sharing white space across a tree of base stations.

Every BS wants all the subcarriers its location offers; interfering
neighbors must cap their overlap, tree links must keep at least one channel
in common, and each cell has a minimum to serve its nodes. Maximizing total
assigned subcarriers under those caps is NP-hard, so two polynomial solvers
compete: a deterministic greedy that deletes common subcarriers from the
fatter side, and a coin-flip allocator with a provable 1/2 bound against
the sum-of-availability optimum. A brute-force oracle keeps both honest on
small instances, and the distinct per-link subcarriers for BS-to-BS traffic
come out at the end.

Run: python demos/04_spectrum_allocation.py
"""

import numpy as np

from snowsim.scenario import preset
from snowsim.sop import (
    approx_allocate,
    assign_tree_links,
    brute_force_optimal,
    check_feasibility,
    greedy_allocate,
    instance_from_dict,
    random_tree_instance,
)

# ---- the classic two-cell tug of war: identical availability, cap of 4
from snowsim.sop import SopInstance

z = set(range(1, 11))
inst = SopInstance([None, 0], [set(z), set(z)], [3, 3], [{1}, {0}],
                   phi={(0, 1): 4})
greedy = greedy_allocate(inst)
report = check_feasibility(inst, greedy)
_, optimum = brute_force_optimal(inst)
print("two BSs over the same ten subcarriers, overlap cap 4:")
print(f"  greedy: X0={sorted(greedy.subcarriers[0])} "
      f"X1={sorted(greedy.subcarriers[1])}")
print(f"  objective {greedy.objective} (oracle optimum {optimum}), "
      f"feasible={report.feasible}")

# ---- randomized allocator statistics vs its analytic bound
objs = [approx_allocate(inst, s).objective for s in range(4000)]
total_z = sum(len(zi) for zi in inst.availability)
print(f"\nrandomized allocator over 4000 seeds: mean objective "
      f"{np.mean(objs):.2f} vs conservative optimum bound {total_z} "
      f"(ratio {np.mean(objs)/total_z:.3f}, guarantee 0.5)")

# ---- the 15-cell metropolitan tree preset
cfg = preset("ch5-tree15")
tree = instance_from_dict(cfg.sop)
alloc = greedy_allocate(tree)
rep = check_feasibility(tree, alloc)
print(f"\n15-BS tree: greedy objective {alloc.objective} over "
      f"{sum(len(zi) for zi in tree.availability)} available, "
      f"feasible={rep.feasible}")
links = assign_tree_links(tree, alloc)
print("tree-link subcarriers (all distinct):")
for (child, parent), sc in sorted(links.items()):
    print(f"  BS{child:2d} -> BS{parent:2d}: subcarrier {sc}")

# ---- sweep: how often does greedy match the oracle on tiny instances?
matches = tried = 0
for seed in range(120):
    small = random_tree_instance(2, 8, seed, avail=(3, 8), sigma_frac=0.25)
    alloc = greedy_allocate(small)
    if not check_feasibility(small, alloc).feasible:
        continue
    try:
        _, best = brute_force_optimal(small, enumeration_bound=16)
    except Exception:
        continue
    tried += 1
    matches += alloc.objective == best
print(f"\nsmall random instances: greedy hit the optimum on "
      f"{matches}/{tried} feasible cases (never exceeded it)")
