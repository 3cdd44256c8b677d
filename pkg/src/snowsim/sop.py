"""Multi-cell spectrum allocation for a tree of base stations.

N base stations form a tree rooted at BS 0. Each BS i has a set Z_i of
locally available subcarriers, needs at least sigma_i of them, and may share
at most phi[i][j] subcarriers with each interfering BS j (at least one with
its parent, so the tree link has a channel to live on). The objective is to
maximize the total number of assigned subcarriers - the network's capacity
for nodes - subject to:

    (1)  sigma_i <= |X_i| <= |Z_i|,  X_i subset of Z_i
    (2)  1 <= |X_i ^ X_parent(i)| <= phi[i][parent]          (tree links)
    (3)  0 <= |X_i ^ X_j| <= phi[i][j]   for other interferers

Deciding feasibility is NP-complete, so two polynomial solvers are provided:
a deterministic greedy that starts from X_i = Z_i and deletes common
subcarriers until the caps hold, and a randomized 1/2-approximation that
coin-flips every (subcarrier, BS) membership, with one repair round over the
residuals if some BS came up short. A brute-force optimum over all subset
combinations serves as the oracle for small instances.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import itertools
import math

import numpy as np
import yaml

__all__ = [
    "SopError", "SopInstance", "Allocation", "FeasibilityReport", "Violation",
    "check_feasibility", "greedy_allocate", "approx_allocate",
    "brute_force_optimal", "assign_tree_links", "bsbs_backoff_collision",
    "random_tree_instance", "instance_from_dict", "instance_to_dict",
    "load_instance", "dump_result",
]


class SopError(ValueError):
    pass


@dataclass(frozen=True)
class Violation:
    constraint: int          # 1, 2 or 3
    where: tuple             # (i,) for constraint 1, (i, j) for pair constraints
    detail: str


@dataclass(frozen=True)
class FeasibilityReport:
    violations: tuple[Violation, ...]

    @property
    def feasible(self) -> bool:
        return not self.violations


@dataclass
class SopInstance:
    """Tree topology, availability sets, minimums, and overlap caps."""

    parent: list            # parent[i] BS index; parent[0] is None
    availability: list      # Z_i as sets of subcarrier ids
    sigma: list             # minimum subcarriers per BS
    interferers: list       # I_i as sets of BS indices
    phi: dict = field(default_factory=dict)   # (min(i,j), max(i,j)) -> cap

    def __post_init__(self):
        n = len(self.parent)
        if not (len(self.availability) == len(self.sigma) == len(self.interferers) == n):
            raise SopError("field lengths disagree")
        if n == 0 or self.parent[0] is not None:
            raise SopError("BS 0 must be the root (parent None)")
        self.availability = [set(z) for z in self.availability]
        self.interferers = [set(ix) for ix in self.interferers]
        # parents form a tree rooted at 0
        for i in range(1, n):
            p = self.parent[i]
            if p is None or not 0 <= p < n:
                raise SopError(f"BS {i} has invalid parent {p}")
            seen, j = {i}, p
            while j != 0:
                if j in seen:
                    raise SopError("parent pointers contain a cycle")
                seen.add(j)
                j = self.parent[j]
        for i in range(1, n):
            self.interferers[i].add(self.parent[i])
            self.interferers[self.parent[i]].add(i)
        for i in range(n):
            self.interferers[i].discard(i)
            for j in self.interferers[i]:
                self.interferers[j].add(i)   # symmetry
        for i in range(n):
            if self.sigma[i] > len(self.availability[i]):
                raise SopError(f"sigma[{i}] exceeds |Z_{i}|")

    @property
    def n_bs(self) -> int:
        return len(self.parent)

    def children(self, i: int) -> set:
        return {j for j in range(1, self.n_bs) if self.parent[j] == i}

    def tree_pairs(self) -> list:
        return [(i, self.parent[i]) for i in range(1, self.n_bs)]

    def phi_of(self, i: int, j: int) -> int:
        """Overlap cap for an interfering pair; defaults to 60% of |Z_i ^ Z_j|."""
        key = (min(i, j), max(i, j))
        if key in self.phi:
            return self.phi[key]
        common = len(self.availability[i] & self.availability[j])
        return int(0.6 * common)

    def non_tree_interferer_pairs(self) -> list:
        """Interfering pairs excluding parent/child, each once (i < j)."""
        pairs = []
        tree = {tuple(sorted(p)) for p in self.tree_pairs()}
        for i in range(self.n_bs):
            for j in self.interferers[i]:
                if i < j and (i, j) not in tree:
                    pairs.append((i, j))
        return pairs


@dataclass
class Allocation:
    subcarriers: list      # X_i as sets

    def __post_init__(self):
        self.subcarriers = [set(x) for x in self.subcarriers]

    @property
    def objective(self) -> int:
        return sum(len(x) for x in self.subcarriers)


def check_feasibility(inst: SopInstance, alloc: Allocation) -> FeasibilityReport:
    """Evaluate constraint families (1), (2), (3) and list every violation."""
    if len(alloc.subcarriers) != inst.n_bs:
        raise SopError("allocation shape does not match instance")
    v: list[Violation] = []
    for i, x in enumerate(alloc.subcarriers):
        if not x <= inst.availability[i]:
            v.append(Violation(1, (i,), f"X_{i} not within Z_{i}"))
        if len(x) < inst.sigma[i]:
            v.append(Violation(1, (i,), f"|X_{i}|={len(x)} < sigma={inst.sigma[i]}"))
    for i, p in inst.tree_pairs():
        common = len(alloc.subcarriers[i] & alloc.subcarriers[p])
        cap = inst.phi_of(i, p)
        if common < 1:
            v.append(Violation(2, (i, p), "tree link has no common subcarrier"))
        elif common > cap:
            v.append(Violation(2, (i, p), f"overlap {common} > phi {cap}"))
    for i, j in inst.non_tree_interferer_pairs():
        common = len(alloc.subcarriers[i] & alloc.subcarriers[j])
        cap = inst.phi_of(i, j)
        if common > cap:
            v.append(Violation(3, (i, j), f"overlap {common} > phi {cap}"))
    return FeasibilityReport(tuple(v))


def greedy_allocate(inst: SopInstance) -> Allocation:
    """Start from X_i = Z_i, delete common subcarriers until the caps hold.

    Deletion prefers the currently larger side, never dips below sigma, and
    walks BSs, interferers, and subcarrier ids in ascending order so the
    result is deterministic. Pairs that cannot satisfy their cap without
    violating sigma are simply left over; the caller sees them through
    check_feasibility.
    """
    x = [set(z) for z in inst.availability]
    for i in range(inst.n_bs):
        for j in sorted(inst.interferers[i]):
            cap = inst.phi_of(i, j)
            for sc in sorted(inst.availability[i] & inst.availability[j]):
                if len(x[i] & x[j]) <= cap:
                    break
                if len(x[i]) >= len(x[j]) and len(x[i]) > inst.sigma[i]:
                    x[i].discard(sc)
                elif len(x[j]) > inst.sigma[j]:
                    x[j].discard(sc)
                # else: neither side can afford the deletion; leave sc alone
    return Allocation(x)


def approx_allocate(inst: SopInstance, seed) -> Allocation:
    """Randomized 1/2-approximation: independent fair coin per (subcarrier, BS).

    Step 1 adds each subcarrier of Z = union(Z_i) with probability 1/2 to
    every BS where it is available. If any BS missed its sigma, step 2
    repeats the coin flips once over the residuals Z_i - X'_i. Expected
    totals: 1/2 sum|Z_i| after step 1, 3/4 sum|Z_i| if step 2 runs.
    """
    rng = np.random.default_rng(seed)
    n = inst.n_bs
    x1: list[set] = [set() for _ in range(n)]
    all_sc = sorted(set().union(*inst.availability)) if n else []
    for sc in all_sc:
        for i in range(n):
            if sc in inst.availability[i] and rng.random() < 0.5:
                x1[i].add(sc)
    if any(len(x1[i]) < inst.sigma[i] for i in range(n)):
        for sc in all_sc:
            for i in range(n):
                if sc in inst.availability[i] and sc not in x1[i] \
                        and rng.random() < 0.5:
                    x1[i].add(sc)
    return Allocation(x1)


def brute_force_optimal(inst: SopInstance,
                        enumeration_bound: int = 24) -> tuple[Allocation, int]:
    """Exhaustive oracle: best feasible allocation by total subcarriers.

    Only for small instances (sum |Z_i| capped); raises if none is feasible.
    """
    total_bits = sum(len(z) for z in inst.availability)
    if total_bits > enumeration_bound:
        raise SopError(f"instance too large to enumerate ({total_bits} > "
                       f"{enumeration_bound} total subcarriers)")
    zs = [sorted(z) for z in inst.availability]
    best: Allocation | None = None
    best_obj = -1

    def candidates(i):
        z = zs[i]
        for r in range(inst.sigma[i], len(z) + 1):
            yield from (set(c) for c in itertools.combinations(z, r))

    def rec(i, chosen, tally):
        nonlocal best, best_obj
        if tally + sum(len(z) for z in zs[i:]) <= best_obj:
            return
        if i == inst.n_bs:
            alloc = Allocation(list(chosen))
            if check_feasibility(inst, alloc).feasible and tally > best_obj:
                best, best_obj = alloc, tally
            return
        for cand in candidates(i):
            ok = True
            for j in range(i):
                if j in inst.interferers[i]:
                    common = len(cand & chosen[j])
                    if common > inst.phi_of(i, j):
                        ok = False
                        break
                    if inst.parent[i] == j or inst.parent[j] == i:
                        if common < 1:
                            ok = False
                            break
            if ok:
                chosen.append(cand)
                rec(i + 1, chosen, tally + len(cand))
                chosen.pop()

    rec(0, [], 0)
    if best is None:
        raise SopError("no feasible allocation exists")
    return best, best_obj


def assign_tree_links(inst: SopInstance, alloc: Allocation) -> dict:
    """A distinct subcarrier per tree link, drawn from X_i ^ X_parent(i).

    Greedy smallest-id choice with backtracking over links in child order.
    """
    links = inst.tree_pairs()
    candidates = [sorted(alloc.subcarriers[i] & alloc.subcarriers[p])
                  for i, p in links]
    chosen: list = []
    used: set = set()

    def rec(k) -> bool:
        if k == len(links):
            return True
        for sc in candidates[k]:
            if sc not in used:
                used.add(sc)
                chosen.append(sc)
                if rec(k + 1):
                    return True
                used.discard(sc)
                chosen.pop()
        return False

    if not rec(0):
        blocked = [links[k] for k in range(len(links))
                   if not set(candidates[k]) - used]
        raise SopError(f"link assignment infeasible; blocking links: "
                       f"{blocked or links}")
    return {link: sc for link, sc in zip(links, chosen)}


@dataclass(frozen=True)
class BackoffResolution:
    winner: str            # "a" or "b"
    rounds: int
    draw_a: int
    draw_b: int


def bsbs_backoff_collision(rng, interval: int = 16) -> BackoffResolution:
    """Resolve a simultaneous BS-BS transmission on a shared link subcarrier.

    Both ends defer by an independent uniform draw in a fixed interval and
    the earlier draw transmits first; equal draws are redrawn.
    """
    rounds = 0
    while True:
        rounds += 1
        a = int(rng.integers(0, interval))
        b = int(rng.integers(0, interval))
        if a != b:
            return BackoffResolution("a" if a < b else "b", rounds, a, b)


def instance_from_dict(d: dict) -> SopInstance:
    """Build an instance from the on-disk form.

    Schema: {bs: [{id, parent, position, availability, sigma}],
             interference_radius_m | explicit_interferers, phi_overrides,
             omega_hz, alpha}. Interference comes from the BS positions and
    the radius unless listed explicitly; parents and children always
    interfere.
    """
    try:
        rows = sorted(d["bs"], key=lambda r: r["id"])
    except (KeyError, TypeError) as e:
        raise SopError(f"instance document missing 'bs' rows: {e}") from None
    ids = [r["id"] for r in rows]
    if ids != list(range(len(rows))):
        raise SopError("bs ids must be 0..N-1")
    parent = [r.get("parent") for r in rows]
    availability = [set(r.get("availability", ())) for r in rows]
    sigma = [int(r.get("sigma", 0)) for r in rows]
    n = len(rows)
    interferers: list[set] = [set() for _ in range(n)]
    if "explicit_interferers" in d:
        for i, j in d["explicit_interferers"]:
            interferers[i].add(j)
            interferers[j].add(i)
    elif "interference_radius_m" in d:
        radius = float(d["interference_radius_m"])
        pos = [tuple(r.get("position", (0.0, 0.0))) for r in rows]
        for i in range(n):
            for j in range(i + 1, n):
                if math.dist(pos[i], pos[j]) <= radius:
                    interferers[i].add(j)
                    interferers[j].add(i)
    phi = {tuple(sorted((int(i), int(j)))): int(cap)
           for (i, j), cap in (d.get("phi_overrides") or {}).items()} \
        if isinstance(d.get("phi_overrides"), dict) else {}
    for row in d.get("phi_overrides") or []:
        if isinstance(row, (list, tuple)) and len(row) == 3:
            i, j, cap = row
            phi[tuple(sorted((int(i), int(j))))] = int(cap)
    return SopInstance(parent, availability, sigma, interferers, phi)


def instance_to_dict(inst: SopInstance, positions=None) -> dict:
    rows = []
    for i in range(inst.n_bs):
        row = {"id": i, "parent": inst.parent[i],
               "availability": sorted(inst.availability[i]),
               "sigma": inst.sigma[i]}
        if positions:
            row["position"] = list(positions[i])
        rows.append(row)
    explicit = sorted({tuple(sorted((i, j)))
                       for i in range(inst.n_bs) for j in inst.interferers[i]})
    return {"bs": rows,
            "explicit_interferers": [list(p) for p in explicit],
            "phi_overrides": [[i, j, cap] for (i, j), cap in
                              sorted(inst.phi.items())]}


def load_instance(path) -> SopInstance:
    with open(path) as fh:
        data = yaml.safe_load(fh.read())
    if not isinstance(data, dict):
        raise SopError("instance document must be a mapping")
    return instance_from_dict(data)


def dump_result(inst: SopInstance, alloc: Allocation,
                report: FeasibilityReport) -> str:
    """Solver output in the same document family as the instance file."""
    doc = {
        "objective": alloc.objective,
        "per_bs": {i: sorted(alloc.subcarriers[i]) for i in range(inst.n_bs)},
        "feasible": report.feasible,
        "violations": [{"constraint": v.constraint, "where": list(v.where),
                        "detail": v.detail} for v in report.violations],
    }
    return yaml.safe_dump(doc, sort_keys=True)


def random_tree_instance(n_bs: int, pool: int, seed,
                         avail: tuple[int, int] = (4, 8),
                         sigma_frac: float = 0.0,
                         extra_edges: int = 0,
                         phi_frac: float = 0.6) -> SopInstance:
    """Random SOP instance on a random tree (sweep and oracle fodder)."""
    rng = np.random.default_rng(seed)
    parent: list = [None]
    for i in range(1, n_bs):
        parent.append(int(rng.integers(0, i)))
    availability = []
    for _ in range(n_bs):
        k = int(rng.integers(avail[0], avail[1] + 1))
        k = min(k, pool)
        availability.append(set(rng.choice(pool, size=k, replace=False).tolist()))
    # tree links need a possible common subcarrier
    for i in range(1, n_bs):
        if not availability[i] & availability[parent[i]]:
            sc = int(rng.integers(0, pool))
            availability[i].add(sc)
            availability[parent[i]].add(sc)
    sigma = [int(sigma_frac * len(z)) for z in availability]
    interferers = [set() for _ in range(n_bs)]
    for _ in range(extra_edges):
        i, j = rng.choice(n_bs, size=2, replace=False)
        interferers[int(i)].add(int(j))
    phi = {}
    for i in range(n_bs):
        for j in range(i + 1, n_bs):
            common = len(availability[i] & availability[j])
            if common:
                phi[(i, j)] = max(1, int(phi_frac * common))
    return SopInstance(parent, availability, sigma, interferers, phi)
