"""Graph-based class selection: split N classes into M balanced super-classes.

Classes that the baseline confuses should end up in different super-classes.
Pair relations come from the dependency sets:

* S1: ``d2[j] == k`` and ``d2[k] == j`` (unordered pair)
* S2: ``d2[j] == k`` and ``d2[k] != j`` (ordered pair)
* S3 / S4: ``d3[j] == k`` / ``d4[j] == k`` (ordered; a mutual edge counts twice)

The objective is the vector of intra-block pair counts ``(s1, s2, s3, s4)``,
compared lexicographically. An initial assignment is seeded by walking routes
toward the center of each D2 component, then improved by local search.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dependency import DependencySets

CLASS_COUNT = "class-count"
SAMPLE_COUNT = "sample-count"
BALANCE_MODES = (CLASS_COUNT, SAMPLE_COUNT)
BRUTE_FORCE_MAX_N = 12


@dataclass(frozen=True)
class DependencyGraph:
    order: int
    targets: tuple[int, ...]  # edge j -> targets[j]
    two_way: tuple[bool, ...]

    @property
    def n(self) -> int:
        return len(self.targets)

    def edges(self) -> list[tuple[int, int]]:
        return list(enumerate(self.targets))

    def neighbors(self) -> list[set[int]]:
        """Undirected adjacency; a mutual pair collapses to one edge."""
        adj = [set() for _ in range(self.n)]
        for j, k in enumerate(self.targets):
            adj[j].add(k)
            adj[k].add(j)
        return adj

    def connection_counts(self) -> list[int]:
        return [len(a) for a in self.neighbors()]

    def center(self, nodes: Sequence[int] | None = None) -> int:
        deg = self.connection_counts()
        nodes = range(self.n) if nodes is None else nodes
        return min(nodes, key=lambda v: (-deg[v], v))


def build_graph(deps: DependencySets, order: int) -> DependencyGraph:
    targets = deps.order(order)
    if order == 2:
        two_way = tuple(targets[targets[j]] == j for j in range(len(targets)))
    else:
        two_way = (False,) * len(targets)
    return DependencyGraph(order, tuple(targets), two_way)


@dataclass(frozen=True)
class SimilarityCensus:
    n: int
    s1: tuple[tuple[int, int], ...]  # unordered, stored as (min, max)
    s2: tuple[tuple[int, int], ...]
    s3: tuple[tuple[int, int], ...]
    s4: tuple[tuple[int, int], ...]

    def pairs(self, t: int) -> tuple[tuple[int, int], ...]:
        return (self.s1, self.s2, self.s3, self.s4)[t - 1]

    def conflicts(self) -> np.ndarray:
        """Symmetric ``(4, n, n)`` counts; ``A[t-1].sum() / 2`` is |S_t|."""
        A = np.zeros((4, self.n, self.n), dtype=np.int64)
        for t in range(4):
            for j, k in self.pairs(t + 1):
                A[t, j, k] += 1
                A[t, k, j] += 1
        return A

    def related_pairs(self) -> set[frozenset]:
        return {frozenset(p) for t in range(1, 5) for p in self.pairs(t)}


def census(deps: DependencySets) -> SimilarityCensus:
    n = deps.num_classes
    d2 = deps.d2
    s1 = tuple(sorted((j, k) for j, k in enumerate(d2) if d2[k] == j and j < k))
    s2 = tuple((j, k) for j, k in enumerate(d2) if d2[k] != j)
    s3 = tuple(enumerate(deps.d3))
    s4 = tuple(enumerate(deps.d4))
    return SimilarityCensus(n, s1, s2, s3, s4)


# ---------------------------------------------------------------------------
# partitions


@dataclass(frozen=True)
class Partition:
    assignment: tuple[int, ...]
    M: int
    mode: str = CLASS_COUNT
    tau: float = 2.0
    # per-class train counts; needed to check sample-count balance
    counts: tuple[int, ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.mode not in BALANCE_MODES:
            raise ValueError(f"unknown balance mode {self.mode!r}")
        if any(not 0 <= b < self.M for b in self.assignment):
            raise ValueError(f"block ids must lie in [0, {self.M})")

    @property
    def n(self) -> int:
        return len(self.assignment)

    def blocks(self) -> list[list[int]]:
        out = [[] for _ in range(self.M)]
        for c, b in enumerate(self.assignment):
            out[b].append(c)
        return out

    def is_balanced(self) -> bool:
        return is_balanced(self.assignment, self.M, self.mode, self.tau, self.counts)


def _block_loads(assignment, M, mode, counts):
    loads = [0] * M
    for c, b in enumerate(assignment):
        loads[b] += 1 if mode == CLASS_COUNT else counts[c]
    return loads


def is_balanced(assignment, M, mode=CLASS_COUNT, tau=2.0, counts=None) -> bool:
    sizes = _block_loads(assignment, M, CLASS_COUNT, None)
    if min(sizes) == 0:
        return False
    if mode == CLASS_COUNT:
        return max(sizes) - min(sizes) <= 1
    if counts is None:
        raise ValueError("sample-count balance needs per-class counts")
    totals = _block_loads(assignment, M, SAMPLE_COUNT, counts)
    return min(totals) > 0 and max(totals) / min(totals) <= tau


def objective(partition: Partition | Sequence[int], cen: SimilarityCensus) -> tuple[int, int, int, int]:
    """Intra-block pair counts per similarity type."""
    assignment = partition.assignment if isinstance(partition, Partition) else tuple(partition)
    if len(assignment) != cen.n:
        raise ValueError(f"assignment covers {len(assignment)} classes, census has {cen.n}")
    return tuple(
        sum(1 for j, k in cen.pairs(t) if assignment[j] == assignment[k]) for t in range(1, 5)
    )


def _lex_less(delta: np.ndarray) -> bool:
    nz = np.flatnonzero(delta)
    return bool(nz.size) and delta[nz[0]] < 0


class _State:
    """Assignment plus per-(node, block) conflict sums for O(1) move deltas."""

    def __init__(self, assignment, M, A, mode, tau, counts):
        self.a = list(assignment)
        self.M = M
        self.A = A
        self.mode = mode
        self.tau = tau
        self.counts = counts
        self._refresh()

    def _refresh(self):
        B = np.zeros((len(self.a), self.M), dtype=np.int64)
        B[np.arange(len(self.a)), self.a] = 1
        self.conf = self.A @ B  # (4, n, M)

    def move_delta(self, v, b):
        return self.conf[:, v, b] - self.conf[:, v, self.a[v]]

    def swap_delta(self, v, w):
        a, b = self.a[v], self.a[w]
        c, A = self.conf, self.A
        return (c[:, v, b] - A[:, v, w] - c[:, v, a]) + (c[:, w, a] - A[:, w, v] - c[:, w, b])

    def feasible(self, trial) -> bool:
        return is_balanced(trial, self.M, self.mode, self.tau, self.counts)

    def apply(self, trial):
        self.a = list(trial)
        self._refresh()


def _repair_balance(state: _State) -> None:
    """Move low-conflict nodes out of overloaded blocks until balanced."""
    n, M = len(state.a), state.M
    counts = state.counts
    while not state.feasible(state.a):
        sizes = _block_loads(state.a, M, CLASS_COUNT, None)
        loads = sizes if state.mode == CLASS_COUNT else _block_loads(state.a, M, SAMPLE_COUNT, counts)
        src = min(range(M), key=lambda b: (-loads[b], b))
        dst = min(range(M), key=lambda b: (loads[b], b))
        gap = loads[src] - loads[dst]
        candidates = [v for v in range(n) if state.a[v] == src]
        if state.mode == SAMPLE_COUNT:
            # moving weight < gap strictly shrinks the sum of squared loads
            candidates = [v for v in candidates if counts[v] < gap]
        if sizes[src] <= 1 or not candidates:
            raise ValueError("cannot satisfy the sample-count balance bound with single-class moves")
        v = min(candidates, key=lambda u: (tuple(state.conf[:, u, src]), u))
        state.apply(state.a[:v] + [dst] + state.a[v + 1:])


def initial_partition(
    graph: DependencyGraph,
    M: int,
    mode: str = CLASS_COUNT,
    tau: float = 2.0,
    counts: Sequence[int] | None = None,
    cen: SimilarityCensus | None = None,
) -> Partition:
    """Seed an assignment by walking D2 routes, then repair balance.

    Within each connected component of the undirected D2 view the center is
    the node with most connections. Every degree-1 node contributes the
    shortest route to the center; routes are walked longest first and
    consecutive nodes go to consecutive blocks. ``cen`` only guides which
    nodes the balance repair moves; by default it is derived from ``graph``.
    """
    n = graph.n
    if M < 2:
        raise ValueError(f"M must be >= 2, got {M}")
    if M > n:
        raise ValueError(f"cannot split {n} classes into M={M} non-empty super-classes")
    if mode == SAMPLE_COUNT and counts is None:
        raise ValueError("sample-count balance needs per-class counts")
    if cen is None:
        d2 = graph.targets
        cen = SimilarityCensus(
            n,
            tuple(sorted((j, k) for j, k in enumerate(d2) if d2[k] == j and j < k)),
            tuple((j, k) for j, k in enumerate(d2) if d2[k] != j),
            (),
            (),
        )
    adj = graph.neighbors()
    deg = [len(a) for a in adj]

    # connected components, in order of their lowest node
    comps, seen = [], set()
    for s in range(n):
        if s in seen:
            continue
        comp, queue = [], deque([s])
        seen.add(s)
        while queue:
            u = queue.popleft()
            comp.append(u)
            for w in sorted(adj[u]):
                if w not in seen:
                    seen.add(w)
                    queue.append(w)
        comps.append(sorted(comp))

    assignment: list[int | None] = [None] * n
    cursor = 0
    for comp in comps:
        center = graph.center(comp)
        # BFS tree from the center: routes follow parent pointers, so any
        # previously walked route is a suffix of later ones it meets
        parent = {center: None}
        queue = deque([center])
        while queue:
            u = queue.popleft()
            for w in sorted(adj[u]):
                if w not in parent:
                    parent[w] = u
                    queue.append(w)
        routes = []
        for b in comp:
            if deg[b] == 1 and b != center:
                route = [b]
                while route[-1] != center:
                    route.append(parent[route[-1]])
                routes.append(route)
        routes.sort(key=lambda r: (-len(r), r))
        for route in routes:
            first = next((i for i, v in enumerate(route) if assignment[v] is not None), None)
            if first is None:
                for i, v in enumerate(route):
                    assignment[v] = (cursor + i) % M
                cursor = (cursor + len(route)) % M
            else:
                for i in range(first - 1, -1, -1):
                    assignment[route[i]] = (assignment[route[i + 1]] - 1) % M

    A = cen.conflicts()
    # nodes on no route (cycles, isolated centers) fill the lightest blocks
    for v in range(n):
        if assignment[v] is not None:
            continue

        def key(b):
            members = [u for u in range(n) if assignment[u] == b]
            load = sum(1 if mode == CLASS_COUNT else counts[u] for u in members)
            clash = tuple(int(A[t, v, members].sum()) for t in range(4))
            return (load, clash, b)

        assignment[v] = min(range(M), key=key)

    counts_t = tuple(int(c) for c in counts) if counts is not None else None
    state = _State(assignment, M, A, mode, tau, counts_t)
    _repair_balance(state)
    return Partition(tuple(state.a), M, mode, tau, counts_t)


def _hill_climb(state: _State, width: int) -> None:
    n, M = len(state.a), state.M
    improved = True
    while improved:
        improved = False
        for v in range(n):
            for b in range(M):
                if b == state.a[v]:
                    continue
                if not _lex_less(state.move_delta(v, b)[:width]):
                    continue
                trial = state.a[:v] + [b] + state.a[v + 1:]
                if state.feasible(trial):
                    state.apply(trial)
                    improved = True
        for v in range(n):
            for w in range(v + 1, n):
                if state.a[v] == state.a[w]:
                    continue
                if not _lex_less(state.swap_delta(v, w)[:width]):
                    continue
                trial = list(state.a)
                trial[v], trial[w] = trial[w], trial[v]
                if state.feasible(trial):
                    state.apply(trial)
                    improved = True


def _swap_chain(state: _State, width: int) -> bool:
    """One Kernighan-Lin pass over swaps; keeps the best prefix if it helps.

    Repeatedly applies the least-damaging swap between unlocked nodes (even
    an uphill one), locks both nodes, and finally rolls back to the best
    intermediate assignment. Returns True when that assignment is strictly
    better than the starting one.
    """
    n = len(state.a)
    start = list(state.a)
    base = 16 * n + 1
    weights = np.array([base ** (width - 1 - t) for t in range(width)], dtype=np.int64)
    locked = np.zeros(n, dtype=bool)
    total = np.zeros(width, dtype=np.int64)
    best_total, best_assignment = np.zeros(width, dtype=np.int64), None
    while True:
        a = np.array(state.a)
        conf, A = state.conf[:width], state.A[:width]
        gain = conf[:, :, a]  # gain[t, v, w] = conflicts of v with w's block
        own = np.take_along_axis(conf, a[None, :, None], axis=2)[:, :, 0]
        D = gain - A - own[:, :, None]
        D = D + D.transpose(0, 2, 1)
        key = np.tensordot(weights, D, axes=1)
        valid = (a[:, None] != a[None, :]) & ~locked[:, None] & ~locked[None, :]
        valid &= np.triu(np.ones((n, n), dtype=bool), 1)
        if not valid.any():
            break
        pairs = np.argwhere(valid)
        order = np.lexsort((pairs[:, 1], pairs[:, 0], key[valid]))
        chosen = None
        for idx in order:
            v, w = (int(x) for x in pairs[idx])
            trial = list(state.a)
            trial[v], trial[w] = trial[w], trial[v]
            if state.feasible(trial):
                chosen = (v, w, trial)
                break
        if chosen is None:
            break
        v, w, trial = chosen
        total = total + D[:, v, w]
        state.apply(trial)
        locked[v] = locked[w] = True
        if _lex_less(total - best_total):
            best_total, best_assignment = total.copy(), list(state.a)
    if best_assignment is None:
        state.apply(start)
        return False
    state.apply(best_assignment)
    return True


def _descend(state: _State, priorities: int) -> None:
    for width in range(2, priorities + 1):
        while True:
            _hill_climb(state, width)
            if not _swap_chain(state, width):
                break


def refine(
    partition: Partition,
    cen: SimilarityCensus,
    priorities: int = 4,
    kicks: int = 40,
    seed: int = 0,
) -> Partition:
    """Local search on ``(s1, s2, s3, s4)`` under the balance constraint.

    Three passes mirror the priority order: first only ``(s1, s2)`` counts,
    then ``s3`` may fall while ``(s1, s2)`` may not rise, then ``s4``. Each
    pass hill-climbs with single-node moves and pair swaps, taking a
    candidate only when it keeps balance and strictly lowers the active
    prefix of the objective (scan order: ascending class id, then ascending
    target block or partner id). At a local optimum a swap chain is tried;
    if it finds a strictly better assignment the climb resumes from there.

    Afterwards ``kicks`` seeded perturbations (two random swaps each) are
    each followed by a fresh descent; a result replaces the incumbent only if
    its full objective is strictly smaller. The objective therefore never
    increases and the result is deterministic in ``seed``.
    """
    if not partition.is_balanced():
        raise ValueError("refine needs a balanced starting partition")
    n = partition.n
    state = _State(partition.assignment, partition.M, cen.conflicts(), partition.mode, partition.tau, partition.counts)
    _descend(state, priorities)
    best = list(state.a)
    best_obj = objective(best, cen)
    rng = np.random.default_rng(seed)
    for _ in range(kicks if n > partition.M else 0):
        trial = list(best)
        for _ in range(2):
            v, w = (int(x) for x in rng.choice(n, size=2, replace=False))
            trial[v], trial[w] = trial[w], trial[v]
        if trial == best or not state.feasible(trial):
            continue
        state.apply(trial)
        _descend(state, priorities)
        obj = objective(state.a, cen)
        if obj[:priorities] < best_obj[:priorities]:
            best, best_obj = list(state.a), obj
    return Partition(tuple(best), partition.M, partition.mode, partition.tau, partition.counts)


def gcs_partition(
    deps: DependencySets,
    M: int,
    mode: str = CLASS_COUNT,
    tau: float = 2.0,
    counts: Sequence[int] | None = None,
) -> Partition:
    cen = census(deps)
    start = initial_partition(build_graph(deps, 2), M, mode, tau, counts, cen)
    return refine(start, cen)


def random_partition(
    n: int,
    M: int,
    seed: int,
    mode: str = CLASS_COUNT,
    tau: float = 2.0,
    counts: Sequence[int] | None = None,
) -> Partition:
    """Uniformly shuffled class-count-balanced split (repaired for sample mode)."""
    if M < 2 or M > n:
        raise ValueError(f"need 2 <= M <= N, got M={M}, N={n}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    assignment = [0] * n
    for pos, c in enumerate(perm):
        assignment[int(c)] = pos % M
    counts_t = tuple(int(c) for c in counts) if counts is not None else None
    if mode == SAMPLE_COUNT:
        state = _State(assignment, M, np.zeros((4, n, n), dtype=np.int64), mode, tau, counts_t)
        _repair_balance(state)
        assignment = state.a
    return Partition(tuple(assignment), M, mode, tau, counts_t)


def brute_force_partition(
    cen: SimilarityCensus,
    n: int,
    M: int,
    mode: str = CLASS_COUNT,
    tau: float = 2.0,
    counts: Sequence[int] | None = None,
) -> tuple[Partition, tuple[int, int, int, int]]:
    """Exhaustive lexicographic optimum over balanced M-way set partitions."""
    if n > BRUTE_FORCE_MAX_N:
        raise ValueError(f"brute force is limited to N <= {BRUTE_FORCE_MAX_N}, got N={n}")
    if M < 1 or M > n:
        raise ValueError(f"need 1 <= M <= N, got M={M}, N={n}")
    if cen.n != n:
        raise ValueError("census size does not match N")
    A = cen.conflicts()
    cap = math.ceil(n / M) if mode == CLASS_COUNT else n
    counts_t = tuple(int(c) for c in counts) if counts is not None else None
    best: list = [None, None]
    assignment = [0] * n
    sizes = [0] * M

    def rec(i, used, score):
        if best[0] is not None and tuple(score) >= best[0]:
            # prefix scores only grow, so a lexicographically worse prefix is dead
            return
        if n - i < M - used:
            return
        if i == n:
            if is_balanced(assignment, M, mode, tau, counts_t):
                s = tuple(int(x) for x in score)
                if best[0] is None or s < best[0]:
                    best[0], best[1] = s, tuple(assignment)
            return
        # canonical labelling: a new block id only right after the used ones
        for b in range(min(used + 1, M)):
            if sizes[b] >= cap:
                continue
            members = [u for u in range(i) if assignment[u] == b]
            add = A[:, i, members].sum(axis=1) if members else np.zeros(4, dtype=np.int64)
            assignment[i] = b
            sizes[b] += 1
            rec(i + 1, max(used, b + 1), score + add)
            sizes[b] -= 1
        assignment[i] = 0

    rec(0, 0, np.zeros(4, dtype=np.int64))
    if best[0] is None:
        raise ValueError("no balanced partition exists for these settings")
    return Partition(best[1], M, mode, tau, counts_t), best[0]


# ---------------------------------------------------------------------------
# partition file


def dumps(partition: Partition, cen: SimilarityCensus | None = None) -> str:
    lines = [f"{partition.n} {partition.M} {partition.mode} {partition.tau!r}"]
    lines += [f"{c} {b}" for c, b in enumerate(partition.assignment)]
    if cen is not None:
        s = objective(partition, cen)
        lines.append("# objective s1={} s2={} s3={} s4={}".format(*s))
    return "\n".join(lines) + "\n"


def loads(text: str, counts: Sequence[int] | None = None) -> Partition:
    lines = [l for l in text.splitlines() if l.strip() and not l.startswith("#")]
    if not lines:
        raise ValueError("empty partition file")
    head = lines[0].split()
    if len(head) != 4:
        raise ValueError(f"line 1: header must be 'N M mode tau', got {lines[0]!r}")
    n, M, mode, tau = int(head[0]), int(head[1]), head[2], float(head[3])
    assignment = [None] * n
    for line in lines[1:]:
        c, b = (int(t) for t in line.split())
        if not 0 <= c < n:
            raise ValueError(f"class id {c} outside [0, {n})")
        assignment[c] = b
    if any(b is None for b in assignment):
        raise ValueError("partition file does not assign every class")
    counts_t = tuple(int(c) for c in counts) if counts is not None else None
    return Partition(tuple(assignment), M, mode, tau, counts_t)


def save(partition: Partition, path, cen: SimilarityCensus | None = None) -> None:
    Path(path).write_text(dumps(partition, cen))


def load(path, counts: Sequence[int] | None = None) -> Partition:
    return loads(Path(path).read_text(), counts)
