"""Route initialization, per-link traffic accounting, and contention relief.

Communication operations expand into directed flows: a P2P op is one flow,
a ring collective is one flow per ring edge (with the standard 2(p-1)/p or
(p-1)/p volume factors). Initial routes are dimension-ordered (XY) and thus
contention-agnostic. The optimizer then iterates on the most congested link:
same-payload flows from one source merge into multicast trees (payload
counted once per edge), individual flows move to alternative minimal paths
or single-waypoint detours, and grouped chain flows (stream chains, ring
collectives) may re-permute their group order onto a different snake of the
same dies. Only improving moves are applied, so the max link load is
monotone non-increasing.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

from .parallelism import CommOp
from .topology import (Die, DirectedLink, NoRouteError, WaferTopology,
                       manhattan, shortest_paths, xy_path, path_enabled)

STAGE_ORDER = {"fwd": 0, "bwd": 1, "wgrad": 2}


@dataclass
class Flow:
    id: int
    src: Die
    dst: Die
    bytes: float
    payload: str
    stage: str = "fwd"
    round: Optional[int] = None
    chain_group: Optional[str] = None
    chain_pos: Optional[tuple[int, int]] = None  # logical (src, dst) positions
    comm_kind: str = "p2p"


@dataclass
class MulticastTree:
    src: Die
    payload: str
    stage: str
    round: Optional[int]
    edges: frozenset[DirectedLink]
    members: tuple[int, ...]  # flow ids


@dataclass
class ChainInfo:
    dies: tuple[Die, ...]  # logical position -> die


@dataclass
class RoutePlan:
    flows: list[Flow]
    routes: dict[int, tuple[Die, ...]]        # flow id -> node path
    chains: dict[str, ChainInfo] = field(default_factory=dict)
    trees: dict[int, MulticastTree] = field(default_factory=dict)
    in_tree: dict[int, int] = field(default_factory=dict)  # flow id -> tree id

    def path_links(self, flow_id: int) -> list[DirectedLink]:
        path = self.routes[flow_id]
        return list(zip(path, path[1:]))

    def total_payload_bytes(self) -> float:
        return sum(f.bytes for f in self.flows)


@dataclass(frozen=True)
class OptimizerParams:
    max_iter: int = 64
    improvement_epsilon: float = 0.01

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass
class TrafficMatrix:
    """Per (stage, round, directed link): total bytes and flow count."""

    loads: dict[tuple[str, int, DirectedLink], tuple[float, int]]

    def most_congested(self) -> tuple[Optional[DirectedLink], float, int, tuple]:
        """Returns (link, bytes, flow_count, full_key); deterministic tie-break
        by flow count then lowest link id."""
        best_key, best = None, (0.0, 0)
        for key in sorted(self.loads, key=_key_order):
            b, n = self.loads[key]
            if (b, n) > best:
                best, best_key = (b, n), key
        if best_key is None:
            return None, 0.0, 0, ()
        return best_key[2], best[0], best[1], best_key

    def max_flow_count(self) -> int:
        return max((n for _, n in self.loads.values()), default=0)

    def max_bytes(self) -> float:
        return max((b for b, _ in self.loads.values()), default=0.0)

    def link_share(self, stage: str, round: Optional[int], link: DirectedLink) -> int:
        """Flow count on a link for contention sharing (bulk sees worst round)."""
        if round is not None:
            return self.loads.get((stage, round, link), (0.0, 0))[1]
        counts = [n for (s, _, l), (_, n) in self.loads.items()
                  if s == stage and l == link]
        return max(counts, default=0)

    def to_csv(self) -> str:
        lines = ["stage,round,src_row,src_col,dst_row,dst_col,bytes,flows"]
        for key in sorted(self.loads, key=_key_order):
            stage, rnd, (a, b) = key
            bytes_, n = self.loads[key]
            lines.append(f"{stage},{rnd},{a[0]},{a[1]},{b[0]},{b[1]},{bytes_:.0f},{n}")
        return "\n".join(lines) + "\n"


def _key_order(key):
    stage, rnd, link = key
    return (STAGE_ORDER.get(stage, 9), stage, rnd, link)


# -- expansion and initialization -------------------------------------------


def expand_comm_ops(comm_ops: Iterable[CommOp]) -> tuple[list[Flow], dict[str, ChainInfo]]:
    flows: list[Flow] = []
    chains: dict[str, ChainInfo] = {}
    fid = 0
    for op in comm_ops:
        if op.kind in ("p2p_stream", "reshard_p2p"):
            pos = None
            if op.chain_group is not None:
                info = chains.setdefault(op.chain_group, ChainInfo(dies=()))
                dies = list(info.dies)
                for d in (op.src, op.dst):
                    if d not in dies:
                        dies.append(d)
                chains[op.chain_group] = ChainInfo(dies=tuple(dies))
                pos = (dies.index(op.src), dies.index(op.dst))
            flows.append(Flow(id=fid, src=op.src, dst=op.dst, bytes=op.bytes,
                              payload=op.payload, stage=op.stage, round=op.round,
                              chain_group=op.chain_group, chain_pos=pos,
                              comm_kind=op.kind))
            fid += 1
        elif op.kind in ("allreduce", "allgather", "reducescatter"):
            p = len(op.group)
            factor = 2.0 * (p - 1) / p if op.kind == "allreduce" else (p - 1) / p
            ring = list(op.group) + [op.group[0]]
            chain_id = op.chain_group or f"{op.payload}.ring"
            chains[chain_id] = ChainInfo(dies=tuple(op.group))
            for i, (a, b) in enumerate(zip(ring, ring[1:])):
                flows.append(Flow(id=fid, src=a, dst=b, bytes=op.bytes * factor,
                                  payload=op.payload, stage=op.stage, round=op.round,
                                  chain_group=chain_id,
                                  chain_pos=(i, (i + 1) % p),
                                  comm_kind=op.kind))
                fid += 1
        else:
            raise ValueError(f"unknown comm op kind {op.kind!r}")
    return flows, chains


def init_routes(comm_ops: Iterable[CommOp], topology: WaferTopology) -> RoutePlan:
    """Dimension-ordered initial routes for every flow (contention-agnostic)."""
    flows, chains = expand_comm_ops(comm_ops)
    routes: dict[int, tuple[Die, ...]] = {}
    for f in flows:
        routes[f.id] = _initial_path(topology, f.src, f.dst)
    return RoutePlan(flows=flows, routes=routes, chains=chains)


def _initial_path(topology: WaferTopology, src: Die, dst: Die) -> tuple[Die, ...]:
    path = xy_path(src, dst)
    if path_enabled(topology, path):
        return tuple(path)
    return tuple(shortest_paths(topology, src, dst)[0])


# -- traffic accounting ------------------------------------------------------


def link_loads(plan: RoutePlan, comm_ops: Optional[Iterable[CommOp]] = None) -> TrafficMatrix:
    """Exact per-link, per-round byte and flow tallies.

    Bulk flows (round None) occupy their links in every round of their stage;
    multicast trees contribute their payload once per tree edge.
    """
    stage_rounds: dict[str, set[int]] = {}
    for f in plan.flows:
        if f.round is not None:
            stage_rounds.setdefault(f.stage, set()).add(f.round)
    loads: dict[tuple[str, int, DirectedLink], list] = {}

    def deposit(stage, rnd, link, nbytes):
        rounds = [rnd] if rnd is not None else sorted(stage_rounds.get(stage, {0}) or {0})
        for r in rounds:
            cur = loads.setdefault((stage, r, link), [0.0, 0])
            cur[0] += nbytes
            cur[1] += 1

    seen_trees: set[int] = set()
    for f in plan.flows:
        tree_id = plan.in_tree.get(f.id)
        if tree_id is not None:
            if tree_id in seen_trees:
                continue
            seen_trees.add(tree_id)
            tree = plan.trees[tree_id]
            for link in sorted(tree.edges):
                deposit(tree.stage, tree.round, link, f.bytes)
            continue
        for link in plan.path_links(f.id):
            deposit(f.stage, f.round, link, f.bytes)

    return TrafficMatrix(loads={k: (v[0], v[1]) for k, v in loads.items()})


# -- optimization ------------------------------------------------------------


def candidate_paths(topology: WaferTopology, src: Die, dst: Die,
                    limit: int = 48) -> list[tuple[Die, ...]]:
    """Minimal-hop paths plus single-waypoint detours off the source."""
    cands: list[tuple[Die, ...]] = []
    for p in shortest_paths(topology, src, dst, limit=limit):
        cands.append(tuple(p))
    base_len = len(cands[0]) if cands else 0
    for w in sorted(topology.neighbors(src), key=topology.die_id):
        if w == dst or not topology.link_enabled(src, w):
            continue
        try:
            tails = shortest_paths(topology, w, dst, limit=4)
        except NoRouteError:
            continue
        for tail in tails[:2]:
            if src in tail:
                continue
            path = (src,) + tuple(tail)
            if len(path) <= base_len + 2 and path not in cands:
                cands.append(path)
    return cands[:limit]


def _snake_orders(dies: tuple[Die, ...]) -> list[tuple[Die, ...]]:
    """Candidate chain orders: original, reversed, and row/col snakes."""
    orders: list[tuple[Die, ...]] = [tuple(dies), tuple(reversed(dies))]
    rows = sorted({d[0] for d in dies})
    cols = sorted({d[1] for d in dies})
    for row_asc in (True, False):
        seq: list[Die] = []
        for i, r in enumerate(rows if row_asc else list(reversed(rows))):
            in_row = sorted([d for d in dies if d[0] == r], key=lambda d: d[1])
            if i % 2 == 1:
                in_row.reverse()
            seq.extend(in_row)
        orders.append(tuple(seq))
        orders.append(tuple(reversed(seq)))
    for col_asc in (True, False):
        seq = []
        for i, c in enumerate(cols if col_asc else list(reversed(cols))):
            in_col = sorted([d for d in dies if d[1] == c], key=lambda d: d[0])
            if i % 2 == 1:
                in_col.reverse()
            seq.extend(in_col)
        orders.append(tuple(seq))
        orders.append(tuple(reversed(seq)))
    uniq: list[tuple[Die, ...]] = []
    for o in orders:
        if o not in uniq:
            uniq.append(o)
    return uniq


def _apply_chain_order(plan: RoutePlan, topology: WaferTopology, chain_id: str,
                       order: tuple[Die, ...]) -> None:
    plan.chains[chain_id] = ChainInfo(dies=order)
    for f in plan.flows:
        if f.chain_group != chain_id or f.chain_pos is None:
            continue
        f.src = order[f.chain_pos[0]]
        f.dst = order[f.chain_pos[1]]
        plan.routes[f.id] = _initial_path(topology, f.src, f.dst)


def _max_load(plan: RoutePlan) -> tuple[float, int, int]:
    tm = link_loads(plan)
    worst = max(tm.loads.values(), default=(0.0, 0))
    n_at_max = sum(1 for v in tm.loads.values() if v[0] == worst[0])
    return (worst[0], n_at_max, tm.max_flow_count())


def optimize_routes(plan: RoutePlan, topology: WaferTopology,
                    params: OptimizerParams = OptimizerParams()) -> RoutePlan:
    """Iteratively relieve the most congested link; never worsens max load."""
    plan = copy.deepcopy(plan)
    for _ in range(params.max_iter):
        traffic = link_loads(plan)
        mcl, cur_bytes, cur_flows, key = traffic.most_congested()
        if mcl is None or cur_flows <= 1:
            break
        stage, rnd = key[0], key[1]
        crossing = _flows_through(plan, mcl, stage, rnd)

        merged = _merge_multicast(plan, crossing)
        if merged:
            new_bytes = link_loads(plan).max_bytes()
            if cur_bytes - new_bytes >= params.improvement_epsilon * cur_bytes:
                continue

        before = _max_load(plan)
        move = _best_move(plan, topology, crossing, before)
        if move is None:
            break
        apply_fn, after = move
        apply_fn()
        if before[0] - after[0] < params.improvement_epsilon * before[0] and before[1:] <= after[1:]:
            break
    return plan


def _flows_through(plan: RoutePlan, link: DirectedLink, stage: str,
                   rnd: int) -> list[Flow]:
    out = []
    for f in plan.flows:
        if f.stage != stage:
            continue
        if f.round is not None and f.round != rnd:
            continue
        if f.id in plan.in_tree:
            tree = plan.trees[plan.in_tree[f.id]]
            if link in tree.edges:
                out.append(f)
            continue
        if link in plan.path_links(f.id):
            out.append(f)
    return out


def _merge_multicast(plan: RoutePlan, crossing: list[Flow]) -> bool:
    """Merge same-source same-payload flows among those crossing the hot link."""
    groups: dict[tuple, list[Flow]] = {}
    for f in crossing:
        if f.id in plan.in_tree:
            continue
        groups.setdefault((f.src, f.payload, f.stage, f.round), []).append(f)
    merged = False
    for (src, payload, stage, rnd), members in sorted(
            groups.items(), key=lambda kv: str(kv[0])):
        if len(members) < 2:
            continue
        edges: set[DirectedLink] = set()
        for f in members:
            edges.update(plan.path_links(f.id))
        tree_id = len(plan.trees)
        plan.trees[tree_id] = MulticastTree(
            src=src, payload=payload, stage=stage, round=rnd,
            edges=frozenset(edges), members=tuple(f.id for f in members))
        for f in members:
            plan.in_tree[f.id] = tree_id
        merged = True
    return merged


def _best_move(plan: RoutePlan, topology: WaferTopology, crossing: list[Flow],
               before: tuple):
    """Cheapest single move: a path reroute or a chain re-permutation."""
    best = None
    tried_chains: set[str] = set()
    for f in sorted(crossing, key=lambda f: f.id):
        if f.id in plan.in_tree:
            continue
        if f.chain_group is not None and f.chain_group in plan.chains:
            cid = f.chain_group
            if cid not in tried_chains:
                tried_chains.add(cid)
                original = plan.chains[cid].dies
                orig_routes = {g.id: plan.routes[g.id] for g in plan.flows
                               if g.chain_group == cid}
                orig_ends = {g.id: (g.src, g.dst) for g in plan.flows
                             if g.chain_group == cid}
                for order in _snake_orders(original):
                    if order == original:
                        continue
                    _apply_chain_order(plan, topology, cid, order)
                    score = _max_load(plan)
                    # roll back
                    plan.chains[cid] = ChainInfo(dies=original)
                    for g in plan.flows:
                        if g.chain_group == cid:
                            g.src, g.dst = orig_ends[g.id]
                            plan.routes[g.id] = orig_routes[g.id]
                    if score < before and (best is None or score < best[1]):
                        def apply(cid=cid, order=order):
                            _apply_chain_order(plan, topology, cid, order)
                        best = (apply, score)
        current = plan.routes[f.id]
        for path in candidate_paths(topology, f.src, f.dst):
            if path == current:
                continue
            plan.routes[f.id] = path
            score = _max_load(plan)
            plan.routes[f.id] = current
            if score < before and (best is None or score < best[1]):
                def apply(fid=f.id, path=path):
                    plan.routes[fid] = path
                best = (apply, score)
    return best
