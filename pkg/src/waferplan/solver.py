"""Plan assembly and the two-level strategy search.

The search splits the compute graph at edges no residual connection spans,
runs an exact dynamic program over each sub-chain (state = operator x
candidate strategy, transition = reshard cost between layout signatures),
then refines placement genes with a seeded genetic stage. Identical
sub-graphs (repeated transformer blocks) are solved once and reused, and
per-operator evaluations are cached by shape, so wall-clock stays in the
seconds-to-minutes range at wafer scale. A brute-force enumerator provides
the optimality oracle at small scale.
"""

from __future__ import annotations

import itertools
import random
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional, Sequence

from . import costmodel
from .costmodel import CostReport, EfficiencyParams, OpBreakdown
from .parallelism import (CommOp, GroupAssignment, ParallelConfig,
                          PlacementGenes, ShardLayout, derive_comm_ops,
                          format_strategy, reshard_comm_ops, shard_tensors,
                          ENUMERATIONS, USER_AXES)
from .routing import RoutePlan, init_routes, link_loads, optimize_routes
from .streaming import (ScheduleVerdict, TransferChoice,
                        generate_stream_schedule, verify_schedule)
from .topology import WaferTopology
from .workload import ComputeGraph, Operator


class InfeasibleError(RuntimeError):
    """No memory-feasible plan exists; carries the per-die shortfall."""

    def __init__(self, message: str, memory_gap_bytes: float = 0.0):
        super().__init__(message)
        self.memory_gap_bytes = memory_gap_bytes


@dataclass
class OpEval:
    """One operator evaluated under one (strategy, genes) pair."""

    cfg: ParallelConfig
    genes: PlacementGenes
    layout: ShardLayout
    assignment: GroupAssignment
    breakdown: OpBreakdown
    comm_ops: list[CommOp]
    route_plan: RoutePlan
    verdict: Optional[ScheduleVerdict]
    stream_payload_bytes: float
    traffic_link_bytes: float


@dataclass
class EdgeEval:
    t_inter: float
    comm_ops: list[CommOp]
    route_plan: Optional[RoutePlan]
    traffic_link_bytes: float


@dataclass
class ExecutionPlan:
    graph: ComputeGraph
    topology: WaferTopology
    eff: EfficiencyParams
    training: bool
    genes: PlacementGenes
    per_op: dict[str, OpEval]
    per_edge: dict[tuple[str, str], EdgeEval]
    report: Optional[CostReport] = None
    trace: list[tuple[int, float]] = field(default_factory=list)

    @property
    def tokens_per_step(self) -> float:
        first = self.graph.topological_order()[0]
        return float(first.b * first.m)

    @property
    def strategy_label(self) -> str:
        cfgs = {ev.cfg for ev in self.per_op.values()}
        if len(cfgs) == 1:
            return format_strategy(next(iter(cfgs)))
        gemms = {self.per_op[o.id].cfg for o in self.graph.topological_order()
                 if o.is_gemm and o.has_weight}
        if len(gemms) == 1:
            return format_strategy(next(iter(gemms)))
        return "mixed"

    def config_of(self, op_id: str) -> ParallelConfig:
        return self.per_op[op_id].cfg


# -- cached per-operator / per-edge evaluation --------------------------------

_OP_CACHE: dict = {}
_EDGE_CACHE: dict = {}


def clear_caches() -> None:
    _OP_CACHE.clear()
    _EDGE_CACHE.clear()


def _shape_key(op: Operator) -> tuple:
    return (op.kind.value, op.b, op.m, op.n, op.k, op.precision, op.activation)


def _proxy(op: Operator) -> Operator:
    return replace(op, id=f"{op.kind.value}_{op.b}x{op.m}x{op.n}x{op.k}",
                   predecessors=())


def evaluate_op(op: Operator, cfg: ParallelConfig, genes: PlacementGenes,
                topology: WaferTopology, eff: EfficiencyParams,
                training: bool = True, optimize: bool = False) -> OpEval:
    """Shard, derive traffic, route, and cost one operator (cached by shape)."""
    key = (_shape_key(op), cfg, genes, topology, eff, training, optimize)
    hit = _OP_CACHE.get(key)
    if hit is not None:
        return hit

    proxy = _proxy(op)
    layout = shard_tensors(proxy, cfg, transfer=genes.transfer_override)
    assignment = assign_for(topology, cfg, genes)
    comm_ops = derive_comm_ops(proxy, cfg, layout, assignment, training=training)

    verdict = None
    stream_payload = 0.0
    if cfg.stream > 1 and proxy.is_gemm:
        choice = TransferChoice(layout.transfer) if layout.transfer else TransferChoice.INPUT
        schedule = generate_stream_schedule(cfg.stream, choice)
        verdict = verify_schedule(schedule)
        stream_flows = [c for c in comm_ops if c.kind == "p2p_stream" and c.stage == "fwd"]
        if stream_flows:
            stream_payload = stream_flows[0].bytes

    plan = init_routes(comm_ops, topology)
    if optimize:
        plan = optimize_routes(plan, topology)
    traffic = link_loads(plan)

    comp = costmodel.op_compute_time(proxy, layout, assignment, topology, eff, training)
    p2p_s, coll_s = costmodel.aggregate_comm(proxy.id, comm_ops, plan, traffic,
                                             topology, eff)
    ev = OpEval(cfg=cfg, genes=genes, layout=layout, assignment=assignment,
                breakdown=OpBreakdown(comp=comp, p2p=p2p_s, collective=coll_s),
                comm_ops=comm_ops, route_plan=plan, verdict=verdict,
                stream_payload_bytes=stream_payload,
                traffic_link_bytes=_physical_link_bytes(plan))
    _OP_CACHE[key] = ev
    return ev


def assign_for(topology: WaferTopology, cfg: ParallelConfig,
               genes: PlacementGenes) -> GroupAssignment:
    from .parallelism import assign_groups
    return assign_groups(topology, cfg, genes)


def _physical_link_bytes(plan: RoutePlan) -> float:
    total = 0.0
    seen_trees: set[int] = set()
    for f in plan.flows:
        tid = plan.in_tree.get(f.id)
        if tid is not None:
            if tid not in seen_trees:
                seen_trees.add(tid)
                total += f.bytes * len(plan.trees[tid].edges)
            continue
        total += f.bytes * (len(plan.routes[f.id]) - 1)
    return total


def evaluate_edge(producer: Operator, prod_ev: OpEval, consumer: Operator,
                  cons_ev: OpEval, topology: WaferTopology,
                  eff: EfficiencyParams, training: bool) -> EdgeEval:
    key = (_shape_key(producer), prod_ev.cfg, prod_ev.genes,
           _shape_key(consumer), cons_ev.cfg, cons_ev.genes,
           topology, eff, training)
    hit = _EDGE_CACHE.get(key)
    if hit is not None:
        return hit

    ops = reshard_comm_ops(_proxy(producer), prod_ev.layout,
                           _proxy(consumer), cons_ev.layout,
                           prod_ev.assignment, cons_ev.assignment,
                           training=training)
    if not ops:
        ev = EdgeEval(t_inter=0.0, comm_ops=[], route_plan=None,
                      traffic_link_bytes=0.0)
        _EDGE_CACHE[key] = ev
        return ev

    plan = init_routes(ops, topology)
    traffic = link_loads(plan)
    times = costmodel.transfer_times(ops, plan, traffic, topology, eff)
    per_stage: dict[str, float] = {}
    for f in plan.flows:
        per_stage[f.stage] = max(per_stage.get(f.stage, 0.0), times[f.id])
    ev = EdgeEval(t_inter=sum(per_stage.values()), comm_ops=ops,
                  route_plan=plan, traffic_link_bytes=_physical_link_bytes(plan))
    _EDGE_CACHE[key] = ev
    return ev


def build_plan(graph: ComputeGraph, topology: WaferTopology,
               config, genes: Optional[PlacementGenes] = None,
               eff: Optional[EfficiencyParams] = None, training: bool = True,
               optimize: bool = False) -> ExecutionPlan:
    """Assemble and cost a full plan from per-op (or uniform) strategies."""
    genes = genes or PlacementGenes()
    eff = eff or EfficiencyParams()
    if isinstance(config, ParallelConfig):
        cfg_map = {op.id: config for op in graph.operators}
    else:
        cfg_map = dict(config)

    per_op: dict[str, OpEval] = {}
    for op in graph.topological_order():
        per_op[op.id] = evaluate_op(op, cfg_map[op.id], genes, topology, eff,
                                    training, optimize)
    per_edge: dict[tuple[str, str], EdgeEval] = {}
    for u, v in graph.edges:
        per_edge[(u, v)] = evaluate_edge(graph.op(u), per_op[u], graph.op(v),
                                         per_op[v], topology, eff, training)

    plan = ExecutionPlan(graph=graph, topology=topology, eff=eff,
                         training=training, genes=genes, per_op=per_op,
                         per_edge=per_edge)
    plan.report = costmodel.total_cost(plan)
    return plan


# -- graph splitting -----------------------------------------------------------


def split_graph(graph: ComputeGraph) -> list[ComputeGraph]:
    """Cut between consecutive operators wherever only the chain edge crosses.

    A residual connection spanning a boundary forbids the cut, so every
    residual stays inside one sub-graph and concatenating the pieces
    reproduces the original graph.
    """
    order = graph.topological_order()
    pos = {op.id: i for i, op in enumerate(order)}
    n = len(order)

    cuttable = [True] * (n - 1)
    for u, v in graph.edges:
        lo, hi = pos[u], pos[v]
        if hi - lo > 1:
            for i in range(lo, hi):
                cuttable[i] = False
    for i in range(n - 1):
        if cuttable[i] and (order[i].id, order[i + 1].id) not in graph.edges:
            cuttable[i] = False  # parallel branches: do not cut

    pieces: list[list[Operator]] = []
    cur = [order[0]]
    for i in range(n - 1):
        if cuttable[i]:
            pieces.append(cur)
            cur = []
        cur.append(order[i + 1])
    pieces.append(cur)

    out = []
    for piece in pieces:
        ids = {op.id for op in piece}
        edges = [(u, v) for u, v in graph.edges if u in ids and v in ids]
        residuals = [e for e in graph.residual_edges if e[0] in ids and e[1] in ids]
        out.append(ComputeGraph(operators=list(piece), edges=edges,
                                residual_edges=residuals))
    return out


# -- candidate strategies -------------------------------------------------------


def candidate_configs(topology: WaferTopology, include_fsdp: bool = True,
                      max_degree: int = 32) -> list[ParallelConfig]:
    """Degree tuples with power-of-two axes whose product fills the die count."""
    n = len(topology.enabled_dies())
    degrees = [d for d in (1, 2, 4, 8, 16, 32) if d <= min(n, max_degree)]
    out: list[ParallelConfig] = []
    for dp, tp, sp, stream in itertools.product(degrees, repeat=4):
        if dp * tp * sp * stream != n:
            continue
        out.append(ParallelConfig(dp=dp, tp=tp, sp=sp, stream=stream))
        if include_fsdp and dp > 1:
            out.append(ParallelConfig(dp=dp, tp=tp, sp=sp, stream=stream, fsdp=True))
    if not out:
        out.append(ParallelConfig())
    return out


def memory_feasible(op: Operator, cfg: ParallelConfig, topology: WaferTopology,
                    graph_weight_params: float) -> bool:
    """Cheap whole-graph extrapolation: would weights plus one activation fit
    per die if every operator used this strategy?"""
    n = cfg.total_dies
    repl_w = (1 if cfg.fsdp else cfg.dp) * cfg.sp * cfg.cp
    weight_bytes = graph_weight_params * costmodel.TRAINING_BYTES_PER_PARAM * repl_w / n
    tp_n, tp_k = cfg.tp_factors
    act_bytes = (op.b / cfg.dp) * (op.m / max(1, cfg.sp * cfg.cp * cfg.stream)) \
        * (op.k / max(1, tp_k)) * op.element_bytes * tp_n
    return weight_bytes + 2 * act_bytes <= topology.die_spec.hbm_bytes


# -- dynamic programming and brute force ----------------------------------------


def _try_eval(op, cfg, genes, topology, eff, training) -> Optional[OpEval]:
    try:
        return evaluate_op(op, cfg, genes, topology, eff, training)
    except ValueError:
        return None  # non-divisible dims or too few dies for this strategy


def dp_search(sub_graph: ComputeGraph, topology: WaferTopology,
              candidates: Sequence[ParallelConfig],
              genes: Optional[PlacementGenes] = None,
              eff: Optional[EfficiencyParams] = None, training: bool = True,
              feasible: Optional[Callable[[Operator, ParallelConfig], bool]] = None
              ) -> tuple[list[ParallelConfig], float]:
    """Exact min-cost strategy chain over the candidate set.

    State is (operator position, strategy); the transition adds the reshard
    cost between consecutive layouts, so the result is optimal for the
    candidate set under the cost model (assertable against brute_force).
    """
    if not candidates:
        raise ValueError("candidate config set must not be empty")
    genes = genes or PlacementGenes()
    eff = eff or EfficiencyParams()
    order = sub_graph.topological_order()

    evals: list[list[Optional[OpEval]]] = []
    for op in order:
        row = []
        for cfg in candidates:
            if feasible is not None and not feasible(op, cfg):
                row.append(None)
                continue
            row.append(_try_eval(op, cfg, genes, topology, eff, training))
        if all(e is None for e in row):
            raise InfeasibleError(f"no candidate strategy fits operator {op.id}")
        evals.append(row)

    inf = float("inf")
    n_cfg = len(candidates)
    cost = [[inf] * n_cfg for _ in order]
    back = [[-1] * n_cfg for _ in order]
    for c, ev in enumerate(evals[0]):
        if ev is not None:
            cost[0][c] = ev.breakdown.t_intra
    for i in range(1, len(order)):
        prod = order[i - 1]
        cons = order[i]
        for c, ev in enumerate(evals[i]):
            if ev is None:
                continue
            best, best_prev = inf, -1
            for cp_, prev_ev in enumerate(evals[i - 1]):
                if prev_ev is None or cost[i - 1][cp_] == inf:
                    continue
                edge = evaluate_edge(prod, prev_ev, cons, ev, topology, eff, training)
                total = cost[i - 1][cp_] + edge.t_inter
                if total < best:
                    best, best_prev = total, cp_
            if best_prev >= 0:
                cost[i][c] = best + ev.breakdown.t_intra
                back[i][c] = best_prev

    last = min(range(n_cfg), key=lambda c: (cost[-1][c], c))
    if cost[-1][last] == inf:
        raise InfeasibleError("dynamic program found no feasible chain")
    chain = [last]
    for i in range(len(order) - 1, 0, -1):
        chain.append(back[i][chain[-1]])
    chain.reverse()
    return [candidates[c] for c in chain], cost[-1][chain[-1]]


def brute_force(sub_graph: ComputeGraph, topology: WaferTopology,
                candidates: Sequence[ParallelConfig],
                genes_list: Optional[Sequence[PlacementGenes]] = None,
                eff: Optional[EfficiencyParams] = None, training: bool = True,
                cap: int = 1_000_000) -> tuple[list[ParallelConfig], PlacementGenes, float]:
    """Exhaustive optimum over config chains x gene vectors (validation oracle)."""
    genes_list = list(genes_list or [PlacementGenes()])
    eff = eff or EfficiencyParams()
    order = sub_graph.topological_order()
    combos = len(candidates) ** len(order) * len(genes_list)
    if combos > cap:
        raise ValueError(f"brute force refused: {combos} combinations exceed cap {cap}")

    best = (float("inf"), None, None)
    for genes in genes_list:
        for chain in itertools.product(range(len(candidates)), repeat=len(order)):
            total = 0.0
            evs = []
            ok = True
            for op, c in zip(order, chain):
                ev = _try_eval(op, candidates[c], genes, topology, eff, training)
                if ev is None:
                    ok = False
                    break
                evs.append(ev)
                total += ev.breakdown.t_intra
            if not ok:
                continue
            for i in range(1, len(order)):
                edge = evaluate_edge(order[i - 1], evs[i - 1], order[i], evs[i],
                                     topology, eff, training)
                total += edge.t_inter
            if total < best[0]:
                best = (total, [candidates[c] for c in chain], genes)
    if best[1] is None:
        raise InfeasibleError("brute force found no feasible chain")
    return best[1], best[2], best[0]


# -- genetic refinement ----------------------------------------------------------


@dataclass(frozen=True)
class GAParams:
    population: int = 32
    generations: int = 50
    crossover_rate: float = 0.8
    mutation_rate: float = 0.1
    elite_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be at least 2")
        for r in (self.crossover_rate, self.mutation_rate, self.elite_fraction):
            if not (0 <= r <= 1):
                raise ValueError("rates must lie in [0, 1]")


_AXIS_PERMS = list(itertools.permutations(USER_AXES))


def _random_genes(rng: random.Random) -> PlacementGenes:
    return PlacementGenes(
        enumeration=rng.choice(ENUMERATIONS),
        axis_order=rng.choice(_AXIS_PERMS),
        transfer_override=rng.choice([None, "weight", "input"]),
    )


def _crossover(a: PlacementGenes, b: PlacementGenes, rng: random.Random) -> PlacementGenes:
    return PlacementGenes(
        enumeration=rng.choice([a.enumeration, b.enumeration]),
        axis_order=rng.choice([a.axis_order, b.axis_order]),
        transfer_override=rng.choice([a.transfer_override, b.transfer_override]),
    )


def _mutate(g: PlacementGenes, rng: random.Random) -> PlacementGenes:
    which = rng.randrange(3)
    if which == 0:
        return replace(g, enumeration=rng.choice(ENUMERATIONS))
    if which == 1:
        order = list(g.axis_order or USER_AXES)
        i, j = rng.randrange(len(order)), rng.randrange(len(order))
        order[i], order[j] = order[j], order[i]
        return replace(g, axis_order=tuple(order))
    return replace(g, transfer_override=rng.choice([None, "weight", "input"]))


def _plan_cost(plan: ExecutionPlan) -> float:
    report = plan.report
    assert report is not None
    if report.oom:
        return float("inf")
    return report.t_total


def ga_refine(initial: ExecutionPlan, topology: WaferTopology,
              params: GAParams = GAParams(),
              budget_deadline: Optional[float] = None) -> ExecutionPlan:
    """Evolve placement genes; elitism keeps the final cost <= the initial."""
    cfg_map = {op_id: ev.cfg for op_id, ev in initial.per_op.items()}
    rng = random.Random(params.seed)

    def fitness(genes: PlacementGenes) -> tuple[float, ExecutionPlan]:
        try:
            plan = build_plan(initial.graph, topology, cfg_map, genes,
                              initial.eff, initial.training)
        except ValueError:
            return float("inf"), initial
        return _plan_cost(plan), plan

    population = [initial.genes] + [_random_genes(rng)
                                    for _ in range(params.population - 1)]
    scored = []
    best_plan = initial
    best_cost = _plan_cost(initial)
    trace: list[tuple[int, float]] = list(initial.trace)
    for genes in population:
        c, p = fitness(genes)
        scored.append((c, genes, p))
    scored.sort(key=lambda t: (t[0], str(t[1])))
    if scored[0][0] < best_cost:
        best_cost, best_plan = scored[0][0], scored[0][2]
    trace.append((0, best_cost))

    n_elite = max(1, int(params.elite_fraction * params.population))
    for gen in range(1, params.generations + 1):
        if budget_deadline is not None and time.monotonic() > budget_deadline:
            break
        nxt = [g for _, g, _ in scored[:n_elite]]
        while len(nxt) < params.population:
            a = _tournament(scored, rng)
            b = _tournament(scored, rng)
            child = _crossover(a, b, rng) if rng.random() < params.crossover_rate else a
            if rng.random() < params.mutation_rate:
                child = _mutate(child, rng)
            nxt.append(child)
        scored = []
        for genes in nxt:
            c, p = fitness(genes)
            scored.append((c, genes, p))
        scored.sort(key=lambda t: (t[0], str(t[1])))
        if scored[0][0] < best_cost:
            best_cost, best_plan = scored[0][0], scored[0][2]
        trace.append((gen, best_cost))

    best_plan.trace = trace
    return best_plan


def _tournament(scored, rng: random.Random, k: int = 3) -> PlacementGenes:
    picks = [scored[rng.randrange(len(scored))] for _ in range(k)]
    picks.sort(key=lambda t: (t[0], str(t[1])))
    return picks[0][1]


# -- end-to-end search -----------------------------------------------------------


def solve(graph: ComputeGraph, topology: WaferTopology,
          budget_s: float = 600.0,
          candidates: Optional[Sequence[ParallelConfig]] = None,
          ga_params: Optional[GAParams] = None,
          eff: Optional[EfficiencyParams] = None, training: bool = True,
          seed: int = 0) -> ExecutionPlan:
    """Split -> per-sub-graph DP -> genetic refinement -> optimized routes."""
    deadline = time.monotonic() + budget_s
    eff = eff or EfficiencyParams()
    candidates = list(candidates or candidate_configs(topology))
    ga = ga_params or GAParams(seed=seed)

    graph_weight_params = sum(op.n * op.k for op in graph.operators if op.has_weight)

    def feasible(op: Operator, cfg: ParallelConfig) -> bool:
        return memory_feasible(op, cfg, topology, graph_weight_params)

    feas_candidates = candidates
    sample = graph.topological_order()[0]
    if not any(feasible(sample, c) for c in candidates):
        gap = min(
            graph_weight_params * costmodel.TRAINING_BYTES_PER_PARAM
            * ((1 if c.fsdp else c.dp) * c.sp * c.cp) / c.total_dies
            for c in candidates) - topology.die_spec.hbm_bytes
        raise InfeasibleError(
            "no candidate strategy fits the model in per-die memory "
            f"(short by at least {gap / 1e9:.1f} GB per die)", memory_gap_bytes=gap)

    sub_graphs = split_graph(graph)
    cfg_map: dict[str, ParallelConfig] = {}
    dp_cache: dict[tuple, list[ParallelConfig]] = {}
    for sg in sub_graphs:
        sig = tuple(_shape_key(op) for op in sg.topological_order())
        if sig not in dp_cache:
            chain, _ = dp_search(sg, topology, feas_candidates, PlacementGenes(),
                                 eff, training, feasible=feasible)
            dp_cache[sig] = chain
        for op, cfg in zip(sg.topological_order(), dp_cache[sig]):
            cfg_map[op.id] = cfg
        if time.monotonic() > deadline:
            break
    for op in graph.operators:  # budget ran out mid-split: fill with defaults
        if op.id not in cfg_map:
            cfg_map[op.id] = cfg_map[graph.topological_order()[0].id]

    plan = build_plan(graph, topology, cfg_map, PlacementGenes(), eff, training)
    if time.monotonic() < deadline and ga.generations > 0:
        plan = ga_refine(plan, topology, ga, budget_deadline=deadline)

    # final pass with the contention optimizer on
    final = build_plan(graph, topology,
                       {oid: ev.cfg for oid, ev in plan.per_op.items()},
                       plan.genes, eff, training, optimize=True)
    final.trace = plan.trace
    assert final.report is not None
    if final.report.oom:
        worst = max(final.report.memory_per_die.values())
        gap = worst - topology.die_spec.hbm_bytes
        raise InfeasibleError(
            f"best plan exceeds per-die memory by {gap / 1e9:.1f} GB",
            memory_gap_bytes=gap)
    return final
