"""Analytical latency, memory, and energy model for routed execution plans.

Closed forms replace event simulation:

  computation   t = flops / (peak * utilization * surviving-core scale),
                raised to the HBM streaming time when the shard working set
                exceeds SRAM;
  P2P           t = bytes / (bandwidth * link_efficiency / share)
                + hops * link latency + per-message overhead, where share is
                the equal-split flow count on the path's busiest link;
  collectives   ring AllReduce = 2(p-1)/p * bytes / effective bandwidth
                + 2(p-1) * hop latency; AllGather / ReduceScatter carry half
                the volume term and (p-1) hop latencies.

Per-operator cost composes as collective time plus max(compute, P2P): the
max encodes compute/stream overlap. Inter-operator cost is the reshard P2P
time between differing layouts. The graph total is the sum of both parts,
which makes per-subgraph sums exact. Utilization, link efficiency, and the
per-message overhead are calibration knobs, not hardware datasheet values.

Training steps count forward + input-gradient + weight-gradient FLOPs (3x a
forward pass for weighted GEMMs) and the matching backward communication
stages. Memory accounts 16 bytes per weight parameter (fp16 weight + fp16
gradient + fp32 Adam moments and master copy), live activations along the
topological order, and the stream relay buffers reported by the schedule
verdict.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .parallelism import CommOp
from .routing import Flow, RoutePlan, TrafficMatrix
from .topology import Die, DieSpec, LinkSpec, WaferTopology
from .workload import (ComputeGraph, Operator, op_costs,
                       ROLE_INPUT, ROLE_OUTPUT, ROLE_WEIGHT)

# fp16 weight + fp16 gradient + fp32 Adam m, v, and master weight
TRAINING_BYTES_PER_PARAM = 2 + 2 + 4 + 4 + 4


@dataclass(frozen=True)
class EfficiencyParams:
    """Calibration knobs (defaults are engineering choices, not datasheet)."""

    compute_utilization: float = 0.8
    link_efficiency: float = 0.9
    per_message_overhead: float = 1e-6

    def __post_init__(self):
        if not (0 < self.compute_utilization <= 1):
            raise ValueError("compute_utilization must be in (0, 1]")
        if not (0 < self.link_efficiency <= 1):
            raise ValueError("link_efficiency must be in (0, 1]")
        if self.per_message_overhead < 0:
            raise ValueError("per_message_overhead must be non-negative")


@dataclass
class OpBreakdown:
    comp: float = 0.0
    p2p: float = 0.0
    collective: float = 0.0

    @property
    def t_intra(self) -> float:
        return self.collective + max(self.comp, self.p2p)


@dataclass
class CostReport:
    t_total: float
    per_op_intra: dict[str, float]
    per_edge_inter: dict[tuple[str, str], float]
    comp_seconds: float
    p2p_seconds: float
    collective_seconds: float
    reshard_seconds: float
    memory_per_die: dict[Die, float]
    memory_peak: float
    oom_dies: list[Die]
    traffic_bytes: float
    energy_joules: float
    power_watts: float
    throughput_tokens_per_s: float
    tokens_per_joule: float
    tokens_per_step: float
    strategy: str = ""
    schema_version: int = 1

    @property
    def oom(self) -> bool:
        return bool(self.oom_dies)

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "strategy": self.strategy,
            "t_total_s": self.t_total,
            "breakdown_s": {
                "compute": self.comp_seconds,
                "p2p": self.p2p_seconds,
                "collective": self.collective_seconds,
                "reshard": self.reshard_seconds,
            },
            "per_op_intra_s": dict(sorted(self.per_op_intra.items())),
            "per_edge_inter_s": {f"{u}->{v}": t for (u, v), t
                                 in sorted(self.per_edge_inter.items())},
            "memory_peak_bytes": self.memory_peak,
            "memory_per_die_bytes": {f"{r},{c}": b for (r, c), b
                                     in sorted(self.memory_per_die.items())},
            "oom_dies": [f"{r},{c}" for r, c in self.oom_dies],
            "traffic_bytes": self.traffic_bytes,
            "energy_joules": self.energy_joules,
            "power_watts": self.power_watts,
            "throughput_tokens_per_s": self.throughput_tokens_per_s,
            "tokens_per_joule": self.tokens_per_joule,
            "tokens_per_step": self.tokens_per_step,
        }


# -- primitive terms ---------------------------------------------------------


def comp_time(flops: float, touched_bytes: float, die: DieSpec,
              eff: EfficiencyParams, scale: float = 1.0) -> float:
    """FLOP time at derated peak, raised to HBM time past SRAM capacity."""
    if flops <= 0 and touched_bytes <= 0:
        return 0.0
    if scale <= 0:
        return float("inf")
    t_flop = flops / (die.peak_compute * eff.compute_utilization * scale)
    if touched_bytes > die.sram_bytes:
        t_mem = touched_bytes / die.hbm_bandwidth + die.hbm_latency
        return max(t_flop, t_mem)
    return t_flop


def p2p_time(nbytes: float, hops: int, link: LinkSpec, eff: EfficiencyParams,
             share: float = 1.0) -> float:
    if nbytes <= 0 or hops <= 0:
        return 0.0
    bw = link.bandwidth * eff.link_efficiency / max(1.0, share)
    return nbytes / bw + hops * link.latency + eff.per_message_overhead


def collective_time(kind: str, nbytes: float, p: int, hops: int,
                    link: LinkSpec, eff: EfficiencyParams,
                    share: float = 1.0) -> float:
    """Ring-algorithm collective over p members, each step ``hops`` links."""
    if p <= 1 or nbytes <= 0:
        return 0.0
    bw = link.bandwidth * eff.link_efficiency / max(1.0, share)
    if kind == "allreduce":
        return 2.0 * (p - 1) / p * nbytes / bw + 2 * (p - 1) * hops * link.latency
    if kind in ("allgather", "reducescatter"):
        return (p - 1) / p * nbytes / bw + (p - 1) * hops * link.latency
    raise ValueError(f"unknown collective kind {kind!r}")


def _flow_share(flow: Flow, plan: RoutePlan, traffic: TrafficMatrix) -> int:
    links = plan.path_links(flow.id)
    if not links:
        return 1
    return max(traffic.link_share(flow.stage, flow.round, l) for l in links)


def transfer_times(comm_ops: list[CommOp], plan: RoutePlan,
                   traffic: TrafficMatrix, topology: WaferTopology,
                   eff: EfficiencyParams) -> dict[int, float]:
    """Per-flow seconds under equal-split contention from the traffic matrix."""
    link = topology.link_spec
    out: dict[int, float] = {}
    for f in plan.flows:
        hops = len(plan.routes[f.id]) - 1
        share = _flow_share(f, plan, traffic)
        if f.comm_kind in ("p2p_stream", "reshard_p2p", "p2p"):
            out[f.id] = p2p_time(f.bytes, hops, link, eff, share)
        else:
            # ring-edge component; the op-level aggregation applies the
            # closed-form collective formula instead
            out[f.id] = f.bytes / (link.bandwidth * eff.link_efficiency / max(1, share)) \
                + hops * link.latency
    return out


# -- per-operator evaluation --------------------------------------------------


def shard_fraction(layout, slot: int, op: Operator) -> float:
    """This slot's share of the operator's FLOPs."""
    inp = layout.per_slot[slot].get(ROLE_INPUT)
    out = layout.per_slot[slot].get(ROLE_OUTPUT)
    if inp is None or out is None:
        return 0.0
    b_f = (inp["B"][1] - inp["B"][0]) / op.b
    m_f = (inp["M"][1] - inp["M"][0]) / op.m
    k_f = (out["K"][1] - out["K"][0]) / op.k
    n_f = (inp["N"][1] - inp["N"][0]) / op.n if op.has_weight else 1.0
    return b_f * m_f * k_f * n_f


def op_compute_time(op: Operator, layout, assignment, topology: WaferTopology,
                    eff: EfficiencyParams, training: bool) -> float:
    """Bottleneck die's compute time (max across the group)."""
    costs = op_costs(op)
    flops_total = costs.training_flops if training else costs.forward_flops
    worst = 0.0
    for slot in range(layout.n_slots):
        die = assignment.die_of(slot)
        frac = shard_fraction(layout, slot, op)
        touched = (layout.slot_bytes(slot, ROLE_INPUT)
                   + layout.slot_bytes(slot, ROLE_WEIGHT)
                   + layout.slot_bytes(slot, ROLE_OUTPUT))
        t = comp_time(flops_total * frac, touched, topology.die_spec, eff,
                      scale=topology.die_compute_scale(die))
        worst = max(worst, t)
    return worst


def aggregate_comm(op_id: str, comm_ops: list[CommOp], plan: RoutePlan,
                   traffic: TrafficMatrix, topology: WaferTopology,
                   eff: EfficiencyParams) -> tuple[float, float]:
    """(p2p_seconds, collective_seconds) for one operator's intra traffic.

    Stream rounds serialize (sum over rounds of the slowest transfer that
    round); parallel groups overlap (max within a round / collective family).
    """
    link = topology.link_spec
    flow_by_id = {f.id: f for f in plan.flows}
    times = transfer_times(comm_ops, plan, traffic, topology, eff)

    round_worst: dict[tuple[str, object], float] = {}
    families: dict[str, float] = {}
    for f in plan.flows:
        if f.comm_kind == "p2p_stream":
            key = (f.stage, f.round)
            round_worst[key] = max(round_worst.get(key, 0.0), times[f.id])
        elif f.comm_kind in ("allreduce", "allgather", "reducescatter"):
            family = f.payload.rsplit(".g", 1)[0]
            chain = plan.chains.get(f.chain_group) if f.chain_group else None
            p = len(chain.dies) if chain else 2
            factor = 2.0 * (p - 1) / p if f.comm_kind == "allreduce" else (p - 1) / p
            buffer_bytes = f.bytes / factor if factor > 0 else f.bytes
            hops = max(1, len(plan.routes[f.id]) - 1)
            share = _flow_share(f, plan, traffic)
            t = collective_time(f.comm_kind, buffer_bytes, p, hops, link, eff, share)
            # groups of the same family run concurrently: keep the slowest
            families[family] = max(families.get(family, 0.0), t)

    p2p_s = sum(round_worst.values())
    coll_s = sum(families.values())
    return p2p_s, coll_s


# -- plan-level evaluation ----------------------------------------------------


def total_cost(plan) -> CostReport:
    """Evaluate an assembled ExecutionPlan (see solver.build_plan).

    t_total is the sum of per-operator intra costs and per-edge reshard
    costs; the additivity is exact by construction, which the split-solver
    relies on.
    """
    graph: ComputeGraph = plan.graph
    topology: WaferTopology = plan.topology
    eff: EfficiencyParams = plan.eff

    per_op_intra: dict[str, float] = {}
    comp_s = p2p_s = coll_s = 0.0
    traffic_bytes = 0.0
    for op in graph.topological_order():
        ev = plan.per_op[op.id]
        per_op_intra[op.id] = ev.breakdown.t_intra
        comp_s += ev.breakdown.comp
        p2p_s += ev.breakdown.p2p
        coll_s += ev.breakdown.collective
        traffic_bytes += ev.traffic_link_bytes

    per_edge_inter: dict[tuple[str, str], float] = {}
    reshard_s = 0.0
    for edge, ev in plan.per_edge.items():
        per_edge_inter[edge] = ev.t_inter
        reshard_s += ev.t_inter
        traffic_bytes += ev.traffic_link_bytes

    t_total = sum(per_op_intra.values()) + reshard_s

    memory_per_die, oom = memory_peak(plan)
    peak = max(memory_per_die.values(), default=0.0)

    joules, watts, tok_per_j = energy(plan, t_total, traffic_bytes)
    tokens = plan.tokens_per_step
    throughput = tokens / t_total if t_total > 0 else 0.0

    return CostReport(
        t_total=t_total,
        per_op_intra=per_op_intra,
        per_edge_inter=per_edge_inter,
        comp_seconds=comp_s,
        p2p_seconds=p2p_s,
        collective_seconds=coll_s,
        reshard_seconds=reshard_s,
        memory_per_die=memory_per_die,
        memory_peak=peak,
        oom_dies=oom,
        traffic_bytes=traffic_bytes,
        energy_joules=joules,
        power_watts=watts,
        throughput_tokens_per_s=throughput,
        tokens_per_joule=tok_per_j,
        tokens_per_step=tokens,
        strategy=plan.strategy_label,
    )


def memory_peak(plan) -> tuple[dict[Die, float], list[Die]]:
    """Per-die bytes: weights at 16 B/param, live activations, relay buffers."""
    topology: WaferTopology = plan.topology
    per_die: dict[Die, float] = {d: 0.0 for d in topology.enabled_dies()}

    # persistent weight + optimizer state
    for op in plan.graph.topological_order():
        ev = plan.per_op[op.id]
        if not op.has_weight:
            continue
        for slot in range(ev.layout.n_slots):
            die = ev.assignment.die_of(slot)
            params = ev.layout.slot_bytes(slot, ROLE_WEIGHT) / op.element_bytes
            per_die[die] = per_die.get(die, 0.0) + params * TRAINING_BYTES_PER_PARAM

    # live activations along topological order (one per residual branch)
    order = plan.graph.topological_order()
    consumers_left = {op.id: len(plan.graph.consumers(op.id)) for op in order}
    live: dict[str, Operator] = {}
    act_peak: dict[Die, float] = {d: 0.0 for d in per_die}
    act_cur: dict[Die, float] = {d: 0.0 for d in per_die}

    def op_out_bytes(op_id: str) -> dict[Die, float]:
        ev = plan.per_op[op_id]
        out: dict[Die, float] = {}
        for slot in range(ev.layout.n_slots):
            die = ev.assignment.die_of(slot)
            out[die] = out.get(die, 0.0) + ev.layout.slot_bytes(slot, ROLE_OUTPUT)
        return out

    for op in order:
        for die, b in op_out_bytes(op.id).items():
            act_cur[die] = act_cur.get(die, 0.0) + b
        live[op.id] = op
        for die in act_cur:
            act_peak[die] = max(act_peak[die], act_cur[die])
        for pred in plan.graph.producers(op.id):
            consumers_left[pred] -= 1
            if consumers_left[pred] == 0 and pred in live:
                for die, b in op_out_bytes(pred).items():
                    act_cur[die] = act_cur.get(die, 0.0) - b
                del live[pred]

    # stream relay buffers are transient per-op: take the worst op per die
    relay_peak: dict[Die, float] = {d: 0.0 for d in per_die}
    for op in order:
        ev = plan.per_op[op.id]
        if ev.verdict is not None and ev.stream_payload_bytes > 0:
            extra = ev.verdict.buffer_peak * ev.stream_payload_bytes
            for slot in range(ev.layout.n_slots):
                die = ev.assignment.die_of(slot)
                relay_peak[die] = max(relay_peak.get(die, 0.0), extra)

    totals = {d: per_die.get(d, 0.0) + act_peak.get(d, 0.0) + relay_peak.get(d, 0.0)
              for d in per_die}
    oom = sorted(d for d, b in totals.items() if b > topology.die_spec.hbm_bytes)
    return totals, oom


def energy(plan, t_total: float, traffic_bytes: float) -> tuple[float, float, float]:
    """Total joules = compute + D2D link + HBM traffic energy; power = E/t."""
    topology: WaferTopology = plan.topology
    die = topology.die_spec
    link = topology.link_spec

    flops = 0.0
    hbm_bytes = 0.0
    for op in plan.graph.topological_order():
        costs = op_costs(op)
        flops += costs.training_flops if plan.training else costs.forward_flops
        stages = 3.0 if plan.training else 1.0
        hbm_bytes += stages * (costs.bytes[ROLE_INPUT] + costs.bytes[ROLE_WEIGHT]
                               + costs.bytes[ROLE_OUTPUT])

    joules = (flops * die.compute_energy
              + traffic_bytes * 8.0 * link.energy
              + hbm_bytes * 8.0 * die.hbm_energy)
    watts = joules / t_total if t_total > 0 else 0.0
    tokens = plan.tokens_per_step
    tok_per_j = tokens / joules if joules > 0 else 0.0
    return joules, watts, tok_per_j
