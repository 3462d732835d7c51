"""Fault injection and plan recovery on a degraded mesh.

Link faults remove directed channels from routing; core faults scale a die's
surviving compute fraction (a whole-die failure is 100% core fault plus link
disablement). Random injections draw one uniform per channel / per core from
the seed, so fault sets are nested across rates: sweeping the rate upward
only ever adds faults, making degradation monotone by construction.

Recovery is three steps: classify the faults, rebalance shard slices along
the batch and sequence axes in proportion to each die's surviving compute
(round count is preserved; slower dies get smaller sub-tensors), and re-route
all communication around the disabled links.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import costmodel, solver
from .parallelism import PlacementGenes
from .topology import Die, DirectedLink, NoRouteError, WaferTopology
from .workload import ROLE_INPUT, ROLE_OUTPUT

CORES_PER_DIE = 64  # 8x8 core array per die


@dataclass(frozen=True)
class FaultSpec:
    link_faults: frozenset[DirectedLink] = frozenset()
    link_fault_rate: float = 0.0
    core_faults: tuple[tuple[Die, float], ...] = ()   # explicit per-die failed fraction
    core_fault_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for r in (self.link_fault_rate, self.core_fault_rate):
            if not (0.0 <= r <= 1.0):
                raise ValueError("fault rates must lie in [0, 1]")


@dataclass
class FaultReport:
    disabled_links: list[DirectedLink]
    core_fractions: dict[Die, float]    # surviving fraction per affected die

    def classified(self) -> list[tuple[str, object]]:
        out: list[tuple[str, object]] = []
        for link in sorted(self.disabled_links):
            out.append(("link", link))
        for die, frac in sorted(self.core_fractions.items()):
            if frac < 1.0:
                out.append(("core", (die, frac)))
        return out


def inject_faults(topology: WaferTopology, spec: FaultSpec
                  ) -> tuple[WaferTopology, FaultReport]:
    """Apply explicit and seeded-random faults; raises if the mesh disconnects."""
    rng = np.random.default_rng(spec.seed)

    links = sorted(topology.directed_links())
    draws = rng.random(len(links))
    disabled = set(spec.link_faults)
    for link, u in zip(links, draws):
        if u < spec.link_fault_rate:
            disabled.add(link)

    fractions: dict[Die, float] = {}
    dies = topology.enabled_dies()
    core_draws = rng.random((len(dies), CORES_PER_DIE))
    if spec.core_fault_rate > 0:
        for die, row in zip(dies, core_draws):
            surviving = float(np.count_nonzero(row >= spec.core_fault_rate)) / CORES_PER_DIE
            if surviving < 1.0:
                fractions[die] = surviving
    for die, failed in spec.core_faults:
        fractions[die] = min(fractions.get(die, 1.0), 1.0 - failed)

    dead = sorted(d for d, f in fractions.items() if f <= 0.0)
    degraded = topology.degraded(disable_links=sorted(disabled),
                                 disable_dies=dead,
                                 compute_scale={d: f for d, f in fractions.items() if f > 0})
    return degraded, FaultReport(disabled_links=sorted(disabled),
                                 core_fractions=fractions)


def _rebalance_layout(layout, assignment, topology: WaferTopology):
    """Resize each slot's B/M slices in proportion to surviving compute.

    Slices stay contiguous and cover the axis exactly; the split axis is the
    one the strategy already divides (M when present, else B). Integer
    boundaries come from cumulative rounding of the compute weights.
    """
    scales = [topology.die_compute_scale(assignment.die_of(s))
              for s in range(layout.n_slots)]
    if all(abs(s - scales[0]) < 1e-12 for s in scales):
        return layout  # uniform survival: nothing to rebalance

    new_slots = [dict() for _ in range(layout.n_slots)]
    for role in (ROLE_INPUT, ROLE_OUTPUT):
        slices = [layout.per_slot[s].get(role) for s in range(layout.n_slots)]
        if any(sl is None for sl in slices):
            continue
        axis = "M" if len({sl["M"] for sl in slices}) > 1 else "B"
        # group slots sharing every other range: they partition this axis
        groups: dict[tuple, list[int]] = {}
        for s, sl in enumerate(slices):
            key = tuple((d, r) for d, r in sorted(sl.items()) if d != axis)
            groups.setdefault(key, []).append(s)
        for members in groups.values():
            members.sort(key=lambda s: slices[s][axis][0])
            lo = min(slices[s][axis][0] for s in members)
            hi = max(slices[s][axis][1] for s in members)
            weights = np.array([max(scales[s], 1e-9) for s in members])
            bounds = lo + np.round(np.cumsum(weights) / weights.sum() * (hi - lo))
            bounds = np.concatenate([[lo], bounds]).astype(int)
            bounds[-1] = hi
            for i, s in enumerate(members):
                new = dict(slices[s])
                new[axis] = (int(bounds[i]), int(bounds[i + 1]))
                new_slots[s][role] = new
    rebalanced = [dict(layout.per_slot[s]) for s in range(layout.n_slots)]
    for s in range(layout.n_slots):
        rebalanced[s].update(new_slots[s])

    from copy import deepcopy
    out = deepcopy(layout)
    out.per_slot = rebalanced
    return out


def recover_plan(plan: "solver.ExecutionPlan", degraded: WaferTopology
                 ) -> "solver.ExecutionPlan":
    """Re-route and load-rebalance an existing plan on a degraded topology.

    Shard slices along the batch/sequence axes are resized so every die in a
    group finishes its round together; routes are re-initialized around the
    disabled links and re-optimized. Falls back to fresh placement genes when
    a stream group loses its chain, and raises InfeasibleError when no
    placement fits.
    """
    if degraded == plan.topology:
        return plan

    cfg_map = {oid: ev.cfg for oid, ev in plan.per_op.items()}
    new = None
    gene_options = [plan.genes] + [PlacementGenes(enumeration=e)
                                   for e in ("row_major", "snake_rows", "col_major",
                                             "snake_cols", "blocks")
                                   if e != plan.genes.enumeration]
    for genes in gene_options:
        try:
            new = solver.build_plan(plan.graph, degraded, cfg_map, genes,
                                    plan.eff, plan.training, optimize=True)
            break
        except (ValueError, NoRouteError):
            continue
    if new is None:
        raise solver.InfeasibleError("no placement fits the degraded topology")

    # non-uniform compute: rebalance shard slices and re-cost
    if any(degraded.die_compute_scale(d) != 1.0 for d in degraded.enabled_dies()):
        for oid, ev in new.per_op.items():
            op = new.graph.op(oid)
            layout = _rebalance_layout(ev.layout, ev.assignment, degraded)
            if layout is not ev.layout:
                comp = costmodel.op_compute_time(op, layout, ev.assignment,
                                                 degraded, new.eff, new.training)
                new.per_op[oid] = replace(
                    ev, layout=layout,
                    breakdown=costmodel.OpBreakdown(
                        comp=comp, p2p=ev.breakdown.p2p,
                        collective=ev.breakdown.collective))
        new.report = costmodel.total_cost(new)
    return new


def fault_sweep(plan: "solver.ExecutionPlan", rates: list[float],
                kind: str = "core", seed: int = 0) -> list[tuple[float, float]]:
    """(rate, normalized throughput) series with nested seeded fault draws."""
    assert plan.report is not None
    healthy = plan.report.throughput_tokens_per_s
    series: list[tuple[float, float]] = []
    for rate in rates:
        spec = FaultSpec(core_fault_rate=rate if kind == "core" else 0.0,
                         link_fault_rate=rate if kind == "link" else 0.0,
                         seed=seed)
        try:
            degraded, _ = inject_faults(plan.topology, spec)
            recovered = recover_plan(plan, degraded)
            assert recovered.report is not None
            series.append((rate, recovered.report.throughput_tokens_per_s / healthy))
        except (ValueError, RuntimeError):
            series.append((rate, 0.0))  # disconnected or unplaceable: cliff
    return series
