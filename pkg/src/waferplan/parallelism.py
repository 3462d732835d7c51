"""Unified hybrid-parallelism representation.

A ParallelConfig assigns per-operator degrees to the dp / tp / sp / cp /
stream axes. Tensors are sliced along B/M/N/K per axis: dp splits B, sp and
cp split M, tp factors near-square into (tp_n, tp_k) over the weight's (N, K)
dims, and the stream axis splits M on the input side and K on the weight
side simultaneously with zero replication of either operand. Logical slots
(mixed-radix index vectors over the axes) are bound to physical dies by a
GroupAssignment built from placement genes.

Communication derivation emits AllReduce for tensor-parallel partial sums,
AllGather/ReduceScatter for fully-sharded weights and sequence gathers,
round-tagged P2P streams for the stream axis, and exact slice-intersection
reshard P2P between operators whose layouts differ.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

from .topology import Die, WaferTopology, find_chain_embedding, manhattan
from .workload import (Operator, OpKind, ROLE_INPUT, ROLE_OUTPUT, ROLE_WEIGHT)

Range = tuple[int, int]
Slice = dict[str, Range]   # dim name -> half-open range

USER_AXES = ("dp", "tp", "cp", "sp", "stream")


def near_square_factors(tp: int) -> tuple[int, int]:
    """Factor tp into (tp_n, tp_k), tp_n >= tp_k, as near-square as possible."""
    best = (tp, 1)
    f = 1
    while f * f <= tp:
        if tp % f == 0 and tp // f >= f:
            best = (tp // f, f)
        f += 1
    return best


@dataclass(frozen=True)
class ParallelConfig:
    """Per-operator parallel degrees; each >= 1, product <= die count."""

    dp: int = 1
    tp: int = 1
    sp: int = 1
    cp: int = 1
    stream: int = 1
    fsdp: bool = False
    axis_order: tuple[str, ...] = USER_AXES

    def __post_init__(self):
        for name in USER_AXES:
            if getattr(self, name) < 1:
                raise ValueError(f"degree {name} must be at least 1")
        if sorted(self.axis_order) != sorted(USER_AXES):
            raise ValueError(f"axis_order must permute {USER_AXES}")
        if self.fsdp and self.dp == 1:
            raise ValueError("fsdp requires dp > 1")

    @property
    def tp_factors(self) -> tuple[int, int]:
        return near_square_factors(self.tp)

    @property
    def total_dies(self) -> int:
        return self.dp * self.tp * self.sp * self.cp * self.stream

    def degrees(self) -> dict[str, int]:
        return {"dp": self.dp, "tp": self.tp, "cp": self.cp,
                "sp": self.sp, "stream": self.stream}


def format_strategy(cfg: ParallelConfig) -> str:
    """Canonical (dp, tp, sp, stream) tuple notation."""
    return f"({cfg.dp},{cfg.tp},{cfg.sp},{cfg.stream})"


def parse_strategy(text: str) -> ParallelConfig:
    """Parse '(dp,tp,sp,stream)' notation, e.g. '(4,1,1,8)'."""
    m = re.fullmatch(r"\s*\(?\s*(\d+)\s*,\s*(\d+)\s*,\s*(\d+)\s*,\s*(\d+)\s*\)?\s*", text)
    if not m:
        raise ValueError(f"cannot parse strategy tuple {text!r}; expected (dp,tp,sp,stream)")
    dp, tp, sp, stream = (int(g) for g in m.groups())
    return ParallelConfig(dp=dp, tp=tp, sp=sp, stream=stream)


# -- shard layouts -----------------------------------------------------------


def _part(total: int, parts: int, idx: int, what: str) -> Range:
    if total % parts != 0:
        raise ValueError(f"{what}={total} not divisible by {parts}")
    size = total // parts
    return (idx * size, (idx + 1) * size)


def slice_volume(sl: Slice) -> int:
    v = 1
    for lo, hi in sl.values():
        v *= hi - lo
    return v


@dataclass
class ShardLayout:
    """Initial per-slot tensor placement for one operator.

    Slots are logical positions 0..n_slots-1; a GroupAssignment binds them to
    physical dies. ``replication`` is the total number of copies of each
    element across all slots; the streamed operand's stream-axis contribution
    to replication is always exactly 1.
    """

    op_id: str
    n_slots: int
    per_slot: list[dict[str, Slice]]
    replication: dict[str, int]
    element_bytes: int
    transfer: Optional[str] = None   # "weight" | "input" for streamed GEMMs

    def slot_bytes(self, slot: int, role: str) -> int:
        sl = self.per_slot[slot].get(role)
        return 0 if sl is None else slice_volume(sl) * self.element_bytes

    def role_bytes_total(self, role: str) -> int:
        return sum(self.slot_bytes(s, role) for s in range(self.n_slots))

    def signature(self) -> tuple:
        """Canonical split structure; equal signatures need no resharding."""
        sig = []
        for role in sorted(self.replication):
            bounds: dict[str, tuple] = {}
            for slot in self.per_slot:
                sl = slot.get(role)
                if sl is None:
                    continue
                for dim, rng in sl.items():
                    bounds.setdefault(dim, set()).add(rng)
            sig.append((role, self.replication[role],
                        tuple(sorted((d, tuple(sorted(rs))) for d, rs in bounds.items()))))
        return tuple(sig)


def _axis_indices(cfg: ParallelConfig, slot: int) -> dict[str, int]:
    """Mixed-radix decode of a slot id; axis_order runs outermost first,
    with tp expanded in place to (tp_n outer, tp_k inner)."""
    tp_n, tp_k = cfg.tp_factors
    radices: list[tuple[str, int]] = []
    for axis in cfg.axis_order:
        if axis == "tp":
            radices.append(("tp_n", tp_n))
            radices.append(("tp_k", tp_k))
        else:
            radices.append((axis, getattr(cfg, axis)))
    out: dict[str, int] = {}
    rem = slot
    for name, radix in reversed(radices):
        out[name] = rem % radix
        rem //= radix
    return out


def shard_tensors(op: Operator, cfg: ParallelConfig,
                  transfer: Optional[str] = None) -> ShardLayout:
    """Slice the operator's tensors across cfg.total_dies logical slots.

    GEMM operators with weights honor the selective transfer policy: the
    streamed operand circulates (replication 1) while the other stays
    stationary; the output lands M-split when weights stream and K-split when
    inputs stream. Weightless operators shard along B/M (with hidden dims
    tiled (tp_k outer, tp_n inner) to nest inside an upstream linear's output
    split). Non-divisible dimensions are rejected, never padded.
    """
    from .streaming import TransferChoice, select_transfer_operand

    tp_n, tp_k = cfg.tp_factors
    n_slots = cfg.total_dies
    m_parts = cfg.sp * cfg.cp * cfg.stream
    per_slot: list[dict[str, Slice]] = []

    if op.is_gemm and op.has_weight:
        if transfer is None:
            if cfg.stream > 1:
                transfer = select_transfer_operand(op, cfg).value
            else:
                transfer = TransferChoice.WEIGHT.value
        w_k_parts = (cfg.dp if cfg.fsdp else 1) * tp_k * cfg.stream
        for slot in range(n_slots):
            ix = _axis_indices(cfg, slot)
            m_idx = (ix["sp"] * cfg.cp + ix["cp"]) * cfg.stream + ix["stream"]
            w_k_idx = ix["tp_k"] * cfg.stream + ix["stream"]
            if cfg.fsdp:
                w_k_idx = (ix["dp"] * tp_k + ix["tp_k"]) * cfg.stream + ix["stream"]
            inp = {"B": _part(op.b, cfg.dp, ix["dp"], "B"),
                   "M": _part(op.m, m_parts, m_idx, "M"),
                   "N": _part(op.n, tp_n, ix["tp_n"], "N")}
            wgt = {"N": _part(op.n, tp_n, ix["tp_n"], "N"),
                   "K": _part(op.k, w_k_parts, w_k_idx, "K")}
            if transfer == "weight":
                out = {"B": inp["B"], "M": inp["M"],
                       "K": _part(op.k, tp_k, ix["tp_k"], "K")}
            else:
                out = {"B": inp["B"],
                       "M": _part(op.m, cfg.sp * cfg.cp,
                                  ix["sp"] * cfg.cp + ix["cp"], "M"),
                       "K": _part(op.k, tp_k * cfg.stream,
                                  ix["tp_k"] * cfg.stream + ix["stream"], "K")}
            per_slot.append({ROLE_INPUT: inp, ROLE_WEIGHT: wgt, ROLE_OUTPUT: out})
        replication = {
            ROLE_INPUT: tp_k,
            ROLE_WEIGHT: (1 if cfg.fsdp else cfg.dp) * cfg.sp * cfg.cp,
            ROLE_OUTPUT: tp_n,
        }
    else:
        # weightless: attention streams KV chunks; elementwise just tiles
        transfer = None
        hidden_parts = tp_k * tp_n
        for slot in range(n_slots):
            ix = _axis_indices(cfg, slot)
            m_idx = (ix["sp"] * cfg.cp + ix["cp"]) * cfg.stream + ix["stream"]
            h_idx = ix["tp_k"] * tp_n + ix["tp_n"]
            inp = {"B": _part(op.b, cfg.dp, ix["dp"], "B"),
                   "M": _part(op.m, m_parts, m_idx, "M"),
                   "N": _part(op.n, hidden_parts, h_idx, "N")}
            out = {"B": inp["B"], "M": inp["M"],
                   "K": _part(op.k, hidden_parts, h_idx, "K")}
            per_slot.append({ROLE_INPUT: inp, ROLE_OUTPUT: out})
        replication = {ROLE_INPUT: 1, ROLE_OUTPUT: 1}

    return ShardLayout(op_id=op.id, n_slots=n_slots, per_slot=per_slot,
                       replication=replication, element_bytes=op.element_bytes,
                       transfer=transfer)


# -- placement ---------------------------------------------------------------


ENUMERATIONS = ("row_major", "col_major", "snake_rows", "snake_cols", "blocks")


@dataclass(frozen=True)
class PlacementGenes:
    """Deterministic knobs mapping logical slots onto the mesh."""

    enumeration: str = "row_major"
    axis_order: Optional[tuple[str, ...]] = None
    transfer_override: Optional[str] = None

    def __post_init__(self):
        if self.enumeration not in ENUMERATIONS:
            raise ValueError(f"unknown enumeration {self.enumeration!r}")
        if self.axis_order is not None and sorted(self.axis_order) != sorted(USER_AXES):
            raise ValueError(f"axis_order must permute {USER_AXES}")
        if self.transfer_override not in (None, "weight", "input"):
            raise ValueError("transfer_override must be 'weight', 'input', or None")


@dataclass
class GroupAssignment:
    """Slot-to-die binding plus per-axis die groups (ordered within group)."""

    die_order: tuple[Die, ...]
    slot_of: dict[Die, int]
    groups: dict[str, list[tuple[Die, ...]]]
    axis_index: dict[Die, dict[str, int]]

    def die_of(self, slot: int) -> Die:
        return self.die_order[slot]


def _enumerate_dies(topology: WaferTopology, mode: str) -> list[Die]:
    dies = topology.enabled_dies()
    if mode == "row_major":
        key = lambda d: (d[0], d[1])
    elif mode == "col_major":
        key = lambda d: (d[1], d[0])
    elif mode == "snake_rows":
        key = lambda d: (d[0], d[1] if d[0] % 2 == 0 else topology.cols - 1 - d[1])
    elif mode == "snake_cols":
        key = lambda d: (d[1], d[0] if d[1] % 2 == 0 else topology.rows - 1 - d[0])
    elif mode == "blocks":
        key = lambda d: (d[0] // 2, d[1] // 2, d[0], d[1])
    else:
        raise ValueError(f"unknown enumeration {mode!r}")
    return sorted(dies, key=key)


def assign_groups(topology: WaferTopology, cfg: ParallelConfig,
                  genes: Optional[PlacementGenes] = None) -> GroupAssignment:
    """Bind slots to dies; stream groups are re-ordered onto mesh chains.

    Default genes produce axis-aligned contiguous blocks with the stream axis
    innermost, so stream groups land on row segments wherever they fit.
    """
    genes = genes or PlacementGenes()
    if genes.axis_order is not None:
        cfg = replace(cfg, axis_order=genes.axis_order)
    n_slots = cfg.total_dies
    enabled = _enumerate_dies(topology, genes.enumeration)
    if n_slots > len(enabled):
        raise ValueError(
            f"config needs {n_slots} dies but only {len(enabled)} enabled")
    binding: list[Die] = list(enabled[:n_slots])

    index_of = [_axis_indices(cfg, s) for s in range(n_slots)]

    # chain-reorder each stream group (permuting within a group is safe: its
    # dies differ only in the stream index)
    if cfg.stream > 1:
        seen: dict[tuple, list[int]] = {}
        for slot in range(n_slots):
            ix = index_of[slot]
            key = tuple((a, v) for a, v in sorted(ix.items()) if a != "stream")
            seen.setdefault(key, []).append(slot)
        for slots in seen.values():
            slots.sort(key=lambda s: index_of[s]["stream"])
            dies = [binding[s] for s in slots]
            if not _is_chain(dies):
                chain = find_chain_embedding(topology, dies)
                if chain is not None:
                    for s, die in zip(slots, chain):
                        binding[s] = die

    axis_index: dict[Die, dict[str, int]] = {}
    for slot, die in enumerate(binding):
        axis_index[die] = dict(index_of[slot])

    groups: dict[str, list[tuple[Die, ...]]] = {}
    axes = ["dp", "tp_n", "tp_k", "cp", "sp", "stream"]
    for axis in axes:
        bucket: dict[tuple, list[tuple[int, Die]]] = {}
        for slot, die in enumerate(binding):
            ix = index_of[slot]
            key = tuple(v for a, v in sorted(ix.items()) if a != axis)
            bucket.setdefault(key, []).append((ix[axis], die))
        groups[axis] = [tuple(d for _, d in sorted(members))
                        for key, members in sorted(bucket.items())]

    return GroupAssignment(die_order=tuple(binding),
                           slot_of={d: s for s, d in enumerate(binding)},
                           groups=groups, axis_index=axis_index)


def _is_chain(dies: Sequence[Die]) -> bool:
    return all(manhattan(a, b) == 1 for a, b in zip(dies, dies[1:]))


# -- communication operations ------------------------------------------------


@dataclass(frozen=True)
class CommOp:
    """One logical communication operation.

    For collectives ``bytes`` is the logical buffer size the ring formulas
    take (per-rank buffer for AllReduce, full gathered size for AllGather /
    ReduceScatter); for P2P kinds it is the payload size. ``round`` is None
    for bulk operations that occupy their links for the whole stage.
    """

    kind: str                    # allreduce|allgather|reducescatter|p2p_stream|reshard_p2p
    group: tuple[Die, ...]
    bytes: float
    payload: str
    round: Optional[int] = None
    stage: str = "fwd"
    chain_group: Optional[str] = None

    def __post_init__(self):
        if self.bytes <= 0:
            raise ValueError("CommOp.bytes must be positive")
        if len(set(self.group)) != len(self.group):
            raise ValueError("CommOp.group dies must be distinct")

    @property
    def src(self) -> Die:
        return self.group[0]

    @property
    def dst(self) -> Die:
        return self.group[-1]


def derive_comm_ops(op: Operator, cfg: ParallelConfig, layout: ShardLayout,
                    assignment: GroupAssignment, training: bool = True) -> list[CommOp]:
    """Intra-operator traffic implied by the strategy.

    Emits tensor-parallel AllReduce of partial sums (forward over tp_n
    groups, backward over tp_k groups), fully-sharded weight AllGather (both
    passes) plus gradient ReduceScatter, plain data-parallel gradient
    AllReduce, sequence-parallel gathers around attention, context-parallel
    KV ring exchange, and the round-tagged one-hop stream P2Ps from the
    stream schedule (forward, plus backward and weight-gradient stages that
    reuse the pattern with swapped operand roles).
    """
    from .streaming import generate_stream_schedule, TransferChoice

    ops: list[CommOp] = []
    tp_n, tp_k = cfg.tp_factors
    slot0 = 0
    in_bytes = layout.slot_bytes(slot0, ROLE_INPUT)
    out_bytes = layout.slot_bytes(slot0, ROLE_OUTPUT)
    wgt_bytes = layout.slot_bytes(slot0, ROLE_WEIGHT)

    def add(kind, group, nbytes, payload, round=None, stage="fwd", chain=None):
        if nbytes > 0 and len(group) > 1:
            ops.append(CommOp(kind=kind, group=tuple(group), bytes=nbytes,
                              payload=payload, round=round, stage=stage,
                              chain_group=chain))

    if op.is_gemm and op.has_weight:
        if tp_n > 1:
            for gi, group in enumerate(assignment.groups["tp_n"]):
                add("allreduce", group, out_bytes, f"{op.id}.ar_out.g{gi}", stage="fwd")
        if tp_k > 1 and training:
            for gi, group in enumerate(assignment.groups["tp_k"]):
                add("allreduce", group, in_bytes, f"{op.id}.ar_din.g{gi}", stage="bwd")
        if cfg.dp > 1:
            for gi, group in enumerate(assignment.groups["dp"]):
                if cfg.fsdp:
                    gathered = wgt_bytes * cfg.dp
                    add("allgather", group, gathered, f"{op.id}.ag_w.g{gi}", stage="fwd")
                    if training:
                        add("allgather", group, gathered, f"{op.id}.ag_w_bwd.g{gi}", stage="bwd")
                        add("reducescatter", group, gathered, f"{op.id}.rs_gw.g{gi}", stage="wgrad")
                elif training:
                    add("allreduce", group, wgt_bytes, f"{op.id}.ar_gw.g{gi}", stage="wgrad")
        if cfg.stream > 1:
            choice = TransferChoice(layout.transfer)
            stream_in = in_bytes                      # per-die circulating shards
            stream_w = wgt_bytes * (cfg.dp if cfg.fsdp else 1)  # gathered shard streams whole
            stage_payloads = [("fwd", stream_w if choice is TransferChoice.WEIGHT else stream_in)]
            if training:
                stage_payloads.append(("bwd", min(stream_w, out_bytes)))
                stage_payloads.append(("wgrad", min(stream_in, out_bytes)))
            ops.extend(_stream_ops(op, cfg, assignment, stage_payloads,
                                   generate_stream_schedule, choice))
    elif op.kind == OpKind.FUSED_ATTENTION:
        kv_bytes = in_bytes * (2.0 / 3.0)
        if cfg.sp > 1:
            for gi, group in enumerate(assignment.groups["sp"]):
                add("allgather", group, in_bytes * cfg.sp, f"{op.id}.ag_seq.g{gi}", stage="fwd")
                if training:
                    add("reducescatter", group, in_bytes * cfg.sp,
                        f"{op.id}.rs_seq.g{gi}", stage="bwd")
        if cfg.cp > 1:
            for gi, group in enumerate(assignment.groups["cp"]):
                ring = list(group) + [group[0]]
                for r in range(cfg.cp - 1):
                    for a, b in zip(ring, ring[1:]):
                        add("p2p_stream", (a, b), kv_bytes,
                            f"{op.id}.kv.g{gi}.r{r}", round=r, stage="fwd",
                            chain=f"{op.id}.cpg{gi}")
        if cfg.stream > 1:
            stage_payloads = [("fwd", kv_bytes)]
            if training:
                stage_payloads.append(("bwd", kv_bytes))
            ops.extend(_stream_ops(op, cfg, assignment, stage_payloads,
                                   generate_stream_schedule, None))
    return ops


def _stream_ops(op, cfg, assignment, stage_payloads, gen_schedule, choice) -> list[CommOp]:
    """Bind each stream group's schedule; logical neighbors may sit several
    physical hops apart when no chain embedding exists (the router then pays
    for the multi-hop paths)."""
    from .streaming import TransferChoice

    out: list[CommOp] = []
    for gi, group in enumerate(assignment.groups["stream"]):
        schedule = gen_schedule(len(group), choice or TransferChoice.INPUT)
        chain_id = f"{op.id}.sg{gi}"
        for stage, payload_bytes in stage_payloads:
            if payload_bytes <= 0:
                continue
            for t, rnd in enumerate(schedule.rounds):
                for send in rnd.sends:
                    out.append(CommOp(
                        kind="p2p_stream",
                        group=(group[send.src], group[send.dst]),
                        bytes=payload_bytes,
                        payload=f"{chain_id}.{stage}.sub{send.index}",
                        round=t, stage=stage, chain_group=chain_id))
    return out


def reshard_comm_ops(producer: Operator, prod_layout: ShardLayout,
                     consumer: Operator, cons_layout: ShardLayout,
                     prod_assignment: GroupAssignment,
                     cons_assignment: GroupAssignment,
                     training: bool = True) -> list[CommOp]:
    """Exact per-die P2P set converting producer output into consumer input.

    The producer's output (B, M, K) is the consumer's input (B, M, N). Each
    consumer die fetches every missing region from the nearest replica
    holding it; co-located regions move zero bytes, so identical layouts
    produce no operations.
    """
    ops: list[CommOp] = []
    holders: dict[tuple, list[Die]] = {}
    slices_by_key: dict[tuple, Slice] = {}
    for slot in range(prod_layout.n_slots):
        sl = prod_layout.per_slot[slot].get(ROLE_OUTPUT)
        if sl is None:
            continue
        key = tuple(sorted(sl.items()))
        holders.setdefault(key, []).append(prod_assignment.die_of(slot))
        slices_by_key[key] = sl

    eb = cons_layout.element_bytes
    for slot in range(cons_layout.n_slots):
        need = cons_layout.per_slot[slot].get(ROLE_INPUT)
        if need is None:
            continue
        need_as_out = {"B": need["B"], "M": need["M"], "K": need["N"]}
        die = cons_assignment.die_of(slot)
        for key, dies in sorted(holders.items()):
            have = slices_by_key[key]
            inter = _intersect(have, need_as_out)
            if inter is None:
                continue
            if die in dies:
                continue  # already local
            src = min(dies, key=lambda d: (manhattan(d, die), d))
            if src == die:
                continue
            vol = slice_volume(inter) * eb
            region = ",".join(f"{k}{v[0]}:{v[1]}" for k, v in sorted(inter.items()))
            ops.append(CommOp(kind="reshard_p2p", group=(src, die), bytes=vol,
                              payload=f"{producer.id}.out[{region}]",
                              stage="fwd"))
            if training:
                ops.append(CommOp(kind="reshard_p2p", group=(die, src), bytes=vol,
                                  payload=f"{consumer.id}.din[{region}]",
                                  stage="bwd"))
    return ops


def _intersect(a: Slice, b: Slice) -> Optional[Slice]:
    out: Slice = {}
    for dim in a:
        lo = max(a[dim][0], b[dim][0])
        hi = min(a[dim][1], b[dim][1])
        if lo >= hi:
            return None
        out[dim] = (lo, hi)
    return out
