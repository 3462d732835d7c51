"""Bidirectional tensor-stream schedules over a die chain.

A group of N dies holds one sub-tensor each and computes all N of them in N
rounds, exchanging sub-tensors only between chain neighbors (one physical
hop). Data moves as four relay sweeps:

  * an original sweep in each direction from every sub-tensor's home die,
    delivering just-in-time to dies whose need round equals the hop distance;
  * a reflected sweep per direction, spawned where the opposite sweep has
    travelled floor(N/2) hops, re-delivering payloads for wrapped needs so no
    die buffers a copy across more than one idle round.

Lower-chain dies (position < ceil(N/2)) walk sub-tensor indices upward,
upper-chain dies walk downward; both link directions of interior chain edges
carry traffic in the same round. No wrap link is required, which is the
point: the chain only needs mesh-adjacent dies.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

from .topology import Die, WaferTopology, manhattan


class TransferChoice(Enum):
    WEIGHT = "weight"
    INPUT = "input"


class TopologyMismatchError(RuntimeError):
    """Group dies do not form a mesh-adjacent chain; caller must re-place."""


@dataclass(frozen=True)
class Send:
    src: int   # chain position
    dst: int
    index: int  # sub-tensor index


@dataclass(frozen=True)
class Round:
    computes: tuple[int, ...]        # per-die sub-tensor index
    sends: tuple[Send, ...]


@dataclass(frozen=True)
class StreamSchedule:
    n_dies: int
    rounds: tuple[Round, ...]
    transfer_choice: TransferChoice = TransferChoice.WEIGHT


@dataclass(frozen=True)
class ScheduleVerdict:
    coverage_ok: bool
    availability_ok: bool
    hop_ok: bool
    buffer_peak: int

    @property
    def ok(self) -> bool:
        return self.coverage_ok and self.availability_ok and self.hop_ok


def compute_index(die: int, t: int, n: int) -> int:
    """Sub-tensor computed by chain position ``die`` at round ``t``."""
    half_up = (n + 1) // 2
    if die < half_up:
        return (die + t) % n
    return (die - t + n) % n


def generate_stream_schedule(n: int,
                             transfer_choice: TransferChoice = TransferChoice.WEIGHT
                             ) -> StreamSchedule:
    """N-round schedule: per-round computes plus one-hop relay sends."""
    if n < 1:
        raise ValueError("group size must be at least 1")
    half_up = (n + 1) // 2
    half = n // 2
    rounds = []
    for t in range(n):
        computes = tuple(compute_index(d, t, n) for d in range(n))
        sends: set[Send] = set()
        for j in range(n):
            # original sweeps outward from sub-tensor j's home die
            down_src = j - t
            if down_src >= 1:
                sends.add(Send(down_src, down_src - 1, j))
            up_src = j + t
            if up_src <= n - 2:
                sends.add(Send(up_src, up_src + 1, j))
            # reflected down-sweep: wrapped needs of lower-chain dies above j
            if j <= half_up - 2:
                src = n + j - t
                if j + 2 <= src <= j + half:
                    sends.add(Send(src, src - 1, j))
            # reflected up-sweep: wrapped needs of upper-chain dies below j
            if j >= half_up + 1:
                src = t - (n - j)
                if max(j - half, 0) <= src <= j - 2:
                    sends.add(Send(src, src + 1, j))
        rounds.append(Round(computes=computes,
                            sends=tuple(sorted(sends, key=lambda s: (s.src, s.dst, s.index)))))
    return StreamSchedule(n_dies=n, rounds=tuple(rounds), transfer_choice=transfer_choice)


def verify_schedule(s: StreamSchedule) -> ScheduleVerdict:
    """Forward-simulate the schedule and check its correctness conditions.

    Each die starts holding its own sub-tensor; a send at round t delivers
    before round t+1 and is valid only if the sender holds the payload. A die
    drops a resident copy once no later compute or send at that die precedes
    the copy's next scheduled re-delivery, so buffer_peak reports the copies
    that must actually be stored across a round boundary.
    """
    n = s.n_dies
    hop_ok = True
    future_compute: dict[tuple[int, int], list[int]] = {}
    future_send: dict[tuple[int, int], list[int]] = {}
    deliveries: dict[tuple[int, int], list[int]] = {}
    for t, rnd in enumerate(s.rounds):
        for d, idx in enumerate(rnd.computes):
            future_compute.setdefault((d, idx), []).append(t)
        for send in rnd.sends:
            if abs(send.src - send.dst) != 1 or not (0 <= send.dst < n) or not (0 <= send.src < n):
                hop_ok = False
                continue
            future_send.setdefault((send.src, send.index), []).append(t)
            deliveries.setdefault((send.dst, send.index), []).append(t + 1)

    def keep(d: int, j: int, t: int) -> bool:
        arriving = [a for a in deliveries.get((d, j), []) if a > t + 1]
        next_redelivery = min(arriving) if arriving else n + 1
        upcoming = [u for u in future_compute.get((d, j), []) if u > t]
        upcoming += [u for u in future_send.get((d, j), []) if u > t]
        return bool(upcoming) and min(upcoming) < next_redelivery

    resident = [{d} for d in range(n)]
    availability_ok = True
    coverage: list[set[int]] = [set() for _ in range(n)]
    buffer_peak = 1
    for t, rnd in enumerate(s.rounds):
        for d, idx in enumerate(rnd.computes):
            coverage[d].add(idx)
            if idx not in resident[d]:
                availability_ok = False
        arrivals: list[set[int]] = [set() for _ in range(n)]
        for send in rnd.sends:
            if not (0 <= send.src < n and 0 <= send.dst < n):
                continue
            if send.index not in resident[send.src]:
                availability_ok = False
            arrivals[send.dst].add(send.index)
        for d in range(n):
            resident[d] = {j for j in resident[d] | arrivals[d] if keep(d, j, t)}
            buffer_peak = max(buffer_peak, len(resident[d]))

    full = set(range(n))
    coverage_ok = (len(s.rounds) == n) and all(
        coverage[d] == full and len([r.computes[d] for r in s.rounds]) == n
        for d in range(n))
    return ScheduleVerdict(coverage_ok=coverage_ok, availability_ok=availability_ok,
                           hop_ok=hop_ok, buffer_peak=buffer_peak)


def select_transfer_operand(op, cfg) -> TransferChoice:
    """Stream whichever per-group operand region is smaller; ties stream weights.

    The comparison is between the weight region a stream group owns
    (N/tp_n x K/tp_k elements) and the input region it owns
    (B/dp x M/(sp*cp) x N/tp_n elements); the stream degree subdivides both
    identically so it cancels.
    """
    if not op.is_gemm:
        raise ValueError(f"{op.id}: transfer choice applies to GEMM-like operators only")
    tp_n, tp_k = cfg.tp_factors
    weight_region = (op.n / tp_n) * (op.k / tp_k)
    input_region = (op.b / cfg.dp) * (op.m / (cfg.sp * cfg.cp)) * (op.n / tp_n)
    if weight_region <= input_region:
        return TransferChoice.WEIGHT
    return TransferChoice.INPUT


def schedule_to_comm_ops(s: StreamSchedule, group: Sequence[Die],
                         bytes_per_subtensor: float,
                         payload_prefix: str = "stream",
                         topology: Optional[WaferTopology] = None,
                         stage: str = "fwd") -> list:
    """Bind chain positions to physical dies; one P2P CommOp per send.

    The group must be a mesh-adjacent chain (consecutive dies one hop apart,
    with both channels enabled when a topology is given).
    """
    from .parallelism import CommOp  # local import; parallelism layers on top

    if len(group) != s.n_dies:
        raise ValueError(f"group length {len(group)} != schedule size {s.n_dies}")
    for a, b in zip(group, group[1:]):
        if manhattan(a, b) != 1:
            raise TopologyMismatchError(f"group dies {a} and {b} are not mesh-adjacent")
        if topology is not None and not (topology.link_enabled(a, b) and topology.link_enabled(b, a)):
            raise TopologyMismatchError(f"chain link {a}<->{b} is disabled")

    ops = []
    for t, rnd in enumerate(s.rounds):
        for send in rnd.sends:
            ops.append(CommOp(
                kind="p2p_stream",
                group=(group[send.src], group[send.dst]),
                bytes=bytes_per_subtensor,
                round=t,
                payload=f"{payload_prefix}.{stage}.sub{send.index}",
                chain_group=payload_prefix,
                stage=stage,
            ))
    return ops


def dump_schedule(s: StreamSchedule) -> str:
    """One line per (round, die, action); stable ordering for golden files."""
    lines = []
    for t, rnd in enumerate(s.rounds):
        for d, idx in enumerate(rnd.computes):
            lines.append(f"round={t} die={d} compute sub[{idx}]")
        for send in rnd.sends:
            lines.append(f"round={t} die={send.src} send -> die={send.dst} sub[{send.index}]")
    return "\n".join(lines) + "\n"


def naive_ring_schedule(n: int) -> StreamSchedule:
    """Unidirectional logical-ring schedule (for comparison/testing).

    Every die shifts its sub-tensor to the next-lower position each round; the
    wrap transfer from position 0 to position n-1 is an (n-1)-hop move on a
    chain, which verify_schedule flags via hop_ok.
    """
    if n < 1:
        raise ValueError("group size must be at least 1")
    rounds = []
    for t in range(n):
        computes = tuple((d + t) % n for d in range(n))
        sends = []
        if t < n - 1:
            for d in range(n):
                dst = d - 1 if d > 0 else n - 1
                sends.append(Send(d, dst, (d + t) % n))
        rounds.append(Round(computes=computes, sends=tuple(sends)))
    return StreamSchedule(n_dies=n, rounds=tuple(rounds))
