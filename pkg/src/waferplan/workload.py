"""Transformer-block compute graphs with (B, M, N, K) dimensioned operators.

One block is: QKV linear -> fused attention (online softmax folded in) ->
output projection -> residual add -> layer norm -> MLP up -> MLP down ->
residual add. The fused attention operator counts the two score GEMMs
(4*B*M^2*hidden FLOPs) but its activation footprint excludes the MxM score
matrix. Elementwise operators carry FLOP counts proportional to activation
size.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

PRECISION_BYTES = {"fp16": 2, "fp32": 4}

# Elementwise FLOPs per activation element (forward; backward costs 2x).
LAYER_NORM_FLOPS_PER_ELEMENT = 7
RESIDUAL_ADD_FLOPS_PER_ELEMENT = 1
ACTIVATION_FLOPS_PER_ELEMENT = 10  # gelu/silu polynomial approximations


class OpKind(Enum):
    LINEAR = "linear"
    FUSED_ATTENTION = "fused_attention"
    SOFTMAX = "softmax"
    ACTIVATION = "activation"
    LAYER_NORM = "layer_norm"
    RESIDUAL_ADD = "residual_add"
    EMBEDDING = "embedding"


GEMM_KINDS = (OpKind.LINEAR, OpKind.FUSED_ATTENTION, OpKind.EMBEDDING)

# Tensor roles used by layouts and cost accounting.
ROLE_INPUT = "input"
ROLE_WEIGHT = "weight"
ROLE_OUTPUT = "output"
ROLE_GRADIENTS = "gradients"


@dataclass(frozen=True)
class Operator:
    """A dimensioned graph node.

    dims follow the shard algebra of a linear layer: output [B,M,K] from
    input [B,M,N] x weight [N,K]. Weightless (elementwise) operators keep
    n == k and carry no weight tensor.
    """

    id: str
    kind: OpKind
    b: int
    m: int
    n: int
    k: int
    precision: str = "fp16"
    predecessors: tuple[str, ...] = ()
    online_softmax: bool = True        # fused-attention flag
    activation: Optional[str] = None   # fused nonlinearity on a linear ("gelu", "silu")

    def __post_init__(self):
        if min(self.b, self.m, self.n, self.k) <= 0:
            raise ValueError(f"{self.id}: dims must be strictly positive")
        if self.precision not in PRECISION_BYTES:
            raise ValueError(f"{self.id}: unknown precision {self.precision}")

    @property
    def has_weight(self) -> bool:
        return self.kind in (OpKind.LINEAR, OpKind.EMBEDDING)

    @property
    def is_gemm(self) -> bool:
        return self.kind in GEMM_KINDS

    @property
    def element_bytes(self) -> int:
        return PRECISION_BYTES[self.precision]


@dataclass(frozen=True)
class OpCost:
    """FLOP and byte counts for one operator (full, unsharded tensors)."""

    forward_flops: float
    di_flops: float
    dw_flops: float
    bytes: dict

    @property
    def training_flops(self) -> float:
        return self.forward_flops + self.di_flops + self.dw_flops


@dataclass
class ComputeGraph:
    operators: list[Operator]
    edges: list[tuple[str, str]]
    residual_edges: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        self._by_id = {op.id: op for op in self.operators}
        if len(self._by_id) != len(self.operators):
            raise ValueError("duplicate operator ids")
        for u, v in self.edges:
            if u not in self._by_id or v not in self._by_id:
                raise ValueError(f"edge ({u},{v}) references unknown operator")
        for e in self.residual_edges:
            if e not in self.edges:
                raise ValueError(f"residual edge {e} is not a graph edge")
        self._order = self._toposort()
        self._check_dims()

    def op(self, op_id: str) -> Operator:
        return self._by_id[op_id]

    def topological_order(self) -> list[Operator]:
        return [self._by_id[i] for i in self._order]

    def consumers(self, op_id: str) -> list[str]:
        return [v for u, v in self.edges if u == op_id]

    def producers(self, op_id: str) -> list[str]:
        return [u for u, v in self.edges if v == op_id]

    def _toposort(self) -> list[str]:
        indeg = {op.id: 0 for op in self.operators}
        for _, v in self.edges:
            indeg[v] += 1
        ready = [op.id for op in self.operators if indeg[op.id] == 0]
        order = []
        while ready:
            cur = ready.pop(0)
            order.append(cur)
            for v in self.consumers(cur):
                indeg[v] -= 1
                if indeg[v] == 0:
                    ready.append(v)
        if len(order) != len(self.operators):
            raise ValueError("compute graph contains a cycle")
        return order

    def _check_dims(self):
        for u, v in self.edges:
            pu, pv = self._by_id[u], self._by_id[v]
            if (pu.b, pu.m) != (pv.b, pv.m):
                raise ValueError(f"dim mismatch on edge {u}->{v}: batch/seq differ")
            if pu.k != pv.n:
                raise ValueError(
                    f"dim mismatch on edge {u}->{v}: producer K={pu.k} != consumer N={pv.n}")

    def to_dict(self) -> dict:
        return {
            "operators": [
                {"id": op.id, "kind": op.kind.value, "B": op.b, "M": op.m,
                 "N": op.n, "K": op.k, "precision": op.precision}
                for op in self.operators
            ],
            "edges": list(self.edges),
            "residual_edges": list(self.residual_edges),
        }


@dataclass(frozen=True)
class ModelConfig:
    """Model shape parameters (Table-II style field names)."""

    heads: int
    batch: int
    hidden_size: int
    layers: int
    seq_len: int
    vocab: int = 50000
    mlp_intermediate: Optional[int] = None  # defaults to 4 * hidden_size
    precision: str = "fp16"
    name: str = "model"

    def __post_init__(self):
        if self.hidden_size % self.heads != 0:
            raise ValueError("hidden_size must be divisible by heads")
        for f in ("heads", "batch", "hidden_size", "layers", "seq_len", "vocab"):
            if getattr(self, f) < 1:
                raise ValueError(f"ModelConfig.{f} must be at least 1")

    @property
    def intermediate(self) -> int:
        return self.mlp_intermediate or 4 * self.hidden_size


def build_transformer_graph(cfg: ModelConfig, include_embedding: bool = False) -> ComputeGraph:
    """Chain cfg.layers blocks; residual edges span attention and MLP paths."""
    b, m, h = cfg.batch, cfg.seq_len, cfg.hidden_size
    inter = cfg.intermediate
    prec = cfg.precision
    ops: list[Operator] = []
    edges: list[tuple[str, str]] = []
    residuals: list[tuple[str, str]] = []
    prev: Optional[str] = None

    def add(op: Operator, pred: Optional[str]):
        nonlocal prev
        if pred is not None:
            edges.append((pred, op.id))
        ops.append(op)
        prev = op.id

    if include_embedding:
        add(Operator(id="embed", kind=OpKind.EMBEDDING, b=b, m=m, n=cfg.vocab, k=h,
                     precision=prec), None)

    for layer in range(cfg.layers):
        p = f"l{layer}."
        qkv = Operator(id=p + "qkv", kind=OpKind.LINEAR, b=b, m=m, n=h, k=3 * h,
                       precision=prec)
        attn = Operator(id=p + "attn", kind=OpKind.FUSED_ATTENTION, b=b, m=m,
                        n=3 * h, k=h, precision=prec)
        proj = Operator(id=p + "proj", kind=OpKind.LINEAR, b=b, m=m, n=h, k=h,
                        precision=prec)
        add1 = Operator(id=p + "add1", kind=OpKind.RESIDUAL_ADD, b=b, m=m, n=h, k=h,
                        precision=prec)
        ln = Operator(id=p + "ln", kind=OpKind.LAYER_NORM, b=b, m=m, n=h, k=h,
                      precision=prec)
        up = Operator(id=p + "mlp_up", kind=OpKind.LINEAR, b=b, m=m, n=h, k=inter,
                      precision=prec, activation="gelu")
        down = Operator(id=p + "mlp_down", kind=OpKind.LINEAR, b=b, m=m, n=inter, k=h,
                        precision=prec)
        add2 = Operator(id=p + "add2", kind=OpKind.RESIDUAL_ADD, b=b, m=m, n=h, k=h,
                        precision=prec)

        block_entry = prev
        add(qkv, prev)
        add(attn, prev)
        add(proj, prev)
        add(add1, prev)
        if block_entry is not None:
            edges.append((block_entry, add1.id))
            residuals.append((block_entry, add1.id))
        add(ln, prev)
        add(up, prev)
        add(down, prev)
        add(add2, prev)
        edges.append((add1.id, add2.id))
        residuals.append((add1.id, add2.id))

    return ComputeGraph(operators=ops, edges=edges, residual_edges=residuals)


def op_costs(op: Operator) -> OpCost:
    """FLOP and byte counts from the three-matmul shard algebra.

    Linear forward is 2*B*M*N*K; dI and dW each cost the same, so a training
    step is 3x forward. Fused attention is 4*B*M^2*head_dim*heads = 4*B*M^2*H
    for the two score GEMMs; its activation bytes exclude the MxM matrix.
    """
    eb = op.element_bytes
    act_in = op.b * op.m * op.n * eb
    act_out = op.b * op.m * op.k * eb

    if op.kind == OpKind.LINEAR or op.kind == OpKind.EMBEDDING:
        fwd = 2.0 * op.b * op.m * op.n * op.k
        if op.activation:
            fwd += ACTIVATION_FLOPS_PER_ELEMENT * op.b * op.m * op.k
        weight = op.n * op.k * eb
        di, dw = 2.0 * op.b * op.m * op.n * op.k, 2.0 * op.b * op.m * op.n * op.k
        grads = weight  # dW at op precision; optimizer states counted by memory model
    elif op.kind == OpKind.FUSED_ATTENTION:
        hidden = op.k
        fwd = 4.0 * op.b * op.m * op.m * hidden
        weight = 0
        di = 2.0 * fwd  # weightless: backward runs both score GEMMs twice
        dw = 0.0
        grads = 0
    else:
        per_elt = {
            OpKind.SOFTMAX: 7,
            OpKind.ACTIVATION: ACTIVATION_FLOPS_PER_ELEMENT,
            OpKind.LAYER_NORM: LAYER_NORM_FLOPS_PER_ELEMENT,
            OpKind.RESIDUAL_ADD: RESIDUAL_ADD_FLOPS_PER_ELEMENT,
        }[op.kind]
        fwd = float(per_elt * op.b * op.m * op.k)
        weight = 0
        di = 2.0 * fwd
        dw = 0.0
        grads = 0

    return OpCost(
        forward_flops=fwd,
        di_flops=di,
        dw_flops=dw,
        bytes={ROLE_INPUT: act_in, ROLE_WEIGHT: weight,
               ROLE_OUTPUT: act_out, ROLE_GRADIENTS: grads},
    )


def parameter_count(graph: ComputeGraph) -> int:
    """Total weight elements across the graph."""
    return sum(op.n * op.k for op in graph.operators if op.has_weight)
