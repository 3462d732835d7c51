"""Die-mesh topology: 2D grid of dies joined by short-reach directed links.

Dies are addressed as (row, col) tuples with row-major integer ids. Links
exist only between Manhattan-adjacent dies; the die pitch (default 33.25 mm,
the long edge of the die footprint) keeps every link under the 50 mm
signal-integrity bound, so no torus wrap or diagonal link is ever created.
Each undirected mesh edge is modeled as two independent directed channels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

Die = tuple[int, int]
DirectedLink = tuple[Die, Die]

# Extra latency once a link needs forward error correction (>50 mm reach).
# Not applied to in-spec meshes; exposed for what-if studies only.
FEC_LATENCY_PENALTY_S = 210e-9


class NoRouteError(RuntimeError):
    """No enabled path exists between the requested dies."""


@dataclass(frozen=True)
class DieSpec:
    """Per-die compute and memory parameters (base SI units)."""

    peak_compute: float        # FLOP/s
    sram_bytes: float
    hbm_bytes: float
    hbm_bandwidth: float       # bytes/s
    hbm_latency: float         # seconds
    compute_energy: float      # joules/FLOP
    hbm_energy: float          # joules/bit

    def __post_init__(self):
        for name in ("peak_compute", "sram_bytes", "hbm_bytes", "hbm_bandwidth",
                     "hbm_latency", "compute_energy", "hbm_energy"):
            if getattr(self, name) <= 0:
                raise ValueError(f"DieSpec.{name} must be strictly positive")


@dataclass(frozen=True)
class LinkSpec:
    """Die-to-die link parameters (base SI units)."""

    bandwidth: float           # bytes/s
    latency: float             # seconds
    energy: float              # joules/bit
    max_length_mm: float = 50.0

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValueError("LinkSpec.bandwidth must be strictly positive")
        if self.latency < 0:
            raise ValueError("LinkSpec.latency must be non-negative")
        if self.max_length_mm <= 0:
            raise ValueError("LinkSpec.max_length_mm must be strictly positive")


@dataclass(frozen=True)
class RingEmbedding:
    """A cycle through a die group; contiguous means every hop is one mesh link."""

    die_cycle: tuple[Die, ...]
    contiguous: bool


@dataclass(frozen=True)
class WaferTopology:
    """Immutable die mesh with optional fault sets.

    ``disabled_links`` holds directed channels removed from routing;
    ``compute_scale`` carries per-die surviving-compute fractions after core
    faults (1.0 when healthy). Values are safe for concurrent read.
    """

    rows: int
    cols: int
    die_spec: DieSpec
    link_spec: LinkSpec
    die_pitch_mm: float = 33.25
    disabled_dies: frozenset[Die] = frozenset()
    disabled_links: frozenset[DirectedLink] = frozenset()
    compute_scale: tuple[tuple[Die, float], ...] = ()

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("mesh dimensions must be at least 1x1")
        if self.die_pitch_mm > self.link_spec.max_length_mm:
            raise ValueError(
                f"die pitch {self.die_pitch_mm} mm exceeds link reach "
                f"{self.link_spec.max_length_mm} mm; adjacent dies unreachable")
        for die in self.disabled_dies:
            if not self.in_bounds(die):
                raise ValueError(f"disabled die {die} outside mesh")
        for a, b in self.disabled_links:
            if not (self.in_bounds(a) and self.in_bounds(b) and manhattan(a, b) == 1):
                raise ValueError(f"disabled link {a}->{b} is not a mesh link")
        enabled = self.enabled_dies()
        if enabled and not self._connected(enabled):
            raise ValueError("enabled dies are not mutually reachable")

    # -- structure ---------------------------------------------------------

    def in_bounds(self, die: Die) -> bool:
        r, c = die
        return 0 <= r < self.rows and 0 <= c < self.cols

    def die_id(self, die: Die) -> int:
        return die[0] * self.cols + die[1]

    def die_at(self, die_id: int) -> Die:
        return (die_id // self.cols, die_id % self.cols)

    def all_dies(self) -> list[Die]:
        return [(r, c) for r in range(self.rows) for c in range(self.cols)]

    def enabled_dies(self) -> list[Die]:
        return [d for d in self.all_dies() if d not in self.disabled_dies]

    def undirected_links(self) -> list[tuple[Die, Die]]:
        """All enabled undirected edges, lexicographically ordered."""
        out = []
        for d in self.all_dies():
            for nb in ((d[0], d[1] + 1), (d[0] + 1, d[1])):
                if self.in_bounds(nb) and self.link_enabled(d, nb) and self.link_enabled(nb, d):
                    out.append((d, nb))
        return out

    def directed_links(self) -> list[DirectedLink]:
        out = []
        for d in self.all_dies():
            for nb in self._raw_neighbors(d):
                if self.link_enabled(d, nb):
                    out.append((d, nb))
        return out

    def _raw_neighbors(self, die: Die) -> list[Die]:
        r, c = die
        return [n for n in ((r - 1, c), (r, c - 1), (r, c + 1), (r + 1, c))
                if self.in_bounds(n)]

    def neighbors(self, die: Die) -> list[Die]:
        """Enabled dies reachable from ``die`` over one enabled channel."""
        return [n for n in self._raw_neighbors(die) if self.link_enabled(die, n)]

    def link_enabled(self, src: Die, dst: Die) -> bool:
        if src in self.disabled_dies or dst in self.disabled_dies:
            return False
        return (src, dst) not in self.disabled_links

    def die_compute_scale(self, die: Die) -> float:
        for d, s in self.compute_scale:
            if d == die:
                return s
        return 1.0

    def _connected(self, dies: list[Die]) -> bool:
        todo, seen = [dies[0]], {dies[0]}
        target = set(dies)
        while todo:
            cur = todo.pop()
            for nb in self.neighbors(cur):
                if nb in target and nb not in seen:
                    seen.add(nb)
                    todo.append(nb)
        return seen == target

    # -- fault application -------------------------------------------------

    def degraded(self,
                 disable_links: Iterable[DirectedLink] = (),
                 disable_dies: Iterable[Die] = (),
                 compute_scale: Optional[dict[Die, float]] = None) -> "WaferTopology":
        """New topology with additional faults applied (validates connectivity)."""
        scale = dict(self.compute_scale)
        for die, s in (compute_scale or {}).items():
            scale[die] = s
        return WaferTopology(
            rows=self.rows, cols=self.cols,
            die_spec=self.die_spec, link_spec=self.link_spec,
            die_pitch_mm=self.die_pitch_mm,
            disabled_dies=self.disabled_dies | frozenset(disable_dies),
            disabled_links=self.disabled_links | frozenset(disable_links),
            compute_scale=tuple(sorted(scale.items())),
        )


def manhattan(a: Die, b: Die) -> int:
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


def build_mesh(rows: int, cols: int, die_spec: DieSpec, link_spec: LinkSpec,
               die_pitch_mm: float = 33.25) -> WaferTopology:
    """Construct a rows x cols 2D mesh (rows*cols dies, 2rc - r - c edges)."""
    if rows < 1 or cols < 1:
        raise ValueError("mesh dimensions must be at least 1x1")
    return WaferTopology(rows=rows, cols=cols, die_spec=die_spec,
                         link_spec=link_spec, die_pitch_mm=die_pitch_mm)


# -- ring / chain embedding ------------------------------------------------


def find_ring_embedding(topology: WaferTopology, dies: Iterable[Die]) -> RingEmbedding:
    """Hamiltonian cycle through the induced subgraph, if one exists.

    Deterministic backtracking from the lexicographically smallest die; group
    sizes in scope are <= 32 so the exponential worst case is acceptable.
    Returns contiguous=False with an empty cycle when no cycle exists.
    """
    group = _validated_group(topology, dies)
    if len(group) < 3:
        return RingEmbedding(die_cycle=(), contiguous=False)
    cycle = _hamiltonian(topology, group, closed=True)
    if cycle is None:
        return RingEmbedding(die_cycle=(), contiguous=False)
    return RingEmbedding(die_cycle=tuple(cycle), contiguous=True)


def find_chain_embedding(topology: WaferTopology, dies: Iterable[Die]) -> Optional[list[Die]]:
    """Hamiltonian path through the induced subgraph, or None."""
    group = _validated_group(topology, dies)
    if len(group) == 1:
        return list(group)
    return _hamiltonian(topology, group, closed=False)


def _validated_group(topology: WaferTopology, dies: Iterable[Die]) -> list[Die]:
    group = sorted(set(dies))
    if not group:
        raise ValueError("die group must be non-empty")
    for die in group:
        if not topology.in_bounds(die):
            raise ValueError(f"unknown die {die}")
        if die in topology.disabled_dies:
            raise ValueError(f"die {die} is disabled")
    return group


def _hamiltonian(topology: WaferTopology, group: list[Die], closed: bool) -> Optional[list[Die]]:
    group_set = set(group)
    adj = {d: [n for n in topology.neighbors(d) if n in group_set] for d in group}
    if any(len(adj[d]) == 0 for d in group) and len(group) > 1:
        return None
    n = len(group)

    starts = group if not closed else group[:1]  # cycles are rotation-invariant
    for start in starts:
        path = [start]
        used = {start}

        def extend() -> bool:
            if len(path) == n:
                return not closed or path[-1] in adj[path[0]]
            # prune: any unused die stranded with no unused neighbor
            for d in group:
                if d in used:
                    continue
                if not any(nb not in used or nb == path[-1] for nb in adj[d]):
                    return False
            for nb in adj[path[-1]]:
                if nb in used:
                    continue
                path.append(nb)
                used.add(nb)
                if extend():
                    return True
                path.pop()
                used.remove(nb)
            return False

        if extend():
            return path
    return None


# -- shortest paths --------------------------------------------------------


def xy_path(src: Die, dst: Die) -> list[Die]:
    """Dimension-order path: sweep columns first, then rows."""
    path = [src]
    r, c = src
    step = 1 if dst[1] > c else -1
    while c != dst[1]:
        c += step
        path.append((r, c))
    step = 1 if dst[0] > r else -1
    while r != dst[0]:
        r += step
        path.append((r, c))
    return path


def yx_path(src: Die, dst: Die) -> list[Die]:
    """Dimension-order path: sweep rows first, then columns."""
    path = [src]
    r, c = src
    step = 1 if dst[0] > r else -1
    while r != dst[0]:
        r += step
        path.append((r, c))
    step = 1 if dst[1] > c else -1
    while c != dst[1]:
        c += step
        path.append((r, c))
    return path


def path_enabled(topology: WaferTopology, path: list[Die]) -> bool:
    return all(topology.link_enabled(a, b) for a, b in zip(path, path[1:]))


def shortest_paths(topology: WaferTopology, src: Die, dst: Die,
                   limit: int = 64) -> list[list[Die]]:
    """All minimal-hop paths over enabled links, XY first then YX.

    Raises NoRouteError when faults disconnect the pair. ``limit`` caps the
    enumeration (minimal-path counts are small at mesh scale).
    """
    if src == dst:
        raise ValueError("src and dst must differ")
    for die in (src, dst):
        if not topology.in_bounds(die) or die in topology.disabled_dies:
            raise ValueError(f"die {die} unknown or disabled")

    dist = _bfs_dist(topology, dst)
    if src not in dist:
        raise NoRouteError(f"no route {src} -> {dst}")

    paths: list[list[Die]] = []

    def walk(path: list[Die]):
        if len(paths) >= limit:
            return
        cur = path[-1]
        if cur == dst:
            paths.append(list(path))
            return
        for nb in topology.neighbors(cur):
            if nb in dist and dist[nb] == dist[cur] - 1:
                path.append(nb)
                walk(path)
                path.pop()

    walk([src])

    def rank(p: list[Die]) -> tuple:
        if p == xy_path(src, dst):
            return (0,)
        if p == yx_path(src, dst):
            return (1,)
        return (2, tuple(topology.die_id(d) for d in p))

    paths.sort(key=rank)
    return paths


def _bfs_dist(topology: WaferTopology, target: Die) -> dict[Die, int]:
    """Hop distance to ``target`` over channels oriented toward it."""
    dist = {target: 0}
    frontier = [target]
    while frontier:
        nxt = []
        for cur in frontier:
            for nb in topology._raw_neighbors(cur):
                if nb not in dist and topology.link_enabled(nb, cur):
                    dist[nb] = dist[cur] + 1
                    nxt.append(nb)
        frontier = nxt
    return dist
