"""Channel-group analysis.

Structured pruning removes whole channels, and a channel rarely belongs to a
single operator: it is produced by a convolution, normalised by a BatchNorm,
fed into downstream convolutions, and may be tied to channels of *other*
convolutions through element-wise Sum/Product operators (skip connections) or
routed side by side through Concatenation. This module partitions all
channel positions of a graph into groups that must keep or drop each channel
index together.

Rules applied while walking the graph in topological order:

* Convolution / FullyConnected outputs each seed a fresh group.
* The entry tensor seeds a non-prunable group (raw data channels).
* Channel-preserving operators (BatchNorm, ReLU, MaxPool, Upsample, Output)
  propagate group identity unchanged.
* Sum and ElementwiseProduct require their inputs to carry the same channel
  layout and merge the corresponding groups (union-find).
* Concatenation keeps the incoming groups side by side as segments with
  channel offsets; no new group is created.
* Unknown operators make every group flowing through them non-prunable, as
  does feeding the network output (the logits are never pruned).
"""
from __future__ import annotations

from dataclasses import dataclass

from .errors import InconsistentWidths
from .graph import Edge, Graph, OpKind, TensorShape

ROLE_CONV_OUT = "conv-output"
ROLE_CONV_IN = "conv-input"
ROLE_BN = "bn-channels"
ROLE_FC_OUT = "fc-output"
ROLE_FC_IN = "fc-input"


@dataclass(frozen=True)
class GroupMember:
    """One place where a group's channels appear on a parametric operator.

    ``offset`` is the first channel index of the group's segment within that
    operator's input or output tensor; it is nonzero only downstream of a
    Concatenation.
    """

    node: str
    role: str
    offset: int = 0


@dataclass(frozen=True)
class Segment:
    """A contiguous run of channels on a tensor belonging to one group."""

    group: int
    width: int


@dataclass(frozen=True)
class ChannelGroup:
    id: int
    width: int
    members: tuple[GroupMember, ...]
    prunable: bool


@dataclass(frozen=True)
class Coloring:
    """Result of :func:`identify_subgraphs`.

    ``node_segments`` maps every node id to the ordered segments of its
    output tensor; ``assignment`` repeats that per edge (an edge always
    carries its producer's full output).
    """

    groups: tuple[ChannelGroup, ...]
    node_segments: dict[str, tuple[Segment, ...]]
    assignment: dict[Edge, tuple[Segment, ...]]

    def group(self, group_id: int) -> ChannelGroup:
        return self.groups[group_id]

    def producer_group(self, node_id: str) -> int:
        """Group id of the channels produced by a Convolution/FullyConnected."""
        segs = self.node_segments[node_id]
        if len(segs) != 1:
            raise InconsistentWidths(f"node {node_id!r} does not produce a single segment")
        return segs[0].group

    def prunable_groups(self) -> tuple[ChannelGroup, ...]:
        return tuple(g for g in self.groups if g.prunable)


class _DisjointSet:
    """Union-find over provisional group handles with per-root payload."""

    def __init__(self) -> None:
        self.parent: list[int] = []
        self.width: list[int] = []
        self.seed: list[str] = []
        self.blocked: list[bool] = []  # True once the group may not be pruned

    def make(self, width: int, seed: str, blocked: bool) -> int:
        handle = len(self.parent)
        self.parent.append(handle)
        self.width.append(width)
        self.seed.append(seed)
        self.blocked.append(blocked)
        return handle

    def find(self, h: int) -> int:
        root = h
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[h] != root:
            self.parent[h], h = root, self.parent[h]
        return root

    def union(self, a: int, b: int) -> int:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        if self.width[ra] != self.width[rb]:
            raise InconsistentWidths(
                f"cannot merge channel groups of widths {self.width[ra]} and {self.width[rb]}"
            )
        self.parent[rb] = ra
        self.blocked[ra] = self.blocked[ra] or self.blocked[rb]
        self.seed[ra] = min(self.seed[ra], self.seed[rb])
        return ra

    def block(self, h: int) -> None:
        self.blocked[self.find(h)] = True


def identify_subgraphs(graph: Graph, shapes: dict[str, TensorShape]) -> Coloring:
    """Partition the channel positions of ``graph`` into coupled groups.

    ``shapes`` must come from :func:`prunekit.graph.infer_shapes` on the same
    graph. The result is deterministic and independent of node insertion
    order: groups are numbered by their lexicographically first member.
    """
    dsu = _DisjointSet()
    desc: dict[str, list[tuple[int, int]]] = {}  # node -> [(handle, width)] segments
    members: list[tuple[int, GroupMember]] = []  # (handle, member), resolved after all unions

    for nid in graph.topo_order():
        node = graph.nodes[nid]
        kind = node.kind
        ins = graph.inputs(nid)
        if kind == OpKind.INPUT:
            h = dsu.make(shapes[nid].channels, seed=nid, blocked=True)
            desc[nid] = [(h, shapes[nid].channels)]
        elif kind in (OpKind.CONV, OpKind.FULLY_CONNECTED):
            in_role = ROLE_CONV_IN if kind == OpKind.CONV else ROLE_FC_IN
            out_role = ROLE_CONV_OUT if kind == OpKind.CONV else ROLE_FC_OUT
            offset = 0
            for handle, width in desc[ins[0]]:
                members.append((handle, GroupMember(nid, in_role, offset)))
                offset += width
            out_width = shapes[nid].channels
            h = dsu.make(out_width, seed=nid, blocked=False)
            members.append((h, GroupMember(nid, out_role, 0)))
            desc[nid] = [(h, out_width)]
        elif kind == OpKind.BATCH_NORM:
            offset = 0
            segs = desc[ins[0]]
            for handle, width in segs:
                members.append((handle, GroupMember(nid, ROLE_BN, offset)))
                offset += width
            desc[nid] = list(segs)
        elif kind in (OpKind.RELU, OpKind.MAX_POOL, OpKind.UPSAMPLE):
            desc[nid] = list(desc[ins[0]])
        elif kind in (OpKind.SUM, OpKind.PRODUCT):
            desc[nid] = _merge_descriptors(dsu, nid, [desc[p] for p in ins])
        elif kind == OpKind.CONCAT:
            segs: list[tuple[int, int]] = []
            for p in ins:
                segs.extend(desc[p])
            desc[nid] = segs
        elif kind == OpKind.UNKNOWN:
            for p in ins:
                for handle, _ in desc[p]:
                    dsu.block(handle)
            desc[nid] = list(desc[ins[0]])
        elif kind == OpKind.OUTPUT:
            for handle, _ in desc[ins[0]]:
                dsu.block(handle)
            desc[nid] = list(desc[ins[0]])
        else:  # pragma: no cover - enum is closed
            raise InconsistentWidths(f"unhandled kind {kind!r}")

    # Resolve provisional handles to roots and build canonical groups.
    root_members: dict[int, list[GroupMember]] = {}
    for handle, member in members:
        root_members.setdefault(dsu.find(handle), []).append(member)
    roots = sorted(
        {dsu.find(h) for h in range(len(dsu.parent))},
        key=lambda r: _canonical_key(r, root_members, dsu),
    )
    group_ids = {root: i for i, root in enumerate(roots)}
    groups = tuple(
        ChannelGroup(
            id=group_ids[root],
            width=dsu.width[root],
            members=tuple(sorted(root_members.get(root, []), key=lambda m: (m.node, m.role, m.offset))),
            prunable=not dsu.blocked[root],
        )
        for root in roots
    )
    node_segments = {
        nid: tuple(Segment(group_ids[dsu.find(h)], w) for h, w in segs)
        for nid, segs in desc.items()
    }
    assignment = {
        (src, dst, slot): node_segments[src]
        for src, dst, slot in graph.edges
    }
    return Coloring(groups=groups, node_segments=node_segments, assignment=assignment)


def _merge_descriptors(
    dsu: _DisjointSet, node_id: str, descriptors: list[list[tuple[int, int]]]
) -> list[tuple[int, int]]:
    """Merge element-wise operands segment by segment.

    Segment boundaries must align across all operands; a Sum of, say, a
    concatenated ``4+4`` tensor with a plain ``8``-channel tensor would force
    half a group to share a mask with a whole one, which this representation
    deliberately rejects.
    """
    first = descriptors[0]
    for other in descriptors[1:]:
        if [w for _, w in other] != [w for _, w in first]:
            raise InconsistentWidths(
                f"element-wise node {node_id!r} merges tensors with segment widths "
                f"{[w for _, w in first]} vs {[w for _, w in other]}"
            )
    merged: list[tuple[int, int]] = []
    for i, (handle, width) in enumerate(first):
        root = handle
        for other in descriptors[1:]:
            root = dsu.union(root, other[i][0])
        merged.append((dsu.find(root), width))
    return merged


def _canonical_key(root: int, root_members: dict[int, list[GroupMember]], dsu: _DisjointSet):
    ms = root_members.get(root)
    if ms:
        first = min(ms, key=lambda m: (m.node, m.role, m.offset))
        return (first.node, first.role, first.offset)
    return (dsu.seed[root], "", 0)


def group_cost_footprint(
    coloring: Coloring, graph: Graph, shapes: dict[str, TensorShape]
) -> dict[int, tuple[float, float]]:
    """Cost attributable to each prunable group: ``(params, flops)``.

    The footprint of a group is the drop in total model cost when that group
    alone is switched fully off while every other channel stays on, i.e. the
    marginal cost of fully enabling it.
    """
    from . import accounting  # local import; accounting depends on this module's types

    footprint: dict[int, tuple[float, float]] = {}
    if not any(g.prunable for g in coloring.groups):
        return footprint
    full = accounting.channel_totals(coloring, gates=None)
    base = accounting.structure_measures(graph, coloring, None, shapes)
    for group in coloring.groups:
        if not group.prunable:
            continue
        sums = dict(full)
        sums[group.id] = 0.0
        report = accounting.structure_measures(graph, coloring, None, shapes, channel_sums=sums)
        footprint[group.id] = (
            base.total_params - report.relaxed_params,
            base.total_flops - report.relaxed_flops,
        )
    return footprint
