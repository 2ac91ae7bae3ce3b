"""Typed heterogeneous knowledge graph: construction, TSV round-trip, pruning, stats.

Graphs are immutable after construction; every query walks read-only
structures, so concurrent readers are safe.
"""

from __future__ import annotations

import datetime
import enum
import io
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np


class KgFormatError(ValueError):
    """Malformed node/edge file content (message carries the line number)."""


class NodeKind(enum.Enum):
    DISEASE = "Disease"
    PHENOTYPE = "Phenotype"
    DRUG = "Drug"
    LAB_TEST = "LabTest"
    ADVERSE_EVENT = "AdverseEvent"
    GENE = "Gene"


@dataclass(frozen=True)
class KgNode:
    id: str
    kind: NodeKind
    label: str

    def __post_init__(self):
        if not self.id:
            raise ValueError("node id must be non-empty")


@dataclass(frozen=True)
class TypedEdge:
    src: str
    dst: str
    relation: str
    provenance: str = "unknown"
    valid_from: datetime.date | None = None
    valid_to: datetime.date | None = None

    def __post_init__(self):
        if self.valid_from is not None and self.valid_to is not None:
            if self.valid_from > self.valid_to:
                raise ValueError(
                    f"validity start {self.valid_from} after end {self.valid_to}"
                )

    def key(self) -> tuple[str, str, str]:
        return (self.src, self.dst, self.relation)

    def active_on(self, date: datetime.date) -> bool:
        if self.valid_from is not None and date < self.valid_from:
            return False
        if self.valid_to is not None and date > self.valid_to:
            return False
        return True


def _merge_duplicate(a: TypedEdge, b: TypedEdge) -> TypedEdge:
    """Merge two edges with the same (src, dst, relation).

    Keeps the earliest validity start and latest end; an absent bound counts
    as unbounded. Provenance tags are unioned (comma-joined, sorted).
    """
    start = None
    if a.valid_from is not None and b.valid_from is not None:
        start = min(a.valid_from, b.valid_from)
    end = None
    if a.valid_to is not None and b.valid_to is not None:
        end = max(a.valid_to, b.valid_to)
    tags = sorted(set(a.provenance.split(",")) | set(b.provenance.split(",")))
    return TypedEdge(a.src, a.dst, a.relation, ",".join(tags), start, end)


class KnowledgeGraph:
    """Nodes plus deduplicated typed edges with a per-relation outgoing index."""

    def __init__(
        self,
        nodes: Iterable[KgNode],
        edges: Iterable[TypedEdge],
        relations: Iterable[str] | None = None,
    ):
        self.nodes: dict[str, KgNode] = {}
        for node in nodes:
            if node.id in self.nodes:
                raise ValueError(f"duplicate node id {node.id!r}")
            self.nodes[node.id] = node

        merged: dict[tuple[str, str, str], TypedEdge] = {}
        for edge in edges:
            for endpoint in (edge.src, edge.dst):
                if endpoint not in self.nodes:
                    raise ValueError(f"edge references undeclared node {endpoint!r}")
            key = edge.key()
            merged[key] = _merge_duplicate(merged[key], edge) if key in merged else edge
        self.edges: list[TypedEdge] = list(merged.values())

        if relations is None:
            self.relations = frozenset(e.relation for e in self.edges)
        else:
            self.relations = frozenset(relations)
            for e in self.edges:
                if e.relation not in self.relations:
                    raise ValueError(f"edge relation {e.relation!r} not declared")

        # relation -> src -> outgoing edges, in edge-list order
        self._adj: dict[str, dict[str, list[TypedEdge]]] = {r: {} for r in self.relations}
        self._out: dict[str, list[TypedEdge]] = {}
        self._und: dict[str, set[str]] = {nid: set() for nid in self.nodes}
        for e in self.edges:
            self._adj[e.relation].setdefault(e.src, []).append(e)
            self._out.setdefault(e.src, []).append(e)
            self._und[e.src].add(e.dst)
            self._und[e.dst].add(e.src)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def has_node(self, node_id: str) -> bool:
        return node_id in self.nodes

    def nodes_of_kind(self, kind: NodeKind) -> list[KgNode]:
        return [n for n in self.nodes.values() if n.kind == kind]

    def out_edges(self, src: str, relation: str | None = None) -> list[TypedEdge]:
        if relation is None:
            return list(self._out.get(src, ()))
        return list(self._adj.get(relation, {}).get(src, ()))

    def undirected_neighbors(self, node_id: str) -> set[str]:
        return set(self._und.get(node_id, ()))

    def restricted_to_date(self, date: datetime.date) -> "KnowledgeGraph":
        """Subgraph keeping only edges whose validity interval covers `date`."""
        keep = [e for e in self.edges if e.active_on(date)]
        return KnowledgeGraph(self.nodes.values(), keep, self.relations)


# ---------------------------------------------------------------------------
# TSV round trip.
#
# Node file:  id<TAB>kind<TAB>label, '#' comments ignored.
# Edge file:  '!relation <name>' header lines declaring the closed relation
#             set, then src<TAB>dst<TAB>relation<TAB>provenance<TAB>start<TAB>end
#             with ISO dates or '-' for an absent bound.
# ---------------------------------------------------------------------------

_KIND_BY_NAME = {k.value: k for k in NodeKind}


def _parse_date(text: str, lineno: int, path_hint: str) -> datetime.date | None:
    if text == "-":
        return None
    try:
        return datetime.date.fromisoformat(text)
    except ValueError as exc:
        raise KgFormatError(f"{path_hint} line {lineno}: bad date {text!r}") from exc


def load_edge_list(edge_stream: io.TextIOBase, node_stream: io.TextIOBase) -> KnowledgeGraph:
    """Parse node and edge TSV streams into a deduplicated graph."""
    nodes: list[KgNode] = []
    seen_ids: set[str] = set()
    for lineno, raw in enumerate(node_stream, start=1):
        line = raw.rstrip("\n")
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise KgFormatError(f"nodes line {lineno}: expected 3 fields, got {len(parts)}")
        nid, kind_name, label = parts
        if kind_name not in _KIND_BY_NAME:
            raise KgFormatError(f"nodes line {lineno}: unknown kind {kind_name!r}")
        if nid in seen_ids:
            raise KgFormatError(f"nodes line {lineno}: duplicate node id {nid!r}")
        seen_ids.add(nid)
        nodes.append(KgNode(nid, _KIND_BY_NAME[kind_name], label))

    relations: list[str] = []
    edges: list[TypedEdge] = []
    for lineno, raw in enumerate(edge_stream, start=1):
        line = raw.rstrip("\n")
        if not line.strip() or line.startswith("#"):
            continue
        if line.startswith("!relation"):
            parts = line.split()
            if len(parts) != 2:
                raise KgFormatError(f"edges line {lineno}: bad relation declaration")
            relations.append(parts[1])
            continue
        parts = line.split("\t")
        if len(parts) != 6:
            raise KgFormatError(f"edges line {lineno}: expected 6 fields, got {len(parts)}")
        src, dst, relation, provenance, start_s, end_s = parts
        if relation not in relations:
            raise KgFormatError(f"edges line {lineno}: undeclared relation {relation!r}")
        for endpoint in (src, dst):
            if endpoint not in seen_ids:
                raise KgFormatError(f"edges line {lineno}: undeclared node {endpoint!r}")
        start = _parse_date(start_s, lineno, "edges")
        end = _parse_date(end_s, lineno, "edges")
        try:
            edges.append(TypedEdge(src, dst, relation, provenance, start, end))
        except ValueError as exc:
            raise KgFormatError(f"edges line {lineno}: {exc}") from exc

    return KnowledgeGraph(nodes, edges, relations)


def serialize(kg: KnowledgeGraph) -> tuple[str, str]:
    """Render (node_text, edge_text) in the TSV formats load_edge_list reads."""
    node_lines = ["# id\tkind\tlabel"]
    for nid in sorted(kg.nodes):
        node = kg.nodes[nid]
        node_lines.append(f"{node.id}\t{node.kind.value}\t{node.label}")

    edge_lines = [f"!relation {r}" for r in sorted(kg.relations)]
    for e in sorted(kg.edges, key=lambda e: (e.src, e.dst, e.relation)):
        start = e.valid_from.isoformat() if e.valid_from else "-"
        end = e.valid_to.isoformat() if e.valid_to else "-"
        edge_lines.append(f"{e.src}\t{e.dst}\t{e.relation}\t{e.provenance}\t{start}\t{end}")
    return "\n".join(node_lines) + "\n", "\n".join(edge_lines) + "\n"


def save_kg(kg: KnowledgeGraph, node_path, edge_path) -> None:
    node_text, edge_text = serialize(kg)
    with open(node_path, "w", encoding="utf-8") as f:
        f.write(node_text)
    with open(edge_path, "w", encoding="utf-8") as f:
        f.write(edge_text)


def load_kg(node_path, edge_path) -> KnowledgeGraph:
    with open(node_path, encoding="utf-8") as nf, open(edge_path, encoding="utf-8") as ef:
        return load_edge_list(ef, nf)


# ---------------------------------------------------------------------------
# Pruning.
# ---------------------------------------------------------------------------


def prune_to_neighborhood(
    kg: KnowledgeGraph, anchor: str, max_hops: int | float | None = 3
) -> KnowledgeGraph:
    """Subgraph of nodes within `max_hops` undirected hops of `anchor`.

    `max_hops=None` (or inf) keeps the whole connected component. Edges
    between retained nodes are kept; everything else is dropped.
    """
    if not kg.has_node(anchor):
        raise KeyError(f"anchor node {anchor!r} not in graph")
    if max_hops is None:
        max_hops = float("inf")
    if max_hops < 0:
        raise ValueError("max_hops must be >= 0")

    keep = {anchor}
    frontier = deque([(anchor, 0)])
    while frontier:
        node, dist = frontier.popleft()
        if dist >= max_hops:
            continue
        for nbr in kg.undirected_neighbors(node):
            if nbr not in keep:
                keep.add(nbr)
                frontier.append((nbr, dist + 1))

    nodes = [kg.nodes[nid] for nid in kg.nodes if nid in keep]
    edges = [e for e in kg.edges if e.src in keep and e.dst in keep]
    return KnowledgeGraph(nodes, edges, kg.relations)


# ---------------------------------------------------------------------------
# Toy-scale generator.
# ---------------------------------------------------------------------------

# relation -> (source kind, destination kind, provenance tag)
RELATION_SCHEMA: dict[str, tuple[NodeKind, NodeKind, str]] = {
    "has_phenotype": (NodeKind.DISEASE, NodeKind.PHENOTYPE, "curated"),
    "assoc_gene": (NodeKind.DISEASE, NodeKind.GENE, "curated"),
    "indicated_drug": (NodeKind.DISEASE, NodeKind.DRUG, "curated"),
    "abnormal_lab": (NodeKind.DISEASE, NodeKind.LAB_TEST, "mined"),
    "phenotype_lab": (NodeKind.PHENOTYPE, NodeKind.LAB_TEST, "mined"),
    "targeted_by": (NodeKind.GENE, NodeKind.DRUG, "curated"),
    "causes_ae": (NodeKind.DRUG, NodeKind.ADVERSE_EVENT, "reports"),
    "phenotype_of": (NodeKind.PHENOTYPE, NodeKind.DISEASE, "curated"),
}

_KIND_PREFIX = {
    NodeKind.DISEASE: "dis",
    NodeKind.PHENOTYPE: "phe",
    NodeKind.DRUG: "drg",
    NodeKind.LAB_TEST: "lab",
    NodeKind.ADVERSE_EVENT: "aev",
    NodeKind.GENE: "gen",
}


@dataclass(frozen=True)
class KgGenConfig:
    """Counts per node kind and expected out-degree per relation."""

    counts: Mapping[NodeKind, int]
    out_degree: Mapping[str, float]
    validity_fraction: float = 0.0

    def __post_init__(self):
        for kind, n in self.counts.items():
            if n < 0:
                raise ValueError(f"negative count for {kind}")
        for rel, deg in self.out_degree.items():
            if rel not in RELATION_SCHEMA:
                raise ValueError(f"unknown relation {rel!r}")
            if deg < 0:
                raise ValueError(f"negative out-degree for {rel!r}")
        if not 0.0 <= self.validity_fraction <= 1.0:
            raise ValueError("validity_fraction must be in [0, 1]")

    @staticmethod
    def from_shares(
        total: int,
        shares: Mapping[NodeKind, float],
        out_degree: Mapping[str, float],
        validity_fraction: float = 0.0,
    ) -> "KgGenConfig":
        """Convert fractional kind shares to exact counts (largest remainder)."""
        raw = {k: total * s for k, s in shares.items()}
        counts = {k: int(v) for k, v in raw.items()}
        leftover = total - sum(counts.values())
        by_frac = sorted(raw, key=lambda k: (-(raw[k] - counts[k]), k.value))
        for kind in by_frac[:leftover]:
            counts[kind] += 1
        return KgGenConfig(counts, out_degree, validity_fraction)


def generate_toy_kg(config: KgGenConfig, seed: int) -> KnowledgeGraph:
    """Sample a random typed graph honoring the configured counts and densities.

    Deterministic for a fixed (config, seed). Every disease is guaranteed at
    least one outgoing edge whenever some disease-source relation is
    configured with positive density.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6B67]))
    nodes: list[KgNode] = []
    ids_by_kind: dict[NodeKind, list[str]] = {k: [] for k in NodeKind}
    for kind in NodeKind:  # fixed enum order keeps ids stable
        n = config.counts.get(kind, 0)
        for i in range(n):
            nid = f"{_KIND_PREFIX[kind]}{i:05d}"
            ids_by_kind[kind].append(nid)
            nodes.append(KgNode(nid, kind, f"{kind.value} {i}"))

    requested = [r for r in RELATION_SCHEMA if config.out_degree.get(r, 0.0) > 0.0]
    for rel in requested:
        src_kind, dst_kind, _ = RELATION_SCHEMA[rel]
        if not ids_by_kind[src_kind] or not ids_by_kind[dst_kind]:
            raise ValueError(
                f"relation {rel!r} requested but no {src_kind.value} or "
                f"{dst_kind.value} nodes configured"
            )

    edges: list[TypedEdge] = []
    base_date = datetime.date(2015, 1, 1)
    for rel in sorted(requested):
        src_kind, dst_kind, tag = RELATION_SCHEMA[rel]
        targets = ids_by_kind[dst_kind]
        deg = config.out_degree[rel]
        for src in ids_by_kind[src_kind]:
            k = int(rng.poisson(deg))
            k = min(k, len(targets))
            if k == 0:
                continue
            picks = rng.choice(len(targets), size=k, replace=False)
            for j in sorted(int(p) for p in picks):
                start = end = None
                if rng.random() < config.validity_fraction:
                    off = int(rng.integers(0, 3000))
                    span = int(rng.integers(30, 2000))
                    start = base_date + datetime.timedelta(days=off)
                    end = start + datetime.timedelta(days=span)
                edges.append(TypedEdge(src, targets[j], rel, tag, start, end))

    # floor: no isolated diseases when a disease-source relation is in play
    disease_rels = sorted(
        r for r in requested if RELATION_SCHEMA[r][0] == NodeKind.DISEASE
    )
    if disease_rels:
        with_out = {e.src for e in edges}
        for src in ids_by_kind[NodeKind.DISEASE]:
            if src in with_out:
                continue
            rel = disease_rels[int(rng.integers(0, len(disease_rels)))]
            _, dst_kind, tag = RELATION_SCHEMA[rel]
            targets = ids_by_kind[dst_kind]
            dst = targets[int(rng.integers(0, len(targets)))]
            edges.append(TypedEdge(src, dst, rel, tag))

    relations = sorted(requested) if requested else []
    return KnowledgeGraph(nodes, edges, relations)


def kg_stats(kg: KnowledgeGraph) -> dict:
    """Node/edge counts, per-kind shares, per-relation edge counts."""
    kind_counts = {k.value: 0 for k in NodeKind}
    for node in kg.nodes.values():
        kind_counts[node.kind.value] += 1
    rel_counts: dict[str, int] = {r: 0 for r in sorted(kg.relations)}
    for e in kg.edges:
        rel_counts[e.relation] += 1
    total = kg.n_nodes
    shares = {k: (c / total if total else 0.0) for k, c in kind_counts.items()}
    return {
        "n_nodes": total,
        "n_edges": kg.n_edges,
        "kind_counts": kind_counts,
        "kind_shares": shares,
        "relation_counts": rel_counts,
    }
