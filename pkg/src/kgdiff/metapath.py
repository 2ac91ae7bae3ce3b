"""Typed-path counting from an anchor disease and the derived guidance profile.

Paths are simple (no repeated node) directed walks of length 1..max_len over
typed edges. Per-token scalar scores are the raw path counts clipped at the
schedule ceiling; the per-pattern count matrix conditions the denoiser.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .kg import KnowledgeGraph
from .schedule import clip_ceiling

PROFILE_FORMAT_VERSION = 1

FIELD_LAB = "Lab"
FIELD_MED = "Med"
FIELD_AE = "AEFlag"
FIELDS = (FIELD_LAB, FIELD_MED, FIELD_AE)

# node id assigned to tokens that deliberately map outside the graph
ABSENT_NODE_ID = "__none__"

OTHER_PATTERN: tuple[str, ...] = ("__other__",)


@dataclass(frozen=True)
class Token:
    index: int
    field: str
    node_id: str
    code: str


class TokenVocab:
    """Ordered token list partitioned into Lab / Med / AEFlag blocks."""

    def __init__(self, tokens: Sequence[Token]):
        self.tokens: tuple[Token, ...] = tuple(tokens)
        for i, tok in enumerate(self.tokens):
            if tok.index != i:
                raise ValueError(f"token ids must be dense 0..V-1, got {tok.index} at {i}")
            if tok.field not in FIELDS:
                raise ValueError(f"unknown field {tok.field!r}")
        self._blocks: dict[str, slice] = {}
        pos = 0
        for fld in FIELDS:
            n = sum(1 for t in self.tokens if t.field == fld)
            block = slice(pos, pos + n)
            for t in self.tokens[block]:
                if t.field != fld:
                    raise ValueError("tokens must be grouped by field in Lab/Med/AEFlag order")
            self._blocks[fld] = block
            pos += n
        if pos != len(self.tokens):
            raise ValueError("field partition must cover the vocabulary")
        self._by_code = {t.code: t for t in self.tokens}

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def block(self, field: str) -> slice:
        return self._blocks[field]

    def block_tokens(self, field: str) -> tuple[Token, ...]:
        return self.tokens[self._blocks[field]]

    def by_code(self, code: str) -> Token:
        return self._by_code[code]

    @property
    def ae_absent_index(self) -> int:
        return self._blocks[FIELD_AE].start

    @property
    def ae_present_index(self) -> int:
        return self._blocks[FIELD_AE].start + 1

    def to_json_list(self) -> list[list]:
        return [[t.index, t.field, t.node_id, t.code] for t in self.tokens]

    @staticmethod
    def from_json_list(rows: Sequence[Sequence]) -> "TokenVocab":
        return TokenVocab([Token(int(r[0]), r[1], r[2], r[3]) for r in rows])


def _iter_simple_paths(
    kg: KnowledgeGraph, anchor: str, max_len: int
) -> Iterator[tuple[str, tuple[str, ...]]]:
    """Yield (end node, relation sequence) for every simple directed path of
    length 1..max_len starting at anchor. Each yield is one path prefix."""
    stack: list[str] = [anchor]
    relations: list[str] = []
    on_path = {anchor}

    def walk(node: str) -> Iterator[tuple[str, tuple[str, ...]]]:
        if len(relations) >= max_len:
            return
        for edge in kg.out_edges(node):
            if edge.dst in on_path:
                continue
            relations.append(edge.relation)
            on_path.add(edge.dst)
            yield edge.dst, tuple(relations)
            yield from walk(edge.dst)
            on_path.discard(edge.dst)
            relations.pop()

    yield from walk(anchor)


def count_paths(kg: KnowledgeGraph, anchor: str, target: str, max_len: int = 3) -> int:
    """Number of distinct simple directed paths of length 1..max_len anchor->target."""
    for node in (anchor, target):
        if not kg.has_node(node):
            raise KeyError(f"node {node!r} not in graph")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    return sum(1 for end, _ in _iter_simple_paths(kg, anchor, max_len) if end == target)


def pattern_features(
    kg: KnowledgeGraph, anchor: str, target: str, max_len: int = 3
) -> dict[tuple[str, ...], int]:
    """Path counts keyed by relation sequence; values sum to count_paths(...)."""
    for node in (anchor, target):
        if not kg.has_node(node):
            raise KeyError(f"node {node!r} not in graph")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    out: dict[tuple[str, ...], int] = {}
    for end, rels in _iter_simple_paths(kg, anchor, max_len):
        if end == target:
            out[rels] = out.get(rels, 0) + 1
    return out


@dataclass(frozen=True)
class MetaPathProfile:
    """Per-token guidance scores and the pattern-count matrix for one anchor.

    psi_clipped[v] = min(psi_raw[v], psi_max) with psi_max = 1/lambda - 1e-4
    (inf when lambda = 0), so the guided noise rate stays strictly positive.
    Psi[v] holds per-relation-sequence path counts; rows sum to psi_raw[v]
    (pattern overflow beyond d_max is folded into a trailing "other" column).
    """

    anchor: str
    lam: float
    psi_raw: np.ndarray
    psi_clipped: np.ndarray
    psi_max: float
    Psi: np.ndarray
    patterns: tuple[tuple[str, ...], ...]
    vocab: TokenVocab
    normalize: str = "none"

    @property
    def d(self) -> int:
        return self.Psi.shape[1]

    @property
    def film_features(self) -> np.ndarray:
        """Conditioning matrix for the denoiser.

        The unguided baseline is lambda = 0 with zero features: the same
        architecture trained without any graph signal. Guided runs get the
        raw pattern counts.
        """
        if self.lam == 0.0:
            return np.zeros_like(self.Psi)
        return self.Psi

    def to_json_dict(self) -> dict:
        return {
            "format": "kgdiff-profile",
            "version": PROFILE_FORMAT_VERSION,
            "anchor": self.anchor,
            "lambda": self.lam,
            "psi_max": None if np.isinf(self.psi_max) else self.psi_max,
            "normalize": self.normalize,
            "psi_raw": self.psi_raw.tolist(),
            "psi_clipped": self.psi_clipped.tolist(),
            "patterns": [list(p) for p in self.patterns],
            "psi_matrix": self.Psi.reshape(-1).tolist(),
            "vocab": self.vocab.to_json_list(),
        }

    @staticmethod
    def from_json_dict(doc: dict) -> "MetaPathProfile":
        if doc.get("format") != "kgdiff-profile":
            raise ValueError("not a profile document")
        if doc.get("version") != PROFILE_FORMAT_VERSION:
            raise ValueError(f"unsupported profile version {doc.get('version')!r}")
        vocab = TokenVocab.from_json_list(doc["vocab"])
        patterns = tuple(tuple(p) for p in doc["patterns"])
        v, d = len(vocab), len(patterns)
        psi_mat = np.asarray(doc["psi_matrix"], dtype=float).reshape(v, d)
        psi_max = doc["psi_max"]
        return MetaPathProfile(
            anchor=doc["anchor"],
            lam=float(doc["lambda"]),
            psi_raw=np.asarray(doc["psi_raw"], dtype=float),
            psi_clipped=np.asarray(doc["psi_clipped"], dtype=float),
            psi_max=float("inf") if psi_max is None else float(psi_max),
            Psi=psi_mat,
            patterns=patterns,
            vocab=vocab,
            normalize=doc.get("normalize", "none"),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json_dict(), f, sort_keys=True)
            f.write("\n")

    @staticmethod
    def load(path) -> "MetaPathProfile":
        with open(path, encoding="utf-8") as f:
            return MetaPathProfile.from_json_dict(json.load(f))


def compute_profile(
    kg: KnowledgeGraph,
    anchor: str,
    vocab: TokenVocab,
    lam: float,
    max_len: int = 3,
    d_max: int = 64,
    normalize: str = "none",
    missing: str = "zero",
) -> MetaPathProfile:
    """Score every vocabulary token against the anchor.

    Tokens whose node is absent from the (typically pruned) graph get a zero
    score and zero feature row when missing="zero"; missing="error" raises.
    normalize="log1p_max" rescales scores to psi_max * ln(1+c)/ln(1+max c)
    for dense graphs where raw counts would all saturate the clip.
    """
    if not 0.0 <= lam < 1.0:
        raise ValueError(f"lambda must be in [0, 1), got {lam}")
    if not kg.has_node(anchor):
        raise KeyError(f"anchor node {anchor!r} not in graph")
    if missing not in ("zero", "error"):
        raise ValueError(f"missing must be 'zero' or 'error', got {missing!r}")
    if normalize not in ("none", "log1p_max"):
        raise ValueError(f"unknown normalize mode {normalize!r}")
    if d_max < 1:
        raise ValueError("d_max must be >= 1")

    node_to_tokens: dict[str, list[int]] = {}
    for tok in vocab.tokens:
        if not kg.has_node(tok.node_id):
            if missing == "error" and tok.node_id != ABSENT_NODE_ID:
                raise KeyError(f"vocabulary node {tok.node_id!r} not in graph")
            continue
        node_to_tokens.setdefault(tok.node_id, []).append(tok.index)

    v_size = len(vocab)
    per_pattern: dict[tuple[str, ...], np.ndarray] = {}
    for end, rels in _iter_simple_paths(kg, anchor, max_len):
        hits = node_to_tokens.get(end)
        if not hits:
            continue
        col = per_pattern.get(rels)
        if col is None:
            col = per_pattern[rels] = np.zeros(v_size)
        for idx in hits:
            col[idx] += 1.0

    totals = {p: float(c.sum()) for p, c in per_pattern.items()}
    ordering = sorted(per_pattern, key=lambda p: (-totals[p], p))
    if len(ordering) > d_max:
        kept = ordering[: d_max - 1]
        folded = ordering[d_max - 1 :]
        columns = kept + [OTHER_PATTERN]
        other = np.zeros(v_size)
        for p in folded:
            other += per_pattern[p]
        mat_cols = [per_pattern[p] for p in kept] + [other]
    elif ordering:
        columns = list(ordering)
        mat_cols = [per_pattern[p] for p in ordering]
    else:
        columns = [OTHER_PATTERN]
        mat_cols = [np.zeros(v_size)]
    psi_mat = np.stack(mat_cols, axis=1)
    psi_raw = psi_mat.sum(axis=1)

    psi_max = clip_ceiling(lam)
    if normalize == "log1p_max" and lam > 0.0:
        top = float(psi_raw.max())
        if top > 0.0:
            scores = psi_max * np.log1p(psi_raw) / np.log1p(top)
        else:
            scores = np.zeros_like(psi_raw)
        psi_clipped = np.minimum(scores, psi_max)
    else:
        psi_clipped = np.minimum(psi_raw, psi_max)

    return MetaPathProfile(
        anchor=anchor,
        lam=lam,
        psi_raw=psi_raw,
        psi_clipped=psi_clipped,
        psi_max=psi_max,
        Psi=psi_mat,
        patterns=tuple(columns),
        vocab=vocab,
        normalize=normalize,
    )
