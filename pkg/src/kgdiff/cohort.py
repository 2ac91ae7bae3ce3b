"""Ground-truth cohort simulator with a known, graph-aligned token law.

Per visit, lab and medication tokens are drawn from softmax(gamma * score)
over their field blocks, where score is the raw (unclipped) anchor-to-token
path count; the adverse-event flag fires more often when the drawn
medication has an outgoing causes_ae edge. The emission law is therefore
available in closed form for oracle tests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .denoiser import TrajectoryTensor
from .kg import KnowledgeGraph, NodeKind
from .metapath import (
    ABSENT_NODE_ID,
    FIELD_AE,
    FIELD_LAB,
    FIELD_MED,
    MetaPathProfile,
    Token,
    TokenVocab,
    _iter_simple_paths,
    compute_profile,
)


@dataclass(frozen=True)
class CohortConfig:
    anchor: str = ""
    n_patients: int = 300
    n_labs: int = 137
    n_meds: int = 86
    visit_nb_mean: float = 9.4    # negative-binomial mean, targets median ~9.1
    visit_nb_size: float = 35.0   # dispersion, targets IQR ~4.3; inf = exactly mean visits
    ae_rate: float = 0.124
    ae_lift: float = 3.0
    gamma: float = 1.0
    gap_log_mu: float = 2.6
    gap_log_sigma: float = 0.7
    enroll_span_days: float = 1460.0
    l_max: int = 32
    max_len: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.n_patients < 1:
            raise ValueError("n_patients must be >= 1")
        if not 0.0 <= self.ae_rate <= 1.0:
            raise ValueError("ae_rate must be in [0, 1]")
        if self.gamma < 0.0:
            raise ValueError("gamma must be >= 0")
        if self.ae_lift <= 0.0:
            raise ValueError("ae_lift must be > 0")


@dataclass(frozen=True)
class Visit:
    time: float
    lab: int
    med: int
    ae: bool


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    visits: tuple[Visit, ...]

    def __post_init__(self):
        times = [v.time for v in self.visits]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError(f"visit times must be strictly increasing in {self.patient_id}")


@dataclass(frozen=True)
class EmpiricalGapDistribution:
    """Sorted multiset of observed inter-visit gaps in days (all > 0)."""

    gaps: np.ndarray

    def __post_init__(self):
        gaps = np.sort(np.asarray(self.gaps, dtype=float))
        object.__setattr__(self, "gaps", gaps)
        if gaps.size == 0:
            raise ValueError("gap distribution needs at least one observed gap")
        if np.any(gaps <= 0.0):
            raise ValueError("gaps must be positive")

    def resample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.gaps[rng.integers(0, self.gaps.size, size=n)]

    @property
    def mean(self) -> float:
        return float(self.gaps.mean())


def pick_anchor(kg: KnowledgeGraph) -> str:
    """Default anchor: the disease with the most outgoing edges (ties by id)."""
    diseases = kg.nodes_of_kind(NodeKind.DISEASE)
    if not diseases:
        raise ValueError("graph has no disease nodes")
    return min(diseases, key=lambda n: (-len(kg.out_edges(n.id)), n.id)).id


def build_vocab(kg: KnowledgeGraph, cfg: CohortConfig, anchor: str) -> TokenVocab:
    """Lab block, med block, then the two-flag adverse-event block.

    Codes observed in a disease cohort are enriched for entities linked to
    that disease, so each block takes the n best anchor-connected nodes of
    its kind (path count desc, id asc) and lists them in id order. The
    set-flag token maps to the best-connected adverse-event node; the
    clear-flag token maps to a reserved id outside the graph, so it always
    scores zero.
    """
    reach: dict[str, int] = {}
    for end, _ in _iter_simple_paths(kg, anchor, cfg.max_len):
        reach[end] = reach.get(end, 0) + 1

    def pick(kind: NodeKind, n: int) -> list[str]:
        ids = [node.id for node in kg.nodes_of_kind(kind)]
        if len(ids) < n:
            raise ValueError(f"graph has {len(ids)} {kind.value} nodes, config wants {n}")
        ranked = sorted(ids, key=lambda i: (-reach.get(i, 0), i))
        return sorted(ranked[:n])

    labs = pick(NodeKind.LAB_TEST, cfg.n_labs)
    meds = pick(NodeKind.DRUG, cfg.n_meds)
    aes = sorted(n.id for n in kg.nodes_of_kind(NodeKind.ADVERSE_EVENT))
    ae_node = min(aes, key=lambda a: (-reach.get(a, 0), a)) if aes else ABSENT_NODE_ID

    tokens: list[Token] = []
    for nid in labs:
        tokens.append(Token(len(tokens), FIELD_LAB, nid, nid))
    for nid in meds:
        tokens.append(Token(len(tokens), FIELD_MED, nid, nid))
    tokens.append(Token(len(tokens), FIELD_AE, ABSENT_NODE_ID, "ae:clear"))
    tokens.append(Token(len(tokens), FIELD_AE, ae_node, "ae:set"))
    return TokenVocab(tokens)


@dataclass(frozen=True)
class EmissionLaw:
    """Closed-form per-visit token law implied by (graph, config)."""

    p_lab: np.ndarray            # over the lab block
    p_med: np.ndarray            # over the med block
    med_has_ae_edge: np.ndarray  # bool per med token
    p_ae_edge: float
    p_ae_no_edge: float

    @property
    def overall_ae_rate(self) -> float:
        f = float(self.p_med @ self.med_has_ae_edge)
        return f * self.p_ae_edge + (1.0 - f) * self.p_ae_no_edge


def _block_softmax(scores: np.ndarray, gamma: float) -> np.ndarray:
    z = gamma * scores
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def emission_law(kg: KnowledgeGraph, cfg: CohortConfig, vocab: TokenVocab, anchor: str) -> EmissionLaw:
    profile = compute_profile(kg, anchor, vocab, lam=0.0, max_len=cfg.max_len)
    raw = profile.psi_raw
    lab_block = vocab.block(FIELD_LAB)
    med_block = vocab.block(FIELD_MED)
    p_lab = _block_softmax(raw[lab_block], cfg.gamma)
    p_med = _block_softmax(raw[med_block], cfg.gamma)

    med_tokens = vocab.block_tokens(FIELD_MED)
    has_edge = np.array(
        [bool(kg.out_edges(t.node_id, "causes_ae")) if kg.has_node(t.node_id) else False
         for t in med_tokens]
    )
    # calibrate the two flag rates so the blended rate equals ae_rate exactly
    # while keeping the with-edge/without-edge ratio at ae_lift
    f = float(p_med @ has_edge)
    if f >= 1.0 - 1e-12:
        p_edge = cfg.ae_rate
        p_no = cfg.ae_rate
    elif f <= 1e-12:
        p_edge = min(1.0, cfg.ae_rate * cfg.ae_lift)
        p_no = cfg.ae_rate
    else:
        p_no = cfg.ae_rate / (f * cfg.ae_lift + 1.0 - f)
        p_edge = min(1.0, cfg.ae_lift * p_no)
    return EmissionLaw(p_lab, p_med, has_edge, p_edge, p_no)


def simulate_cohort(
    kg: KnowledgeGraph, cfg: CohortConfig, vocab: TokenVocab | None = None
) -> list[PatientRecord]:
    """Sample n_patients records; deterministic for a fixed (kg, cfg)."""
    anchor = cfg.anchor or pick_anchor(kg)
    if not kg.has_node(anchor):
        raise KeyError(f"anchor node {anchor!r} not in graph")
    if vocab is None:
        vocab = build_vocab(kg, cfg, anchor)
    law = emission_law(kg, cfg, vocab, anchor)
    lab_start = vocab.block(FIELD_LAB).start
    med_start = vocab.block(FIELD_MED).start

    degenerate = np.isinf(cfg.visit_nb_size)
    nb_p = None if degenerate else cfg.visit_nb_size / (cfg.visit_nb_size + cfg.visit_nb_mean)
    records: list[PatientRecord] = []
    for i in range(cfg.n_patients):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xC0, i]))
        if degenerate:
            n_visits = max(1, round(cfg.visit_nb_mean))
        else:
            n_visits = max(1, int(rng.negative_binomial(cfg.visit_nb_size, nb_p)))
        t = rng.uniform(0.0, cfg.enroll_span_days)
        visits = []
        for _ in range(n_visits):
            lab = lab_start + int(rng.choice(law.p_lab.size, p=law.p_lab))
            med_off = int(rng.choice(law.p_med.size, p=law.p_med))
            p_ae = law.p_ae_edge if law.med_has_ae_edge[med_off] else law.p_ae_no_edge
            ae = bool(rng.random() < p_ae)
            visits.append(Visit(t, lab, med_start + med_off, ae))
            t += max(1e-3, float(rng.lognormal(cfg.gap_log_mu, cfg.gap_log_sigma)))
        records.append(PatientRecord(f"p{i:05d}", tuple(visits)))
    return records


def split_cohort(
    records: list[PatientRecord], ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
) -> tuple[list[PatientRecord], list[PatientRecord], list[PatientRecord]]:
    """Chronological patient-level split: sort by first-event time, cut contiguously."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must sum to 1")
    n = len(records)
    n_train = int(ratios[0] * n)
    n_valid = int(ratios[1] * n)
    n_test = n - n_train - n_valid
    if min(n_train, n_valid, n_test) < 1:
        raise ValueError(f"too few patients ({n}) for non-empty splits")
    ordered = sorted(records, key=lambda r: (r.visits[0].time if r.visits else np.inf, r.patient_id))
    return (
        ordered[:n_train],
        ordered[n_train : n_train + n_valid],
        ordered[n_train + n_valid :],
    )


def encode_record(rec: PatientRecord, vocab: TokenVocab, l_max: int) -> TrajectoryTensor:
    """One-hot rows per visit (lab, med, AE flag); oldest visits drop first."""
    v = len(vocab)
    values = np.zeros((l_max, v))
    mask = np.zeros(l_max, dtype=bool)
    visits = rec.visits[-l_max:]  # keep the most recent events
    for row, visit in enumerate(visits):
        for tok in (visit.lab, visit.med):
            if not 0 <= tok < v:
                raise ValueError(f"unknown token {tok} in {rec.patient_id}")
        values[row, visit.lab] = 1.0
        values[row, visit.med] = 1.0
        ae_tok = vocab.ae_present_index if visit.ae else vocab.ae_absent_index
        values[row, ae_tok] = 1.0
        mask[row] = True
    return TrajectoryTensor(values, mask)


def encode_records(records: list[PatientRecord], vocab: TokenVocab, l_max: int) -> list[TrajectoryTensor]:
    return [encode_record(r, vocab, l_max) for r in records]


def fit_gap_distribution(records: list[PatientRecord]) -> EmpiricalGapDistribution:
    """All consecutive inter-visit gaps pooled across records."""
    gaps = []
    for rec in records:
        times = [v.time for v in rec.visits]
        gaps.extend(b - a for a, b in zip(times, times[1:]))
    if not gaps:
        raise ValueError("no record has two or more visits; cannot fit gaps")
    return EmpiricalGapDistribution(np.asarray(gaps))


def record_lengths(records: list[PatientRecord]) -> list[int]:
    return [len(r.visits) for r in records]


# ---------------------------------------------------------------------------
# JSON Lines round trip (same event schema the generator emits).
# ---------------------------------------------------------------------------


def records_to_jsonl(path: str | Path, records: list[PatientRecord], vocab: TokenVocab) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            events = [
                {
                    "t": v.time,
                    "lab": vocab.tokens[v.lab].code,
                    "med": vocab.tokens[v.med].code,
                    "ae": v.ae,
                }
                for v in rec.visits
            ]
            f.write(json.dumps({"id": rec.patient_id, "events": events}, sort_keys=True))
            f.write("\n")


def records_from_jsonl(path: str | Path, vocab: TokenVocab) -> list[PatientRecord]:
    records = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            doc = json.loads(line)
            visits = tuple(
                Visit(
                    float(e["t"]),
                    vocab.by_code(e["lab"]).index,
                    vocab.by_code(e["med"]).index,
                    bool(e["ae"]),
                )
                for e in doc["events"]
            )
            records.append(PatientRecord(str(doc["id"]), visits))
    return records
