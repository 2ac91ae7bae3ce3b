import numpy as np
import pytest
from scipy.stats import chisquare

from kgdiff.cohort import (
    CohortConfig,
    EmpiricalGapDistribution,
    PatientRecord,
    Visit,
    build_vocab,
    emission_law,
    encode_record,
    encode_records,
    fit_gap_distribution,
    pick_anchor,
    record_lengths,
    records_from_jsonl,
    records_to_jsonl,
    simulate_cohort,
    split_cohort,
)
from kgdiff.kg import KgGenConfig, KgNode, KnowledgeGraph, NodeKind, TypedEdge, generate_toy_kg
from kgdiff.metapath import FIELD_AE, FIELD_LAB, FIELD_MED
from kgdiff.sampler import decode


def _toy_kg(seed=7, n=220):
    shares = {
        NodeKind.DISEASE: 0.25, NodeKind.PHENOTYPE: 0.18, NodeKind.DRUG: 0.22,
        NodeKind.LAB_TEST: 0.14, NodeKind.ADVERSE_EVENT: 0.16, NodeKind.GENE: 0.05,
    }
    degs = {
        "has_phenotype": 3.0, "assoc_gene": 1.5, "indicated_drug": 2.0,
        "abnormal_lab": 3.0, "phenotype_lab": 1.5, "targeted_by": 1.5,
        "causes_ae": 1.5, "phenotype_of": 0.8,
    }
    return generate_toy_kg(KgGenConfig.from_shares(n, shares, degs), seed)


def _cfg(**kw):
    base = dict(n_patients=30, n_labs=12, n_meds=8, l_max=12, seed=11)
    base.update(kw)
    return CohortConfig(**base)


def test_vocab_layout():
    kg = _toy_kg()
    anchor = pick_anchor(kg)
    vocab = build_vocab(kg, _cfg(), anchor)
    assert len(vocab) == 12 + 8 + 2
    assert [t.index for t in vocab.tokens] == list(range(len(vocab)))
    assert len(vocab.block_tokens(FIELD_LAB)) == 12
    assert len(vocab.block_tokens(FIELD_MED)) == 8
    assert len(vocab.block_tokens(FIELD_AE)) == 2
    assert vocab.ae_present_index == vocab.ae_absent_index + 1


def test_simulate_deterministic():
    kg = _toy_kg()
    cfg = _cfg()
    a = simulate_cohort(kg, cfg)
    b = simulate_cohort(kg, cfg)
    assert a == b
    c = simulate_cohort(kg, _cfg(seed=12))
    assert a != c


def test_simulate_single_patient_fixed_visits():
    kg = _toy_kg()
    # degenerate visit distribution: huge size, mean 3 -> tight around 3
    cfg = _cfg(n_patients=1, visit_nb_mean=3.0, visit_nb_size=float("inf"))
    (rec,) = simulate_cohort(kg, cfg)
    assert len(rec.visits) == 3


def test_simulate_gamma_zero_is_uniform_per_block():
    kg = _toy_kg()
    cfg = _cfg(n_patients=300, gamma=0.0, visit_nb_mean=40.0, seed=0)
    records = simulate_cohort(kg, cfg)
    vocab = build_vocab(kg, cfg, pick_anchor(kg))
    lab_counts = np.zeros(12)
    med_counts = np.zeros(8)
    lab_start = vocab.block(FIELD_LAB).start
    med_start = vocab.block(FIELD_MED).start
    for rec in records:
        for v in rec.visits:
            lab_counts[v.lab - lab_start] += 1
            med_counts[v.med - med_start] += 1
    assert lab_counts.sum() > 1e4
    assert chisquare(lab_counts).pvalue > 0.01
    assert chisquare(med_counts).pvalue > 0.01


def test_simulate_matches_analytic_law():
    kg = _toy_kg()
    cfg = _cfg(n_patients=400, visit_nb_mean=50.0, seed=5, gamma=1.0)
    anchor = pick_anchor(kg)
    vocab = build_vocab(kg, cfg, anchor)
    law = emission_law(kg, cfg, vocab, anchor)
    records = simulate_cohort(kg, cfg, vocab)
    lab_counts = np.zeros(law.p_lab.size)
    lab_start = vocab.block(FIELD_LAB).start
    n_vis = 0
    ae_hits = 0
    for rec in records:
        for v in rec.visits:
            lab_counts[v.lab - lab_start] += 1
            ae_hits += v.ae
            n_vis += 1
    assert n_vis > 1e4
    emp = lab_counts / n_vis
    tv = 0.5 * np.abs(emp - law.p_lab).sum()
    assert tv < 0.02
    # blended adverse-event rate is calibrated to the configured target
    assert law.overall_ae_rate == pytest.approx(cfg.ae_rate, abs=1e-12)
    assert ae_hits / n_vis == pytest.approx(cfg.ae_rate, abs=0.02)


def test_ae_rate_shaped_by_drug_edge():
    kg = _toy_kg()
    cfg = _cfg(ae_lift=4.0)
    anchor = pick_anchor(kg)
    vocab = build_vocab(kg, cfg, anchor)
    law = emission_law(kg, cfg, vocab, anchor)
    if law.med_has_ae_edge.any() and not law.med_has_ae_edge.all():
        assert law.p_ae_edge == pytest.approx(4.0 * law.p_ae_no_edge, rel=1e-9)


# --- splits ------------------------------------------------------------------


def _fake_records(n, rng):
    records = []
    for i in range(n):
        t0 = float(rng.uniform(0, 1000))
        times = np.cumsum([t0, *rng.uniform(0.5, 30, size=rng.integers(1, 6))])
        visits = tuple(Visit(float(t), 0, 1, False) for t in times)
        records.append(PatientRecord(f"p{i:04d}", visits))
    return records


def test_split_sizes_for_ten_patients():
    rng = np.random.default_rng(0)
    tr, va, te = split_cohort(_fake_records(10, rng))
    assert (len(tr), len(va), len(te)) == (8, 1, 1)


def test_split_is_partition_and_chronological():
    rng = np.random.default_rng(1)
    records = _fake_records(37, rng)
    tr, va, te = split_cohort(records)
    ids = [r.patient_id for part in (tr, va, te) for r in part]
    assert sorted(ids) == sorted(r.patient_id for r in records)
    assert len(set(ids)) == len(ids)
    start = lambda recs: [r.visits[0].time for r in recs]
    assert max(start(tr)) <= min(start(va))
    assert max(start(va)) <= min(start(te))


def test_split_order_invariant():
    rng = np.random.default_rng(2)
    records = _fake_records(25, rng)
    base = split_cohort(records)
    shuffled = list(records)
    np.random.default_rng(3).shuffle(shuffled)
    again = split_cohort(shuffled)
    for a, b in zip(base, again):
        assert [r.patient_id for r in a] == [r.patient_id for r in b]


def test_split_too_few_patients():
    rng = np.random.default_rng(3)
    with pytest.raises(ValueError, match="too few"):
        split_cohort(_fake_records(5, rng))


# --- encoding ----------------------------------------------------------------


def test_encode_empty_record_all_false_mask():
    kg = _toy_kg()
    vocab = build_vocab(kg, _cfg(), pick_anchor(kg))
    tensor = encode_record(PatientRecord("p0", ()), vocab, 8)
    assert not tensor.mask.any()
    assert not tensor.values.any()


def test_encode_three_visits_padding():
    kg = _toy_kg()
    cfg = _cfg()
    vocab = build_vocab(kg, cfg, pick_anchor(kg))
    lab0 = vocab.block(FIELD_LAB).start
    med0 = vocab.block(FIELD_MED).start
    rec = PatientRecord("p0", tuple(Visit(float(i), lab0 + i, med0 + i, i == 1) for i in range(3)))
    tensor = encode_record(rec, vocab, 8)
    assert tensor.mask.tolist() == [True] * 3 + [False] * 5
    for row in range(3):
        assert tensor.values[row].sum() == 3.0  # one-hot per field block
        assert tensor.values[row, lab0 + row] == 1.0
        assert tensor.values[row, med0 + row] == 1.0
    assert tensor.values[1, vocab.ae_present_index] == 1.0
    assert tensor.values[0, vocab.ae_absent_index] == 1.0


def test_encode_truncates_keeping_most_recent():
    kg = _toy_kg()
    cfg = _cfg()
    vocab = build_vocab(kg, cfg, pick_anchor(kg))
    lab0 = vocab.block(FIELD_LAB).start
    med0 = vocab.block(FIELD_MED).start
    rec = PatientRecord("p0", tuple(Visit(float(i), lab0 + (i % 5), med0, False) for i in range(10)))
    tensor = encode_record(rec, vocab, 4)
    assert tensor.mask.all()
    # rows correspond to the last four visits (i = 6..9)
    for row, i in enumerate(range(6, 10)):
        assert tensor.values[row, lab0 + (i % 5)] == 1.0


def test_encode_decode_roundtrip_fuzz():
    kg = _toy_kg()
    cfg = _cfg(n_patients=1000, seed=21)
    vocab = build_vocab(kg, cfg, pick_anchor(kg))
    records = simulate_cohort(kg, cfg, vocab)
    rng = np.random.default_rng(4)
    for rec in records:
        tensor = encode_record(rec, vocab, 12)
        triples = decode(tensor.values, tensor.mask, vocab)
        kept = rec.visits[-12:]
        assert len(triples) == len(kept)
        for visit, (lab, med, ae) in zip(kept, triples):
            assert (visit.lab, visit.med, visit.ae) == (lab, med, ae)


def test_encode_rejects_unknown_token():
    kg = _toy_kg()
    vocab = build_vocab(kg, _cfg(), pick_anchor(kg))
    rec = PatientRecord("p0", (Visit(0.0, 9999, 0, False),))
    with pytest.raises(ValueError, match="unknown token"):
        encode_record(rec, vocab, 4)


# --- gaps ---------------------------------------------------------------------


def test_fit_gaps_hand_case():
    rec = PatientRecord("p0", (Visit(0.0, 0, 1, False), Visit(2.0, 0, 1, False), Visit(5.0, 0, 1, False)))
    dist = fit_gap_distribution([rec])
    assert dist.gaps.tolist() == [2.0, 3.0]


def test_fit_gaps_requires_multivisit_record():
    rec = PatientRecord("p0", (Visit(0.0, 0, 1, False),))
    with pytest.raises(ValueError, match="two or more"):
        fit_gap_distribution([rec])


def test_gap_resample_mean_within_three_se():
    kg = _toy_kg()
    records = simulate_cohort(kg, _cfg(n_patients=100, seed=31))
    dist = fit_gap_distribution(records)
    rng = np.random.default_rng(5)
    draws = dist.resample(100_000, rng)
    se = dist.gaps.std(ddof=1) / np.sqrt(draws.size)
    assert abs(draws.mean() - dist.mean) < 3 * se + 1e-9


def test_visit_median_near_target_over_seeds():
    kg = _toy_kg()
    medians = []
    for seed in range(50):
        records = simulate_cohort(kg, _cfg(n_patients=20, seed=seed))
        medians.append(np.median(record_lengths(records)))
    assert 7.0 <= np.median(medians) <= 11.0


def test_jsonl_roundtrip(tmp_path):
    kg = _toy_kg()
    cfg = _cfg(n_patients=15, seed=41)
    vocab = build_vocab(kg, cfg, pick_anchor(kg))
    records = simulate_cohort(kg, cfg, vocab)
    path = tmp_path / "cohort.jsonl"
    records_to_jsonl(path, records, vocab)
    back = records_from_jsonl(path, vocab)
    assert back == records
