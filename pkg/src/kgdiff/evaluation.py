"""Fidelity and privacy metrics.

Fidelity: Gaussian-kernel squared MMD (unbiased U-statistic, reported as-is,
never clamped at zero) over token-count vectors and over pooled inter-visit
gaps, plus train-on-synthetic/test-on-real balanced-accuracy degradation.
Privacy: density-ratio and nearest-distance membership attackers scored by
rank-based AUROC.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .cohort import PatientRecord
from .metapath import TokenVocab


def token_count_vector(rec: PatientRecord, vocab: TokenVocab) -> np.ndarray:
    """Categorical view: counts of every vocabulary token across the record."""
    counts = np.zeros(len(vocab))
    for visit in rec.visits:
        counts[visit.lab] += 1.0
        counts[visit.med] += 1.0
        counts[vocab.ae_present_index if visit.ae else vocab.ae_absent_index] += 1.0
    return counts


def token_count_matrix(records: Sequence[PatientRecord], vocab: TokenVocab) -> np.ndarray:
    return np.stack([token_count_vector(r, vocab) for r in records])


def gap_samples(records: Sequence[PatientRecord]) -> np.ndarray:
    """Continuous view: pooled inter-visit gaps, one 1-D point per gap."""
    gaps = []
    for rec in records:
        times = [v.time for v in rec.visits]
        gaps.extend(b - a for a, b in zip(times, times[1:]))
    return np.asarray(gaps, dtype=float).reshape(-1, 1)


# ---------------------------------------------------------------------------
# Kernel two-sample machinery.
# ---------------------------------------------------------------------------


def _pairwise_sq_dists(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    xx = (x * x).sum(axis=1)
    yy = (y * y).sum(axis=1)
    d2 = xx[:, None] + yy[None, :] - 2.0 * (x @ y.T)
    return np.maximum(d2, 0.0)


def median_heuristic_bandwidth(points: np.ndarray) -> float:
    """Median pairwise Euclidean distance, zero distances excluded."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts.reshape(-1, 1)
    if pts.shape[0] < 2:
        raise ValueError("need at least two points")
    d2 = _pairwise_sq_dists(pts, pts)
    iu = np.triu_indices(pts.shape[0], k=1)
    dists = np.sqrt(d2[iu])
    dists = dists[dists > 0.0]
    if dists.size == 0:
        raise ValueError("all points identical; bandwidth undefined")
    return float(np.median(dists))


def mmd2_unbiased(x: np.ndarray, y: np.ndarray, sigma: float) -> float:
    """Unbiased squared MMD with the Gaussian kernel exp(-||a-b||^2 / (2 sigma^2)).

    The U-statistic drops diagonal terms and may legitimately be negative.
    """
    if sigma <= 0.0:
        raise ValueError("sigma must be > 0")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    if y.ndim == 1:
        y = y.reshape(-1, 1)
    n, m = x.shape[0], y.shape[0]
    if n < 2 or m < 2:
        raise ValueError("need at least two samples on each side")
    gamma = 1.0 / (2.0 * sigma * sigma)
    kxx = np.exp(-gamma * _pairwise_sq_dists(x, x))
    kyy = np.exp(-gamma * _pairwise_sq_dists(y, y))
    kxy = np.exp(-gamma * _pairwise_sq_dists(x, y))
    term_x = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    term_y = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    return float(term_x + term_y - 2.0 * kxy.mean())


@dataclass(frozen=True)
class MmdResult:
    value: float
    sigma: float


def _mmd_on_views(real_view: np.ndarray, synth_view: np.ndarray) -> MmdResult:
    pooled = np.concatenate([real_view, synth_view], axis=0)
    sigma = median_heuristic_bandwidth(pooled)
    return MmdResult(mmd2_unbiased(real_view, synth_view, sigma), sigma)


def cat_mmd(real: Sequence[PatientRecord], synth: Sequence[PatientRecord], vocab: TokenVocab) -> MmdResult:
    """Squared MMD between token-count vectors; bandwidth from the pooled set."""
    return _mmd_on_views(token_count_matrix(real, vocab), token_count_matrix(synth, vocab))


def cont_mmd(real: Sequence[PatientRecord], synth: Sequence[PatientRecord]) -> MmdResult:
    """Squared MMD between pooled inter-visit gap samples."""
    return _mmd_on_views(gap_samples(real), gap_samples(synth))


def mmd_permutation_null(
    x: np.ndarray, y: np.ndarray, sigma: float, n_perm: int, rng: np.random.Generator
) -> np.ndarray:
    """Null distribution of mmd2_unbiased under random relabeling of the pool."""
    pool = np.concatenate([x, y], axis=0)
    n = x.shape[0]
    out = np.empty(n_perm)
    for i in range(n_perm):
        perm = rng.permutation(pool.shape[0])
        out[i] = mmd2_unbiased(pool[perm[:n]], pool[perm[n:]], sigma)
    return out


# ---------------------------------------------------------------------------
# Rank-based AUROC.
# ---------------------------------------------------------------------------


def auroc(scores: Sequence[float], labels: Sequence[bool]) -> float:
    """Mann-Whitney AUROC via midranks; tied scores contribute 1/2."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both classes must be present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    rank_sum = ranks[labels].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# Downstream utility (train on synthetic, test on real).
# ---------------------------------------------------------------------------


def any_ae_label(rec: PatientRecord) -> bool:
    return any(v.ae for v in rec.visits)


def balanced_accuracy(pred: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels, dtype=bool)
    pred = np.asarray(pred, dtype=bool)
    tpr = pred[labels].mean() if labels.any() else 0.0
    tnr = (~pred[~labels]).mean() if (~labels).any() else 0.0
    return float(0.5 * (tpr + tnr))


def _ae_blind_features(records: Sequence[PatientRecord], vocab: TokenVocab) -> np.ndarray:
    """Count features with the AE block zeroed, so the label is not leaked."""
    feats = token_count_matrix(records, vocab)
    feats[:, vocab.ae_absent_index] = 0.0
    feats[:, vocab.ae_present_index] = 0.0
    return feats


def _fit_logreg(x: np.ndarray, y: np.ndarray, steps: int = 300, lr: float = 0.1) -> tuple[np.ndarray, float]:
    """Deterministic class-weighted logistic regression (full-batch Adam, zero init)."""
    n, d = x.shape
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == n:
        return np.zeros(d), (1.0 if n_pos == n else -1.0) * 1e3
    w_pos = n / (2.0 * n_pos)
    w_neg = n / (2.0 * (n - n_pos))
    sample_w = np.where(y, w_pos, w_neg)
    w = np.zeros(d)
    b = 0.0
    m = np.zeros(d + 1)
    v = np.zeros(d + 1)
    for step in range(1, steps + 1):
        z = x @ w + b
        p = 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))
        err = sample_w * (p - y)
        g = np.concatenate([x.T @ err / n, [err.mean()]])
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mh = m / (1.0 - 0.9 ** step)
        vh = v / (1.0 - 0.999 ** step)
        upd = lr * mh / (np.sqrt(vh) + 1e-8)
        w -= upd[:-1]
        b -= upd[-1]
    return w, b


def _standardize(train_x: np.ndarray, *others: np.ndarray):
    mu = train_x.mean(axis=0)
    sd = train_x.std(axis=0)
    sd[sd == 0.0] = 1.0
    return tuple((arr - mu) / sd for arr in (train_x, *others))


class _Reservoir:
    """Fixed random recurrent encoder; only the logistic head is trained."""

    def __init__(self, vocab_size: int, hidden: int = 24, seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE5]))
        self.w_in = rng.uniform(-1, 1, size=(vocab_size, hidden)) / np.sqrt(vocab_size)
        w = rng.uniform(-1, 1, size=(hidden, hidden))
        radius = max(abs(np.linalg.eigvals(w)))
        self.w_rec = 0.9 * w / radius

    def encode(self, records: Sequence[PatientRecord], vocab: TokenVocab) -> np.ndarray:
        states = []
        for rec in records:
            h = np.zeros(self.w_rec.shape[0])
            for visit in rec.visits:
                onehot = np.zeros(self.w_in.shape[0])
                onehot[visit.lab] = 1.0
                onehot[visit.med] = 1.0
                h = np.tanh(onehot @ self.w_in + h @ self.w_rec)
            states.append(h)
        return np.stack(states)


def tstr_delta_bal_acc(
    real_train: Sequence[PatientRecord],
    real_test: Sequence[PatientRecord],
    synth_train: Sequence[PatientRecord],
    vocab: TokenVocab,
    label_fn: Callable[[PatientRecord], bool] = any_ae_label,
    classifier: str = "logreg",
    seed: int = 0,
) -> float:
    """bal_acc(train on real) - bal_acc(train on synthetic), both on real_test."""
    y_test = np.array([label_fn(r) for r in real_test])
    if y_test.all() or not y_test.any():
        raise ValueError("real_test labels are single-class")

    if classifier == "logreg":
        featurize = lambda recs: _ae_blind_features(recs, vocab)
    elif classifier == "reservoir":
        res = _Reservoir(len(vocab), seed=seed)
        featurize = lambda recs: res.encode(recs, vocab)
    else:
        raise ValueError(f"unknown classifier {classifier!r}")

    x_test_raw = featurize(real_test)

    def run(train_recs):
        y = np.array([label_fn(r) for r in train_recs])
        x_raw = featurize(train_recs)
        x, x_test = _standardize(x_raw, x_test_raw)
        w, b = _fit_logreg(x, y)
        pred = x_test @ w + b > 0.0
        return balanced_accuracy(pred, y_test)

    return run(list(real_train)) - run(list(synth_train))


# ---------------------------------------------------------------------------
# Membership inference.
# ---------------------------------------------------------------------------


_BANDWIDTH_FIT_CAP = 128


def _per_dim_bandwidths(points: np.ndarray) -> np.ndarray:
    """Median-heuristic bandwidth per dimension (zero differences excluded).

    Dimensions with no variation fall back to 1.0 so that queries that do
    deviate there are still penalized. At most _BANDWIDTH_FIT_CAP rows enter
    the pairwise scan, keeping the estimate O(1) in the fit-set size.
    """
    pts = points[:_BANDWIDTH_FIT_CAP]
    n, d = pts.shape
    if n < 2:
        raise ValueError("need at least two points to fit bandwidths")
    iu = np.triu_indices(n, k=1)
    diffs = np.abs(pts[:, None, :] - pts[None, :, :])[iu]  # (pairs, d)
    sigmas = np.empty(d)
    for j in range(d):
        nz = diffs[:, j][diffs[:, j] > 0.0]
        sigmas[j] = np.median(nz) if nz.size else 1.0
    return sigmas


def _log_kde_product(
    queries: np.ndarray, points: np.ndarray, sigmas: np.ndarray, exclude_exact: bool = False
) -> np.ndarray:
    """Log density of a product Gaussian KDE at each query.

    With exclude_exact, kernel terms from fit points identical to the query
    are dropped (out-of-sample density for in-sample queries).
    """
    qs = queries / sigmas
    ps = points / sigmas
    d2 = _pairwise_sq_dists(qs, ps)  # (n_query, n_fit)
    log_norm_const = 0.5 * np.log(2.0 * np.pi) * queries.shape[1] + np.log(sigmas).sum()
    exponents = -0.5 * d2
    counts = np.full(queries.shape[0], float(points.shape[0]))
    if exclude_exact:
        exact = d2 <= 1e-12
        keep_counts = points.shape[0] - exact.sum(axis=1)
        usable = keep_counts > 0
        exponents = np.where(exact, -np.inf, exponents)
        counts = np.where(usable, np.maximum(keep_counts, 1), points.shape[0])
        # rows where every fit point matches keep the full sum (cannot hold out)
        if np.any(~usable):
            exponents[~usable] = -0.5 * d2[~usable]
    return logsumexp(exponents, axis=1) - np.log(counts) - log_norm_const


def domias_auroc(
    synth: Sequence[PatientRecord],
    members: Sequence[PatientRecord],
    nonmembers: Sequence[PatientRecord],
    vocab: TokenVocab,
) -> float:
    """Density-ratio attacker: score = log p_synth(x) - log p_reference(x).

    Product-kernel Gaussian KDEs on count vectors; per-dimension bandwidths
    from the median heuristic on the respective fit set. The reference
    density is fitted on the nonmember pool and evaluated out-of-sample
    (exact matches held out), so fresh synthetic data scores at chance.
    AUROC is invariant to the log, so the ratio and its log rank identically.
    """
    if len(members) != len(nonmembers):
        raise ValueError("members and nonmembers must be the same size")
    if len(members) < 10:
        raise ValueError("need at least 10 members and nonmembers")
    synth_x = token_count_matrix(synth, vocab)
    ref_x = token_count_matrix(nonmembers, vocab)
    queries = token_count_matrix(list(members) + list(nonmembers), vocab)
    sig_synth = _per_dim_bandwidths(synth_x)
    sig_ref = _per_dim_bandwidths(ref_x)
    scores = _log_kde_product(queries, synth_x, sig_synth) - _log_kde_product(
        queries, ref_x, sig_ref, exclude_exact=True
    )
    labels = [True] * len(members) + [False] * len(nonmembers)
    return auroc(scores, labels)


@dataclass(frozen=True)
class ShadowAttackResult:
    auroc: float
    threshold: float


def shadow_threshold_auroc(
    synth: Sequence[PatientRecord],
    members: Sequence[PatientRecord],
    nonmembers: Sequence[PatientRecord],
    vocab: TokenVocab,
    shadow: Sequence[PatientRecord] | None = None,
    shadow_fraction: float = 0.05,
) -> ShadowAttackResult:
    """Nearest-synthetic-distance attacker with a shadow-calibrated threshold.

    Score = -distance to the nearest synthetic count vector. When no explicit
    shadow set is given, the leading shadow_fraction of the member pool is
    held out for calibration and excluded from scoring.
    """
    members = list(members)
    nonmembers = list(nonmembers)
    if shadow is None:
        k = max(1, round(shadow_fraction * (len(members) + len(nonmembers))))
        if k >= len(members):
            raise ValueError("member pool too small to carve a shadow set")
        shadow = members[:k]
        members = members[k:]
    if not shadow:
        raise ValueError("shadow set is empty")

    synth_x = token_count_matrix(synth, vocab)

    def score(recs):
        qx = token_count_matrix(recs, vocab)
        return -np.sqrt(_pairwise_sq_dists(qx, synth_x).min(axis=1))

    threshold = float(np.median(score(shadow)))
    scores = np.concatenate([score(members), score(nonmembers)])
    labels = [True] * len(members) + [False] * len(nonmembers)
    return ShadowAttackResult(auroc(scores, labels), threshold)


# ---------------------------------------------------------------------------
# Report container.
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    cat_mmd2: float
    cat_sigma: float
    cont_mmd2: float
    cont_sigma: float
    delta_bal_acc: float
    mia: dict[str, float]
    shadow_threshold: float
    seed: int
    config_digest: str

    def __post_init__(self):
        for name, value in self.mia.items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"AUROC for {name} outside [0, 1]")

    def to_json_dict(self) -> dict:
        return {
            "cat_mmd2": self.cat_mmd2,
            "cat_sigma": self.cat_sigma,
            "cont_mmd2": self.cont_mmd2,
            "cont_sigma": self.cont_sigma,
            "delta_bal_acc": self.delta_bal_acc,
            "mia": dict(sorted(self.mia.items())),
            "shadow_threshold": self.shadow_threshold,
            "seed": self.seed,
            "config_digest": self.config_digest,
        }

    def to_table(self) -> str:
        rows = [
            ("Cat-MMD^2", f"{self.cat_mmd2:.6f}"),
            ("Cont-MMD^2", f"{self.cont_mmd2:.6f}"),
            ("Delta Bal-Acc", f"{self.delta_bal_acc:.4f}"),
        ]
        rows += [(f"MIA AUROC ({k})", f"{v:.4f}") for k, v in sorted(self.mia.items())]
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{name:<{width}}  {value}" for name, value in rows)

    def save(self, json_path, text_path=None) -> None:
        with open(json_path, "w", encoding="utf-8") as f:
            json.dump(self.to_json_dict(), f, sort_keys=True, indent=2)
            f.write("\n")
        if text_path is not None:
            with open(text_path, "w", encoding="utf-8") as f:
                f.write(self.to_table() + "\n")
