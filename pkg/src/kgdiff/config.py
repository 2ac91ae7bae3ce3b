"""Declarative run configuration: INI-style sections, full-file validation.

parse_config returns the typed config plus a list of every violation found,
so callers can report them all at once instead of failing on the first.
"""

from __future__ import annotations

import configparser
import datetime
import hashlib
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .kg import RELATION_SCHEMA, NodeKind


@dataclass(frozen=True)
class RunSection:
    seed: int = 7
    out: str = "runs/demo"
    workers: int = 1


@dataclass(frozen=True)
class KgSection:
    n_nodes: int = 1200
    share_disease: float = 0.27
    share_phenotype: float = 0.18
    share_drug: float = 0.22
    share_lab: float = 0.12
    share_adverse_event: float = 0.16
    share_gene: float = 0.05
    deg_has_phenotype: float = 4.0
    deg_assoc_gene: float = 2.0
    deg_indicated_drug: float = 2.5
    deg_abnormal_lab: float = 4.0
    deg_phenotype_lab: float = 2.0
    deg_targeted_by: float = 2.0
    deg_causes_ae: float = 1.5
    deg_phenotype_of: float = 1.2
    validity_fraction: float = 0.15

    def shares(self) -> dict[NodeKind, float]:
        return {
            NodeKind.DISEASE: self.share_disease,
            NodeKind.PHENOTYPE: self.share_phenotype,
            NodeKind.DRUG: self.share_drug,
            NodeKind.LAB_TEST: self.share_lab,
            NodeKind.ADVERSE_EVENT: self.share_adverse_event,
            NodeKind.GENE: self.share_gene,
        }

    def degrees(self) -> dict[str, float]:
        return {
            "has_phenotype": self.deg_has_phenotype,
            "assoc_gene": self.deg_assoc_gene,
            "indicated_drug": self.deg_indicated_drug,
            "abnormal_lab": self.deg_abnormal_lab,
            "phenotype_lab": self.deg_phenotype_lab,
            "targeted_by": self.deg_targeted_by,
            "causes_ae": self.deg_causes_ae,
            "phenotype_of": self.deg_phenotype_of,
        }


@dataclass(frozen=True)
class CohortSection:
    anchor: str = "auto"
    n_patients: int = 300
    n_labs: int = 137
    n_meds: int = 86
    visit_mean: float = 9.4
    visit_shape: float = 35.0
    ae_rate: float = 0.124
    ae_lift: float = 3.0
    gamma: float = 1.0
    gap_log_mu: float = 2.6
    gap_log_sigma: float = 0.7
    enroll_span_days: float = 1460.0
    l_max: int = 32


@dataclass(frozen=True)
class ProfileSection:
    lam: float = 0.3
    max_len: int = 3
    d_max: int = 64
    normalize: str = "none"
    respect_validity: bool = False
    reference_date: str = ""
    max_hops: int = 3


@dataclass(frozen=True)
class ScheduleSection:
    beta_min: float = 0.1
    beta_max: float = 20.0
    horizon_steps: int = 1000


@dataclass(frozen=True)
class NetSection:
    hidden: int = 32
    blocks: int = 3
    heads: int = 4
    dtype: str = "float64"


@dataclass(frozen=True)
class TrainSection:
    peak_lr: float = 2e-3
    total_steps: int = 1500
    warmup_frac: float = 0.05
    batch: int = 16
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    anneal_frac: float = 0.1
    log_every: int = 50
    ckpt_every: int = 0


@dataclass(frozen=True)
class SampleSection:
    step_size: float = 1e-3
    drift_mode: str = "vp_consistent"
    noise: bool = True
    n_trajectories: int = 64


@dataclass(frozen=True)
class EvalSection:
    classifier: str = "logreg"
    mmd_reference: str = "test"
    shadow_fraction: float = 0.05


@dataclass(frozen=True)
class SweepSection:
    lambdas: tuple[float, ...] = (0.5, 0.3, 0.1, 0.0)
    seeds: int = 5
    train_steps: int = 0          # 0 means inherit train.total_steps
    n_trajectories: int = 0       # 0 means inherit sample.n_trajectories


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    kg: KgSection = field(default_factory=KgSection)
    cohort: CohortSection = field(default_factory=CohortSection)
    profile: ProfileSection = field(default_factory=ProfileSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    net: NetSection = field(default_factory=NetSection)
    train: TrainSection = field(default_factory=TrainSection)
    sample: SampleSection = field(default_factory=SampleSection)
    eval: EvalSection = field(default_factory=EvalSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def digest(self) -> str:
        """Stable digest of the effective configuration (overrides included)."""
        return hashlib.sha256(render_config(self).encode()).hexdigest()


_SECTION_TYPES = {
    "run": RunSection,
    "kg": KgSection,
    "cohort": CohortSection,
    "profile": ProfileSection,
    "schedule": ScheduleSection,
    "net": NetSection,
    "train": TrainSection,
    "sample": SampleSection,
    "eval": EvalSection,
    "sweep": SweepSection,
}

# config keys that differ from the dataclass field name
_KEY_ALIASES = {("profile", "lambda"): "lam"}
_FIELD_ALIASES = {("profile", "lam"): "lambda"}


def _parse_value(raw: str, template, section: str, key: str, problems: list[str]):
    raw = raw.strip()
    try:
        if isinstance(template, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(template, int):
            return int(raw)
        if isinstance(template, float):
            return float(raw)
        if isinstance(template, tuple):
            return tuple(float(p) for p in raw.split(",") if p.strip())
        return raw
    except ValueError as exc:
        problems.append(f"[{section}] {key}: {exc}")
        return template


def parse_config(text: str) -> tuple[RunConfig, list[str]]:
    problems: list[str] = []
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        return RunConfig(), [f"config parse failure: {exc}"]

    sections: dict[str, object] = {}
    for name, cls in _SECTION_TYPES.items():
        template = cls()
        values = {}
        if parser.has_section(name):
            known = {f.name for f in fields(cls)}
            for key, raw in parser.items(name):
                field_name = _KEY_ALIASES.get((name, key), key)
                if field_name not in known:
                    problems.append(f"[{name}] unknown key {key!r}")
                    continue
                values[field_name] = _parse_value(
                    raw, getattr(template, field_name), name, key, problems
                )
        try:
            sections[name] = cls(**values)
        except (TypeError, ValueError) as exc:
            problems.append(f"[{name}] {exc}")
            sections[name] = template
    for name in parser.sections():
        if name not in _SECTION_TYPES:
            problems.append(f"unknown section [{name}]")

    cfg = RunConfig(**sections)
    problems.extend(validate(cfg))
    return cfg, problems


def load_config(path: str | Path) -> tuple[RunConfig, list[str]]:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def validate(cfg: RunConfig) -> list[str]:
    """Every constraint violation in the config, not just the first."""
    p: list[str] = []
    if cfg.run.workers < 1:
        p.append("[run] workers must be >= 1")
    if cfg.kg.n_nodes < 1:
        p.append("[kg] n_nodes must be >= 1")
    share_sum = sum(cfg.kg.shares().values())
    if abs(share_sum - 1.0) > 1e-6:
        p.append(f"[kg] kind shares must sum to 1 (got {share_sum:.6f})")
    for rel, deg in cfg.kg.degrees().items():
        if deg < 0:
            p.append(f"[kg] deg_{rel} must be >= 0")
    if not 0.0 <= cfg.kg.validity_fraction <= 1.0:
        p.append("[kg] validity_fraction must be in [0, 1]")
    if cfg.cohort.n_patients < 10:
        p.append("[cohort] n_patients must be >= 10 for non-empty splits")
    if cfg.cohort.n_labs < 1 or cfg.cohort.n_meds < 1:
        p.append("[cohort] n_labs and n_meds must be >= 1")
    if not 0.0 <= cfg.cohort.ae_rate <= 1.0:
        p.append("[cohort] ae_rate must be in [0, 1]")
    if cfg.cohort.gamma < 0:
        p.append("[cohort] gamma must be >= 0")
    if cfg.cohort.l_max < 1:
        p.append("[cohort] l_max must be >= 1")
    if not 0.0 <= cfg.profile.lam < 1.0:
        p.append("[profile] lambda must be in [0, 1)")
    if cfg.profile.max_len < 1:
        p.append("[profile] max_len must be >= 1")
    if cfg.profile.d_max < 1:
        p.append("[profile] d_max must be >= 1")
    if cfg.profile.normalize not in ("none", "log1p_max"):
        p.append("[profile] normalize must be none or log1p_max")
    if cfg.profile.max_hops < 0:
        p.append("[profile] max_hops must be >= 0")
    if cfg.profile.respect_validity:
        try:
            datetime.date.fromisoformat(cfg.profile.reference_date)
        except ValueError:
            p.append("[profile] respect_validity needs an ISO reference_date")
    if cfg.schedule.beta_min <= 0:
        p.append("[schedule] beta_min must be > 0")
    if cfg.schedule.beta_max < cfg.schedule.beta_min:
        p.append("[schedule] beta_max must be >= beta_min")
    if cfg.schedule.horizon_steps < 1:
        p.append("[schedule] horizon_steps must be >= 1")
    if cfg.net.hidden < 2 or cfg.net.hidden % 2 != 0:
        p.append("[net] hidden must be an even integer >= 2")
    if cfg.net.heads < 1 or cfg.net.hidden % cfg.net.heads != 0:
        p.append("[net] hidden must be divisible by heads")
    if cfg.net.blocks < 1:
        p.append("[net] blocks must be >= 1")
    if cfg.net.dtype not in ("float64", "float32"):
        p.append("[net] dtype must be float64 or float32")
    if cfg.train.total_steps < 0:
        p.append("[train] total_steps must be >= 0")
    if not 0.0 <= cfg.train.warmup_frac < 1.0:
        p.append("[train] warmup_frac must be in [0, 1)")
    if cfg.train.batch < 1:
        p.append("[train] batch must be >= 1")
    if not 0.0 <= cfg.train.anneal_frac <= 1.0:
        p.append("[train] anneal_frac must be in [0, 1]")
    if not 0.0 < cfg.sample.step_size <= 1.0:
        p.append("[sample] step_size must be in (0, 1]")
    if cfg.sample.drift_mode not in ("vp_consistent", "paper_literal"):
        p.append("[sample] drift_mode must be vp_consistent or paper_literal")
    if cfg.sample.n_trajectories < 0:
        p.append("[sample] n_trajectories must be >= 0")
    if cfg.eval.classifier not in ("logreg", "reservoir"):
        p.append("[eval] classifier must be logreg or reservoir")
    if cfg.eval.mmd_reference not in ("train", "test"):
        p.append("[eval] mmd_reference must be train or test")
    if not 0.0 < cfg.eval.shadow_fraction < 1.0:
        p.append("[eval] shadow_fraction must be in (0, 1)")
    for lam in cfg.sweep.lambdas:
        if not 0.0 <= lam < 1.0:
            p.append(f"[sweep] lambda {lam} outside [0, 1)")
    if cfg.sweep.seeds < 1:
        p.append("[sweep] seeds must be >= 1")
    return p


def render_config(cfg: RunConfig) -> str:
    """Canonical text form of the effective config (used for digests)."""
    out = io.StringIO()
    for name, section in (
        ("run", cfg.run), ("kg", cfg.kg), ("cohort", cfg.cohort),
        ("profile", cfg.profile), ("schedule", cfg.schedule), ("net", cfg.net),
        ("train", cfg.train), ("sample", cfg.sample), ("eval", cfg.eval),
        ("sweep", cfg.sweep),
    ):
        out.write(f"[{name}]\n")
        for f in fields(section):
            key = _FIELD_ALIASES.get((name, f.name), f.name)
            value = getattr(section, f.name)
            if isinstance(value, tuple):
                value = ",".join(repr(v) for v in value)
            out.write(f"{key} = {value}\n")
    return out.getvalue()
