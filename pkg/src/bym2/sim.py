"""Synthetic scenarios and the replicated model-comparison study."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed

from .graph import Graph, read_graph
from .inference import Dataset, FixedEffects, GridConfig, fit
from .linalg import NotPositiveDefinite, sample_constrained_gmrf
from .models import build_latent_model
from .priors import parse_phi_prior, parse_prec_prior
from .scaling import ScaledStructure, scale_structured

logger = logging.getLogger(__name__)

RISK_KINDS = ("constant", "iid", "structured")
STUDY_GRID = GridConfig(dz=0.75, diff_logdens=6.0, max_points=1500)


@dataclass(frozen=True)
class Scenario:
    """One simulation setting: risk surface type, marginal sd and common expected count."""

    risk_kind: str
    sigma: float
    E_level: float
    mu: float = 0.0

    def __post_init__(self):
        if self.risk_kind not in RISK_KINDS:
            raise ValueError(f"risk_kind must be one of {RISK_KINDS}")
        if self.risk_kind == "constant" and self.sigma != 0:
            raise ValueError("constant-risk scenarios have sigma = 0")
        if self.sigma < 0 or not self.E_level > 0:
            raise ValueError("sigma must be >= 0 and E_level > 0")

    @property
    def label(self) -> str:
        return f"{self.risk_kind}-E{self.E_level:g}"


def default_scenarios(sigma: float = 0.5, E_levels=(15, 60, 200)) -> list[Scenario]:
    """The nine-scenario matrix: {constant, iid, structured} x E levels."""
    out = []
    for kind in RISK_KINDS:
        for e in E_levels:
            out.append(Scenario(kind, 0.0 if kind == "constant" else sigma, float(e)))
    return out


def simulate_eta(scenario: Scenario, s: ScaledStructure, rng) -> np.ndarray:
    n = s.n
    if scenario.risk_kind == "constant":
        b = np.zeros(n)
    elif scenario.risk_kind == "iid":
        b = rng.standard_normal(n)
    else:
        b = sample_constrained_gmrf(s.q_star, s.full_constraints(), None, rng)
    return scenario.mu + scenario.sigma * b


def simulate_dataset(scenario: Scenario, s: ScaledStructure, rng, return_eta: bool = False):
    """Draw ``y_i ~ Poisson(E exp(eta_i))`` for the scenario's risk surface."""
    rng = np.random.default_rng(rng)
    eta = simulate_eta(scenario, s, rng)
    E = np.full(s.n, float(scenario.E_level))
    data = Dataset(rng.poisson(E * np.exp(eta)), E)
    return (data, eta) if return_eta else data


@dataclass(frozen=True)
class ModelSpec:
    """A labelled model formulation with its hyperprior choices."""

    label: str
    kind: str
    prec_prior: str | None = None
    phi_prior: str | None = None

    def build(self, s: ScaledStructure):
        prec = parse_prec_prior(self.prec_prior) if self.prec_prior else None
        phi = parse_phi_prior(self.phi_prior) if self.phi_prior else None
        return build_latent_model(self.kind, s, prec_prior=prec, phi_prior=phi)


MODEL_REGISTRY = {
    "iid": ModelSpec("iid", "iid"),
    "besag": ModelSpec("besag", "besag"),
    "bym": ModelSpec("bym", "bym"),
    "leroux": ModelSpec("leroux", "leroux"),
    "dean": ModelSpec("dean", "dean"),
    "bym2": ModelSpec("bym2", "bym2"),
    "bym2-pc": ModelSpec("bym2-pc", "bym2"),
    "bym2-unif": ModelSpec("bym2-unif", "bym2", phi_prior="uniform"),
}
DEFAULT_MODELS = ("iid", "besag", "leroux", "dean", "bym2-unif", "bym2-pc")


def model_spec(entry) -> ModelSpec:
    if isinstance(entry, ModelSpec):
        return entry
    if isinstance(entry, str):
        try:
            return MODEL_REGISTRY[entry]
        except KeyError:
            raise ValueError(f"unknown model {entry!r}; known: {sorted(MODEL_REGISTRY)}") from None
    if isinstance(entry, dict):
        return ModelSpec(**entry)
    raise TypeError(f"cannot interpret model entry {entry!r}")


@dataclass
class StudyConfig:
    """Scenarios x models x replicates on one graph."""

    graph: Graph = field(default_factory=lambda: Graph.lattice(10, 10))
    scenarios: list = field(default_factory=default_scenarios)
    models: list = field(default_factory=lambda: list(DEFAULT_MODELS))
    replicates: int = 50
    seed: int = 20160101
    grid: GridConfig = STUDY_GRID
    fixed_prior_var: float = 100.0
    n_jobs: int = 1

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        self.models = [model_spec(m) for m in self.models]
        labels = [m.label for m in self.models]
        if len(set(labels)) != len(labels):
            raise ValueError("model labels must be unique")

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "StudyConfig":
        d = dict(d)
        kw = {}
        if d.get("graph"):
            path = Path(d["graph"])
            if base_dir is not None and not path.is_absolute():
                path = Path(base_dir) / path
            kw["graph"] = read_graph(path)
        elif d.get("lattice"):
            kw["graph"] = Graph.lattice(*d["lattice"])
        if "scenarios" in d:
            kw["scenarios"] = [Scenario(**sc) for sc in d["scenarios"]]
        for key in ("models", "replicates", "seed", "fixed_prior_var", "n_jobs"):
            if key in d:
                kw[key] = d[key]
        if "grid" in d:
            kw["grid"] = GridConfig(**d["grid"])
        return cls(**kw)


SUMMARY_FIELDS = ("mu", "sigma", "phi")


@dataclass
class StudySummary:
    """Per-replicate records and the scenario x model aggregate table."""

    records: list
    rows: list
    config: dict
    elapsed: float = 0.0

    def row(self, scenario_label: str, model_label: str) -> dict:
        for r in self.rows:
            if r["scenario"] == scenario_label and r["model"] == model_label:
                return r
        raise KeyError((scenario_label, model_label))

    def values(self, scenario_label: str, model_label: str, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.records
                         if r["scenario"] == scenario_label and r["model"] == model_label
                         and r["status"] == "ok"], dtype=float)

    def write_csv(self, path) -> None:
        if not self.rows:
            return
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(self.rows[0]))
            writer.writeheader()
            writer.writerows(self.rows)

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")


def _fit_record(spec: ModelSpec, model, data: Dataset, eta_true, cfg: StudyConfig) -> dict:
    rec = {"model": spec.label, "kind": spec.kind}
    try:
        res = fit(model, data, cfg.grid, FixedEffects(cfg.fixed_prior_var))
    except (NotPositiveDefinite, ArithmeticError, RuntimeError, ValueError) as exc:
        rec.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        for key in SUMMARY_FIELDS + ("rmse", "dic", "p_d", "ls"):
            rec[key] = None
        return rec
    hs = res.hyper_summary
    phi = hs["phi"]["mean"] if "phi" in hs else None
    rec.update(
        status="ok",
        error=None,
        mu=res.fixed_summary["intercept"]["mean"],
        sigma=hs["sigma"]["mean"],
        phi=None if phi is None or np.isnan(phi) else phi,
        rmse=res.rmse,
        dic=res.dic,
        p_d=res.p_d,
        ls=res.ls,
        cpo_unstable=int(np.sum(res.cpo_unstable)),
        grid_points=res.metadata["grid_points"],
        max_gradient_norm=res.metadata["max_constrained_gradient_norm"],
        rmse_truth=float(np.sqrt(np.mean((res.theta_mean - np.exp(eta_true)) ** 2))),
    )
    return rec


def _replicate(si: int, rep: int, scenario: Scenario, structure, models, cfg: StudyConfig) -> list:
    ss = np.random.SeedSequence(cfg.seed, spawn_key=(si, rep))
    data, eta = simulate_dataset(scenario, structure, np.random.default_rng(ss), return_eta=True)
    out = []
    for spec, model in zip(cfg.models, models):
        rec = {"scenario": scenario.label, "risk_kind": scenario.risk_kind, "sigma_true": scenario.sigma,
               "E_level": scenario.E_level, "replicate": rep}
        rec.update(_fit_record(spec, model, data, eta, cfg))
        out.append(rec)
    return out


def _aggregate(records, cfg: StudyConfig) -> list:
    rows = []
    for sc in cfg.scenarios:
        for spec in cfg.models:
            recs = [r for r in records if r["scenario"] == sc.label and r["model"] == spec.label]
            ok = [r for r in recs if r["status"] == "ok"]
            row = {"scenario": sc.label, "risk_kind": sc.risk_kind, "sigma_true": sc.sigma,
                   "E_level": sc.E_level, "model": spec.label,
                   "n_ok": len(ok), "n_failed": len(recs) - len(ok)}
            for key in SUMMARY_FIELDS:
                vals = np.array([r[key] for r in ok if r[key] is not None], dtype=float)
                row[f"{key}_mean"] = float(vals.mean()) if vals.size else None
                row[f"{key}_sd"] = float(vals.std(ddof=1)) if vals.size > 1 else None
                row[f"{key}_median"] = float(np.median(vals)) if vals.size else None
            for key in ("rmse", "dic", "ls"):
                vals = np.array([r[key] for r in ok], dtype=float)
                row[f"{key}_mean"] = float(vals.mean()) if vals.size else None
            rows.append(row)
    return rows


def run_study(cfg: StudyConfig, progress=None) -> StudySummary:
    """Simulate and fit every scenario x replicate x model; aggregate into a table.

    Each replicate draws from its own stream seeded by (seed, scenario index,
    replicate), so results do not depend on ``n_jobs`` or scheduling.
    """
    t0 = time.perf_counter()
    structure = scale_structured(cfg.graph)
    models = [spec.build(structure) for spec in cfg.models]
    jobs = [(si, rep, sc) for si, sc in enumerate(cfg.scenarios) for rep in range(cfg.replicates)]
    if cfg.n_jobs == 1:
        chunks = []
        for si, rep, sc in jobs:
            chunks.append(_replicate(si, rep, sc, structure, models, cfg))
            if progress is not None:
                progress(len(chunks), len(jobs))
    else:
        chunks = Parallel(n_jobs=cfg.n_jobs)(
            delayed(_replicate)(si, rep, sc, structure, models, cfg) for si, rep, sc in jobs)
    records = [r for chunk in chunks for r in chunk]
    n_failed = sum(r["status"] != "ok" for r in records)
    if n_failed:
        logger.warning("%d of %d fits failed", n_failed, len(records))
    config = {
        "n_regions": cfg.graph.n_regions,
        "scenarios": [asdict(s) for s in cfg.scenarios],
        "models": [asdict(m) for m in cfg.models],
        "replicates": cfg.replicates,
        "seed": cfg.seed,
        "grid": asdict(cfg.grid),
        "fixed_prior_var": cfg.fixed_prior_var,
    }
    return StudySummary(records, _aggregate(records, cfg), config, time.perf_counter() - t0)
