"""Desk-scale dataset inference experiments shared by the CLI, notebooks and tests.

A :class:`Scenario` fixes the synthetic task, the victim, the pools the
victim may reveal and the confidence regressor. Suspect models are built
from it with :meth:`Scenario.suspect` and tested with :meth:`Scenario.infer`.
The sweep functions return plain rows ready for CSV.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import jsonschema
import numpy as np

from .data import TaskConfig, make_task
from .embeddings import PRIVATE, PUBLIC, EmbeddingConfig, embed_dataset
from .inference import (INCONCLUSIVE, RESAMPLE_MODES, DIPools, Regressor, RegressorConfig, Verdict,
                        run_dataset_inference, train_regressor)
from .models import ArchSpec, Model, TrainConfig, evaluate_accuracy, init_model, train_sgd
from .oracles import GradientOracle, LocalOracle
from .stealing import THREAT_KINDS, AttackConfig, ThreatModel, run_attack

logger = logging.getLogger(__name__)

M_GRID = (2, 5, 10, 20, 30, 40, 50)
EMBED_SIZES = (5, 10, 15, 20, 25, 30)
OVERLAP_FRACTIONS = (0.0, 0.3, 0.5, 0.7, 1.0)
PIPELINE_THREATS = ("source", "distillation", "diff_architecture", "fine_tune",
                    "label_query", "logit_query")


def worker_count() -> int:
    """Worker cap from ``PK_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("PK_THREADS", "1")))
    except ValueError:
        return 1


def _pmap(fn, items):
    items = list(items)
    n = min(worker_count(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# ------------------------------------------------------------ configuration

@dataclass
class ScenarioConfig:
    task: TaskConfig = field(default_factory=lambda: TaskConfig(
        num_classes=10, signal_dim=10, noise_dim=1000, class_sep=1.5))
    n_private: int = 400
    n_public: int = 400
    n_surrogate: int = 20000
    n_independent: int = 100
    n_eval: int = 2000
    victim_hidden: tuple = (128, 128)
    student_hidden: tuple = (128, 128)
    diff_arch_hidden: tuple = (256,)
    activation: str = "relu"
    victim_train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=100, lr0=0.01))
    embedding: EmbeddingConfig = field(default_factory=lambda: EmbeddingConfig(noise_scale=0.1))
    regressor: RegressorConfig = field(default_factory=RegressorConfig)
    regressor_fraction: float = 0.5
    epoch_scale: float = 1.0
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["embedding"] = self.embedding.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        base = cls()
        if "task" in d:
            d["task"] = replace(base.task, **d["task"])
        if "victim_train" in d:
            tc = dict(d["victim_train"])
            if "milestones" in tc:
                tc["milestones"] = tuple(tc["milestones"])
            d["victim_train"] = replace(base.victim_train, **tc)
        if "embedding" in d:
            merged = {**base.embedding.to_dict(), **d["embedding"]}
            d["embedding"] = EmbeddingConfig.from_dict(merged)
        if "regressor" in d:
            reg = dict(d["regressor"])
            if isinstance(reg.get("sort_groups"), list):
                reg["sort_groups"] = tuple(reg["sort_groups"])
            d["regressor"] = replace(base.regressor, **reg)
        for key in ("victim_hidden", "student_hidden", "diff_arch_hidden"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class InferenceSettings:
    m: tuple = M_GRID
    alpha: float = 0.01
    repetitions: int = 100
    bootstrap: int = 40
    resample: str = "half"


@dataclass
class ExperimentConfig:
    """Everything one CLI invocation needs; validated against :data:`EXPERIMENT_SCHEMA`."""

    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    inference: InferenceSettings = field(default_factory=InferenceSettings)
    threats: tuple = PIPELINE_THREATS
    overlap_fractions: tuple = OVERLAP_FRACTIONS
    embed_sizes: tuple = EMBED_SIZES
    theory: dict = field(default_factory=lambda: {"K": 10, "D": 100, "sigma": 0.5, "m": 1000,
                                                  "trials": 200})
    out: str = "runs"

    def to_dict(self) -> dict:
        """Plain JSON document that :meth:`from_dict` accepts."""
        return _plain({"scenario": self.scenario.to_dict(), "inference": asdict(self.inference),
                       "threats": self.threats, "overlap_fractions": self.overlap_fractions,
                       "embed_sizes": self.embed_sizes, "theory": self.theory, "out": self.out})

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        jsonschema.validate(d, EXPERIMENT_SCHEMA)
        base = cls()
        inf = dict(d.get("inference", {}))
        if "m" in inf:
            inf["m"] = tuple(inf["m"])
        return cls(
            scenario=ScenarioConfig.from_dict(d.get("scenario", {})),
            inference=replace(base.inference, **inf),
            threats=tuple(d.get("threats", base.threats)),
            overlap_fractions=tuple(d.get("overlap_fractions", base.overlap_fractions)),
            embed_sizes=tuple(d.get("embed_sizes", base.embed_sizes)),
            theory={**base.theory, **d.get("theory", {})},
            out=d.get("out", base.out),
        )


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


_POS_INT = {"type": "integer", "minimum": 1}
_NONNEG = {"type": "number", "minimum": 0}
_POS = {"type": "number", "exclusiveMinimum": 0}
_UNIT = {"type": "number", "minimum": 0, "maximum": 1}
_HIDDEN = {"type": "array", "items": _POS_INT}
_PAIR = {"type": ["array", "null"], "items": {"type": "number"}, "minItems": 2, "maxItems": 2}


def _obj(props: dict) -> dict:
    return {"type": "object", "additionalProperties": False, "properties": props}


EXPERIMENT_SCHEMA = _obj({
    "scenario": _obj({
        "task": _obj({
            "num_classes": {"type": "integer", "minimum": 2},
            "signal_dim": _POS_INT, "noise_dim": {"type": "integer", "minimum": 0},
            "class_sep": _NONNEG, "signal_std": _NONNEG, "noise_std": _NONNEG,
            "box_scale": _NONNEG, "seed": {"type": "integer", "minimum": 0},
        }),
        "n_private": {"type": "integer", "minimum": 4},
        "n_public": {"type": "integer", "minimum": 4},
        "n_surrogate": _POS_INT, "n_independent": _POS_INT, "n_eval": _POS_INT,
        "victim_hidden": _HIDDEN, "student_hidden": _HIDDEN, "diff_arch_hidden": _HIDDEN,
        "activation": {"enum": ["relu", "tanh"]},
        "victim_train": _obj({
            "epochs": _POS_INT, "lr0": _POS, "batch_size": _POS_INT, "momentum": _UNIT,
            "seed": {"type": "integer"}, "milestones": {"type": "array", "items": {"type": "number"}},
            "decay_factor": _POS, "weight_decay": _NONNEG, "loss": {"enum": ["cross_entropy"]},
        }),
        "embedding": _obj({
            "mode": {"enum": ["blind_walk", "min_gd"]},
            "norms": {"type": "array", "items": {"enum": ["l1", "l2", "linf"]}, "minItems": 1},
            "step_sizes": {"type": "object", "additionalProperties": _POS},
            "max_steps_mingd": _POS_INT, "max_steps_blindwalk": _POS_INT,
            "repeats_per_family": _POS_INT,
            "noise_families": {"type": "array", "items": {"enum": ["uniform", "gaussian", "laplace"]},
                               "minItems": 1},
            "noise_scale": _POS, "distance_cap": {"type": ["number", "null"], "exclusiveMinimum": 0},
            "target_classes": {"oneOf": [{"const": "all"}, _POS_INT]},
            "renormalize": {"type": "boolean"}, "box": _PAIR, "walk_box": _PAIR,
        }),
        "regressor": _obj({
            "hidden_width": _POS_INT, "epochs": _POS_INT, "lr": _POS, "momentum": _UNIT,
            "weight_decay": _NONNEG, "seed": {"type": "integer"},
            "feature_standardization": {"type": "boolean"}, "log_features": {"type": "boolean"},
            "sort_groups": {"oneOf": [{"type": "integer", "minimum": 0}, _HIDDEN]},
        }),
        "regressor_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "epoch_scale": _POS,
        "seed": {"type": "integer", "minimum": 0},
    }),
    "inference": _obj({
        "m": {"type": "array", "items": {"type": "integer", "minimum": 2}, "minItems": 1},
        "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "repetitions": _POS_INT, "bootstrap": {"type": "integer", "minimum": 0},
        "resample": {"enum": list(RESAMPLE_MODES)},
    }),
    "threats": {"type": "array", "items": {"enum": [k for k in THREAT_KINDS if k != "overlap"]}},
    "overlap_fractions": {"type": "array", "items": _UNIT},
    "embed_sizes": {"type": "array", "items": _POS_INT},
    "theory": _obj({"K": _POS_INT, "D": _POS_INT, "sigma": _POS, "m": _POS_INT,
                    "trials": {"type": "integer", "minimum": 100}}),
    "out": {"type": "string"},
})


# ----------------------------------------------------------------- scenario

@dataclass
class Scenario:
    config: ScenarioConfig
    task: object
    victim: Model
    pools: DIPools
    regressor: Optional[Regressor]
    reg_private: object
    reg_public: object
    _suspects: dict = field(default_factory=dict)
    _caches: dict = field(default_factory=dict)

    def attack_config(self, kind: str) -> AttackConfig:
        c = self.config
        hidden = c.diff_arch_hidden if kind == "diff_architecture" else c.student_hidden
        return AttackConfig(
            student_arch=ArchSpec("mlp", c.task.dim, c.task.num_classes, hidden, c.activation),
            train=c.victim_train,
            surrogate=self.task["surrogate"],
            victim_data=self.task["victim"],
            adversary_data=self.task["independent"],
            eval_data=self.task["eval"],
            full_epochs=c.victim_train.epochs,
            epoch_scale=c.epoch_scale,
        )

    def suspect(self, threat) -> Model:
        threat = as_threat(threat)
        if threat.label not in self._suspects:
            self._suspects[threat.label] = run_attack(self.victim, threat, self.attack_config(threat.kind),
                                                      seed=self.config.seed + 1)
        return self._suspects[threat.label]

    def add_suspect(self, threat, model: Model) -> None:
        self._suspects[as_threat(threat).label] = model

    def oracle_for(self, model: Model):
        return GradientOracle(model) if self.pools.embedding.mode == "min_gd" else LocalOracle(model)

    def embedding_cache(self, key) -> dict:
        return self._caches.setdefault(key, {})

    def infer(self, threat, m: int = 50, alpha: float = 0.01, repetitions: int = 100,
              bootstrap: int = 40, seed: Optional[int] = None, oracle=None,
              resample: str = "half", regressor: Optional[Regressor] = None, columns=None) -> Verdict:
        """Dataset inference against the suspect for ``threat``, or against an explicit oracle."""
        threat = as_threat(threat)
        if oracle is None:
            oracle = self.oracle_for(self.suspect(threat))
            cache = self.embedding_cache(threat.label)
        else:
            cache = self.embedding_cache(("oracle", id(oracle)))
        reg = regressor or self.regressor
        if reg is None:
            raise ValueError("scenario was built without a regressor")
        return run_dataset_inference(self.pools, oracle, reg, m, alpha, repetitions, bootstrap,
                                     self.config.seed if seed is None else seed,
                                     threat_kind=threat.label, embedding_cache=cache,
                                     resample=resample, columns=columns)


def as_threat(threat) -> ThreatModel:
    if isinstance(threat, ThreatModel):
        return threat
    if isinstance(threat, str) and threat.startswith("overlap_"):
        return ThreatModel("overlap", float(threat.split("_", 1)[1]))
    return ThreatModel(threat)


def make_scenario_task(c: ScenarioConfig):
    return make_task(c.task, {
        "victim": ("private_train", c.n_private),
        "public": ("public_test", c.n_public),
        "surrogate": ("surrogate", c.n_surrogate),
        "independent": ("private_train", c.n_independent),
        "eval": ("public_test", c.n_eval),
    })


def train_victim(c: ScenarioConfig, task=None) -> Model:
    task = task or make_scenario_task(c)
    arch = ArchSpec("mlp", c.task.dim, c.task.num_classes, c.victim_hidden, c.activation)
    victim = train_sgd(init_model(arch, [c.seed, 1]), task["victim"], replace(c.victim_train, seed=c.seed))
    logger.info("victim accuracy: train %.3f, eval %.3f", evaluate_accuracy(victim, task["victim"]),
                evaluate_accuracy(victim, task["eval"]))
    return victim


def split_pools(c: ScenarioConfig, task) -> tuple:
    """``((regressor private, regressor public), (reveal private, reveal public))``."""
    n_rp = int(round(c.regressor_fraction * c.n_private))
    n_ru = int(round(c.regressor_fraction * c.n_public))
    priv, pub = task["victim"], task["public"]
    return ((priv.subset(np.arange(n_rp)), pub.subset(np.arange(n_ru))),
            (priv.subset(np.arange(n_rp, len(priv))), pub.subset(np.arange(n_ru, len(pub)))))


def build_scenario(config: Optional[ScenarioConfig] = None, regressor: bool = True,
                   victim: Optional[Model] = None) -> Scenario:
    """Task, victim (trained unless given), reveal pools and the victim's regressor.

    The victim's private and public pools are each split: the first
    ``regressor_fraction`` trains g_V, the rest is what the victim may reveal.
    """
    c = config or ScenarioConfig()
    task = make_scenario_task(c)
    if victim is None:
        victim = train_victim(c, task)
    (reg_private, reg_public), (rev_private, rev_public) = split_pools(c, task)
    pools = DIPools(rev_private, rev_public, c.embedding, embed_seed=c.seed)
    sc = Scenario(c, task, victim, pools, None, reg_private, reg_public)
    if regressor:
        sc.regressor = fit_victim_regressor(sc)
    return sc


def regressor_embeddings(sc: Scenario) -> list:
    """The victim's own embeddings of its regressor-training pools (cached)."""
    cache = sc.embedding_cache("victim_regressor_pools")
    if "embs" not in cache:
        oracle = sc.oracle_for(sc.victim)
        emb, seed = sc.config.embedding, sc.config.seed
        cache["embs"] = embed_dataset(oracle, sc.reg_private, PRIVATE, emb, seed) + \
            embed_dataset(oracle, sc.reg_public, PUBLIC, emb, seed)
    return cache["embs"]


def default_sort_groups(emb: EmbeddingConfig):
    """Blind Walk repeats within a family are exchangeable; MinGD features are not."""
    return emb.repeats_per_family if emb.mode == "blind_walk" else 0


def fit_victim_regressor(sc: Scenario, columns=None, sort_groups=None) -> Regressor:
    """Train g_V on the victim's own embeddings, optionally on a column subset."""
    embs = regressor_embeddings(sc)
    groups = default_sort_groups(sc.config.embedding) if sort_groups is None else sort_groups
    cfg = replace(sc.config.regressor, sort_groups=groups)
    if columns is None:
        return train_regressor(embs, cfg)
    cols = np.asarray(columns)
    return train_regressor([replace(e, features=e.features[cols]) for e in embs], cfg)


# ------------------------------------------------------------------- sweeps

def verdict_row(v: Verdict, **lead) -> dict:
    median_p = float(np.median(v.replica_p)) if v.replica_p else v.aggregated_p
    return {**lead, "aggregated_p": v.aggregated_p, "median_p": median_p, "effect_size": v.effect_size,
            "ci_low": v.ci99[0], "ci_high": v.ci99[1],
            "effect_ci_low": v.ci99_effect[0], "effect_ci_high": v.ci99_effect[1],
            "decision": v.decision}


def sweep_m(sc: Scenario, threat, m_values: Sequence[int] = M_GRID, alpha: float = 0.01,
            repetitions: int = 100, bootstrap: int = 40, seed: Optional[int] = None,
            resample: str = "half", oracle=None) -> list:
    """p-value against the number of revealed samples."""
    if oracle is None:
        sc.suspect(threat)

    def run(m):
        return sc.infer(threat, m, alpha, repetitions, bootstrap, seed, oracle, resample)

    return [verdict_row(v, m=m) for m, v in zip(m_values, _pmap(run, m_values))]


def family_columns(emb: EmbeddingConfig, n_features: int) -> tuple:
    """Columns for an ``n_features`` Blind Walk embedding, spread evenly over families.

    Returns ``(columns, group_sizes)``; family ``i`` keeps its first
    ``n // F + (i < n % F)`` repeats.
    """
    F, R = len(emb.noise_families), emb.repeats_per_family
    if not 1 <= n_features <= F * R:
        raise ValueError(f"feature count must lie in [1, {F * R}]")
    cols, sizes = [], []
    for i in range(F):
        k = n_features // F + (1 if i < n_features % F else 0)
        cols.extend(range(i * R, i * R + k))
        if k:
            sizes.append(k)
    return np.array(cols), tuple(sizes)


def sweep_embed(sc: Scenario, threat, sizes: Sequence[int] = EMBED_SIZES, m: int = 50,
                alpha: float = 0.01, repetitions: int = 100, bootstrap: int = 40,
                seed: Optional[int] = None, resample: str = "half") -> list:
    """p-value against the embedding size (Blind Walk only)."""
    if sc.config.embedding.mode != "blind_walk":
        raise ValueError("embedding-size sweep is defined for Blind Walk embeddings")
    sc.suspect(threat)
    regressor_embeddings(sc)

    def run(n):
        cols, groups = family_columns(sc.config.embedding, n)
        reg = fit_victim_regressor(sc, columns=cols, sort_groups=groups)
        return sc.infer(threat, m, alpha, repetitions, bootstrap, seed, resample=resample,
                        regressor=reg, columns=cols)

    return [verdict_row(v, n_features=n) for n, v in zip(sizes, _pmap(run, sizes))]


def sweep_overlap(sc: Scenario, fractions: Sequence[float] = OVERLAP_FRACTIONS, m: int = 50,
                  alpha: float = 0.01, repetitions: int = 100, bootstrap: int = 40,
                  seed: Optional[int] = None, resample: str = "half") -> list:
    """Suspects trained on the adversary's data plus a fraction of the victim's."""
    def run(f):
        th = ThreatModel("overlap", float(f))
        sc.suspect(th)
        return sc.infer(th, m, alpha, repetitions, bootstrap, seed, resample=resample)

    return [verdict_row(v, overlap_fraction=f) for f, v in zip(fractions, _pmap(run, fractions))]


# ------------------------------------------------------------------- checks

def crossing_m(rows: Sequence[dict], alpha: float) -> Optional[int]:
    """Smallest m from which every larger m in the sweep stays below ``alpha``."""
    cross = None
    for r in sorted(rows, key=lambda r: r["m"], reverse=True):
        if r["aggregated_p"] < alpha:
            cross = r["m"]
        else:
            break
    return cross


def nondecreasing_within_ci(values, lows, highs) -> bool:
    """Each step either does not decrease or the two intervals overlap."""
    return all(b >= a or hb >= la
               for a, b, la, hb in zip(values, values[1:], lows, highs[1:]))


def overlap_checks(rows: Sequence[dict], alpha: float = 0.01) -> dict:
    rows = sorted(rows, key=lambda r: r["overlap_fraction"])
    return {
        "positive_fractions_significant": all(r["aggregated_p"] < alpha
                                              for r in rows if r["overlap_fraction"] > 0),
        "zero_fraction_inconclusive": all(r["decision"] == INCONCLUSIVE
                                          for r in rows if r["overlap_fraction"] == 0),
        "effect_nondecreasing_within_ci": nondecreasing_within_ci(
            [r["effect_size"] for r in rows], [r["effect_ci_low"] for r in rows],
            [r["effect_ci_high"] for r in rows]),
    }
