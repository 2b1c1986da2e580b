"""Model-stealing threat models at desk scale.

Query-based attacks (``label_query``, ``logit_query``, ``random_query``,
``disagreement_query``) only ever see the victim through a counting
:class:`~dsinfer.oracles.LocalOracle`. ``disagreement_query`` is a
simplified stand-in for data-free adversarial distillation: instead of a
generator, synthetic inputs are pushed by a few signed-gradient steps
towards larger student/teacher KL (teacher probabilities held fixed within
a step), then used as distillation queries.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .models import (ArchSpec, LabeledSet, Model, TrainConfig, evaluate_accuracy, init_model,
                     input_vjp, softmax, train_sgd)
from .oracles import LocalOracle

logger = logging.getLogger(__name__)

THREAT_KINDS = ("source", "distillation", "diff_architecture", "fine_tune", "label_query",
                "logit_query", "random_query", "disagreement_query", "independent", "overlap")
QUERY_KINDS = ("label_query", "logit_query", "random_query", "disagreement_query")


@dataclass(frozen=True)
class ThreatModel:
    kind: str
    overlap_fraction: Optional[float] = None

    def __post_init__(self):
        if self.kind not in THREAT_KINDS:
            raise ValueError(f"unknown threat model {self.kind!r}")
        if (self.kind == "overlap") != (self.overlap_fraction is not None):
            raise ValueError("overlap_fraction is required for, and only for, kind='overlap'")
        if self.overlap_fraction is not None and not 0.0 <= self.overlap_fraction <= 1.0:
            raise ValueError("overlap_fraction must lie in [0, 1]")

    @property
    def label(self) -> str:
        return self.kind if self.kind != "overlap" else f"overlap_{self.overlap_fraction:g}"


@dataclass
class AttackConfig:
    student_arch: ArchSpec
    train: TrainConfig = field(default_factory=TrainConfig)
    surrogate: Optional[LabeledSet] = None
    query_budget: Optional[int] = None
    victim_data: Optional[LabeledSet] = None  # S_V, for data-access threats
    adversary_data: Optional[LabeledSet] = None  # the adversary's own S_A
    eval_data: Optional[LabeledSet] = None
    extraction_epochs: int = 20
    finetune_epochs: int = 5
    full_epochs: int = 100
    epoch_scale: float = 1.0
    finetune_lr: Optional[float] = None
    random_queries: int = 20000
    synthetic_rounds: int = 10
    synthetic_batch: int = 2000
    synthetic_steps: int = 10
    synthetic_step_size: float = 0.02
    synthetic_epochs: int = 2


def make_overlap_trainset(s_v: LabeledSet, s_a: LabeledSet, fraction: float, seed) -> LabeledSet:
    """``S_A`` plus ``ceil(fraction * |S_V|)`` points of ``S_V`` drawn without replacement."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    n = min(len(s_v), math.ceil(fraction * len(s_v) - 1e-9))
    rng = np.random.default_rng([int(seed), 23])
    take = np.sort(rng.choice(len(s_v), size=n, replace=False))
    return LabeledSet(np.vstack([s_a.inputs, s_v.inputs[take]]),
                      np.concatenate([s_a.labels, s_v.labels[take]]),
                      "surrogate", np.concatenate([s_a.index, s_v.index[take]]))


def model_hash(model: Model) -> str:
    h = hashlib.sha256(json.dumps(model.arch.to_dict(), sort_keys=True).encode())
    h.update(np.ascontiguousarray(model.params, dtype="<f8").tobytes())
    return h.hexdigest()


def _epochs(cfg: AttackConfig, base: int) -> int:
    return max(1, int(round(base * cfg.epoch_scale)))


def _require(value, what: str, kind: str):
    if value is None or len(value) == 0:
        raise ValueError(f"threat model {kind!r} needs {what}")
    return value


def _distill(student: Model, X: np.ndarray, teacher_logits: np.ndarray, tc: TrainConfig) -> Model:
    data = LabeledSet(X, np.zeros(len(X), dtype=np.int64), "synthetic")
    return train_sgd(student, data, replace(tc, loss="kl_to_teacher"), teacher_logits=teacher_logits)


def _synthetic_queries(oracle: LocalOracle, student: Model, cfg: AttackConfig, rng, dim: int):
    X = rng.uniform(0.0, 1.0, size=(cfg.synthetic_batch, dim))
    for _ in range(cfg.synthetic_steps):
        p_t = softmax(oracle.query_logits_batch(X))
        p_s = softmax(student.forward(X))
        # d KL(p_t || p_s) / d logits_s = p_s - p_t with p_t held fixed
        g = input_vjp(student, X, p_s - p_t)
        X = np.clip(X + cfg.synthetic_step_size * np.sign(g), 0.0, 1.0)
    return X, oracle.query_logits_batch(X)


def run_attack(victim: Model, threat: ThreatModel, cfg: AttackConfig, seed: int = 0) -> Model:
    """Produce the adversary's model for ``threat``.

    The returned model carries a provenance record in
    ``train_meta["attack"]`` (see :func:`provenance_record`).
    """
    kind = threat.kind
    tc = replace(cfg.train, seed=int(seed))
    oracle = LocalOracle(victim, budget=cfg.query_budget)
    student = init_model(cfg.student_arch, [int(seed), 101])
    rng = np.random.default_rng([int(seed), 103])
    n_train_points = 0

    if kind == "source":
        out = victim.copy()
    elif kind == "distillation":
        S = _require(cfg.victim_data, "the victim's training data", kind)
        tc = replace(tc, epochs=_epochs(cfg, cfg.full_epochs))
        out = _distill(student, S.inputs, oracle.query_logits_batch(S.inputs), tc)
        n_train_points = len(S)
    elif kind == "diff_architecture":
        S = _require(cfg.victim_data, "the victim's training data", kind)
        tc = replace(tc, epochs=_epochs(cfg, cfg.full_epochs))
        out = train_sgd(student, S, tc)
        n_train_points = len(S)
    elif kind == "fine_tune":
        Q = _require(cfg.surrogate, "a surrogate dataset", kind)
        start = victim.copy()
        assert np.array_equal(start.params, victim.params)
        pseudo = oracle.query_batch(Q.inputs)
        tc = replace(tc, epochs=_epochs(cfg, cfg.finetune_epochs),
                     lr0=cfg.finetune_lr if cfg.finetune_lr is not None else tc.lr0 * 0.1)
        out = train_sgd(start, LabeledSet(Q.inputs, pseudo, "surrogate", Q.index), tc)
        n_train_points = len(Q)
    elif kind == "label_query":
        Q = _require(cfg.surrogate, "a surrogate dataset", kind)
        pseudo = oracle.query_batch(Q.inputs)
        tc = replace(tc, epochs=_epochs(cfg, cfg.extraction_epochs))
        out = train_sgd(student, LabeledSet(Q.inputs, pseudo, "surrogate", Q.index), tc)
        n_train_points = len(Q)
    elif kind == "logit_query":
        Q = _require(cfg.surrogate, "a surrogate dataset", kind)
        tc = replace(tc, epochs=_epochs(cfg, cfg.extraction_epochs))
        out = _distill(student, Q.inputs, oracle.query_logits_batch(Q.inputs), tc)
        n_train_points = len(Q)
    elif kind == "random_query":
        dim = victim.arch.input_dim
        if cfg.surrogate is not None and len(cfg.surrogate):
            mu, sd = cfg.surrogate.inputs.mean(0), cfg.surrogate.inputs.std(0)
        else:
            mu, sd = np.full(dim, 0.5), np.full(dim, 0.25)
        # standard normal in the standardized input space
        X = np.clip(mu + sd * rng.standard_normal((cfg.random_queries, dim)), 0.0, 1.0)
        tc = replace(tc, epochs=_epochs(cfg, cfg.extraction_epochs))
        out = _distill(student, X, oracle.query_logits_batch(X), tc)
        n_train_points = len(X)
    elif kind == "disagreement_query":
        dim = victim.arch.input_dim
        out = student
        Xs, Ls = [], []
        per_round = replace(tc, epochs=_epochs(cfg, cfg.synthetic_epochs))
        for r in range(cfg.synthetic_rounds):
            X, L = _synthetic_queries(oracle, out, cfg, rng, dim)
            Xs.append(X)
            Ls.append(L)
            out = _distill(out, np.vstack(Xs), np.vstack(Ls), replace(per_round, seed=int(seed) * 1000 + r))
        n_train_points = sum(len(x) for x in Xs)
    elif kind == "independent":
        A = _require(cfg.adversary_data, "the adversary's own private dataset", kind)
        if cfg.victim_data is not None and np.intersect1d(A.index, cfg.victim_data.index).size:
            raise ValueError("independent training data overlaps the victim's private set")
        tc = replace(tc, epochs=_epochs(cfg, cfg.full_epochs))
        out = train_sgd(student, A, tc)
        n_train_points = len(A)
    elif kind == "overlap":
        S = _require(cfg.victim_data, "the victim's training data", kind)
        A = _require(cfg.adversary_data, "the adversary's own private dataset", kind)
        mix = make_overlap_trainset(S, A, threat.overlap_fraction, seed)
        tc = replace(tc, epochs=_epochs(cfg, cfg.full_epochs))
        out = train_sgd(student, mix, tc)
        n_train_points = len(mix)
    else:  # pragma: no cover - guarded by ThreatModel
        raise ValueError(kind)

    meta = dict(out.train_meta)
    meta["attack"] = provenance_record(threat, seed, oracle.queries_used,
                                       tc.epochs if kind != "source" else 0, out, victim,
                                       cfg.eval_data, n_train_points)
    out.train_meta = meta
    return out


def provenance_record(threat: ThreatModel, seed: int, query_count: int, epochs: int, model: Model,
                      victim: Model, eval_data: Optional[LabeledSet] = None,
                      n_train_points: int = 0) -> dict:
    rec = {
        "threat_kind": threat.kind,
        "seed": int(seed),
        "query_count": int(query_count),
        "epochs": int(epochs),
        "final_accuracy": evaluate_accuracy(model, eval_data) if eval_data is not None else None,
        "victim_checkpoint_hash": model_hash(victim),
        "n_train_points": int(n_train_points),
    }
    if threat.kind == "overlap":
        rec["overlap_fraction"] = threat.overlap_fraction
    if threat.kind == "disagreement_query":
        rec["note"] = "simplified data-free distillation: signed-gradient KL ascent on synthetic inputs, no generator"
    return rec
