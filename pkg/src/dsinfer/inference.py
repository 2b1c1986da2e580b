"""Ownership testing: confidence regressor, one-sided Welch test, p-value aggregation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import betainc

from .embeddings import PRIVATE, PUBLIC, Embedding, EmbeddingConfig, embed_dataset, stack
from .models import LabeledSet

logger = logging.getLogger(__name__)

STOLEN = "stolen"
INCONCLUSIVE = "inconclusive"
P_FLOOR = np.finfo(np.float64).tiny


# ------------------------------------------------------------- regressor

@dataclass(frozen=True)
class RegressorConfig:
    hidden_width: int = 32
    epochs: int = 300
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    feature_standardization: bool = True
    # compress heavy-tailed distances: log1p(e / median of the training column)
    log_features: bool = True
    # sort features inside consecutive groups (exchangeable Blind Walk
    # repeats): one size for equal groups or a tuple of sizes; 0 disables
    sort_groups: object = 0


def _group_sizes(sort_groups, width: int) -> list:
    if isinstance(sort_groups, (int, np.integer)):
        if width % sort_groups:
            raise ValueError(f"feature width {width} is not a multiple of sort_groups={sort_groups}")
        return [int(sort_groups)] * (width // sort_groups)
    sizes = [int(g) for g in sort_groups]
    if sum(sizes) != width:
        raise ValueError(f"sort_groups {sizes} do not cover {width} features")
    return sizes


def preprocess_features(F: np.ndarray, log_ref: Optional[np.ndarray], sort_groups) -> np.ndarray:
    F = np.atleast_2d(np.asarray(F, dtype=np.float64))
    if log_ref is not None:
        F = np.log1p(np.maximum(F, 0.0) / log_ref)
    if sort_groups:
        F = F.copy()
        off = 0
        for g in _group_sizes(sort_groups, F.shape[1]):
            F[:, off:off + g] = np.sort(F[:, off:off + g], axis=1)
            off += g
    return F


@dataclass
class Regressor:
    """``g(e) = tanh(((h(e) - mean) / std) @ W1 + b1) @ w2 + b2``.

    ``h`` is the fixed preprocessing of :func:`preprocess_features`.
    """

    W1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float
    mean: np.ndarray
    std: np.ndarray
    converged: bool = True
    log_ref: Optional[np.ndarray] = None
    sort_groups: object = 0

    @property
    def input_width(self) -> int:
        return self.W1.shape[0]

    def __call__(self, F: np.ndarray) -> np.ndarray:
        Z = (preprocess_features(F, self.log_ref, self.sort_groups) - self.mean) / self.std
        return np.tanh(Z @ self.W1 + self.b1) @ self.w2 + self.b2

    def folded(self) -> "Regressor":
        """Equivalent regressor with the standardization folded into ``W1, b1``."""
        W1 = self.W1 / self.std[:, None]
        b1 = self.b1 - (self.mean / self.std) @ self.W1
        F = len(self.mean)
        return Regressor(W1, b1, self.w2.copy(), self.b2, np.zeros(F), np.ones(F), self.converged,
                         None if self.log_ref is None else self.log_ref.copy(), self.sort_groups)

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "Regressor":
        arr = {k: np.asarray(d[k], dtype=np.float64) for k in ("W1", "b1", "w2", "mean", "std")}
        ref = d.get("log_ref")
        return cls(b2=float(d["b2"]), converged=bool(d.get("converged", True)),
                   log_ref=None if ref is None else np.asarray(ref, dtype=np.float64),
                   sort_groups=_sort_groups_from_json(d.get("sort_groups", 0)), **arr)


def _sort_groups_from_json(v):
    return tuple(int(g) for g in v) if isinstance(v, (list, tuple)) else int(v)


def _as_matrix(embeddings):
    if isinstance(embeddings, np.ndarray):
        return embeddings
    F, _, _ = stack(list(embeddings))
    return F


def train_regressor(embeddings: Sequence[Embedding], cfg: RegressorConfig = RegressorConfig()) -> Regressor:
    """Fit ``g`` to push private scores down and public scores up.

    Loss is ``-s * g(e)`` with ``s = +1`` for public and ``-1`` for private
    embeddings, averaged within each membership class so that unequal pool
    sizes do not bias the output offset, plus L2 weight decay. Training is
    full-batch momentum gradient descent for a fixed number of epochs.
    """
    F, member, _ = stack(list(embeddings))
    if len(F) == 0 or not (np.any(member == PRIVATE) and np.any(member == PUBLIC)):
        raise ValueError("regressor training needs both private and public embeddings")
    log_ref = None
    if cfg.log_features:
        log_ref = np.median(np.maximum(F, 0.0), axis=0)
        log_ref = np.where(log_ref > 1e-12, log_ref, 1.0)
    F = preprocess_features(F, log_ref, cfg.sort_groups)
    n, width = F.shape
    if cfg.feature_standardization:
        mean = F.mean(axis=0)
        std = F.std(axis=0)
        std = np.where(std > 1e-12, std, 1.0)
    else:
        mean, std = np.zeros(width), np.ones(width)
    Z = (F - mean) / std
    s = np.where(member == PUBLIC, 1.0, -1.0)
    weight = np.where(member == PUBLIC, 0.5 / np.sum(member == PUBLIC), 0.5 / np.sum(member == PRIVATE))
    coef = -s * weight  # dLoss/dg per row

    rng = np.random.default_rng([cfg.seed, 11])
    H = cfg.hidden_width
    W1 = rng.normal(0.0, 1.0 / math.sqrt(width), size=(width, H))
    b1 = np.zeros(H)
    w2 = rng.normal(0.0, 1.0 / math.sqrt(H), size=H)
    b2 = 0.0
    vel = [np.zeros_like(W1), np.zeros_like(b1), np.zeros_like(w2), 0.0]
    for _ in range(cfg.epochs):
        A = np.tanh(Z @ W1 + b1)
        loss = float(coef @ (A @ w2 + b2))
        if not np.isfinite(loss):
            raise FloatingPointError("regressor loss became non-finite")
        gw2 = A.T @ coef + cfg.weight_decay * w2
        gb2 = float(coef.sum())
        dA = np.outer(coef, w2) * (1.0 - A * A)
        gW1 = Z.T @ dA + cfg.weight_decay * W1
        gb1 = dA.sum(axis=0)
        grads = [gW1, gb1, gw2, gb2]
        for i, g in enumerate(grads):
            vel[i] = cfg.momentum * vel[i] - cfg.lr * g
        W1 = W1 + vel[0]
        b1 = b1 + vel[1]
        w2 = w2 + vel[2]
        b2 = b2 + vel[3]
    reg = Regressor(W1, b1, w2, float(b2), mean, std, True, log_ref, cfg.sort_groups)
    sc = np.tanh(Z @ W1 + b1) @ w2 + b2
    reg.converged = bool(sc[member == PRIVATE].mean() < sc[member == PUBLIC].mean())
    if not reg.converged:
        logger.warning("regressor did not separate private from public on its training pool")
    return reg


def score(reg: Regressor, embeddings) -> np.ndarray:
    """One confidence score per embedding, in input order."""
    F = _as_matrix(embeddings)
    if len(F) == 0:
        return np.zeros(0)
    return reg(F)


# ------------------------------------------------------------ statistics

@dataclass(frozen=True)
class TestResult:
    delta_mu: float
    p_value: float
    n_per_side: int
    t: float = float("nan")
    df: float = float("nan")

    __test__ = False  # not a pytest class


def student_t_sf(t, df):
    """Upper-tail probability of Student's t via the regularized incomplete beta."""
    t = np.asarray(t, dtype=np.float64)
    df = np.asarray(df, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = t * t / (df + t * t)
        # complementary form near t = 0, where df / (df + t^2) rounds to 1
        tail = np.where(y < 0.5, 0.5 * (1.0 - betainc(0.5, df / 2.0, y)),
                        0.5 * betainc(df / 2.0, 0.5, df / (df + t * t)))
    out = np.where(t > 0, tail, 1.0 - tail)
    out = np.where(np.isposinf(t), 0.0, out)
    out = np.where(np.isneginf(t), 1.0, out)
    return out


def _welch_arrays(m1, v1, n1, m2, v2, n2):
    se2 = v1 / n1 + v2 / n2
    diff = m1 - m2
    with np.errstate(divide="ignore", invalid="ignore"):
        t = diff / np.sqrt(se2)
        df = se2 ** 2 / ((v1 / n1) ** 2 / (n1 - 1) + (v2 / n2) ** 2 / (n2 - 1))
    zero = se2 == 0
    t = np.where(zero, np.where(diff > 0, np.inf, np.where(diff < 0, -np.inf, 0.0)), t)
    df = np.where(zero, np.inf, df)
    p = student_t_sf(t, np.where(np.isfinite(df), df, 1e12))
    p = np.where(zero & (diff == 0), 0.5, p)
    return t, df, p


def welch_one_sided(c_public, c_private) -> TestResult:
    """Welch's t-test of ``mean(public) > mean(private)``; p is the upper-tail probability."""
    a = np.asarray(c_public, dtype=np.float64)
    b = np.asarray(c_private, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each sample needs at least two values")
    t, df, p = _welch_arrays(a.mean(), a.var(ddof=1), len(a), b.mean(), b.var(ddof=1), len(b))
    return TestResult(float(a.mean() - b.mean()), float(p), min(len(a), len(b)), float(t), float(df))


def harmonic_mean_p(ps) -> float:
    """Plain harmonic mean ``n / sum(1/p)`` (no asymptotic correction)."""
    ps = np.asarray(list(ps) if not isinstance(ps, np.ndarray) else ps, dtype=np.float64)
    if ps.size == 0:
        raise ValueError("harmonic_mean_p needs at least one p-value")
    if np.any(ps <= 0) or np.any(ps > 1) or not np.all(np.isfinite(ps)):
        raise ValueError("p-values must lie in (0, 1]")
    return float(len(ps) / np.sum(1.0 / ps))


RESAMPLE_MODES = ("half", "bootstrap")


def resampled_p_values(c_public: np.ndarray, c_private: np.ndarray, repetitions: int, rng,
                       mode: str = "half") -> np.ndarray:
    """Welch p-values of ``repetitions`` resamples of both score vectors.

    ``mode="half"`` draws ``ceil(n/2)`` scores per side without replacement;
    ``mode="bootstrap"`` draws ``n`` with replacement. The bootstrap variant
    treats duplicated scores as independent and, combined with a harmonic
    mean, rejects a true null far more often than ``alpha``.
    """
    if mode not in RESAMPLE_MODES:
        raise ValueError(f"unknown resample mode {mode!r}")
    n1, n2 = len(c_public), len(c_private)
    if mode == "bootstrap":
        ia = rng.integers(0, n1, size=(repetitions, n1))
        ib = rng.integers(0, n2, size=(repetitions, n2))
    else:
        ia = np.argsort(rng.random((repetitions, n1)), axis=1)[:, :max(2, -(-n1 // 2))]
        ib = np.argsort(rng.random((repetitions, n2)), axis=1)[:, :max(2, -(-n2 // 2))]
    A, B = c_public[ia], c_private[ib]
    _, _, p = _welch_arrays(A.mean(1), A.var(1, ddof=1), A.shape[1],
                            B.mean(1), B.var(1, ddof=1), B.shape[1])
    return p


# -------------------------------------------------------------- verdicts

@dataclass
class DIPools:
    """Points the victim may reveal: held out from regressor training, drawn from here."""

    private: LabeledSet
    public: LabeledSet
    embedding: EmbeddingConfig
    embed_seed: int = 0


@dataclass
class Verdict:
    decision: str
    aggregated_p: float
    effect_size: float
    ci99: tuple
    alpha: float
    m_revealed: int
    repetitions: int
    bootstrap: int = 0
    seed: int = 0
    threat_kind: Optional[str] = None
    ci99_effect: tuple = (float("nan"), float("nan"))
    replica_p: list = field(default_factory=list)
    replica_effect: list = field(default_factory=list)
    queries_used: int = 0

    @property
    def replica_decisions(self) -> list:
        return [STOLEN if p < self.alpha else INCONCLUSIVE for p in self.replica_p]

    def to_dict(self) -> dict:
        return {
            "decision": self.decision, "aggregated_p": self.aggregated_p,
            "effect_size": self.effect_size, "ci99": list(self.ci99),
            "alpha": self.alpha, "m": self.m_revealed, "repetitions": self.repetitions,
            "bootstrap": self.bootstrap, "seed": self.seed, "threat_kind": self.threat_kind,
            "ci99_effect": list(self.ci99_effect), "replica_p": list(self.replica_p),
            "replica_effect": list(self.replica_effect), "queries_used": self.queries_used,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def aggregate_test(c_public: np.ndarray, c_private: np.ndarray, repetitions: int, rng,
                   mode: str = "half"):
    """Harmonic mean of the resampled Welch p-values and the raw effect size."""
    ps = resampled_p_values(c_public, c_private, repetitions, rng, mode)
    return harmonic_mean_p(np.maximum(ps, P_FLOOR)), float(c_public.mean() - c_private.mean())


def _draw(n_pool: int, m: int, rng) -> np.ndarray:
    return rng.choice(n_pool, size=m, replace=False)


def run_dataset_inference(pools: DIPools, suspect_oracle, regressor: Regressor, m: int,
                          alpha: float = 0.01, repetitions: int = 100, bootstrap: int = 40,
                          seed: int = 0, threat_kind: Optional[str] = None,
                          embedding_cache: Optional[dict] = None,
                          resample: str = "half", columns=None) -> Verdict:
    """Decide whether the suspect behind ``suspect_oracle`` carries the victim's private knowledge.

    The main run reveals ``m`` private and ``m`` public points (drawn without
    replacement from ``pools``), embeds them through the suspect, scores
    them with ``regressor`` and aggregates ``repetitions`` resampled Welch
    tests by harmonic mean (see :func:`resampled_p_values` for
    ``resample``). Each of the ``bootstrap`` replicas redraws its
    own ``m + m`` points and repeats the whole procedure; their 0.5 and 99.5
    percentiles give the 99% intervals. A point is embedded at most once.
    ``columns`` restricts scoring to a subset of embedding features.
    """
    if m < 2:
        raise ValueError("m must be at least 2")
    if m > len(pools.private) or m > len(pools.public):
        raise ValueError(f"m={m} exceeds the available pool "
                         f"({len(pools.private)} private, {len(pools.public)} public)")
    rng = np.random.default_rng([seed, m, 17])
    draws = [(_draw(len(pools.private), m, rng), _draw(len(pools.public), m, rng))
             for _ in range(bootstrap + 1)]
    q0 = getattr(suspect_oracle, "queries_used", 0)
    cache = {} if embedding_cache is None else embedding_cache
    scores = {}
    for name, pool, code in (("private", pools.private, PRIVATE), ("public", pools.public, PUBLIC)):
        rows = np.unique(np.concatenate([d[0 if code == PRIVATE else 1] for d in draws]))
        todo = [r for r in rows if (name, int(pool.index[r])) not in cache]
        if todo:
            embs = embed_dataset(suspect_oracle, pool.subset(np.array(todo)), code,
                                 pools.embedding, pools.embed_seed)
            for e in embs:
                cache[(name, e.source_index)] = e
        sc = np.full(len(pool), np.nan)
        F = np.array([cache[(name, int(pool.index[r]))].features for r in rows])
        sc[rows] = score(regressor, F if columns is None else F[:, columns])
        scores[name] = sc

    results = []
    for priv_rows, pub_rows in draws:
        results.append(aggregate_test(scores["public"][pub_rows], scores["private"][priv_rows],
                                      repetitions, rng, resample))
    p_main, eff_main = results[0]
    rep_p = [r[0] for r in results[1:]]
    rep_e = [r[1] for r in results[1:]]
    ci = tuple(np.percentile(rep_p, [0.5, 99.5]).tolist()) if rep_p else (p_main, p_main)
    ci_e = tuple(np.percentile(rep_e, [0.5, 99.5]).tolist()) if rep_e else (eff_main, eff_main)
    return Verdict(
        decision=STOLEN if p_main < alpha else INCONCLUSIVE,
        aggregated_p=p_main, effect_size=eff_main, ci99=ci, alpha=alpha, m_revealed=m,
        repetitions=repetitions, bootstrap=bootstrap, seed=seed, threat_kind=threat_kind,
        ci99_effect=ci_e, replica_p=rep_p, replica_effect=rep_e,
        queries_used=getattr(suspect_oracle, "queries_used", 0) - q0,
    )
