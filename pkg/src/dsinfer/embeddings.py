"""Distance-to-boundary embeddings of individual examples.

Two generators are provided:

* Blind Walk (label-only): pick a random direction, step ``x + k*delta``
  until the predicted label differs from ``y``, record the distance walked.
  Uniform directions are measured in l_inf, Gaussian in l_2 and Laplace in
  l_1.
* MinGD (white-box): targeted gradient descent on the margin to every other
  class, one run per norm, recording the perturbation size at the first
  iterate classified as the target.

MinGD iterates are clipped to ``box``; Blind Walk iterates only when
``walk_box`` is set. Features that never reach a different label are set
to the cap for that feature.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .models import LabeledSet
from .oracles import GradientOracle, LabelOracle

logger = logging.getLogger(__name__)

PRIVATE = -1
PUBLIC = 1
MEMBERSHIP = {"private": PRIVATE, "public": PUBLIC}

NORM_ORD = {"linf": np.inf, "l2": 2, "l1": 1}
FAMILY_NORM = {"uniform": "linf", "gaussian": "l2", "laplace": "l1"}


@dataclass(frozen=True)
class EmbeddingConfig:
    mode: str = "blind_walk"
    norms: tuple = ("linf", "l2", "l1")
    step_sizes: tuple = (("linf", 0.001), ("l2", 0.01), ("l1", 0.1))
    max_steps_mingd: int = 500
    max_steps_blindwalk: int = 50
    repeats_per_family: int = 10
    noise_families: tuple = ("uniform", "gaussian", "laplace")
    noise_scale: float = 0.02
    # None: each feature is capped at the farthest distance its search can reach
    distance_cap: Optional[float] = None
    target_classes: object = "all"
    # rescale every Blind Walk direction to its family's nominal step length
    renormalize: bool = True
    box: tuple = (0.0, 1.0)
    # clipping walks stalls them at the box faces and burns queries up to the cap
    walk_box: Optional[tuple] = None

    def __post_init__(self):
        if self.mode not in ("min_gd", "blind_walk"):
            raise ValueError(f"unknown embedding mode {self.mode!r}")
        if any(n not in NORM_ORD for n in self.norms):
            raise ValueError(f"norms must be drawn from {sorted(NORM_ORD)}")
        if any(f not in FAMILY_NORM for f in self.noise_families):
            raise ValueError(f"noise families must be drawn from {sorted(FAMILY_NORM)}")
        # canonical order so equal configs compare and hash equal
        object.__setattr__(self, "step_sizes", tuple(sorted(dict(self.step_sizes).items())))
        if self.noise_scale <= 0:
            raise ValueError("noise_scale must be positive")
        if self.distance_cap is not None and self.distance_cap <= 0:
            raise ValueError("distance_cap must be positive")
        tc = self.target_classes
        if tc != "all" and not (isinstance(tc, (int, np.integer)) and tc >= 1):
            raise ValueError("target_classes must be 'all' or a positive top-k count")

    @property
    def step(self) -> dict:
        return dict(self.step_sizes)

    def n_features(self, num_classes: int) -> int:
        if self.mode == "blind_walk":
            return len(self.noise_families) * self.repeats_per_family
        n_cls = num_classes if self.target_classes == "all" else min(int(self.target_classes), num_classes)
        return n_cls * len(self.norms)

    def family_step_length(self, family: str, dim: int) -> float:
        s = self.noise_scale
        return {"uniform": s, "gaussian": s * np.sqrt(dim), "laplace": s * dim}[family]

    def feature_caps(self, dim: int, num_classes: int) -> np.ndarray:
        """Per-feature upper bound, in feature order."""
        if self.mode == "blind_walk":
            caps = [self.max_steps_blindwalk * self.family_step_length(f, dim)
                    for f in self.noise_families for _ in range(self.repeats_per_family)]
        else:
            n_cls = self.n_features(num_classes) // len(self.norms)
            caps = [self.max_steps_mingd * self.step[p] for _ in range(n_cls) for p in self.norms]
        caps = np.asarray(caps, dtype=np.float64)
        if self.distance_cap is not None:
            caps = np.full_like(caps, self.distance_cap)
        return caps

    def to_dict(self) -> dict:
        d = asdict(self)
        d["step_sizes"] = dict(self.step_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EmbeddingConfig":
        d = dict(d)
        for key in ("norms", "noise_families", "box", "walk_box"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        if "step_sizes" in d:
            d["step_sizes"] = tuple(sorted(dict(d["step_sizes"]).items()))
        return cls(**d)


@dataclass
class Embedding:
    features: np.ndarray
    membership: int
    source_index: int
    flagged: bool = False


def stack(embeddings: Sequence[Embedding]):
    """``(features (n, F), membership (n,), source_index (n,))``."""
    if not embeddings:
        return np.zeros((0, 0)), np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    F = np.vstack([e.features for e in embeddings])
    return (F, np.array([e.membership for e in embeddings]),
            np.array([e.source_index for e in embeddings]))


def _norm(diff: np.ndarray, p: str) -> np.ndarray:
    return np.linalg.norm(diff, ord=NORM_ORD[p], axis=-1)


def _membership_code(membership) -> int:
    if isinstance(membership, str):
        return MEMBERSHIP[membership]
    if membership not in (PRIVATE, PUBLIC):
        raise ValueError("membership must be 'private', 'public', -1 or +1")
    return int(membership)


# -------------------------------------------------------------- Blind Walk

def draw_directions(cfg: EmbeddingConfig, dim: int, seed) -> np.ndarray:
    """Walk directions for one point, shape (families * repeats, dim), family-major."""
    rng = np.random.default_rng(seed)
    s = cfg.noise_scale
    out = []
    for fam in cfg.noise_families:
        r = cfg.repeats_per_family
        if fam == "uniform":
            d = rng.uniform(-s, s, size=(r, dim))
        elif fam == "gaussian":
            d = rng.normal(0.0, s, size=(r, dim))
        else:
            d = rng.laplace(0.0, s, size=(r, dim))
        if cfg.renormalize:
            length = _norm(d, FAMILY_NORM[fam])[:, None]
            d = d * (cfg.family_step_length(fam, dim) / length)
        out.append(d)
    return np.vstack(out)


def walk_directions(oracle: LabelOracle, X: np.ndarray, Y: np.ndarray, directions: np.ndarray,
                    norms: Sequence[str], max_steps: int, caps: np.ndarray,
                    box=None) -> np.ndarray:
    """Step every (point, direction) pair until its label leaves ``y``.

    ``X`` (P, dim), ``Y`` (P,), ``directions`` (P, R, dim), ``norms`` and
    ``caps`` have length R. Steps are taken in lock-step across all pairs so
    each round is one batched oracle call over the still-active pairs.
    Iterates are clipped to ``box`` when given. Returns distances (P, R).
    """
    P, R, _ = directions.shape
    dist = np.tile(np.asarray(caps, dtype=np.float64), (P, 1))
    active = np.ones((P, R), dtype=bool)
    norm_of = np.asarray(norms)
    for k in range(1, max_steps + 1):
        pi, ri = np.nonzero(active)
        if len(pi) == 0:
            break
        Xk = X[pi] + k * directions[pi, ri]
        if box is not None:
            Xk = np.clip(Xk, box[0], box[1])
        labels = oracle.query_batch(Xk)
        hit = labels != Y[pi]
        if np.any(hit):
            hp, hr = pi[hit], ri[hit]
            diff = Xk[hit] - X[hp]
            d = np.empty(len(hp))
            for p in set(norm_of[hr]):
                sel = norm_of[hr] == p
                d[sel] = _norm(diff[sel], p)
            dist[hp, hr] = np.minimum(d, dist[hp, hr])
            active[hp, hr] = False
    return dist


def _point_seed(seed, source_index):
    return [int(seed), int(source_index)]


def blind_walk_batch(oracle: LabelOracle, X: np.ndarray, Y: np.ndarray, source_index,
                     cfg: EmbeddingConfig, seed) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.asarray(Y)
    dim = X.shape[1]
    dirs = np.stack([draw_directions(cfg, dim, _point_seed(seed, i)) for i in source_index]) \
        if len(X) else np.zeros((0, cfg.n_features(2), dim))
    fam_norms = [FAMILY_NORM[f] for f in cfg.noise_families for _ in range(cfg.repeats_per_family)]
    caps = cfg.feature_caps(dim, 2)
    return walk_directions(oracle, X, Y, dirs, fam_norms, cfg.max_steps_blindwalk, caps, cfg.walk_box)


def blind_walk_point(oracle: LabelOracle, x, y: int, cfg: EmbeddingConfig, seed,
                     source_index: int = 0, membership="private") -> Embedding:
    """Blind Walk embedding of a single example; directions drawn from ``(seed, source_index)``."""
    if cfg.mode != "blind_walk":
        raise ValueError("blind_walk_point needs an EmbeddingConfig with mode='blind_walk'")
    feats = blind_walk_batch(oracle, np.asarray(x, dtype=np.float64)[None, :], np.array([y]),
                             [source_index], cfg, seed)[0]
    return Embedding(feats, _membership_code(membership), int(source_index))


# ------------------------------------------------------------------ MinGD

def _target_table(logits: np.ndarray, cfg: EmbeddingConfig) -> np.ndarray:
    """Classes occupying each feature slot, shape (P, n_slots)."""
    P, C = logits.shape
    if cfg.target_classes == "all":
        return np.tile(np.arange(C), (P, 1))
    k = min(int(cfg.target_classes), C)
    return np.argsort(-logits, axis=1, kind="stable")[:, :k]


def min_gd_batch(oracle: GradientOracle, X: np.ndarray, Y: np.ndarray, cfg: EmbeddingConfig):
    """MinGD features for a batch; returns ``(features (P, F), flagged (P,))``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.asarray(Y)
    P, dim = X.shape
    C = oracle.num_classes
    targets = _target_table(oracle.logits_batch(X), cfg)
    n_slots = targets.shape[1]
    caps = cfg.feature_caps(dim, C).reshape(n_slots, len(cfg.norms))
    feats = np.zeros((P, n_slots, len(cfg.norms)))
    flagged = np.zeros(P, dtype=bool)
    lo, hi = cfg.box

    pi, si = np.nonzero(targets != Y[:, None])
    tgt = targets[pi, si]
    for j, p in enumerate(cfg.norms):
        alpha = cfg.step[p]
        x0 = X[pi]
        xk = x0.copy()
        out = np.full(len(pi), np.nan)
        active = np.ones(len(pi), dtype=bool)
        bad = np.zeros(len(pi), dtype=bool)
        for step in range(cfg.max_steps_mingd + 1):
            idx = np.nonzero(active)[0]
            if len(idx) == 0:
                break
            pred = oracle.query_batch(xk[idx])
            reached = pred == tgt[idx]
            done = idx[reached]
            out[done] = _norm(xk[done] - x0[done], p)
            active[done] = False
            if step == cfg.max_steps_mingd:
                break
            idx = idx[~reached]
            if len(idx) == 0:
                break
            g = oracle.input_gradient(xk[idx], "margin", tgt[idx])
            finite = np.all(np.isfinite(g), axis=1)
            if not np.all(finite):
                bad[idx[~finite]] = True
                active[idx[~finite]] = False
                idx, g = idx[finite], g[finite]
            if p == "linf":
                upd = np.sign(g)
            elif p == "l2":
                gn = np.linalg.norm(g, axis=1, keepdims=True)
                upd = np.divide(g, gn, out=np.zeros_like(g), where=gn > 0)
            else:
                upd = np.zeros_like(g)
                col = np.argmax(np.abs(g), axis=1)
                rows = np.arange(len(idx))
                upd[rows, col] = np.sign(g[rows, col])
            xk[idx] = np.clip(xk[idx] - alpha * upd, lo, hi)
        unreached = np.isnan(out)
        out[unreached] = caps[si[unreached], j]
        feats[pi, si, j] = out
        np.logical_or.at(flagged, pi[bad], True)
    return feats.reshape(P, n_slots * len(cfg.norms)), flagged


def min_gd_point(oracle: GradientOracle, x, y: int, cfg: EmbeddingConfig,
                 source_index: int = 0, membership="private") -> Embedding:
    """MinGD embedding of a single example (class-major, norm-minor features)."""
    if cfg.mode != "min_gd":
        raise ValueError("min_gd_point needs an EmbeddingConfig with mode='min_gd'")
    if not isinstance(oracle, GradientOracle):
        raise TypeError("MinGD requires gradient access to the model")
    feats, flagged = min_gd_batch(oracle, np.asarray(x, dtype=np.float64)[None, :], np.array([y]), cfg)
    return Embedding(feats[0], _membership_code(membership), int(source_index), bool(flagged[0]))


# --------------------------------------------------------------- datasets

def embed_dataset(oracle, points: LabeledSet, membership, cfg: EmbeddingConfig, seed=0,
                  chunk: int = 256) -> list[Embedding]:
    """Embed every point of ``points``; per-point randomness comes from ``(seed, index)``.

    Work is split into chunks of ``chunk`` points; results do not depend on
    the chunking or on the order of ``points``.
    """
    code = _membership_code(membership)
    if len(points) == 0:
        return []
    out: list[Embedding] = []
    for start in range(0, len(points), chunk):
        sl = slice(start, start + chunk)
        X, Y, idx = points.inputs[sl], points.labels[sl], points.index[sl]
        if cfg.mode == "blind_walk":
            F = blind_walk_batch(oracle, X, Y, idx, cfg, seed)
            flags = np.zeros(len(X), dtype=bool)
        else:
            if not isinstance(oracle, GradientOracle):
                raise TypeError("MinGD requires gradient access to the model")
            F, flags = min_gd_batch(oracle, X, Y, cfg)
        out.extend(Embedding(F[i], code, int(idx[i]), bool(flags[i])) for i in range(len(X)))
    return out


# -------------------------------------------------------------------- I/O

def write_embeddings_csv(path, embeddings: Sequence[Embedding], cfg: Optional[EmbeddingConfig] = None,
                         extra: Optional[dict] = None) -> None:
    """CSV ``source_index,membership,f0..f{F-1}``; the config goes to ``<path>.json``."""
    F = len(embeddings[0].features) if embeddings else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source_index", "membership", *[f"f{i}" for i in range(F)]])
        for e in embeddings:
            w.writerow([e.source_index, e.membership, *[repr(float(v)) for v in e.features]])
    if cfg is not None:
        side = {"embedding_config": cfg.to_dict(), **(extra or {})}
        with open(str(path) + ".json", "w") as fh:
            json.dump(side, fh, indent=2, sort_keys=True)


def read_embeddings_csv(path) -> list[Embedding]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header[:2] != ["source_index", "membership"]:
            raise ValueError(f"{path}: not an embedding matrix file")
        return [Embedding(np.array([float(v) for v in row[2:]]), int(row[1]), int(row[0]))
                for row in r]
