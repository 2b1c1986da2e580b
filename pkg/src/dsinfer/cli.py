"""Command-line driver: ``python -m dsinfer <subcommand> [options]``.

Every subcommand that produces artifacts writes them into
``<out>/<subcommand>-<run id>/`` where the run id hashes the resolved
configuration, the subcommand arguments and the contents of any input
files. An existing run folder is never rewritten.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import jsonschema
import numpy as np

from . import artifacts
from .embeddings import PRIVATE, PUBLIC, embed_dataset, read_embeddings_csv, write_embeddings_csv
from .embeddings import EmbeddingConfig
from .experiments import (ExperimentConfig, as_threat, build_scenario, crossing_m, default_sort_groups,
                          fit_victim_regressor, make_scenario_task, nondecreasing_within_ci,
                          overlap_checks, split_pools, sweep_embed, sweep_m, sweep_overlap,
                          train_victim)
from .inference import INCONCLUSIVE, STOLEN, Regressor, train_regressor
from .oracle_net import MODES, ServerConfig, connect_oracle, serve_model
from .oracles import GradientOracle, LocalOracle, OracleError
from .stealing import THREAT_KINDS, run_attack
from .theory import TheoryParams, monte_carlo_verify

logger = logging.getLogger("dsinfer")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_BAD_INPUT = 0, 1, 3
THEORY_TOLERANCE = {"gap_rel": 0.05, "mi": 0.02, "di": 0.02}
QUERY_BUDGET_PER_POINT = 300


class InputError(Exception):
    pass


# ------------------------------------------------------------------ helpers

def _load_config(args) -> ExperimentConfig:
    raw = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise InputError(f"config file not found: {path}")
        raw = json.loads(path.read_text())
    cfg = ExperimentConfig.from_dict(raw)
    if args.seed is not None:
        cfg = replace(cfg, scenario=replace(cfg.scenario, seed=args.seed))
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    return cfg


def _file_digest(path) -> str:
    if path is None:
        return None
    p = Path(path)
    if not p.is_file():
        raise InputError(f"input file not found: {p}")
    return hashlib.sha256(p.read_bytes()).hexdigest()


def _run_dir(cfg: ExperimentConfig, command: str, **inputs) -> artifacts.RunDir:
    rid = artifacts.run_id(command, cfg.to_dict(), inputs)
    return artifacts.RunDir(cfg.out, f"{command}-{rid}")


def _write_rows(path, rows) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _victim(cfg: ExperimentConfig, path):
    if path:
        return artifacts.load_checkpoint(path)
    return train_victim(cfg.scenario)


def _scenario(cfg: ExperimentConfig, args, regressor=True):
    victim = _victim(cfg, getattr(args, "victim", None))
    sc = build_scenario(cfg.scenario, regressor=False, victim=victim)
    reg_path = getattr(args, "regressor", None)
    if reg_path:
        if not Path(reg_path).is_file():
            raise InputError(f"regressor file not found: {reg_path}")
        sc.regressor = Regressor.from_dict(artifacts.read_json(reg_path))
    elif regressor:
        sc.regressor = fit_victim_regressor(sc)
    return sc


def _suspect_oracle(sc, args):
    """``(oracle, label)`` for --remote, --suspect or --threat, in that order."""
    if args.remote:
        return connect_oracle(args.remote, "label_only"), "remote"
    if args.suspect:
        model = artifacts.load_checkpoint(args.suspect)
        prov = model.train_meta.get("attack") or {}
        kind = prov.get("threat_kind", "suspect")
        if kind == "overlap":
            kind = f"overlap_{prov['overlap_fraction']:g}"
        return sc.oracle_for(model), kind
    return None, args.threat


def _finish(run: artifacts.RunDir, summary: dict, checks: dict) -> int:
    summary = {**summary, "run_dir": str(run.final), "reused": run.existed}
    if checks:
        summary["checks"] = checks
    print(json.dumps(artifacts.jsonable(summary), indent=2, sort_keys=True))
    return EXIT_OK


def _check_exit(args, checks: dict) -> int:
    if args.check and not all(checks.values()):
        failed = [k for k, ok in checks.items() if not ok]
        print(f"check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


# -------------------------------------------------------------- subcommands

def cmd_train_victim(args, cfg: ExperimentConfig) -> int:
    with _run_dir(cfg, "train-victim") as run:
        if not run.existed:
            sc = build_scenario(cfg.scenario, regressor=False)
            indep = sc.suspect("independent")
            artifacts.save_checkpoint(run.path / "victim.ckpt", sc.victim)
            artifacts.save_checkpoint(run.path / "independent.ckpt", indep)
            artifacts.write_json(run.path / "independent.provenance.json", indep.train_meta["attack"])
            artifacts.write_json(run.path / "config.json", cfg.to_dict())
    return _finish(run, {"victim": str(run.final / "victim.ckpt"),
                         "independent": str(run.final / "independent.ckpt")}, {})


def cmd_attack(args, cfg: ExperimentConfig) -> int:
    if args.threat == "all":
        kinds = [k for k in THREAT_KINDS if k != "overlap"]
        kinds += [f"overlap_{f:g}" for f in cfg.overlap_fractions]
    else:
        kinds = [args.threat]
    with _run_dir(cfg, "attack", threats=kinds, victim=_file_digest(args.victim)) as run:
        if not run.existed:
            sc = build_scenario(cfg.scenario, regressor=False, victim=_victim(cfg, args.victim))
            for k in kinds:
                th = as_threat(k)
                model = sc.suspect(th)
                artifacts.save_checkpoint(run.path / f"{th.label}.ckpt", model)
                artifacts.write_json(run.path / f"{th.label}.provenance.json", model.train_meta["attack"])
            artifacts.write_json(run.path / "config.json", cfg.to_dict())
    return _finish(run, {"threats": kinds}, {})


def cmd_serve(args, cfg: ExperimentConfig) -> int:
    model = artifacts.load_checkpoint(args.checkpoint)
    host, _, port = (args.bind or "127.0.0.1:0").rpartition(":")
    scfg = ServerConfig(host=host or "127.0.0.1", port=int(port or 0), mode=args.mode,
                        max_queries_per_connection=args.max_queries)
    srv = serve_model(model, scfg)
    print(json.dumps({"address": "%s:%d" % srv.address, "mode": args.mode}), flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        srv.close()
        print(json.dumps({"total_queries": srv.total_queries}), flush=True)
    return EXIT_OK


def cmd_embed(args, cfg: ExperimentConfig) -> int:
    if bool(args.checkpoint) == bool(args.remote):
        raise InputError("embed needs exactly one of --checkpoint or --remote")
    inputs = dict(checkpoint=_file_digest(args.checkpoint) if args.checkpoint else None,
                  remote=args.remote, pool=args.pool)
    c = cfg.scenario
    with _run_dir(cfg, "embed", **inputs) as run:
        if not run.existed:
            regressor_pools, reveal_pools = split_pools(c, make_scenario_task(c))
            priv, pub = regressor_pools if args.pool == "regressor" else reveal_pools
            if args.remote:
                oracle = connect_oracle(args.remote, "label_only")
            else:
                model = artifacts.load_checkpoint(args.checkpoint)
                oracle = GradientOracle(model) if c.embedding.mode == "min_gd" else LocalOracle(model)
            embs = embed_dataset(oracle, priv, PRIVATE, c.embedding, c.seed) + \
                embed_dataset(oracle, pub, PUBLIC, c.embedding, c.seed)
            write_embeddings_csv(run.path / "embeddings.csv", embs, c.embedding,
                                 {"queries_used": oracle.queries_used, "n_points": len(embs),
                                  "pool": args.pool, "seed": c.seed})
            artifacts.write_json(run.path / "config.json", cfg.to_dict())
            if args.remote:
                oracle.close()
        side = artifacts.read_json((run.path or run.final) / "embeddings.csv.json")
    per_point = side["queries_used"] / max(1, side["n_points"])
    checks = {}
    if c.embedding.mode == "blind_walk":
        checks["queries_per_point_within_budget"] = per_point <= QUERY_BUDGET_PER_POINT
    _finish(run, {"embeddings": str(run.final / "embeddings.csv"), "queries_per_point": per_point}, checks)
    return _check_exit(args, checks)


def cmd_regress(args, cfg: ExperimentConfig) -> int:
    digest = _file_digest(args.embeddings)
    with _run_dir(cfg, "regress", embeddings=digest) as run:
        if not run.existed:
            embs = read_embeddings_csv(args.embeddings)
            side = Path(args.embeddings + ".json")
            emb_cfg = cfg.scenario.embedding
            if side.is_file():
                emb_cfg = EmbeddingConfig.from_dict(artifacts.read_json(side)["embedding_config"])
            reg = train_regressor(embs, replace(cfg.scenario.regressor,
                                                sort_groups=default_sort_groups(emb_cfg)))
            artifacts.write_json(run.path / "regressor.json", reg.to_dict())
            artifacts.write_json(run.path / "config.json", cfg.to_dict())
    return _finish(run, {"regressor": str(run.final / "regressor.json")}, {})


def _expected_decision(label: str):
    if label in ("independent", "overlap_0"):
        return INCONCLUSIVE
    if label in ("remote", "suspect"):
        return None
    return STOLEN


def cmd_infer(args, cfg: ExperimentConfig) -> int:
    inf = cfg.inference
    m = args.m if args.m is not None else max(inf.m)
    alpha = args.alpha
    inputs = dict(victim=_file_digest(args.victim), regressor=_file_digest(args.regressor),
                  suspect=_file_digest(args.suspect), remote=bool(args.remote),
                  threat=args.threat, m=m, alpha=alpha)
    with _run_dir(cfg, "infer", **inputs) as run:
        if not run.existed:
            sc = _scenario(cfg, args)
            oracle, label = _suspect_oracle(sc, args)
            v = sc.infer(label if oracle is None else as_threat("source"), m, alpha, inf.repetitions,
                         inf.bootstrap, oracle=oracle, resample=inf.resample)
            v.threat_kind = label
            artifacts.write_json(run.path / "verdict.json", v.to_dict())
            artifacts.write_json(run.path / "config.json", cfg.to_dict())
            if args.remote:
                oracle.close()
        verdict = artifacts.read_json((run.path or run.final) / "verdict.json")
    expected = _expected_decision(verdict["threat_kind"])
    checks = {} if expected is None else {"decision_matches_threat": verdict["decision"] == expected}
    _finish(run, {k: verdict[k] for k in ("decision", "aggregated_p", "effect_size", "ci99", "m",
                                          "threat_kind")}, checks)
    return _check_exit(args, checks)


def cmd_sweep_m(args, cfg: ExperimentConfig) -> int:
    inf = cfg.inference
    inputs = dict(victim=_file_digest(args.victim), regressor=_file_digest(args.regressor),
                  suspect=_file_digest(args.suspect), remote=bool(args.remote),
                  threat=args.threat, alpha=args.alpha)
    with _run_dir(cfg, "sweep-m", **inputs) as run:
        if not run.existed:
            sc = _scenario(cfg, args)
            oracle, label = _suspect_oracle(sc, args)
            threat = label if oracle is None else "source"
            rows = sweep_m(sc, threat, inf.m, args.alpha, inf.repetitions, inf.bootstrap,
                           resample=inf.resample, oracle=oracle)
            _write_rows(run.path / "sweep_m.csv", rows)
            artifacts.write_json(run.path / "config.json", cfg.to_dict())
            if args.remote:
                oracle.close()
        rows = _read_rows((run.path or run.final) / "sweep_m.csv")
    rows.sort(key=lambda r: r["m"])
    cross = crossing_m(rows, args.alpha)
    checks = {
        "crosses_alpha_by_m50": cross is not None and cross <= 50,
        "p_nonincreasing_in_m_within_ci": nondecreasing_within_ci(
            [-r["median_p"] for r in rows], [-r["ci_high"] for r in rows], [-r["ci_low"] for r in rows]),
    }
    _finish(run, {"crossing_m": cross, "rows": rows}, checks)
    return _check_exit(args, checks)


def cmd_sweep_embed(args, cfg: ExperimentConfig) -> int:
    inf = cfg.inference
    m = args.m if args.m is not None else max(inf.m)
    inputs = dict(victim=_file_digest(args.victim), threat=args.threat, m=m, alpha=args.alpha)
    with _run_dir(cfg, "sweep-embed", **inputs) as run:
        if not run.existed:
            sc = _scenario(cfg, args, regressor=False)
            rows = sweep_embed(sc, args.threat, cfg.embed_sizes, m, args.alpha, inf.repetitions,
                               inf.bootstrap, resample=inf.resample)
            _write_rows(run.path / "sweep_embed.csv", rows)
            artifacts.write_json(run.path / "config.json", cfg.to_dict())
        rows = _read_rows((run.path or run.final) / "sweep_embed.csv")
    checks = {"largest_embedding_significant":
              max(rows, key=lambda r: r["n_features"])["aggregated_p"] < args.alpha}
    _finish(run, {"rows": rows}, checks)
    return _check_exit(args, checks)


def cmd_sweep_overlap(args, cfg: ExperimentConfig) -> int:
    inf = cfg.inference
    m = args.m if args.m is not None else max(inf.m)
    inputs = dict(victim=_file_digest(args.victim), m=m, alpha=args.alpha)
    with _run_dir(cfg, "sweep-overlap", **inputs) as run:
        if not run.existed:
            sc = _scenario(cfg, args)
            rows = sweep_overlap(sc, cfg.overlap_fractions, m, args.alpha, inf.repetitions,
                                 inf.bootstrap, resample=inf.resample)
            _write_rows(run.path / "sweep_overlap.csv", rows)
            artifacts.write_json(run.path / "config.json", cfg.to_dict())
        rows = _read_rows((run.path or run.final) / "sweep_overlap.csv")
    checks = overlap_checks(rows, args.alpha)
    _finish(run, {"rows": rows}, checks)
    return _check_exit(args, checks)


def cmd_theory(args, cfg: ExperimentConfig) -> int:
    t = dict(cfg.theory)
    seed = args.seed if args.seed is not None else 0
    with _run_dir(cfg, "theory", seed=seed) as run:
        if not run.existed:
            params = TheoryParams(K=t["K"], D=t["D"], sigma=t["sigma"], m=t["m"])
            report = monte_carlo_verify(params, t["trials"], seed)
            artifacts.write_json(run.path / "theory.json", report.to_dict())
            artifacts.write_json(run.path / "config.json", cfg.to_dict())
        rep = artifacts.read_json((run.path or run.final) / "theory.json")
    checks = {
        "gap_within_5pct": abs(rep["empirical_gap"] - rep["closed_gap"]) <= THEORY_TOLERANCE["gap_rel"] * abs(rep["closed_gap"]),
        "mi_within_0.02": abs(rep["empirical_mi"] - rep["closed_mi"]) <= THEORY_TOLERANCE["mi"],
        "di_within_0.02": abs(rep["empirical_di"] - rep["closed_di"]) <= THEORY_TOLERANCE["di"],
    }
    _finish(run, rep, checks)
    return _check_exit(args, checks)


def _read_rows(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        conv = {}
        for k, v in r.items():
            if k == "decision":
                conv[k] = v
            elif k in ("m", "n_features"):
                conv[k] = int(v)
            else:
                conv[k] = float(v)
        out.append(conv)
    return out


# ------------------------------------------------------------------- parser

COMMANDS = {
    "train-victim": cmd_train_victim, "attack": cmd_attack, "serve": cmd_serve, "embed": cmd_embed,
    "regress": cmd_regress, "infer": cmd_infer, "sweep-m": cmd_sweep_m,
    "sweep-embed": cmd_sweep_embed, "sweep-overlap": cmd_sweep_overlap, "theory": cmd_theory,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment configuration (JSON)")
    common.add_argument("--seed", type=int, help="override the scenario seed")
    common.add_argument("--out", help="output root (default from config: runs/)")
    common.add_argument("--check", action="store_true",
                        help="exit non-zero if the run misses its acceptance thresholds")
    common.add_argument("-v", "--verbose", action="store_true")

    threat_choices = [k for k in THREAT_KINDS if k != "overlap"]
    p = argparse.ArgumentParser(prog="dsinfer", description="Dataset inference against model stealing.")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("train-victim", parents=[common], help="train and checkpoint the victim and an independent model")

    a = sub.add_parser("attack", parents=[common], help="run one or all threat models")
    a.add_argument("--threat", default="all", help="threat kind, overlap_<fraction> or 'all'")
    a.add_argument("--victim", help="victim checkpoint (default: retrain from config)")

    s = sub.add_parser("serve", parents=[common], help="serve a checkpoint as a network oracle")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--bind", default="127.0.0.1:0", help="host:port (port 0 picks a free one)")
    s.add_argument("--mode", choices=MODES, default="label_only")
    s.add_argument("--max-queries", type=int, default=None, help="per-connection query cap")

    e = sub.add_parser("embed", parents=[common], help="embed the private and public pools")
    e.add_argument("--checkpoint", help="local model to embed against")
    e.add_argument("--remote", help="host:port of a served oracle")
    e.add_argument("--pool", choices=("regressor", "reveal"), default="regressor")

    r = sub.add_parser("regress", parents=[common], help="train the confidence regressor")
    r.add_argument("--embeddings", required=True, help="embedding CSV from 'embed'")

    for name, helptext in (("infer", "dataset inference against one suspect"),
                           ("sweep-m", "p-value against the number of revealed samples")):
        q = sub.add_parser(name, parents=[common], help=helptext)
        q.add_argument("--threat", default="source", help="threat kind or overlap_<fraction>")
        q.add_argument("--suspect", help="suspect checkpoint (instead of --threat)")
        q.add_argument("--remote", help="host:port of a served suspect")
        q.add_argument("--victim", help="victim checkpoint (default: retrain from config)")
        q.add_argument("--regressor", help="regressor JSON from 'regress'")
        q.add_argument("--alpha", type=float, default=0.01)
        if name == "infer":
            q.add_argument("--m", type=int, help="revealed samples per side (default: largest in config)")

    se = sub.add_parser("sweep-embed", parents=[common], help="p-value against embedding size")
    se.add_argument("--threat", default="source", choices=threat_choices)
    se.add_argument("--victim")
    se.add_argument("--m", type=int)
    se.add_argument("--alpha", type=float, default=0.01)

    so = sub.add_parser("sweep-overlap", parents=[common], help="p-value against overlap fraction")
    so.add_argument("--victim")
    so.add_argument("--m", type=int)
    so.add_argument("--alpha", type=float, default=0.01)

    sub.add_parser("theory", parents=[common], help="Monte Carlo check of the linear-model theory")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        return COMMANDS[args.command](args, cfg)
    except jsonschema.ValidationError as exc:
        print(f"config error: {exc.message} at {'/'.join(map(str, exc.absolute_path)) or '<root>'}",
              file=sys.stderr)
        return 2
    except (InputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except OracleError as exc:
        print(f"oracle error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
