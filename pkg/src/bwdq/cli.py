"""Command-line entry point: generate, score, correlate, train.

Settings resolve as flag > ``--config`` JSON file > built-in default, and the
resolved settings are written to ``<out>/config.json`` with their hash.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import dataset as dsmod
from .bwd import BwdConfig
from .critic import CriticConfig
from .envgen import OracleConfig, generate_dataset, make_env
from .errors import BwdqError, InvalidArgument
from .iql import IqlConfig, RegConfig, iql_config_hash, save_agent, train_iql, write_curve
from .report import CSV_COLUMNS, ScoreConfig, SuiteConfig, SuiteEntry, run_suite, score_dataset
from .util import config_hash

log = logging.getLogger("bwdq")

SHARED_DEFAULTS = {
    "seed": 0, "gamma": None, "epsilon": 1.0, "cost_scale": None, "k_negatives": 8, "critic_steps": 10_000,
    "ot_steps": 10_000, "batch_size": 256, "subsample": None, "workers": 1,
}
DEFAULTS = {
    "generate": {"env": "pointmass", "env_seed": 0, "levels": "0,0.25,0.5,0.75,1", "n": 20_000, "seeds": 3,
                 "mix_seeds": 5, "episode_length": None},
    "score": {"value_steps": 5000, "n_samples": 20_000},
    "correlate": {"value_steps": 5000, "n_samples": 20_000, "oracle": True, "oracle_bc_steps": 5000,
                  "oracle_iql_steps": 10_000},
    "train": {"env": None, "env_seed": None, "steps": 50_000, "eval_every": 5000, "eval_episodes": 10,
              "bwd": False, "lambda_bwd": 1.0},
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bwdq", description="Offline-RL dataset quality via the Bellman-Wasserstein "
                                "distance.")
    sub = p.add_subparsers(dest="command", required=True)

    shared = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    shared.add_argument("--seed", type=int)
    shared.add_argument("--out", default="out", help="output directory")
    shared.add_argument("--config", help="JSON file of settings (flags override it)")
    shared.add_argument("--gamma", type=float, help="override the dataset discount")
    shared.add_argument("--epsilon", type=float)
    shared.add_argument("--cost-scale", type=float, dest="cost_scale")
    shared.add_argument("--k-negatives", type=int, dest="k_negatives")
    shared.add_argument("--critic-steps", type=int, dest="critic_steps")
    shared.add_argument("--ot-steps", type=int, dest="ot_steps")
    shared.add_argument("--batch-size", type=int, dest="batch_size")
    shared.add_argument("--subsample", type=int)
    shared.add_argument("--workers", type=int)
    shared.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    g = sub.add_parser("generate", parents=[shared], argument_default=argparse.SUPPRESS,
                       help="write quality-graded datasets and a manifest")
    g.add_argument("--env", choices=["pointmass", "pointmass4", "grid"])
    g.add_argument("--env-seed", type=int, dest="env_seed", help="seed of the random GridMDP")
    g.add_argument("--levels", help="comma-separated quality levels in [0, 1]")
    g.add_argument("--n", type=int, help="transitions per dataset")
    g.add_argument("--seeds", type=int, help="replicate datasets per level")
    g.add_argument("--mix-seeds", type=int, dest="mix_seeds", help="policy runs mixed into each dataset")
    g.add_argument("--episode-length", type=int, dest="episode_length")

    s = sub.add_parser("score", parents=[shared], argument_default=argparse.SUPPRESS,
                       help="baseline metrics and BWD for one dataset")
    s.add_argument("dataset", help=".bwds or .jsonl file")
    s.add_argument("--value-steps", type=int, dest="value_steps")
    s.add_argument("--n-samples", type=int, dest="n_samples")

    c = sub.add_parser("correlate", parents=[shared], argument_default=argparse.SUPPRESS,
                       help="score a manifest's datasets and correlate with the oracle")
    c.add_argument("manifest")
    c.add_argument("--value-steps", type=int, dest="value_steps")
    c.add_argument("--n-samples", type=int, dest="n_samples")
    c.add_argument("--no-oracle", action="store_false", dest="oracle")
    c.add_argument("--oracle-bc-steps", type=int, dest="oracle_bc_steps")
    c.add_argument("--oracle-iql-steps", type=int, dest="oracle_iql_steps")

    t = sub.add_parser("train", parents=[shared], argument_default=argparse.SUPPRESS,
                       help="IQL, optionally BWD-regularized")
    t.add_argument("dataset")
    t.add_argument("--env", choices=["pointmass", "pointmass4", "grid"],
                   help="defaults to the env recorded in a sibling manifest.json")
    t.add_argument("--env-seed", type=int, dest="env_seed")
    t.add_argument("--steps", type=int)
    t.add_argument("--eval-every", type=int, dest="eval_every")
    t.add_argument("--eval-episodes", type=int, dest="eval_episodes")
    t.add_argument("--bwd", action="store_true")
    t.add_argument("--lambda", type=float, dest="lambda_bwd")
    return p


def resolve(args: argparse.Namespace) -> dict:
    """Flag > config file > default."""
    cfg = dict(SHARED_DEFAULTS)
    cfg.update(DEFAULTS[args.command])
    given = vars(args)
    if "config" in given:
        try:
            from_file = json.loads(Path(given["config"]).read_text())
        except OSError as e:
            raise InvalidArgument(f"cannot read config file {given['config']}: {e}") from e
        except json.JSONDecodeError as e:
            raise InvalidArgument(f"config file {given['config']} is not valid JSON: {e}") from e
        if isinstance(from_file.get("config"), dict):  # accept a previous run's config.json
            from_file = from_file["config"]
        unknown = set(from_file) - set(cfg)
        if unknown:
            raise InvalidArgument(f"unknown config keys: {sorted(unknown)}")
        cfg.update(from_file)
    for k, v in given.items():
        if k not in ("command", "config", "out", "log_level", "dataset", "manifest"):
            cfg[k] = v
    _validate(args.command, cfg)
    return cfg


def _validate(command: str, cfg: dict) -> None:
    for k in ("k_negatives", "critic_steps", "ot_steps", "batch_size", "workers"):
        if cfg[k] < 1:
            raise InvalidArgument(f"{k} must be >= 1")
    if cfg["epsilon"] <= 0:
        raise InvalidArgument("epsilon must be positive")
    if cfg["cost_scale"] is not None and cfg["cost_scale"] <= 0:
        raise InvalidArgument("cost-scale must be positive")
    if cfg["gamma"] is not None and not 0.0 < cfg["gamma"] < 1.0:
        raise InvalidArgument("gamma must lie in (0, 1)")
    if cfg["subsample"] is not None and cfg["subsample"] < 1:
        raise InvalidArgument("subsample must be >= 1")
    if command == "generate":
        _levels(cfg["levels"])
        if cfg["n"] < 1 or cfg["seeds"] < 1 or cfg["mix_seeds"] < 1:
            raise InvalidArgument("n, seeds and mix-seeds must be >= 1")
    if command == "train":
        if not cfg["lambda_bwd"] >= 0:
            raise InvalidArgument("lambda must be non-negative")
        if cfg["steps"] < 1 or cfg["eval_every"] < 1:
            raise InvalidArgument("steps and eval-every must be >= 1")


def _levels(text) -> list[float]:
    try:
        levels = [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError as e:
        raise InvalidArgument(f"bad --levels {text!r}") from e
    if not levels or any(not 0.0 <= q <= 1.0 for q in levels):
        raise InvalidArgument(f"quality levels must lie in [0, 1], got {text!r}")
    return levels


def _out_dir(args) -> Path:
    out = Path(getattr(args, "out", "out"))
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise InvalidArgument(f"cannot create output directory {out}: {e}") from e
    return out


def _write_config(out: Path, command: str, cfg: dict) -> None:
    doc = {"command": command, "config": cfg, "hash": config_hash(cfg)}
    (out / "config.json").write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def _load_dataset(path) -> dsmod.Dataset:
    path = Path(path)
    if not path.is_file():
        raise InvalidArgument(f"dataset file not found: {path}")
    if path.suffix == ".jsonl":
        return dsmod.load_jsonl(path)
    return dsmod.load(path)


def _manifest_entry(path: Path) -> dict | None:
    man = path.parent / "manifest.json"
    if not man.is_file():
        return None
    for e in json.loads(man.read_text())["datasets"]:
        if e["file"] == path.name:
            return e
    return None


def _score_config(cfg: dict) -> ScoreConfig:
    return ScoreConfig(
        critic=CriticConfig(steps=cfg["critic_steps"], batch_size=cfg["batch_size"], discount=cfg["gamma"]),
        bwd=BwdConfig(ot_steps=cfg["ot_steps"], batch_size=cfg["batch_size"], k_negatives=cfg["k_negatives"],
                      epsilon=cfg["epsilon"], cost_scale=cfg["cost_scale"]),
        value_steps=cfg["value_steps"], n_samples=cfg["n_samples"], k_actions=cfg["k_negatives"],
        subsample=cfg["subsample"],
    )


def cmd_generate(args, cfg) -> int:
    out = _out_dir(args)
    env = make_env(cfg["env"], cfg["env_seed"])
    levels = _levels(cfg["levels"])
    entries = []
    for rep in range(cfg["seeds"]):
        rng = np.random.default_rng(np.random.SeedSequence([cfg["seed"], rep]))
        sets = generate_dataset(env, levels, cfg["n"], cfg["mix_seeds"], rng,
                                discount=cfg["gamma"], episode_length=cfg["episode_length"])
        for q, ds in zip(levels, sets):
            name = f"{cfg['env']}_q{q:g}_s{rep}.bwds"
            dsmod.save(ds, out / name)
            entries.append({"file": name, "env": cfg["env"], "env_seed": cfg["env_seed"], "quality": f"{q:g}",
                            "seed": rep, "n": len(ds), "meta": ds.meta})
            log.info("wrote %s (%d transitions)", out / name, len(ds))
    man = {"datasets": entries, "config_hash": config_hash(cfg)}
    (out / "manifest.json").write_text(json.dumps(man, sort_keys=True, indent=1) + "\n")
    _write_config(out, "generate", cfg)
    return 0


def cmd_score(args, cfg) -> int:
    out = _out_dir(args)
    path = Path(args.dataset)
    ds = _load_dataset(path)
    entry = _manifest_entry(path) or {}
    report, est = score_dataset(ds, _score_config(cfg), cfg["seed"])
    quality = entry.get("quality", ds.meta.get("quality", ""))
    doc = {"dataset": path.name, "quality_meta": quality, "metrics": asdict(report), "bwd": asdict(est)}
    (out / "report.json").write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    w.writerow([path.name, quality, repr(report.mean_reward), repr(report.mean_q), repr(report.mean_advantage),
                repr(report.pd_random), repr(est.value), "", report.n_samples, cfg["seed"], "ok"])
    (out / "report.csv").write_text(buf.getvalue())
    _write_config(out, "score", cfg)
    log.info("BWD %.6g +- %.2g, mean_reward %.4g", est.value, est.std_error, report.mean_reward)
    return 0


def cmd_correlate(args, cfg) -> int:
    out = _out_dir(args)
    man_path = Path(args.manifest)
    if not man_path.is_file():
        raise InvalidArgument(f"manifest not found: {man_path}")
    man = json.loads(man_path.read_text())
    entries = []
    for e in man["datasets"]:
        ds = _load_dataset(man_path.parent / e["file"])
        entries.append(SuiteEntry(e["file"], ds, e["quality"], int(e["seed"]), e["env"]))
    env_seeds = {e.get("env_seed", 0) for e in man["datasets"]}
    envs = {e["env"] for e in man["datasets"]}
    env = make_env(envs.pop(), env_seeds.pop()) if len(envs) == 1 and len(env_seeds) == 1 else None
    suite_cfg = SuiteConfig(_score_config(cfg), OracleConfig(bc_steps=cfg["oracle_bc_steps"],
                                                             iql_steps=cfg["oracle_iql_steps"]),
                            cfg["oracle"], cfg["seed"], cfg["workers"])
    res = run_suite(entries, env, suite_cfg)
    (out / "suite.json").write_text(res.to_json() + "\n")
    (out / "suite.csv").write_text(res.to_csv())
    _write_config(out, "correlate", cfg)
    for m, r in res.pearson.items():
        log.info("pearson(%s, oracle) = %s", m, r)
    return 0


def cmd_train(args, cfg) -> int:
    out = _out_dir(args)
    path = Path(args.dataset)
    ds = _load_dataset(path)
    entry = _manifest_entry(path) or {}
    env_name = cfg["env"] or entry.get("env")
    if env_name is None:
        raise InvalidArgument("--env is required when no manifest.json records the dataset's environment")
    env_seed = cfg["env_seed"] if cfg["env_seed"] is not None else entry.get("env_seed", 0)
    env = make_env(env_name, env_seed)
    iql_cfg = IqlConfig(total_steps=cfg["steps"], eval_every=cfg["eval_every"], eval_episodes=cfg["eval_episodes"],
                        batch_size=cfg["batch_size"], discount=cfg["gamma"])
    reg = None
    if cfg["bwd"]:
        reg = RegConfig(lambda_bwd=cfg["lambda_bwd"], epsilon=cfg["epsilon"], cost_scale=cfg["cost_scale"],
                        k_negatives=cfg["k_negatives"], batch_size=cfg["batch_size"],
                        critic_steps=cfg["critic_steps"])
    agent, curve = train_iql(ds, env, reg, iql_cfg, seed=cfg["seed"])
    write_curve(curve, out / "curve.csv")
    save_agent(agent, out / "agent")
    _write_config(out, "train", cfg)
    log.info("final normalized return %.2f (%s)", curve[-1].normalized_return, iql_config_hash(iql_cfg, reg))
    return 0


COMMANDS = {"generate": cmd_generate, "score": cmd_score, "correlate": cmd_correlate, "train": cmd_train}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(args, "log_level", "INFO"), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](args, cfg)
    except BwdqError as e:
        log.error("%s", e)
        return e.exit_code
    except (InvalidArgument, ValueError) as e:
        log.error("%s", e)
        return 2
    except OSError as e:
        log.error("%s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
