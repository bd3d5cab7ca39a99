"""Scoring pipeline, correlation of metrics against the oracle, and CSV/JSON output."""

from __future__ import annotations

import csv
import io
import json
import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .bwd import BwdConfig, BwdEstimate, estimate_bwd, train_bwd
from .critic import CriticConfig, fit_value_head, train_critic
from .dataset import Dataset, RandomPolicy
from .envgen import OracleConfig, generate_dataset, make_env, oracle_score
from .errors import BwdqError, InvalidArgument, UndefinedCorrelation
from .metrics import MetricReport, compute_metrics
from .util import config_hash

log = logging.getLogger(__name__)

METRICS = ("mean_reward", "mean_q", "mean_advantage", "pd_random", "bwd")
CSV_COLUMNS = ["dataset", "quality_meta", "mean_reward", "mean_q", "mean_advantage", "pd_random", "bwd",
               "oracle", "n_samples", "seed", "status"]


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise InvalidArgument("pearson needs two equal-length 1-d sequences")
    if len(x) < 3:
        raise InvalidArgument("correlation needs at least 3 points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelation("correlation undefined: zero variance")
    r = float(dx @ dy) / np.sqrt(sxx * syy)
    return float(min(1.0, max(-1.0, r)))


def spearman(x, y) -> float:
    """Pearson on average ranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise InvalidArgument("spearman needs two equal-length 1-d sequences")
    return pearson(rankdata(x), rankdata(y))


@dataclass
class ScoreConfig:
    critic: CriticConfig = field(default_factory=CriticConfig)
    bwd: BwdConfig = field(default_factory=BwdConfig)
    value_steps: int = 5000
    n_samples: int = 20_000
    k_actions: int = 8
    subsample: int | None = None
    random_std: float = 1.0

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreConfig":
        d = dict(d)
        return cls(CriticConfig(**d.pop("critic", {})), BwdConfig(**d.pop("bwd", {})), **d)


@dataclass
class SuiteConfig:
    score: ScoreConfig = field(default_factory=ScoreConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    compute_oracle: bool = True
    seed: int = 0
    workers: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "SuiteConfig":
        d = dict(d)
        return cls(ScoreConfig.from_dict(d.pop("score", {})), OracleConfig(**d.pop("oracle", {})), **d)


def score_dataset(dataset: Dataset, config: ScoreConfig | None = None,
                  seed: int = 0) -> tuple[MetricReport, BwdEstimate]:
    """Critic, value head, the four baseline metrics and the BWD estimate for one dataset."""
    config = config or ScoreConfig()
    ss = np.random.SeedSequence(seed).spawn(6)
    if config.subsample is not None and config.subsample < len(dataset):
        if config.subsample < 1:
            raise InvalidArgument("subsample must be positive")
        idx = np.sort(np.random.default_rng(ss[0]).choice(len(dataset), config.subsample, replace=False))
        dataset = dataset.subset(idx)
    rp = RandomPolicy(dataset.act_dim, config.random_std)
    critic, _ = train_critic(dataset, config.critic, np.random.default_rng(ss[1]))
    vh = fit_value_head(critic, dataset, config.value_steps, config.critic.batch_size, np.random.default_rng(ss[2]),
                        config.critic.learning_rate, config.critic.hidden_dim)
    h = config_hash(asdict(config))
    metric_seed = int(np.random.default_rng(ss[3]).integers(2**31 - 1))
    report = compute_metrics(critic, vh, dataset, rp, config.n_samples, config.k_actions, metric_seed, h)
    report.seeds = [seed]
    pot, _ = train_bwd(critic, dataset, rp, config.bwd, np.random.default_rng(ss[4]))
    est = estimate_bwd(pot, critic, dataset, rp, config.bwd, np.random.default_rng(ss[5]))
    return report, est


@dataclass
class SuiteEntry:
    dataset_id: str
    dataset: Dataset
    quality: str = ""
    seed: int = 0
    env: str = ""


@dataclass
class SuiteRow:
    dataset_id: str
    quality: str
    seed: int
    env: str
    metrics: MetricReport | None = None
    bwd: BwdEstimate | None = None
    oracle: float | None = None
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None

    def value(self, name: str) -> float:
        if name == "bwd":
            return self.bwd.value
        if name == "oracle":
            return self.oracle
        return getattr(self.metrics, name)


@dataclass
class SuiteResult:
    rows: list[SuiteRow]
    pearson: dict
    spearman: dict
    per_env: dict = field(default_factory=dict)
    averaged: list[dict] = field(default_factory=list)
    config_hash: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SuiteResult":
        d = json.loads(text)
        rows = []
        for r in d.pop("rows"):
            m, b = r.pop("metrics"), r.pop("bwd")
            rows.append(SuiteRow(**r, metrics=MetricReport(**m) if m else None, bwd=BwdEstimate(**b) if b else None))
        return cls(rows, **d)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            if r.failed:
                w.writerow([r.dataset_id, r.quality] + [""] * 7 + [r.seed, "failed: " + r.error])
                continue
            w.writerow([r.dataset_id, r.quality] + [repr(r.value(m)) for m in METRICS]
                       + [repr(r.oracle) if r.oracle is not None else "", r.metrics.n_samples, r.seed, "ok"])
        for a in self.averaged:
            w.writerow([a["dataset"], a["quality"]] + [repr(a[m]) for m in METRICS]
                       + [repr(a["oracle"]) if a["oracle"] is not None else "", a["n_samples"], "mean",
                          f"averaged over {a['n_seeds']}"])
        return buf.getvalue()


def seed_average(rows: list[SuiteRow]) -> list[dict]:
    """Mean of every metric over seeds, grouped by (env, quality); failed rows excluded."""
    groups = defaultdict(list)
    for r in rows:
        if not r.failed:
            groups[(r.env, r.quality)].append(r)
    out = []
    for (env, q), rs in sorted(groups.items(), key=lambda kv: (kv[0][0], float(kv[0][1] or 0))):
        a = {"dataset": f"{env}_q{q}", "env": env, "quality": q, "n_seeds": len(rs),
             "n_samples": int(np.mean([r.metrics.n_samples for r in rs]))}
        for m in METRICS:
            a[m] = float(np.mean([r.value(m) for r in rs]))
        has_oracle = all(r.oracle is not None for r in rs)
        a["oracle"] = float(np.mean([r.oracle for r in rs])) if has_oracle else None
        out.append(a)
    return out


def correlations(averaged: list[dict], target: str = "oracle") -> tuple[dict, dict]:
    """(pearson, spearman) of every metric against ``target`` over averaged groups; None when undefined."""
    pts = [a for a in averaged if a.get(target) is not None]
    pr, sr = {}, {}
    for m in METRICS:
        x = [a[m] for a in pts]
        y = [float(a[target]) for a in pts]
        for out, fn in ((pr, pearson), (sr, spearman)):
            try:
                out[m] = fn(x, y)
            except (UndefinedCorrelation, InvalidArgument):
                out[m] = None
    return pr, sr


def graded_suite(env_name: str, levels, n: int, seeds: int, mix_seeds: int = 5, seed: int = 0,
                 env_seed: int = 0) -> tuple[object, list[SuiteEntry]]:
    """One dataset per (level, replicate), replicate r drawn from SeedSequence([seed, r])
    exactly as ``bwdq generate`` does."""
    env = make_env(env_name, env_seed)
    entries = []
    for rep in range(seeds):
        rng = np.random.default_rng(np.random.SeedSequence([seed, rep]))
        for q, ds in zip(levels, generate_dataset(env, levels, n, mix_seeds, rng)):
            entries.append(SuiteEntry(f"{env_name}_q{q:g}_s{rep}", ds, f"{q:g}", rep, env_name))
    return env, entries


def run_suite(entries: list[SuiteEntry], env=None, config: SuiteConfig | None = None) -> SuiteResult:
    """Score every dataset, compute its oracle, then correlate.

    Per-dataset seeds derive from (config.seed, position), so results do not
    depend on the worker count. A failing dataset is logged and flagged.
    """
    config = config or SuiteConfig()
    if len(entries) < 3:
        raise InvalidArgument("a suite needs at least 3 datasets")

    def one(i: int, e: SuiteEntry) -> SuiteRow:
        row = SuiteRow(e.dataset_id, e.quality, e.seed, e.env)
        ss = np.random.SeedSequence([config.seed, i])
        s_score, s_oracle = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
        try:
            row.metrics, row.bwd = score_dataset(e.dataset, config.score, s_score)
            if config.compute_oracle:
                e_env = env if env is not None else make_env(e.env)
                row.oracle, _ = oracle_score(e.dataset, e_env, np.random.default_rng(s_oracle), config.oracle)
        except BwdqError as err:
            log.warning("dataset %s failed: %s", e.dataset_id, err)
            row.metrics = row.bwd = row.oracle = None
            row.error = f"{type(err).__name__}: {err}"
        else:
            log.info("scored %s: bwd=%.4g oracle=%s", e.dataset_id, row.bwd.value, row.oracle)
        return row

    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            rows = list(pool.map(lambda p: one(*p), enumerate(entries)))
    else:
        rows = [one(i, e) for i, e in enumerate(entries)]
    averaged = seed_average(rows)
    pr, sr = correlations(averaged)
    per_env = {}
    for env_name in sorted({a["env"] for a in averaged}):
        p, s = correlations([a for a in averaged if a["env"] == env_name])
        per_env[env_name] = {"pearson": p, "spearman": s}
    hashed = asdict(config)
    hashed.pop("workers")  # results do not depend on it
    return SuiteResult(rows, pr, sr, per_env, averaged, config_hash(hashed))
