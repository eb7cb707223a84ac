"""Experiment orchestration: configs, per-seed runs, resume, aggregation and plot data."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import platform
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy
from scipy.special import expit

from . import __version__
from .agent import AdamConfig, AgentParams, PretrainLog, encode_prompt, init_agent, pretrain
from .datagen import (
    ProcessParams,
    autocorrelation,
    generate_corpus,
    process_logits,
    sample_process_params,
)
from .finetune import (
    EnsembleILHFLearner,
    EpisodeStreams,
    ILHFLearner,
    Learner,
    ReinforceLearner,
    TokenProcessEnv,
    didactic_setup,
    interaction_rows,
    run_episode,
)
from .metrics import DidacticEvalSet, KLEvalSet, inclusive_score_ratio
from .rng import stream

EXPERIMENTS = ("didactic", "main", "ablation_tau", "ablation_ensemble", "head2head")
ALGORITHMS = ("ilhf", "ensemble_ilhf", "reinforce")
FIGURES = ("didactic-rate", "didactic-kl", "main-kl", "ablate-ensemble", "ablate-tau", "head2head", "autocorr")
BETA_GRID = (0.0, 0.01, 0.1, 1.0)
ENSEMBLE_SIZES = (10, 15, 30, 50)


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ configs


@dataclass
class PretrainConfig:
    samples: int = 1000
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 64


@dataclass
class AgentSpec:
    algorithm: str = "ilhf"
    beta: float = 0.0
    ensemble_size: int = 1
    prior_scale: float = 0.01
    eta: float = 1.0

    @property
    def label(self) -> str:
        if self.algorithm == "reinforce":
            return f"reinforce_beta={self.beta:g}"
        if self.algorithm == "ensemble_ilhf":
            return f"ensemble_ilhf_{self.ensemble_size}"
        return "ilhf"

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.beta != 0 and self.algorithm != "reinforce":
            raise ConfigError("beta is only meaningful for reinforce")
        if self.ensemble_size < 1:
            raise ConfigError("ensemble_size must be >= 1")
        if self.ensemble_size != 1 and self.algorithm != "ensemble_ilhf":
            raise ConfigError("ensemble_size > 1 requires algorithm ensemble_ilhf")
        if self.prior_scale < 0:
            raise ConfigError("prior_scale must be >= 0")


@dataclass
class FinetuneConfig:
    episodes: int = 100
    prompts_per_episode: int = 64
    temperature: float = 3.0
    lr: float = 1e-3
    agents: list[AgentSpec] = field(default_factory=lambda: [AgentSpec()])


@dataclass
class EvalConfig:
    batch: int = 500
    cadence: int = 1
    head2head_prompts: int = 500
    # (candidate label, reference label) pairs scored after fine-tuning
    head2head: list[list[str]] = field(default_factory=list)
    autocorr_length: int = 1000
    autocorr_max_lag: int = 50


@dataclass
class ExperimentConfig:
    experiment: str = "main"
    d: int = 2
    D: int = 10
    taus: list[int] = field(default_factory=lambda: [64])
    perturbation_variance: float = 0.3
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seeds: list[int] = field(default_factory=lambda: list(range(20)))
    master_seed: int = 0
    resample_process: bool = True
    log_interactions: bool = False
    checkpoints: bool = True

    def validate(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if self.d < 1 or self.D < 1:
            raise ConfigError("d and D must be >= 1")
        if not self.taus or any(t < 1 for t in self.taus) or len(set(self.taus)) != len(self.taus):
            raise ConfigError("taus must be distinct positive integers")
        if self.perturbation_variance < 0:
            raise ConfigError("perturbation_variance must be >= 0")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds) or min(self.seeds) < 0:
            raise ConfigError("seeds must be distinct nonnegative integers")
        p, f, e = self.pretrain, self.finetune, self.eval
        if p.samples < 1 or p.epochs < 0 or p.lr <= 0 or p.batch_size < 1:
            raise ConfigError("invalid pretrain config")
        if f.episodes < 1 or f.prompts_per_episode < 1 or f.temperature <= 0 or f.lr <= 0:
            raise ConfigError("invalid finetune config")
        if not f.agents:
            raise ConfigError("no agents configured")
        for spec in f.agents:
            spec.validate()
        labels = [s.label for s in f.agents]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"duplicate agent labels: {labels}")
        if e.batch < 1 or e.cadence < 1 or e.head2head_prompts < 1:
            raise ConfigError("invalid eval config")
        for pair in e.head2head:
            if len(pair) != 2 or not set(pair) <= set(labels):
                raise ConfigError(f"head-to-head pair {pair} must name two configured agents")
        if self.experiment == "didactic" and self.taus != [1]:
            raise ConfigError("the didactic experiment uses single-token responses (taus = [1])")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        return _build(cls, doc)

    def fingerprint(self) -> str:
        return config_fingerprint(self)


def _build(cls, doc):
    if not isinstance(doc, dict):
        raise ConfigError(f"expected an object for {cls.__name__}, got {type(doc).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(doc) - set(known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    nested = {"pretrain": PretrainConfig, "finetune": FinetuneConfig, "eval": EvalConfig}
    for key, value in doc.items():
        if cls is ExperimentConfig and key in nested:
            kwargs[key] = _build(nested[key], value)
        elif cls is FinetuneConfig and key == "agents":
            kwargs[key] = [_build(AgentSpec, a) for a in value]
        else:
            kwargs[key] = value
    return cls(**kwargs)


def merge_config(base: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Deep-merge a partial JSON document onto ``base``; lists replace wholesale."""

    def merge(a: dict, b: dict) -> dict:
        out = dict(a)
        for k, v in b.items():
            out[k] = merge(a[k], v) if isinstance(v, dict) and isinstance(a.get(k), dict) else v
        return out

    return ExperimentConfig.from_dict(merge(base.to_dict(), overrides))


def load_config(path: str | Path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    doc = json.loads(Path(path).read_text())
    cfg = merge_config(base, doc) if base is not None else ExperimentConfig.from_dict(doc)
    cfg.validate()
    return cfg


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def config_fingerprint(config: ExperimentConfig | dict) -> str:
    doc = config.to_dict() if isinstance(config, ExperimentConfig) else config
    return hashlib.sha256(canonical_json(doc).encode("utf-8")).hexdigest()


# ------------------------------------------------------------------ presets


def _main_agents(betas=BETA_GRID, sizes=ENSEMBLE_SIZES) -> list[AgentSpec]:
    agents = [AgentSpec("ilhf")]
    agents += [AgentSpec("reinforce", beta=b) for b in betas]
    agents += [AgentSpec("ensemble_ilhf", ensemble_size=m) for m in sizes]
    return agents


def preset(name: str) -> ExperimentConfig:
    if name == "didactic":
        agents = [AgentSpec("ilhf")] + [AgentSpec("reinforce", beta=b) for b in BETA_GRID]
        return ExperimentConfig(
            experiment="didactic",
            D=2,
            taus=[1],
            pretrain=PretrainConfig(samples=1000, epochs=200),
            finetune=FinetuneConfig(episodes=3000, temperature=1.0, agents=agents),
            eval=EvalConfig(batch=3000),
        )
    if name == "main":
        h2h = [[f"ensemble_ilhf_{m}", "ilhf"] for m in ENSEMBLE_SIZES]
        h2h += [["ensemble_ilhf_50", f"reinforce_beta={b:g}"] for b in BETA_GRID]
        return ExperimentConfig(
            experiment="main", finetune=FinetuneConfig(agents=_main_agents()), eval=EvalConfig(head2head=h2h)
        )
    if name == "ablation_ensemble":
        return ExperimentConfig(
            experiment="ablation_ensemble", finetune=FinetuneConfig(agents=_main_agents(betas=()))
        )
    if name == "ablation_tau":
        agents = [AgentSpec("ilhf"), AgentSpec("reinforce", beta=0.1), AgentSpec("ensemble_ilhf", ensemble_size=10)]
        return ExperimentConfig(
            experiment="ablation_tau", taus=[128, 256], finetune=FinetuneConfig(episodes=150, agents=agents)
        )
    if name == "head2head":
        h2h = [[f"ensemble_ilhf_{m}", "ilhf"] for m in ENSEMBLE_SIZES]
        return ExperimentConfig(
            experiment="head2head", finetune=FinetuneConfig(agents=_main_agents(betas=())), eval=EvalConfig(head2head=h2h)
        )
    raise ConfigError(f"no preset named {name!r}")


# ------------------------------------------------------------------ results


@dataclass
class SeedResult:
    seed: int
    fingerprint: str
    # metric name -> [[episode, value], ...]
    metrics: dict[str, list[list[float]]]
    head2head: list[dict] = field(default_factory=list)
    pretrain_loss: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "SeedResult":
        return cls(**doc)


@dataclass
class RunResult:
    config: ExperimentConfig
    fingerprint: str
    seeds: dict[int, SeedResult]
    wall_clock: dict[str, float] = field(default_factory=dict)
    version: str = __version__

    def metric_names(self) -> list[str]:
        return sorted({m for r in self.seeds.values() for m in r.metrics})


@dataclass
class _SeedOutput:
    """What a worker hands back; the parent alone touches the file system."""

    result: SeedResult
    checkpoints: dict[str, dict]
    interactions: dict[str, list[dict]]
    seconds: float


def _tag(cfg: ExperimentConfig, tau: int) -> str:
    return "" if len(cfg.taus) == 1 else f"@tau={tau}"


def make_learner(spec: AgentSpec, agent: AgentParams, cfg: ExperimentConfig, init_rng) -> Learner:
    adam = AdamConfig(lr=cfg.finetune.lr)
    temp = cfg.finetune.temperature
    if spec.algorithm == "ilhf":
        learner = ILHFLearner(agent, temp, adam)
    elif spec.algorithm == "reinforce":
        learner = ReinforceLearner(agent, spec.beta, temp, adam)
    else:
        learner = EnsembleILHFLearner(agent, spec.ensemble_size, init_rng, spec.prior_scale, spec.eta, temp, adam)
    learner.name = spec.label
    return learner


def _streams(S, tag: str) -> EpisodeStreams:
    # every agent sees the same prompt, response and label streams (common random numbers)
    return EpisodeStreams(S(f"prompts{tag}"), S(f"responses{tag}"), S(f"labels{tag}"), S(f"members{tag}"), S(f"bootstrap{tag}"))


def _didactic_p_plus(learner: Learner, s: np.ndarray) -> float:
    # exact P(+1) of the uniform mixture over members
    return float(np.mean(expit(learner.phis @ s)))


def run_seed(cfg: ExperimentConfig, seed: int) -> _SeedOutput:
    """Everything for one seed: process draw, pretraining, every agent's fine-tuning and evaluation."""
    start = time.perf_counter()
    fp = cfg.fingerprint()
    S = lambda label: stream(cfg.master_seed, seed, label)
    metrics: dict[str, list[list[float]]] = {}
    checkpoints: dict[str, dict] = {}
    interactions: dict[str, list[dict]] = {}
    h2h: list[dict] = []
    pretrain_loss: dict[str, float] = {}
    cadence = cfg.eval.cadence
    K = cfg.finetune.episodes

    def due(k: int) -> bool:
        return k % cadence == 0 or k == K

    if cfg.experiment == "didactic":
        env, agent = didactic_setup(
            S("didactic_pretrain"), D=cfg.D, corpus_size=cfg.pretrain.samples, epochs=cfg.pretrain.epochs,
            adam=AdamConfig(lr=cfg.pretrain.lr),
        )
        checkpoints["pretrain"] = agent.to_dict({"seed": seed, "stage": "pretrain"})
        s = encode_prompt(agent, env.prompt)
        evalset = DidacticEvalSet.build(env, agent, cfg.eval.batch, S("eval"))
        for spec in cfg.finetune.agents:
            learner = make_learner(spec, agent, cfg, S(f"ensemble_init/{spec.label}"))
            streams = _streams(S, "")
            rate, kl = [], []
            log = []
            for k in range(K + 1):
                if k > 0:
                    batch = run_episode(learner, env, cfg.finetune.prompts_per_episode, streams)
                    if cfg.log_interactions:
                        log += interaction_rows(k, batch, learner)
                if due(k):
                    rate.append([k, _didactic_p_plus(learner, s)])
                    kl.append([k, evalset.kl(learner.phis)])
            metrics[f"p_plus/{spec.label}"] = rate
            metrics[f"kl/{spec.label}"] = kl
            checkpoints[spec.label] = _final_checkpoint(learner, seed)
            if log:
                interactions[spec.label] = log
        return _SeedOutput(SeedResult(seed, fp, metrics, h2h, pretrain_loss), checkpoints, interactions,
                           time.perf_counter() - start)

    proc_index = seed if cfg.resample_process else 0
    ideal, shadow = sample_process_params(
        stream(cfg.master_seed, proc_index, "process"), cfg.d, cfg.perturbation_variance
    )
    checkpoints["process"] = {"ideal": ideal.to_dict(), "shadow": shadow.to_dict()}
    for tau in cfg.taus:
        tag = _tag(cfg, tau)
        corpus = generate_corpus(shadow, cfg.pretrain.samples, 2 * tau, S(f"corpus{tag}"))
        plog = PretrainLog()
        agent = pretrain(
            init_agent(S(f"agent_init{tag}"), cfg.D), corpus, cfg.pretrain.epochs, S(f"shuffle{tag}"),
            adam=AdamConfig(lr=cfg.pretrain.lr), batch_size=cfg.pretrain.batch_size, log=plog,
        )
        if plog.epoch_loss:
            pretrain_loss[f"tau={tau}"] = plog.epoch_loss[-1]
        checkpoints[f"pretrain{tag}"] = agent.to_dict({"seed": seed, "stage": "pretrain", "tau": tau})
        env = TokenProcessEnv(ideal, shadow, tau)
        evalset = KLEvalSet.build(ideal, agent, tau, cfg.eval.batch, S(f"eval{tag}"))
        learners = {}
        for spec in cfg.finetune.agents:
            learner = make_learner(spec, agent, cfg, S(f"ensemble_init/{spec.label}{tag}"))
            streams = _streams(S, tag)
            series, log = [], []
            for k in range(K + 1):
                if k > 0:
                    batch = run_episode(learner, env, cfg.finetune.prompts_per_episode, streams)
                    if cfg.log_interactions:
                        log += interaction_rows(k, batch, learner)
                if due(k):
                    series.append([k, evalset.kl(learner.phis)])
            metrics[f"kl/{spec.label}{tag}"] = series
            checkpoints[f"{spec.label}{tag}"] = _final_checkpoint(learner, seed)
            if log:
                interactions[f"{spec.label}{tag}"] = log
            learners[spec.label] = learner
        for cand, ref in cfg.eval.head2head:
            res = inclusive_score_ratio(
                learners[cand], learners[ref], env, cfg.eval.head2head_prompts, S(f"h2h/{cand}/{ref}{tag}"),
                candidate_id=cand + tag, reference_id=ref + tag,
            )
            h2h.append(asdict(res))
    return _SeedOutput(SeedResult(seed, fp, metrics, h2h, pretrain_loss), checkpoints, interactions,
                       time.perf_counter() - start)


def _final_checkpoint(learner: Learner, seed: int) -> dict:
    doc = learner.agent.to_dict({"seed": seed, "stage": "finetuned", "agent": learner.name})
    doc["phi"] = learner.phis.tolist() if learner.phis.shape[0] > 1 else learner.phis[0].tolist()
    return doc


# ------------------------------------------------------------------ persistence


class RunWriter:
    """Sole writer for a run directory."""

    def __init__(self, out: str | Path):
        self.out = Path(out)

    def seed_path(self, seed: int) -> Path:
        return self.out / "seeds" / f"seed_{seed:04d}.json"

    def _write(self, path: Path, text: str) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(text)
        tmp.replace(path)

    def write_json(self, path: Path, doc) -> None:
        self._write(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def write_csv(self, path: Path, header: list[str], rows: list[list]) -> None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        self._write(path, buf.getvalue())

    def load_seed(self, seed: int, fingerprint: str) -> SeedResult | None:
        path = self.seed_path(seed)
        if not path.exists():
            return None
        res = SeedResult.from_dict(json.loads(path.read_text()))
        return res if res.fingerprint == fingerprint else None

    def save_seed(self, out: _SeedOutput, with_checkpoints: bool) -> None:
        seed = out.result.seed
        if with_checkpoints:
            for name, doc in out.checkpoints.items():
                safe = name.replace("/", "_").replace("=", "").replace("@", "_")
                self.write_json(self.out / "checkpoints" / f"seed_{seed:04d}" / f"{safe}.json", doc)
        for name, rows in out.interactions.items():
            safe = name.replace("=", "").replace("@", "_")
            header = list(rows[0])
            self.write_csv(self.out / "interactions" / f"seed_{seed:04d}_{safe}.csv", header,
                           [[r[h] for h in header] for r in rows])
        # the seed file goes last: its presence marks the seed complete
        self.write_json(self.seed_path(seed), out.result.to_dict())


def _fmt(x: float) -> str:
    return repr(float(x))


def metrics_rows(result: RunResult) -> list[list]:
    rows = []
    for seed in sorted(result.seeds):
        r = result.seeds[seed]
        for name in sorted(r.metrics):
            for episode, value in r.metrics[name]:
                rows.append([seed, int(episode), name, _fmt(value)])
    return rows


def run_experiment(
    config: ExperimentConfig,
    out: str | Path | None = None,
    parallel: int = 1,
    resume: bool = True,
    progress=None,
) -> RunResult:
    """Run every configured seed, persisting each as it completes.

    With ``out`` set, completed seeds found on disk (same fingerprint) are
    reused, so an interrupted run resumes at seed granularity.
    """
    config.validate()
    fp = config.fingerprint()
    writer = RunWriter(out) if out is not None else None
    done: dict[int, SeedResult] = {}
    if writer is not None:
        manifest = writer.out / "manifest.json"
        if manifest.exists():
            prev = json.loads(manifest.read_text()).get("fingerprint")
            if prev != fp and resume:
                raise ConfigError(f"{writer.out} holds a run with a different config (fingerprint {prev[:12]})")
        writer.write_json(writer.out / "config.json", config.to_dict())
        writer.write_json(manifest, _manifest(config, fp))
        if resume:
            for seed in config.seeds:
                prev_res = writer.load_seed(seed, fp)
                if prev_res is not None:
                    done[seed] = prev_res
    pending = [s for s in config.seeds if s not in done]
    timing: dict[str, float] = {}

    def accept(o: _SeedOutput) -> None:
        done[o.result.seed] = o.result
        timing[str(o.result.seed)] = o.seconds
        if writer is not None:
            writer.save_seed(o, config.checkpoints)
        if progress is not None:
            progress(o.result.seed, o.seconds)

    if parallel > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            futures = [pool.submit(run_seed, config, s) for s in pending]
            for fut in as_completed(futures):
                accept(fut.result())
    else:
        for s in pending:
            accept(run_seed(config, s))

    result = RunResult(config, fp, {s: done[s] for s in config.seeds}, timing)
    if writer is not None:
        write_outputs(result, writer.out)
        writer.write_json(writer.out / "timing.json", {"seconds_per_seed": timing})
    return result


def _manifest(config: ExperimentConfig, fp: str) -> dict:
    # wall-clock lives in timing.json so the manifest stays byte-reproducible
    return {
        "config": config.to_dict(),
        "fingerprint": fp,
        "versions": {
            "ilhf": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
    }


def write_outputs(result: RunResult, out: str | Path) -> None:
    writer = RunWriter(out)
    writer.write_csv(Path(out) / "metrics.csv", ["seed", "episode", "metric_name", "value"], metrics_rows(result))
    if any(r.head2head for r in result.seeds.values()):
        writer.write_csv(Path(out) / "head2head.csv", H2H_HEADER, head2head_rows(result))


def load_run(out: str | Path) -> RunResult:
    out = Path(out)
    manifest = json.loads((out / "manifest.json").read_text())
    config = ExperimentConfig.from_dict(manifest["config"])
    writer = RunWriter(out)
    seeds = {}
    for s in config.seeds:
        res = writer.load_seed(s, manifest["fingerprint"])
        if res is not None:
            seeds[s] = res
    timing = {}
    if (out / "timing.json").exists():
        timing = json.loads((out / "timing.json").read_text()).get("seconds_per_seed", {})
    return RunResult(config, manifest["fingerprint"], seeds, timing)


# ------------------------------------------------------------------ aggregation


@dataclass
class Aggregate:
    episodes: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    n: int


def mean_stderr(values: np.ndarray, axis: int = 0) -> tuple[np.ndarray, np.ndarray]:
    values = np.asarray(values, dtype=float)
    n = values.shape[axis]
    if n < 2:
        raise ValueError(f"need at least 2 seeds for a standard error, got {n}")
    return values.mean(axis=axis), values.std(axis=axis, ddof=1) / np.sqrt(n)


def aggregate(result: RunResult | list[SeedResult]) -> dict[str, Aggregate]:
    """Per-episode mean and standard error across seeds for every metric."""
    seeds = list(result.seeds.values()) if isinstance(result, RunResult) else list(result)
    if len(seeds) < 2:
        raise ValueError(f"aggregation needs at least 2 seeds, got {len(seeds)}")
    out = {}
    for name in sorted({m for r in seeds for m in r.metrics}):
        series = [np.asarray(r.metrics[name], dtype=float) for r in seeds if name in r.metrics]
        if len(series) != len(seeds):
            raise ValueError(f"metric {name!r} is missing for some seeds")
        episodes = series[0][:, 0]
        if any(s.shape != series[0].shape or np.any(s[:, 0] != episodes) for s in series):
            raise ValueError(f"metric {name!r} has mismatched episodes across seeds")
        mean, se = mean_stderr(np.stack([s[:, 1] for s in series]))
        out[name] = Aggregate(episodes.astype(int), mean, se, len(series))
    return out


def final_values(result: RunResult, metric: str) -> np.ndarray:
    """Last recorded value of ``metric`` per seed, in seed order."""
    return np.array([result.seeds[s].metrics[metric][-1][1] for s in sorted(result.seeds)])


H2H_HEADER = ["candidate", "reference", "score_c", "score_r", "ratio", "stderr"]


def head2head_summary(result: RunResult) -> list[dict]:
    """Mean scores and ratio per pair, with the standard error of the ratio over seeds."""
    pairs: dict[tuple[str, str], list[dict]] = {}
    for s in sorted(result.seeds):
        for rec in result.seeds[s].head2head:
            pairs.setdefault((rec["candidate"], rec["reference"]), []).append(rec)
    out = []
    for (cand, ref), recs in pairs.items():
        ratios = np.array([r["ratio"] for r in recs])
        se = float(ratios.std(ddof=1) / np.sqrt(len(ratios))) if len(ratios) > 1 else float("nan")
        out.append({
            "candidate": cand,
            "reference": ref,
            "score_c": float(np.mean([r["score_candidate"] for r in recs])),
            "score_r": float(np.mean([r["score_reference"] for r in recs])),
            "ratio": float(ratios.mean()),
            "stderr": se,
            "n": len(recs),
        })
    return out


def head2head_rows(result: RunResult) -> list[list]:
    return [[r["candidate"], r["reference"], _fmt(r["score_c"]), _fmt(r["score_r"]), _fmt(r["ratio"]), _fmt(r["stderr"])]
            for r in head2head_summary(result)]


def episodes_to_threshold(series: list[list[float]], threshold: float) -> int:
    """First episode whose value is at or below ``threshold``; one past the last episode if never."""
    for episode, value in series:
        if value <= threshold:
            return int(episode)
    return int(series[-1][0]) + 1


# ------------------------------------------------------------------ plot data


PLOT_HEADER = ["episode", "series_label", "mean", "stderr"]


def _series_for(figure_id: str, names: list[str], config: ExperimentConfig) -> list[str]:
    kl = [n for n in names if n.startswith("kl/")]
    if figure_id == "didactic-rate":
        return [n for n in names if n.startswith("p_plus/")]
    if figure_id in ("didactic-kl", "main-kl"):
        return kl
    if figure_id == "ablate-ensemble":
        return [n for n in kl if n.startswith(("kl/ilhf", "kl/ensemble_ilhf"))]
    if figure_id == "ablate-tau":
        return [n for n in kl if "@tau=" in n or len(config.taus) == 1]
    raise ValueError(f"unknown figure id {figure_id!r}; expected one of {FIGURES}")


def emit_plot_data(result: RunResult, figure_id: str, out_dir: str | Path, normalize_autocorr: bool = True) -> Path:
    """Write one plot-ready CSV for ``figure_id`` and return its path."""
    if figure_id not in FIGURES:
        raise ValueError(f"unknown figure id {figure_id!r}; expected one of {FIGURES}")
    if not result.seeds:
        raise ValueError("result holds no seeds; nothing to plot")
    writer = RunWriter(out_dir)
    path = Path(out_dir) / f"{figure_id}.csv"
    if figure_id == "head2head":
        rows = head2head_rows(result)
        if not rows:
            raise ValueError("result holds no head-to-head records")
        writer.write_csv(path, H2H_HEADER, rows)
        return path
    if figure_id == "autocorr":
        rows = autocorr_rows(result.config, min(result.seeds), normalize_autocorr)
        writer.write_csv(path, ["lag", "alpha"], rows)
        return path
    agg = aggregate(result)
    chosen = _series_for(figure_id, sorted(agg), result.config)
    if not chosen:
        raise ValueError(f"result has no series for figure {figure_id!r}")
    rows = []
    for name in chosen:
        a = agg[name]
        label = name.split("/", 1)[1]
        rows += [[int(e), label, _fmt(m), _fmt(s)] for e, m, s in zip(a.episodes, a.mean, a.stderr)]
    writer.write_csv(path, PLOT_HEADER, rows)
    return path


def autocorr_rows(config: ExperimentConfig, seed: int, normalize: bool = True) -> list[list]:
    """Autocorrelation of the ideal process's logits for one seed's process draw."""
    proc_index = seed if config.resample_process else 0
    ideal, _ = sample_process_params(stream(config.master_seed, proc_index, "process"), config.d, config.perturbation_variance)
    rng = stream(config.master_seed, seed, "autocorr")
    logits = process_logits(ideal, rng.standard_normal(ideal.d), config.eval.autocorr_length, rng)
    lags = range(min(config.eval.autocorr_max_lag, len(logits) - 2) + 1)
    return [[k, _fmt(autocorrelation(logits, k, normalize=normalize))] for k in lags]


def figures_for(config: ExperimentConfig) -> list[str]:
    if config.experiment == "didactic":
        return ["didactic-rate", "didactic-kl"]
    figs = {"main": ["main-kl"], "ablation_ensemble": ["ablate-ensemble"], "ablation_tau": ["ablate-tau"],
            "head2head": ["ablate-ensemble"]}[config.experiment]
    if config.eval.head2head:
        figs.append("head2head")
    return figs + ["autocorr"]


def save_process(path: str | Path, ideal: ProcessParams, shadow: ProcessParams) -> None:
    RunWriter(Path(path).parent).write_json(Path(path), {"ideal": ideal.to_dict(), "shadow": shadow.to_dict()})
