"""Experiment runner: collect, train, evaluate and strategy-switch studies.

Every command reads an :class:`ExperimentConfig`, is a pure function of it
(including the seed) and writes plain-text artifacts into ``config.out``.
Wall-clock timings go to ``timing.json`` so that every other file is
byte-identical across repeated runs.
"""

from __future__ import annotations

import csv
import io
import json
import math
import random
import statistics
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

from cyberood import agent as ag
from cyberood import monitor, netsim
from cyberood.monitor import MonitorConfig, TransitionModel, Verdict

PAPER_SCALE = {"n_train": 10_000, "horizon": 100, "n_eval": 1_000}
DEFAULT_RHOS = (0.0, 1e-5, 1e-4, 1e-3)
# red strategy each policy is trained against
POLICY_FOR = {"meander": "anti-meander", "bline": "anti-bline"}
RED = {"meander": netsim.RedStrategyState.meander, "bline": netsim.RedStrategyState.bline}

EPISODE_FIELDS = ("arm", "strategy", "rho", "episode", "reward", "ood_transitions",
                  "ood_episode", "first_ood_t", "switch_t")


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    strategies: tuple[str, ...] = ("meander", "bline")
    with_ood: bool = True
    with_safe_action: bool = True
    with_strategy_select: bool = True
    n_train: int = 500
    horizon: int = 50
    n_eval: int = 200
    rhos: tuple[float, ...] = DEFAULT_RHOS
    seed: int = 0
    out: Path = Path("runs")
    model_dir: Path | None = None

    def __post_init__(self):
        if self.n_eval < 1:
            raise ConfigError("n_eval must be >= 1")
        if self.n_train < 1:
            raise ConfigError("n_train must be >= 1")
        if self.horizon < 2:
            raise ConfigError("horizon must be >= 2 (a transition needs two states)")
        if not self.rhos:
            raise ConfigError("rhos must not be empty")
        for rho in self.rhos:
            if not 0.0 <= rho <= 1.0:
                raise ConfigError(f"rho {rho} outside [0, 1]")
        for s in self.strategies:
            if s not in POLICY_FOR:
                raise ConfigError(f"unknown red strategy {s!r}")
        if self.with_safe_action and not self.with_ood:
            raise ConfigError("with_safe_action requires with_ood")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    @property
    def models(self) -> Path:
        return self.model_dir if self.model_dir is not None else self.out

    def paper_scale(self) -> ExperimentConfig:
        return replace(self, **PAPER_SCALE)

    @classmethod
    def parse(cls, text: str, **overrides) -> ExperimentConfig:
        """Read ``key = value`` lines; ``#`` starts a comment."""
        known = {f.name for f in fields(cls)}
        values: dict = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = (part.strip() for part in line.partition("="))
            if not sep or not key:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key = {"tau": "horizon", "red_strategy": "strategies", "rho": "rhos"}.get(key, key)
            if key not in known:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            try:
                values[key] = _convert(key, value)
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: {exc}") from None
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


def _convert(key: str, value: str):
    if key == "strategies":
        return tuple(v.strip() for v in value.split(",") if v.strip())
    if key == "rhos":
        return tuple(float(v) for v in value.split(",") if v.strip())
    if key in ("with_ood", "with_safe_action", "with_strategy_select"):
        return _bool(value)
    if key in ("n_train", "horizon", "n_eval", "seed"):
        return int(value, 0)
    return Path(value)


# --------------------------------------------------------------------------
# seeds and paths

def derived_seed(seed: int, purpose: str, index: int) -> int:
    return monitor.episode_seed(f"{seed}/{purpose}", index)


def switch_timestep(seed: int, episode: int, horizon: int) -> int:
    """Uniform in [horizon/4, 3*horizon/4]."""
    lo, hi = math.ceil(horizon / 4), math.floor(3 * horizon / 4)
    return random.Random(f"{seed}/switch/{episode}").randint(lo, max(lo, hi))


def dataset_path(cfg: ExperimentConfig, tag: str) -> Path:
    return cfg.out / f"dataset-{tag}.txt"


def model_path(directory: Path, tag: str) -> Path:
    return directory / f"model-{tag}.txt"


def load_models(cfg: ExperimentConfig, tags) -> dict[str, TransitionModel]:
    models = {}
    for tag in tags:
        path = model_path(cfg.models, tag)
        if not path.exists():
            raise monitor.MonitorError(f"missing trained model {path}")
        model = monitor.load(path)
        if not isinstance(model, TransitionModel):
            raise monitor.FormatError(f"{path} is not a model file")
        if model.policy_tag != tag:
            raise monitor.PolicyMismatch(f"{path} holds a model for {model.policy_tag!r}, expected {tag!r}")
        models[tag] = model
    return models


# --------------------------------------------------------------------------
# episodes

@dataclass
class EpisodeResult:
    reward: float
    ood_steps: list[int] = field(default_factory=list)
    safe_steps: list[int] = field(default_factory=list)
    policies: list[str] = field(default_factory=list)

    @property
    def ood_transitions(self) -> int:
        return len(self.ood_steps)

    @property
    def first_ood_t(self) -> int | None:
        return self.ood_steps[0] if self.ood_steps else None


def run_monitored_episode(agent: ag.DefenseAgent, seed: int, strategy: netsim.RedStrategyState,
                          horizon: int, rewards: netsim.RewardConfig = netsim.RewardConfig()) -> EpisodeResult:
    """Play one episode; OOD steps are numbered by the timestep of the state they reach."""
    world, obs = netsim.reset(seed, strategy)
    agent.reset()
    total = 0.0
    for _ in range(horizon):
        world, obs, r, _ = netsim.step(world, agent.act(obs.packed), rewards)
        total += r
    monitored = agent.has_monitor
    if monitored:
        # the last transition is never followed by a tick, so check it directly
        final_ood = agent.check(obs.packed) == Verdict.OOD
    hist = agent.history
    res = EpisodeResult(round(total, 10), policies=[h.policy for h in hist])
    res.ood_steps = [t for t, h in enumerate(hist) if h.ood]
    res.safe_steps = [t for t, h in enumerate(hist) if h.safe]
    if monitored and final_ood:
        res.ood_steps.append(horizon)
    return res


def make_agent(cfg: ExperimentConfig, policies: dict[str, ag.ControllerPolicy], initial: str,
               models: dict[str, TransitionModel], rho: float, *, safe: bool | None = None,
               select: bool | None = None) -> ag.DefenseAgent:
    safe = cfg.with_safe_action if safe is None else safe
    select = cfg.with_strategy_select if select is None else select
    tree = ag.build_defense_tree(cfg.with_ood, select, safe and cfg.with_ood)
    return ag.DefenseAgent(tree, policies, initial, models, MonitorConfig(rho))


# --------------------------------------------------------------------------
# output helpers

def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _episode_row(arm: str, strategy: str, rho: float, e: int, res: EpisodeResult,
                 switch_t: int | None) -> tuple:
    first = res.first_ood_t
    return (arm, strategy, repr(rho), e, f"{res.reward:.4f}", res.ood_transitions,
            int(res.ood_transitions > 0), "" if first is None else first,
            "" if switch_t is None else switch_t)


def reward_summary(values: list[float]) -> dict[str, float]:
    q1, med, q3 = statistics.quantiles(values, n=4, method="inclusive") if len(values) > 1 else (values[0],) * 3
    return {"min": round(min(values), 4), "q1": round(q1, 4), "median": round(med, 4),
            "q3": round(q3, 4), "max": round(max(values), 4)}


def _count_summary(counts: list[int]) -> dict[str, float]:
    return {"median": statistics.median(counts), "mean": round(statistics.fmean(counts), 4),
            "max": max(counts)}


def _finish(cfg: ExperimentConfig, summary: dict, started: float, command: str) -> dict:
    cfg.out.mkdir(parents=True, exist_ok=True)
    (cfg.out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (cfg.out / "timing.json").write_text(json.dumps({command: round(time.perf_counter() - started, 3)}) + "\n")
    return summary


def _config_summary(cfg: ExperimentConfig) -> dict:
    return {"strategies": list(cfg.strategies), "with_ood": cfg.with_ood,
            "with_safe_action": cfg.with_safe_action, "with_strategy_select": cfg.with_strategy_select,
            "n_train": cfg.n_train, "horizon": cfg.horizon, "n_eval": cfg.n_eval,
            "rhos": list(cfg.rhos), "seed": cfg.seed}


# --------------------------------------------------------------------------
# commands

def cmd_collect(cfg: ExperimentConfig, policies=None, log: Callable[[str], None] = print) -> dict:
    started = time.perf_counter()
    policies = policies or ag.default_policies()
    cfg.out.mkdir(parents=True, exist_ok=True)
    summary = {"command": "collect", "config": _config_summary(cfg), "datasets": {}}
    for strategy in cfg.strategies:
        tag = POLICY_FOR[strategy]
        ds = monitor.collect(ag.DefenseAgent.fixed(policies[tag]), cfg.n_train, cfg.horizon,
                             derived_seed(cfg.seed, f"collect-{strategy}", 0), RED[strategy]())
        monitor.save(ds, dataset_path(cfg, tag))
        summary["datasets"][tag] = {"records": len(ds.records), "states": len(ds.dictionary)}
        log(f"{tag}: {len(ds.records)} records, m={len(ds.dictionary)}")
    return _finish(cfg, summary, started, "collect")


def cmd_train(cfg: ExperimentConfig, log: Callable[[str], None] = print) -> dict:
    started = time.perf_counter()
    summary = {"command": "train", "config": _config_summary(cfg), "models": {}}
    for strategy in cfg.strategies:
        tag = POLICY_FOR[strategy]
        path = dataset_path(cfg, tag)
        if not path.exists():
            raise ConfigError(f"missing dataset {path}; run collect first")
        ds = monitor.load(path)
        if not isinstance(ds, monitor.TransitionDataset):
            raise monitor.FormatError(f"{path} is not a dataset file")
        if ds.policy_tag != tag:
            raise monitor.PolicyMismatch(f"{path} was collected under {ds.policy_tag!r}")
        model = monitor.fit(ds)
        cfg.models.mkdir(parents=True, exist_ok=True)
        monitor.save(model, model_path(cfg.models, tag))
        summary["models"][tag] = {"states": model.m, "contexts": len(model.contexts),
                                  "records": model.n_records}
        log(f"{tag}: m={model.m}, {len(model.contexts)} contexts")
    return _finish(cfg, summary, started, "train")


def cmd_eval(cfg: ExperimentConfig, policies=None, log: Callable[[str], None] = print) -> dict:
    """OOD-episode counts and reward spread per red strategy and threshold."""
    started = time.perf_counter()
    policies = policies or ag.default_policies()
    models = load_models(cfg, sorted({POLICY_FOR[s] for s in cfg.strategies}))
    known = {t: policies[t] for t in models}
    rows, table = [], []
    summary = {"command": "eval", "config": _config_summary(cfg), "rewards": {}, "ood_episodes": {}}
    for strategy in cfg.strategies:
        tag = POLICY_FOR[strategy]
        for rho in cfg.rhos:
            agent = make_agent(cfg, known, tag, models, rho)
            n_ood, rewards = 0, []
            for e in range(cfg.n_eval):
                res = run_monitored_episode(agent, derived_seed(cfg.seed, f"eval-{strategy}", e),
                                            RED[strategy](), cfg.horizon)
                rows.append(_episode_row("eval", strategy, rho, e, res, None))
                n_ood += res.ood_transitions > 0
                rewards.append(res.reward)
            table.append((repr(rho), strategy, n_ood, cfg.n_eval))
            key = f"{strategy}@{rho!r}"
            summary["rewards"][key] = reward_summary(rewards)
            summary["ood_episodes"][key] = n_ood
            log(f"{strategy} rho={rho:g}: {n_ood}/{cfg.n_eval} OOD episodes, "
                f"median reward {summary['rewards'][key]['median']}")
    cfg.out.mkdir(parents=True, exist_ok=True)
    _write_csv(cfg.out / "episodes.csv", EPISODE_FIELDS, rows)
    _write_csv(cfg.out / "rho_table.csv", ("rho", "strategy", "ood_episodes", "total_episodes"), table)
    return _finish(cfg, summary, started, "eval")


def _switch_arms(cfg: ExperimentConfig, arms: dict[str, ag.DefenseAgent], rho: float) -> tuple[list, dict]:
    rows, results = [], {arm: [] for arm in arms}
    for e in range(cfg.n_eval):
        sw = switch_timestep(cfg.seed, e, cfg.horizon)
        seed = derived_seed(cfg.seed, "switch", e)
        for arm, agent in arms.items():
            res = run_monitored_episode(agent, seed, netsim.RedStrategyState.redswitch(sw), cfg.horizon)
            results[arm].append((sw, res))
            rows.append(_episode_row(arm, "redswitch", rho, e, res, sw))
    return rows, results


def _arm_summary(results: list) -> dict:
    counts = [r.ood_transitions for _, r in results]
    return {
        "ood_transitions": _count_summary(counts),
        "detected_next_step": sum(r.first_ood_t == sw + 1 for sw, r in results),
        "within_0_2": sum(c <= 2 for c in counts),
        "episodes": len(results),
        "rewards": reward_summary([r.reward for _, r in results]),
    }


def cmd_switch(cfg: ExperimentConfig, policies=None, log: Callable[[str], None] = print) -> dict:
    """Meander -> B_line switch, paired with and without the safe action."""
    started = time.perf_counter()
    if not cfg.with_ood:
        raise ConfigError("the switch study needs with_ood = true")
    policies = policies or ag.default_policies()
    models = load_models(cfg, ("anti-meander", "anti-bline"))
    rho = cfg.rhos[0]
    arms = {
        "safe": make_agent(cfg, policies, "anti-meander", models, rho, safe=True),
        "nosafe": make_agent(cfg, policies, "anti-meander", models, rho, safe=False),
    }
    rows, results = _switch_arms(cfg, arms, rho)
    summary = {"command": "switch", "config": _config_summary(cfg), "rho": rho,
               "arms": {arm: _arm_summary(res) for arm, res in results.items()}}
    cfg.out.mkdir(parents=True, exist_ok=True)
    _write_csv(cfg.out / "episodes.csv", EPISODE_FIELDS, rows)
    for arm, s in summary["arms"].items():
        log(f"{arm}: median OOD transitions {s['ood_transitions']['median']}, "
            f"detected at t+1 in {s['detected_next_step']}/{s['episodes']}, "
            f"0-2 OOD in {s['within_0_2']}/{s['episodes']}")
    return _finish(cfg, summary, started, "switch")


def cmd_unknown(cfg: ExperimentConfig, policies=None, log: Callable[[str], None] = print) -> dict:
    """Switch to a strategy the agent has no policy or model for.

    Only the anti-Meander policy and its model are loaded and the strategy
    select branch is dropped.  A paired known-switch arm with the safe action
    is run on the same seeds for comparison.
    """
    started = time.perf_counter()
    if not cfg.with_ood:
        raise ConfigError("the unknown-strategy study needs with_ood = true")
    policies = policies or ag.default_policies()
    rho = cfg.rhos[0]
    only = load_models(cfg, ("anti-meander",))
    both = load_models(cfg, ("anti-meander", "anti-bline"))
    arms = {
        "unknown": make_agent(cfg, {"anti-meander": policies["anti-meander"]}, "anti-meander",
                              only, rho, select=False),
        "known": make_agent(cfg, policies, "anti-meander", both, rho, safe=True, select=True),
    }
    rows, results = _switch_arms(cfg, arms, rho)
    summary = {"command": "unknown", "config": _config_summary(cfg), "rho": rho,
               "arms": {arm: _arm_summary(res) for arm, res in results.items()}}
    cfg.out.mkdir(parents=True, exist_ok=True)
    _write_csv(cfg.out / "episodes.csv", EPISODE_FIELDS, rows)
    for arm, s in summary["arms"].items():
        log(f"{arm}: median OOD transitions {s['ood_transitions']['median']}")
    return _finish(cfg, summary, started, "unknown")


COMMANDS = {
    "collect": cmd_collect,
    "train": cmd_train,
    "eval": cmd_eval,
    "switch": cmd_switch,
    "unknown": cmd_unknown,
}
