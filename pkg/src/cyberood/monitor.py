"""Transition-probability OOD monitor.

The probabilistic neural network used here has one input unit (the labeled
``(previous state, action)`` pair), one pattern unit per training transition
and one summation/output unit per distinct observed state.  With discrete
inputs the pattern-unit kernel is an exact-match indicator, so an input
activates precisely the training transitions sharing its context and each
output unit sums how many of those ended in its state.  ``TransitionModel``
stores those sums directly: ``counts[(s, a)][s']`` is the output of unit
``s'`` for input ``(s, a)`` and ``totals[(s, a)]`` normalizes them into
conditional probabilities.

A runtime transition ``(s, a) -> s'`` is in-distribution iff ``s'`` is among
the predicted states for ``(s, a)`` and its probability is strictly greater
than the threshold ``rho``.
"""

from __future__ import annotations

import enum
import hashlib
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

from cyberood import netsim

DATASET_MAGIC = "cyberood-dataset"
MODEL_MAGIC = "cyberood-model"
FORMAT_VERSION = 1


class Verdict(enum.Enum):
    ID = "ID"
    OOD = "OOD"


class MonitorError(ValueError):
    pass


class FormatError(MonitorError):
    pass


class PolicyMismatch(MonitorError):
    pass


@dataclass(frozen=True)
class MonitorConfig:
    rho: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise MonitorError(f"rho must lie in [0, 1], got {self.rho}")


class StateDictionary:
    """Bijective label <-> packed-observation table, labels in first-seen order."""

    def __init__(self, vectors: Iterable[int] = ()):
        self._vectors: list[int] = []
        self._labels: dict[int, int] = {}
        for v in vectors:
            if v in self._labels:
                raise FormatError(f"state {netsim.obs_hex(v)} listed twice")
            self.intern(v)

    def intern(self, vector: int) -> int:
        label = self._labels.get(vector)
        if label is None:
            label = len(self._vectors)
            self._vectors.append(vector)
            self._labels[vector] = label
        return label

    def label(self, vector: int) -> int | None:
        return self._labels.get(vector)

    def vector(self, label: int) -> int:
        return self._vectors[label]

    @property
    def vectors(self) -> tuple[int, ...]:
        return tuple(self._vectors)

    def __len__(self) -> int:
        return len(self._vectors)

    def __eq__(self, other) -> bool:
        return isinstance(other, StateDictionary) and self._vectors == other._vectors


@dataclass(frozen=True)
class TransitionRecord:
    episode: int
    t: int
    s_prev: int
    action: int
    s_next: int


@dataclass
class TransitionDataset:
    policy_tag: str
    n_episodes: int
    horizon: int
    records: list[TransitionRecord] = field(default_factory=list)
    dictionary: StateDictionary = field(default_factory=StateDictionary)

    def check(self) -> None:
        if len(self.records) != self.n_episodes * self.horizon:
            raise MonitorError(
                f"{len(self.records)} records for {self.n_episodes} x {self.horizon} transitions")
        keys = [(r.episode, r.t) for r in self.records]
        if keys != sorted(keys):
            raise MonitorError("records must be sorted by (episode, t)")
        for r in self.records:
            if not 1 <= r.t <= self.horizon:
                raise MonitorError(f"timestep {r.t} outside 1..{self.horizon}")
            if max(r.s_prev, r.s_next) >= len(self.dictionary):
                raise MonitorError(f"record {r} references an unknown label")
            if not 0 <= r.action < netsim.N_BLUE_ACTIONS:
                raise MonitorError(f"record {r} has an invalid action")

    def transitions(self) -> Iterable[tuple[int, int, int]]:
        """Records as packed ``(s_prev, action, s_next)`` triples."""
        vec = self.dictionary.vector
        for r in self.records:
            yield vec(r.s_prev), r.action, vec(r.s_next)


class TransitionModel:
    """Exact-match PNN over labeled discrete states (immutable once fitted)."""

    def __init__(self, policy_tag: str, dictionary: StateDictionary,
                 counts: dict[tuple[int, int], dict[int, int]], n_records: int | None = None):
        self.policy_tag = policy_tag
        self.dictionary = dictionary
        self._counts = {ctx: dict(out) for ctx, out in counts.items()}
        self._totals = {ctx: sum(out.values()) for ctx, out in self._counts.items()}
        self.n_records = sum(self._totals.values()) if n_records is None else n_records
        for ctx, out in self._counts.items():
            if not out or any(c <= 0 for c in out.values()):
                raise MonitorError(f"context {ctx} has non-positive outcome counts")

    @property
    def m(self) -> int:
        return len(self.dictionary)

    @property
    def contexts(self) -> dict[tuple[int, int], dict[int, int]]:
        return self._counts

    def context_total(self, s_prev_label: int, action: int) -> int:
        return self._totals.get((s_prev_label, action), 0)

    def _outcomes(self, s_prev: int, action: int) -> tuple[dict[int, int], int]:
        label = self.dictionary.label(s_prev)
        if label is None:
            return {}, 0
        ctx = (label, action)
        return self._counts.get(ctx, {}), self._totals.get(ctx, 0)

    def predict(self, s_prev: int, action: int) -> dict[int, float]:
        """Predicted next states (packed) with their conditional probabilities."""
        out, total = self._outcomes(s_prev, action)
        vec = self.dictionary.vector
        return {vec(s): c / total for s, c in out.items()}

    def predict_exact(self, s_prev: int, action: int) -> dict[int, Fraction]:
        out, total = self._outcomes(s_prev, action)
        vec = self.dictionary.vector
        return {vec(s): Fraction(c, total) for s, c in out.items()}

    def probability(self, s_prev: int, action: int, s_next: int) -> float:
        out, total = self._outcomes(s_prev, action)
        nxt = self.dictionary.label(s_next)
        if nxt is None or nxt not in out:
            return 0.0
        return out[nxt] / total

    def joint_probability(self, s_prev: int, action: int, s_next: int) -> float:
        """Diagnostic only: frequency of the transition among all training records."""
        out, _ = self._outcomes(s_prev, action)
        nxt = self.dictionary.label(s_next)
        if not self.n_records or nxt is None:
            return 0.0
        return out.get(nxt, 0) / self.n_records

    def classify(self, s_prev: int, action: int, s_next: int,
                 config: MonitorConfig = MonitorConfig(), policy_tag: str | None = None) -> Verdict:
        if policy_tag is not None and policy_tag != self.policy_tag:
            raise PolicyMismatch(f"model trained for {self.policy_tag!r}, queried for {policy_tag!r}")
        out, total = self._outcomes(s_prev, action)
        nxt = self.dictionary.label(s_next)
        if nxt is None or nxt not in out:
            return Verdict.OOD
        return Verdict.ID if out[nxt] / total > config.rho else Verdict.OOD

    def __eq__(self, other) -> bool:
        return (isinstance(other, TransitionModel)
                and self.policy_tag == other.policy_tag
                and self.dictionary == other.dictionary
                and self._counts == other._counts
                and self.n_records == other.n_records)


# --------------------------------------------------------------------------
# algorithm phases

class EpisodeAgent(Protocol):
    policy_tag: str

    def reset(self) -> None: ...

    def act(self, obs: int) -> int: ...


def episode_seed(seed: int | str, episode: int) -> int:
    digest = hashlib.blake2b(f"{seed}:{episode}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def collect(agent: EpisodeAgent, n_episodes: int, horizon: int, seed: int,
            strategy: netsim.RedStrategyState | Callable[[int], netsim.RedStrategyState],
            rewards: netsim.RewardConfig = netsim.RewardConfig()) -> TransitionDataset:
    """Run ``n_episodes`` x ``horizon`` ticks under a fixed policy and record every transition."""
    if horizon < 1 or n_episodes < 0:
        raise MonitorError("need horizon >= 1 and n_episodes >= 0")
    ds = TransitionDataset(agent.policy_tag, n_episodes, horizon)
    intern = ds.dictionary.intern
    for e in range(n_episodes):
        red = strategy(e) if callable(strategy) else strategy
        world, obs = netsim.reset(episode_seed(seed, e), red)
        agent.reset()
        prev = obs.packed
        for t in range(1, horizon + 1):
            a = agent.act(prev)
            world, obs, _, _ = netsim.step(world, a, rewards)
            cur = obs.packed
            ds.records.append(TransitionRecord(e, t, intern(prev), a, intern(cur)))
            prev = cur
        if world.timestep != horizon:
            raise MonitorError(f"episode {e} ended after {world.timestep} of {horizon} ticks")
    return ds


def fit(dataset: TransitionDataset) -> TransitionModel:
    if not dataset.records:
        raise MonitorError("cannot fit a model on an empty dataset")
    counts: dict[tuple[int, int], Counter] = defaultdict(Counter)
    for r in dataset.records:
        counts[(r.s_prev, r.action)][r.s_next] += 1
    return TransitionModel(dataset.policy_tag, dataset.dictionary,
                           {k: dict(v) for k, v in counts.items()}, len(dataset.records))


def predict(model: TransitionModel, s_prev: int, action: int) -> dict[int, float]:
    return model.predict(s_prev, action)


def classify(model: TransitionModel, s_prev: int, action: int, s_next: int,
             config: MonitorConfig = MonitorConfig(), policy_tag: str | None = None) -> Verdict:
    return model.classify(s_prev, action, s_next, config, policy_tag)


def episode_is_ood(trace: Sequence[tuple[int, int, int]], model: TransitionModel,
                   config: MonitorConfig = MonitorConfig()) -> bool:
    """An episode is OOD iff at least one of its ``(s_prev, a, s_next)`` steps is."""
    return any(model.classify(s, a, n, config) == Verdict.OOD for s, a, n in trace)


# --------------------------------------------------------------------------
# persistence

def _write_header(lines: list[str], magic: str, policy_tag: str, dictionary: StateDictionary) -> None:
    if not policy_tag or any(ch.isspace() for ch in policy_tag):
        raise MonitorError(f"policy tag {policy_tag!r} must be a non-empty word")
    lines.append(f"{magic} {FORMAT_VERSION}")
    lines.append(f"policy_tag {policy_tag}")
    lines.append(f"states {len(dictionary)}")
    lines.extend(f"{i} {netsim.obs_hex(v)}" for i, v in enumerate(dictionary.vectors))


def dataset_text(ds: TransitionDataset) -> str:
    lines: list[str] = []
    _write_header(lines, DATASET_MAGIC, ds.policy_tag, ds.dictionary)
    lines.insert(2, f"episodes {ds.n_episodes}")
    lines.insert(3, f"horizon {ds.horizon}")
    lines.append(f"records {len(ds.records)}")
    lines.extend(f"{r.episode},{r.t},{r.s_prev},{r.action},{r.s_next}" for r in ds.records)
    lines.append("end")
    return "\n".join(lines) + "\n"


def model_text(model: TransitionModel) -> str:
    lines: list[str] = []
    _write_header(lines, MODEL_MAGIC, model.policy_tag, model.dictionary)
    lines.insert(2, f"records {model.n_records}")
    lines.append(f"contexts {len(model.contexts)}")
    for (s, a), out in sorted(model.contexts.items()):
        outcomes = ";".join(f"{n}:{c}" for n, c in sorted(out.items()))
        lines.append(f"{s},{a},{model.context_total(s, a)},{outcomes}")
    lines.append("end")
    return "\n".join(lines) + "\n"


class _Reader:
    def __init__(self, text: str):
        if not text.endswith("\n"):
            raise FormatError("file is truncated (missing final newline)")
        self.lines = text.split("\n")[:-1]
        self.pos = 0

    def next(self) -> str:
        if self.pos >= len(self.lines):
            raise FormatError("unexpected end of file")
        line = self.lines[self.pos]
        self.pos += 1
        return line

    def field(self, name: str) -> str:
        line = self.next()
        key, _, value = line.partition(" ")
        if key != name or not value:
            raise FormatError(f"line {self.pos}: expected '{name} <value>', got {line!r}")
        return value

    def count(self, name: str) -> int:
        value = self.field(name)
        if not value.isdigit():
            raise FormatError(f"line {self.pos}: {name} must be a non-negative integer")
        return int(value)

    def header(self, magic: str) -> str:
        line = self.next()
        parts = line.split()
        if len(parts) != 2 or parts[0] != magic:
            raise FormatError(f"not a {magic} file")
        if parts[1] != str(FORMAT_VERSION):
            raise FormatError(f"unsupported {magic} version {parts[1]} (expected {FORMAT_VERSION})")
        return self.field("policy_tag")

    def dictionary(self) -> StateDictionary:
        n = self.count("states")
        vectors = []
        for i in range(n):
            parts = self.next().split()
            if len(parts) != 2 or parts[0] != str(i) or len(parts[1]) != 13:
                raise FormatError(f"line {self.pos}: bad dictionary entry")
            try:
                v = int(parts[1], 16)
                netsim.decode(v)
            except (ValueError, netsim.SimulationError):
                raise FormatError(f"line {self.pos}: bad state {parts[1]!r}") from None
            vectors.append(v)
        return StateDictionary(vectors)

    def finish(self) -> None:
        if self.next() != "end":
            raise FormatError(f"line {self.pos}: expected 'end'")
        if self.pos != len(self.lines):
            raise FormatError("trailing data after 'end'")


def _ints(line: str, n: int, pos: int) -> list[int]:
    parts = line.split(",")
    if len(parts) != n or not all(p.isdigit() for p in parts):
        raise FormatError(f"line {pos}: expected {n} comma-separated integers")
    return [int(p) for p in parts]


def parse_dataset(text: str) -> TransitionDataset:
    rd = _Reader(text)
    tag = rd.header(DATASET_MAGIC)
    n_ep = rd.count("episodes")
    horizon = rd.count("horizon")
    dictionary = rd.dictionary()
    n = rd.count("records")
    records = [TransitionRecord(*_ints(rd.next(), 5, rd.pos)) for _ in range(n)]
    rd.finish()
    ds = TransitionDataset(tag, n_ep, horizon, records, dictionary)
    try:
        ds.check()
    except MonitorError as exc:
        raise FormatError(str(exc)) from None
    return ds


def parse_model(text: str) -> TransitionModel:
    rd = _Reader(text)
    tag = rd.header(MODEL_MAGIC)
    n_records = rd.count("records")
    dictionary = rd.dictionary()
    n_ctx = rd.count("contexts")
    counts: dict[tuple[int, int], dict[int, int]] = {}
    for _ in range(n_ctx):
        line = rd.next()
        head, _, tail = line.rpartition(",")
        s, a, total = _ints(head, 3, rd.pos)
        out = {}
        for item in tail.split(";"):
            n, _, c = item.partition(":")
            if not (n.isdigit() and c.isdigit()):
                raise FormatError(f"line {rd.pos}: bad outcome {item!r}")
            out[int(n)] = int(c)
        if (s, a) in counts:
            raise FormatError(f"line {rd.pos}: duplicate context")
        if sum(out.values()) != total:
            raise FormatError(f"line {rd.pos}: outcome counts do not sum to {total}")
        if max([s, *out]) >= len(dictionary):
            raise FormatError(f"line {rd.pos}: unknown state label")
        counts[(s, a)] = out
    rd.finish()
    try:
        model = TransitionModel(tag, dictionary, counts, n_records)
    except MonitorError as exc:
        raise FormatError(str(exc)) from None
    if sum(model._totals.values()) != n_records:
        raise FormatError("context totals disagree with the record count")
    return model


def save(obj: TransitionDataset | TransitionModel, path: str | Path) -> None:
    text = dataset_text(obj) if isinstance(obj, TransitionDataset) else model_text(obj)
    Path(path).write_text(text)


def load(path: str | Path) -> TransitionDataset | TransitionModel:
    text = Path(path).read_text()
    if text.startswith(DATASET_MAGIC + " "):
        return parse_dataset(text)
    if text.startswith(MODEL_MAGIC + " "):
        return parse_model(text)
    raise FormatError(f"{path}: unrecognized file type")
