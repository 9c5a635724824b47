"""Minimal behavior-tree interpreter with a permissioned blackboard.

Ticks are memoryless: every tick starts at the root and walks the tree
depth-first.  A ``Running`` child halts its parent exactly like a
non-success/non-failure result would, and the next tick starts over.

Trees can be written as indented text, one node per line::

    sequence Root
      fallback StrategySelect
        condition NotSelectStrategy? not_select_strategy
        action SelectStrategy! select_strategy
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator


class Status(enum.Enum):
    SUCCESS = "success"
    FAILURE = "failure"
    RUNNING = "running"


class NodeKind(enum.Enum):
    SEQUENCE = "sequence"
    FALLBACK = "fallback"
    CONDITION = "condition"
    ACTION = "action"

    @property
    def is_control(self) -> bool:
        return self in (NodeKind.SEQUENCE, NodeKind.FALLBACK)


class TreeError(ValueError):
    pass


class PermissionViolation(PermissionError):
    pass


@dataclass(frozen=True)
class Node:
    kind: NodeKind
    name: str
    children: tuple[Node, ...] = ()
    behavior: str | None = None

    def __post_init__(self):
        if self.kind.is_control:
            if not self.children:
                raise TreeError(f"{self.kind.value} node {self.name!r} has no children")
            if self.behavior is not None:
                raise TreeError(f"control node {self.name!r} cannot carry a behavior")
        else:
            if self.children:
                raise TreeError(f"leaf {self.name!r} cannot have children")
            if not self.behavior:
                raise TreeError(f"leaf {self.name!r} needs a behavior id")

    def walk(self) -> Iterator[Node]:
        yield self
        for c in self.children:
            yield from c.walk()

    def leaves(self) -> list[Node]:
        return [n for n in self.walk() if not n.kind.is_control]


def sequence(name: str, *children: Node) -> Node:
    return Node(NodeKind.SEQUENCE, name, tuple(children))


def fallback(name: str, *children: Node) -> Node:
    return Node(NodeKind.FALLBACK, name, tuple(children))


def condition(name: str, behavior: str) -> Node:
    return Node(NodeKind.CONDITION, name, behavior=behavior)


def action(name: str, behavior: str) -> Node:
    return Node(NodeKind.ACTION, name, behavior=behavior)


# --------------------------------------------------------------------------
# blackboard

class Perm(enum.Flag):
    READ = enum.auto()
    WRITE = enum.auto()
    READ_WRITE = READ | WRITE


# closed set of value kinds a blackboard key may hold
VALUE_KINDS: dict[str, Callable[[Any], bool]] = {
    "int": lambda v: isinstance(v, int) and not isinstance(v, bool),
    "bool": lambda v: isinstance(v, bool),
    "bits": lambda v: isinstance(v, int) and not isinstance(v, bool) and v >= 0,
    "action": lambda v: isinstance(v, int) and not isinstance(v, bool) and v >= 0,
    "handle": lambda v: True,
}

_UNSET = object()


class Blackboard:
    def __init__(self):
        self._kinds: dict[str, str] = {}
        self._values: dict[str, Any] = {}
        self._perms: dict[tuple[str, str], Perm] = {}

    def declare(self, key: str, kind: str, value: Any = _UNSET) -> None:
        if kind not in VALUE_KINDS:
            raise TreeError(f"unknown value kind {kind!r}")
        if key in self._kinds:
            raise TreeError(f"key {key!r} already declared")
        self._kinds[key] = kind
        if value is not _UNSET:
            self._store(key, value)

    def grant(self, client: str, key: str, perm: Perm) -> None:
        if key not in self._kinds:
            raise TreeError(f"undeclared key {key!r}")
        self._perms[(client, key)] = self._perms.get((client, key), Perm(0)) | perm

    def permission(self, client: str, key: str) -> Perm:
        return self._perms.get((client, key), Perm(0))

    def keys(self) -> list[str]:
        return list(self._kinds)

    def clients(self) -> set[str]:
        return {c for c, _ in self._perms}

    def _store(self, key: str, value: Any) -> None:
        if not VALUE_KINDS[self._kinds[key]](value):
            raise TypeError(f"{key!r} expects a {self._kinds[key]} value, got {value!r}")
        self._values[key] = value

    def view(self, client: str) -> BlackboardView:
        return BlackboardView(self, client)


@dataclass
class BlackboardView:
    """What a single client (tree node or the simulator) may touch."""

    board: Blackboard
    client: str

    def _check(self, key: str, need: Perm) -> None:
        if key not in self.board._kinds:
            raise PermissionViolation(f"{self.client!r} accessed undeclared key {key!r}")
        if need not in self.board.permission(self.client, key):
            raise PermissionViolation(f"{self.client!r} lacks {need.name} on {key!r}")

    def get(self, key: str, default: Any = None) -> Any:
        self._check(key, Perm.READ)
        return self.board._values.get(key, default)

    def set(self, key: str, value: Any) -> None:
        self._check(key, Perm.WRITE)
        self.board._store(key, value)

    def __getitem__(self, key: str) -> Any:
        self._check(key, Perm.READ)
        try:
            return self.board._values[key]
        except KeyError:
            raise KeyError(f"blackboard key {key!r} has no value") from None

    def __setitem__(self, key: str, value: Any) -> None:
        self.set(key, value)


# --------------------------------------------------------------------------
# behaviors and ticking

Behavior = Callable[[BlackboardView], Status]


class BehaviorRegistry:
    def __init__(self):
        self._behaviors: dict[str, Behavior] = {}

    def register(self, behavior_id: str, fn: Behavior) -> None:
        if behavior_id in self._behaviors:
            raise TreeError(f"behavior {behavior_id!r} already registered")
        self._behaviors[behavior_id] = fn

    def __contains__(self, behavior_id: str) -> bool:
        return behavior_id in self._behaviors

    def get(self, behavior_id: str) -> Behavior:
        try:
            return self._behaviors[behavior_id]
        except KeyError:
            raise TreeError(f"unregistered behavior {behavior_id!r}") from None


def tick(root: Node, board: Blackboard, registry: BehaviorRegistry,
         trace: list[str] | None = None) -> Status:
    """One depth-first pass from ``root``; ``trace`` collects ticked node names."""
    if trace is not None:
        trace.append(root.name)
    if root.kind == NodeKind.SEQUENCE:
        for child in root.children:
            s = tick(child, board, registry, trace)
            if s != Status.SUCCESS:
                return s
        return Status.SUCCESS
    if root.kind == NodeKind.FALLBACK:
        for child in root.children:
            s = tick(child, board, registry, trace)
            if s != Status.FAILURE:
                return s
        return Status.FAILURE
    status = registry.get(root.behavior)(board.view(root.name))
    if not isinstance(status, Status):
        raise TreeError(f"behavior {root.behavior!r} returned {status!r}, not a Status")
    return status


# --------------------------------------------------------------------------
# text format

def dumps(root: Node) -> str:
    lines = []

    def emit(n: Node, depth: int) -> None:
        parts = [n.kind.value, n.name] + ([n.behavior] if n.behavior else [])
        lines.append("  " * depth + " ".join(parts))
        for c in n.children:
            emit(c, depth + 1)

    emit(root, 0)
    return "\n".join(lines) + "\n"


def loads(text: str) -> Node:
    entries: list[tuple[int, list[str], int]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        if not raw.strip() or raw.lstrip().startswith("#"):
            continue
        indent = len(raw) - len(raw.lstrip(" "))
        if indent % 2:
            raise TreeError(f"line {lineno}: indentation must be a multiple of two spaces")
        entries.append((indent // 2, raw.split(), lineno))
    if not entries:
        raise TreeError("empty tree description")

    pos = 0

    def parse(depth: int) -> Node:
        nonlocal pos
        d, parts, lineno = entries[pos]
        if d != depth:
            raise TreeError(f"line {lineno}: unexpected indentation")
        pos += 1
        try:
            kind = NodeKind(parts[0])
        except ValueError:
            raise TreeError(f"line {lineno}: unknown node kind {parts[0]!r}") from None
        if kind.is_control:
            if len(parts) != 2:
                raise TreeError(f"line {lineno}: expected '<kind> <name>'")
            children = []
            while pos < len(entries) and entries[pos][0] > depth:
                children.append(parse(depth + 1))
            return Node(kind, parts[1], tuple(children))
        if len(parts) != 3:
            raise TreeError(f"line {lineno}: expected '<kind> <name> <behavior>'")
        if pos < len(entries) and entries[pos][0] > depth:
            raise TreeError(f"line {entries[pos][2]}: leaf {parts[1]!r} cannot have children")
        return Node(kind, parts[1], behavior=parts[2])

    root = parse(0)
    if pos != len(entries):
        raise TreeError(f"line {entries[pos][2]}: more than one root")
    return root
