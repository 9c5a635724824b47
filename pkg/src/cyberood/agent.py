"""The behavior-tree cyber-defense agent and its OOD-monitoring extension.

Leaf behaviors only talk to the outside world through blackboard keys; the
episode runner (client ``"simulator"``) writes the current and previous
observation plus the previous action, ticks the tree once, and reads back the
single action the tree emitted.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from cyberood import bt, netsim
from cyberood.bt import Perm, Status
from cyberood.monitor import MonitorConfig, MonitorError, TransitionModel, Verdict
from cyberood.netsim import Activity, BlueAction, BlueKind, Compromise, Observation

EVIDENCE_WINDOW = 10
MEANDER_MIN_SCANS = 3
BLINE_PATH = (netsim.BLINE_ENTERPRISE, netsim.OP_SERVER)


class MetaChoice(enum.IntEnum):
    ANALYSIS = 0
    DETECTOR = 1
    MITIGATE = 2


class PolicyKind(enum.Enum):
    ANTI_MEANDER = "anti-meander"
    ANTI_BLINE = "anti-bline"


class AgentError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# controller policies

@dataclass(frozen=True)
class ControllerPolicy:
    """Scripted stand-in for a trained controller: observation -> meta choice.

    ``watch`` limits which hosts the policy pays attention to at all;
    ``guarded`` hosts are restored at the first sign of red activity.
    """

    strategy_kind: PolicyKind
    decoy_plan: tuple[tuple[int, int], ...] = ()
    watch: frozenset[int] = frozenset(range(netsim.N_HOSTS))
    guarded: frozenset[int] = frozenset()

    def __post_init__(self):
        if not self.guarded <= self.watch:
            raise AgentError("guarded hosts must be watched")

    @property
    def tag(self) -> str:
        return self.strategy_kind.value

    def _alarmed(self, obs: Observation) -> list[int]:
        out = []
        for h in sorted(self.watch):
            ho = obs.hosts[h]
            if ho.compromise in (Compromise.USER, Compromise.PRIVILEGED):
                out.append(h)
            elif h in self.guarded and (ho.compromise != Compromise.NO or ho.activity != Activity.NONE):
                out.append(h)
        return out

    def decide(self, obs: Observation, decoys_pending: bool = False) -> MetaChoice:
        if self._alarmed(obs):
            return MetaChoice.MITIGATE
        if self.unknown_host(obs) is not None:
            return MetaChoice.ANALYSIS
        quiet = all(obs.hosts[h].activity == Activity.NONE for h in self.watch)
        if decoys_pending and quiet:
            return MetaChoice.DETECTOR
        return MetaChoice.ANALYSIS

    def unknown_host(self, obs: Observation) -> int | None:
        for h in sorted(self.watch):
            if obs.hosts[h].compromise == Compromise.UNKNOWN:
                return h
        return None

    def analysis(self, obs: Observation) -> BlueAction:
        h = self.unknown_host(obs)
        return netsim.MONITOR if h is None else BlueAction(BlueKind.ANALYZE, h)

    def mitigation(self, obs: Observation) -> BlueAction | None:
        """Remove user-level footholds, restore everything worse (most valuable host first)."""
        alarmed = self._alarmed(obs)
        if not alarmed:
            return None
        h = max(alarmed, key=lambda i: (netsim.host_value(i), -i))
        if obs.hosts[h].compromise == Compromise.USER and h not in self.guarded:
            return BlueAction(BlueKind.REMOVE, h)
        return BlueAction(BlueKind.RESTORE, h)

    def dumps(self) -> str:
        lines = [f"policy {self.tag}"]
        lines += [f"  decoy {netsim.HOST_NAMES[h]} {netsim.DECOY_NAMES[d - 1]}" for h, d in self.decoy_plan]
        if self.watch != frozenset(range(netsim.N_HOSTS)):
            lines += [f"  watch {netsim.HOST_NAMES[h]}" for h in sorted(self.watch)]
        lines += [f"  guard {netsim.HOST_NAMES[h]}" for h in sorted(self.guarded)]
        return "\n".join(lines) + "\n"


def _host_id(name: str, lineno: int) -> int:
    try:
        return netsim.HOST_NAMES.index(name)
    except ValueError:
        raise AgentError(f"line {lineno}: unknown host {name!r}") from None


def load_policies(text: str) -> dict[str, ControllerPolicy]:
    """Parse one or more ``policy`` blocks in the indented tree text style."""
    policies: dict[str, ControllerPolicy] = {}
    current: dict | None = None

    def close():
        if current is not None:
            watch = frozenset(current["watch"]) if current["watch"] else frozenset(range(netsim.N_HOSTS))
            p = ControllerPolicy(current["kind"], tuple(current["plan"]), watch, frozenset(current["guard"]))
            if p.tag in policies:
                raise AgentError(f"policy {p.tag!r} defined twice")
            policies[p.tag] = p

    for lineno, raw in enumerate(text.splitlines(), 1):
        if not raw.strip() or raw.lstrip().startswith("#"):
            continue
        parts = raw.split()
        if not raw.startswith(" "):
            if parts[0] != "policy" or len(parts) != 2:
                raise AgentError(f"line {lineno}: expected 'policy <name>'")
            close()
            try:
                current = {"kind": PolicyKind(parts[1]), "plan": [], "watch": set(), "guard": set()}
            except ValueError:
                raise AgentError(f"line {lineno}: unknown policy {parts[1]!r}") from None
            continue
        if current is None:
            raise AgentError(f"line {lineno}: rule outside a policy block")
        if parts[0] == "decoy" and len(parts) == 3:
            if parts[2] not in netsim.DECOY_NAMES:
                raise AgentError(f"line {lineno}: unknown decoy {parts[2]!r}")
            current["plan"].append((_host_id(parts[1], lineno), netsim.DECOY_NAMES.index(parts[2]) + 1))
        elif parts[0] in ("watch", "guard") and len(parts) == 2:
            current[parts[0]].add(_host_id(parts[1], lineno))
        else:
            raise AgentError(f"line {lineno}: unknown rule {raw.strip()!r}")
    close()
    return policies


# Both plans open identically so that the two policies act alike until the
# adversary shows its hand.
DEFAULT_POLICIES_TEXT = """\
policy anti-meander
  guard User0
  guard User1
  guard User2
  guard User3
  guard User4
  decoy Enterprise1 Apache
  decoy Enterprise1 SSHD
  decoy OpServer0 HarakaSMTP
  decoy OpServer0 SSHD
  decoy Enterprise0 HarakaSMTP
  decoy Enterprise0 SSHD
  decoy Enterprise2 SMSS
  decoy Enterprise2 Tomcat

policy anti-bline
  decoy Enterprise1 Apache
  decoy Enterprise1 SSHD
  decoy OpServer0 HarakaSMTP
  decoy OpServer0 SSHD
  watch Enterprise1
  watch OpServer0
  guard Enterprise1
  guard OpServer0
"""


def default_policies() -> dict[str, ControllerPolicy]:
    return load_policies(DEFAULT_POLICIES_TEXT)


# --------------------------------------------------------------------------
# adversary classification

def classify_adversary(window: Iterable[int]) -> PolicyKind | None:
    """Name the counter-strategy suggested by a window of packed observations.

    Meander-like: scans on at least three distinct user hosts.  BLine-like:
    activity beyond the user subnet that only ever walks forward along the
    B_line route.  When both are present the more recent evidence wins.
    """
    user_scans: set[int] = set()
    meander_at = bline_at = -1
    path_pos = -1
    path_ok = True
    for i, packed in enumerate(window):
        obs = netsim.decode(packed)
        for h, ho in enumerate(obs.hosts):
            if ho.activity == Activity.NONE:
                continue
            if h in netsim.USER_HOSTS:
                if ho.activity == Activity.SCAN:
                    user_scans.add(h)
                    if len(user_scans) >= MEANDER_MIN_SCANS:
                        meander_at = i
            elif h in BLINE_PATH and BLINE_PATH.index(h) >= path_pos:
                path_pos = BLINE_PATH.index(h)
                bline_at = i
            else:
                path_ok = False
    if not path_ok:
        bline_at = -1
    if meander_at < 0 and bline_at < 0:
        return None
    return PolicyKind.ANTI_BLINE if bline_at > meander_at else PolicyKind.ANTI_MEANDER


def affected_host(prev: Observation | None, cur: Observation) -> int:
    """Host a safe restore should target after an OOD transition."""
    def by_value(hosts):
        return max(hosts, key=lambda i: (netsim.host_value(i), -i))

    if prev is not None:
        worse = [h for h in range(netsim.N_HOSTS)
                 if cur.hosts[h].compromise > prev.hosts[h].compromise]
        if len(worse) == 1:
            return worse[0]
    compromised = [h for h, ho in enumerate(cur.hosts) if ho.compromise != Compromise.NO]
    if compromised:
        return by_value(compromised)
    active = [h for h, ho in enumerate(cur.hosts) if ho.activity != Activity.NONE]
    if active:
        return by_value(active)
    return netsim.OP_SERVER


# --------------------------------------------------------------------------
# tree

NAMES = {
    "not_select": "NotSelectStrategy?",
    "select": "SelectStrategy!",
    "meta": "GetMetaAction!",
    "analysis": "GetAnalysisAction!",
    "detector": "GetDetectorAction!",
    "mitigate": "GetMitigateAction!",
    "is_analysis": "IsAnalysis?",
    "is_detector": "IsDetector?",
    "is_mitigate": "IsMitigate?",
    "id": "ID?",
    "ood": "OOD?",
    "safe": "GetSafeAction!",
}


def build_defense_tree(with_ood: bool = False, with_strategy_select: bool = True,
                       with_safe_action: bool = False) -> bt.Node:
    """The defense tree, optionally extended with the OOD-monitoring nodes.

    Without monitoring::

        Root = Sequence[ Fallback[NotSelectStrategy?, SelectStrategy!],
                         MetaAction ]

    With monitoring and a safe action the meta-action branch only runs for
    in-distribution ticks; otherwise ``GetSafeAction!`` replaces it::

        Root = Sequence[ StrategySelect,
                         Fallback[ Sequence[ID?, MetaAction],
                                   Sequence[OOD?, GetSafeAction!] ] ]

    Monitoring without a safe action only records the verdict::

        Root = Sequence[ StrategySelect, Fallback[ID?, OOD?], MetaAction ]
    """
    if with_safe_action and not with_ood:
        raise bt.TreeError("a safe action needs the OOD monitor")
    n = NAMES
    meta = bt.sequence(
        "MetaAction",
        bt.action(n["meta"], "get_meta_action"),
        bt.fallback(
            "DefenseBehaviors",
            bt.sequence("Analysis", bt.condition(n["is_analysis"], "is_analysis"),
                        bt.action(n["analysis"], "get_analysis_action")),
            bt.sequence("Detector", bt.condition(n["is_detector"], "is_detector"),
                        bt.action(n["detector"], "get_detector_action")),
            bt.sequence("Mitigate", bt.condition(n["is_mitigate"], "is_mitigate"),
                        bt.action(n["mitigate"], "get_mitigate_action")),
        ),
    )
    children = []
    if with_strategy_select:
        children.append(bt.fallback("StrategySelect",
                                    bt.condition(n["not_select"], "not_select_strategy"),
                                    bt.action(n["select"], "select_strategy")))
    id_node = bt.condition(n["id"], "id_check")
    ood_node = bt.condition(n["ood"], "ood_check")
    if not with_ood:
        children.append(meta)
    elif with_safe_action:
        children.append(bt.fallback("OODMonitor",
                                    bt.sequence("InDistribution", id_node, meta),
                                    bt.sequence("SafeAction", ood_node,
                                                bt.action(n["safe"], "get_safe_action"))))
    else:
        children += [bt.fallback("OODMonitor", id_node, ood_node), meta]
    return bt.sequence("Root", *children)


# --------------------------------------------------------------------------
# behaviors

def _obs(view, key="observation") -> Observation | None:
    v = view.get(key)
    return None if v is None else netsim.decode(v)


def _emit(view, action: BlueAction) -> Status:
    if view.get("action") is not None:
        raise AgentError(f"{view.client} tried to emit a second action this tick")
    view.set("action", action.index)
    return Status.SUCCESS


def _pending_decoys(policy: ControllerPolicy, placed: set) -> list[tuple[int, int]]:
    return [entry for entry in policy.decoy_plan if entry not in placed]


def not_select_strategy(view) -> Status:
    # Evidence from this tick only counts from the next tick on, so a policy
    # switch always lands one tick after the observation that prompted it.
    window: deque = view["evidence"]
    choice = classify_adversary(window)
    window.append(view["observation"])
    view.set("strategy_choice", choice.value if choice else None)
    active: ControllerPolicy = view["active_policy"]
    if choice is None or choice == active.strategy_kind:
        return Status.SUCCESS
    if choice.value not in view["policies"]:
        # no counter-policy available for this adversary; keep going
        return Status.SUCCESS
    return Status.FAILURE


def select_strategy(view) -> Status:
    choice = view["strategy_choice"]
    view.set("active_policy", view["policies"][choice])
    return Status.SUCCESS


def get_meta_action(view) -> Status:
    policy: ControllerPolicy = view["active_policy"]
    pending = bool(_pending_decoys(policy, view["decoys_placed"]))
    view.set("meta_choice", int(policy.decide(_obs(view), pending)))
    return Status.SUCCESS


def _is(choice: MetaChoice):
    def check(view) -> Status:
        return Status.SUCCESS if view["meta_choice"] == choice else Status.FAILURE
    check.__name__ = f"is_{choice.name.lower()}"
    return check


def get_analysis_action(view) -> Status:
    policy: ControllerPolicy = view["active_policy"]
    return _emit(view, policy.analysis(_obs(view)))


def get_detector_action(view) -> Status:
    policy: ControllerPolicy = view["active_policy"]
    placed: set = view["decoys_placed"]
    pending = _pending_decoys(policy, placed)
    if not pending:
        return Status.FAILURE
    host, decoy = pending[0]
    placed.add((host, decoy))
    return _emit(view, BlueAction(BlueKind.DECOY, host, decoy))


def _forget_decoys(placed: set, host: int) -> None:
    for entry in [e for e in placed if e[0] == host]:
        placed.discard(entry)


def get_mitigate_action(view) -> Status:
    policy: ControllerPolicy = view["active_policy"]
    act = policy.mitigation(_obs(view))
    if act is None:
        return Status.FAILURE
    if act.kind == BlueKind.RESTORE:
        _forget_decoys(view["decoys_placed"], act.host)
    return _emit(view, act)


def id_check(view) -> Status:
    policy: ControllerPolicy = view["active_policy"]
    models: dict[str, TransitionModel] = view["monitors"]
    model = models.get(policy.tag) if models else None
    if model is None:
        raise MonitorError(f"no trained monitor for policy {policy.tag!r}")
    prev = view["prev_observation"]
    if prev is None:
        view.set("ood_flag", False)
        return Status.SUCCESS
    verdict = model.classify(prev, view["last_action"], view["observation"],
                             view["monitor_config"], policy_tag=policy.tag)
    ood = verdict == Verdict.OOD
    view.set("ood_flag", ood)
    return Status.FAILURE if ood else Status.SUCCESS


def ood_check(view) -> Status:
    return Status.SUCCESS if view["ood_flag"] else Status.FAILURE


def get_safe_action(view) -> Status:
    if not view["ood_flag"]:
        raise AgentError("safe action requested for an in-distribution tick")
    h = affected_host(_obs(view, "prev_observation"), _obs(view))
    _forget_decoys(view["decoys_placed"], h)
    view.set("safe_mark", True)
    return _emit(view, BlueAction(BlueKind.RESTORE, h))


BEHAVIORS = {
    "not_select_strategy": not_select_strategy,
    "select_strategy": select_strategy,
    "get_meta_action": get_meta_action,
    "is_analysis": _is(MetaChoice.ANALYSIS),
    "is_detector": _is(MetaChoice.DETECTOR),
    "is_mitigate": _is(MetaChoice.MITIGATE),
    "get_analysis_action": get_analysis_action,
    "get_detector_action": get_detector_action,
    "get_mitigate_action": get_mitigate_action,
    "id_check": id_check,
    "ood_check": ood_check,
    "get_safe_action": get_safe_action,
}

R, W, RW = Perm.READ, Perm.WRITE, Perm.READ_WRITE

# (node name) -> {key: permission}
PERMISSIONS: dict[str, dict[str, Perm]] = {
    "simulator": {"observation": RW, "prev_observation": RW, "last_action": RW, "action": RW,
                  "ood_flag": RW, "safe_mark": RW},
    NAMES["not_select"]: {"observation": R, "evidence": RW, "strategy_choice": W,
                          "active_policy": R, "policies": R},
    NAMES["select"]: {"strategy_choice": R, "policies": R, "active_policy": RW},
    NAMES["meta"]: {"observation": R, "active_policy": R, "decoys_placed": R, "meta_choice": W},
    NAMES["is_analysis"]: {"meta_choice": R},
    NAMES["is_detector"]: {"meta_choice": R},
    NAMES["is_mitigate"]: {"meta_choice": R},
    NAMES["analysis"]: {"observation": R, "active_policy": R, "action": RW},
    NAMES["detector"]: {"active_policy": R, "decoys_placed": RW, "action": RW},
    NAMES["mitigate"]: {"observation": R, "active_policy": R, "decoys_placed": RW, "action": RW},
    NAMES["id"]: {"observation": R, "prev_observation": R, "last_action": R, "active_policy": R,
                  "monitors": R, "monitor_config": R, "ood_flag": W},
    NAMES["ood"]: {"ood_flag": R},
    NAMES["safe"]: {"observation": R, "prev_observation": R, "ood_flag": R, "decoys_placed": RW,
                    "action": RW, "safe_mark": W},
}

KEYS = {
    "observation": "bits",
    "prev_observation": "handle",
    "last_action": "handle",
    "action": "handle",
    "meta_choice": "int",
    "ood_flag": "bool",
    "safe_mark": "bool",
    "active_policy": "handle",
    "policies": "handle",
    "strategy_choice": "handle",
    "evidence": "handle",
    "decoys_placed": "handle",
    "monitors": "handle",
    "monitor_config": "handle",
}


def make_blackboard() -> bt.Blackboard:
    board = bt.Blackboard()
    for key, kind in KEYS.items():
        board.declare(key, kind)
    for client, perms in PERMISSIONS.items():
        for key, perm in perms.items():
            board.grant(client, key, perm)
    return board


def make_registry() -> bt.BehaviorRegistry:
    reg = bt.BehaviorRegistry()
    for bid, fn in BEHAVIORS.items():
        reg.register(bid, fn)
    return reg


# --------------------------------------------------------------------------
# agent

@dataclass
class AgentContext:
    """Snapshot of the agent's per-episode memory."""

    active_policy: ControllerPolicy
    monitor_handle: TransitionModel | None
    last_observation: Observation | None
    last_action: BlueAction | None
    ood_flag: bool
    decoy_plan: list[tuple[int, int]]


@dataclass
class TickResult:
    action: int
    ood: bool
    safe: bool
    policy: str
    trace: list[str] = field(default_factory=list)


class DefenseAgent:
    """Runs the defense tree once per timestep against a blackboard."""

    def __init__(self, tree: bt.Node, policies: dict[str, ControllerPolicy], initial_policy: str,
                 monitors: dict[str, TransitionModel] | None = None,
                 config: MonitorConfig = MonitorConfig(), record_trace: bool = False):
        if initial_policy not in policies:
            raise AgentError(f"unknown initial policy {initial_policy!r}")
        self.tree = tree
        self.policies = dict(policies)
        self.initial_policy = initial_policy
        self.monitors = dict(monitors or {})
        self.config = config
        self.record_trace = record_trace
        self.registry = make_registry()
        self.board = make_blackboard()
        self._sim = self.board.view("simulator")
        self.history: list[TickResult] = []
        self.reset()

    @classmethod
    def fixed(cls, policy: ControllerPolicy) -> DefenseAgent:
        """Plain defense tree pinned to one policy, as used for data generation."""
        return cls(build_defense_tree(False, False, False), {policy.tag: policy}, policy.tag)

    @property
    def policy_tag(self) -> str:
        return self.board._values["active_policy"].tag

    def reset(self) -> None:
        b = self.board
        b._store("active_policy", self.policies[self.initial_policy])
        b._store("policies", self.policies)
        b._store("monitors", self.monitors)
        b._store("monitor_config", self.config)
        b._store("evidence", deque(maxlen=EVIDENCE_WINDOW))
        b._store("decoys_placed", set())
        for key in ("prev_observation", "last_action", "action", "strategy_choice"):
            b._store(key, None)
        b._store("ood_flag", False)
        b._store("safe_mark", False)
        b._store("meta_choice", int(MetaChoice.ANALYSIS))
        self._prev: int | None = None
        self._last: int | None = None
        self.history = []

    def act(self, obs: int) -> int:
        sim = self._sim
        sim.set("observation", obs)
        sim.set("prev_observation", self._prev)
        sim.set("last_action", self._last)
        sim.set("action", None)
        sim.set("ood_flag", False)
        sim.set("safe_mark", False)
        trace: list[str] | None = [] if self.record_trace else None
        status = bt.tick(self.tree, self.board, self.registry, trace)
        action = sim.get("action")
        if status != Status.SUCCESS or action is None:
            raise AgentError(f"tick ended {status.value} without an action")
        self.history.append(TickResult(action, sim.get("ood_flag"), sim.get("safe_mark"),
                                       self.policy_tag, trace or []))
        self._prev, self._last = obs, action
        return action

    @property
    def has_monitor(self) -> bool:
        return any(n.behavior == "id_check" for n in self.tree.leaves())

    def check(self, obs: int) -> Verdict:
        """Monitor verdict for the transition into ``obs`` without ticking the tree."""
        policy = self.board._values["active_policy"]
        model = self.monitors.get(policy.tag)
        if model is None:
            raise MonitorError(f"no trained monitor for policy {policy.tag!r}")
        if self._prev is None:
            return Verdict.ID
        return model.classify(self._prev, self._last, obs, self.config, policy_tag=policy.tag)

    def context(self) -> AgentContext:
        v = self.board._values
        policy = v["active_policy"]
        return AgentContext(
            active_policy=policy,
            monitor_handle=self.monitors.get(policy.tag),
            last_observation=None if self._prev is None else netsim.decode(self._prev),
            last_action=None if self._last is None else BlueAction.from_index(self._last),
            ood_flag=v["ood_flag"],
            decoy_plan=_pending_decoys(policy, v["decoys_placed"]),
        )


def run_episode(agent: DefenseAgent, seed: int, strategy: netsim.RedStrategyState, horizon: int,
                rewards: netsim.RewardConfig = netsim.RewardConfig()) -> list[tuple]:
    """Play one episode; returns ``(t, s_prev, a, s_next, reward, red_action)`` rows."""
    world, obs = netsim.reset(seed, strategy)
    agent.reset()
    prev = obs.packed
    rows = []
    for t in range(1, horizon + 1):
        a = agent.act(prev)
        world, obs, r, _ = netsim.step(world, a, rewards)
        rows.append((t, prev, a, obs.packed, r, world.last_red_action))
        prev = obs.packed
    return rows


def leaf_names(tree: bt.Node) -> list[str]:
    return sorted(n.name for n in tree.leaves())


def policy_for(strategy: netsim.StrategyKind) -> PolicyKind:
    return PolicyKind.ANTI_BLINE if strategy == netsim.StrategyKind.BLINE else PolicyKind.ANTI_MEANDER


__all__: Sequence[str] = [
    "AgentContext", "ControllerPolicy", "DefenseAgent", "MetaChoice", "PolicyKind",
    "affected_host", "build_defense_tree", "classify_adversary", "default_policies",
    "load_policies", "run_episode",
]
