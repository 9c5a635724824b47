"""Desk-scale red-vs-blue network simulator.

Thirteen hosts in three subnets, a scripted red attacker (Meander, BLine or
RedSwitch) and a blue defender choosing one of 132 discrete actions per
timestep.  The blue side only ever sees a 52-bit observation: per host, the
red activity surfaced this tick and the blue-side compromise belief.

Within a step the red action resolves first and the blue action second, so a
blue ``Analyze`` reports the access level red holds at the end of the tick.
All randomness is drawn from counter-based streams keyed by
``(seed, timestep, purpose)``, which keeps ``step`` a pure function of the
world it is given.
"""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass, field, replace
from typing import Iterable, NamedTuple

N_HOSTS = 13
N_DECOY_TYPES = 7
OBS_BITS = 4 * N_HOSTS

HOST_NAMES = (
    "User0", "User1", "User2", "User3", "User4",
    "Enterprise0", "Enterprise1", "Enterprise2", "Defender",
    "OpHost0", "OpHost1", "OpHost2", "OpServer0",
)
USER_HOSTS = (0, 1, 2, 3, 4)
ENTERPRISE_SERVERS = (5, 6, 7)
DEFENDER = 8
OP_HOSTS = (9, 10, 11)
OP_SERVER = 12
SUBNETS = {
    1: USER_HOSTS,
    2: ENTERPRISE_SERVERS + (DEFENDER,),
    3: OP_HOSTS + (OP_SERVER,),
}
# red never targets the defender workstation
ATTACKABLE = {s: tuple(h for h in hosts if h != DEFENDER) for s, hosts in SUBNETS.items()}

# B_line route: any privileged user host -> Enterprise1 -> OpServer0
BLINE_ENTERPRISE = 6

DECOY_NAMES = ("Apache", "Femitter", "HarakaSMTP", "SMSS", "SSHD", "Svchost", "Tomcat")
# Exploitable services per host, as decoy-type codes 1..7.  A red exploit picks
# one of these uniformly; a decoy of the same type on the host defeats it.
SERVICES: tuple[tuple[int, ...], ...] = (
    (5,),       # User0
    (2, 6),     # User1
    (4, 6),     # User2
    (1, 7),     # User3
    (3, 5),     # User4
    (3, 5),     # Enterprise0
    (1, 5),     # Enterprise1
    (4, 7),     # Enterprise2
    (5,),       # Defender
    (5,),       # OpHost0
    (5,),       # OpHost1
    (5,),       # OpHost2
    (3, 5),     # OpServer0
)


def subnet_of(host: int) -> int:
    for s, hosts in SUBNETS.items():
        if host in hosts:
            return s
    raise ValueError(f"unknown host {host}")


def host_value(host: int) -> int:
    """Criticality rank used when a defender must choose among hosts."""
    if host == OP_SERVER:
        return 4
    if host in ENTERPRISE_SERVERS:
        return 3
    if host in OP_HOSTS:
        return 2
    if host == DEFENDER:
        return 1
    return 0


class SimulationError(ValueError):
    """Raised for invalid actions or malformed observations."""


# --------------------------------------------------------------------------
# observations

class Activity(enum.IntEnum):
    NONE = 0
    SCAN = 1
    EXPLOIT = 2


class Compromise(enum.IntEnum):
    NO = 0
    UNKNOWN = 1
    USER = 2
    PRIVILEGED = 3


class HostObservation(NamedTuple):
    activity: Activity = Activity.NONE
    compromise: Compromise = Compromise.NO


@dataclass(frozen=True)
class Observation:
    hosts: tuple[HostObservation, ...]

    def __post_init__(self):
        if len(self.hosts) != N_HOSTS:
            raise SimulationError(f"observation needs {N_HOSTS} hosts, got {len(self.hosts)}")
        for h in self.hosts:
            if h.activity == Activity.EXPLOIT and h.compromise == Compromise.NO:
                raise SimulationError("exploit activity observed on a host reported clean")

    @classmethod
    def clear(cls) -> Observation:
        return cls(tuple(HostObservation() for _ in range(N_HOSTS)))

    @property
    def packed(self) -> int:
        return encode(self)


def encode(obs: Observation) -> int:
    """Pack into 52 bits; host ``i`` owns bits ``4i..4i+3``, activity in the low pair."""
    v = 0
    for i, h in enumerate(obs.hosts):
        v |= (int(h.activity) | (int(h.compromise) << 2)) << (4 * i)
    return v


def decode(v: int) -> Observation:
    if v < 0 or v >> OBS_BITS:
        raise SimulationError(f"observation vector exceeds {OBS_BITS} bits")
    hosts = []
    for i in range(N_HOSTS):
        nib = (v >> (4 * i)) & 0xF
        act = nib & 0b11
        if act == 3:
            raise SimulationError(f"reserved activity code on host {i}")
        hosts.append(HostObservation(Activity(act), Compromise(nib >> 2)))
    return Observation(tuple(hosts))


def obs_hex(v: int) -> str:
    return format(v, "013x")


# --------------------------------------------------------------------------
# actions

class BlueKind(enum.IntEnum):
    SLEEP = 0
    MONITOR = 1
    ANALYZE = 2
    REMOVE = 3
    RESTORE = 4
    DECOY = 5


_ANALYZE0 = 2
_REMOVE0 = _ANALYZE0 + N_HOSTS
_RESTORE0 = _REMOVE0 + N_HOSTS
_DECOY0 = _RESTORE0 + N_HOSTS
N_BLUE_ACTIONS = _DECOY0 + N_HOSTS * N_DECOY_TYPES  # 132


@dataclass(frozen=True)
class BlueAction:
    kind: BlueKind
    host: int | None = None
    decoy: int | None = None

    def __post_init__(self):
        needs_host = self.kind not in (BlueKind.SLEEP, BlueKind.MONITOR)
        if needs_host != (self.host is not None):
            raise SimulationError(f"{self.kind.name} host argument mismatch")
        if self.host is not None and not 0 <= self.host < N_HOSTS:
            raise SimulationError(f"host {self.host} out of range")
        if (self.kind == BlueKind.DECOY) != (self.decoy is not None):
            raise SimulationError("decoy type required exactly for DeployDecoy")
        if self.decoy is not None and not 1 <= self.decoy <= N_DECOY_TYPES:
            raise SimulationError(f"decoy type {self.decoy} out of range")

    @property
    def index(self) -> int:
        k = self.kind
        if k == BlueKind.SLEEP:
            return 0
        if k == BlueKind.MONITOR:
            return 1
        if k == BlueKind.ANALYZE:
            return _ANALYZE0 + self.host
        if k == BlueKind.REMOVE:
            return _REMOVE0 + self.host
        if k == BlueKind.RESTORE:
            return _RESTORE0 + self.host
        return _DECOY0 + N_DECOY_TYPES * self.host + (self.decoy - 1)

    @classmethod
    def from_index(cls, index: int) -> BlueAction:
        if not isinstance(index, int) or isinstance(index, bool) or not 0 <= index < N_BLUE_ACTIONS:
            raise SimulationError(f"invalid blue action index {index!r}")
        if index == 0:
            return cls(BlueKind.SLEEP)
        if index == 1:
            return cls(BlueKind.MONITOR)
        if index < _REMOVE0:
            return cls(BlueKind.ANALYZE, index - _ANALYZE0)
        if index < _RESTORE0:
            return cls(BlueKind.REMOVE, index - _REMOVE0)
        if index < _DECOY0:
            return cls(BlueKind.RESTORE, index - _RESTORE0)
        host, d = divmod(index - _DECOY0, N_DECOY_TYPES)
        return cls(BlueKind.DECOY, host, d + 1)

    def __str__(self) -> str:
        if self.host is None:
            return self.kind.name.title()
        name = HOST_NAMES[self.host]
        if self.kind == BlueKind.DECOY:
            return f"DeployDecoy({name},{DECOY_NAMES[self.decoy - 1]})"
        return f"{self.kind.name.title()}({name})"


SLEEP = BlueAction(BlueKind.SLEEP)
MONITOR = BlueAction(BlueKind.MONITOR)


class RedKind(enum.IntEnum):
    DISCOVER = 0
    SCAN = 1
    EXPLOIT = 2
    ESCALATE = 3
    IMPACT = 4


@dataclass(frozen=True)
class RedAction:
    kind: RedKind
    host: int | None = None
    subnet: int | None = None

    def __str__(self) -> str:
        if self.kind == RedKind.DISCOVER:
            return f"DiscoverSubnet({self.subnet})"
        if self.kind == RedKind.IMPACT:
            return "Impact"
        return f"{self.kind.name.title()}({HOST_NAMES[self.host]})"


# --------------------------------------------------------------------------
# world

class Access(enum.IntEnum):
    NONE = 0
    USER = 1
    PRIVILEGED = 2


class StrategyKind(enum.Enum):
    MEANDER = "meander"
    BLINE = "bline"
    REDSWITCH = "redswitch"


@dataclass(frozen=True)
class RedStrategyState:
    strategy: StrategyKind
    switch_timestep: int | None = None
    # Meander progress: host currently being worked on
    target: int | None = None

    def __post_init__(self):
        if (self.strategy == StrategyKind.REDSWITCH) != (self.switch_timestep is not None):
            raise SimulationError("switch_timestep is required exactly for RedSwitch")

    def phase(self, t: int) -> StrategyKind:
        if self.strategy == StrategyKind.REDSWITCH:
            return StrategyKind.MEANDER if t < self.switch_timestep else StrategyKind.BLINE
        return self.strategy

    @classmethod
    def meander(cls) -> RedStrategyState:
        return cls(StrategyKind.MEANDER)

    @classmethod
    def bline(cls) -> RedStrategyState:
        return cls(StrategyKind.BLINE)

    @classmethod
    def redswitch(cls, switch_timestep: int) -> RedStrategyState:
        return cls(StrategyKind.REDSWITCH, switch_timestep)


@dataclass(frozen=True)
class RewardConfig:
    user_privileged: float = -0.1
    enterprise_privileged: float = -1.0
    impact: float = -10.0
    restore: float = -1.0

    def __post_init__(self):
        for name in ("user_privileged", "enterprise_privileged", "impact", "restore"):
            if getattr(self, name) > 0:
                raise SimulationError(f"reward term {name} must be <= 0")


@dataclass(frozen=True)
class WorldState:
    seed: int
    timestep: int
    foothold: int
    red_access: tuple[Access, ...]
    red_known_hosts: frozenset[int]
    red_scanned: frozenset[int]
    decoys: tuple[frozenset[int], ...]
    impact_active: bool
    red_strategy_state: RedStrategyState
    # blue-side view: persistent compromise belief and activity buffered while asleep
    belief: tuple[Compromise, ...]
    pending_activity: tuple[Activity, ...]
    last_red_action: RedAction | None = None

    def check(self) -> None:
        if len(self.red_access) != N_HOSTS or len(self.decoys) != N_HOSTS:
            raise SimulationError("per-host fields must cover all hosts")
        for ds in self.decoys:
            if len(ds) > N_DECOY_TYPES or any(not 1 <= d <= N_DECOY_TYPES for d in ds):
                raise SimulationError("bad decoy set")
        if self.impact_active and self.red_access[OP_SERVER] != Access.PRIVILEGED:
            raise SimulationError("impact without privileged access on the op server")
        held = {h for h, a in enumerate(self.red_access) if a != Access.NONE}
        if not held <= self.red_scanned <= self.red_known_hosts:
            raise SimulationError("red knowledge must cover scanned and held hosts")

    def held(self) -> list[int]:
        return [h for h, a in enumerate(self.red_access) if a != Access.NONE]


class Event(NamedTuple):
    actor: str
    action: str
    outcome: str


def _stream(seed: int, timestep: int, purpose: str) -> random.Random:
    return random.Random(f"{seed}/{timestep}/{purpose}")


def reset(seed: int, strategy: RedStrategyState) -> tuple[WorldState, Observation]:
    """Fresh episode: red holds user access on one uniformly drawn user host."""
    foothold = _stream(seed, -1, "foothold").choice(USER_HOSTS)
    access = [Access.NONE] * N_HOSTS
    access[foothold] = Access.USER
    known = frozenset(range(N_HOSTS)) if strategy.phase(0) == StrategyKind.BLINE else frozenset({foothold})
    world = WorldState(
        seed=seed,
        timestep=0,
        foothold=foothold,
        red_access=tuple(access),
        red_known_hosts=known,
        red_scanned=frozenset({foothold}),
        decoys=tuple(frozenset() for _ in range(N_HOSTS)),
        impact_active=False,
        red_strategy_state=strategy,
        belief=(Compromise.NO,) * N_HOSTS,
        pending_activity=(Activity.NONE,) * N_HOSTS,
    )
    return world, Observation.clear()


# --------------------------------------------------------------------------
# red policies

def _attack_step(world: WorldState, host: int) -> RedAction:
    if host not in world.red_scanned:
        return RedAction(RedKind.SCAN, host)
    if world.red_access[host] == Access.NONE:
        return RedAction(RedKind.EXPLOIT, host)
    return RedAction(RedKind.ESCALATE, host)


def _meander_action(world: WorldState) -> tuple[RedAction, int | None]:
    access = world.red_access
    if access[OP_SERVER] == Access.PRIVILEGED:
        return RedAction(RedKind.IMPACT), None
    if not world.held():
        return RedAction(RedKind.EXPLOIT, world.foothold), None
    # secure the entry host before anything else
    if access[world.foothold] == Access.USER:
        return RedAction(RedKind.ESCALATE, world.foothold), None
    for s in (1, 2, 3):
        hosts = ATTACKABLE[s]
        pending = [h for h in hosts if access[h] != Access.PRIVILEGED]
        if not pending:
            continue
        if not set(hosts) <= world.red_known_hosts:
            return RedAction(RedKind.DISCOVER, subnet=s), None
        target = world.red_strategy_state.target
        last = world.last_red_action
        # a target whose foothold was lost (blocked or cleaned up) is dropped
        stalled = (target in world.red_scanned and access[target] == Access.NONE
                   and last != RedAction(RedKind.SCAN, target))
        if target not in pending or stalled:
            rng = _stream(world.seed, world.timestep, "meander-target")
            target = rng.choice(pending)
        return _attack_step(world, target), target
    return RedAction(RedKind.IMPACT), None


def _bline_action(world: WorldState) -> RedAction:
    access = world.red_access
    if access[OP_SERVER] == Access.PRIVILEGED:
        return RedAction(RedKind.IMPACT)
    if access[OP_SERVER] == Access.USER:
        return RedAction(RedKind.ESCALATE, OP_SERVER)
    if access[BLINE_ENTERPRISE] == Access.PRIVILEGED:
        return _attack_step(world, OP_SERVER)
    if access[BLINE_ENTERPRISE] == Access.USER:
        return RedAction(RedKind.ESCALATE, BLINE_ENTERPRISE)
    if any(access[h] == Access.PRIVILEGED for h in USER_HOSTS):
        return _attack_step(world, BLINE_ENTERPRISE)
    users = [h for h in USER_HOSTS if access[h] == Access.USER]
    if users:
        h = world.foothold if world.foothold in users else users[0]
        return RedAction(RedKind.ESCALATE, h)
    return RedAction(RedKind.EXPLOIT, world.foothold)


def red_next_action(world: WorldState) -> RedAction:
    """The red agent's choice for the tick starting at ``world``."""
    if world.red_strategy_state.phase(world.timestep) == StrategyKind.MEANDER:
        return _meander_action(world)[0]
    return _bline_action(world)


# --------------------------------------------------------------------------
# dynamics

def _apply_red(world: WorldState, action: RedAction, access: list, known: set, scanned: set,
               activity: list) -> tuple[bool, str]:
    """Mutates the scratch copies; returns (impact, outcome)."""
    k, h = action.kind, action.host
    if k == RedKind.DISCOVER:
        if not any(a != Access.NONE for a in access):
            return False, "no-foothold"
        known.update(SUBNETS[action.subnet])
        return False, "ok"
    if k == RedKind.IMPACT:
        if access[OP_SERVER] != Access.PRIVILEGED:
            return False, "no-access"
        activity[OP_SERVER] = Activity.EXPLOIT
        return True, "ok"
    if k == RedKind.SCAN:
        if h not in known or not any(a != Access.NONE for a in access):
            return False, "unreachable"
        scanned.add(h)
        activity[h] = max(activity[h], Activity.SCAN)
        return False, "ok"
    if k == RedKind.EXPLOIT:
        phishing = h == world.foothold and not any(a != Access.NONE for a in access)
        if h not in scanned or not (phishing or any(a != Access.NONE for a in access)):
            return False, "unreachable"
        activity[h] = Activity.EXPLOIT
        service = _stream(world.seed, world.timestep, "service").choice(SERVICES[h])
        if service in world.decoys[h]:
            return False, "decoy"
        if access[h] == Access.NONE:
            access[h] = Access.USER
        return False, "ok"
    if k == RedKind.ESCALATE:
        if access[h] != Access.USER:
            return False, "no-access"
        access[h] = Access.PRIVILEGED
        return False, "ok"
    raise SimulationError(f"unknown red action {action}")


def step(world: WorldState, blue: BlueAction | int,
         rewards: RewardConfig = RewardConfig()) -> tuple[WorldState, Observation, float, list[Event]]:
    """Advance one timestep: red resolves first, then blue."""
    if isinstance(blue, int):
        blue = BlueAction.from_index(blue)
    elif not isinstance(blue, BlueAction):
        raise SimulationError(f"invalid blue action {blue!r}")

    strategy = world.red_strategy_state
    phase = strategy.phase(world.timestep)
    known = set(world.red_known_hosts)
    if phase == StrategyKind.BLINE:
        # B_line operates with full knowledge of the network
        known.update(range(N_HOSTS))
        red = _bline_action(world)
        target = None
    else:
        red, target = _meander_action(world)
    strategy = replace(strategy, target=target)

    access = list(world.red_access)
    scanned = set(world.red_scanned)
    decoys = list(world.decoys)
    activity = [Activity.NONE] * N_HOSTS
    impact, outcome = _apply_red(world, red, access, known, scanned, activity)
    events = [Event("red", str(red), outcome)]

    belief = list(world.belief)
    k, h = blue.kind, blue.host
    if k == BlueKind.ANALYZE:
        belief[h] = (Compromise.NO, Compromise.USER, Compromise.PRIVILEGED)[access[h]]
    elif k == BlueKind.REMOVE:
        if access[h] == Access.USER:
            access[h] = Access.NONE
        # the defender assumes the clean-up worked
        belief[h] = Compromise.NO
    elif k == BlueKind.RESTORE:
        access[h] = Access.NONE
        decoys[h] = frozenset()
        belief[h] = Compromise.NO
        if h == OP_SERVER:
            impact = False
    elif k == BlueKind.DECOY:
        decoys[h] = decoys[h] | {blue.decoy}
    events.append(Event("blue", str(blue), "ok"))

    # surface red activity; while the defender sleeps it queues up instead
    if k == BlueKind.SLEEP:
        pending = tuple(max(p, a) for p, a in zip(world.pending_activity, activity))
        shown = [Activity.NONE] * N_HOSTS
    else:
        shown = [max(p, a) for p, a in zip(world.pending_activity, activity)]
        pending = (Activity.NONE,) * N_HOSTS
    for i, a in enumerate(shown):
        if a == Activity.EXPLOIT and belief[i] == Compromise.NO:
            belief[i] = Compromise.UNKNOWN

    nxt = WorldState(
        seed=world.seed,
        timestep=world.timestep + 1,
        foothold=world.foothold,
        red_access=tuple(access),
        red_known_hosts=frozenset(known),
        red_scanned=frozenset(scanned),
        decoys=tuple(decoys),
        impact_active=impact and access[OP_SERVER] == Access.PRIVILEGED,
        red_strategy_state=strategy,
        belief=tuple(belief),
        pending_activity=pending,
        last_red_action=red,
    )
    obs = Observation(tuple(HostObservation(a, b) for a, b in zip(shown, belief)))
    return nxt, obs, reward(nxt, blue, rewards), events


def reward(world: WorldState, blue: BlueAction, cfg: RewardConfig = RewardConfig()) -> float:
    r = 0.0
    for h in USER_HOSTS:
        if world.red_access[h] == Access.PRIVILEGED:
            r += cfg.user_privileged
    for h in ENTERPRISE_SERVERS:
        if world.red_access[h] == Access.PRIVILEGED:
            r += cfg.enterprise_privileged
    if world.impact_active:
        r += cfg.impact
    if blue.kind == BlueKind.RESTORE:
        r += cfg.restore
    return r


@dataclass
class NetworkEnv:
    """Stateful convenience wrapper around :func:`reset` / :func:`step`."""

    rewards: RewardConfig = field(default_factory=RewardConfig)
    world: WorldState | None = None

    def reset(self, seed: int, strategy: RedStrategyState) -> Observation:
        self.world, obs = reset(seed, strategy)
        return obs

    def step(self, action: BlueAction | int) -> tuple[Observation, float, list[Event]]:
        if self.world is None:
            raise SimulationError("reset() before step()")
        self.world, obs, r, events = step(self.world, action, self.rewards)
        return obs, r, events


def trace_lines(episode: int, rows: Iterable[tuple[int, RedAction, int, int, float]]) -> list[str]:
    """Ground-truth export: ``episode,t,red_action_kind,blue_action_index,packed_obs_hex,reward``."""
    return [f"{episode},{t},{red.kind.name},{a},{obs_hex(o)},{r:g}" for t, red, a, o, r in rows]
