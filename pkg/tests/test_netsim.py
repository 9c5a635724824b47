from __future__ import annotations

from collections import Counter
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cyberood import netsim
from cyberood.netsim import (
    Access, Activity, BlueAction, BlueKind, Compromise, HostObservation, Observation,
    RedAction, RedKind, RedStrategyState, SimulationError,
)
from oracles import pack

ALL_PRIV_USERS = tuple(Access.PRIVILEGED if h in netsim.USER_HOSTS else Access.NONE
                       for h in range(netsim.N_HOSTS))


def world_with(strategy=None, **changes) -> netsim.WorldState:
    world, _ = netsim.reset(11, strategy or RedStrategyState.meander())
    return replace(world, **changes)


host_obs = st.tuples(st.sampled_from(list(Activity)), st.sampled_from(list(Compromise))).filter(
    lambda hc: not (hc[0] == Activity.EXPLOIT and hc[1] == Compromise.NO))
observations = st.lists(host_obs, min_size=netsim.N_HOSTS, max_size=netsim.N_HOSTS).map(
    lambda hs: Observation(tuple(HostObservation(a, c) for a, c in hs)))


class TestTopology:
    def test_thirteen_hosts_in_three_subnets(self):
        assert netsim.N_HOSTS == 13
        assert [len(netsim.SUBNETS[s]) for s in (1, 2, 3)] == [5, 4, 4]
        assert sorted(h for hs in netsim.SUBNETS.values() for h in hs) == list(range(13))

    def test_subnet_of(self):
        assert netsim.subnet_of(0) == 1
        assert netsim.subnet_of(netsim.DEFENDER) == 2
        assert netsim.subnet_of(netsim.OP_SERVER) == 3
        with pytest.raises(ValueError):
            netsim.subnet_of(13)

    def test_service_table_covers_every_host(self):
        assert len(netsim.SERVICES) == netsim.N_HOSTS
        assert all(s and set(s) <= set(range(1, 8)) for s in netsim.SERVICES)


class TestObservationCodec:
    def test_clear_is_zero(self):
        assert Observation.clear().packed == 0

    def test_single_host_nibble(self):
        hosts = [HostObservation()] * 13
        hosts[0] = HostObservation(Activity.SCAN, Compromise.UNKNOWN)
        packed = Observation(tuple(hosts)).packed
        assert packed == 0b0101
        assert netsim.obs_hex(packed) == "0000000000005"

    def test_matches_hand_packing(self):
        hosts = [(0, 0)] * 13
        hosts[6] = (2, 1)
        hosts[12] = (0, 3)
        obs = Observation(tuple(HostObservation(Activity(a), Compromise(c)) for a, c in hosts))
        assert obs.packed == pack(hosts) == 0xC000006000000

    @given(observations)
    @settings(max_examples=1000)
    def test_roundtrip(self, obs):
        v = netsim.encode(obs)
        assert v < 2 ** 52
        assert netsim.decode(v) == obs

    def test_decode_rejects_reserved_activity(self):
        with pytest.raises(SimulationError):
            netsim.decode(0b0011)

    def test_decode_rejects_oversized_and_negative(self):
        with pytest.raises(SimulationError):
            netsim.decode(1 << 52)
        with pytest.raises(SimulationError):
            netsim.decode(-1)

    def test_exploit_on_clean_host_is_invalid(self):
        with pytest.raises(SimulationError):
            netsim.decode(0b0010)


class TestBlueActions:
    def test_cardinality(self):
        assert netsim.N_BLUE_ACTIONS == 132

    @pytest.mark.parametrize("action,index", [
        (netsim.SLEEP, 0),
        (netsim.MONITOR, 1),
        (BlueAction(BlueKind.ANALYZE, 0), 2),
        (BlueAction(BlueKind.REMOVE, 0), 15),
        (BlueAction(BlueKind.RESTORE, 12), 40),
        (BlueAction(BlueKind.DECOY, 0, 1), 41),
        (BlueAction(BlueKind.DECOY, 12, 7), 131),
    ])
    def test_fixed_indices(self, action, index):
        assert action.index == index
        assert BlueAction.from_index(index) == action

    def test_bijection(self):
        actions = [BlueAction.from_index(i) for i in range(132)]
        assert len(set(actions)) == 132
        assert [a.index for a in actions] == list(range(132))

    @pytest.mark.parametrize("bad", [-1, 132, 1.0, True])
    def test_invalid_index(self, bad):
        with pytest.raises(SimulationError):
            BlueAction.from_index(bad)

    def test_invalid_index_leaves_world_untouched(self):
        world, _ = netsim.reset(3, RedStrategyState.meander())
        with pytest.raises(SimulationError):
            netsim.step(world, 500)
        assert world == netsim.reset(3, RedStrategyState.meander())[0]

    def test_malformed_actions(self):
        with pytest.raises(SimulationError):
            BlueAction(BlueKind.ANALYZE)
        with pytest.raises(SimulationError):
            BlueAction(BlueKind.DECOY, 3, 8)
        with pytest.raises(SimulationError):
            BlueAction(BlueKind.MONITOR, 3)


class TestReset:
    def test_single_user_foothold(self):
        world, obs = netsim.reset(7, RedStrategyState.meander())
        held = world.held()
        assert len(held) == 1 and held[0] in netsim.USER_HOSTS
        assert world.red_access[held[0]] == Access.USER
        assert obs.packed == 0
        assert world.timestep == 0 and not any(world.decoys)

    def test_deterministic(self):
        assert netsim.reset(7, RedStrategyState.bline()) == netsim.reset(7, RedStrategyState.bline())

    def test_foothold_uniform(self):
        counts = Counter(netsim.reset(s, RedStrategyState.meander())[0].foothold for s in range(10_000))
        assert set(counts) == set(netsim.USER_HOSTS)
        sigma = (10_000 * 0.2 * 0.8) ** 0.5
        assert all(abs(c - 2000) <= 3 * sigma for c in counts.values())

    def test_redswitch_requires_timestep(self):
        with pytest.raises(SimulationError):
            RedStrategyState(netsim.StrategyKind.REDSWITCH)
        with pytest.raises(SimulationError):
            RedStrategyState(netsim.StrategyKind.MEANDER, switch_timestep=3)


class TestRedPolicies:
    def test_bline_scans_enterprise_from_privileged_user(self):
        access = list(Access.NONE for _ in range(13))
        access[2] = Access.PRIVILEGED
        world = world_with(RedStrategyState.bline(), red_access=tuple(access), foothold=2,
                           red_scanned=frozenset({2}), red_known_hosts=frozenset(range(13)))
        assert netsim.red_next_action(world) == RedAction(RedKind.SCAN, netsim.BLINE_ENTERPRISE)

    def test_meander_moves_to_subnet_two(self):
        world = world_with(red_access=ALL_PRIV_USERS, red_scanned=frozenset(netsim.USER_HOSTS),
                           red_known_hosts=frozenset(netsim.USER_HOSTS))
        assert netsim.red_next_action(world) == RedAction(RedKind.DISCOVER, subnet=2)

    def test_impact_when_opserver_privileged(self):
        access = list(ALL_PRIV_USERS)
        access[netsim.OP_SERVER] = Access.PRIVILEGED
        for strategy in (RedStrategyState.meander(), RedStrategyState.bline()):
            world = world_with(strategy, red_access=tuple(access),
                               red_scanned=frozenset(range(13)), red_known_hosts=frozenset(range(13)))
            assert netsim.red_next_action(world) == RedAction(RedKind.IMPACT)

    def test_meander_saturates_subnet_before_advancing(self):
        world, _ = netsim.reset(5, RedStrategyState.meander())
        for _ in range(60):
            red = netsim.red_next_action(world)
            if red.host is not None and netsim.subnet_of(red.host) > 1:
                assert all(world.red_access[h] == Access.PRIVILEGED for h in netsim.USER_HOSTS)
            world, *_ = netsim.step(world, netsim.SLEEP)

    def test_bline_retries_blocked_exploit(self):
        world, _ = netsim.reset(5, RedStrategyState.bline())
        ent = netsim.BLINE_ENTERPRISE
        for d in netsim.SERVICES[ent]:
            world, *_ = netsim.step(world, BlueAction(BlueKind.DECOY, ent, d))
        kinds = []
        for _ in range(5):
            world, obs, _, events = netsim.step(world, netsim.MONITOR)
            kinds.append((world.last_red_action, events[0].outcome))
        assert (RedAction(RedKind.EXPLOIT, ent), "decoy") in kinds
        assert kinds[-1] == (RedAction(RedKind.EXPLOIT, ent), "decoy")

    def test_redswitch_matches_meander_then_bline(self):
        sw = 9
        a, _ = netsim.reset(21, RedStrategyState.redswitch(sw))
        b, _ = netsim.reset(21, RedStrategyState.meander())
        for t in range(sw):
            a, oa, ra, _ = netsim.step(a, netsim.MONITOR)
            b, ob, rb, _ = netsim.step(b, netsim.MONITOR)
            assert (a.last_red_action, oa, ra) == (b.last_red_action, ob, rb)
        assert netsim.red_next_action(a) == netsim._bline_action(a)


class TestStep:
    def test_sleep_buffers_activity_until_monitor(self):
        world, _ = netsim.reset(3, RedStrategyState.bline())
        seen_during_sleep = False
        for _ in range(3):
            world, obs, r, _ = netsim.step(world, netsim.SLEEP)
            seen_during_sleep |= any(h.activity != Activity.NONE for h in obs.hosts)
        assert not seen_during_sleep
        world, obs, _, _ = netsim.step(world, netsim.MONITOR)
        assert obs.hosts[netsim.BLINE_ENTERPRISE].activity != Activity.NONE

    def test_restore_resets_host(self):
        world, _ = netsim.reset(3, RedStrategyState.meander())
        h = world.foothold
        world = replace(world, decoys=tuple(frozenset({1}) if i == h else frozenset() for i in range(13)))
        world, obs, r, _ = netsim.step(world, BlueAction(BlueKind.RESTORE, h))
        assert world.red_access[h] == Access.NONE
        assert world.decoys[h] == frozenset()
        assert r == pytest.approx(-1.0)

    def test_remove_only_clears_user_access(self):
        world = world_with(red_access=ALL_PRIV_USERS, red_scanned=frozenset(netsim.USER_HOSTS),
                           red_known_hosts=frozenset(netsim.USER_HOSTS))
        nxt, *_ = netsim.step(world, BlueAction(BlueKind.REMOVE, 0))
        assert nxt.red_access[0] == Access.PRIVILEGED

    def test_decoy_blocks_exploit_and_alerts(self):
        ent = netsim.BLINE_ENTERPRISE
        access = [Access.NONE] * 13
        access[1] = Access.PRIVILEGED
        world = world_with(RedStrategyState.bline(), red_access=tuple(access), foothold=1,
                           red_scanned=frozenset({1, ent}), red_known_hosts=frozenset(range(13)),
                           decoys=tuple(frozenset(netsim.SERVICES[ent]) if i == ent else frozenset()
                                        for i in range(13)))
        nxt, obs, _, events = netsim.step(world, netsim.MONITOR)
        assert events[0] == netsim.Event("red", "Exploit(Enterprise1)", "decoy")
        assert nxt.red_access[ent] == Access.NONE
        assert obs.hosts[ent] == HostObservation(Activity.EXPLOIT, Compromise.UNKNOWN)

    def test_analyze_reveals_access(self):
        world = world_with(red_access=ALL_PRIV_USERS, red_scanned=frozenset(netsim.USER_HOSTS),
                           red_known_hosts=frozenset(netsim.USER_HOSTS))
        _, obs, _, _ = netsim.step(world, BlueAction(BlueKind.ANALYZE, 3))
        assert obs.hosts[3].compromise == Compromise.PRIVILEGED

    def test_impact_penalty(self):
        access = list(ALL_PRIV_USERS)
        access[netsim.OP_SERVER] = Access.PRIVILEGED
        world = world_with(red_access=tuple(access), red_scanned=frozenset(range(13)),
                           red_known_hosts=frozenset(range(13)))
        nxt, obs, r, _ = netsim.step(world, netsim.SLEEP)
        assert nxt.impact_active
        assert r == pytest.approx(-10.0 - 0.5)

    def test_clean_world_reward_zero(self):
        world, _ = netsim.reset(3, RedStrategyState.meander())
        assert netsim.reward(world, netsim.MONITOR) == 0.0
        assert netsim.reward(world, BlueAction(BlueKind.RESTORE, 0)) == -1.0

    def test_reward_config_rejects_positive_terms(self):
        with pytest.raises(SimulationError):
            netsim.RewardConfig(impact=1.0)

    @given(st.integers(0, 2 ** 32), st.sampled_from(["meander", "bline"]),
           st.lists(st.integers(0, 131), min_size=1, max_size=40))
    @settings(max_examples=60, deadline=None)
    def test_invariants_and_determinism(self, seed, name, actions):
        strategy = getattr(RedStrategyState, name)()
        runs = []
        for _ in range(2):
            world, _ = netsim.reset(seed, strategy)
            trace = []
            for a in actions:
                world, obs, r, _ = netsim.step(world, a)
                world.check()
                assert r <= 0
                assert netsim.decode(obs.packed) == obs
                trace.append((obs.packed, r))
            runs.append(trace)
        assert runs[0] == runs[1]

    @given(st.integers(0, 2 ** 32), st.sampled_from(["meander", "bline"]))
    @settings(max_examples=30, deadline=None)
    def test_red_progress_is_monotone_under_sleep(self, seed, name):
        world, _ = netsim.reset(seed, getattr(RedStrategyState, name)())
        held = set(world.held())
        for _ in range(40):
            world, *_ = netsim.step(world, netsim.SLEEP)
            now = set(world.held())
            assert held <= now
            held = now

    def test_env_wrapper(self):
        env = netsim.NetworkEnv()
        with pytest.raises(SimulationError):
            env.step(0)
        assert env.reset(1, RedStrategyState.meander()) == Observation.clear()
        obs, r, events = env.step(netsim.MONITOR)
        assert env.world.timestep == 1 and len(events) == 2

    def test_trace_lines(self):
        red = RedAction(RedKind.SCAN, 0)
        assert netsim.trace_lines(4, [(1, red, 1, 0x5, -0.1)]) == ["4,1,SCAN,1,0000000000005,-0.1"]
