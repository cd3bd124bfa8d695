from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from conftest import packed
from tscomm import roadnet
from tscomm import tensor as T
from tscomm import unilight
from tscomm.env import build_agents
from tscomm.errors import InvalidTopology
from tscomm.features import make_batch
from tscomm.tensor import ParamStore


def new_store(seed=0, **kw):
    s = ParamStore()
    unilight.init_params(s, np.random.default_rng(seed), **kw)
    return s


def test_four_arm_group_sizes(grid_agents):
    for a in grid_agents:
        for row in a.permissions:
            assert row.sum() == 6 and (1 - row).sum() == 6


def test_group_means_match_partition_oracle(grid_agents, rng):
    s = new_store()
    b = packed(grid_agents, rng)
    H = unilight.embed(s, b).data
    g1 = b.group1_mean @ H
    g2 = b.group2_mean @ H
    r = 0
    for k, a in enumerate(grid_agents):
        rows = H[b.row_offsets[k]:b.row_offsets[k + 1]]
        for p in range(a.n_phases):
            on = [j for j in range(a.n_movements) if a.permissions[p, j]]
            off = [j for j in range(a.n_movements) if not a.permissions[p, j]]
            assert g1[r] == pytest.approx(rows[on].mean(axis=0))
            assert g2[r] == pytest.approx(rows[off].mean(axis=0) if off else np.zeros(H.shape[1]))
            r += 1


def test_identical_phases_get_identical_q(grid_agents, rng):
    a = grid_agents[0]
    twin = replace(a, permissions=np.vstack([a.permissions, a.permissions[2:3]]))
    s = new_store()
    b = make_batch([twin], [rng.uniform(0, 3, a.n_movements)], [0], [np.zeros(a.n_movements)])
    q = unilight.q_values(s, b).data
    assert q[2] == pytest.approx(q[-1])


def _permuted(agent, perm):
    inv = np.argsort(perm)
    return replace(
        agent,
        movements=tuple(agent.movements[i] for i in perm),
        turns=agent.turns[perm],
        in_lanes=agent.in_lanes[perm],
        permissions=agent.permissions[:, perm],
        slot_incidence=agent.slot_incidence[:, perm],
        upstream_slot=tuple(agent.upstream_slot[i] for i in perm),
    ), inv


def test_movement_order_does_not_change_q(grid_agents, rng):
    s = new_store(1)
    a = grid_agents[1]
    counts, recv = rng.uniform(0, 3, a.n_movements), rng.uniform(0, 1, a.n_movements)
    base = unilight.q_values(s, make_batch([a], [counts], [3], [recv])).data
    perm = rng.permutation(a.n_movements)
    pa, _ = _permuted(a, perm)
    q = unilight.q_values(s, make_batch([pa], [counts[perm]], [3], [recv[perm]])).data
    assert q == pytest.approx(base)


def test_dueling_ignores_constant_advantage_shift(grid_agents, rng):
    s = new_store(2)
    b = packed(grid_agents, rng)
    q0 = unilight.q_values(s, b).data
    s["light.adv.b"].data += 7.5
    assert unilight.q_values(s, b).data == pytest.approx(q0)


def test_dueling_decomposition(grid_agents, rng):
    s = new_store(3)
    b = packed(grid_agents, rng)
    H = unilight.embed(s, b)
    adv = unilight.advantages(s, H, b).data
    v = unilight.value(s, H, b).data
    q = unilight.q_values(s, b).data
    for k, (qa, aa) in enumerate(zip(b.split_phases(q), b.split_phases(adv))):
        assert qa == pytest.approx(v[k] + aa - aa.mean())


def test_shared_parameters_across_sizes(grid_agents, rng):
    doc = __import__("test_roadnet").t_junction_doc()
    doc["phases"] = {"X": [[["NX", "XS"], ["SX", "XN"]], [["NX", "XE"]], [["EX", "XS"]]]}
    t_agent = build_agents(roadnet.parse_scenario(doc).net)[0]
    s = new_store(4)
    names = s.names()
    b = packed([grid_agents[0], t_agent], rng)
    q = unilight.q_values(s, b)
    assert [len(x) for x in b.split_phases(q.data)] == [8, 3]
    assert s.names() == names
    # packed result equals running each intersection alone
    one = make_batch([t_agent], [b.counts[12:]], [b.current_phase[1]], [b.received[12:]])
    assert unilight.q_values(s, one).data == pytest.approx(b.split_phases(q.data)[1])


def test_all_permitting_phase_uses_zero_stopped_mean(grid_agents, rng):
    a = grid_agents[0]
    wide = replace(a, permissions=np.vstack([a.permissions, np.ones(a.n_movements)]))
    b = packed([wide], rng)
    assert np.all(b.group2_mean.toarray()[-1] == 0)
    assert np.all(np.isfinite(unilight.q_values(new_store(), b).data))


def test_phase_without_movements_is_configuration_error(grid_agents, rng):
    a = grid_agents[0]
    bad = replace(a, permissions=np.vstack([a.permissions, np.zeros(a.n_movements)]))
    with pytest.raises(InvalidTopology):
        unilight.q_values(new_store(), packed([bad], rng))


def test_onehot_encoding(grid_agents, rng):
    s = new_store(phase_encoding="onehot", max_phases=8)
    b = packed(grid_agents, rng)
    q = unilight.q_values(s, b, "onehot", 8).data
    assert q.shape == (32,) and np.all(np.isfinite(q))
    with pytest.raises(ValueError):
        unilight.phase_code_dims("gray", 8)


def test_select_action_rules():
    rng = np.random.default_rng(0)
    assert unilight.select_action(np.array([0.1, 0.7, 0.3]), 0.0, rng) == 1
    assert unilight.select_action(np.array([0.5, 0.9, 0.9, 0.2]), 0.0, rng) == 1
    assert unilight.select_action(np.array([2.0, 2.0]), 0.0, rng) == 0
    with pytest.raises(ValueError):
        unilight.select_action(np.zeros(2), 1.5, rng)


def test_epsilon_one_is_uniform():
    rng = np.random.default_rng(7)
    q = np.array([5.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])
    draws = [unilight.select_action(q, 1.0, rng) for _ in range(10_000)]
    counts = np.bincount(draws, minlength=8)
    assert stats.chisquare(counts).pvalue > 0.001


@pytest.mark.parametrize("encoding", ["bit", "onehot"])
def test_full_forward_gradients(grid_agents, encoding):
    rng = np.random.default_rng(31)
    for case in range(20):
        s = ParamStore()
        unilight.init_params(s, rng, hidden=5, phase_encoding=encoding)
        agents = [grid_agents[i] for i in rng.choice(len(grid_agents), size=int(rng.integers(1, 3)))]
        b = packed(agents, rng)
        w = rng.normal(size=b.n_phase_rows)
        ok, worst = T.gradcheck(lambda: T.tsum(unilight.q_values(s, b, encoding) * w), [s[k] for k in s.names()])
        assert ok, (case, worst)
