import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swarmhead import sim
from swarmhead.sim import Role


def quiet(kind="f1", **kw):
    return sim.IfsSpec.table(kind, kappa_n=0.0, **kw)


# position of UAV 0 after init_swarm([2, 2], seed=3) and 10 steps
FROZEN_POS = [345.2937411941664, 71.37992700692944, 49.79846042916204]


# ---------------------------------------------------------------- init_swarm

def test_init_single_cluster_of_fifteen():
    s = sim.init_swarm([15], sim.ARENA, sim.IfsSpec.table("f1"), seed=1)
    assert s.n == 16
    assert len(s.live_huavs) == 1


def test_init_two_small_clusters():
    s = sim.init_swarm([2, 2], (200.0, 300.0, 50.0), seed=4)
    assert s.n == 6
    assert len(s.live_huavs) == 2
    for h in s.live_huavs:
        assert len(s.members(h)) == 3


@pytest.mark.parametrize("sizes", [[1], [3, 1], []])
def test_init_rejects_bad_cluster_lists(sizes):
    with pytest.raises(ValueError):
        sim.init_swarm(sizes)


def test_init_rejects_non_positive_arena():
    with pytest.raises(ValueError):
        sim.init_swarm([3], arena=(100.0, 0.0, 10.0))


def test_init_places_members_in_ball_inside_arena():
    s = sim.init_swarm([6, 6, 6], seed=9, ball_radius=50.0)
    p0 = s.positions[0]
    assert np.all(p0 >= 0) and np.all(p0 <= np.asarray(sim.ARENA))
    for h, idx in s.clusters().items():
        # members share a 50 m ball, so any two are within 100 m
        d = np.linalg.norm(p0[idx][:, None] - p0[idx][None], axis=-1)
        assert d.max() <= 100.0 + 1e-9


def test_warm_up_fills_first_window():
    s = sim.init_swarm([3], seed=0)
    assert s.clock == s.t0 + 1
    w = sim.topology_window(s, s.live, s.clock - 1)
    assert w.speeds.shape == (4, 4, 3)


def test_init_head_index_is_a_permutation():
    heads = {int(sim.init_swarm([5], seed=k).live_huavs[0]) for k in range(12)}
    assert len(heads) > 1


# ---------------------------------------------------------------- huav_speed_step

def test_huav_step_without_perturbation():
    s = sim.init_swarm([2], seed=0, sigma_h=0.0)
    h = int(s.live_huavs[0])
    s.speeds[-1][h] = [5.0, 0.0, 0.0]
    np.testing.assert_array_equal(sim.huav_speed_step(s, h), [5.0, 0.0, 0.0])


def test_huav_step_magnitude_is_s_h():
    s = sim.init_swarm([2, 3], seed=5, sigma_h=2.0)
    for h in s.live_huavs:
        for _ in range(20):
            v = sim.huav_speed_step(s, h)
            assert abs(np.linalg.norm(v) - 5.0) <= 1e-9


def test_huav_step_is_seeded():
    a = sim.init_swarm([3], seed=11)
    b = sim.init_swarm([3], seed=11)
    h = int(a.live_huavs[0])
    for _ in range(5):
        np.testing.assert_array_equal(sim.huav_speed_step(a, h), sim.huav_speed_step(b, h))


def test_huav_step_rejects_followers():
    s = sim.init_swarm([2], seed=0)
    f = int(np.flatnonzero(s.roles == Role.FUAV)[0])
    with pytest.raises(ValueError):
        sim.huav_speed_step(s, f)


# ---------------------------------------------------------------- ifs_speed

P_ZERO = np.zeros((5, 3))


def lead(*rows):
    """Leader speed window, most recent row last, padded with zeros."""
    out = np.zeros((4, 3))
    for k, r in enumerate(rows):
        out[3 - k] = r
    return out


def test_f1_normalizes_latest_leader_speed():
    out = sim.ifs_speed(quiet("f1"), P_ZERO, lead((3.0, 0.0, 4.0)), np.zeros(3))
    np.testing.assert_allclose(out, [0.6, 0.0, 0.8], atol=1e-15)


def test_f2_adds_two_lags():
    out = sim.ifs_speed(quiet("f2"), P_ZERO, lead((1.0, 0.0, 0.0), (0.0, 1.0, 0.0)), np.zeros(3))
    np.testing.assert_allclose(out, [0.70710678118654752, 0.70710678118654752, 0.0], atol=1e-15)


def test_f3_adds_three_lags():
    out = sim.ifs_speed(quiet("f3"), P_ZERO, lead((1, 0, 0), (0, 1, 0), (0, 0, 2)), np.zeros(3))
    np.testing.assert_allclose(out, np.array([1, 1, 2]) / np.sqrt(6), atol=1e-15)


def test_f4_squares_componentwise():
    out = sim.ifs_speed(quiet("f4"), P_ZERO, lead((1, -2, 0), (0, 0, 2)), np.zeros(3))
    np.testing.assert_allclose(out, np.array([1, 4, 4]) / np.sqrt(33), atol=1e-15)


def test_f5_three_squared_lags():
    out = sim.ifs_speed(quiet("f5"), P_ZERO, lead((1, 0, 0), (0, 1, 0), (0, 0, -1)), np.zeros(3))
    np.testing.assert_allclose(out, np.ones(3) / np.sqrt(3), atol=1e-15)


def test_gains_weight_the_lags():
    spec = quiet("f2", kappa0=3.0, kappa1=4.0)
    out = sim.ifs_speed(spec, P_ZERO, lead((1, 0, 0), (0, 1, 0)), np.zeros(3))
    np.testing.assert_allclose(out, [0.6, 0.8, 0.0], atol=1e-15)


def test_f6_in_range_matches_f1():
    V = lead((3.0, 0.0, 4.0), (1.0, 1.0, 0.0), (0.0, 2.0, 0.0), (1.0, 0.0, 0.0))
    anchor = np.array([10.0, 0.0, 0.0])
    P = np.zeros((5, 3))  # follower sits near the leader
    np.testing.assert_array_equal(sim.ifs_speed(quiet("f6"), P, V, anchor),
                                  sim.ifs_speed(quiet("f1"), P, V, anchor))


def test_f6_out_of_range_pulls_toward_leader():
    V = lead((0.0, 0.0, 1.0))
    anchor = np.array([100.0, 0.0, 0.0])  # leader at t is anchor + first three speeds = (100,0,0)
    out = sim.ifs_speed(quiet("f6"), np.zeros((5, 3)), V, anchor)
    np.testing.assert_allclose(out, np.array([1.0, 0.0, 1.0]) / np.sqrt(2), atol=1e-15)


def test_f6_reconstructs_leader_position_from_speeds():
    # leader starts 70 m away but the first three speeds bring it within range
    V = lead((0.0, 0.0, 1.0), (-10.0, 0.0, 0.0), (-10.0, 0.0, 0.0), (-10.0, 0.0, 0.0))
    anchor = np.array([70.0, 0.0, 0.0])
    out = sim.ifs_speed(quiet("f6"), np.zeros((5, 3)), V, anchor)
    np.testing.assert_allclose(out, [0.0, 0.0, 1.0], atol=1e-15)


def test_f7_is_unit_and_seeded():
    a = sim.IfsSpec.table("f7", noise_seed=3)
    b = sim.IfsSpec.table("f7", noise_seed=3)
    rng = np.random.default_rng(0)
    P, V, A = rng.normal(size=(5, 3)), rng.normal(size=(4, 3)), rng.normal(size=3)
    out = sim.ifs_speed(a, P, V, A)
    assert abs(np.linalg.norm(out) - 1) < 1e-12
    np.testing.assert_array_equal(out, sim.ifs_speed(b, P, V, A))


def test_ifs_rejects_mismatched_windows():
    with pytest.raises(ValueError):
        sim.ifs_speed(quiet("f1"), np.zeros((4, 3)), np.zeros((4, 3)), np.zeros(3))


def test_ifs_spec_invariants():
    with pytest.raises(ValueError):
        sim.IfsSpec("f1", kappa_r=0.0)
    with pytest.raises(ValueError):
        sim.IfsSpec("f1", kappa_n=-0.1)
    with pytest.raises(ValueError):
        sim.IfsSpec("f7")
    with pytest.raises(ValueError):
        sim.IfsSpec("f9")


def test_norm_floor_gives_zero_vector():
    out = sim.ifs_speed(quiet("f1"), P_ZERO, np.zeros((4, 3)), np.zeros(3))
    np.testing.assert_array_equal(out, np.zeros(3))


vec3 = st.tuples(*[st.floats(-50, 50, allow_nan=False)] * 3)


@settings(max_examples=200, deadline=None)
@given(kind=st.sampled_from(["f1", "f2", "f3", "f4", "f5", "f6"]),
       rows=st.lists(vec3, min_size=9, max_size=9), noise=vec3)
def test_ifs_output_is_unit_when_above_floor(kind, rows, noise):
    r = np.asarray(rows)
    spec = sim.IfsSpec.table(kind)
    out = sim.ifs_speed(spec, np.vstack([r[:4], r[4:5]]), r[4:8], r[8], np.asarray(noise))
    n = np.linalg.norm(out)
    assert n == 0.0 or abs(n - 1.0) <= 1e-9


@settings(max_examples=100, deadline=None)
@given(rows=st.lists(vec3, min_size=14, max_size=14))
def test_f1_ignores_redundant_inputs(rows):
    r = np.asarray(rows)
    V = r[:4].copy()
    base = sim.ifs_speed(quiet("f1"), r[4:9], V, r[9])
    V2 = V.copy()
    V2[:3] = r[10:13]  # older leader speeds
    moved = sim.ifs_speed(quiet("f1"), r[9:14], V2, r[13])  # other follower positions and anchor
    np.testing.assert_array_equal(base, moved)


# ---------------------------------------------------------------- advance

def test_advance_with_zero_speed_keeps_positions():
    s = sim.init_swarm([3], seed=2, s_h=0.0)
    before = s.positions[-1].copy()
    sim.advance(s, 1)
    np.testing.assert_array_equal(s.positions[-1], before)


def test_advance_extends_histories():
    s = sim.init_swarm([3, 4], seed=2)
    c = s.clock
    sim.advance(s, sim.T_OB)
    assert s.clock == c + sim.T_OB
    assert len(s.speeds) == len(s.positions) - 1
    assert s.uav(0).position_history.shape == (c + sim.T_OB + 1, 3)


def test_advance_rejects_zero_steps():
    with pytest.raises(ValueError):
        sim.advance(sim.init_swarm([2]), 0)


def test_kinematics_are_exact():
    s = sim.init_swarm([4, 3], seed=7, ifs=sim.IfsSpec.table("f3"))
    sim.advance(s, 30)
    P, V = s.position_array(), s.speed_array()
    assert np.array_equal(P[1:], P[:-1] + V)


def test_f1_followers_copy_previous_head_speed():
    s = sim.init_swarm([5], seed=3, ifs=quiet("f1"))
    sim.advance(s, 20)
    h = int(s.live_huavs[0])
    V = s.speed_array()
    for f in s.members(h):
        if f != h:
            np.testing.assert_allclose(V[-1, f], V[-2, h], atol=1e-12)


def test_all_uavs_move_at_s_h():
    s = sim.init_swarm([4, 4], seed=1, ifs=sim.IfsSpec.table("f4"))
    sim.advance(s, 10)
    np.testing.assert_allclose(np.linalg.norm(s.speed_array(), axis=-1), 5.0, atol=1e-9)


def test_same_seed_same_trajectory():
    def run():
        s = sim.init_swarm([3, 5], seed=21, ifs=sim.IfsSpec.table("f7", noise_seed=2))
        sim.advance(s, 15)
        return s
    a, b = run(), run()
    assert np.array_equal(a.position_array(), b.position_array())
    assert sim.trajectory_csv(a) == sim.trajectory_csv(b)


def test_frozen_trajectory_value():
    s = sim.init_swarm([2, 2], seed=3)
    sim.advance(s, 10)
    assert s.positions[-1][0].tolist() == pytest.approx(FROZEN_POS, abs=1e-9)


# ---------------------------------------------------------------- topology window

def test_window_reconstruction_matches_state():
    s = sim.init_swarm([4, 2], seed=4, ifs=sim.IfsSpec.table("f2"))
    sim.advance(s, 12)
    for t in range(s.t0 - 1, s.clock):
        w = sim.topology_window(s, s.live, t)
        assert w.speeds.shape == (s.n, 4, 3)
        rec = w.reconstruct_positions()
        truth = s.position_array(t - s.t0 + 2, t + 2)[:, s.live].transpose(1, 0, 2)
        np.testing.assert_array_equal(rec, truth)


def test_window_rejects_short_history():
    s = sim.init_swarm([2], seed=0)
    with pytest.raises(ValueError):
        sim.topology_window(s, s.live, 1)
    with pytest.raises(ValueError):
        sim.topology_window(s, s.live, s.clock)


def test_window_rejects_destroyed_member():
    s = sim.init_swarm([3], seed=0)
    sim.advance(s, 5)
    f = int(np.flatnonzero(s.roles == Role.FUAV)[0])
    sim.destroy_and_merge(s, [f])
    sim.advance(s, 2)
    with pytest.raises(ValueError):
        sim.topology_window(s, [f], s.clock - 1)


def test_observation_windows_line_up():
    s = sim.init_swarm([3], seed=8)
    sim.advance(s, sim.T_OB)
    obs = sim.observe(s)
    anchors, speeds, own, targets = obs.batch_arrays()
    assert obs.n_windows == sim.T_OB - sim.T0
    w = obs.window()
    direct = sim.topology_window(s, obs.members, w.t)
    np.testing.assert_array_equal(w.speeds, direct.speeds)
    np.testing.assert_array_equal(w.anchor_positions, direct.anchor_positions)
    # the last supervised window ends one step before the latest window
    np.testing.assert_array_equal(speeds[-1], sim.topology_window(s, obs.members, w.t - 1).speeds)
    np.testing.assert_array_equal(targets[-1], s.speeds[w.t][obs.members])
    np.testing.assert_array_equal(own[-1][:, -1], s.positions[w.t - 1][obs.members])


# ---------------------------------------------------------------- destroy and merge

def test_destroying_a_head_merges_followers_to_nearest():
    s = sim.init_swarm([3, 3, 3], seed=12)
    sim.advance(s, 5)
    heads = s.live_huavs.copy()
    victim = int(heads[0])
    lost = [int(i) for i in s.members(victim) if i != victim]
    sim.destroy_and_merge(s, [victim])
    p = s.positions[-1]
    for f in lost:
        rest = [h for h in heads if h != victim]
        nearest = rest[int(np.argmin([np.linalg.norm(p[f] - p[h]) for h in rest]))]
        assert s.cluster_id[f] == nearest
    assert s.roles[victim] == Role.DESTROYED
    s.check()


def test_destroying_a_follower_only_shrinks_its_cluster():
    s = sim.init_swarm([3, 3], seed=1)
    before = s.cluster_id.copy()
    f = int(np.flatnonzero(s.roles == Role.FUAV)[0])
    sim.destroy_and_merge(s, [f])
    keep = np.arange(s.n) != f
    np.testing.assert_array_equal(s.cluster_id[keep], before[keep])
    assert len(s.members(before[f])) == 3


def test_destroying_all_heads_terminates():
    s = sim.init_swarm([2, 2], seed=1)
    sim.destroy_and_merge(s, s.live_huavs)
    assert len(s.live_huavs) == 0
    assert s.terminated
    sim.advance(s, 3)  # orphans keep drifting
    assert np.isfinite(s.positions[-1][s.live]).all()


def test_destroyed_uav_stops_extending_history():
    s = sim.init_swarm([3], seed=2)
    f = int(np.flatnonzero(s.roles == Role.FUAV)[0])
    sim.destroy_and_merge(s, [f])
    t = s.clock
    sim.advance(s, 4)
    rec = s.uav(f)
    assert rec.position_history.shape[0] == t + 1
    assert rec.role == Role.DESTROYED


def test_destroy_rejects_dead_candidates():
    s = sim.init_swarm([3], seed=2)
    f = int(np.flatnonzero(s.roles == Role.FUAV)[0])
    sim.destroy_and_merge(s, [f])
    with pytest.raises(ValueError):
        sim.destroy_and_merge(s, [f])


# ---------------------------------------------------------------- objectives

def test_objective_single():
    assert sim.objective_single({7}, 7) == 0
    assert sim.objective_single({7, 3}, 7) == -1
    assert sim.objective_single(set(), 7) == 0
    assert sim.objective_single({3}, 7) == -1


def test_objective_multi_single_perfect_round():
    L = sim.DetectionLedger(heads=[1, 2, 3], n_total=20)
    L.record([1, 2, 3], 100)
    assert sim.objective_multi(L, 20) == (1.0, 0.0)


def test_objective_multi_two_rounds_with_redundancy():
    heads = [0, 1, 2, 3, 4]
    L = sim.DetectionLedger(heads=heads, n_total=82)
    L.record([0, 1, 2, 10, 11, 12], 100)
    L.record([3, 4, 13, 14], 200)
    jm, red = sim.objective_multi(L, 82)
    assert jm == pytest.approx(2 + 5 / 82, abs=1e-15)
    assert red == pytest.approx(0.0609756, abs=1e-6)
    L.verify()


def test_redundancy_with_eight_heads():
    L = sim.DetectionLedger(heads=list(range(8)), n_total=185)
    L.record(list(range(8)) + [100, 101], 100)
    assert sim.objective_multi(L, 185)[1] == pytest.approx(2 / 185)
    assert round(100 * sim.objective_multi(L, 185)[1], 2) == 1.08


def test_objective_multi_rejects_incomplete():
    L = sim.DetectionLedger(heads=[1, 2], n_total=10)
    L.record([1], 5)
    with pytest.raises(ValueError):
        sim.objective_multi(L, 10)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sets(st.integers(0, 30), max_size=8), min_size=1, max_size=6))
def test_ledger_algebra(rounds):
    heads = {0, 1, 2, 3, 4}
    L = sim.DetectionLedger(heads=sorted(heads), n_total=31)
    for k, cand in enumerate(rounds):
        if L.complete:
            break
        L.record(cand, 100 * (k + 1))
    L.verify()
    sets = L.survivor_sets()
    for k, r in enumerate(L.rounds):
        assert sets[k + 1] == sets[k] - set(r.candidates)
    if L.complete:
        removed = sum(len(sets[k] - sets[k + 1]) for k in range(L.R))
        assert removed == len(heads)
        jm, red = sim.objective_multi(L, 31)
        assert jm == L.R + red


# ---------------------------------------------------------------- purity

def test_purity_examples():
    assert sim.clustering_purity([0, 0, 1, 1], [5, 5, 9, 9]) == 1.0
    assert sim.clustering_purity([0] * 10, [0] * 5 + [1] * 5) == 0.5
    assert sim.clustering_purity(list(range(6)), [0, 0, 0, 1, 1, 1]) == 1.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=40))
def test_purity_in_unit_interval(pairs):
    a, b = zip(*pairs)
    assert 0.0 < sim.clustering_purity(a, b) <= 1.0


# ---------------------------------------------------------------- serialization

def test_snapshot_and_csv():
    s = sim.init_swarm([2, 3], seed=5)
    sim.advance(s, 3)
    snap = json.loads(s.to_json())
    assert snap["clock"] == s.clock
    assert snap["roles"].count("HUAV") == 2
    text = sim.trajectory_csv(s)
    lines = text.split("\r\n")
    assert lines[0] == "t,uav_index,role,cluster_id,x,y,z,vx,vy,vz"
    assert len(lines) == 1 + s.n * len(s.speeds) + 1


def test_ledger_json():
    L = sim.DetectionLedger(heads=[3, 1], n_total=10)
    L.record([1, 3, 5], 50)
    out = json.loads(json.dumps(L.to_json()))
    assert out["complete"] and out["redundancy"] == 0.1 and out["J_m"] == 1.1


