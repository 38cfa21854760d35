"""Two-level swarm ground truth: cluster heads (HUAVs) steering by a smoothed
random walk, followers (FUAVs) obeying one of seven follow strategies, the
destroy-and-merge dynamics and the evaluation metrics.

Indices are 0-based everywhere in the library.  Time series are stored
oldest-first: a speed window for time ``t`` holds ``v[t-T0+1], ..., v[t]``.
The kinematics are ``p[t+1] = p[t] + v[t]`` exactly.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .nn import DenseNet

T0 = 4
T_OB = 100
ARENA = (1000.0, 1000.0, 100.0)
NORM_EPS = 1e-12
IFS_KINDS = ("f1", "f2", "f3", "f4", "f5", "f6", "f7")

# constants shared by every row of the follow-strategy table
TABLE_KAPPA = dict(kappa0=1.0, kappa1=1.0, kappa2=1.0, kappa3=1.0, kappa_p=1.0, kappa_n=0.05, kappa_r=60.0)

F7_HIDDEN = (32, 32)
F7_POS_SCALE = 60.0


class Role(IntEnum):
    HUAV = 0
    FUAV = 1
    DESTROYED = 2


def unit(v, eps=NORM_EPS):
    """Row-wise ``v / |v|``; rows shorter than ``eps`` map to zero."""
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.where(n < eps, 0.0, v / np.where(n < eps, 1.0, n))


@dataclass
class IfsSpec:
    kind: str
    kappa0: float = 1.0
    kappa1: float = 1.0
    kappa2: float = 1.0
    kappa3: float = 1.0
    kappa_p: float = 1.0
    kappa_n: float = 0.05
    kappa_r: float = 60.0
    noise_seed: int = 0
    mlp7: DenseNet | None = None

    def __post_init__(self):
        if self.kind not in IFS_KINDS:
            raise ValueError(f"unknown follow strategy {self.kind!r}")
        if self.kappa_r <= 0:
            raise ValueError("kappa_r must be positive")
        if self.kappa_n < 0:
            raise ValueError("kappa_n must be non-negative")
        if (self.mlp7 is not None) != (self.kind == "f7"):
            raise ValueError("mlp7 is required for f7 and forbidden otherwise")

    @classmethod
    def table(cls, kind, noise_seed=0, t0=T0, **overrides):
        """Strategy ``kind`` with the default constants, optionally overridden."""
        kw = dict(TABLE_KAPPA)
        kw.update(overrides)
        mlp7 = None
        if kind == "f7" and kw.get("mlp7") is None:
            rng = np.random.default_rng([noise_seed, 7])
            in_dim = 3 * (t0 + 1) + 3 * t0 + 3
            mlp7 = DenseNet.mlp(in_dim, F7_HIDDEN, 3, rng)
        kw.setdefault("mlp7", mlp7)
        return cls(kind=kind, noise_seed=noise_seed, **kw)

    def to_json(self):
        out = {k: getattr(self, k) for k in
               ("kind", "kappa0", "kappa1", "kappa2", "kappa3", "kappa_p", "kappa_n", "kappa_r", "noise_seed")}
        out["mlp7"] = None if self.mlp7 is None else self.mlp7.to_json()
        return out


def f7_inputs(follower_positions, leader_speeds, leader_anchor):
    """Flattened f7 input; positions are taken relative to the follower's
    latest position and divided by ``F7_POS_SCALE`` so the frozen net does
    not saturate on arena-scale coordinates."""
    ref = follower_positions[..., -1:, :]
    rel_p = (follower_positions - ref) / F7_POS_SCALE
    rel_a = (leader_anchor - ref[..., 0, :]) / F7_POS_SCALE
    batch = follower_positions.shape[:-2]
    return np.concatenate(
        [rel_p.reshape(*batch, -1), leader_speeds.reshape(*batch, -1), rel_a], axis=-1)


def ifs_speed_batch(spec: IfsSpec, follower_positions, leader_speeds, leader_anchor, noise=None):
    """Unit follow direction for a batch of followers.

    follower_positions: (..., T0+1, 3), oldest first, last row is p[t+1].
    leader_speeds:      (..., T0, 3), oldest first, last row is v_L[t].
    leader_anchor:      (..., 3), p_L[t-T0+1].
    noise:              (..., 3) standard-normal draws, or None for none.
    """
    P = np.asarray(follower_positions, dtype=np.float64)
    V = np.asarray(leader_speeds, dtype=np.float64)
    A = np.asarray(leader_anchor, dtype=np.float64)
    t0 = V.shape[-2]
    if P.shape[-2] != t0 + 1:
        raise ValueError(f"positions window has {P.shape[-2]} rows, expected {t0 + 1}")
    n = np.zeros(V.shape[:-2] + (3,)) if noise is None else np.asarray(noise, dtype=np.float64)
    k = spec.kind
    gains = (spec.kappa0, spec.kappa1, spec.kappa2, spec.kappa3)
    if k in ("f1", "f2", "f3", "f4", "f5"):
        lags = {"f1": 1, "f2": 2, "f3": 3, "f4": 2, "f5": 3}[k]
        if lags > t0:
            raise ValueError(f"{k} needs {lags} leader speeds, window has {t0}")
        acc = spec.kappa_n * n
        for tau in range(lags):
            v = V[..., t0 - 1 - tau, :]
            acc = acc + gains[tau] * (v * v if k in ("f4", "f5") else v)
        return unit(acc)
    if k == "f6":
        leader_now = A + V[..., : t0 - 1, :].sum(axis=-2)
        offset = leader_now - P[..., t0 - 1, :]
        dist = np.linalg.norm(offset, axis=-1, keepdims=True)
        pull = np.where(dist > spec.kappa_r, spec.kappa_p * offset / np.where(dist > 0, dist, 1.0), 0.0)
        return unit(spec.kappa0 * V[..., t0 - 1, :] + spec.kappa_n * n + pull)
    x = f7_inputs(P, V, A)
    return unit(spec.mlp7.eval(x) + spec.kappa_n * n)


def ifs_speed(spec: IfsSpec, follower_positions, leader_speeds, leader_anchor, noise=None):
    """Unit follow direction for one follower (see :func:`ifs_speed_batch`)."""
    P = np.asarray(follower_positions, dtype=np.float64)
    V = np.asarray(leader_speeds, dtype=np.float64)
    if P.ndim != 2 or V.ndim != 2 or P.shape[0] != V.shape[0] + 1:
        raise ValueError(f"window lengths do not match: positions {P.shape}, speeds {V.shape}")
    return ifs_speed_batch(spec, P, V, leader_anchor, noise)


@dataclass
class UavRecord:
    index: int
    role: Role
    cluster_id: int
    position_history: np.ndarray
    speed_history: np.ndarray


@dataclass
class TopologyWindow:
    """Anchor positions p[t-T0+1] and speeds v[t-T0+1..t] of a member set."""

    cluster_members: np.ndarray
    anchor_positions: np.ndarray  # (n, 3)
    speeds: np.ndarray  # (n, T0, 3), oldest first
    t: int

    def reconstruct_positions(self):
        """Positions at t-T0+2 .. t+1, shape (n, T0, 3), by sequential summation."""
        out = np.empty_like(self.speeds)
        p = self.anchor_positions
        for k in range(self.speeds.shape[1]):
            p = p + self.speeds[:, k]
            out[:, k] = p
        return out

    def flat(self):
        """Raw per-member input (p ; v[t-T0+1] ; ... ; v[t]), shape (n, 3+3*T0)."""
        n = len(self.cluster_members)
        return np.concatenate([self.anchor_positions, self.speeds.reshape(n, -1)], axis=1)


@dataclass
class SwarmState:
    """Ground-truth swarm, stepped in place by :func:`advance`."""

    ifs: IfsSpec
    roles: np.ndarray
    cluster_id: np.ndarray  # index of the member's HUAV; -1 once orphaned or destroyed
    initial_cluster: np.ndarray
    positions: list  # positions[t] is (N, 3)
    speeds: list  # speeds[t] is (N, 3)
    death_time: np.ndarray
    rngs: list
    s_h: float = 5.0
    sigma_h: float = 0.3
    t0: int = T0
    terminated: bool = False
    seed: int = 0
    arena: tuple = ARENA

    @property
    def n(self):
        return len(self.roles)

    @property
    def clock(self):
        return len(self.positions) - 1

    @property
    def live(self):
        return np.flatnonzero(self.roles != Role.DESTROYED)

    @property
    def live_huavs(self):
        return np.flatnonzero(self.roles == Role.HUAV)

    @property
    def huavs_initial(self):
        return np.unique(self.initial_cluster)

    def position_array(self, start=0, stop=None):
        return np.asarray(self.positions[start:stop])

    def speed_array(self, start=0, stop=None):
        return np.asarray(self.speeds[start:stop])

    def uav(self, i) -> UavRecord:
        end = self.clock + 1 if self.death_time[i] < 0 else self.death_time[i] + 1
        return UavRecord(
            index=int(i),
            role=Role(int(self.roles[i])),
            cluster_id=int(self.cluster_id[i]),
            position_history=self.position_array(0, end)[:, i].copy(),
            speed_history=self.speed_array(0, end - 1)[:, i].copy(),
        )

    @property
    def uavs(self):
        return [self.uav(i) for i in range(self.n)]

    def members(self, head):
        """Live UAVs whose cluster is led by ``head`` (the head included)."""
        return np.flatnonzero((self.cluster_id == head) & (self.roles != Role.DESTROYED))

    def clusters(self):
        return {int(h): self.members(h) for h in self.live_huavs}

    def check(self):
        """Assert the membership invariants; returns self for chaining."""
        heads = set(self.live_huavs.tolist())
        for i in np.flatnonzero(self.roles == Role.FUAV):
            if not self.terminated:
                assert self.cluster_id[i] in heads, f"FUAV {i} follows dead head {self.cluster_id[i]}"
        for h in heads:
            assert self.cluster_id[h] == h
        return self

    def snapshot(self) -> dict:
        return {
            "clock": self.clock,
            "seed": self.seed,
            "terminated": self.terminated,
            "s_h": self.s_h,
            "sigma_h": self.sigma_h,
            "t0": self.t0,
            "ifs": self.ifs.to_json(),
            "roles": [Role(int(r)).name for r in self.roles],
            "cluster_id": self.cluster_id.tolist(),
            "initial_cluster": self.initial_cluster.tolist(),
            "positions": self.position_array()[-1].tolist(),
            "speeds": self.speed_array()[-1].tolist() if self.speeds else [],
        }

    def to_json(self) -> str:
        return json.dumps(self.snapshot(), allow_nan=True)


def init_swarm(cluster_sizes, arena=ARENA, ifs: IfsSpec | None = None, seed=0,
               s_h=5.0, sigma_h=0.3, ball_radius=50.0, center_box=None, t0=T0) -> SwarmState:
    """Place M clusters (one HUAV + m_j FUAVs each) and run ``t0`` warm-up steps.

    Cluster centres are uniform in ``center_box`` (default: the arena shrunk
    by ``ball_radius``); members are uniform in a ball around their centre.
    UAV indices are a random permutation so a head's index carries no signal.
    """
    sizes = [int(m) for m in cluster_sizes]
    if not sizes:
        raise ValueError("need at least one cluster")
    if min(sizes) < 2:
        raise ValueError("every cluster needs at least 2 followers")
    arena = np.asarray(arena, dtype=np.float64)
    if arena.shape != (3,) or np.any(arena <= 0):
        raise ValueError("arena extents must be three positive numbers")
    ifs = ifs if ifs is not None else IfsSpec.table("f1")
    ss = np.random.SeedSequence(seed)
    master_ss, *uav_ss = ss.spawn(1 + sum(1 + m for m in sizes))
    rng = np.random.default_rng(master_ss)
    n = sum(1 + m for m in sizes)
    perm = rng.permutation(n)

    if center_box is None:
        lo = np.minimum(ball_radius, arena / 2)
        hi = arena - lo
    else:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in center_box)
    roles = np.full(n, Role.FUAV, dtype=np.int64)
    cluster = np.empty(n, dtype=np.int64)
    pos0 = np.empty((n, 3))
    cursor = 0
    for m in sizes:
        idx = perm[cursor: cursor + 1 + m]
        cursor += 1 + m
        head = idx[0]
        roles[head] = Role.HUAV
        cluster[idx] = head
        centre = rng.uniform(lo, hi)
        d = rng.standard_normal((1 + m, 3))
        r = ball_radius * rng.uniform(size=(1 + m, 1)) ** (1 / 3)
        pos0[idx] = centre + r * unit(d)
    rngs = [np.random.default_rng(s) for s in uav_ss]
    v0 = np.stack([s_h * unit(g.standard_normal(3)) for g in rngs])
    state = SwarmState(
        ifs=ifs, roles=roles, cluster_id=cluster.copy(), initial_cluster=cluster.copy(),
        positions=[pos0], speeds=[], death_time=np.full(n, -1, dtype=np.int64), rngs=rngs,
        s_h=s_h, sigma_h=sigma_h, t0=t0, seed=seed, arena=tuple(arena.tolist()),
    )
    # warm-up: every UAV random-walks so the first window is fully populated
    state.speeds.append(v0)
    state.positions.append(pos0 + v0)
    for _ in range(t0):
        v = np.stack([_walk(state, i, state.speeds[-1][i]) for i in range(n)])
        state.speeds.append(v)
        state.positions.append(state.positions[-1] + v)
    return state


def _walk(state, i, v):
    g = state.rngs[i].standard_normal(3)
    return state.s_h * unit(v + state.sigma_h * g)


def huav_speed_step(state: SwarmState, huav: int):
    """Next HUAV speed ``s_h * norm(v + sigma_h * g)`` from the head's own stream."""
    if state.roles[huav] != Role.HUAV:
        raise ValueError(f"UAV {huav} is not a live HUAV")
    return _walk(state, huav, state.speeds[-1][huav])


def advance(state: SwarmState, steps: int = 1) -> SwarmState:
    """Step the swarm ``steps`` times in place and return it."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    t0 = state.t0
    for _ in range(steps):
        t = state.clock
        p_now = state.positions[-1]
        v_prev = state.speeds[-1]
        v_new = np.full((state.n, 3), np.nan)
        heads = state.live_huavs
        for h in heads:
            v_new[h] = _walk(state, h, v_prev[h])
        fol = np.flatnonzero(state.roles == Role.FUAV)
        if len(fol):
            noise = np.stack([state.rngs[i].standard_normal(3) for i in fol])
            if state.terminated:
                v_new[fol] = v_prev[fol]
            else:
                leaders = state.cluster_id[fol]
                P = np.asarray(state.positions[t - t0: t + 1])[:, fol].transpose(1, 0, 2)
                V = np.asarray(state.speeds[t - t0: t])[:, leaders].transpose(1, 0, 2)
                A = state.positions[t - t0][leaders]
                v_new[fol] = state.s_h * ifs_speed_batch(state.ifs, P, V, A, noise)
        state.speeds.append(v_new)
        state.positions.append(p_now + v_new)
    return state


def topology_window(state: SwarmState, member_set, t: int) -> TopologyWindow:
    """Window ending at time ``t``: anchor p[t-T0+1] and speeds v[t-T0+1..t]."""
    members = np.asarray(member_set, dtype=np.int64)
    t0 = state.t0
    if t - t0 + 1 < 0 or t > state.clock - 1:
        raise ValueError(f"time {t} lacks a full window (clock {state.clock}, T0 {t0})")
    dead = [i for i in members if 0 <= state.death_time[i] <= t]
    if dead:
        raise ValueError(f"members {dead} destroyed before t={t}")
    speeds = np.asarray(state.speeds[t - t0 + 1: t + 1])[:, members].transpose(1, 0, 2)
    return TopologyWindow(members, state.positions[t - t0 + 1][members].copy(), speeds.copy(), t)


@dataclass
class Observation:
    """Recent history of a member set for batch training.

    ``positions`` covers times c-T_ob-1 .. c and ``speeds`` c-T_ob .. c-1 for
    clock c, so every one of the T_ob - T0 supervised windows has a full
    follower position window P[w-T0..w].
    """

    members: np.ndarray
    positions: np.ndarray  # (T_ob + 2, n, 3)
    speeds: np.ndarray  # (T_ob, n, 3)
    t_end: int
    t0: int = T0

    @property
    def n_windows(self):
        return self.speeds.shape[0] - self.t0

    def batch_arrays(self):
        """Stacked supervised windows.

        Returns (anchors (B,n,3), speeds (B,n,T0,3), own positions (B,n,T0+1,3),
        targets (B,n,3)) for B = T_ob - T0.
        """
        t0, B = self.t0, self.n_windows
        k = np.arange(B)
        speeds = self.speeds[k[:, None] + np.arange(t0)[None, :]].transpose(0, 2, 1, 3)
        anchors = self.positions[k + 1]
        own = self.positions[k[:, None] + np.arange(t0 + 1)[None, :]].transpose(0, 2, 1, 3)
        targets = self.speeds[k + t0]
        return anchors, speeds, own, targets

    def window(self, b=None) -> TopologyWindow:
        """TopologyWindow ``b`` (0-based); default is the most recent one."""
        t0 = self.t0
        b = self.speeds.shape[0] - t0 if b is None else b
        sp = self.speeds[b: b + t0].transpose(1, 0, 2)
        t = self.t_end - 1 - (self.speeds.shape[0] - t0 - b)
        return TopologyWindow(self.members, self.positions[b + 1].copy(), sp.copy(), t)

    def subset(self, idx):
        idx = np.asarray(idx)
        return Observation(self.members[idx], self.positions[:, idx], self.speeds[:, idx], self.t_end, self.t0)


def observe(state: SwarmState, member_set=None, t_ob=T_OB) -> Observation:
    """The last ``t_ob`` steps of ``member_set`` (default: all live UAVs)."""
    members = state.live if member_set is None else np.asarray(member_set, dtype=np.int64)
    c = state.clock
    if c - t_ob - 1 < 0:
        raise ValueError(f"clock {c} too early for a {t_ob}-step observation")
    if t_ob <= state.t0:
        raise ValueError("observation must be longer than T0")
    pos = np.asarray(state.positions[c - t_ob - 1: c + 1])[:, members]
    spd = np.asarray(state.speeds[c - t_ob: c])[:, members]
    if np.isnan(pos).any():
        raise ValueError("observation includes destroyed UAVs")
    return Observation(members, pos, spd, c, state.t0)


def destroy_and_merge(state: SwarmState, candidates) -> SwarmState:
    """Destroy ``candidates``; orphaned followers join the nearest live head."""
    cand = np.unique(np.asarray(list(candidates), dtype=np.int64))
    if len(cand) and (cand.min() < 0 or cand.max() >= state.n):
        raise ValueError("candidate index out of range")
    bad = [int(i) for i in cand if state.roles[i] == Role.DESTROYED]
    if bad:
        raise ValueError(f"UAVs {bad} are already destroyed")
    t = state.clock
    state.roles[cand] = Role.DESTROYED
    state.death_time[cand] = t
    state.cluster_id[cand] = -1
    heads = state.live_huavs
    fol = np.flatnonzero(state.roles == Role.FUAV)
    lost = fol[~np.isin(state.cluster_id[fol], heads)]
    if len(heads) == 0:
        state.cluster_id[fol] = -1
        state.terminated = True
        return state
    if len(lost):
        p = state.positions[-1]
        d = np.linalg.norm(p[lost][:, None, :] - p[heads][None, :, :], axis=-1)
        state.cluster_id[lost] = heads[np.argmin(d, axis=1)]
    return state


def trajectory_csv(state: SwarmState, path=None):
    """Dump (t, uav_index, role, cluster_id, x, y, z, vx, vy, vz) rows.

    Role and cluster columns carry the final state; destroyed UAVs stop at
    their death time.  Returns the CSV text when ``path`` is None.
    """
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["t", "uav_index", "role", "cluster_id", "x", "y", "z", "vx", "vy", "vz"])
    P = state.position_array()
    V = state.speed_array()
    for t in range(len(V)):
        for i in range(state.n):
            if 0 <= state.death_time[i] <= t:
                continue
            w.writerow([t, i, Role(int(state.roles[i])).name, int(state.cluster_id[i]),
                        *(repr(float(x)) for x in P[t, i]), *(repr(float(x)) for x in V[t, i])])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


# ---------------------------------------------------------------- ledger

@dataclass
class RoundRecord:
    round: int
    candidates: list
    survivors: list
    finish_time: int
    destroyed_fuavs: int

    def to_json(self):
        return {"round": self.round, "candidates": list(self.candidates), "survivors": list(self.survivors),
                "finish_time": self.finish_time, "destroyed_fuavs": self.destroyed_fuavs}


@dataclass
class DetectionLedger:
    heads: list  # H_0
    n_total: int
    rounds: list = field(default_factory=list)
    complete: bool = False
    extras: dict = field(default_factory=dict)

    def record(self, candidates, finish_time, state: SwarmState | None = None):
        """Append round r with candidates Ĥ_r; survivors follow H_r = H_{r-1} \\ Ĥ_r."""
        prev = set(self.heads) if not self.rounds else set(self.rounds[-1].survivors)
        cand = sorted(int(i) for i in candidates)
        survivors = sorted(prev - set(cand))
        rec = RoundRecord(len(self.rounds) + 1, cand, survivors, int(finish_time),
                          len(set(cand) - prev))
        self.rounds.append(rec)
        self.complete = not survivors
        return rec

    @property
    def R(self):
        return len(self.rounds)

    def survivor_sets(self):
        return [set(self.heads)] + [set(r.survivors) for r in self.rounds]

    def redundant_total(self):
        sets = self.survivor_sets()
        return sum(len(set(r.candidates) - sets[k]) for k, r in enumerate(self.rounds))

    def verify(self):
        """Check the round algebra; raises AssertionError on any violation."""
        sets = self.survivor_sets()
        for k, r in enumerate(self.rounds):
            assert sets[k + 1] == sets[k] - set(r.candidates), f"round {r.round}: H_r != H_(r-1) minus candidates"
            assert sets[k + 1] <= sets[k]
            assert r.destroyed_fuavs == len(set(r.candidates) - sets[k])
        if self.complete:
            assert not sets[-1]
            assert sum(len(sets[k] - sets[k + 1]) for k in range(self.R)) == len(self.heads)
        return True

    def to_json(self):
        out = {"heads": sorted(int(h) for h in self.heads), "n_total": self.n_total,
               "complete": self.complete, "rounds": [r.to_json() for r in self.rounds]}
        if self.complete:
            jm, red = objective_multi(self, self.n_total)
            out["J_m"] = jm
            out["redundancy"] = red
        out.update(self.extras)
        return out


def objective_single(candidates, true_leader) -> float:
    """J_s = 1{i_L in Ĥ_1} - |Ĥ_1|."""
    cand = set(int(i) for i in candidates)
    return float(int(true_leader) in cand) - len(cand)


def objective_multi(ledger: DetectionLedger, n: int):
    """(J_m, redundancy) for a complete ledger."""
    if not ledger.complete:
        raise ValueError("ledger is incomplete: heads survive")
    red = ledger.redundant_total()
    return ledger.R + red / n, red / n


def clustering_purity(assignments, truth) -> float:
    """Fraction of points in the majority true class of their predicted cluster."""
    a = np.asarray(assignments)
    b = np.asarray(truth)
    if a.shape != b.shape:
        raise ValueError("assignments and truth cover different index sets")
    if a.size == 0:
        return 1.0
    total = 0
    for c in np.unique(a):
        _, counts = np.unique(b[a == c], return_counts=True)
        total += counts.max()
    return total / a.size
