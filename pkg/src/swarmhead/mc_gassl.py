"""Multi-cluster head detection.

Every live UAV's latest topology window is encoded by a shared GRU into a
3-vector feature.  The encoder is trained with a hard-sampled triplet loss,
first meta-initialized over a family of synthetic follow strategies and then
refined online from the labels each detection round produces.  Features are
clustered (gap statistic for the count, K-Means for the assignment), one
head is elected per predicted cluster by single-cluster GASSL, and the swarm
is hit, merged and re-observed until no head survives.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.cluster import KMeans

from . import autodiff as ad
from . import gassl as gs
from . import sim
from .nn import GruParams, ParamSet, _raw, backprop, gru_cell, gru_cell_eval, register, sgd_apply

log = logging.getLogger(__name__)

# voters per predicted cluster inside the round loop; merged clusters grow
# large and every voter trains its own attention network
ROUND_MAX_OBSERVERS = 12


@dataclass
class McHyper:
    gamma: float = 1.0  # triplet margin
    beta_prime: float = 1e-2  # online metric rate
    alpha_meta: float = 1e-2  # meta rate (inner and outer)
    B: int = 16  # triplets per batch
    M0: int = 30  # meta episodes
    dataset_clusters: int = 30  # clusters per meta support/query swarm
    R_m: int = 20  # max detection rounds
    kmax: int = 15
    refs: int = 10
    online_steps: int = 50
    hidden: int = 3
    kmeans_restarts: int = 10
    pos_scale: float = 1000.0
    speed_scale: float = 5.0
    seed: int = 0

    def __post_init__(self):
        for name in ("gamma", "beta_prime", "alpha_meta", "B", "M0", "dataset_clusters", "R_m", "refs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.kmax < 2:
            raise ValueError("kmax must be at least 2")


@register
@dataclass
class GruEncoderParams(ParamSet):
    """One GRU weight set shared by all T0 chained units and all Siamese branches."""

    params: GruParams

    @classmethod
    def init(cls, rng, hidden=3):
        return cls(GruParams.init(rng, hidden))

    def named_arrays(self):
        return self.params.named_arrays()

    def with_arrays(self, arrays):
        return GruEncoderParams(self.params.with_arrays(arrays))

    @classmethod
    def from_json_parts(cls, meta, arrays):
        return cls(GruParams(arrays["W_r"], arrays["W_u"], arrays["W_h"]))


# ------------------------------------------------------------------ encoding

def encode_feature(enc: GruEncoderParams, anchor_pos, speeds) -> np.ndarray:
    """h0 = anchor, h_tau = GRU(h_{tau-1}, v_tau) for tau = 1..T0; returns h_T0."""
    speeds = np.asarray(speeds, dtype=np.float64)
    h = np.asarray(anchor_pos, dtype=np.float64)
    if speeds.ndim != 2 or speeds.shape[1] != 3:
        raise ValueError(f"speeds must be (T0, 3), got {speeds.shape}")
    if h.shape != (enc.params.hidden,):
        raise ValueError(f"anchor must have {enc.params.hidden} components")
    for v in speeds:
        h = gru_cell_eval(enc.params, h, v)
    return h


def encode_batch(enc: GruEncoderParams, anchors, speeds) -> np.ndarray:
    """:func:`encode_feature` over leading batch axes: anchors (..., 3), speeds (..., T0, 3)."""
    h = np.asarray(anchors, dtype=np.float64)
    speeds = np.asarray(speeds, dtype=np.float64)
    for k in range(speeds.shape[-2]):
        h = gru_cell_eval(enc.params, h, speeds[..., k, :])
    return h


def encode_graph(enc: GruEncoderParams, anchors, speeds):
    h = ad.as_tensor(anchors)
    for k in range(speeds.shape[-2]):
        h = gru_cell(enc.params, h, speeds[..., k, :])
    return h


@dataclass
class LabeledWindows:
    """One topology window per UAV with a cluster label (-1 = unlabeled)."""

    members: np.ndarray
    anchors: np.ndarray  # (N, 3) raw positions
    speeds: np.ndarray  # (N, T0, 3) raw speeds
    labels: np.ndarray

    @classmethod
    def from_window(cls, window: sim.TopologyWindow, labels):
        return cls(np.asarray(window.cluster_members), window.anchor_positions, window.speeds,
                   np.asarray(labels, dtype=np.int64))

    @property
    def raw(self):
        """Flattened raw inputs (p ; V), shape (N, 3 + 3*T0)."""
        return np.concatenate([self.anchors, self.speeds.reshape(len(self.anchors), -1)], axis=1)

    def scaled(self, hyper: McHyper):
        """Encoder inputs: anchors centred on the set's centroid, both rescaled."""
        a = (self.anchors - self.anchors.mean(axis=0)) / hyper.pos_scale
        return a, self.speeds / hyper.speed_scale

    def features(self, enc: GruEncoderParams, hyper: McHyper):
        a, v = self.scaled(hyper)
        return encode_batch(enc, a, v)

    def eligible_anchors(self):
        """Members usable as triplet anchors (labeled, cluster size >= 2, >= 2 clusters)."""
        lab = self.labels
        known = lab[lab >= 0]
        if len(np.unique(known)) < 2:
            return np.array([], dtype=np.int64)
        _, inv, counts = np.unique(known, return_inverse=True, return_counts=True)
        sizes = np.zeros(len(lab), dtype=np.int64)
        sizes[lab >= 0] = counts[inv]
        return np.flatnonzero(sizes >= 2)


def observation_windows(obs: sim.Observation, labels=None) -> LabeledWindows:
    """Latest window of an observation, optionally labeled."""
    labels = np.full(len(obs.members), -1) if labels is None else labels
    return LabeledWindows.from_window(obs.window(), labels)


# ------------------------------------------------------------------ triplets

def sample_triplet_hard(data: LabeledWindows, anchor: int):
    """(i_a, i_p, i_n): farthest same-cluster and nearest other-cluster member in raw space.

    Positions index into ``data``; ties go to the lowest position.
    """
    lab = data.labels
    if lab[anchor] < 0:
        raise ValueError("anchor is unlabeled")
    same = np.flatnonzero((lab == lab[anchor]) & (np.arange(len(lab)) != anchor))
    other = np.flatnonzero((lab >= 0) & (lab != lab[anchor]))
    if len(same) == 0:
        raise ValueError("anchor's cluster is a singleton")
    if len(other) == 0:
        raise ValueError("dataset has a single cluster")
    x = data.raw
    d = np.linalg.norm(x - x[anchor], axis=1)
    return int(anchor), int(same[np.argmax(d[same])]), int(other[np.argmin(d[other])])


@dataclass
class TripletBatch:
    """Encoder inputs for B triples; axis 0 is the branch (anchor, positive, negative)."""

    anchors: np.ndarray  # (3, B, 3)
    speeds: np.ndarray  # (3, B, T0, 3)
    triples: np.ndarray  # (B, 3) positions in the source dataset

    def __len__(self):
        return self.triples.shape[0]


def make_triplet_batch(data: LabeledWindows, hyper: McHyper, rng) -> TripletBatch | None:
    """B hard triples with anchors drawn from ``rng``; None when no anchor is eligible."""
    pool = data.eligible_anchors()
    if len(pool) == 0:
        return None
    picks = rng.choice(pool, size=hyper.B, replace=len(pool) < hyper.B)
    triples = np.array([sample_triplet_hard(data, int(a)) for a in picks], dtype=np.int64)
    a, v = data.scaled(hyper)
    return TripletBatch(a[triples.T], v[triples.T], triples)


def triplet_loss(e_a, e_p, e_n, gamma) -> float:
    """[|e_p - e_a| - |e_n - e_a| + gamma]_+."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    e_a, e_p, e_n = (np.asarray(e, dtype=np.float64) for e in (e_a, e_p, e_n))
    return float(max(np.linalg.norm(e_p - e_a) - np.linalg.norm(e_n - e_a) + gamma, 0.0))


def triplet_batch_graph(enc: GruEncoderParams, batch: TripletBatch, gamma):
    """Summed triplet loss; the three branches are one encoder call on stacked inputs."""
    e = encode_graph(enc, batch.anchors, batch.speeds)  # (3, B, H)
    e_a, e_p, e_n = (ad.getitem(e, k) for k in range(3))
    gap = ad.sub(ad.norm(ad.sub(e_p, e_a)), ad.norm(ad.sub(e_n, e_a)))
    return ad.tsum(ad.hinge(ad.add(gap, gamma)))


def triplet_batch_loss(enc: GruEncoderParams, batch: TripletBatch, gamma) -> float:
    e = encode_batch(enc, batch.anchors, batch.speeds)
    d_p = np.linalg.norm(e[1] - e[0], axis=-1)
    d_n = np.linalg.norm(e[2] - e[0], axis=-1)
    return float(np.maximum(d_p - d_n + gamma, 0.0).sum())


def metric_grad(enc: GruEncoderParams, batch: TripletBatch, gamma):
    if batch is None or len(batch) == 0:
        raise ValueError("empty triplet batch")
    return backprop(lambda w: triplet_batch_graph(w, batch, gamma), enc)


def metric_step(enc: GruEncoderParams, batch: TripletBatch, rate, gamma) -> GruEncoderParams:
    """W - rate * grad of the summed triplet loss; inactive triples contribute nothing."""
    _, g = metric_grad(enc, batch, gamma)
    return sgd_apply(enc, g, rate)


# ------------------------------------------------------------------ meta-learning

@dataclass
class MetaEpisode:
    kind: str
    ifs: sim.IfsSpec
    support: LabeledWindows
    query: LabeledWindows


@dataclass
class MetaDataset:
    episodes: list

    @property
    def F(self):
        return len(self.episodes)

    @classmethod
    def generate(cls, hyper: McHyper, seed=0, kinds=("f1", "f2", "f3", "f4", "f5", "f6"),
                 sizes=(2, 6), box=200.0, settle=20, exclude_table=True):
        """F = M0 episodes of labeled swarms under randomized strategies of the built-in family.

        Each episode draws a kind and perturbed gains; support and query are
        two independent swarms of ``dataset_clusters`` clusters whose centres
        share a ``box``-metre cube, so clusters overlap in space.
        """
        rng = np.random.default_rng([seed, 29])
        episodes = []
        for m in range(hyper.M0):
            ifs = random_strategy(rng, kinds, exclude_table)
            pair = []
            for _ in range(2):
                sizes_m = rng.integers(sizes[0], sizes[1] + 1, size=hyper.dataset_clusters)
                pair.append(labeled_swarm(ifs, sizes_m, int(rng.integers(2**31)), box, settle))
            episodes.append(MetaEpisode(ifs.kind, ifs, *pair))
        return cls(episodes)


def random_strategy(rng, kinds, exclude_table=True) -> sim.IfsSpec:
    kind = str(rng.choice(kinds))
    while True:
        gains = {f"kappa{k}": float(rng.uniform(0.5, 1.5)) for k in range(4)}
        gains["kappa_n"] = float(rng.uniform(0.0, 0.1))
        if not exclude_table or any(gains[k] != sim.TABLE_KAPPA[k] for k in gains):
            break
    return sim.IfsSpec.table(kind, noise_seed=int(rng.integers(2**31)), **gains)


def labeled_swarm(ifs, cluster_sizes, seed, box=200.0, settle=20, sigma_h=0.3) -> LabeledWindows:
    """Latest window of a freshly simulated swarm, labeled by true cluster."""
    centre = np.asarray(sim.ARENA) / 2
    half = np.minimum(np.asarray([box, box, box]), np.asarray(sim.ARENA)) / 2
    state = sim.init_swarm(cluster_sizes, ifs=ifs, seed=seed, sigma_h=sigma_h,
                           center_box=(centre - half, centre + half))
    sim.advance(state, settle)
    members = state.live
    window = sim.topology_window(state, members, state.clock - 1)
    return LabeledWindows.from_window(window, state.cluster_id[members])


@dataclass
class MetaTrace:
    support_loss: list = field(default_factory=list)
    query_loss: list = field(default_factory=list)


def meta_train(meta: MetaDataset, hyper: McHyper, seed=0, init: GruEncoderParams | None = None):
    """First-order meta-initialization; returns (W*, trace of per-episode losses)."""
    if meta.F < hyper.M0:
        raise ValueError(f"need {hyper.M0} episodes, dataset has {meta.F}")
    rng = np.random.default_rng([seed, 28])
    W = init if init is not None else GruEncoderParams.init(rng, hyper.hidden)
    trace = MetaTrace()
    for m in range(hyper.M0):
        ep = meta.episodes[m]
        sb = make_triplet_batch(ep.support, hyper, rng)
        qb = make_triplet_batch(ep.query, hyper, rng)
        if sb is None or qb is None:
            continue
        ls, gs_ = metric_grad(W, sb, hyper.gamma)
        inner = sgd_apply(W, gs_, hyper.alpha_meta)
        lq, gq = metric_grad(inner, qb, hyper.gamma)
        W = sgd_apply(W, gq, hyper.alpha_meta)
        trace.support_loss.append(ls)
        trace.query_loss.append(lq)
    return W, trace


# ------------------------------------------------------------------ clustering

def _kmeans(x, k, seed, restarts):
    km = KMeans(n_clusters=k, init="k-means++", n_init=restarts, random_state=seed, algorithm="lloyd")
    km.fit(x)
    return km


def estimate_cluster_count(features, hyper: McHyper, seed=0) -> int:
    """Gap statistic: smallest k with Gap(k) >= Gap(k+1) - s_{k+1}.

    Reference sets are uniform over the bounding box of the features.
    """
    x = np.asarray(features, dtype=np.float64)
    n = len(x)
    if n < 2:
        raise ValueError("need at least two points")
    if np.ptp(x, axis=0).max() <= 1e-12:
        return 1
    kmax = min(hyper.kmax, n - 1)
    rng = np.random.default_rng([seed, 33])
    lo, hi = x.min(axis=0), x.max(axis=0)
    refs = [rng.uniform(lo, hi, size=x.shape) for _ in range(hyper.refs)]
    gap = np.empty(kmax + 1)
    s = np.empty(kmax + 1)
    for k in range(1, kmax + 1):
        wk = _kmeans(x, k, seed, hyper.kmeans_restarts).inertia_
        ref_logs = np.array([np.log(max(_kmeans(r, k, seed, 3).inertia_, 1e-300)) for r in refs])
        gap[k] = ref_logs.mean() - np.log(max(wk, 1e-300))
        s[k] = ref_logs.std() * np.sqrt(1.0 + 1.0 / hyper.refs)
    for k in range(1, kmax):
        if gap[k] >= gap[k + 1] - s[k + 1]:
            return k
    return kmax


def cluster_kmeans(features, k: int, seed=0, restarts=10) -> np.ndarray:
    """Best-of-``restarts`` k-means++ / Lloyd labels, relabeled by first appearance."""
    x = np.asarray(features, dtype=np.float64)
    if not 1 <= k <= len(x):
        raise ValueError(f"k={k} out of range for {len(x)} points")
    if k == len(x):
        return np.arange(len(x))
    labels = _kmeans(x, k, seed, restarts).labels_
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(first)
    remap = np.empty(k, dtype=np.int64)
    remap[labels[first[order]]] = np.arange(k)
    return remap[labels]


def absorb_singletons(features, labels) -> np.ndarray:
    """Fold clusters with one member into the cluster with the nearest centroid.

    A head's window leads its followers' by one step, so K-Means can split a
    head off on its own; returning it to its followers lets GASSL find it.
    Labels are renumbered 0..k-1 by first appearance.
    """
    x = np.asarray(features, dtype=np.float64)
    lab = np.asarray(labels).copy()
    while True:
        ids, counts = np.unique(lab, return_counts=True)
        lone = ids[counts < 2]
        if len(lone) == 0 or len(ids) < 2:
            break
        c = lone[0]
        others = ids[ids != c]
        cents = np.stack([x[lab == o].mean(axis=0) for o in others])
        i = np.flatnonzero(lab == c)[0]
        lab[i] = others[np.argmin(np.linalg.norm(cents - x[i], axis=1))]
    _, first, inv = np.unique(lab, return_index=True, return_inverse=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first)] = np.arange(len(first))
    return rank[inv]


# ------------------------------------------------------------------ online scoring

def residual_matrix(gamma: gs.IfsnParams, obs: sim.Observation) -> np.ndarray:
    """R[i, j] = sum over windows of |f(P_i, V_j, p_j) - v_i|^2 with j as i's hypothetical head."""
    anchors, speeds, own, targets = obs.batch_arrays()
    B, n = anchors.shape[:2]
    R = np.empty((n, n))
    for i in range(n):
        P = np.broadcast_to(own[:, i:i + 1], (B, n) + own.shape[2:]).reshape(B * n, *own.shape[2:])
        x = gs.ifsn_conditioned_graph(gamma, P, ad.as_tensor(speeds.reshape(B * n, *speeds.shape[2:])),
                                      ad.as_tensor(anchors.reshape(B * n, 3))).data
        pred = gamma.body.eval(x).reshape(B, n, 3)
        R[i] = ((pred - targets[:, i:i + 1]) ** 2).sum(axis=(0, 2))
    return R


@dataclass
class OnlineScores:
    members: np.ndarray
    choice: np.ndarray  # i_H per UAV (position in members)
    scores: np.ndarray  # c per UAV
    heads: np.ndarray  # positions of the top-M̂ scorers
    labels: np.ndarray  # D_r labels: position of the assigned head

    def to_json(self):
        return {"members": self.members.tolist(), "choice": self.members[self.choice].tolist(),
                "scores": self.scores.tolist(), "heads": self.members[self.heads].tolist(),
                "labels": self.members[self.labels].tolist()}


def score_leaders_online(gamma: gs.IfsnParams, obs: sim.Observation, m_hat: int):
    """Best-fit head per UAV, vote counts, and the labeled online dataset D_r."""
    n = len(obs.members)
    if not 1 <= m_hat <= n:
        raise ValueError("m_hat out of range")
    R = residual_matrix(gamma, obs)
    masked = R.copy()
    np.fill_diagonal(masked, np.inf)
    choice = np.argmin(masked, axis=1)
    scores = np.bincount(choice, minlength=n)
    heads = np.array(sorted(sorted(range(n), key=lambda j: (-scores[j], j))[:m_hat]))
    sub = masked[:, heads]
    labels = heads[np.argmin(sub, axis=1)]
    labels[heads] = heads
    scored = OnlineScores(np.asarray(obs.members), choice, scores, heads, labels)
    return scored, observation_windows(obs, labels)


def online_update(W_prev: GruEncoderParams, data: LabeledWindows, hyper: McHyper, rng=None):
    """``online_steps`` metric steps on D_r; degenerate datasets leave W unchanged."""
    if len(data.eligible_anchors()) == 0:
        log.warning("online dataset has no usable triplets; encoder left unchanged")
        return W_prev
    rng = np.random.default_rng([hyper.seed, 34]) if rng is None else rng
    W = W_prev
    for _ in range(hyper.online_steps):
        W = metric_step(W, make_triplet_batch(data, hyper, rng), hyper.beta_prime, hyper.gamma)
    return W


# ------------------------------------------------------------------ round loop

def run_detection(state: sim.SwarmState, hyper: McHyper, W: GruEncoderParams,
                  gassl_hyper: gs.GasslHyper | None = None, seed=0, t_ob=sim.T_OB) -> sim.DetectionLedger:
    """Observe, cluster, elect, destroy and merge until no head survives or R_m rounds pass."""
    gh = gassl_hyper or gs.GasslHyper(max_observers=ROUND_MAX_OBSERVERS)
    ledger = sim.DetectionLedger(heads=[int(h) for h in state.live_huavs], n_total=state.n)
    rng = np.random.default_rng([seed, 35])
    ifsn = gs.IfsnParams.init(np.random.default_rng([seed, 36]), gh.t0, gh.ifsn_hidden)
    details = []
    for r in range(1, hyper.R_m + 1):
        sim.advance(state, t_ob)
        obs = sim.observe(state, t_ob=t_ob)
        data = observation_windows(obs)
        feats = data.features(W, hyper)
        m_hat = estimate_cluster_count(feats, hyper, seed=seed + r)
        assign = cluster_kmeans(feats, m_hat, seed=seed + r, restarts=hyper.kmeans_restarts)
        assign = absorb_singletons(feats, assign)
        m_eff = int(assign.max()) + 1
        cands = []
        for c in range(m_eff):
            idx = np.flatnonzero(assign == c)
            if len(idx) < 2:
                continue  # only possible when every UAV but one is gone
            sub = obs.subset(idx)
            run = gs.train_single_cluster(sub, replace(gh, seed=int(rng.integers(2**31))), ifsn=ifsn)
            ifsn = run.model.ifsn
            cands.extend(gs.elect_candidates(run.vote, gh.top_k))
        scored, online = score_leaders_online(ifsn, obs, m_eff)
        sim.destroy_and_merge(state, cands)
        rec = ledger.record(cands, state.clock)
        details.append({"round": r, "m_hat": m_hat, "clusters": m_eff, "members": obs.members.tolist(),
                        "features": feats.tolist(), "assignments": assign.tolist(),
                        "online": scored.to_json()})
        log.info("round %d: M_hat=%d candidates=%s survivors=%s", r, m_hat, rec.candidates, rec.survivors)
        if ledger.complete:
            break
        W = online_update(W, online, hyper, rng)
    ledger.extras["round_details"] = details
    return ledger
