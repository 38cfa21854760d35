"""Single-cluster head detection by graph attention self-supervision.

Each observer UAV owns an attention network (query net, one similarity net
and key matrix per head) that weighs every cluster member's speed at one lag
(heads 1..T0) or anchor position (head T0+1).  The attention-weighted
estimates of the leader's history feed a follow-strategy network shared by
all observers, trained to predict the observer's own next speed.  After
training, each observer votes for the member it attends to most and the
top-voted members become the candidate heads.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .nn import Adam, DenseNet, ParamSet, _prefixed, _raw, _strip, backprop, register, sgd_apply
from .sim import Observation, TopologyWindow

log = logging.getLogger(__name__)


@dataclass
class GasslHyper:
    omega: int = 120
    beta: float = 1e-2
    optimizer: str = "adam"
    key_dim: int = 8
    query_dim: int = 8
    hidden: int = 16
    ifsn_hidden: tuple = (32, 32, 32)
    top_k: int = 1
    seed: int = 0
    patience: int = 20
    min_delta: float = 1e-6
    pos_scale: float = 50.0
    speed_scale: float = 5.0
    clip: float | None = None
    t0: int = 4
    max_observers: int | None = None  # cap on voting observers; None = every member


@register
@dataclass
class AgatParams(ParamSet):
    query_net: DenseNet
    head_similarity: list
    head_keys: list

    def __post_init__(self):
        if len(self.head_similarity) != len(self.head_keys):
            raise ValueError("one key matrix per head")
        for s in self.head_similarity:
            if s.layer_dims[-1] != 1:
                raise ValueError("similarity nets must output a scalar")

    @property
    def n_heads(self):
        return len(self.head_keys)

    @classmethod
    def init(cls, rng, t0=4, key_dim=8, query_dim=8, hidden=32):
        query = DenseNet.mlp(3 * t0 + 3, [hidden], query_dim, rng)
        sims = [DenseNet.mlp(query_dim + key_dim, [hidden, hidden], 1, rng) for _ in range(t0 + 1)]
        limit = np.sqrt(6.0 / (key_dim + 3))
        keys = [rng.uniform(-limit, limit, size=(key_dim, 3)) for _ in range(t0 + 1)]
        return cls(query, sims, keys)

    def named_arrays(self):
        out = _prefixed("query", self.query_net.named_arrays())
        for l, (s, k) in enumerate(zip(self.head_similarity, self.head_keys)):
            out.update(_prefixed(f"sim{l}", s.named_arrays()))
            out[f"key{l}"] = k
        return out

    def with_arrays(self, arrays):
        return AgatParams(
            self.query_net.with_arrays(_strip("query", arrays)),
            [s.with_arrays(_strip(f"sim{l}", arrays)) for l, s in enumerate(self.head_similarity)],
            [arrays[f"key{l}"] for l in range(self.n_heads)],
        )

    def meta(self):
        return {"query": self.query_net.meta(), "sims": [s.meta() for s in self.head_similarity]}

    @classmethod
    def from_json_parts(cls, meta, arrays):
        q = _dense_from(meta["query"], _strip("query", arrays))
        sims = [_dense_from(m, _strip(f"sim{l}", arrays)) for l, m in enumerate(meta["sims"])]
        return cls(q, sims, [arrays[f"key{l}"] for l in range(len(sims))])


@register
@dataclass
class IfsnParams(ParamSet):
    """Shared follow-strategy network.

    ``norm`` selects how the (P ; V̂ ; p̂) input is conditioned: ``"vector"``
    z-scores the whole concatenated vector, ``"scaled"`` expresses positions
    relative to the observer's latest position and divides positions and
    speeds by fixed scales, which keeps the direction information intact.
    """

    body: DenseNet
    norm: str = "scaled"
    pos_scale: float = 50.0
    speed_scale: float = 5.0

    def __post_init__(self):
        if self.norm not in ("scaled", "vector"):
            raise ValueError(f"unknown IFSN input mode {self.norm!r}")

    @classmethod
    def init(cls, rng, t0=4, hidden=(32, 32, 32), norm="scaled", pos_scale=50.0, speed_scale=5.0):
        in_dim = 3 * (t0 + 1) + 3 * t0 + 3
        return cls(DenseNet.mlp(in_dim, list(hidden), 3, rng), norm, pos_scale, speed_scale)

    def named_arrays(self):
        return self.body.named_arrays()

    def with_arrays(self, arrays):
        return IfsnParams(self.body.with_arrays(arrays), self.norm, self.pos_scale, self.speed_scale)

    def meta(self):
        return {**self.body.meta(), "norm": self.norm,
                "pos_scale": self.pos_scale, "speed_scale": self.speed_scale}

    @classmethod
    def from_json_parts(cls, meta, arrays):
        return cls(_dense_from(meta, arrays), meta.get("norm", "scaled"),
                   meta.get("pos_scale", 50.0), meta.get("speed_scale", 5.0))


def _dense_from(meta, arrays):
    n = len(meta["layer_dims"]) - 1
    return DenseNet(tuple(meta["layer_dims"]), tuple(meta["activations"]),
                    [arrays[f"W{k}"] for k in range(n)], [arrays[f"b{k}"] for k in range(n)])


@dataclass
class GasslModel:
    ifsn: IfsnParams
    agat: dict = field(default_factory=dict)


@dataclass
class AttentionTensor:
    values: np.ndarray  # (T0+1, n): row l is head l+1 over members
    weights: np.ndarray  # (n,): head mean

    @classmethod
    def from_values(cls, values):
        values = np.asarray(values, dtype=np.float64)
        return cls(values, values.mean(axis=0))


@dataclass
class LeaderVote:
    members: np.ndarray
    choices: np.ndarray  # member position chosen by each voter
    tally: np.ndarray  # c_i per member
    voters: np.ndarray | None = None  # member positions of the voters; None = all, in order

    def __post_init__(self):
        if self.voters is None:
            self.voters = np.arange(len(self.members))

    @property
    def choice_indices(self):
        return self.members[self.choices]

    def to_json(self):
        return {
            "members": self.members.tolist(),
            "voters": self.members[self.voters].tolist(),
            "choices": self.choice_indices.tolist(),
            "tally": self.tally.tolist(),
        }


# ------------------------------------------------------------------ batch data

@dataclass
class WindowBatch:
    """Stacked windows for one member set; axis 0 is the window."""

    anchors: np.ndarray  # (B, n, 3)
    speeds: np.ndarray  # (B, n, T0, 3), oldest first
    own: np.ndarray  # (B, n, T0+1, 3) follower positions p[w-T0..w]
    targets: np.ndarray | None  # (B, n, 3) speeds v[w+1]
    pos_scale: float
    speed_scale: float

    def __post_init__(self):
        centroid = self.anchors.mean(axis=1, keepdims=True)
        self.anchors_n = (self.anchors - centroid) / self.pos_scale
        self.speeds_n = self.speeds / self.speed_scale

    @property
    def n(self):
        return self.anchors.shape[1]

    @property
    def t0(self):
        return self.speeds.shape[2]

    @classmethod
    def from_observation(cls, obs: Observation, hyper: GasslHyper):
        a, s, own, tg = obs.batch_arrays()
        return cls(a, s, own, tg, hyper.pos_scale, hyper.speed_scale)

    @classmethod
    def from_window(cls, window: TopologyWindow, hyper: GasslHyper, own=None):
        own = np.zeros((1, window.anchor_positions.shape[0], window.speeds.shape[1] + 1, 3)) if own is None else own
        return cls(window.anchor_positions[None], window.speeds[None], own, None,
                   hyper.pos_scale, hyper.speed_scale)

    def subset(self, rows):
        return WindowBatch(self.anchors[rows], self.speeds[rows], self.own[rows],
                           None if self.targets is None else self.targets[rows],
                           self.pos_scale, self.speed_scale)


# ------------------------------------------------------------------ graph pieces

def query_input(batch: WindowBatch, observer):
    """(own speeds ; own anchor), scaled; shape (B, 3*T0+3)."""
    B = batch.anchors.shape[0]
    return np.concatenate([batch.speeds_n[:, observer].reshape(B, -1), batch.anchors_n[:, observer]], axis=1)


def head_inputs(batch: WindowBatch):
    """Per-head member data: heads 1..T0 read v[t-l+1], head T0+1 the anchors."""
    t0 = batch.t0
    return [batch.speeds_n[:, :, t0 - l] for l in range(1, t0 + 1)] + [batch.anchors_n]


def _stacked_layers(agat: AgatParams):
    """Per-layer head weights stacked on a leading head axis."""
    sims = agat.head_similarity
    depth = len(sims[0].weights)
    Ws = [ad.stack([s.weights[k] for s in sims]) for k in range(depth)]
    bs = [ad.stack([s.biases[k] for s in sims]) for k in range(depth)]
    return Ws, bs, sims[0].activations


def attention_graph(agat: AgatParams, batch: WindowBatch, observer):
    """Head attentions as one (T0+1, B, n) tensor, softmax-normalized over members.

    All heads share layer shapes, so they are evaluated together with a
    leading head axis; this is the same arithmetic as running each head's
    similarity net separately.
    """
    query = agat.query_net(query_input(batch, observer))  # (B, Q)
    qd = query.shape[-1]
    X = np.stack(head_inputs(batch))  # (H, B, n, 3)
    H, B, n, _ = X.shape
    K = ad.stack(agat.head_keys)  # (H, key_dim, 3)
    keys = ad.matmul(X.reshape(H, B * n, 3), ad.swapaxes(K, 1, 2))  # (H, B*n, key_dim)
    Ws, bs, acts = _stacked_layers(agat)
    # first similarity layer on (query ; key) split into its two column blocks
    wq = ad.getitem(Ws[0], (slice(None), slice(None), slice(0, qd)))
    wk = ad.getitem(Ws[0], (slice(None), slice(None), slice(qd, None)))
    hq = ad.add(ad.matmul(query, ad.swapaxes(wq, 1, 2)), ad.reshape(bs[0], (H, 1, -1)))  # (H, B, hid)
    hk = ad.matmul(keys, ad.swapaxes(wk, 1, 2))  # (H, B*n, hid)
    hid = hk.shape[-1]
    h = ad.add(ad.reshape(hq, (H, B, 1, hid)), ad.reshape(hk, (H, B, n, hid)))
    h = ad.reshape(ad.ACTIVATIONS[acts[0]](h), (H, B * n, hid))
    for W, b, act in zip(Ws[1:], bs[1:], acts[1:]):
        h = ad.ACTIVATIONS[act](ad.add(ad.matmul(h, ad.swapaxes(W, 1, 2)), ad.reshape(b, (H, 1, -1))))
    return ad.softmax(ad.reshape(h, (H, B, n)), axis=-1)


def aggregate_graph(alphas, batch: WindowBatch):
    """Attention-weighted leader estimates: V̂ (B, T0, 3) oldest first, p̂ (B, 3).

    ``alphas`` is the (T0+1, B, n) head tensor; head l (1-based) weights the
    members' speeds at lag l, so V̂ row k (oldest first) uses head T0-k.
    """
    t0 = batch.t0
    B, n = batch.anchors.shape[:2]
    speed_heads = ad.swapaxes(ad.getitem(alphas, slice(t0 - 1, None, -1)), 0, 1)  # (B, T0, n)
    values = batch.speeds.transpose(0, 2, 1, 3)  # (B, T0, n, 3)
    v_hat = ad.reshape(ad.matmul(ad.reshape(speed_heads, (B, t0, 1, n)), values), (B, t0, 3))
    p_hat = ad.reshape(ad.matmul(ad.reshape(ad.getitem(alphas, t0), (B, 1, n)), batch.anchors), (B, 3))
    return v_hat, p_hat


def ifsn_input_graph(own_positions, v_hat, p_hat):
    B = own_positions.shape[0]
    return ad.concat([ad.as_tensor(own_positions.reshape(B, -1)), ad.reshape(v_hat, (B, -1)), p_hat], axis=1)


def ifsn_conditioned_graph(ifsn: IfsnParams, own_positions, v_hat, p_hat):
    """The IFSN body input for a batch, per ``ifsn.norm``."""
    if ifsn.norm == "vector":
        return ad.standardize(ifsn_input_graph(own_positions, v_hat, p_hat))
    B = own_positions.shape[0]
    ref = own_positions[:, -1, :]
    rel = (own_positions - ref[:, None, :]) / ifsn.pos_scale
    return ad.concat([
        ad.as_tensor(rel.reshape(B, -1)),
        ad.mul(ad.reshape(v_hat, (B, -1)), 1.0 / ifsn.speed_scale),
        ad.mul(ad.sub(p_hat, ref), 1.0 / ifsn.pos_scale),
    ], axis=1)


def ifsn_graph(ifsn: IfsnParams, own_positions, v_hat, p_hat):
    return ifsn.body(ifsn_conditioned_graph(ifsn, own_positions, v_hat, p_hat))


def batch_loss_graph(agat, ifsn, batch: WindowBatch, observer, attention=None, ifsn_fn=None):
    """Σ_b |v[w_b+1] - v̂|² for one observer.

    ``attention`` overrides the learned attention (list of (B, n) arrays) and
    ``ifsn_fn(own, v_hat, p_hat)`` overrides the follow-strategy network;
    both hooks exist for oracle checks.
    """
    if attention is None:
        alphas = attention_graph(agat, batch, observer)
    else:
        alphas = ad.as_tensor(np.stack([np.asarray(a, dtype=np.float64) for a in attention]))
    v_hat, p_hat = aggregate_graph(alphas, batch)
    own = batch.own[:, observer]
    if ifsn_fn is None:
        pred = ifsn_graph(ifsn, own, v_hat, p_hat)
    else:
        pred = ad.as_tensor(ifsn_fn(own, v_hat.data, p_hat.data))
    diff = ad.sub(pred, batch.targets[:, observer])
    return ad.tsum(ad.square(diff))


# ------------------------------------------------------------------ numpy-facing operations

def _member_pos(members, observer):
    hits = np.flatnonzero(np.asarray(members) == observer)
    if len(hits) == 0:
        raise ValueError(f"observer {observer} is not a window member")
    return int(hits[0])


def attention_forward(params: AgatParams, window: TopologyWindow, observer, hyper: GasslHyper | None = None):
    """Attention of ``observer`` (a UAV index) over the window's members."""
    hyper = hyper or GasslHyper(t0=window.speeds.shape[1])
    o = _member_pos(window.cluster_members, observer)
    batch = WindowBatch.from_window(window, hyper)
    alphas = attention_graph(params, batch, o)
    return AttentionTensor.from_values(alphas.data[:, 0])


def aggregate(att: AttentionTensor, window: TopologyWindow):
    """(V̂ (T0, 3) oldest first, p̂ (3,)) from one window's attention."""
    t0 = window.speeds.shape[1]
    v_hat = np.stack([att.values[t0 - 1 - k] @ window.speeds[:, k] for k in range(t0)])
    p_hat = att.values[t0] @ window.anchor_positions
    return v_hat, p_hat


def ifsn_predict(gamma: IfsnParams, follower_positions, v_hat, p_hat):
    """Predicted next speed from one (P ; V̂ ; p̂) triple.

    In ``"vector"`` mode the concatenated vector is z-scored across its
    components (constant vectors map to zeros) before the body runs.
    """
    P = np.asarray(follower_positions, dtype=np.float64)
    v_hat = np.asarray(v_hat, dtype=np.float64)
    p_hat = np.asarray(p_hat, dtype=np.float64)
    n_in = P.size + v_hat.size + p_hat.size
    if n_in != gamma.body.layer_dims[0] or P.ndim != 2 or p_hat.shape != (3,):
        raise ValueError(f"IFSN expects {gamma.body.layer_dims[0]} inputs, got {n_in}")
    x = ifsn_conditioned_graph(gamma, P[None], ad.as_tensor(v_hat[None]), ad.as_tensor(p_hat[None])).data
    return gamma.body.eval(x)[0]


def batch_loss(model: GasslModel, obs: Observation, observer, hyper: GasslHyper | None = None,
               attention=None, ifsn_fn=None) -> float:
    """Summed squared error of ``observer``'s speed predictions over the batch."""
    hyper = hyper or GasslHyper(t0=obs.t0)
    if obs.n_windows < 1:
        raise ValueError("need T_ob - T0 >= 1 windows")
    o = _member_pos(obs.members, observer)
    batch = WindowBatch.from_observation(obs, hyper)
    agat = model.agat.get(observer) if attention is None else None
    loss = batch_loss_graph(agat, model.ifsn, batch, o, attention=attention, ifsn_fn=ifsn_fn)
    return float(loss.data)


def batch_attention(agat: AgatParams, batch: WindowBatch, observer):
    """Head values averaged over the batch's windows, shape (T0+1, n)."""
    return attention_graph(agat, batch, observer).data.mean(axis=1)


def _clip(grads, limit):
    if limit is None:
        return grads
    total = np.sqrt(sum(float((_raw(g) ** 2).sum()) for gs in grads for g in gs.named_arrays().values()))
    if total <= limit:
        return grads
    scale = limit / total
    return [gs.with_arrays({k: _raw(v) * scale for k, v in gs.named_arrays().items()}) for gs in grads]


def make_optimizer(hyper: GasslHyper):
    if hyper.optimizer == "adam":
        return Adam(hyper.beta)
    if hyper.optimizer == "sgd":
        return None
    raise ValueError(f"unknown optimizer {hyper.optimizer!r}")


def train_observer(agat, ifsn, batch: WindowBatch, observer, hyper: GasslHyper, opt=None):
    """Train (Φ_i, Γ) for one observer; returns (agat, ifsn, losses).

    ``opt`` is an :class:`Adam` whose ``"ifsn"`` moments persist across
    observers, or None for plain gradient descent at rate ``beta``.
    """
    losses = []
    best = np.inf
    stale = 0
    if opt is not None:
        opt.reset("agat")
    for _ in range(hyper.omega):
        loss, grads = backprop(lambda a, f: batch_loss_graph(a, f, batch, observer), [agat, ifsn])
        losses.append(loss)
        g_agat, g_ifsn = _clip(grads, hyper.clip)
        if opt is None:
            agat = sgd_apply(agat, g_agat, hyper.beta)
            ifsn = sgd_apply(ifsn, g_ifsn, hyper.beta)
        else:
            agat = opt.step("agat", agat, g_agat)
            ifsn = opt.step("ifsn", ifsn, g_ifsn)
        if loss < best - hyper.min_delta:
            best, stale = loss, 0
        else:
            stale += 1
            if stale >= hyper.patience:
                break
    return agat, ifsn, losses


@dataclass
class GasslRun:
    vote: LeaderVote
    model: GasslModel
    attention: np.ndarray  # (n_voters, T0+1, n): batch-averaged head values
    losses: dict

    @property
    def weights(self):
        return self.attention.mean(axis=1)


def vote_from_attention(members, weights, voters=None):
    """Each voter picks its most-attended other member (lowest index on ties).

    ``weights`` has one row per voter; ``voters`` gives their member
    positions (default: every member in order).  Tallies are vote counts
    divided by the number of voters.
    """
    members = np.asarray(members)
    n = len(members)
    voters = np.arange(n) if voters is None else np.asarray(voters)
    w = np.array(weights, dtype=np.float64, copy=True)
    w[np.arange(len(voters)), voters] = -np.inf
    choices = np.argmax(w, axis=1)
    tally = np.bincount(choices, minlength=n) / len(voters)
    return LeaderVote(members, choices, tally, voters)


def train_single_cluster(obs: Observation, hyper: GasslHyper, ifsn: IfsnParams | None = None,
                         rng=None) -> GasslRun:
    """Train observers in index order with a shared IFSN and tally their votes.

    Every member observes unless ``hyper.max_observers`` caps the voters, in
    which case a seeded subset votes (each still attends over all members).
    """
    if obs.n_windows < 1:
        raise ValueError("observation too short for one supervised window")
    if len(obs.members) < 2:
        raise ValueError("need at least two members")
    rng = np.random.default_rng(hyper.seed) if rng is None else rng
    batch = WindowBatch.from_observation(obs, hyper)
    if ifsn is None:
        ifsn = IfsnParams.init(rng, hyper.t0, hyper.ifsn_hidden)
    model = GasslModel(ifsn=ifsn)
    n = len(obs.members)
    voters = np.arange(n)
    if hyper.max_observers is not None and n > hyper.max_observers:
        voters = np.sort(rng.choice(n, size=hyper.max_observers, replace=False))
    att = np.empty((len(voters), hyper.t0 + 1, n))
    losses = {}
    opt = make_optimizer(hyper)
    for k, o in enumerate(voters):
        agat = AgatParams.init(rng, hyper.t0, hyper.key_dim, hyper.query_dim, hyper.hidden)
        agat, model.ifsn, hist = train_observer(agat, model.ifsn, batch, o, hyper, opt)
        model.agat[int(obs.members[o])] = agat
        losses[int(obs.members[o])] = hist
        att[k] = batch_attention(agat, batch, o)
    vote = vote_from_attention(obs.members, att.mean(axis=1), voters)
    return GasslRun(vote, model, att, losses)


def elect_candidates(vote: LeaderVote, top_k=1):
    """Member indices with the ``top_k`` largest tallies; lower index wins ties."""
    n = len(vote.tally)
    if not 1 <= top_k <= n:
        raise ValueError(f"top_k must be in [1, {n}]")
    order = sorted(range(n), key=lambda i: (-vote.tally[i], vote.members[i]))
    return sorted(int(vote.members[i]) for i in order[:top_k])
