"""Small differentiable building blocks: dense nets, the GRU cell, SGD and a
finite-difference gradient checker.

Parameter containers expose ``named_arrays()`` / ``with_arrays()`` so that
one gradient routine, one SGD step and one JSON codec serve every network.
A gradient is returned as the same container type holding gradient arrays,
which keeps shapes congruent by construction.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ParamSet:
    """Mixin for containers of named float64 arrays."""

    def named_arrays(self) -> dict:
        raise NotImplementedError

    def with_arrays(self, arrays: dict):
        raise NotImplementedError

    def lift(self):
        """Copy whose arrays are gradient-collecting leaf tensors."""
        return self.with_arrays({k: ad.param(v) for k, v in self.named_arrays().items()})

    def values(self):
        """Plain-numpy copy (undoes :meth:`lift`)."""
        return self.with_arrays({k: _raw(v).copy() for k, v in self.named_arrays().items()})

    def zeros_like(self):
        return self.with_arrays({k: np.zeros_like(_raw(v)) for k, v in self.named_arrays().items()})

    def to_json(self) -> dict:
        return {
            "type": type(self).__name__,
            "meta": self.meta(),
            "arrays": {
                k: {"shape": list(_raw(v).shape), "values": _raw(v).ravel().tolist()}
                for k, v in self.named_arrays().items()
            },
        }

    def meta(self) -> dict:
        return {}


def _raw(v):
    return v.data if isinstance(v, Tensor) else v


def _prefixed(prefix, arrays):
    return {f"{prefix}.{k}": v for k, v in arrays.items()}


def _strip(prefix, arrays):
    head = prefix + "."
    return {k[len(head):]: v for k, v in arrays.items() if k.startswith(head)}


def glorot(rng, fan_out, fan_in):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


@dataclass
class DenseNet(ParamSet):
    """Feed-forward net; weight ``k`` has shape (layer_dims[k+1], layer_dims[k])."""

    layer_dims: tuple
    activations: tuple
    weights: list
    biases: list

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        self.activations = tuple(self.activations)
        if len(self.activations) != len(self.layer_dims) - 1:
            raise ValueError("need one activation per layer")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_dims[k + 1], self.layer_dims[k])
            if _raw(w).shape != shape or _raw(b).shape != (shape[0],):
                raise ValueError(f"layer {k}: weight {_raw(w).shape} does not chain {shape}")

    @classmethod
    def init(cls, layer_dims, activations, rng):
        """Glorot-uniform weights, zero biases."""
        dims = list(layer_dims)
        weights = [glorot(rng, dims[k + 1], dims[k]) for k in range(len(dims) - 1)]
        biases = [np.zeros(dims[k + 1]) for k in range(len(dims) - 1)]
        return cls(tuple(dims), tuple(activations), weights, biases)

    @classmethod
    def mlp(cls, in_dim, hidden, out_dim, rng, hidden_act="tanh", out_act="identity"):
        dims = [in_dim, *hidden, out_dim]
        return cls.init(dims, [hidden_act] * len(hidden) + [out_act], rng)

    def named_arrays(self):
        out = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{k}"] = w
            out[f"b{k}"] = b
        return out

    def with_arrays(self, arrays):
        n = len(self.weights)
        return DenseNet(
            self.layer_dims,
            self.activations,
            [arrays[f"W{k}"] for k in range(n)],
            [arrays[f"b{k}"] for k in range(n)],
        )

    def meta(self):
        return {"layer_dims": list(self.layer_dims), "activations": list(self.activations)}

    def __call__(self, x):
        """Differentiable forward pass on the last axis of ``x``."""
        h = x
        for w, b, act in zip(self.weights, self.biases, self.activations):
            h = ad.ACTIVATIONS[act](ad.linear(h, w, b))
        return h

    def eval(self, x):
        """Plain numpy forward pass; no graph is recorded."""
        h = np.asarray(x, dtype=np.float64)
        for w, b, act in zip(self.weights, self.biases, self.activations):
            h = ad.ACTIVATIONS_NP[act](h @ _raw(w).T + _raw(b))
        return h


def dense_eval(net: DenseNet, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != net.layer_dims[0]:
        raise ValueError(f"input dim {x.shape[-1]} != {net.layer_dims[0]}")
    return net.eval(x)


@dataclass
class GruParams(ParamSet):
    """Shared GRU weights, each of shape (H, H + 3) for hidden size H."""

    W_r: np.ndarray
    W_u: np.ndarray
    W_h: np.ndarray

    def __post_init__(self):
        shapes = {_raw(self.W_r).shape, _raw(self.W_u).shape, _raw(self.W_h).shape}
        if len(shapes) != 1:
            raise ValueError(f"GRU matrices disagree in shape: {shapes}")
        (h, c), = shapes
        if c != h + 3:
            raise ValueError(f"GRU matrix must be H x (H+3), got {h} x {c}")

    @property
    def hidden(self):
        return _raw(self.W_r).shape[0]

    @classmethod
    def init(cls, rng, hidden=3):
        return cls(*(glorot(rng, hidden, hidden + 3) for _ in range(3)))

    @classmethod
    def zeros(cls, hidden=3):
        return cls(*(np.zeros((hidden, hidden + 3)) for _ in range(3)))

    def named_arrays(self):
        return {"W_r": self.W_r, "W_u": self.W_u, "W_h": self.W_h}

    def with_arrays(self, arrays):
        return GruParams(arrays["W_r"], arrays["W_u"], arrays["W_h"])


def gru_cell(params: GruParams, h_prev, v_in):
    """One GRU step; gates read (h_prev ; v), the candidate reads (v ; g_r * h_prev)."""
    h_prev, v_in = ad.as_tensor(h_prev), ad.as_tensor(v_in)
    hv = ad.concat([h_prev, v_in], axis=-1)
    g_r = ad.sigmoid(ad.linear(hv, params.W_r))
    g_u = ad.sigmoid(ad.linear(hv, params.W_u))
    vr = ad.concat([v_in, ad.mul(g_r, h_prev)], axis=-1)
    h_cand = ad.tanh(ad.linear(vr, params.W_h))
    return ad.add(ad.mul(ad.sub(1.0, g_u), h_prev), ad.mul(g_u, h_cand))


def gru_cell_eval(params: GruParams, h_prev, v_in) -> np.ndarray:
    """Numpy GRU step for 1-D or batched inputs."""
    h_prev = np.asarray(h_prev, dtype=np.float64)
    v_in = np.asarray(v_in, dtype=np.float64)
    sig = ad.ACTIVATIONS_NP["sigmoid"]
    hv = np.concatenate([h_prev, v_in], axis=-1)
    g_r = sig(hv @ _raw(params.W_r).T)
    g_u = sig(hv @ _raw(params.W_u).T)
    h_cand = np.tanh(np.concatenate([v_in, g_r * h_prev], axis=-1) @ _raw(params.W_h).T)
    return (1.0 - g_u) * h_prev + g_u * h_cand


def backprop(loss_fn, params, seed=1.0):
    """Gradients of the scalar ``loss_fn(*lifted)`` w.r.t. every parameter set.

    ``params`` is a ParamSet or a sequence of them; the result mirrors it.
    Returns ``(loss_value, grads)``.
    """
    single = isinstance(params, ParamSet)
    plist = [params] if single else list(params)
    lifted = [p.lift() for p in plist]
    loss = loss_fn(*lifted)
    if not isinstance(loss, Tensor):
        loss = ad.as_tensor(loss)
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    if loss.requires_grad:
        loss.backward(seed)
    grads = []
    for lp in lifted:
        arrays = {}
        for k, leaf in lp.named_arrays().items():
            arrays[k] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        grads.append(lp.with_arrays(arrays))
    value = float(loss.data)
    return value, (grads[0] if single else grads)


def _check_congruent(a: ParamSet, b: ParamSet):
    ka, kb = a.named_arrays(), b.named_arrays()
    if ka.keys() != kb.keys():
        raise ValueError(f"parameter names differ: {sorted(ka)} vs {sorted(kb)}")
    for k in ka:
        if _raw(ka[k]).shape != _raw(kb[k]).shape:
            raise ValueError(f"{k}: shape {_raw(ka[k]).shape} vs {_raw(kb[k]).shape}")


def sgd_apply(params: ParamSet, grads: ParamSet, rate: float):
    """``params - rate * grads`` as a new container."""
    _check_congruent(params, grads)
    g = grads.named_arrays()
    return params.with_arrays({k: _raw(v) - rate * _raw(g[k]) for k, v in params.named_arrays().items()})


class Adam:
    """Adam moments for any number of named parameter sets.

    ``step(key, params, grads)`` updates the set registered under ``key``;
    ``reset(key)`` forgets its moments so a fresh network starts clean.
    """

    def __init__(self, rate, beta1=0.9, beta2=0.999, eps=1e-8):
        self.rate, self.beta1, self.beta2, self.eps = rate, beta1, beta2, eps
        self._m, self._v, self._t = {}, {}, {}

    def reset(self, key):
        self._m.pop(key, None)
        self._v.pop(key, None)
        self._t.pop(key, None)

    def step(self, key, params: ParamSet, grads: ParamSet):
        _check_congruent(params, grads)
        g = {k: _raw(v) for k, v in grads.named_arrays().items()}
        m = self._m.setdefault(key, {k: np.zeros_like(v) for k, v in g.items()})
        v = self._v.setdefault(key, {k: np.zeros_like(x) for k, x in g.items()})
        t = self._t[key] = self._t.get(key, 0) + 1
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        out = {}
        for k, p in params.named_arrays().items():
            m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k]
            v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k]
            out[k] = _raw(p) - self.rate * (m[k] / c1) / (np.sqrt(v[k] / c2) + self.eps)
        return params.with_arrays(out)


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    worst_param: str
    n_checked: int

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


def _flat_loss(loss_fn, plist):
    out = loss_fn(*plist)
    return float(_raw(out)) if not isinstance(out, Tensor) else float(out.data)


def check_gradient(loss_fn, params, tolerance=1e-4, h=1e-5, floor=1e-6, grads=None):
    """Compare reverse-mode gradients with central differences, elementwise.

    The relative error of one element is ``|a - n| / max(|a|, |n|, floor)``.
    ``grads`` may be supplied to audit an externally computed gradient.
    """
    single = isinstance(params, ParamSet)
    plist = [p.values() for p in ([params] if single else params)]
    if grads is None:
        _, glist = backprop(loss_fn, plist)
    else:
        glist = [grads] if single else list(grads)
    worst, worst_name, count = 0.0, "", 0
    for pi, p in enumerate(plist):
        arrays = p.named_arrays()
        garrays = glist[pi].named_arrays()
        for name, arr in arrays.items():
            g = _raw(garrays[name])
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + h
                fp = _flat_loss(loss_fn, plist)
                arr[idx] = old - h
                fm = _flat_loss(loss_fn, plist)
                arr[idx] = old
                num = (fp - fm) / (2 * h)
                err = abs(g[idx] - num) / max(abs(g[idx]), abs(num), floor)
                count += 1
                if err > worst:
                    worst, worst_name = err, f"{pi}:{name}{list(idx)}"
    return GradCheckReport(worst, tolerance, worst_name, count)


def params_to_json(params: ParamSet) -> str:
    return json.dumps(params.to_json())


_TYPES = {}


def register(cls):
    _TYPES[cls.__name__] = cls
    return cls


register(DenseNet)
register(GruParams)


def params_from_json(payload):
    """Inverse of :meth:`ParamSet.to_json` for the registered container types."""
    if isinstance(payload, str):
        payload = json.loads(payload)
    arrays = {
        k: np.asarray(v["values"], dtype=np.float64).reshape(v["shape"])
        for k, v in payload["arrays"].items()
    }
    cls = _TYPES[payload["type"]]
    return cls.from_json_parts(payload.get("meta", {}), arrays) if hasattr(cls, "from_json_parts") else _default_build(cls, payload.get("meta", {}), arrays)


def _default_build(cls, meta, arrays):
    if cls is DenseNet:
        n = len(meta["layer_dims"]) - 1
        return DenseNet(
            tuple(meta["layer_dims"]),
            tuple(meta["activations"]),
            [arrays[f"W{k}"] for k in range(n)],
            [arrays[f"b{k}"] for k in range(n)],
        )
    return cls(**arrays)
