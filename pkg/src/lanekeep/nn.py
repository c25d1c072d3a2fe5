"""Small MLP core with exact backprop, plus Adam. No autodiff framework,
just the handful of pieces an actor-critic pair needs: ReLU hidden layers,
tanh or linear output, gradients for parameters and inputs, and an optional
auxiliary input joined in at a hidden layer (the critic takes the action
there instead of at the input)."""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass

import numpy as np

_ACT_TAGS = {"linear": 0, "tanh": 1}
_TAG_ACTS = {v: k for k, v in _ACT_TAGS.items()}


@dataclass(eq=False)
class Gradients:
    weights: list      # dW per layer, summed over the batch
    biases: list       # db per layer
    wrt_input: np.ndarray  # gradient w.r.t. the (full) input vector(s)


class Mlp:
    """Feed-forward net. Weights are (fan_in, fan_out); forward accepts a
    single vector or a batch of rows. The full input is the base input plus
    aux_dim trailing values when an aux layer is configured."""

    def __init__(self, dims, out_act, weights, biases, aux_dim=0, aux_layer=None):
        if len(dims) < 2:
            raise ValueError("need at least input and output dims")
        if out_act not in _ACT_TAGS:
            raise ValueError(f"unknown output activation {out_act!r}")
        if aux_dim and not (aux_layer is not None and 1 <= aux_layer < len(dims) - 1):
            raise ValueError("aux_layer must index a hidden layer")
        self.dims = list(dims)
        self.out_act = out_act
        self.aux_dim = aux_dim
        self.aux_layer = aux_layer if aux_dim else None
        self.weights = weights
        self.biases = biases
        for l in range(len(dims) - 1):
            fin = dims[l] + (aux_dim if l == self.aux_layer else 0)
            if weights[l].shape != (fin, dims[l + 1]) or biases[l].shape != (dims[l + 1],):
                raise ValueError(f"layer {l}: parameter shape mismatch")
        self._cache = None

    @property
    def in_dim(self):
        return self.dims[0] + self.aux_dim

    @property
    def out_dim(self):
        return self.dims[-1]

    def parameters(self):
        """Flat list, weights then biases; shared by the optimizer and targets."""
        return self.weights + self.biases

    def param_count(self):
        return sum(int(p.size) for p in self.parameters())

    def copy(self):
        return Mlp(
            self.dims,
            self.out_act,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.aux_dim,
            self.aux_layer,
        )

    def forward(self, x):
        key = x
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.shape[1] != self.in_dim:
            raise ValueError(f"expected input width {self.in_dim}, got {x.shape[1]}")
        h = x[:, : self.dims[0]]
        aux = x[:, self.dims[0]:]
        hs, zs = [], []
        last = len(self.weights) - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if l == self.aux_layer:
                h = np.concatenate([h, aux], axis=1)
            hs.append(h)
            z = h @ w + b
            zs.append(z)
            if l < last:
                h = np.maximum(z, 0.0)
            elif self.out_act == "tanh":
                h = np.tanh(z)
            else:
                h = z
        self._cache = (key, single, hs, zs)
        return h[0] if single else h

    def backward(self, x, output_grad):
        """Exact gradients for the forward pass that produced the cache; if
        ``x`` is not the cached input object, the forward pass is recomputed.
        Parameter gradients are summed over batch rows."""
        if self._cache is None or self._cache[0] is not x:
            self.forward(x)
        _, single, hs, zs = self._cache
        g = np.asarray(output_grad, dtype=np.float64)
        if single:
            g = g[None, :]
        if g.shape != zs[-1].shape:
            raise ValueError("output_grad shape mismatch")
        dw = [None] * len(self.weights)
        db = [None] * len(self.weights)
        last = len(self.weights) - 1
        daux = None
        for l in range(last, -1, -1):
            if l == last:
                if self.out_act == "tanh":
                    t = np.tanh(zs[l])
                    g = g * (1.0 - t * t)
            else:
                g = g * (zs[l] > 0.0)
            dw[l] = hs[l].T @ g
            db[l] = g.sum(axis=0)
            g = g @ self.weights[l].T
            if l == self.aux_layer:
                daux = g[:, -self.aux_dim:]
                g = g[:, : -self.aux_dim]
        din = g if daux is None else np.concatenate([g, daux], axis=1)
        return Gradients(dw, db, din[0] if single else din)


def init(layer_dims, seed, out_act="tanh", aux_dim=0, aux_layer=None):
    """Fresh network: weights uniform within +-1/sqrt(fan_in), zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for l in range(len(layer_dims) - 1):
        fin = layer_dims[l] + (aux_dim if aux_layer is not None and l == aux_layer else 0)
        bound = 1.0 / math.sqrt(fin)
        weights.append(rng.uniform(-bound, bound, size=(fin, layer_dims[l + 1])))
        biases.append(np.zeros(layer_dims[l + 1]))
    return Mlp(layer_dims, out_act, weights, biases, aux_dim, aux_layer)


class Adam:
    """Adaptive-moment optimizer over a fixed list of parameter arrays.
    direction="ascend" climbs the objective instead of descending it."""

    beta1 = 0.9
    beta2 = 0.999
    eps = 1e-8

    def __init__(self, params, lr):
        self.lr = lr
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads, direction="descend"):
        if direction not in ("descend", "ascend"):
            raise ValueError(f"unknown direction {direction!r}")
        if len(params) != len(self.m) or len(grads) != len(self.m):
            raise ValueError("parameter/gradient count mismatch")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if direction == "ascend":
                g = -g
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# --- checkpoint format -------------------------------------------------------
# header: magic "LKNN", u16 version, u16 act tag, u32 n_dims, u32 aux_dim,
#         i32 aux_layer (-1 if none), then n_dims * u32 dims;
# body:   weight then bias arrays per layer, float64 little-endian, C order;
# footer: u32 crc32 of header+body. Everything little-endian.

_MAGIC = b"LKNN"
_VERSION = 1


def save(net: Mlp, path):
    parts = [
        _MAGIC,
        struct.pack(
            "<HHIIi",
            _VERSION,
            _ACT_TAGS[net.out_act],
            len(net.dims),
            net.aux_dim,
            -1 if net.aux_layer is None else net.aux_layer,
        ),
        struct.pack(f"<{len(net.dims)}I", *net.dims),
    ]
    for w, b in zip(net.weights, net.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    blob = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(blob)
        fh.write(struct.pack("<I", zlib.crc32(blob)))


def load(path) -> Mlp:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 + 16 + 4 or raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a network checkpoint")
    blob, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(blob) != crc:
        raise ValueError(f"{path}: checksum mismatch, file corrupted")
    version, tag, n_dims, aux_dim, aux_layer = struct.unpack_from("<HHIIi", blob, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 4 + 16
    dims = list(struct.unpack_from(f"<{n_dims}I", blob, off))
    off += 4 * n_dims
    aux_layer = None if aux_layer < 0 else aux_layer
    weights, biases = [], []
    for l in range(n_dims - 1):
        fin = dims[l] + (aux_dim if aux_layer is not None and l == aux_layer else 0)
        n = fin * dims[l + 1]
        weights.append(
            np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(fin, dims[l + 1]).copy()
        )
        off += 8 * n
        biases.append(np.frombuffer(blob, dtype="<f8", count=dims[l + 1], offset=off).copy())
        off += 8 * dims[l + 1]
    if off != len(blob):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return Mlp(dims, _TAG_ACTS[tag], weights, biases, aux_dim, aux_layer)
