"""GraphSAGE (mean aggregator) over sampled blocks, with a hand-written backward.

Layer ``l`` computes, for every destination ``v`` of block ``l``::

    z_v = h_v @ W_self + mean_{u -> v} h_u @ W_neigh + b
    h'_v = relu(z_v)            # identity on the last layer

Destinations with no sampled in-edges aggregate a zero vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


@dataclass
class SageParams:
    w_self: list
    w_neigh: list
    bias: list

    @property
    def num_layers(self) -> int:
        return len(self.w_self)

    def arrays(self) -> list:
        out = []
        for ws, wn, b in zip(self.w_self, self.w_neigh, self.bias):
            out.extend([ws, wn, b])
        return out

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()]).astype(np.float32)

    def unflatten(self, flat: np.ndarray) -> "SageParams":
        """New params with this instance's shapes filled from ``flat``."""
        out, off = [], 0
        for a in self.arrays():
            out.append(np.asarray(flat[off:off + a.size], dtype=a.dtype).reshape(a.shape).copy())
            off += a.size
        if off != flat.size:
            raise ValueError("flat vector length does not match parameters")
        return SageParams(out[0::3], out[1::3], out[2::3])

    def copy(self) -> "SageParams":
        return SageParams([a.copy() for a in self.w_self], [a.copy() for a in self.w_neigh],
                          [a.copy() for a in self.bias])

    def astype(self, dtype) -> "SageParams":
        return SageParams([a.astype(dtype) for a in self.w_self], [a.astype(dtype) for a in self.w_neigh],
                          [a.astype(dtype) for a in self.bias])

    def zeros_like(self) -> "SageParams":
        return SageParams([np.zeros_like(a) for a in self.w_self], [np.zeros_like(a) for a in self.w_neigh],
                          [np.zeros_like(a) for a in self.bias])

    def checksum(self) -> str:
        import hashlib

        return hashlib.sha256(self.flatten().tobytes()).hexdigest()


def init_params(dims, seed: int = 0) -> SageParams:
    """Glorot-uniform weights and zero biases for layer widths ``dims``."""
    rng = np.random.default_rng(seed)
    ws, wn, bs = [], [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        lim = np.sqrt(6.0 / (d_in + d_out))
        ws.append(rng.uniform(-lim, lim, (d_in, d_out)).astype(np.float32))
        wn.append(rng.uniform(-lim, lim, (d_in, d_out)).astype(np.float32))
        bs.append(np.zeros(d_out, dtype=np.float32))
    return SageParams(ws, wn, bs)


def mean_operator(block, dtype=np.float32) -> sp.csr_matrix:
    """Row-normalised ``[num_dst, num_src]`` adjacency of a block."""
    deg = np.bincount(block.edge_dst, minlength=block.num_dst).astype(np.float64)
    inv = np.zeros_like(deg)
    np.divide(1.0, deg, out=inv, where=deg > 0)
    vals = inv[block.edge_dst].astype(dtype)
    return sp.csr_matrix((vals, (block.edge_dst, block.edge_src)), shape=(block.num_dst, block.num_src))


@dataclass
class Tape:
    inputs: list = field(default_factory=list)     # h fed to each layer
    ops: list = field(default_factory=list)
    means: list = field(default_factory=list)
    masks: list = field(default_factory=list)      # relu masks (None on last layer)


def sage_forward(params: SageParams, blocks, input_feats: np.ndarray):
    if len(blocks) != params.num_layers:
        raise ValueError(f"{len(blocks)} blocks for {params.num_layers} layers")
    h = np.asarray(input_feats)
    dtype = params.w_self[0].dtype
    h = h.astype(dtype, copy=False)
    tape = Tape()
    for l, block in enumerate(blocks):
        ws, wn, b = params.w_self[l], params.w_neigh[l], params.bias[l]
        if h.shape != (block.num_src, ws.shape[0]):
            raise ValueError(f"layer {l}: input {h.shape}, expected ({block.num_src}, {ws.shape[0]})")
        op = mean_operator(block, dtype)
        m = np.asarray(op @ h, dtype=dtype)
        z = h[: block.num_dst] @ ws + m @ wn + b
        tape.inputs.append(h)
        tape.ops.append(op)
        tape.means.append(m)
        if l + 1 < len(blocks):
            mask = z > 0
            h = z * mask
            tape.masks.append(mask)
        else:
            h = z
            tape.masks.append(None)
    return h, tape


def sage_backward(params: SageParams, tape: Tape, dlogits: np.ndarray):
    """Gradients of every parameter and of the input features."""
    if len(tape.inputs) != params.num_layers:
        raise ValueError("tape does not match parameters")
    grads = params.zeros_like()
    dh = np.asarray(dlogits, dtype=params.w_self[0].dtype)
    for l in range(params.num_layers - 1, -1, -1):
        h, op, m, mask = tape.inputs[l], tape.ops[l], tape.means[l], tape.masks[l]
        dz = dh * mask if mask is not None else dh
        n_dst = dz.shape[0]
        grads.w_self[l] = h[:n_dst].T @ dz
        grads.w_neigh[l] = m.T @ dz
        grads.bias[l] = dz.sum(axis=0)
        dm = dz @ params.w_neigh[l].T
        dh = np.asarray(op.T @ dm, dtype=dz.dtype)
        dh[:n_dst] += dz @ params.w_self[l].T
    return grads, dh


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and its gradient w.r.t. ``logits``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(logits)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = float(-logp[np.arange(n), labels].mean())
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1
    return loss, (d / n).astype(logits.dtype)


def sgd_step(params: SageParams, grads: SageParams, lr: float) -> SageParams:
    lr = np.float32(lr)
    return SageParams([p - lr * g for p, g in zip(params.w_self, grads.w_self)],
                      [p - lr * g for p, g in zip(params.w_neigh, grads.w_neigh)],
                      [p - lr * g for p, g in zip(params.bias, grads.bias)])


class Momentum:
    """Heavy-ball SGD state; ``momentum=0`` reduces to :func:`sgd_step`."""

    def __init__(self, params: SageParams, lr: float, momentum: float = 0.9):
        self.lr = lr
        self.momentum = np.float32(momentum)
        self.velocity = params.zeros_like()

    def step(self, params: SageParams, grads: SageParams) -> SageParams:
        if self.momentum == 0:
            return sgd_step(params, grads, self.lr)
        v = self.velocity
        vel = SageParams([self.momentum * a + g for a, g in zip(v.w_self, grads.w_self)],
                         [self.momentum * a + g for a, g in zip(v.w_neigh, grads.w_neigh)],
                         [self.momentum * a + g for a, g in zip(v.bias, grads.bias)])
        self.velocity = vel
        return sgd_step(params, vel, self.lr)
