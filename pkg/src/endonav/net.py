"""Visuomotor policy/value network: two conv layers, a fully connected
layer, an LSTM cell and three categorical steering heads plus a value head.
Built on the in-repo autodiff layer; no external learning framework."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .sim import ActionTriple

CKPT_MAGIC = b"ENDONAV-CKPT v1\n"


class NonFiniteActivation(RuntimeError):
    """Training bug guard: the forward pass produced NaN or inf."""


@dataclass(frozen=True)
class NetworkSpec:
    input_size: int = 128
    input_channels: int = 3
    conv1_filters: int = 16
    conv1_kernel: int = 8
    conv1_stride: int = 4
    conv2_filters: int = 32
    conv2_kernel: int = 4
    conv2_stride: int = 2
    fc_units: int = 128
    lstm_units: int = 128
    n_heads: int = 3
    actions_per_head: int = 3

    def conv_sizes(self):
        o1 = (self.input_size - self.conv1_kernel) // self.conv1_stride + 1
        o2 = (o1 - self.conv2_kernel) // self.conv2_stride + 1
        return o1, o2

    @property
    def flat_features(self) -> int:
        _, o2 = self.conv_sizes()
        return o2 * o2 * self.conv2_filters

    def parameter_count(self) -> int:
        c = self.input_channels
        n = self.conv1_kernel ** 2 * c * self.conv1_filters + self.conv1_filters
        n += self.conv2_kernel ** 2 * self.conv1_filters * self.conv2_filters \
            + self.conv2_filters
        n += self.flat_features * self.fc_units + self.fc_units
        n += (self.fc_units + self.lstm_units) * 4 * self.lstm_units \
            + 4 * self.lstm_units
        n += self.lstm_units * self.n_heads * self.actions_per_head \
            + self.n_heads * self.actions_per_head
        n += self.lstm_units + 1
        return n


# small architecture for gradient checks and toy-environment training
MINIATURE_SPEC = NetworkSpec(input_size=8, conv1_filters=4, conv1_kernel=3,
                             conv1_stride=2, conv2_filters=4, conv2_kernel=2,
                             conv2_stride=1, fc_units=16, lstm_units=16)


@dataclass
class RecurrentState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, batch: int, units: int, dtype=np.float32) -> "RecurrentState":
        return cls(np.zeros((batch, units), dtype=dtype),
                   np.zeros((batch, units), dtype=dtype))


def _orthogonal(rng, shape, gain=1.0, dtype=np.float32):
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return (gain * q[:rows, :cols]).astype(dtype)


class PolicyValueNet:
    """Parameters live in an ordered name->Tensor dict; forward() builds the
    autodiff graph when gradients are enabled."""

    def __init__(self, spec: NetworkSpec = NetworkSpec(), seed: int = 0,
                 dtype=np.float32):
        self.spec = spec
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        s = spec
        H = s.lstm_units

        def param(name, arr):
            t = Tensor(arr, requires_grad=True)
            self.params[name] = t
            return t

        self.params: dict = {}
        k1 = s.conv1_kernel ** 2 * s.input_channels
        param("conv1_w", _orthogonal(rng, (k1, s.conv1_filters), np.sqrt(2), dtype)
              .reshape(s.conv1_kernel, s.conv1_kernel, s.input_channels,
                       s.conv1_filters))
        param("conv1_b", np.zeros(s.conv1_filters, dtype=dtype))
        k2 = s.conv2_kernel ** 2 * s.conv1_filters
        param("conv2_w", _orthogonal(rng, (k2, s.conv2_filters), np.sqrt(2), dtype)
              .reshape(s.conv2_kernel, s.conv2_kernel, s.conv1_filters,
                       s.conv2_filters))
        param("conv2_b", np.zeros(s.conv2_filters, dtype=dtype))
        param("fc_w", _orthogonal(rng, (s.flat_features, s.fc_units),
                                  np.sqrt(2), dtype))
        param("fc_b", np.zeros(s.fc_units, dtype=dtype))
        blocks = [_orthogonal(rng, (s.fc_units + H, H), 1.0, dtype)
                  for _ in range(4)]
        param("lstm_w", np.concatenate(blocks, axis=1))
        lstm_b = np.zeros(4 * H, dtype=dtype)
        lstm_b[H:2 * H] = 1.0        # forget-gate bias
        param("lstm_b", lstm_b)
        # zero-initialized output heads: uniform initial policy, zero value
        param("head_w", np.zeros((H, s.n_heads * s.actions_per_head), dtype=dtype))
        param("head_b", np.zeros(s.n_heads * s.actions_per_head, dtype=dtype))
        param("value_w", np.zeros((H, 1), dtype=dtype))
        param("value_b", np.zeros(1, dtype=dtype))

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_state(self, batch: int) -> RecurrentState:
        return RecurrentState.zeros(batch, self.spec.lstm_units, self.dtype)

    # ------------------------------------------------------------------

    def forward(self, obs, h, c):
        """One recurrent step.

        obs: Tensor or array (B, S, S, C) scaled to [0, 1]; h, c: Tensor or
        array (B, lstm_units). Returns (head_log_probs list, value, h', c').
        """
        p = self.params
        x = obs if isinstance(obs, Tensor) else Tensor(
            np.asarray(obs, dtype=self.dtype))
        h = h if isinstance(h, Tensor) else Tensor(np.asarray(h, dtype=self.dtype))
        c = c if isinstance(c, Tensor) else Tensor(np.asarray(c, dtype=self.dtype))

        z = ad.relu(ad.conv2d(x, p["conv1_w"], p["conv1_b"],
                              self.spec.conv1_stride))
        z = ad.relu(ad.conv2d(z, p["conv2_w"], p["conv2_b"],
                              self.spec.conv2_stride))
        z = ad.reshape(z, (z.shape[0], self.spec.flat_features))
        z = ad.relu(ad.affine(z, p["fc_w"], p["fc_b"]))

        H = self.spec.lstm_units
        gates = ad.affine(ad.concat_cols(z, h), p["lstm_w"], p["lstm_b"])
        i_g = ad.sigmoid(ad.narrow(gates, 0, H))
        f_g = ad.sigmoid(ad.narrow(gates, H, 2 * H))
        g_g = ad.tanh(ad.narrow(gates, 2 * H, 3 * H))
        o_g = ad.sigmoid(ad.narrow(gates, 3 * H, 4 * H))
        c_new = ad.add(ad.mul(f_g, c), ad.mul(i_g, g_g))
        h_new = ad.mul(o_g, ad.tanh(c_new))

        logits = ad.affine(h_new, p["head_w"], p["head_b"])
        value = ad.reshape(ad.affine(h_new, p["value_w"], p["value_b"]),
                           (h_new.shape[0],))
        if not (np.isfinite(logits.data).all() and np.isfinite(value.data).all()):
            raise NonFiniteActivation("non-finite logits or value")

        k = self.spec.actions_per_head
        head_log_probs = [ad.log_softmax(ad.narrow(logits, j * k, (j + 1) * k))
                          for j in range(self.spec.n_heads)]
        return head_log_probs, value, h_new, c_new

    def head_probs(self, obs, state: RecurrentState):
        """Probability simplexes per head (numpy), for inspection/sampling."""
        with ad.no_grad():
            logps, value, h, c = self.forward(obs, state.h, state.c)
        probs = [np.exp(lp.data) for lp in logps]
        return probs, value.data, RecurrentState(h.data, c.data)

    def act(self, obs, state: RecurrentState, rng):
        """Rollout helper: sample an action triple per batch row.

        Returns (indices (B,3), log_probs (B,), values (B,), new_state).
        Index j in {0,1,2} maps to steering quantum j-1.
        """
        probs, value, new_state = self.head_probs(obs, state)
        bsz = probs[0].shape[0]
        idx = np.empty((bsz, len(probs)), dtype=np.int64)
        logp = np.zeros(bsz, dtype=np.float64)
        u = rng.random((bsz, len(probs)))
        for j, pj in enumerate(probs):
            cum = np.cumsum(pj, axis=1)
            idx[:, j] = (u[:, j:j + 1] > cum).sum(axis=1)
            np.clip(idx[:, j], 0, pj.shape[1] - 1, out=idx[:, j])
            logp += np.log(pj[np.arange(bsz), idx[:, j]] + 1e-12)
        return idx, logp, value, new_state


def sample_action(head_probs, rng) -> tuple:
    """Single-sample convenience: (ActionTriple, log_prob)."""
    idx = []
    logp = 0.0
    for pj in head_probs:
        pj = np.asarray(pj, dtype=np.float64)
        if abs(pj.sum() - 1.0) > 1e-6 or (pj < 0).any():
            raise ValueError("head probabilities must form a simplex")
        j = int((rng.random() > np.cumsum(pj)).sum())
        j = min(j, len(pj) - 1)
        idx.append(j)
        logp += float(np.log(pj[j] + 1e-12))
    return ActionTriple(idx[0] - 1, idx[1] - 1, idx[2] - 1), logp


def indices_to_action(idx) -> ActionTriple:
    return ActionTriple(int(idx[0]) - 1, int(idx[1]) - 1, int(idx[2]) - 1)


# --------------------------------------------------------------------------
# checkpoint io: versioned binary, bit-exact round trip

def save_checkpoint(path, net: PolicyValueNet, optimizer_state: dict = None,
                    rng_state: dict = None, extra: dict = None):
    names = list(net.params.keys())
    header = {
        "spec": asdict(net.spec),
        "dtype": np.dtype(net.dtype).str,
        "params": [[n, list(net.params[n].data.shape)] for n in names],
        "rng_state": rng_state,
        "extra": extra or {},
        "optimizer": None,
    }
    blobs = [np.ascontiguousarray(net.params[n].data) for n in names]
    if optimizer_state is not None:
        header["optimizer"] = {"t": optimizer_state["t"],
                               "arrays": [[n, list(net.params[n].data.shape)]
                                          for n in names]}
        for key in ("m", "v"):
            blobs.extend(np.ascontiguousarray(optimizer_state[key][n])
                         for n in names)
    payload = json.dumps(header, default=_json_fallback).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(len(payload).to_bytes(4, "little"))
        f.write(payload)
        for b in blobs:
            f.write(b.tobytes())


def load_checkpoint(path):
    """Returns (net, optimizer_state | None, rng_state | None, extra)."""
    with open(path, "rb") as f:
        if f.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        n = int.from_bytes(f.read(4), "little")
        header = json.loads(f.read(n).decode())
        dtype = np.dtype(header["dtype"])
        spec = NetworkSpec(**header["spec"])
        net = PolicyValueNet(spec, seed=0, dtype=dtype.type)
        for name, shape in header["params"]:
            count = int(np.prod(shape))
            buf = f.read(count * dtype.itemsize)
            net.params[name].data = np.frombuffer(buf, dtype=dtype) \
                .reshape(shape).copy()
        opt = None
        if header["optimizer"] is not None:
            opt = {"t": header["optimizer"]["t"], "m": {}, "v": {}}
            for key in ("m", "v"):
                for name, shape in header["optimizer"]["arrays"]:
                    count = int(np.prod(shape))
                    buf = f.read(count * dtype.itemsize)
                    opt[key][name] = np.frombuffer(buf, dtype=dtype) \
                        .reshape(shape).copy()
    return net, opt, header.get("rng_state"), header.get("extra", {})


def _json_fallback(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"not JSON serializable: {type(o)}")
