"""Decoder-only toy transformer with an explicit residual-stream decomposition.

Every component writes an additive contribution ("output") into the residual
stream and reads the sum of all earlier contributions.  The forward engine
computes nodes in topological order and can rebuild each node's input from a
mixture of clean and corrupted upstream outputs (per-edge masks), replace node
outputs (node / neuron masks), or add a perturbation to a node's input
channel.  Gradients of a scalar metric with respect to every input channel
are computed by hand-written backpropagation in float64.

Random numbers come from numpy's Philox counter-based generator, which yields
the same stream on every platform for a given seed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, fields
from functools import cached_property
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .graph import ComputationalGraph, build_graph

INIT_SCALE = 0.02
RMS_EPS = 1e-6
_GELU_C = np.sqrt(2.0 / np.pi)

CHECKPOINT_MAGIC = b"CLABCKPT"
CHECKPOINT_VERSION = 1


class TokenError(ValueError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


@dataclass
class ModelParams:
    W_E: np.ndarray     # [vocab, d_model]
    W_pos: np.ndarray   # [max_positions, d_model]
    W_Q: np.ndarray     # [L, A, d_model, d_head]
    W_K: np.ndarray
    W_V: np.ndarray
    W_O: np.ndarray     # [L, A, d_head, d_model]
    W_in: np.ndarray    # [L, d_model, d_mlp]
    b_in: np.ndarray    # [L, d_mlp]
    W_out: np.ndarray   # [L, d_mlp, d_model]
    b_out: np.ndarray   # [L, d_model]
    W_U: np.ndarray     # [d_model, vocab]

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def blocks(self) -> list[tuple[str, np.ndarray]]:
        """Parameter blocks in checkpoint order."""
        return [(n, getattr(self, n)) for n in self.names()]

    def n_params(self) -> int:
        return sum(a.size for _, a in self.blocks())

    def copy(self) -> "ModelParams":
        return ModelParams(**{n: a.copy() for n, a in self.blocks()})

    def zeros_like(self) -> "ModelParams":
        return ModelParams(**{n: np.zeros_like(a) for n, a in self.blocks()})

    def equals(self, other: "ModelParams") -> bool:
        return all(np.array_equal(a, getattr(other, n)) for n, a in self.blocks())


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    c = config
    L, A, d, dh, dm, V = c.n_layers, c.n_heads, c.d_model, c.d_head, c.d_mlp, c.vocab_size
    return {
        "W_E": (V, d), "W_pos": (c.max_positions, d),
        "W_Q": (L, A, d, dh), "W_K": (L, A, d, dh), "W_V": (L, A, d, dh), "W_O": (L, A, dh, d),
        "W_in": (L, d, dm), "b_in": (L, dm), "W_out": (L, dm, d), "b_out": (L, d),
        "W_U": (d, V),
    }


def build_model(config: ModelConfig) -> ModelParams:
    rng = make_rng(config.seed)
    arrays = {}
    for name, shape in param_shapes(config).items():
        if name.startswith("b_"):
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = rng.normal(0.0, INIT_SCALE, size=shape)
    return ModelParams(**arrays)


# -- elementwise pieces ------------------------------------------------------

def _gelu_tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(_GELU_C * x * (1.0 + 0.044715 * x * x))


def gelu(x: np.ndarray, t: np.ndarray | None = None) -> np.ndarray:
    if t is None:
        t = _gelu_tanh(x)
    return 0.5 * x * (1.0 + t)


def gelu_grad(x: np.ndarray, t: np.ndarray | None = None) -> np.ndarray:
    if t is None:
        t = _gelu_tanh(x)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def _outer_sum(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Sum over all leading axes of a[..., i] * b[..., j]."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _outer_sum_heads(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-head _outer_sum for [A, B, T, *] arrays."""
    A = a.shape[0]
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b)
    return a.reshape(A, -1, a.shape[-1]).swapaxes(1, 2) @ b.reshape(A, -1, b.shape[-1])


def _rms(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return x / r, r


def _rms_back(g_y: np.ndarray, y: np.ndarray, r: np.ndarray) -> np.ndarray:
    return (g_y - y * np.mean(g_y * y, axis=-1, keepdims=True)) / r


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = x - x.max(axis=axis, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=axis, keepdims=True))


# -- metrics -----------------------------------------------------------------

METRIC_MODES = ("prob_diff", "logit_diff", "logit_diff_squared")


@dataclass(frozen=True)
class MetricBatch:
    """Per-example metric on final-position logits, in batched form.

    ``coeff[b]`` is the signed token weighting of example b.  For prob_diff it
    is +1 on the positive set and -1 on the negative set (the metric is the
    difference of set probabilities); for the logit modes it is +1/|pos| and
    -1/|neg| (difference of mean logits).  ``logit_diff_squared`` squares the
    logit difference; it exists for testbeds needing a curved metric.
    """

    mode: str
    coeff: np.ndarray
    scale: float = 1.0
    offset: float = 0.0

    def __post_init__(self) -> None:
        if self.mode not in METRIC_MODES:
            raise ValueError(f"unknown metric mode {self.mode!r}")

    def __call__(self, last_logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        c = self.coeff
        if self.mode == "prob_diff":
            p = softmax(last_logits)
            raw = np.einsum("bv,bv->b", p, c)
            grad = p * (c - raw[:, None])
        elif self.mode == "logit_diff":
            raw = np.einsum("bv,bv->b", last_logits, c)
            grad = np.array(c, dtype=float, copy=True)
        else:
            r = np.einsum("bv,bv->b", last_logits, c)
            raw = r * r
            grad = 2.0 * r[:, None] * c
        return self.offset + self.scale * raw, self.scale * grad

    def repeat(self, k: int) -> "MetricBatch":
        """Tile examples k times (block-major), matching np.tile on the batch axis."""
        return MetricBatch(self.mode, np.tile(self.coeff, (k, 1)), self.scale, self.offset)


# -- forward engine ------------------------------------------------------------

@dataclass
class Run:
    logits: np.ndarray            # [B, T, V]
    outputs: np.ndarray           # [n_out, B, T, d]
    tokens: np.ndarray
    final_input: np.ndarray       # [B, T, d], residual sum fed to the unembedding
    trace: dict | None = None


@dataclass(frozen=True)
class Model:
    """Parameters bundled with their config and graph layout."""

    config: ModelConfig
    params: ModelParams = field(compare=False)
    qkv_split: bool = True

    @cached_property
    def graph(self) -> ComputationalGraph:
        return build_graph(self.config, qkv_split=self.qkv_split)

    def check_tokens(self, tokens) -> np.ndarray:
        toks = np.asarray(tokens)
        if toks.ndim == 1:
            toks = toks[None, :]
        if toks.ndim != 2 or toks.shape[1] == 0:
            raise TokenError("tokens must be a non-empty [batch, positions] array")
        if not np.issubdtype(toks.dtype, np.integer):
            raise TokenError("token ids must be integers")
        if toks.min() < 0 or toks.max() >= self.config.vocab_size:
            raise TokenError(f"token id outside vocabulary of size {self.config.vocab_size}")
        if toks.shape[1] > self.config.max_positions:
            raise TokenError(f"sequence of length {toks.shape[1]} exceeds max_positions "
                             f"{self.config.max_positions}")
        return toks.astype(np.int64)

    def embed(self, tokens) -> np.ndarray:
        toks = self.check_tokens(tokens)
        return self.params.W_E[toks] + self.params.W_pos[: toks.shape[1]]

    def run(
        self,
        tokens,
        *,
        corrupted: np.ndarray | None = None,
        mix: np.ndarray | None = None,
        out_mix: np.ndarray | None = None,
        deltas: dict[int, np.ndarray] | None = None,
        input_override: np.ndarray | None = None,
        keep_trace: bool = False,
    ) -> Run:
        """Forward pass in topological node order.

        corrupted: [n_out, B, T, d] outputs of an independent corrupted run.
        mix: [n_channels, n_out] weights; a channel's input is
            sum_u corrupted[u] + mix[c, u] * (current[u] - corrupted[u])
            over its upstream prefix, so 1 keeps the live value and 0 patches in
            the corrupted one.
        out_mix: [n_out, d] (or [n_out, 1]) weights applied to node outputs the
            same way before any downstream node reads them.
        deltas: channel index -> array added to that channel's input.
        input_override: replaces the input node's output (embedding).
        """
        cfg, p, g = self.config, self.params, self.graph
        toks = self.check_tokens(tokens)
        B, T = toks.shape
        L, A, d = cfg.n_layers, cfg.n_heads, cfg.d_model
        if (mix is not None or out_mix is not None) and corrupted is None:
            raise ValueError("interventions need the corrupted run's outputs")
        if corrupted is not None and corrupted.shape != (g.n_out, B, T, d):
            raise ValueError("corrupted cache shape does not match this input")
        deltas = deltas or {}
        norm = cfg.normalization == "rms-internal"

        Z = np.empty((g.n_out, B, T, d))
        if input_override is not None:
            Z[0] = input_override
        else:
            Z[0] = p.W_E[toks] + p.W_pos[:T]
        self._mix_output(Z, 0, 1, corrupted, out_mix)
        cum_c = np.cumsum(corrupted, axis=0) if mix is not None else None
        resid = Z[0].copy()

        trace = {"layers": []} if keep_trace else None
        n_hc = len(g.head_channels)
        cbase = 0
        for layer in range(L):
            hs = 1 + layer * (A + 1)
            xs = []
            for j in range(n_hc):
                lo = cbase + j * A
                if mix is None:
                    x = np.broadcast_to(resid, (A, B, T, d))
                else:
                    x = cum_c[hs - 1] + np.einsum(
                        "ap,pbtd->abtd", mix[lo: lo + A, :hs], Z[:hs] - corrupted[:hs])
                x = self._add_deltas(x, deltas, lo, A)
                xs.append(x)
            if n_hc == 1:
                xs = xs * 3
            z_heads, htr = _heads_forward(p, layer, xs[0], xs[1], xs[2], norm, keep_trace)
            Z[hs: hs + A] = z_heads
            self._mix_output(Z, hs, hs + A, corrupted, out_mix)
            for h in range(A):
                resid = resid + Z[hs + h]

            ch = cbase + n_hc * A
            pm = hs + A
            if mix is None:
                x = resid
            else:
                x = cum_c[pm - 1] + np.tensordot(mix[ch, :pm], Z[:pm] - corrupted[:pm], axes=1)
            if ch in deltas:
                x = x + deltas[ch]
            z_mlp, mtr = _mlp_forward(p, layer, x, norm, keep_trace)
            Z[pm] = z_mlp
            self._mix_output(Z, pm, pm + 1, corrupted, out_mix)
            resid = resid + Z[pm]
            if keep_trace:
                trace["layers"].append((htr, mtr))
            cbase = ch + 1

        ch = cbase
        if mix is None:
            x = resid
        else:
            x = cum_c[-1] + np.tensordot(mix[ch], Z - corrupted, axes=1)
        if ch in deltas:
            x = x + deltas[ch]
        if norm:
            xn, r = _rms(x)
        else:
            xn, r = x, None
        logits = xn @ p.W_U
        if keep_trace:
            trace["final"] = (xn, r)
        return Run(logits=logits, outputs=Z, tokens=toks, final_input=x, trace=trace)

    @staticmethod
    def _mix_output(Z, lo, hi, corrupted, out_mix) -> None:
        if out_mix is None:
            return
        Z[lo:hi] = corrupted[lo:hi] + out_mix[lo:hi, None, None, :] * (Z[lo:hi] - corrupted[lo:hi])

    @staticmethod
    def _add_deltas(x, deltas, lo, A):
        hit = [i for i in range(A) if lo + i in deltas]
        if not hit:
            return x
        x = np.array(x, copy=True)
        for i in hit:
            x[i] = x[i] + deltas[lo + i]
        return x

    # -- backward --------------------------------------------------------------

    def backward(self, run: Run, g_logits: np.ndarray, want_params: bool = False):
        """Backpropagate d(objective)/d(logits) through a traced, un-mixed run.

        Returns (channel_grads [n_channels, B, T, d], ModelParams of grads or None).
        Channel gradients are with respect to each channel's summed residual
        input, before any internal normalization.
        """
        if run.trace is None:
            raise ValueError("backward needs a run made with keep_trace=True")
        cfg, p, g = self.config, self.params, self.graph
        L, A = cfg.n_layers, cfg.n_heads
        B, T = run.tokens.shape
        norm = cfg.normalization == "rms-internal"
        grads = p.zeros_like() if want_params else None
        G = np.zeros((len(g.channels), B, T, cfg.d_model))

        xn, r = run.trace["final"]
        g_xn = g_logits @ p.W_U.T
        if want_params:
            grads.W_U = _outer_sum(xn, g_logits)
        G[-1] = _rms_back(g_xn, xn, r) if norm else g_xn
        acc = G[-1].copy()

        n_hc = len(g.head_channels)
        per_layer = n_hc * A + 1
        for layer in reversed(range(L)):
            htr, mtr = run.trace["layers"][layer]
            cbase = layer * per_layer
            ch = cbase + n_hc * A
            G[ch] = _mlp_backward(p, layer, mtr, acc, norm, grads)
            acc = acc + G[ch]
            gq, gk, gv = _heads_backward(p, layer, htr, acc, norm, grads)
            if n_hc == 3:
                G[cbase: cbase + A] = gq
                G[cbase + A: cbase + 2 * A] = gk
                G[cbase + 2 * A: cbase + 3 * A] = gv
            else:
                G[cbase: cbase + A] = gq + gk + gv
            acc = acc + G[cbase: cbase + n_hc * A].sum(axis=0)

        if want_params:
            np.add.at(grads.W_E, run.tokens, acc)
            grads.W_pos[:T] = acc.sum(axis=0)
        return G, grads


def _heads_forward(p: ModelParams, layer: int, Xq, Xk, Xv, norm: bool, keep: bool):
    WQ, WK, WV, WO = p.W_Q[layer], p.W_K[layer], p.W_V[layer], p.W_O[layer]
    dh = WQ.shape[-1]
    T = Xq.shape[2]
    if norm:
        xq, rq = _rms(Xq)
        xk, rk = _rms(Xk)
        xv, rv = _rms(Xv)
    else:
        xq, xk, xv = Xq, Xk, Xv
        rq = rk = rv = None
    q = xq @ WQ[:, None]
    k = xk @ WK[:, None]
    v = xv @ WV[:, None]
    scores = q @ k.swapaxes(-1, -2) / np.sqrt(dh)
    causal = np.tril(np.ones((T, T), dtype=bool))
    scores = np.where(causal, scores, -np.inf)
    pattern = softmax(scores)
    o = pattern @ v
    z = o @ WO[:, None]
    tr = (xq, xk, xv, rq, rk, rv, q, k, v, pattern, o) if keep else None
    return z, tr


def _heads_backward(p: ModelParams, layer: int, tr, g_out: np.ndarray, norm: bool, grads):
    WQ, WK, WV, WO = p.W_Q[layer], p.W_K[layer], p.W_V[layer], p.W_O[layer]
    xq, xk, xv, rq, rk, rv, q, k, v, pattern, o = tr
    dh = WQ.shape[-1]
    A = WQ.shape[0]
    g_z = np.broadcast_to(g_out, (A,) + g_out.shape)
    g_o = g_z @ WO.swapaxes(-1, -2)[:, None]
    g_pat = g_o @ v.swapaxes(-1, -2)
    g_v = pattern.swapaxes(-1, -2) @ g_o
    g_scores = pattern * (g_pat - np.sum(g_pat * pattern, axis=-1, keepdims=True))
    g_scores /= np.sqrt(dh)
    g_q = g_scores @ k
    g_k = g_scores.swapaxes(-1, -2) @ q
    if grads is not None:
        grads.W_O[layer] = _outer_sum_heads(o, g_z)
        grads.W_Q[layer] = _outer_sum_heads(xq, g_q)
        grads.W_K[layer] = _outer_sum_heads(xk, g_k)
        grads.W_V[layer] = _outer_sum_heads(xv, g_v)
    gxq = g_q @ WQ.swapaxes(-1, -2)[:, None]
    gxk = g_k @ WK.swapaxes(-1, -2)[:, None]
    gxv = g_v @ WV.swapaxes(-1, -2)[:, None]
    if norm:
        gxq = _rms_back(gxq, xq, rq)
        gxk = _rms_back(gxk, xk, rk)
        gxv = _rms_back(gxv, xv, rv)
    return gxq, gxk, gxv


def _mlp_forward(p: ModelParams, layer: int, x: np.ndarray, norm: bool, keep: bool):
    if norm:
        xn, r = _rms(x)
    else:
        xn, r = x, None
    pre = xn @ p.W_in[layer] + p.b_in[layer]
    t = _gelu_tanh(pre)
    hidden = gelu(pre, t)
    z = hidden @ p.W_out[layer] + p.b_out[layer]
    return z, ((xn, r, pre, t, hidden) if keep else None)


def _mlp_backward(p: ModelParams, layer: int, tr, g_z: np.ndarray, norm: bool, grads):
    xn, r, pre, t, hidden = tr
    g_hidden = g_z @ p.W_out[layer].T
    g_pre = g_hidden * gelu_grad(pre, t)
    if grads is not None:
        grads.W_out[layer] = _outer_sum(hidden, g_z)
        grads.b_out[layer] = g_z.sum(axis=(0, 1))
        grads.W_in[layer] = _outer_sum(xn, g_pre)
        grads.b_in[layer] = g_pre.sum(axis=(0, 1))
    g_xn = g_pre @ p.W_in[layer].T
    return _rms_back(g_xn, xn, r) if norm else g_xn


# -- caches and gradients ----------------------------------------------------------

@dataclass(frozen=True)
class ActivationCache:
    """Clean and corrupted node outputs for a batch, plus clean metric gradients.

    ``grads[c]`` is d(metric)/d(input of channel c) for each example, with the
    metric read at the final position.  Arrays are read-only.
    """

    clean: np.ndarray
    corrupted: np.ndarray
    clean_logits: np.ndarray
    corrupted_logits: np.ndarray
    grads: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.clean.shape != self.corrupted.shape:
            raise ValueError("clean and corrupted caches differ in shape (token lengths differ?)")
        for name in ("clean", "corrupted", "clean_logits", "corrupted_logits", "grads"):
            arr = getattr(self, name)
            if arr is not None:
                arr.setflags(write=False)

    @property
    def n_examples(self) -> int:
        return self.clean.shape[1]


def metric_grad_run(model: Model, tokens, metric: MetricBatch, input_override=None):
    """Clean (or input-overridden) run; returns (run, per-example metric, channel grads)."""
    run = model.run(tokens, input_override=input_override, keep_trace=True)
    values, g_last = metric(run.logits[:, -1, :])
    g_logits = np.zeros_like(run.logits)
    g_logits[:, -1, :] = g_last
    G, _ = model.backward(run, g_logits)
    return run, values, G


def build_cache(model: Model, clean_tokens, corrupted_tokens, metric: MetricBatch | None = None
                ) -> ActivationCache:
    clean_tokens = model.check_tokens(clean_tokens)
    corrupted_tokens = model.check_tokens(corrupted_tokens)
    if clean_tokens.shape != corrupted_tokens.shape:
        raise ValueError("clean and corrupted inputs must have the same length in tokens")
    corr = model.run(corrupted_tokens)
    if metric is None:
        clean = model.run(clean_tokens)
        grads = None
    else:
        clean, _, grads = metric_grad_run(model, clean_tokens, metric)
    return ActivationCache(clean.outputs, corr.outputs, clean.logits, corr.logits, grads)


# -- functional surface ---------------------------------------------------------------

def forward_with_cache(params: ModelParams, config: ModelConfig, tokens):
    """Logits at every position plus the per-node outputs of one run."""
    run = Model(config, params).run(tokens)
    return run.logits, run.outputs


def metric_gradients(params: ModelParams, config: ModelConfig, tokens, metric: MetricBatch,
                     qkv_split: bool = True) -> np.ndarray:
    """d(metric at final position)/d(channel input) for every channel of the graph."""
    if np.any(metric.coeff) and metric.coeff.shape[-1] != config.vocab_size:
        raise TokenError("metric references tokens outside the vocabulary")
    _, _, G = metric_grad_run(Model(config, params, qkv_split), tokens, metric)
    return G


def output_grads(graph: ComputationalGraph, channel_grads: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. each node's output: sum of the grads of every channel reading it."""
    n_out = graph.n_out
    by_prefix = np.zeros((n_out + 1,) + channel_grads.shape[1:])
    np.add.at(by_prefix, graph.channel_prefix, channel_grads)
    # node u is read by every channel whose prefix exceeds u
    suffix = np.cumsum(by_prefix[::-1], axis=0)[::-1]
    return suffix[1:]


# -- checkpoints ---------------------------------------------------------------------
# Layout: 8-byte magic, uint32 version, uint32 header length, UTF-8 JSON header
# {"config": {...}, "blocks": [[name, shape], ...]}, then each block as
# little-endian float64 in C order, in ModelParams field order.

def save_checkpoint(path, config: ModelConfig, params: ModelParams) -> None:
    header = json.dumps({
        "config": config.to_dict(),
        "blocks": [[n, list(a.shape)] for n, a in params.blocks()],
    }, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for _, arr in params.blocks():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelConfig, ModelParams]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16: 16 + hlen])
    config = ModelConfig.from_dict(header["config"])
    expected = param_shapes(config)
    offset = 16 + hlen
    arrays = {}
    for name, shape in header["blocks"]:
        if tuple(shape) != expected.get(name):
            raise ValueError(f"{path}: block {name} has shape {shape}, expected {expected.get(name)}")
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += 8 * count
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return config, ModelParams(**arrays)
