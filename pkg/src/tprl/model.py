"""Transformer encoder/decoder policy that emits Gaussian feature tokens.

A window ``x`` (l x d) is encoded once; the decoder then produces ``s``
diagonal-Gaussian token distributions under a causal mask. All forward
functions accept a single window ``(l, d)`` or a stack ``(N, l, d)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numkit as nk
from .numkit import Node

CHECKPOINT_VERSION = 1
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ModelConfig:
    l: int = 75
    d: int = 6
    d_model: int = 32
    n_heads: int = 2
    n_layers_enc: int = 1
    n_layers_dec: int = 1
    d_ff: int = 64
    s: int = 5
    k: int = 8
    logsig_min: float = -5.0
    logsig_max: float = 2.0

    def __post_init__(self):
        for name in ("l", "d", "d_model", "n_heads", "d_ff", "s", "k"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1")
        if self.n_layers_enc < 0 or self.n_layers_dec < 0:
            raise ValueError("layer counts must be >= 0")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.d_model % 2:
            raise ValueError("d_model must be even for the sinusoidal encoding")
        if not self.logsig_min < self.logsig_max:
            raise ValueError("logsig_min must be < logsig_max")


@dataclass
class PolicyNetwork:
    config: ModelConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def nodes(self) -> dict[str, Node]:
        """Fresh leaf nodes over the current parameters."""
        return {name: Node(v) for name, v in self.params.items()}

    def copy(self) -> "PolicyNetwork":
        return PolicyNetwork(self.config, {k: v.copy() for k, v in self.params.items()})


@dataclass
class EncoderState:
    h: np.ndarray


@dataclass
class Episode:
    tokens: np.ndarray  # (..., s, k)
    mus: np.ndarray
    logsigs: np.ndarray
    logprob_per_token: np.ndarray  # (..., s)


# -- fixed pieces -----------------------------------------------------------------


def positional_encoding(l: int, d_model: int) -> np.ndarray:
    """Sinusoidal table for positions t = 1..l (row t-1)."""
    if d_model % 2:
        raise ValueError("d_model must be even")
    t = np.arange(1, l + 1, dtype=np.float64)[:, None]
    j = np.arange(d_model)
    angle = t / np.power(10000.0, 2 * (j // 2) / d_model)
    return np.where(j % 2 == 0, np.sin(angle), np.cos(angle))


def causal_mask(s: int) -> np.ndarray:
    """Additive mask: position p may attend to q only when q <= p."""
    if s < 1:
        raise ValueError("s must be >= 1")
    m = np.zeros((s, s))
    m[np.triu_indices(s, k=1)] = -np.inf
    return m


def attention(q: Node, k: Node, v: Node, mask: np.ndarray | None = None) -> Node:
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention: shapes Q{q.shape} K{k.shape} V{v.shape}")
    scores = nk.scale(nk.matmul(q, nk.transpose(k)), 1.0 / math.sqrt(q.shape[-1]))
    return nk.matmul(nk.softmax_rows(scores, mask), v)


# -- parameters ---------------------------------------------------------------------


def _attn_shapes(prefix: str, dm: int) -> dict[str, tuple[int, int]]:
    return {f"{prefix}.{w}": (dm, dm) for w in ("wq", "wk", "wv", "wo")}


def _norm_shapes(prefix: str, dm: int) -> dict[str, tuple[int, int]]:
    return {f"{prefix}.gain": (1, dm), f"{prefix}.bias": (1, dm)}


def _ffn_shapes(prefix: str, dm: int, dff: int) -> dict[str, tuple[int, int]]:
    return {f"{prefix}.w1": (dm, dff), f"{prefix}.b1": (1, dff),
            f"{prefix}.w2": (dff, dm), f"{prefix}.b2": (1, dm)}


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    dm = cfg.d_model
    shapes = {"enc.in.w": (cfg.d, dm), "enc.in.b": (1, dm)}
    for i in range(cfg.n_layers_enc):
        p = f"enc.{i}"
        shapes |= _norm_shapes(f"{p}.ln1", dm) | _attn_shapes(f"{p}.self", dm)
        shapes |= _norm_shapes(f"{p}.ln2", dm) | _ffn_shapes(f"{p}.ffn", dm, cfg.d_ff)
    shapes |= _norm_shapes("enc.out", dm)
    shapes |= {"dec.start": (1, cfg.k), "dec.in.w": (cfg.k, dm), "dec.in.b": (1, dm)}
    for i in range(cfg.n_layers_dec):
        p = f"dec.{i}"
        shapes |= _norm_shapes(f"{p}.ln1", dm) | _attn_shapes(f"{p}.self", dm)
        shapes |= _norm_shapes(f"{p}.ln2", dm) | _attn_shapes(f"{p}.cross", dm)
        shapes |= _norm_shapes(f"{p}.ln3", dm) | _ffn_shapes(f"{p}.ffn", dm, cfg.d_ff)
    shapes |= _norm_shapes("dec.out", dm)
    shapes |= {"head.mu.w": (dm, cfg.k), "head.mu.b": (1, cfg.k),
               "head.logsig.w": (dm, cfg.k), "head.logsig.b": (1, cfg.k)}
    return shapes


def init_policy(cfg: ModelConfig, rng: np.random.Generator) -> PolicyNetwork:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit norm gains."""
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".gain"):
            params[name] = np.ones(shape)
        elif name.endswith((".bias", ".b", ".b1", ".b2")):
            params[name] = np.zeros(shape)
        elif name == "dec.start":
            params[name] = rng.uniform(-1.0, 1.0, size=shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
    return PolicyNetwork(cfg, params)


# -- blocks ----------------------------------------------------------------------------


def _ln(p: dict[str, Node], prefix: str, x: Node) -> Node:
    return nk.layer_norm(x, p[f"{prefix}.gain"], p[f"{prefix}.bias"], 1e-5)


def _mha(p: dict[str, Node], prefix: str, xq: Node, xkv: Node, n_heads: int,
         mask: np.ndarray | None = None) -> Node:
    q = xq @ p[f"{prefix}.wq"]
    k = xkv @ p[f"{prefix}.wk"]
    v = xkv @ p[f"{prefix}.wv"]
    dh = q.shape[-1] // n_heads
    heads = [
        attention(nk.slice_cols(q, i * dh, (i + 1) * dh), nk.slice_cols(k, i * dh, (i + 1) * dh),
                  nk.slice_cols(v, i * dh, (i + 1) * dh), mask)
        for i in range(n_heads)
    ]
    out = heads[0] if n_heads == 1 else nk.concat_cols(heads)
    return out @ p[f"{prefix}.wo"]


def _ffn(p: dict[str, Node], prefix: str, x: Node) -> Node:
    hidden = nk.relu(x @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"])
    return hidden @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"]


def _check_input(cfg: ModelConfig, x: np.ndarray) -> None:
    if x.ndim not in (2, 3) or x.shape[-2:] != (cfg.l, cfg.d):
        raise ValueError(f"input shape {x.shape} does not match (l, d) = ({cfg.l}, {cfg.d})")


def encode_graph(net: PolicyNetwork, p: dict[str, Node], x) -> Node:
    cfg = net.config
    xv = x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)
    _check_input(cfg, xv)
    e = (x if isinstance(x, Node) else nk.const(xv)) @ p["enc.in.w"] + p["enc.in.b"]
    e = e + positional_encoding(cfg.l, cfg.d_model)
    for i in range(cfg.n_layers_enc):
        pre = f"enc.{i}"
        y = _ln(p, f"{pre}.ln1", e)
        e = e + _mha(p, f"{pre}.self", y, y, cfg.n_heads)
        e = e + _ffn(p, f"{pre}.ffn", _ln(p, f"{pre}.ln2", e))
    return _ln(p, "enc.out", e)


def decode_graph(net: PolicyNetwork, p: dict[str, Node], h: Node, tokens) -> tuple[Node, Node]:
    """Teacher-forced decoder pass.

    Row j of the outputs is conditioned on the start token and tokens[:j]
    only. ``tokens`` is (..., s, k); its last row never feeds any output.
    """
    cfg = net.config
    tv = tokens.value if isinstance(tokens, Node) else np.asarray(tokens, dtype=np.float64)
    if tv.shape[-2:] != (cfg.s, cfg.k):
        raise ValueError(f"tokens shape {tv.shape} does not match (s, k) = ({cfg.s}, {cfg.k})")
    tok = tokens if isinstance(tokens, Node) else nk.const(tv)
    if cfg.s > 1:
        inputs = nk.concat_rows([p["dec.start"], nk.rows(tok, 0, cfg.s - 1)])
    else:
        inputs = p["dec.start"]
    y = inputs @ p["dec.in.w"] + p["dec.in.b"] + positional_encoding(cfg.s, cfg.d_model)
    mask = causal_mask(cfg.s)
    for i in range(cfg.n_layers_dec):
        pre = f"dec.{i}"
        z = _ln(p, f"{pre}.ln1", y)
        y = y + _mha(p, f"{pre}.self", z, z, cfg.n_heads, mask)
        y = y + _mha(p, f"{pre}.cross", _ln(p, f"{pre}.ln2", y), h, cfg.n_heads)
        y = y + _ffn(p, f"{pre}.ffn", _ln(p, f"{pre}.ln3", y))
    y = _ln(p, "dec.out", y)
    mu = y @ p["head.mu.w"] + p["head.mu.b"]
    raw = y @ p["head.logsig.w"] + p["head.logsig.b"]
    half = 0.5 * (cfg.logsig_max - cfg.logsig_min)
    logsig = nk.scale(nk.tanh(raw), half) + (cfg.logsig_min + half)
    return mu, logsig


def gaussian_logprob(z, mu: Node, logsig: Node) -> Node:
    """Per-token diagonal Gaussian log-density, shape (..., s, 1)."""
    k = mu.shape[-1]
    t = nk.mul(nk.sub(z, mu), nk.exp(nk.scale(logsig, -1.0)))
    quad = nk.scale(nk.sum_rows(nk.mul(t, t)), -0.5)
    return nk.sub(quad, nk.sum_rows(logsig)) - 0.5 * k * LOG_2PI


# -- public operations ----------------------------------------------------------------------


def encode(net: PolicyNetwork, x) -> EncoderState:
    with nk.no_grad():
        p = {k: nk.const(v) for k, v in net.params.items()}
        return EncoderState(encode_graph(net, p, x).value)


def decode_step(net: PolicyNetwork, h: EncoderState, prefix) -> tuple[np.ndarray, np.ndarray]:
    """(mu_j, logsig_j) for the next token given ``prefix`` of j-1 tokens."""
    cfg = net.config
    prefix = np.asarray(prefix, dtype=np.float64).reshape(-1, cfg.k)
    j = prefix.shape[0]
    if j >= cfg.s:
        raise ValueError(f"prefix length {j} must be < s = {cfg.s}")
    tokens = np.zeros((cfg.s, cfg.k))
    tokens[:j] = prefix
    with nk.no_grad():
        p = {k: nk.const(v) for k, v in net.params.items()}
        mu, ls = decode_graph(net, p, nk.const(h.h), tokens)
    return mu.value[j].copy(), ls.value[j].copy()


def _rollout(net: PolicyNetwork, x, noise: np.ndarray | None) -> Episode:
    cfg = net.config
    x = np.asarray(x, dtype=np.float64)
    _check_input(cfg, x)
    lead = x.shape[:-2]
    with nk.no_grad():
        p = {k: nk.const(v) for k, v in net.params.items()}
        h = encode_graph(net, p, x)
        tokens = np.zeros(lead + (cfg.s, cfg.k))
        mus = np.zeros_like(tokens)
        logsigs = np.zeros_like(tokens)
        for j in range(cfg.s):
            mu, ls = decode_graph(net, p, h, tokens)
            mus[..., j, :] = mu.value[..., j, :]
            logsigs[..., j, :] = ls.value[..., j, :]
            if noise is None:
                tokens[..., j, :] = mus[..., j, :]
            else:
                tokens[..., j, :] = mus[..., j, :] + np.exp(logsigs[..., j, :]) * noise[..., j, :]
        lp = gaussian_logprob(nk.const(tokens), nk.const(mus), nk.const(logsigs))
    return Episode(tokens, mus, logsigs, lp.value[..., 0])


def rollout_stochastic(net: PolicyNetwork, x, rng: np.random.Generator) -> Episode:
    x = np.asarray(x, dtype=np.float64)
    noise = rng.standard_normal(x.shape[:-2] + (net.config.s, net.config.k))
    return _rollout(net, x, noise)


def rollout_with_noise(net: PolicyNetwork, x, noise) -> Episode:
    """Stochastic rollout driven by explicit standard-normal draws of shape (..., s, k)."""
    x = np.asarray(x, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    want = x.shape[:-2] + (net.config.s, net.config.k)
    if noise.shape != want:
        raise ValueError(f"noise shape {noise.shape} does not match {want}")
    return _rollout(net, x, noise)


def rollout_deterministic(net: PolicyNetwork, x) -> np.ndarray:
    """Feature sequence(s) with every token set to its mean."""
    return _rollout(net, x, None).tokens


def log_prob_graph(net: PolicyNetwork, p: dict[str, Node], x, tokens) -> Node:
    h = encode_graph(net, p, x)
    mu, logsig = decode_graph(net, p, h, tokens)
    return gaussian_logprob(np.asarray(tokens, dtype=np.float64), mu, logsig)


def log_prob(net: PolicyNetwork, x, tokens) -> np.ndarray:
    """Teacher-forced per-token log-densities, shape (..., s)."""
    with nk.no_grad():
        p = {k: nk.const(v) for k, v in net.params.items()}
        return log_prob_graph(net, p, x, tokens).value[..., 0]


# -- checkpoints ------------------------------------------------------------------------------


def policy_to_dict(net: PolicyNetwork) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "config": asdict(net.config),
        "params": {name: net.params[name].tolist() for name in sorted(net.params)},
    }


def policy_from_dict(blob: dict) -> PolicyNetwork:
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('version')}")
    cfg = ModelConfig(**blob["config"])
    shapes = parameter_shapes(cfg)
    params = {}
    for name, shape in shapes.items():
        arr = np.array(blob["params"][name], dtype=np.float64)
        if arr.shape != shape:
            raise ValueError(f"checkpoint parameter {name} has shape {arr.shape}, expected {shape}")
        params[name] = arr
    if set(blob["params"]) != set(shapes):
        raise ValueError("checkpoint parameter names do not match the config")
    return PolicyNetwork(cfg, params)


def save_policy(net: PolicyNetwork, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(policy_to_dict(net), fh)


def load_policy(path) -> PolicyNetwork:
    with open(path, encoding="utf-8") as fh:
        return policy_from_dict(json.load(fh))
