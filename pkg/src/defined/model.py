"""Decoder-only transformer that classifies the symbol behind each received
vector given the interleaved context ``y_1, x_1, ..., y_{t-1}, x_{t-1}, y_t``.

Both token kinds are real feature vectors: a y token is ``[Re y, Im y]``
(``2 n_r`` values) and an x token is ``[Re s, Im s]`` for the scaled
transmit vector ``s`` (``2 n_t`` values). Using coordinates rather than
class one-hots means a fed-back decision looks exactly like a pilot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .channel import build_constellation
from .config import CLASS_COUNTS, ModelConfig
from .nn import ops
from .nn.tensor import Tensor


class SequenceTooLong(ValueError):
    pass


def y_features(y: np.ndarray) -> np.ndarray:
    return np.concatenate([y.real, y.imag], axis=-1).astype(np.float32)


def x_features(idx: np.ndarray, scheme: str, n_t: int) -> np.ndarray:
    s = build_constellation(scheme).coords(idx, n_t)
    return np.concatenate([s.real, s.imag], axis=-1).astype(np.float32)


@dataclass
class TokenBatch:
    """A batch of prompts ending on a y token.

    ``y`` is ``(B, P, 2 n_r)`` and ``x`` is ``(B, P-1, 2 n_t)``; the
    interleaved length is ``2P - 1``.
    """

    y: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        if self.y.ndim != 3 or self.x.ndim != 3 or self.x.shape[1] != self.y.shape[1] - 1:
            raise ValueError(f"malformed token batch: y {self.y.shape}, x {self.x.shape}")

    @property
    def n_positions(self) -> int:
        return self.y.shape[1]

    def __len__(self) -> int:
        return 2 * self.y.shape[1] - 1

    @classmethod
    def from_frames(cls, frames, P: int | None = None) -> TokenBatch:
        """Clean prompt over the first ``P`` slots of each frame."""
        P = frames.T if P is None else P
        return cls(y_features(frames.y[:, :P]), x_features(frames.x[:, : P - 1], frames.scheme, frames.n_t))


def interleave(y: np.ndarray, x: np.ndarray, with_bias: bool = False) -> np.ndarray:
    """Feature matrix ``(B, 2P-1, 2n_r + 2n_t [+2])`` with y at even slots.

    Each row carries its token's features in that token's own column block
    and zeros elsewhere, so one matrix product applies ``W_y`` to y tokens
    and ``W_x`` to x tokens. The two optional trailing columns are token
    type indicators that pick up the per-type biases.
    """
    B, P, dy = y.shape
    dx = x.shape[2]
    L = 2 * P - 1
    F = np.zeros((B, L, dy + dx + (2 if with_bias else 0)), dtype=np.float32)
    F[:, 0::2, :dy] = y
    F[:, 1::2, dy : dy + dx] = x
    if with_bias:
        F[:, 0::2, dy + dx] = 1.0
        F[:, 1::2, dy + dx + 1] = 1.0
    return F


def init_params(cfg: ModelConfig, seed: int = 0) -> nn.ParamStore:
    rng = np.random.default_rng(seed)
    d, L = cfg.d_e, cfg.n_layers
    std = 0.02
    resid_std = std / np.sqrt(2 * L)

    def normal(*shape, s=std):
        return (rng.standard_normal(shape) * s).astype(np.float32)

    def zeros(*shape):
        return np.zeros(shape, dtype=np.float32)

    def ones(*shape):
        return np.ones(shape, dtype=np.float32)

    store = nn.ParamStore()
    store.add("embed.W_y", normal(2 * cfg.n_r, d))
    store.add("embed.W_x", normal(2 * cfg.n_t, d))
    if cfg.embed_bias:
        store.add("embed.b_y", zeros(d))
        store.add("embed.b_x", zeros(d))
    store.add("embed.pos", normal(cfg.context_window, d))
    for i in range(L):
        p = f"h{i}."
        store.add(p + "ln1.g", ones(d))
        store.add(p + "ln1.b", zeros(d))
        store.add(p + "attn.W_qkv", normal(d, 3 * d))
        store.add(p + "attn.b_qkv", zeros(3 * d))
        store.add(p + "attn.W_out", normal(d, d, s=resid_std))
        store.add(p + "attn.b_out", zeros(d))
        store.add(p + "ln2.g", ones(d))
        store.add(p + "ln2.b", zeros(d))
        store.add(p + "mlp.W_fc", normal(d, 4 * d))
        store.add(p + "mlp.b_fc", zeros(4 * d))
        store.add(p + "mlp.W_out", normal(4 * d, d, s=resid_std))
        store.add(p + "mlp.b_out", zeros(d))
    store.add("ln_f.g", ones(d))
    store.add("ln_f.b", zeros(d))
    store.add("head.W", normal(d, cfg.n_t * cfg.class_count))
    store.add("head.b", zeros(cfg.n_t * cfg.class_count))
    return store


def expected_param_count(cfg: ModelConfig) -> int:
    d, L = cfg.d_e, cfg.n_layers
    per_layer = 4 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * 4 * d + 4 * d) + (4 * d * d + d)
    embed = 2 * (cfg.n_r + cfg.n_t) * d + cfg.context_window * d + (2 * d if cfg.embed_bias else 0)
    head = d * cfg.n_t * cfg.class_count + cfg.n_t * cfg.class_count
    return embed + L * per_layer + 2 * d + head


class Transformer:
    """Pre-norm GPT-style decoder with a per-antenna classification head."""

    def __init__(self, cfg: ModelConfig, params: nn.ParamStore | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)
        self._mask_cache: dict[int, np.ndarray] = {}

    # -- helpers -----------------------------------------------------------
    def _embed_weight(self) -> Tensor:
        p = self.params
        parts = [p["embed.W_y"], p["embed.W_x"]]
        if self.cfg.embed_bias:
            parts += [ops.reshape(p["embed.b_y"], (1, -1)), ops.reshape(p["embed.b_x"], (1, -1))]
        return ops.concat(parts, axis=0)

    def _mask(self, L: int) -> np.ndarray:
        if L not in self._mask_cache:
            self._mask_cache[L] = ops.causal_mask(L)
        return self._mask_cache[L]

    def _check(self, tokens: TokenBatch):
        if len(tokens) > self.cfg.context_window:
            raise SequenceTooLong(f"sequence of {len(tokens)} tokens exceeds window {self.cfg.context_window}")
        if tokens.y.shape[2] != 2 * self.cfg.n_r or tokens.x.shape[2] != 2 * self.cfg.n_t:
            raise nn.ShapeMismatch("token features", tokens.y.shape, tokens.x.shape)

    # -- differentiable path -------------------------------------------------
    def embed(self, tokens: TokenBatch) -> Tensor:
        self._check(tokens)
        F = interleave(tokens.y, tokens.x, self.cfg.embed_bias)
        h = ops.matmul(F, self._embed_weight())
        return ops.add(h, ops.getitem(self.params["embed.pos"], slice(0, F.shape[1])))

    def _block(self, h: Tensor, i: int) -> Tensor:
        p, cfg = self.params, self.cfg
        pre = f"h{i}."
        B, L, d = h.shape
        H = cfg.n_heads
        a = ops.layer_norm(h, p[pre + "ln1.g"], p[pre + "ln1.b"])
        qkv = ops.linear(a, p[pre + "attn.W_qkv"], p[pre + "attn.b_qkv"])
        qkv = ops.transpose(ops.reshape(qkv, (B, L, 3, H, d // H)), (2, 0, 3, 1, 4))
        att = ops.scaled_dot_attention(qkv[0], qkv[1], qkv[2], self._mask(L))
        att = ops.reshape(ops.transpose(att, (0, 2, 1, 3)), (B, L, d))
        h = ops.add(h, ops.linear(att, p[pre + "attn.W_out"], p[pre + "attn.b_out"]))
        m = ops.layer_norm(h, p[pre + "ln2.g"], p[pre + "ln2.b"])
        m = ops.gelu(ops.linear(m, p[pre + "mlp.W_fc"], p[pre + "mlp.b_fc"]))
        return ops.add(h, ops.linear(m, p[pre + "mlp.W_out"], p[pre + "mlp.b_out"]))

    def forward(self, tokens: TokenBatch) -> Tensor:
        """Logits ``(B, P, n_t, C)`` at every y position."""
        h = self.embed(tokens)
        for i in range(self.cfg.n_layers):
            h = self._block(h, i)
        h = ops.getitem(h, (slice(None), slice(0, None, 2)))
        h = ops.layer_norm(h, self.params["ln_f.g"], self.params["ln_f.b"])
        out = ops.linear(h, self.params["head.W"], self.params["head.b"])
        B, P = out.shape[:2]
        return ops.reshape(out, (B, P, self.cfg.n_t, self.cfg.class_count))

    __call__ = forward

    def logits(self, tokens: TokenBatch) -> np.ndarray:
        with nn.no_grad():
            return self.forward(tokens).data

    def decoder(self, batch_size: int) -> IncrementalDecoder:
        return IncrementalDecoder(self, batch_size)

    def n_params(self) -> int:
        return self.params.count()


def _ln(x, g, b, eps=1e-5):
    x64 = x.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    xc = x64 - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return (xc / np.sqrt(var + eps)).astype(np.float32) * g + b


class IncrementalDecoder:
    """Gradient-free forward pass that caches keys and values, so a prompt
    can be extended token by token at the cost of the new tokens only.

    Used for decision-feedback rollouts; :meth:`Transformer.forward` on the
    full sequence gives the same logits up to float rounding.
    """

    def __init__(self, model: Transformer, batch_size: int):
        cfg = model.cfg
        self.model = model
        self.len = 0
        dh = cfg.d_e // cfg.n_heads
        shape = (batch_size, cfg.n_heads, cfg.context_window, dh)
        self.k = [np.zeros(shape, np.float32) for _ in range(cfg.n_layers)]
        self.v = [np.zeros(shape, np.float32) for _ in range(cfg.n_layers)]
        self.W = model._embed_weight().data

    def feed(self, F: np.ndarray) -> np.ndarray:
        """Append feature rows ``F`` (B, n, D); returns final hidden (B, n, d)."""
        cfg, p = self.model.cfg, self.model.params
        B, n, _ = F.shape
        a0, a1 = self.len, self.len + n
        if a1 > cfg.context_window:
            raise SequenceTooLong(f"{a1} tokens exceed window {cfg.context_window}")
        h = F @ self.W + p["embed.pos"].data[a0:a1]
        H, d = cfg.n_heads, cfg.d_e
        dh = d // H
        mask = ops.causal_mask(a1)[a0:a1]
        for i in range(cfg.n_layers):
            pre = f"h{i}."
            a = _ln(h, p[pre + "ln1.g"].data, p[pre + "ln1.b"].data)
            qkv = (a @ p[pre + "attn.W_qkv"].data + p[pre + "attn.b_qkv"].data).reshape(B, n, 3, H, dh)
            qkv = qkv.transpose(2, 0, 3, 1, 4)
            self.k[i][:, :, a0:a1] = qkv[1]
            self.v[i][:, :, a0:a1] = qkv[2]
            w = ops.attention_weights(qkv[0], self.k[i][:, :, :a1], mask)
            att = (w @ self.v[i][:, :, :a1]).transpose(0, 2, 1, 3).reshape(B, n, d)
            h = h + att @ p[pre + "attn.W_out"].data + p[pre + "attn.b_out"].data
            m = _ln(h, p[pre + "ln2.g"].data, p[pre + "ln2.b"].data)
            m = m @ p[pre + "mlp.W_fc"].data + p[pre + "mlp.b_fc"].data
            m = 0.5 * m * (1.0 + np.tanh(ops._GELU_C * (m + 0.044715 * (m * m * m))))
            h = h + m @ p[pre + "mlp.W_out"].data + p[pre + "mlp.b_out"].data
        self.len = a1
        return h

    def head(self, h: np.ndarray) -> np.ndarray:
        p, cfg = self.model.params, self.model.cfg
        h = _ln(h, p["ln_f.g"].data, p["ln_f.b"].data)
        out = h @ p["head.W"].data + p["head.b"].data
        return out.reshape(*h.shape[:2], cfg.n_t, cfg.class_count)


def detect(logits: np.ndarray) -> np.ndarray:
    """Per-antenna argmax over the class axis (last); ties go to index 0."""
    logits = np.asarray(logits)
    if not np.isfinite(logits).all():
        raise nn.NonFiniteValue("detect: non-finite logits")
    return logits.argmax(axis=-1)


def model_config_for(scheme: str, n_r: int = 1, n_t: int = 1, **kw) -> ModelConfig:
    return ModelConfig(n_r=n_r, n_t=n_t, class_count=CLASS_COUNTS[scheme], **kw)
