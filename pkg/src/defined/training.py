"""Two-phase training: in-context pre-training on clean prompts, then
fine-tuning on a mix of clean and decision-feedback prompts."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .channel import FrameBatch, generate_batch
from .config import ModelConfig, SimConfig, TrainConfig
from .model import TokenBatch, Transformer, detect, interleave, x_features, y_features
from .nn import ops

log = logging.getLogger(__name__)


@dataclass
class Rollout:
    """Result of a decision-feedback pass over a batch of frames.

    ``tokens`` is the full feedback prompt (pilots, then decisions) up to
    ``y_T``; ``logits`` and ``decisions`` cover positions ``k+1..T``.
    """

    tokens: TokenBatch
    logits: np.ndarray  # (N, T-k, n_t, C)
    decisions: np.ndarray  # (N, T-k, n_t)
    k: int


def _choose(logits: np.ndarray, feedback: str, rng) -> np.ndarray:
    if feedback == "greedy":
        return detect(logits)
    z = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    u = rng.random(p.shape[:-1] + (1,))
    return np.minimum((p.cumsum(axis=-1) < u).sum(axis=-1), p.shape[-1] - 1)


def df_rollout(model, frames: FrameBatch, k: int, feedback: str = "greedy", rng=None, use_cache: bool = True) -> Rollout:
    """Detect positions ``k+1..T`` one by one, feeding each decision back.

    Pilots ``1..k`` enter with their true symbols. Each of the ``T-k``
    forward passes extends the prompt by the previous decision and the next
    received vector. Models exposing ``decoder()`` reuse cached keys and
    values; anything else with a ``logits(TokenBatch)`` method is re-run on
    the growing prompt.
    """
    T = frames.T
    if not 1 <= k < T:
        raise ValueError(f"need 1 <= k < T, got k={k}, T={T}")
    if feedback == "sample" and rng is None:
        raise ValueError("sampled feedback needs an rng")
    N, n_t = len(frames), frames.n_t
    y = y_features(frames.y)
    x = x_features(frames.x, frames.scheme, n_t)  # positions >= k replaced below
    logits_out = []
    decisions = np.empty((N, T - k, n_t), dtype=np.int64)
    dec = model.decoder(N) if use_cache and hasattr(model, "decoder") else None
    with nn.no_grad():
        for t in range(k, T):  # 0-based position being detected
            if dec is not None:
                if t == k:
                    F = interleave(y[:, : k + 1], x[:, :k], model.cfg.embed_bias)
                else:
                    F = interleave(y[:, t - 1 : t + 1], x[:, t - 1 : t], model.cfg.embed_bias)[:, 1:]
                lg = dec.head(dec.feed(F)[:, -1:])[:, 0]
            else:
                lg = model.logits(TokenBatch(y[:, : t + 1], x[:, :t]))[:, -1]
            d = _choose(lg, feedback, rng)
            logits_out.append(lg)
            decisions[:, t - k] = d
            x[:, t] = x_features(d, frames.scheme, n_t)
    return Rollout(TokenBatch(y, x[:, : T - 1]), np.stack(logits_out, axis=1), decisions, k)


def icl_loss(model: Transformer, frames: FrameBatch) -> nn.Tensor:
    """Cross-entropy over all ``T`` positions of the clean prompt, averaged
    over frames, positions and antennas."""
    logits = model.forward(TokenBatch.from_frames(frames))
    return ops.cross_entropy(logits, frames.x)


def df_loss(model: Transformer, frames: FrameBatch, k: int, feedback: str = "greedy", rng=None) -> nn.Tensor:
    """Cross-entropy at positions ``k+1..T`` of the feedback prompt.

    The rollout runs without gradients; the loss comes from one
    differentiable pass over the finished prompt, which by causality sees
    exactly what each rollout step saw. The sum over the ``T-k`` positions
    is divided by ``T`` (not ``T-k``) per frame.
    """
    roll = df_rollout(model, frames, k, feedback, rng)
    logits = model.forward(roll.tokens)
    sliced = ops.getitem(logits, (slice(None), slice(k, None)))
    ce = ops.cross_entropy(sliced, frames.x[:, k:])
    T = frames.T
    return ops.mul(ce, np.asarray((T - k) / T, dtype=ce.dtype))


def finetune_loss(model, frames, alpha: float, k: int, feedback: str = "greedy", rng=None) -> nn.Tensor:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    ldf = df_loss(model, frames, k, feedback, rng)
    licl = icl_loss(model, frames)
    dt = ldf.dtype
    return ops.add(ops.mul(ldf, np.asarray(alpha, dt)), ops.mul(licl, np.asarray(1.0 - alpha, dt)))


def learning_rate(step: int, n_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup, then optional cosine decay to ``min_lr_ratio * lr``."""
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    if not cfg.cosine_decay or n_steps <= cfg.warmup_steps:
        return cfg.lr
    frac = (step - cfg.warmup_steps) / max(1, n_steps - cfg.warmup_steps)
    return cfg.lr * (cfg.min_lr_ratio + (1 - cfg.min_lr_ratio) * 0.5 * (1 + math.cos(math.pi * frac)))


@dataclass
class Checkpoint:
    sim: SimConfig
    model: ModelConfig
    train: TrainConfig
    step: int
    params: nn.ParamStore
    phase: str = "init"

    def transformer(self) -> Transformer:
        return Transformer(self.model, self.params)


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, cause: Exception):
        super().__init__(f"training aborted at step {step}: {cause}")
        self.step = step


def train(
    sim_cfg: SimConfig,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    loss_log: str | Path | None = None,
    init: Checkpoint | None = None,
    progress=None,
) -> Checkpoint:
    """Run both phases and return the final checkpoint.

    Step ``s`` consumes frames ``s*B .. s*B+B-1`` of the ``sim_cfg`` stream,
    so a run is reproducible from its configs alone. ``init`` resumes from a
    saved checkpoint. ``progress(step, phase, loss)`` is called every step.
    """
    from .checkpoint import save_checkpoint

    ckpt = init or Checkpoint(sim_cfg, model_cfg, train_cfg, 0, Transformer(model_cfg, seed=train_cfg.seed).params)
    model = ckpt.transformer()
    store = model.params
    B = train_cfg.batch_size
    n_pre, n_ft = train_cfg.pretrain_steps, train_cfg.finetune_steps
    total = n_pre + n_ft
    rng = np.random.default_rng([train_cfg.seed, 1])
    out_dir = Path(train_cfg.checkpoint_dir) if train_cfg.checkpoint_dir else None
    writer = None
    if loss_log is not None:
        Path(loss_log).parent.mkdir(parents=True, exist_ok=True)
        fh = open(loss_log, "a" if ckpt.step else "w", newline="")
        writer = csv.writer(fh)
        if not ckpt.step:
            writer.writerow(["step", "phase", "loss"])
    t0 = time.perf_counter()
    try:
        for step in range(ckpt.step, total):
            phase = "pretrain" if step < n_pre else "finetune"
            frames = generate_batch(sim_cfg, step * B, B)
            try:
                if phase == "pretrain":
                    loss = icl_loss(model, frames)
                    lr = learning_rate(step, n_pre, train_cfg)
                else:
                    loss = finetune_loss(model, frames, train_cfg.alpha, train_cfg.k_pilots, train_cfg.feedback, rng)
                    lr = learning_rate(step - n_pre, n_ft, train_cfg)
                nn.backward(loss)
            except (nn.NonFiniteValue, FloatingPointError) as exc:
                raise TrainingAborted(step, exc) from exc
            if train_cfg.grad_clip:
                store.clip_grad_norm(train_cfg.grad_clip)
            nn.adam_step(store, lr, train_cfg.beta1, train_cfg.beta2, train_cfg.eps)
            value = loss.item()
            if writer:
                writer.writerow([step, phase, repr(value)])
            if progress:
                progress(step, phase, value)
            if step == n_pre and n_pre:
                log.info("phase switch at step %d (a loss spike here is expected)", step)
            ckpt = Checkpoint(sim_cfg, model_cfg, train_cfg, step + 1, store, phase)
            boundary = step + 1 == n_pre and n_ft
            periodic = train_cfg.eval_every and (step + 1) % train_cfg.eval_every == 0
            if out_dir and (boundary or periodic):
                save_checkpoint(ckpt, out_dir / f"step{step + 1:07d}.ckpt")
                if boundary:
                    save_checkpoint(ckpt, out_dir / "pretrained.ckpt")
            if step % 100 == 0:
                log.info("step %d %s loss %.4f lr %.2e (%.1fs)", step, phase, value, lr, time.perf_counter() - t0)
    finally:
        if writer:
            fh.close()
    if out_dir:
        save_checkpoint(ckpt, out_dir / "final.ckpt")
    return ckpt
