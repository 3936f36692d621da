"""scikit-learn style front end.

Detectors take frames (a :class:`~defined.channel.FrameBatch` or a list of
:class:`~defined.channel.PromptFrame`) and return symbol indices for the
non-pilot positions. ``score`` is ``1 - SER`` so that higher is better, as
scikit-learn expects.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .baselines import mmse_detect_batch, mmse_df_detect_batch, perfect_csi_batch
from .checkpoint import load_checkpoint, save_checkpoint
from .config import CLASS_COUNTS, ModelConfig, SimConfig, TrainConfig
from .model import TokenBatch, detect
from .training import Checkpoint, df_rollout, train
from .validation import check_frames, check_pilots


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class _DetectorMixin:
    def _truth(self, frames):
        return frames.x[:, self._first_position(frames) :]

    def score(self, frames, y=None):
        """``1 - SER`` over the positions :meth:`predict` covers."""
        frames = check_frames(frames)
        return 1.0 - float(np.mean(self.predict(frames) != self._truth(frames)))


class MMSEDetector(_DetectorMixin, BaseEstimator):
    """MMSE channel estimate from ``k_pilots`` pilots, then nearest-symbol
    projection; with ``feedback=True`` each decision joins the pilot set."""

    def __init__(self, k_pilots: int = 1, feedback: bool = False):
        self.k_pilots = k_pilots
        self.feedback = feedback

    def fit(self, frames=None, y=None):
        return self

    def _first_position(self, frames):
        return self.k_pilots

    def predict(self, frames) -> np.ndarray:
        frames = check_frames(frames)
        k = check_pilots(self.k_pilots, frames.T)
        fn = mmse_df_detect_batch if self.feedback else mmse_detect_batch
        return fn(frames, k)[0]


class PerfectCSIDetector(_DetectorMixin, BaseEstimator):
    """Nearest-symbol projection with the true channel (a lower bound)."""

    def fit(self, frames=None, y=None):
        return self

    def _first_position(self, frames):
        return 0

    def predict(self, frames) -> np.ndarray:
        return perfect_csi_batch(check_frames(frames))


class DefinedDetector(_DetectorMixin, BaseEstimator):
    """Transformer detector trained in context, optionally with decision
    feedback fine-tuning.

    ``fit`` draws its own synthetic training stream from the simulation
    parameters, so it ignores any data passed in. ``mode`` selects how
    :meth:`predict` builds prompts: ``"icl"`` uses every earlier true
    symbol, ``"df"`` uses ``k_pilots`` true symbols and feeds back its own
    decisions afterwards.
    """

    def __init__(
        self,
        scheme="QPSK",
        n_r=1,
        n_t=1,
        T=31,
        snr_db_min=-3.0,
        snr_db_max=3.0,
        snr_sampling="db",
        d_e=64,
        n_layers=8,
        n_heads=8,
        batch_size=512,
        pretrain_steps=50_000,
        finetune_steps=25_000,
        alpha=0.7,
        k_pilots=1,
        lr=3e-4,
        warmup_steps=1000,
        feedback="greedy",
        mode="df",
        random_state=0,
        checkpoint_dir=None,
    ):
        self.scheme = scheme
        self.n_r = n_r
        self.n_t = n_t
        self.T = T
        self.snr_db_min = snr_db_min
        self.snr_db_max = snr_db_max
        self.snr_sampling = snr_sampling
        self.d_e = d_e
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.batch_size = batch_size
        self.pretrain_steps = pretrain_steps
        self.finetune_steps = finetune_steps
        self.alpha = alpha
        self.k_pilots = k_pilots
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.feedback = feedback
        self.mode = mode
        self.random_state = random_state
        self.checkpoint_dir = checkpoint_dir

    def _configs(self):
        sim = SimConfig(
            scheme=self.scheme,
            n_r=self.n_r,
            n_t=self.n_t,
            T=self.T,
            snr_db_min=self.snr_db_min,
            snr_db_max=self.snr_db_max,
            snr_sampling=self.snr_sampling,
            seed=self.random_state,
        )
        model = ModelConfig(
            d_e=self.d_e,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            T_max=self.T,
            n_r=self.n_r,
            n_t=self.n_t,
            class_count=CLASS_COUNTS[self.scheme],
        )
        tr = TrainConfig(
            batch_size=self.batch_size,
            pretrain_steps=self.pretrain_steps,
            finetune_steps=self.finetune_steps,
            alpha=self.alpha,
            k_pilots=self.k_pilots,
            lr=self.lr,
            warmup_steps=self.warmup_steps,
            feedback=self.feedback,
            seed=self.random_state,
            checkpoint_dir=self.checkpoint_dir,
        )
        return sim, model, tr

    def fit(self, frames=None, y=None, loss_log=None):
        if self.mode not in ("icl", "df"):
            raise ValueError(f"mode must be 'icl' or 'df', got {self.mode!r}")
        sim, model, tr = self._configs()
        check_pilots(self.k_pilots, self.T)
        trace = []
        self.checkpoint_ = train(sim, model, tr, loss_log=loss_log, progress=lambda s, p, v: trace.append((s, p, v)))
        self.model_ = self.checkpoint_.transformer()
        self.loss_trace_ = trace
        return self

    @classmethod
    def from_checkpoint(cls, path, mode: str = "df", k_pilots: int | None = None) -> DefinedDetector:
        ckpt = load_checkpoint(path)
        return cls._from_ckpt(ckpt, mode, k_pilots)

    @classmethod
    def _from_ckpt(cls, ckpt: Checkpoint, mode="df", k_pilots=None) -> DefinedDetector:
        s, m, t = ckpt.sim, ckpt.model, ckpt.train
        est = cls(
            scheme=s.scheme, n_r=s.n_r, n_t=s.n_t, T=s.T, snr_db_min=s.snr_db_min, snr_db_max=s.snr_db_max,
            snr_sampling=s.snr_sampling, d_e=m.d_e, n_layers=m.n_layers, n_heads=m.n_heads,
            batch_size=t.batch_size, pretrain_steps=t.pretrain_steps, finetune_steps=t.finetune_steps,
            alpha=t.alpha, k_pilots=k_pilots or t.k_pilots, lr=t.lr, warmup_steps=t.warmup_steps,
            feedback=t.feedback, mode=mode, random_state=t.seed,
        )
        est.checkpoint_ = ckpt
        est.model_ = ckpt.transformer()
        est.loss_trace_ = []
        return est

    def save(self, path):
        check_is_fitted(self, "checkpoint_")
        return save_checkpoint(self.checkpoint_, path)

    def _first_position(self, frames):
        return 0 if self.mode == "icl" else self.k_pilots

    def _logits(self, frames):
        check_is_fitted(self, "model_")
        frames = check_frames(frames, scheme=self.scheme, n_r=self.n_r, n_t=self.n_t)
        if frames.T > self.model_.cfg.T_max:
            raise ValueError(f"frames of length {frames.T} exceed the model's T_max={self.model_.cfg.T_max}")
        if self.mode == "icl":
            return self.model_.logits(TokenBatch.from_frames(frames))
        return df_rollout(self.model_, frames, check_pilots(self.k_pilots, frames.T)).logits

    def decision_function(self, frames) -> np.ndarray:
        """Logits ``(N, L, n_t, C)`` for the positions :meth:`predict` covers."""
        return self._logits(frames)

    def predict_proba(self, frames) -> np.ndarray:
        return _softmax(self._logits(frames).astype(np.float64))

    def predict(self, frames) -> np.ndarray:
        if self.mode == "df":
            check_is_fitted(self, "model_")
            frames = check_frames(frames, scheme=self.scheme, n_r=self.n_r, n_t=self.n_t)
            return df_rollout(self.model_, frames, check_pilots(self.k_pilots, frames.T)).decisions
        return detect(self._logits(frames))
