"""Input validation helpers shared by the estimators."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from .channel import SCHEMES, FrameBatch, PromptFrame, build_constellation


def check_frames(frames, *, scheme: str | None = None, n_r: int | None = None, n_t: int | None = None, T: int | None = None) -> FrameBatch:
    """Coerce ``frames`` to a :class:`FrameBatch` and validate it.

    Accepts a ``FrameBatch``, a single ``PromptFrame`` or a sequence of
    ``PromptFrame``. Raises ``ValueError`` on shape, dtype or range problems
    and when an expected ``scheme``/``n_r``/``n_t``/``T`` is not met.
    """
    if isinstance(frames, PromptFrame):
        frames = FrameBatch.from_frames([frames])
    elif isinstance(frames, Sequence) and not isinstance(frames, FrameBatch):
        if not frames:
            raise ValueError("no frames given")
        if not all(isinstance(f, PromptFrame) for f in frames):
            raise TypeError("expected PromptFrame items")
        frames = FrameBatch.from_frames(list(frames))
    if not isinstance(frames, FrameBatch):
        raise TypeError(f"expected FrameBatch or PromptFrame(s), got {type(frames).__name__}")
    if frames.scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {frames.scheme!r}")
    N = len(frames)
    if N == 0:
        raise ValueError("empty frame batch")
    if frames.x.ndim != 3 or frames.y.ndim != 3 or frames.H.ndim != 3:
        raise ValueError("frame arrays must be (N, T, n_t), (N, T, n_r) and (N, n_r, n_t)")
    if frames.y.shape[:2] != frames.x.shape[:2] or frames.H.shape != (N, frames.n_r, frames.n_t):
        raise ValueError(f"inconsistent frame shapes x{frames.x.shape} y{frames.y.shape} H{frames.H.shape}")
    if not np.issubdtype(frames.x.dtype, np.integer):
        raise ValueError("symbol indices must be integers")
    C = build_constellation(frames.scheme).class_count
    if frames.x.min() < 0 or frames.x.max() >= C:
        raise ValueError(f"symbol index outside [0, {C})")
    if not np.isfinite(frames.y).all():
        raise ValueError("received signals contain NaN or Inf")
    for name, want, got in (("scheme", scheme, frames.scheme), ("n_r", n_r, frames.n_r), ("n_t", n_t, frames.n_t), ("T", T, frames.T)):
        if want is not None and want != got:
            raise ValueError(f"expected {name}={want}, frames have {got}")
    return frames


def check_pilots(k: int, T: int) -> int:
    k = int(k)
    if not 1 <= k < T:
        raise ValueError(f"k_pilots must satisfy 1 <= k < T={T}, got {k}")
    return k
