"""Classical receivers: MMSE channel estimation with nearest-symbol
projection, its decision-feedback extension, and a perfect-CSI detector.

Orientation convention: pilots are row-stacked, ``X`` is ``k x n_t`` and
``Y`` is ``k x n_r`` so that ``Y = X H^T + Z``. Estimates are returned as
``n_r x n_t`` like the true channel.

Each operation has a per-frame form matching the textbook description and
a ``*_batch`` form that works on a :class:`~defined.channel.FrameBatch`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import Constellation, FrameBatch, PromptFrame, build_constellation

_COND_LIMIT = 1e12
_MAX_DIST_ELEMS = 1 << 22


class SingularSystem(np.linalg.LinAlgError):
    """The regularized pilot Gram matrix cannot be inverted reliably."""


@dataclass(frozen=True)
class PilotSet:
    X: np.ndarray  # (k, n_t)
    Y: np.ndarray  # (k, n_r)
    sigma2: float

    def __post_init__(self):
        if self.X.ndim != 2 or self.Y.ndim != 2 or len(self.X) != len(self.Y) or len(self.X) < 1:
            raise ValueError("PilotSet needs k >= 1 matching rows in X and Y")


@dataclass(frozen=True)
class DetectionRun:
    detected: np.ndarray  # (T - k, n_t)
    truth: np.ndarray  # (T - k, n_t)
    k: int

    @property
    def errors(self) -> int:
        return int(np.count_nonzero(self.detected != self.truth))


def mmse_estimate_batch(X, Y, sigma2):
    """Batched MMSE estimate.

    Returns ``(H_hat, ok)`` with ``H_hat`` of shape ``(N, n_r, n_t)`` and a
    boolean mask flagging frames whose Gram matrix was well conditioned.
    Ill-conditioned frames get a least-squares fallback and ``ok=False``.
    """
    X = np.asarray(X)
    Y = np.asarray(Y)
    sigma2 = np.broadcast_to(np.asarray(sigma2, dtype=float), X.shape[:1])
    Xh = np.conj(np.swapaxes(X, 1, 2))
    n_t = X.shape[2]
    G = Xh @ X + sigma2[:, None, None] * np.eye(n_t)
    ok = np.linalg.cond(G) < _COND_LIMIT
    Ht = np.empty((X.shape[0], n_t, Y.shape[2]), dtype=complex)
    if ok.all():
        Ht[:] = np.linalg.solve(G, Xh @ Y)
    else:
        Ht[ok] = np.linalg.solve(G[ok], (Xh @ Y)[ok])
        for i in np.flatnonzero(~ok):
            Ht[i] = np.linalg.lstsq(X[i], Y[i], rcond=None)[0]
    return np.swapaxes(Ht, 1, 2), ok


def mmse_channel_estimate(p: PilotSet) -> np.ndarray:
    H, ok = mmse_estimate_batch(p.X[None], p.Y[None], p.sigma2)
    if not ok[0]:
        raise SingularSystem("pilot Gram matrix is singular (sigma2=0 with rank-deficient pilots)")
    return H[0]


def candidate_indices(class_count: int, n_t: int) -> np.ndarray:
    """All index vectors in lexicographic order (antenna 0 most significant)."""
    return np.indices((class_count,) * n_t).reshape(n_t, -1).T


def nearest_symbol_batch(H, y, const: Constellation) -> np.ndarray:
    """Joint ML projection for every received vector.

    ``H`` is ``(N, n_r, n_t)``, ``y`` is ``(N, L, n_r)``; returns
    ``(N, L, n_t)`` symbol indices. Ties go to the lexicographically
    smallest candidate.
    """
    n_t = H.shape[2]
    cand = candidate_indices(const.class_count, n_t)
    s = const.coords(cand, n_t)  # (M, n_t)
    pred = H @ s.T  # (N, n_r, M)
    N, L, n_r = y.shape
    M = len(cand)
    out = np.empty((N, L), dtype=np.int64)
    step = max(1, _MAX_DIST_ELEMS // max(1, L * M * n_r))
    for a in range(0, N, step):
        b = min(N, a + step)
        diff = y[a:b, :, :, None] - pred[a:b, None]
        d = (diff.real**2 + diff.imag**2).sum(axis=2)
        out[a:b] = d.argmin(axis=2)
    return cand[out]


def nearest_symbol_detect(H_hat, y, constellation: Constellation, n_t: int) -> np.ndarray:
    H_hat = np.asarray(H_hat, dtype=complex).reshape(-1, n_t)
    y = np.asarray(y, dtype=complex).reshape(1, 1, -1)
    return nearest_symbol_batch(H_hat[None], y, constellation)[0, 0]


def _check_k(k: int, T: int):
    if not 1 <= k < T:
        raise ValueError(f"need 1 <= k < T, got k={k}, T={T}")


def mmse_detect_batch(frames: FrameBatch, k: int):
    """Detect positions ``k..T-1`` (0-based) from a ``k``-pilot estimate.

    Returns ``(detected, ok)``; ``detected`` is ``(N, T-k, n_t)``.
    """
    _check_k(k, frames.T)
    const = frames.constellation
    X = const.coords(frames.x[:, :k], frames.n_t)
    H, ok = mmse_estimate_batch(X, frames.y[:, :k], frames.sigma2)
    return nearest_symbol_batch(H, frames.y[:, k:], const), ok


def mmse_df_detect_batch(frames: FrameBatch, k: int):
    """MMSE with decision feedback; decided pairs join the pilot set with
    the same weight as true pilots."""
    _check_k(k, frames.T)
    const = frames.constellation
    n_t = frames.n_t
    X = const.coords(frames.x, n_t).astype(complex)  # positions >= k overwritten below
    ok = np.ones(len(frames), dtype=bool)
    detected = np.empty((len(frames), frames.T - k, n_t), dtype=np.int64)
    for t in range(k, frames.T):
        H, ok_t = mmse_estimate_batch(X[:, :t], frames.y[:, :t], frames.sigma2)
        ok &= ok_t
        d = nearest_symbol_batch(H, frames.y[:, t : t + 1], const)[:, 0]
        detected[:, t - k] = d
        X[:, t] = const.coords(d, n_t)
    return detected, ok


def perfect_csi_batch(frames: FrameBatch) -> np.ndarray:
    return nearest_symbol_batch(frames.H, frames.y, frames.constellation)


def _single(frame: PromptFrame) -> FrameBatch:
    return FrameBatch(frame.task.H[None], np.array([frame.task.sigma2]), frame.x[None], frame.y[None], frame.scheme)


def run_mmse(frame: PromptFrame, k: int) -> DetectionRun:
    det, ok = mmse_detect_batch(_single(frame), k)
    if not ok[0]:
        raise SingularSystem("pilot Gram matrix is singular")
    return DetectionRun(det[0], frame.x[k:], k)


def run_mmse_df(frame: PromptFrame, k: int) -> DetectionRun:
    det, ok = mmse_df_detect_batch(_single(frame), k)
    if not ok[0]:
        raise SingularSystem("pilot Gram matrix is singular")
    return DetectionRun(det[0], frame.x[k:], k)


def perfect_csi_detect(frame: PromptFrame) -> DetectionRun:
    det = perfect_csi_batch(_single(frame))
    return DetectionRun(det[0], frame.x, 0)


def rayleigh_bpsk_ser(snr_linear: float) -> float:
    """Closed-form coherent BPSK error rate averaged over Rayleigh fading."""
    g = snr_linear
    return 0.5 * (1.0 - np.sqrt(g / (1.0 + g)))


__all__ = [
    "DetectionRun",
    "PilotSet",
    "SingularSystem",
    "build_constellation",
    "mmse_channel_estimate",
    "nearest_symbol_detect",
    "perfect_csi_detect",
    "rayleigh_bpsk_ser",
    "run_mmse",
    "run_mmse_df",
]
