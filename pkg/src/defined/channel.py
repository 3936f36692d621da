"""Block-fading MIMO channel simulation.

Symbols are carried as integer indices into a :class:`Constellation`; the
complex transmit vector for an index vector ``x`` is
``constellation.points[x] / sqrt(n_t)`` so that ``E||x_t||^2 = 1``.

Index order is fixed: BPSK is ``(+1, -1)``; QPSK and the QAM schemes are
row-major over the (real, imaginary) level grid, i.e. index
``r * m + c`` holds ``levels[r] + 1j * levels[c]`` with levels ascending.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .config import SimConfig

SCHEMES = ("BPSK", "QPSK", "QAM16", "QAM64")


@dataclass(frozen=True)
class Constellation:
    scheme: str
    points: np.ndarray
    neighbor_sets: tuple[frozenset[int], ...] = field(repr=False)

    @property
    def class_count(self) -> int:
        return len(self.points)

    def coords(self, idx: np.ndarray, n_t: int = 1) -> np.ndarray:
        """Scaled transmit symbols for an index array (any shape)."""
        return self.points[idx] / np.sqrt(n_t)


def _neighbors(points: np.ndarray) -> tuple[frozenset[int], ...]:
    d = np.abs(points[:, None] - points[None, :])
    np.fill_diagonal(d, np.inf)
    dmin = d.min(axis=1, keepdims=True)
    close = np.isclose(d, dmin, rtol=1e-9, atol=0.0)
    return tuple(frozenset(np.flatnonzero(row).tolist()) for row in close)


@lru_cache(maxsize=None)
def build_constellation(scheme: str) -> Constellation:
    if scheme == "BPSK":
        pts = np.array([1.0 + 0j, -1.0 + 0j])
    elif scheme in ("QPSK", "QAM16", "QAM64"):
        m = {"QPSK": 2, "QAM16": 4, "QAM64": 8}[scheme]
        levels = np.arange(-(m - 1), m, 2, dtype=float)
        grid = levels[:, None] + 1j * levels[None, :]
        pts = grid.reshape(-1)
        pts = pts / np.sqrt(np.mean(np.abs(pts) ** 2))
    else:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    pts.setflags(write=False)
    return Constellation(scheme, pts, _neighbors(pts))


def snr_db_to_sigma2(snr_db: float) -> float:
    return float(10.0 ** (-snr_db / 10.0))


@dataclass(frozen=True)
class ChannelTask:
    H: np.ndarray
    sigma2: float

    def __post_init__(self):
        if self.H.ndim != 2:
            raise ValueError("H must be a 2-D matrix")
        if not self.sigma2 >= 0:
            raise ValueError("sigma2 must be non-negative")

    @property
    def n_r(self) -> int:
        return self.H.shape[0]

    @property
    def n_t(self) -> int:
        return self.H.shape[1]


@dataclass(frozen=True)
class PromptFrame:
    task: ChannelTask
    x: np.ndarray  # (T, n_t) symbol indices
    y: np.ndarray  # (T, n_r) received vectors
    scheme: str

    @property
    def T(self) -> int:
        return len(self.x)


@dataclass
class FrameBatch:
    """``N`` frames stacked along the leading axis."""

    H: np.ndarray  # (N, n_r, n_t)
    sigma2: np.ndarray  # (N,)
    x: np.ndarray  # (N, T, n_t) int
    y: np.ndarray  # (N, T, n_r) complex
    scheme: str

    def __len__(self) -> int:
        return len(self.x)

    @property
    def T(self) -> int:
        return self.x.shape[1]

    @property
    def n_r(self) -> int:
        return self.y.shape[2]

    @property
    def n_t(self) -> int:
        return self.x.shape[2]

    @property
    def constellation(self) -> Constellation:
        return build_constellation(self.scheme)

    def __getitem__(self, sl) -> FrameBatch:
        if isinstance(sl, (int, np.integer)):
            sl = slice(sl, sl + 1)
        return FrameBatch(self.H[sl], self.sigma2[sl], self.x[sl], self.y[sl], self.scheme)

    def frame(self, i: int) -> PromptFrame:
        return PromptFrame(ChannelTask(self.H[i], float(self.sigma2[i])), self.x[i], self.y[i], self.scheme)

    @classmethod
    def from_frames(cls, frames: list[PromptFrame]) -> FrameBatch:
        return cls(
            np.stack([f.task.H for f in frames]),
            np.array([f.task.sigma2 for f in frames]),
            np.stack([f.x for f in frames]),
            np.stack([f.y for f in frames]),
            frames[0].scheme,
        )

    def digest(self) -> str:
        """Content hash used to assert that arms saw identical frames."""
        import hashlib

        h = hashlib.sha256()
        for a in (self.H, self.sigma2, self.x, self.y):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]


def frame_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based stream for one frame, keyed by ``(seed, index)``."""
    return np.random.Generator(np.random.Philox(key=(int(index) << 64) | int(seed)))


def sample_task(cfg: SimConfig, rng: np.random.Generator) -> ChannelTask:
    H = rng.standard_normal((cfg.n_r, cfg.n_t, 2)) @ np.array([1.0, 1j]) * np.sqrt(0.5)
    if cfg.snr_sampling == "db":
        snr = rng.uniform(cfg.snr_db_min, cfg.snr_db_max)
        sigma2 = snr_db_to_sigma2(snr)
    else:
        lo, hi = snr_db_to_sigma2(cfg.snr_db_max), snr_db_to_sigma2(cfg.snr_db_min)
        sigma2 = float(rng.uniform(lo, hi))
    return ChannelTask(H, sigma2)


def generate_frame(task: ChannelTask, T: int, rng: np.random.Generator, scheme: str) -> PromptFrame:
    if T < 1:
        raise ValueError("T must be at least 1")
    const = build_constellation(scheme)
    x = rng.integers(0, const.class_count, size=(T, task.n_t))
    s = const.coords(x, task.n_t)
    z = rng.standard_normal((T, task.n_r, 2)) @ np.array([1.0, 1j]) * np.sqrt(task.sigma2 / 2)
    y = s @ task.H.T + z
    return PromptFrame(task, x, y, scheme)


def frame_at(cfg: SimConfig, index: int) -> PromptFrame:
    rng = frame_rng(cfg.seed, index)
    task = sample_task(cfg, rng)
    return generate_frame(task, cfg.T, rng, cfg.scheme)


def generate_batch(cfg: SimConfig, start: int, n: int) -> FrameBatch:
    """Frames ``start .. start+n-1`` of the stream defined by ``cfg``.

    Each frame draws from its own keyed stream, so any partition of the
    index range into batches reproduces the same frames.
    """
    return FrameBatch.from_frames([frame_at(cfg, i) for i in range(start, start + n)])
