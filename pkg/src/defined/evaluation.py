"""Monte Carlo symbol-error-rate estimation, gain metrics and reports.

Every arm of an experiment consumes the same frames (the stream keyed by
the eval seed), processed in fixed-size chunks so that results do not
depend on how chunks are spread over workers.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import mmse_detect_batch, mmse_df_detect_batch, perfect_csi_batch
from .channel import FrameBatch, build_constellation, generate_batch
from .config import SimConfig
from .model import TokenBatch, detect
from .training import df_rollout

CSV_FIELDS = ["experiment_id", "arm", "context_len", "errors", "trials", "ser", "stderr"]


class UndefinedGain(ZeroDivisionError):
    pass


class NoErrorsObserved(RuntimeError):
    pass


class ReportError(ValueError):
    pass


@dataclass
class SerCurve:
    arm: str
    context_len: np.ndarray
    errors: np.ndarray
    trials: np.ndarray
    skipped: int = 0
    frame_digest: str = ""

    @property
    def ser(self) -> np.ndarray:
        return self.errors / np.maximum(self.trials, 1)

    @property
    def stderr(self) -> np.ndarray:
        p = self.ser
        return np.sqrt(p * (1 - p) / np.maximum(self.trials, 1))

    def at(self, t: int) -> float:
        i = np.flatnonzero(self.context_len == t)
        if not len(i):
            raise KeyError(f"{self.arm}: no point at context length {t}")
        return float(self.ser[i[0]])

    def stderr_at(self, t: int) -> float:
        return float(self.stderr[np.flatnonzero(self.context_len == t)[0]])

    def pooled(self) -> tuple[float, float]:
        """SER and standard error pooled over all points."""
        e, n = self.errors.sum(), self.trials.sum()
        p = e / n
        return float(p), float(math.sqrt(p * (1 - p) / n))

    def merge(self, other: SerCurve) -> SerCurve:
        if not np.array_equal(self.context_len, other.context_len):
            raise ValueError("cannot merge curves over different context lengths")
        return SerCurve(
            self.arm,
            self.context_len,
            self.errors + other.errors,
            self.trials + other.trials,
            self.skipped + other.skipped,
        )

    def visible(self) -> SerCurve:
        """Drop the zero-context point (pure guessing) for reporting."""
        keep = self.context_len >= 1
        return SerCurve(self.arm, self.context_len[keep], self.errors[keep], self.trials[keep], self.skipped, self.frame_digest)


def _count(det: np.ndarray, truth: np.ndarray, vector_errors: bool):
    """Errors and trials per position; inputs are ``(N, L, n_t)``."""
    wrong = det != truth
    if vector_errors:
        return wrong.any(axis=2).sum(axis=0), np.full(det.shape[1], det.shape[0])
    return wrong.sum(axis=(0, 2)), np.full(det.shape[1], det.shape[0] * det.shape[2])


def _curve(arm, lens, det, truth, vector_errors, skipped=0) -> SerCurve:
    e, n = _count(det, truth, vector_errors)
    return SerCurve(arm, np.asarray(lens), e.astype(np.int64), n.astype(np.int64), skipped)


# -- per-chunk arm kernels --------------------------------------------------
def _icl_chunk(model, frames: FrameBatch, vector_errors: bool) -> SerCurve:
    det = detect(model.logits(TokenBatch.from_frames(frames)))
    return _curve("icl", np.arange(frames.T), det, frames.x, vector_errors)


def _df_chunk(model, frames: FrameBatch, k: int, vector_errors: bool) -> SerCurve:
    roll = df_rollout(model, frames, k)
    return _curve(f"df_p{k}", np.arange(k, frames.T), roll.decisions, frames.x[:, k:], vector_errors)


def _mmse_chunk(frames: FrameBatch, k: int, vector_errors: bool) -> SerCurve:
    det, ok = mmse_detect_batch(frames, k)
    return _curve(f"mmse_p{k}", np.arange(k, frames.T), det[ok], frames.x[ok, k:], vector_errors, int((~ok).sum()))


def _mmse_df_chunk(frames: FrameBatch, k: int, vector_errors: bool) -> SerCurve:
    det, ok = mmse_df_detect_batch(frames, k)
    return _curve(f"mmse_df_p{k}", np.arange(k, frames.T), det[ok], frames.x[ok, k:], vector_errors, int((~ok).sum()))


def _csi_chunk(frames: FrameBatch, vector_errors: bool) -> SerCurve:
    det = perfect_csi_batch(frames)
    return _curve("csi", np.arange(frames.T), det, frames.x, vector_errors)


def _run_chunk(job):
    sim_cfg, start, n, tasks, vector_errors = job
    frames = generate_batch(sim_cfg, start, n)
    out = []
    for kind, model, k in tasks:
        if kind == "icl":
            out.append(_icl_chunk(model, frames, vector_errors))
        elif kind == "df":
            out.append(_df_chunk(model, frames, k, vector_errors))
        elif kind == "mmse":
            out.append(_mmse_chunk(frames, k, vector_errors))
        elif kind == "mmse_df":
            out.append(_mmse_df_chunk(frames, k, vector_errors))
        elif kind == "csi":
            out.append(_csi_chunk(frames, vector_errors))
        else:
            raise ValueError(f"unknown arm {kind!r}")
    return out, frames.digest()


def run_arms(
    tasks: list[tuple[str, object, int]],
    sim_cfg: SimConfig,
    n_prompts: int,
    chunk_size: int = 500,
    workers: int = 1,
    vector_errors: bool = False,
    labels: list[str] | None = None,
) -> list[SerCurve]:
    """Evaluate several arms on one shared frame stream.

    ``tasks`` holds ``(kind, model, k)`` triples with ``kind`` one of
    ``icl, df, mmse, mmse_df, csi``. Every curve records a digest of all
    frames it consumed, which is identical across arms by construction.
    """
    jobs = [
        (sim_cfg, s, min(chunk_size, n_prompts - s), tasks, vector_errors) for s in range(0, n_prompts, chunk_size)
    ]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_chunk, jobs))
    else:
        results = [_run_chunk(j) for j in jobs]
    import hashlib

    digest = hashlib.sha256("".join(d for _, d in results).encode()).hexdigest()[:16]
    curves = []
    for i in range(len(tasks)):
        c = results[0][0][i]
        for r, _ in results[1:]:
            c = c.merge(r[i])
        c.frame_digest = digest
        if labels:
            c.arm = labels[i]
        curves.append(c)
    return curves


def eval_icl(model, sim_cfg: SimConfig, n_prompts: int = 80_000, **kw) -> SerCurve:
    return run_arms([("icl", model, 0)], sim_cfg, n_prompts, **kw)[0]


def eval_df(model, sim_cfg: SimConfig, k_pilots: int, n_prompts: int = 80_000, **kw) -> SerCurve:
    return run_arms([("df", model, k_pilots)], sim_cfg, n_prompts, **kw)[0]


def eval_baseline(arm: str, sim_cfg: SimConfig, k: int, n_prompts: int = 80_000, **kw) -> SerCurve:
    if arm == "perfect_csi":
        arm = "csi"
    if arm not in ("mmse", "mmse_df", "csi"):
        raise ValueError(f"unknown baseline arm {arm!r}")
    return run_arms([(arm, None, k)], sim_cfg, n_prompts, **kw)[0]


def gain(curve: SerCurve, k: int, T_last: int | None = None) -> float:
    """Relative SER drop from ``k`` contexts to the last context length."""
    T_last = int(curve.context_len.max()) if T_last is None else T_last
    s_k = curve.at(k)
    if s_k == 0:
        raise UndefinedGain(f"{curve.arm}: SER at context length {k} is zero")
    return (s_k - curve.at(T_last)) / s_k


# -- error locality -----------------------------------------------------------
def distance_ranks(scheme: str) -> np.ndarray:
    """``R[i, j]``: 1-based rank of ``|p_j - p_i|`` among the distinct
    nonzero distances from point ``i`` (0 on the diagonal)."""
    pts = build_constellation(scheme).points
    d = np.round(np.abs(pts[:, None] - pts[None, :]), 9)
    R = np.zeros(d.shape, dtype=int)
    for i in range(len(pts)):
        levels = np.unique(d[i][d[i] > 0])
        R[i] = np.searchsorted(levels, d[i]) + 1
        R[i, i] = 0
    return R


def uniform_neighbor_fraction(scheme: str) -> float:
    """Neighbor fraction expected if wrong labels were uniformly random."""
    c = build_constellation(scheme)
    C = c.class_count
    return float(np.mean([len(n) / (C - 1) for n in c.neighbor_sets]))


@dataclass
class LocalityResult:
    scheme: str
    n_errors: int
    neighbor_errors: int
    rank_histogram: dict[int, int] = field(default_factory=dict)

    @property
    def neighbor_fraction(self) -> float:
        return self.neighbor_errors / self.n_errors

    @property
    def stderr(self) -> float:
        p = self.neighbor_fraction
        return math.sqrt(p * (1 - p) / self.n_errors)

    @property
    def uniform_expectation(self) -> float:
        return uniform_neighbor_fraction(self.scheme)


def locality_of(detected: np.ndarray, truth: np.ndarray, scheme: str) -> LocalityResult:
    wrong = detected != truth
    d, t = detected[wrong], truth[wrong]
    R = distance_ranks(scheme)
    ranks = R[t, d]
    hist = {int(r): int(c) for r, c in zip(*np.unique(ranks, return_counts=True))}
    return LocalityResult(scheme, int(wrong.sum()), int((ranks == 1).sum()), hist)


def error_locality(model, sim_cfg: SimConfig, n_prompts: int, k_pilots: int | None = None, chunk_size: int = 500) -> LocalityResult:
    """Where the model's wrong decisions land relative to the truth.

    With ``k_pilots=None`` detections come from clean prompts with at least
    one context pair; otherwise from decision-feedback rollouts.
    """
    det_all, truth_all = [], []
    for s in range(0, n_prompts, chunk_size):
        frames = generate_batch(sim_cfg, s, min(chunk_size, n_prompts - s))
        if k_pilots is None:
            det = detect(model.logits(TokenBatch.from_frames(frames)))[:, 1:]
            truth = frames.x[:, 1:]
        else:
            det = df_rollout(model, frames, k_pilots).decisions
            truth = frames.x[:, k_pilots:]
        det_all.append(det.ravel())
        truth_all.append(truth.ravel())
    res = locality_of(np.concatenate(det_all), np.concatenate(truth_all), sim_cfg.scheme)
    if res.n_errors == 0:
        raise NoErrorsObserved(f"no detection errors in {n_prompts} prompts")
    return res


# -- reports -------------------------------------------------------------------
@dataclass
class EvalReport:
    experiment_id: str
    sim: dict
    arms: list[SerCurve]
    gains: dict[str, float] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def arm(self, name: str) -> SerCurve:
        for c in self.arms:
            if c.arm == name:
                return c
        raise KeyError(name)

    def to_json(self) -> dict:
        return {
            "experiment_id": self.experiment_id,
            "sim": self.sim,
            "gains": self.gains,
            "metadata": self.metadata,
            "arms": [
                {
                    "arm": c.arm,
                    "context_len": c.context_len.tolist(),
                    "errors": c.errors.tolist(),
                    "trials": c.trials.tolist(),
                    "skipped": c.skipped,
                    "frame_digest": c.frame_digest,
                }
                for c in self.arms
            ],
        }

    @classmethod
    def from_json(cls, data: dict) -> EvalReport:
        arms = [
            SerCurve(
                a["arm"],
                np.array(a["context_len"]),
                np.array(a["errors"]),
                np.array(a["trials"]),
                a.get("skipped", 0),
                a.get("frame_digest", ""),
            )
            for a in data["arms"]
        ]
        return cls(data["experiment_id"], data["sim"], arms, data.get("gains", {}), data.get("metadata", {}))

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for c in self.arms:
            for t, e, n, p, s in zip(c.context_len, c.errors, c.trials, c.ser, c.stderr):
                w.writerow([self.experiment_id, c.arm, int(t), int(e), int(n), f"{p:.8g}", f"{s:.8g}"])
        return buf.getvalue()


def emit_report(report: EvalReport, out_dir: str | Path) -> tuple[Path, Path]:
    """Write ``<id>.csv`` and ``<id>.json`` into ``out_dir`` (overwriting)."""
    if not report.arms:
        raise ReportError("report has no arms")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / f"{report.experiment_id}.csv"
        json_path = out_dir / f"{report.experiment_id}.json"
        csv_path.write_text(report.csv_text())
        json_path.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write report to {out_dir}: {exc}") from exc
    return csv_path, json_path


def read_report(json_path: str | Path) -> EvalReport:
    return EvalReport.from_json(json.loads(Path(json_path).read_text()))
