"""Verification trials, EER and minDCF.

Operating points come from thresholding at every distinct score (accept when
``score >= t``) plus one reject-all point, so the sweep runs from
``(P_miss, P_fa) = (0, 1)`` to ``(1, 0)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateSetError, ParseError


@dataclass(frozen=True)
class Trial:
    label: int
    enroll: str
    test: str


@dataclass
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise DegenerateSetError("scores and labels must be 1-D and of equal length")

    @property
    def n_target(self) -> int:
        return int((self.labels == 1).sum())

    @property
    def n_nontarget(self) -> int:
        return int((self.labels == 0).sum())

    def check(self) -> None:
        if self.n_target == 0 or self.n_nontarget == 0:
            raise DegenerateSetError(
                f"need both classes, got {self.n_target} targets / {self.n_nontarget} nontargets")
        if not np.all(np.isfinite(self.scores)):
            raise DegenerateSetError("non-finite scores")


def parse_trials(path) -> list[Trial]:
    """Lines of ``label enroll-id test-id``; label is ``0`` or ``1``."""
    trials = []
    with open(path, newline=None) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise ParseError(f"expected 'label id1 id2', got {line.strip()!r}", lineno)
            if parts[0] not in ("0", "1"):
                raise ParseError(f"label must be 0 or 1, got {parts[0]!r}", lineno)
            trials.append(Trial(int(parts[0]), parts[1], parts[2]))
    return trials


def write_trials(path, trials) -> None:
    with open(path, "w") as fh:
        for t in trials:
            fh.write(f"{t.label} {t.enroll} {t.test}\n")


def parse_scores(path) -> dict[tuple[str, str], float]:
    """Lines of ``id1 id2 score``."""
    out = {}
    with open(path, newline=None) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise ParseError(f"expected 'id1 id2 score', got {line.strip()!r}", lineno)
            try:
                out[(parts[0], parts[1])] = float(parts[2])
            except ValueError:
                raise ParseError(f"bad score {parts[2]!r}", lineno) from None
    return out


def join_scores(trials: list[Trial], scores: dict[tuple[str, str], float]) -> ScoreSet:
    vals = []
    for t in trials:
        key = (t.enroll, t.test)
        if key not in scores:
            raise ParseError(f"no score for trial {t.enroll} {t.test}")
        vals.append(scores[key])
    return ScoreSet(np.array(vals), np.array([t.label for t in trials]))


def operating_points(s: ScoreSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(thresholds, p_miss, p_fa)`` ordered by increasing threshold, reject-all last."""
    s.check()
    order = np.argsort(s.scores, kind="mergesort")
    scores, labels = s.scores[order], s.labels[order]
    thresholds, first = np.unique(scores, return_index=True)
    tar_below = np.concatenate([[0], np.cumsum(labels == 1)])[first]
    non_below = np.concatenate([[0], np.cumsum(labels == 0)])[first]
    p_miss = np.append(tar_below / s.n_target, 1.0)
    p_fa = np.append((s.n_nontarget - non_below) / s.n_nontarget, 0.0)
    thresholds = np.append(thresholds, np.nextafter(thresholds[-1], np.inf))
    return thresholds, p_miss, p_fa


def compute_eer(s: ScoreSet) -> tuple[float, float]:
    """EER by linear interpolation between the ROC vertices that bracket ``P_miss == P_fa``."""
    thr, p_miss, p_fa = operating_points(s)
    d = p_miss - p_fa
    zero = np.flatnonzero(d == 0)
    if zero.size:
        return float(p_miss[zero[0]]), float((thr[zero[0]] + thr[zero[-1]]) / 2)
    k = int(np.flatnonzero(d < 0)[-1])
    alpha = -d[k] / (d[k + 1] - d[k])
    eer = p_miss[k] + alpha * (p_miss[k + 1] - p_miss[k])
    return float(eer), float((thr[k] + thr[k + 1]) / 2)


def compute_min_dcf(s: ScoreSet, p_target: float = 0.01, c_miss: float = 1.0,
                    c_fa: float = 1.0) -> tuple[float, float]:
    """Normalized minimum detection cost and the threshold attaining it."""
    if not 0.0 < p_target < 1.0:
        raise ConfigError(f"p_target must lie in (0, 1), got {p_target}")
    if c_miss <= 0 or c_fa <= 0:
        raise ConfigError("c_miss and c_fa must be positive")
    thr, p_miss, p_fa = operating_points(s)
    cost = c_miss * p_target * p_miss + c_fa * (1.0 - p_target) * p_fa
    k = int(np.argmin(cost))
    norm = min(c_miss * p_target, c_fa * (1.0 - p_target))
    return float(cost[k] / norm), float(thr[k])


def evaluate(s: ScoreSet, p_target: float = 0.01, c_miss: float = 1.0, c_fa: float = 1.0) -> dict:
    eer, eer_thr = compute_eer(s)
    dcf, dcf_thr = compute_min_dcf(s, p_target, c_miss, c_fa)
    return {"eer": eer, "eer_threshold": eer_thr, "min_dcf": dcf, "dcf_threshold": dcf_thr,
            "n_target": s.n_target, "n_nontarget": s.n_nontarget}


def write_det_csv(path, s: ScoreSet) -> None:
    thr, p_miss, p_fa = operating_points(s)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "p_miss", "p_fa"])
        for row in zip(thr, p_miss, p_fa):
            w.writerow([repr(float(v)) for v in row])


def make_trials(speakers: dict[str, str], max_nontarget: int | None = None,
                rng: np.random.Generator | None = None) -> list[Trial]:
    """All target pairs among ``id -> speaker`` plus (optionally subsampled) nontarget pairs."""
    ids = sorted(speakers)
    tar, non = [], []
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            (tar if speakers[a] == speakers[b] else non).append(Trial(int(speakers[a] == speakers[b]), a, b))
    if max_nontarget is not None and len(non) > max_nontarget:
        rng = rng or np.random.default_rng(0)
        keep = np.sort(rng.choice(len(non), max_nontarget, replace=False))
        non = [non[i] for i in keep]
    return tar + non

