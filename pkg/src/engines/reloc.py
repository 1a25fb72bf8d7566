"""
Relocalization
==============
Loop-closure candidates from appearance:

    features -> visual vocabulary (binary k-medians) -> BoVW histograms
    -> top-k retrieval (L1) -> ratio-test matching -> N_th filter

Retrieval skips frames within T_loop indices of the query; otherwise the
temporal neighbours fill the top of every ranking.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from src.engines.features import DESCRIPTOR_BITS, DESCRIPTOR_BYTES, Features, hamming_matrix
from src.utils.errors import InputError

logger = logging.getLogger(__name__)

DEFAULT_TOP_K = 20
DEFAULT_RATIO = 0.7
DEFAULT_N_TH = 20
MAX_KMEDIANS_ITERATIONS = 100
MAX_TRAINING_DESCRIPTORS = 5000


@dataclass(frozen=True, eq=False)
class Vocabulary:
    centroids: np.ndarray  # (k, 32) uint8, packed bits

    def __post_init__(self):
        c = np.ascontiguousarray(self.centroids, dtype=np.uint8)
        if c.ndim != 2 or c.shape[1] != DESCRIPTOR_BYTES:
            raise InputError(f"centroids must be (k, {DESCRIPTOR_BYTES}) packed bytes, got {c.shape}")
        if c.shape[0] < 2:
            raise InputError(f"vocabulary needs k >= 2 words, got {c.shape[0]}")
        if len(np.unique(c, axis=0)) != len(c):
            raise InputError("vocabulary centroids must be distinct")
        c.setflags(write=False)
        object.__setattr__(self, "centroids", c)

    @property
    def k(self) -> int:
        return len(self.centroids)

    @property
    def bits(self) -> int:
        return DESCRIPTOR_BITS

    def assign(self, descriptors: np.ndarray) -> np.ndarray:
        """Nearest word per descriptor; ties go to the lower word index."""
        if len(descriptors) == 0:
            return np.zeros(0, dtype=np.intp)
        return np.argmin(hamming_matrix(descriptors, self.centroids), axis=1)


def _majority(descriptors: np.ndarray) -> np.ndarray:
    bits = np.unpackbits(descriptors, axis=1)
    return np.packbits(2 * bits.sum(axis=0) > len(bits))


def build_vocabulary(descriptors: np.ndarray, k: int, seed: int = 0) -> Vocabulary:
    """Binary k-medians under Hamming distance with bitwise-majority centroids."""
    X = np.asarray(descriptors, dtype=np.uint8).reshape(-1, DESCRIPTOR_BYTES)
    if k < 2:
        raise InputError(f"vocabulary size must be >= 2, got {k}")
    if len(X) < k:
        raise InputError(f"need at least {k} descriptors to build a vocabulary, got {len(X)}")
    rng = np.random.default_rng(seed)
    unique = np.unique(X, axis=0)
    if len(unique) < k:
        raise InputError(f"only {len(unique)} distinct descriptors for k = {k}")
    if len(X) > MAX_TRAINING_DESCRIPTORS:
        # a subsample must still hold k distinct descriptors, else train on everything
        sub = X[np.sort(rng.choice(len(X), MAX_TRAINING_DESCRIPTORS, replace=False))]
        sub_unique = np.unique(sub, axis=0)
        if len(sub_unique) >= k:
            X, unique = sub, sub_unique

    centroids = unique[np.sort(rng.choice(len(unique), k, replace=False))]
    labels = None
    for it in range(1, MAX_KMEDIANS_ITERATIONS + 1):
        new_labels = np.argmin(hamming_matrix(X, centroids), axis=1)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        updated = centroids.copy()
        for c in range(k):
            members = X[labels == c]
            if len(members):
                updated[c] = _majority(members)
        # a word that collapses onto another keeps its previous value
        _, first = np.unique(updated, axis=0, return_index=True)
        dup = np.setdiff1d(np.arange(k), first)
        updated[dup] = centroids[dup]
        if len(np.unique(updated, axis=0)) != k:
            updated = centroids
        centroids = updated
    logger.info("vocabulary: k=%d from %d descriptors, %d iterations", k, len(X), it)
    return Vocabulary(centroids)


@dataclass(frozen=True, eq=False)
class BoVWHistogram:
    frame_id: int
    values: np.ndarray  # (k,), L1-normalised
    empty: bool = False

    def __post_init__(self):
        self.values.setflags(write=False)


def histogram(features: Features, vocabulary: Vocabulary, frame_id: int) -> BoVWHistogram:
    counts = np.bincount(vocabulary.assign(features.descriptors), minlength=vocabulary.k).astype(float)
    total = counts.sum()
    if total == 0:
        return BoVWHistogram(frame_id, counts, empty=True)
    return BoVWHistogram(frame_id, counts / total)


@dataclass(frozen=True)
class Retrieval:
    frame_id: int
    distance: float


@dataclass
class FrameDatabase:
    """Histograms indexed by frame id. Single writer; queries are read-only."""

    vocabulary: Vocabulary
    _ids: list[int] = field(default_factory=list, init=False, repr=False)
    _rows: list[np.ndarray] = field(default_factory=list, init=False, repr=False)

    def __len__(self) -> int:
        return len(self._ids)

    def add(self, hist: BoVWHistogram) -> None:
        if hist.values.shape != (self.vocabulary.k,):
            raise InputError(f"histogram has {hist.values.size} bins, vocabulary has {self.vocabulary.k}")
        if hist.empty:
            logger.debug("frame %d has no features, not indexed", hist.frame_id)
            return
        self._ids.append(hist.frame_id)
        self._rows.append(hist.values)

    def query(
        self, hist: BoVWHistogram, top_k: int = DEFAULT_TOP_K, exclude_within: Optional[float] = None
    ) -> list[Retrieval]:
        """Ranked by (L1 distance, frame id). ``exclude_within`` drops frames with
        |id - query id| <= that radius; None disables the suppression."""
        if not self._ids or hist.empty:
            return []
        ids = np.asarray(self._ids)
        dist = np.abs(np.stack(self._rows) - hist.values[None, :]).sum(axis=1)
        keep = np.ones(len(ids), dtype=bool)
        if exclude_within is not None:
            keep = np.abs(ids - hist.frame_id) > exclude_within
        ids, dist = ids[keep], dist[keep]
        order = np.lexsort((ids, dist))[:top_k]
        return [Retrieval(int(ids[o]), float(dist[o])) for o in order]


@dataclass(frozen=True)
class LoopCandidate:
    i: int
    j: int
    matches: int
    passed: bool

    def __post_init__(self):
        if not self.i < self.j:
            raise InputError(f"loop candidate needs i < j, got ({self.i}, {self.j})")


def count_matches(a: Features, b: Features, ratio: float = DEFAULT_RATIO) -> int:
    """Ratio-test matches from a into b: nearest d1 accepted iff d1 < ratio * d2."""
    if len(a) == 0 or len(b) < 2:
        return 0
    D = hamming_matrix(a.descriptors, b.descriptors)
    two = np.partition(D, 1, axis=1)[:, :2]
    return int(np.count_nonzero(two[:, 0] < ratio * two[:, 1]))


def verify(
    features_a: Features,
    features_b: Features,
    ratio: float = DEFAULT_RATIO,
    n_th: int = DEFAULT_N_TH,
    i: int = 0,
    j: int = 1,
) -> LoopCandidate:
    matches = count_matches(features_a, features_b, ratio)
    return LoopCandidate(i, j, matches, matches >= n_th)


def detect_loops(
    frames: Sequence[Features],
    vocabulary: Vocabulary,
    t_loop: float,
    n_th: int = DEFAULT_N_TH,
    ratio: float = DEFAULT_RATIO,
    top_k: int = DEFAULT_TOP_K,
    keep_failed: bool = False,
) -> list[LoopCandidate]:
    """Verified loop pairs (i < j), sorted by (i, j)."""
    if len(frames) < 2:
        raise InputError(f"loop detection needs at least 2 frames, got {len(frames)}")
    if not math.isfinite(t_loop) or t_loop >= len(frames) - 1:
        return []

    hists = [histogram(f, vocabulary, k) for k, f in enumerate(frames)]
    db = FrameDatabase(vocabulary)
    for h in hists:
        db.add(h)

    pairs = set()
    for h in hists:
        for hit in db.query(h, top_k, exclude_within=t_loop):
            if abs(hit.frame_id - h.frame_id) > t_loop:
                pairs.add((min(h.frame_id, hit.frame_id), max(h.frame_id, hit.frame_id)))

    out = []
    for i, j in sorted(pairs):
        cand = verify(frames[i], frames[j], ratio, n_th, i, j)
        if cand.passed or keep_failed:
            out.append(cand)
    logger.info(
        "loop detection: %d retrieved pairs, %d passed (N_th=%d, ratio=%.2f)",
        len(pairs),
        sum(c.passed for c in out),
        n_th,
        ratio,
    )
    return out
