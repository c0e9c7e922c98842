"""Peak directions of FODs on a dense mesh and matching to true fibers."""
from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations
from typing import NamedTuple, Sequence

import numpy as np

from . import kernels
from .sphere import SphericalGrid, acute_angle_deg, eval_sh_basis, k_hop_adjacency, n_coefficients

MERGE_ANGLE_DEG = 15.0


@dataclass(frozen=True)
class Peak:
    direction: np.ndarray
    value: float
    rank: int


def _canonical(d: np.ndarray) -> np.ndarray:
    for c in (d[2], d[1], d[0]):
        if abs(c) > 1e-12:
            return d if c > 0 else -d
    return d


class PeakFinder:
    """Mesh local-maximum peak detection with precomputed neighbourhoods.

    Parameters
    ----------
    dense : SphericalGrid
        Full-sphere grid with mesh faces.
    l_max : int
        Highest level of the coefficient vectors that will be passed in.
    rel_threshold : float
        Peaks below this fraction of the global maximum are discarded.
    neighborhood_hops : int
        A peak must be strictly larger than every vertex this many edges away.
    max_peaks : int
    merge_angle_deg : float
        Peaks closer than this (axially) are merged, keeping the larger.
    """

    def __init__(self, dense: SphericalGrid, l_max: int, rel_threshold: float = 0.25,
                 neighborhood_hops: int = 2, max_peaks: int = 4,
                 merge_angle_deg: float = MERGE_ANGLE_DEG):
        indptr, indices = dense.adjacency()
        self.indptr, self.indices = k_hop_adjacency(indptr, indices, neighborhood_hops)
        self.dense = dense
        self.l_max = l_max
        self.basis = np.ascontiguousarray(eval_sh_basis(dense.directions, l_max).values)
        self.rel_threshold = rel_threshold
        self.max_peaks = max_peaks
        self.cos_merge = np.cos(np.radians(merge_angle_deg))

    def values(self, f: np.ndarray) -> np.ndarray:
        f = np.asarray(f, dtype=np.float64)
        if len(f) > self.basis.shape[1]:
            raise ValueError("coefficient vector exceeds the finder's l_max")
        return self.basis[:, : len(f)] @ f

    def __call__(self, f) -> list[Peak]:
        F = self.values(f)
        top = F.max()
        if not top > 0:
            return []
        cand = np.flatnonzero(kernels.strict_local_maxima(F, self.indptr, self.indices))
        cand = cand[F[cand] >= self.rel_threshold * top]
        cand = cand[np.argsort(-F[cand], kind="stable")]
        dirs = self.dense.directions
        kept: list[int] = []
        for i in cand:
            if all(abs(dirs[i] @ dirs[j]) < self.cos_merge for j in kept):
                kept.append(int(i))
                if len(kept) == self.max_peaks:
                    break
        return [Peak(_canonical(dirs[i].copy()), float(F[i]), k) for k, i in enumerate(kept)]


_FINDERS: dict = {}


def detect_peaks(f, dense: SphericalGrid, rel_threshold: float = 0.25, neighborhood_hops: int = 2,
                 max_peaks: int = 4) -> list[Peak]:
    """Peaks of the FOD with coefficients ``f`` evaluated on ``dense``.

    An empty list means no peak (isotropic or flat FOD).
    """
    f = np.asarray(f, dtype=np.float64)
    l_max = int(round((np.sqrt(8 * len(f) + 1) - 3) / 2))
    if n_coefficients(l_max) != len(f):
        raise ValueError(f"{len(f)} is not a valid even-level coefficient count")
    key = (id(dense), l_max, rel_threshold, neighborhood_hops, max_peaks)
    hit = _FINDERS.get(key)
    if hit is None or hit[0] is not dense:
        if len(_FINDERS) > 32:
            _FINDERS.clear()
        hit = _FINDERS[key] = (dense, PeakFinder(dense, l_max, rel_threshold, neighborhood_hops, max_peaks))
    return hit[1](f)


class Match(NamedTuple):
    estimated: int
    truth: int
    angle: float


def match_peaks(estimated: Sequence, truth: Sequence) -> list[Match] | None:
    """Pair estimated and true directions minimizing the total acute angle.

    Returns None when the counts differ (the replicate is then excluded from
    angular error summaries).
    """
    est = [p.direction if isinstance(p, Peak) else np.asarray(p, dtype=np.float64) for p in estimated]
    tru = [np.asarray(t, dtype=np.float64) for t in truth]
    if len(est) != len(tru):
        return None
    if not est:
        return []
    ang = acute_angle_deg(np.array(est)[:, None, :], np.array(tru)[None, :, :])
    ang = np.atleast_2d(ang)
    best, best_perm = np.inf, None
    for perm in permutations(range(len(tru))):
        total = sum(ang[i, j] for i, j in enumerate(perm))
        if total < best - 1e-12:
            best, best_perm = total, perm
    return [Match(i, j, float(ang[i, j])) for i, j in enumerate(best_perm)]
