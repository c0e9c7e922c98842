"""Pure numpy implementations of the hot kernels (fallback backend)."""
import numpy as np
from scipy import linalg

NAME = "python"


def block_shrink(Z, starts, lens, thresholds, sigma2):
    """Positive-part James-Stein shrinkage, in place, of the given blocks of
    every row of ``Z`` (``voxels x L``)."""
    for s, n, t in zip(starts, lens, thresholds):
        blk = Z[:, s:s + n]
        zz = np.einsum("ij,ij->i", blk, blk)
        with np.errstate(divide="ignore", invalid="ignore"):
            fac = np.where(zz > 0, 1.0 - sigma2 * t / zz, 0.0)
        blk *= np.clip(fac, 0.0, None)[:, None]


def masked_gram(Dw, gram_full, mask, mult):
    """``sum_{i in mask} Dw_i Dw_i^T`` and the masked row count (with
    multiplicity).  The complement is used when it is the smaller set."""
    count = float(mult[mask].sum())
    k = int(mask.sum())
    if k <= len(mask) - k:
        sub = Dw[mask]
        return sub.T @ sub, count
    sub = Dw[~mask]
    return gram_full - sub.T @ sub, count


def strict_local_maxima(values, indptr, indices):
    """Vertices whose value exceeds every neighbour in the CSR neighbourhood."""
    values = np.asarray(values, dtype=np.float64)
    counts = np.diff(indptr)
    out = np.ones(len(values), dtype=bool)
    has = counts > 0
    if indices.size:
        nbr_max = np.maximum.reduceat(values[indices], indptr[:-1][has])
        out[has] = values[has] > nbr_max
    return out


def bjs_batch(design, Y):
    from .estimators import SharpeningRankError, _sharpen_solve

    V = Y.shape[0]
    Z = Y @ design.K.T
    R = Y - (Y @ design.q) @ design.q.T
    s2 = np.einsum("ij,ij->i", R, R) / (design.n - design.rank)
    block_shrink(Z, design._starts, design._lens, design._shrink_thr, s2)
    Fd = Z @ design.dense_basis[:, : design.L].T
    rhs = Y @ design.Xs
    out = np.zeros((V, design.Ls))
    ok = np.ones(V, dtype=bool)
    cfg = design.cfg
    for v in range(V):
        F = Fd[v]
        thr = cfg.sharpen_threshold * F.mean() if cfg.sharpen_threshold > 0 else 0.0
        neg = F < thr
        extra, n_neg = masked_gram(design.dense_weighted, design.dense_gram, neg, design.dense_mult)
        try:
            out[v] = _sharpen_solve(design.G0, rhs[v], extra, design.n + n_neg)
        except SharpeningRankError:
            ok[v] = False
    return out, ok
