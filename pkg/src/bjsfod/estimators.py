"""FOD estimators: SHridge (BIC-tuned ridge), BJS (blockwise James-Stein
shrinkage with one-step sharpening) and SCSD (SHridge + superCSD).

Coefficient vectors are plain 1-d arrays in the level-blocked layout of
:mod:`bjsfod.sphere`.  The functions below are the reference, one-voxel
formulation; :class:`DeconvolutionDesign` caches everything that depends
only on the gradient table and kernel so that many voxels can be fitted
against one shared precomputation.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy import linalg

from . import kernels
from .model import ResponseKernel, build_r_matrix
from .sphere import (
    LevelBlockIndex,
    ShBasisMatrix,
    SphericalGrid,
    eval_sh_basis,
    n_coefficients,
    sh_degrees,
    upper_hemisphere_mask,
)

R_UNDERFLOW = 1e-12
ESTIMATORS = ("bjs", "shridge", "scsd")


class KernelLevelError(ValueError):
    """The response kernel vanishes at some level, so it cannot be inverted."""

    def __init__(self, level: int, value: float):
        super().__init__(f"response coefficient r_{level} = {value:.3g} underflows; "
                         f"level {level} is unrecoverable (lower l_max)")
        self.level = level


class SharpeningRankError(np.linalg.LinAlgError):
    """The augmented sharpening system is rank deficient."""


def default_ridge_grid() -> tuple[float, ...]:
    return tuple(np.logspace(-6, 2, 100))


@dataclass(frozen=True)
class FitConfig:
    """Estimator choice and tuning constants.

    ``scsd_threshold_mode`` is ``"absolute"`` (threshold FOD values at
    ``scsd_tau``) or ``"mean-relative"`` (at ``scsd_tau`` times the mean FOD
    value).  ``sharpen_threshold`` > 0 additionally suppresses small positive
    values (below that multiple of the mean) in the BJS sharpening step.
    """

    estimator: str = "bjs"
    l_max: int = 10
    l_max_super: int = 12
    l0: int = 4
    c: float = 2.0
    ridge_grid: tuple[float, ...] = field(default_factory=default_ridge_grid)
    scsd_tau: float = 0.1
    scsd_lambda: float = 1.0
    scsd_max_iters: int = 50
    scsd_threshold_mode: str = "mean-relative"
    sharpen_threshold: float = 0.0

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}")
        for name in ("l_max", "l_max_super", "l0"):
            v = getattr(self, name)
            if int(v) != v or v < 0 or v % 2:
                raise ValueError(f"{name} must be a nonnegative even integer")
        if self.l_max_super < self.l_max:
            raise ValueError("l_max_super must be >= l_max")
        if self.l0 < 2:
            raise ValueError("l0 must be >= 2")
        if not self.c > 1:
            raise ValueError("c must exceed 1")
        if len(self.ridge_grid) == 0 or min(self.ridge_grid) < 0:
            raise ValueError("ridge grid must be nonempty and nonnegative")
        if self.scsd_threshold_mode not in ("absolute", "mean-relative"):
            raise ValueError("scsd_threshold_mode must be 'absolute' or 'mean-relative'")
        object.__setattr__(self, "ridge_grid", tuple(float(v) for v in self.ridge_grid))

    def with_(self, **kw) -> "FitConfig":
        return replace(self, **kw)


@dataclass(frozen=True)
class TransformedObservations:
    """``z = K y`` with ``Var(z) = sigma^2 V``."""

    z: np.ndarray
    v: np.ndarray
    sigma2_hat: float

    @property
    def l_max(self) -> int:
        return int(round((np.sqrt(8 * len(self.z) + 1) - 3) / 2))


def ridge_penalty(l_max: int) -> np.ndarray:
    """Diagonal of the Laplace-Beltrami penalty, ``l^2 (l+1)^2`` per level."""
    l = sh_degrees(l_max).astype(np.float64)
    return (l * (l + 1)) ** 2


def _basis_values(basis) -> np.ndarray:
    return basis.values if isinstance(basis, ShBasisMatrix) else np.asarray(basis, dtype=np.float64)


def _check_r(r_diag: np.ndarray) -> None:
    l_max = int(round((np.sqrt(8 * len(r_diag) + 1) - 3) / 2))
    for l, start, _ in LevelBlockIndex(l_max).blocks:
        if abs(r_diag[start]) < R_UNDERFLOW:
            raise KernelLevelError(l, r_diag[start])


def _ls_rank(Phi: np.ndarray) -> int:
    return int(np.linalg.matrix_rank(Phi))


# --------------------------------------------------------------------------
# reference one-voxel estimators

def estimate_noise_variance(y, basis) -> float:
    """Mean squared OLS residual, ``||y - H y||^2 / (n - rank(Phi))``."""
    Phi = _basis_values(basis)
    y = np.asarray(y, dtype=np.float64)
    rank = _ls_rank(Phi)
    if len(y) <= rank:
        raise ValueError(f"need more measurements ({len(y)}) than basis rank ({rank})")
    Q = np.linalg.qr(Phi)[0][:, :rank]
    res = y - Q @ (Q.T @ y)
    return float(res @ res / (len(y) - rank))


def shridge_fit(y, basis, r, lam: float) -> np.ndarray:
    """Penalized deconvolution ``(R Phi'Phi R + lam P)^-1 R Phi' y``."""
    Phi = _basis_values(basis)
    r = np.asarray(r, dtype=np.float64)
    l_max = int(round((np.sqrt(8 * Phi.shape[1] + 1) - 3) / 2))
    X = Phi * r
    A = X.T @ X + lam * np.diag(ridge_penalty(l_max))
    try:
        return linalg.solve(A, X.T @ np.asarray(y, dtype=np.float64), assume_a="pos")
    except linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"penalized system singular at lambda={lam}") from exc


def _bic(rss: float, df: float, n: int) -> float:
    return n * np.log(max(rss, np.finfo(float).tiny) / n) + df * np.log(n)


def shridge_bic_select(y, basis, r, grid) -> tuple[float, np.ndarray]:
    """Grid-search lambda minimizing BIC with ``df = trace(hat matrix)``.

    Ties go to the first grid entry.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("empty lambda grid")
    Phi = _basis_values(basis)
    y = np.asarray(y, dtype=np.float64)
    X = Phi * np.asarray(r, dtype=np.float64)
    A = X.T @ X
    Xty = X.T @ y
    P = np.diag(ridge_penalty(int(round((np.sqrt(8 * Phi.shape[1] + 1) - 3) / 2))))
    best = (np.inf, None, None)
    for lam in grid:
        cf = linalg.cho_factor(A + lam * P)
        f = linalg.cho_solve(cf, Xty)
        df = float(np.trace(linalg.cho_solve(cf, A)))
        res = y - X @ f
        score = _bic(float(res @ res), df, len(y))
        if score < best[0]:
            best = (score, lam, f)
    return best[1], best[2]


def bjs_transform(y, basis, r) -> TransformedObservations:
    """OLS deconvolution ``z = R^-1 (Phi'Phi)^-1 Phi' y`` and its covariance."""
    Phi = _basis_values(basis)
    r = np.asarray(r, dtype=np.float64)
    _check_r(r)
    y = np.asarray(y, dtype=np.float64)
    if len(y) <= Phi.shape[1]:
        raise ValueError(f"need n > L (n={len(y)}, L={Phi.shape[1]})")
    G_inv = np.linalg.inv(Phi.T @ Phi)
    z = (G_inv @ (Phi.T @ y)) / r
    V = G_inv / np.outer(r, r)
    V = 0.5 * (V + V.T)
    return TransformedObservations(z, V, estimate_noise_variance(y, Phi))


def block_eigenvalues(V: np.ndarray, l_max: int) -> list[np.ndarray]:
    """Eigenvalues (descending) of every diagonal level block of ``V``."""
    out = []
    for _, start, n in LevelBlockIndex(l_max).blocks:
        w = np.linalg.eigvalsh(V[start:start + n, start:start + n])[::-1]
        out.append(w)
    return out


def shrinkage_thresholds(eigs: list[np.ndarray], l_max: int, c: float) -> np.ndarray:
    """Per-level ``||lam||_1 + 2 ||lam||_2 sqrt(t) + 2 ||lam||_inf t`` with
    ``t = c log(2l + 1)``; multiply by sigma^2 for the shrinkage numerator."""
    out = np.empty(len(eigs))
    for k, (l, w) in enumerate(zip(range(0, l_max + 1, 2), eigs)):
        t = c * np.log(2 * l + 1)
        w = np.abs(w)
        out[k] = w.sum() + 2 * np.sqrt(w @ w) * np.sqrt(t) + 2 * w.max() * t
    return out


def shrinkage_factors(z: np.ndarray, thresholds: np.ndarray, sigma2: float, l_max: int, l0: int) -> np.ndarray:
    """Positive-part James-Stein factor per level (1 for levels <= l0)."""
    out = np.ones(len(thresholds))
    for k, (l, start, n) in enumerate(LevelBlockIndex(l_max).blocks):
        if l <= l0:
            continue
        zz = float(z[start:start + n] @ z[start:start + n])
        out[k] = 0.0 if zz == 0 else max(0.0, 1.0 - sigma2 * thresholds[k] / zz)
    return out


def bjs_shrink(t: TransformedObservations, cfg: FitConfig) -> np.ndarray:
    """Blockwise positive-part James-Stein shrinkage of the levels above ``l0``."""
    l_max = t.l_max
    thr = shrinkage_thresholds(block_eigenvalues(t.v, l_max), l_max, cfg.c)
    fac = shrinkage_factors(t.z, thr, t.sigma2_hat, l_max, cfg.l0)
    out = t.z.copy()
    for k, (_, start, n) in enumerate(LevelBlockIndex(l_max).blocks):
        out[start:start + n] *= fac[k]
    return out


def _pad(f: np.ndarray, L: int) -> np.ndarray:
    out = np.zeros(L)
    out[: len(f)] = f
    return out


def _axial_half(grid: SphericalGrid) -> tuple[np.ndarray, np.ndarray]:
    """Rows representing each axis once, with their multiplicity in ``grid``."""
    d = grid.directions
    keep = upper_hemisphere_mask(d)
    rep = d[keep]
    mult = np.ones(len(rep))
    other = d[~keep]
    if len(other):
        from scipy.spatial import cKDTree

        dist, idx = cKDTree(rep).query(-other)
        matched = dist < 1e-9
        np.add.at(mult, idx[matched], 1.0)
        if not matched.all():
            rep = np.vstack([rep, other[~matched]])
            mult = np.concatenate([mult, np.ones((~matched).sum())])
    return rep, mult


def _sharpen_solve(G0: np.ndarray, rhs: np.ndarray, extra: np.ndarray, n_rows: float) -> np.ndarray:
    L = G0.shape[0]
    if n_rows < L:
        raise SharpeningRankError(
            f"augmented sharpening system has {n_rows:g} rows for {L} unknowns; "
            "use a denser grid or a lower l_max_super")
    G = G0 + extra
    try:
        cf = linalg.cho_factor(G, check_finite=False)
    except linalg.LinAlgError as exc:
        raise SharpeningRankError("augmented sharpening system is not positive definite") from exc
    d = np.abs(np.diag(cf[0]))
    if d.min() <= 1e-7 * d.max():
        raise SharpeningRankError("augmented sharpening system is numerically rank deficient")
    return linalg.cho_solve(cf, rhs, check_finite=False)


def sharpen_one_step(f_hat, y, gradients, kernel: ResponseKernel, dense: SphericalGrid,
                     cfg: FitConfig) -> np.ndarray:
    """One-step super-resolution sharpening.

    ``f_hat`` is evaluated on ``dense``; the coefficients at ``l_max_super``
    minimize ``||y - Phi_s R_s f||^2 + ||Phi_neg f||^2`` where ``Phi_neg``
    holds the dense-grid rows at which ``f_hat`` is negative.
    """
    f_hat = np.asarray(f_hat, dtype=np.float64)
    g = gradients.directions if hasattr(gradients, "directions") else gradients
    Ls = n_coefficients(cfg.l_max_super)
    Phis = eval_sh_basis(g, cfg.l_max_super).values
    X = Phis * build_r_matrix(kernel.coefficients(cfg.l_max_super), cfg.l_max_super)
    D = eval_sh_basis(dense.directions, cfg.l_max_super).values
    F = D[:, : len(f_hat)] @ f_hat
    thr = cfg.sharpen_threshold * F.mean() if cfg.sharpen_threshold > 0 else 0.0
    neg = F < thr
    Dn = D[neg]
    return _sharpen_solve(X.T @ X, X.T @ np.asarray(y, dtype=np.float64), Dn.T @ Dn,
                          len(y) + int(neg.sum()))


def bjs_estimate(y, gradients, kernel: ResponseKernel, dense: SphericalGrid, cfg: FitConfig) -> np.ndarray:
    """Transform, shrink and sharpen; returns coefficients at ``l_max_super``."""
    g = gradients.directions if hasattr(gradients, "directions") else gradients
    basis = eval_sh_basis(g, cfg.l_max)
    r = build_r_matrix(kernel.coefficients(cfg.l_max), cfg.l_max)
    f = bjs_shrink(bjs_transform(y, basis, r), cfg)
    return sharpen_one_step(f, y, g, kernel, dense, cfg)


class ScsdFit(NamedTuple):
    coefficients: np.ndarray
    iterations: int
    converged: bool


def _scsd_mask(F: np.ndarray, cfg: FitConfig) -> np.ndarray:
    tau = cfg.scsd_tau if cfg.scsd_threshold_mode == "absolute" else cfg.scsd_tau * F.mean()
    return F <= tau


def _robust_spd_solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        return linalg.solve(A, b, assume_a="pos", check_finite=False)
    except (linalg.LinAlgError, ValueError):
        return np.linalg.lstsq(A, b, rcond=None)[0]


def super_csd(f0, y, gradients, kernel: ResponseKernel, dense: SphericalGrid, cfg: FitConfig) -> ScsdFit:
    """Iterative super-resolution CSD started from ``f0``.

    Coefficients of ``f0`` above level 4 are zeroed, then each iteration
    solves ``min ||y - Phi_s R_s f||^2 + lam ||Phi_k f||^2`` where ``Phi_k``
    keeps the dense-grid rows whose current FOD value is ``<= tau``.  Stops
    when that row set repeats, or after ``scsd_max_iters`` solves.
    """
    g = gradients.directions if hasattr(gradients, "directions") else gradients
    Ls = n_coefficients(cfg.l_max_super)
    Phis = eval_sh_basis(g, cfg.l_max_super).values
    X = Phis * build_r_matrix(kernel.coefficients(cfg.l_max_super), cfg.l_max_super)
    A = X.T @ X
    b = X.T @ np.asarray(y, dtype=np.float64)
    D = eval_sh_basis(dense.directions, cfg.l_max_super).values
    f = _pad(np.asarray(f0, dtype=np.float64), Ls)
    f[n_coefficients(4):] = 0.0
    mask = _scsd_mask(D @ f, cfg)
    for it in range(1, cfg.scsd_max_iters + 1):
        Dm = D[mask]
        f = _robust_spd_solve(A + cfg.scsd_lambda * (Dm.T @ Dm), b)
        new = _scsd_mask(D @ f, cfg)
        if np.array_equal(new, mask):
            return ScsdFit(f, it, True)
        mask = new
    return ScsdFit(f, cfg.scsd_max_iters, False)


# --------------------------------------------------------------------------
# shared precomputation

class DeconvolutionDesign:
    """Per-design precomputation shared read-only by any number of voxel fits.

    Parameters
    ----------
    gradients : GradientTable or (n, 3) array
        Diffusion-weighted directions (b0 volumes removed).
    kernel : ResponseKernel
    cfg : FitConfig
    dense : SphericalGrid
        Evaluation grid for sharpening and superCSD (typically the 2562
        vertices of a subdivision-4 icosphere).
    """

    def __init__(self, gradients, kernel: ResponseKernel, cfg: FitConfig, dense: SphericalGrid):
        g = gradients.directions if hasattr(gradients, "directions") else np.asarray(gradients)
        self.directions = g
        self.kernel = kernel
        self.cfg = cfg
        self.dense = dense
        n = len(g)
        L, Ls = n_coefficients(cfg.l_max), n_coefficients(cfg.l_max_super)
        self.n, self.L, self.Ls = n, L, Ls
        self.blocks = LevelBlockIndex(cfg.l_max, cfg.l0).blocks

        self.phi = eval_sh_basis(g, cfg.l_max).values
        self.r_diag = build_r_matrix(kernel.coefficients(cfg.l_max), cfg.l_max)
        _check_r(self.r_diag)
        self.rank = _ls_rank(self.phi)
        if n <= L or self.rank < L:
            raise ValueError(f"design needs n > L and full column rank (n={n}, L={L}, rank={self.rank})")

        gram_inv = np.linalg.inv(self.phi.T @ self.phi)
        self.K = (gram_inv @ self.phi.T) / self.r_diag[:, None]
        V = gram_inv / np.outer(self.r_diag, self.r_diag)
        self.V = 0.5 * (V + V.T)
        self.q = np.linalg.qr(self.phi)[0]
        self.block_eigs = block_eigenvalues(self.V, cfg.l_max)
        self.thresholds = shrinkage_thresholds(self.block_eigs, cfg.l_max, cfg.c)
        starts = np.array([s for _, s, _ in self.blocks], dtype=np.int64)
        lens = np.array([m for _, _, m in self.blocks], dtype=np.int64)
        shrunk = np.array([l > cfg.l0 for l, _, _ in self.blocks])
        self._starts, self._lens = starts[shrunk], lens[shrunk]
        self._shrink_thr = self.thresholds[shrunk]

        # super-resolution data term
        self.phi_s = eval_sh_basis(g, cfg.l_max_super).values
        self.rs_diag = build_r_matrix(kernel.coefficients(cfg.l_max_super), cfg.l_max_super)
        Xs = self.phi_s * self.rs_diag
        self.Xs = Xs
        self.Xs_t = np.ascontiguousarray(Xs.T)
        self.G0 = Xs.T @ Xs

        # dense grid, one row per axis weighted by multiplicity
        rep, mult = _axial_half(dense)
        self.dense_basis = np.ascontiguousarray(eval_sh_basis(rep, cfg.l_max_super).values)
        self.dense_mult = mult
        self.dense_weighted = np.ascontiguousarray(self.dense_basis * np.sqrt(mult)[:, None])
        self.dense_gram = self.dense_weighted.T @ self.dense_weighted

        self._ridge = None

    # -- BJS -------------------------------------------------------------
    def transform(self, y: np.ndarray) -> tuple[np.ndarray, float]:
        z = self.K @ y
        res = y - self.q @ (self.q.T @ y)
        return z, float(res @ res) / (self.n - self.rank)

    def shrink(self, z: np.ndarray, sigma2: float) -> np.ndarray:
        out = z.copy()
        kernels.block_shrink(out[None, :], self._starts, self._lens, self._shrink_thr,
                             np.array([sigma2]))
        return out

    def sharpen(self, f: np.ndarray, y: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        F = self.dense_basis[:, : len(f)] @ f
        thr = cfg.sharpen_threshold * F.mean() if cfg.sharpen_threshold > 0 else 0.0
        neg = F < thr
        extra, n_neg = kernels.masked_gram(self.dense_weighted, self.dense_gram, neg, self.dense_mult)
        return _sharpen_solve(self.G0, self.Xs_t @ y, extra, self.n + n_neg)

    def fit_bjs(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (self.n,):
            raise ValueError(f"expected {self.n} signals, got shape {y.shape}")
        # a batch of one goes through the same (possibly compiled) kernel as bulk fits
        f, ok = kernels.bjs_batch(self, y[None, :])
        if not ok[0]:
            raise SharpeningRankError("augmented sharpening system is rank deficient")
        return f[0]

    # -- SHridge ---------------------------------------------------------
    def _ridge_cache(self):
        if self._ridge is None:
            X = self.phi * self.r_diag
            A = X.T @ X
            P = np.diag(ridge_penalty(self.cfg.l_max))
            facs, dfs = [], []
            for lam in self.cfg.ridge_grid:
                cf = linalg.cho_factor(A + lam * P)
                facs.append(cf)
                dfs.append(float(np.trace(linalg.cho_solve(cf, A))))
            self._ridge = (X, facs, np.array(dfs))
        return self._ridge

    def fit_shridge(self, y, return_lambda: bool = False):
        """SHridge at ``l_max`` with the BIC-selected lambda."""
        y = np.asarray(y, dtype=np.float64)
        X, facs, dfs = self._ridge_cache()
        Xty = X.T @ y
        n = self.n
        best, best_k, best_f = np.inf, 0, None
        for k, cf in enumerate(facs):
            f = linalg.cho_solve(cf, Xty, check_finite=False)
            res = y - X @ f
            score = _bic(float(res @ res), dfs[k], n)
            if score < best:
                best, best_k, best_f = score, k, f
        if return_lambda:
            return self.cfg.ridge_grid[best_k], best_f
        return best_f

    # -- SCSD ------------------------------------------------------------
    def super_csd(self, f0: np.ndarray, y: np.ndarray) -> ScsdFit:
        cfg = self.cfg
        f = _pad(f0, self.Ls)
        f[n_coefficients(4):] = 0.0
        b = self.Xs_t @ y
        mask = _scsd_mask(self.dense_basis @ f, cfg)
        for it in range(1, cfg.scsd_max_iters + 1):
            extra, _ = kernels.masked_gram(self.dense_weighted, self.dense_gram, mask, self.dense_mult)
            f = _robust_spd_solve(self.G0 + cfg.scsd_lambda * extra, b)
            new = _scsd_mask(self.dense_basis @ f, cfg)
            if np.array_equal(new, mask):
                return ScsdFit(f, it, True)
            mask = new
        return ScsdFit(f, cfg.scsd_max_iters, False)

    def fit_scsd(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        return self.super_csd(self.fit_shridge(y), y).coefficients

    # -- dispatch --------------------------------------------------------
    def fit(self, y, estimator: str | None = None) -> np.ndarray:
        est = estimator or self.cfg.estimator
        if est == "bjs":
            return self.fit_bjs(y)
        if est == "shridge":
            return self.fit_shridge(y)
        if est == "scsd":
            return self.fit_scsd(y)
        raise ValueError(f"unknown estimator {est!r}")

    def fit_bjs_batch(self, Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """BJS for a ``(voxels, n)`` array.

        Returns ``(coefficients, ok)``; rows whose sharpening system is rank
        deficient are zero with ``ok`` False.
        """
        Y = np.ascontiguousarray(Y, dtype=np.float64)
        return kernels.bjs_batch(self, Y)
