"""Diffusion signal models: single tensor, response kernel, forward synthesis
and Rician noise."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import special

from .sphere import GradientTable, as_unit_directions, n_coefficients

SIGNAL_FLOOR = 1e-6


class ResponseEstimationError(ValueError):
    """No voxel passed the single-fiber filters."""


# --------------------------------------------------------------------------
# single tensor

def _tensor_design(gradients: GradientTable) -> np.ndarray:
    x, y, z = gradients.directions.T
    mono = np.stack([x * x, y * y, z * z, 2 * x * y, 2 * x * z, 2 * y * z], axis=1)
    return gradients.bvals[:, None] * mono


def single_tensor_fit(signals, s0: float, gradients: GradientTable) -> np.ndarray:
    """Log-linear least-squares diffusion tensor (mm^2/s).

    Signals are floored at ``1e-6 * s0`` before taking logs.  The result is
    not projected onto positive definite matrices.
    """
    S = np.asarray(signals, dtype=np.float64)
    if S.shape != (len(gradients),):
        raise ValueError(f"expected {len(gradients)} signals, got {S.shape}")
    if len(S) < 7:
        raise ValueError("single tensor fit needs at least 7 measurements")
    X = _tensor_design(gradients)
    if np.linalg.matrix_rank(X) < 6:
        raise np.linalg.LinAlgError("gradient design does not determine a tensor (rank < 6)")
    t = -np.log(np.maximum(S, SIGNAL_FLOOR * s0) / s0)
    coef = np.linalg.lstsq(X, t, rcond=None)[0]
    dxx, dyy, dzz, dxy, dxz, dyz = coef
    return np.array([[dxx, dxy, dxz], [dxy, dyy, dyz], [dxz, dyz, dzz]])


def tensor_signal(D, s0: float, gradients: GradientTable) -> np.ndarray:
    g = gradients.directions
    return s0 * np.exp(-gradients.bvals * np.einsum("ij,jk,ik->i", g, np.asarray(D), g))


def fractional_anisotropy(t) -> float:
    """FA of a tensor (3x3) or of its three eigenvalues."""
    t = np.asarray(t, dtype=np.float64)
    ev = np.linalg.eigvalsh(t) if t.shape == (3, 3) else t
    denom = np.sum(ev * ev)
    if denom == 0:
        return 0.0
    l1, l2, l3 = ev
    num = (l1 - l2) ** 2 + (l2 - l3) ** 2 + (l3 - l1) ** 2
    return float(np.sqrt(0.5 * num / denom))


# --------------------------------------------------------------------------
# response kernel

def response_profile(t, lambda_major: float, lambda_minor: float, b: float, s0: float = 1.0):
    """R(cos theta) for a tensor aligned with the fiber axis."""
    t = np.asarray(t, dtype=np.float64)
    return s0 * np.exp(-b * (lambda_major * t * t + lambda_minor * (1.0 - t * t)))


def _legendre_all(l_max: int, x: np.ndarray) -> np.ndarray:
    P = np.empty((l_max + 1, x.size))
    P[0] = 1.0
    if l_max >= 1:
        P[1] = x
    for l in range(2, l_max + 1):
        P[l] = ((2 * l - 1) * x * P[l - 1] - (l - 1) * P[l - 2]) / l
    return P


@lru_cache(maxsize=8)
def _gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre rule on [-1, 1] with about ``n`` nodes.

    Large rules are composite (64-node panels): the nodes of very high order
    single rules carry ~1e-13 relative error, which would dominate the tiny
    high-level coefficients.
    """
    if n <= 128:
        t, w = special.roots_legendre(n)
    else:
        x, wx = special.roots_legendre(64)
        edges = np.linspace(-1.0, 1.0, -(-n // 64) + 1)
        a, b = edges[:-1, None], edges[1:, None]
        t = (0.5 * (b - a) * x + 0.5 * (a + b)).ravel()
        w = (0.5 * (b - a) * wx).ravel()
    t.flags.writeable = False
    w.flags.writeable = False
    return t, w


def response_sh_coefficients(lambda_major: float, lambda_minor: float, b: float,
                             l_max: int, s0: float = 1.0,
                             quadrature_points: int = 4096) -> np.ndarray:
    """``r_l = <R, Phi_l0>`` for even ``l <= l_max`` by Gauss-Legendre in cos(theta).

    ``quadrature_points`` above 128 use a composite rule of 64-node panels.
    """
    t, w = _gauss_legendre(int(quadrature_points))
    R = response_profile(t, lambda_major, lambda_minor, b, s0)
    P = _legendre_all(l_max, t)[0::2]
    ls = np.arange(0, l_max + 1, 2)
    norm = np.sqrt((2 * ls + 1) / (4 * np.pi))
    return 2 * np.pi * norm * (P @ (w * R))


@dataclass(frozen=True)
class ResponseKernel:
    """Axially symmetric single-fiber response.

    Attributes
    ----------
    lambda_major, lambda_minor : float
        Tensor eigenvalues along and across the fiber (mm^2/s).
    b : float
        b-value (s/mm^2).
    s0 : float
        Non-weighted intensity (1 after per-voxel normalization).
    l_max : int
        Highest level stored in ``r``.
    """

    lambda_major: float
    lambda_minor: float
    b: float
    s0: float = 1.0
    l_max: int = 16
    r: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not (self.lambda_major >= self.lambda_minor > 0):
            raise ValueError("need lambda_major >= lambda_minor > 0")
        if self.b <= 0 or self.s0 <= 0:
            raise ValueError("b and s0 must be positive")
        if self.r is None:
            r = response_sh_coefficients(self.lambda_major, self.lambda_minor, self.b,
                                         self.l_max, self.s0)
            object.__setattr__(self, "r", r)
        else:
            object.__setattr__(self, "r", np.asarray(self.r, dtype=np.float64))

    def coefficients(self, l_max: int) -> np.ndarray:
        if l_max <= self.l_max:
            return self.r[: l_max // 2 + 1]
        return response_sh_coefficients(self.lambda_major, self.lambda_minor, self.b, l_max, self.s0)

    def profile(self, t):
        return response_profile(t, self.lambda_major, self.lambda_minor, self.b, self.s0)

    def to_json(self) -> str:
        return json.dumps({
            "lambda_major": self.lambda_major, "lambda_minor": self.lambda_minor,
            "b": self.b, "s0": self.s0, "l_max": self.l_max, "r": [float(v) for v in self.r],
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ResponseKernel":
        d = json.loads(text)
        return cls(float(d["lambda_major"]), float(d["lambda_minor"]), float(d["b"]),
                   float(d.get("s0", 1.0)), int(d["l_max"]), d.get("r"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "ResponseKernel":
        return cls.from_json(Path(path).read_text())


def build_r_matrix(r, l_max: int) -> np.ndarray:
    """Diagonal of the convolution matrix: ``r_l sqrt(4 pi / (2l+1))`` per level."""
    r = np.asarray(r, dtype=np.float64)
    if r.size < l_max // 2 + 1:
        raise ValueError(f"r has {r.size} levels, need {l_max // 2 + 1} for l_max={l_max}")
    out = np.empty(n_coefficients(l_max))
    for k, l in enumerate(range(0, l_max + 1, 2)):
        start = l * (l - 1) // 2
        out[start:start + 2 * l + 1] = r[k] * np.sqrt(4 * np.pi / (2 * l + 1))
    return out


def estimate_response(voxels: Sequence[tuple[np.ndarray, float]], gradients: GradientTable,
                      fa_threshold: float = 0.8, minor_ratio_threshold: float = 1.5,
                      l_max: int = 16) -> ResponseKernel:
    """Response kernel from single-fiber voxels.

    Each voxel is ``(signals, s0)`` with ``s0`` its mean b0 intensity.  Voxels
    with FA above ``fa_threshold`` and a ratio of the two smaller eigenvalues
    below ``minor_ratio_threshold`` are kept; the kernel eigenvalues are the
    medians of the leading eigenvalue and of the mean of the two smaller ones.
    """
    major, minor = [], []
    for signals, s0 in voxels:
        if not s0 > 0:
            continue
        D = single_tensor_fit(np.asarray(signals) / s0, 1.0, gradients)
        ev = np.sort(np.linalg.eigvalsh(D))[::-1]
        if ev[2] <= 0:
            continue
        if fractional_anisotropy(ev) > fa_threshold and ev[1] / ev[2] < minor_ratio_threshold:
            major.append(ev[0])
            minor.append(0.5 * (ev[1] + ev[2]))
    if not major:
        raise ResponseEstimationError(
            f"no voxel with FA > {fa_threshold} and minor eigenvalue ratio < "
            f"{minor_ratio_threshold}; relax the thresholds or supply a kernel")
    return ResponseKernel(float(np.median(major)), float(np.median(minor)), gradients.b, 1.0, l_max)


# --------------------------------------------------------------------------
# synthesis and noise

@dataclass(frozen=True)
class FiberConfiguration:
    """Weighted sum of axial point masses."""

    directions: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        d = as_unit_directions(self.directions)
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        if len(d) < 1 or w.shape != (len(d),) or np.any(w < 0):
            raise ValueError("need one nonnegative weight per fiber")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("fiber weights must sum to 1")
        object.__setattr__(self, "directions", d)
        object.__setattr__(self, "weights", w)

    @classmethod
    def equal(cls, directions) -> "FiberConfiguration":
        d = np.atleast_2d(directions)
        return cls(d, np.full(len(d), 1.0 / len(d)))

    @classmethod
    def symmetric(cls, n_fibers: int, separation_deg: float) -> "FiberConfiguration":
        """Fibers spread symmetrically around z with the given pairwise angle.

        Two fibers lie in the x-z plane; three fibers sit at equal azimuths
        around z.
        """
        sep = np.radians(separation_deg)
        if n_fibers == 1:
            return cls.equal([[0.0, 0.0, 1.0]])
        if n_fibers == 2:
            h = sep / 2
            return cls.equal([[np.sin(h), 0, np.cos(h)], [-np.sin(h), 0, np.cos(h)]])
        if n_fibers == 3:
            s2 = (1 - np.cos(sep)) / 1.5
            if not 0 < s2 <= 1:
                raise ValueError("three fibers cannot have this pairwise separation")
            st, ct = np.sqrt(s2), np.sqrt(1 - s2)
            az = np.radians([0.0, 120.0, 240.0])
            return cls.equal(np.stack([st * np.cos(az), st * np.sin(az), np.full(3, ct)], axis=1))
        raise ValueError("only 1-3 fibers supported")

    def sh_coefficients(self, l_max: int) -> np.ndarray:
        from .sphere import eval_sh_basis

        return self.weights @ eval_sh_basis(self.directions, l_max).values


def synthesize_signal(config: FiberConfiguration, kernel: ResponseKernel, gradients) -> np.ndarray:
    """Noiseless signal ``sum_k w_k R(x . d_k)`` at every gradient direction."""
    g = gradients.directions if isinstance(gradients, GradientTable) else as_unit_directions(gradients)
    return kernel.profile(g @ config.directions.T) @ config.weights


def make_rng(seed) -> np.random.Generator:
    """Counter-based (Philox) generator from an int or a sequence of ints."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def add_rician_noise(signal, s0: float, snr: float, seed) -> np.ndarray:
    """Magnitude of the signal plus complex Gaussian noise with sd ``s0 / snr``."""
    if not snr > 0:
        raise ValueError("snr must be positive")
    S = np.asarray(signal, dtype=np.float64)
    sigma = s0 / snr
    rng = make_rng(seed)
    e = rng.standard_normal((2,) + S.shape) * sigma
    return np.hypot(S + e[0], e[1])
