"""Real symmetric spherical harmonics, icosphere grids and angular helpers.

Coefficient vectors are laid out level by level (l = 0, 2, 4, ...) and,
within a level, by order m = -l, ..., l.  The column of ``(l, m)`` is
``l * (l + 1) // 2 + m``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

UNIT_TOL = 1e-9


def n_coefficients(l_max: int) -> int:
    """Number of even-level SH coefficients up to ``l_max``."""
    return (l_max + 1) * (l_max + 2) // 2


def sh_index(l: int, m: int) -> int:
    return l * (l + 1) // 2 + m


def _check_lmax(l_max) -> int:
    if int(l_max) != l_max or l_max < 0 or l_max % 2:
        raise ValueError(f"l_max must be a nonnegative even integer, got {l_max}")
    return int(l_max)


@dataclass(frozen=True)
class LevelBlockIndex:
    """Contiguous level blocks of a coefficient vector.

    ``blocks`` holds ``(l, start, length)`` triples with ``length = 2l + 1``.
    """

    l_max: int
    l0: int = 4

    @property
    def blocks(self) -> list[tuple[int, int, int]]:
        return [(l, l * (l - 1) // 2, 2 * l + 1) for l in range(0, self.l_max + 1, 2)]

    def levels(self) -> np.ndarray:
        """Level ``l`` of every coefficient."""
        return sh_degrees(self.l_max)


@lru_cache(maxsize=None)
def _degree_order(l_max: int) -> tuple[np.ndarray, np.ndarray]:
    ls, ms = [], []
    for l in range(0, l_max + 1, 2):
        for m in range(-l, l + 1):
            ls.append(l)
            ms.append(m)
    ls_a = np.array(ls, dtype=np.int64)
    ms_a = np.array(ms, dtype=np.int64)
    ls_a.flags.writeable = False
    ms_a.flags.writeable = False
    return ls_a, ms_a


def sh_degrees(l_max: int) -> np.ndarray:
    return _degree_order(_check_lmax(l_max))[0]


def sh_orders(l_max: int) -> np.ndarray:
    return _degree_order(_check_lmax(l_max))[1]


@dataclass(frozen=True)
class ShBasisMatrix:
    """SH basis evaluated at ``n`` directions (``values`` is ``n x L``)."""

    values: np.ndarray
    l_max: int

    @property
    def L(self) -> int:
        return n_coefficients(self.l_max)

    def column(self, l: int, m: int) -> int:
        if l % 2 or abs(m) > l or l > self.l_max:
            raise KeyError((l, m))
        return sh_index(l, m)

    @property
    def blocks(self) -> LevelBlockIndex:
        return LevelBlockIndex(self.l_max)


def as_unit_directions(directions, tol: float = UNIT_TOL) -> np.ndarray:
    """Validate an ``(n, 3)`` array of unit vectors."""
    d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    if d.ndim != 2 or d.shape[1] != 3:
        raise ValueError(f"directions must have shape (n, 3), got {d.shape}")
    dev = np.abs(np.linalg.norm(d, axis=1) - 1.0)
    if dev.size and dev.max() > tol:
        bad = int(np.argmax(dev))
        raise ValueError(f"direction {bad} is not unit length (|norm - 1| = {dev[bad]:.3g})")
    return d


def cart2sphere(directions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Polar angle theta in [0, pi] and azimuth phi in (-pi, pi]."""
    x, y, z = directions[:, 0], directions[:, 1], directions[:, 2]
    theta = np.arccos(np.clip(z, -1.0, 1.0))
    phi = np.arctan2(y, x)
    return theta, phi


def normalized_legendre(l_max: int, x: np.ndarray) -> np.ndarray:
    """Orthonormalized associated Legendre functions with Condon-Shortley phase.

    Returns an array ``P[l, m, i]`` for ``0 <= m <= l <= l_max`` such that
    ``P[l, m] * exp(i m phi)`` is the complex orthonormal harmonic.
    """
    x = np.asarray(x, dtype=np.float64)
    s = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    P = np.zeros((l_max + 1, l_max + 1, x.size))
    P[0, 0] = 1.0 / np.sqrt(4.0 * np.pi)
    for m in range(1, l_max + 1):
        P[m, m] = -np.sqrt((2.0 * m + 1.0) / (2.0 * m)) * s * P[m - 1, m - 1]
    for m in range(0, l_max):
        P[m + 1, m] = np.sqrt(2.0 * m + 3.0) * x * P[m, m]
    for m in range(0, l_max + 1):
        for l in range(m + 2, l_max + 1):
            a = np.sqrt((4.0 * l * l - 1.0) / (l * l - m * m))
            b = np.sqrt(((l - 1.0) ** 2 - m * m) / (4.0 * (l - 1.0) ** 2 - 1.0))
            P[l, m] = a * (x * P[l - 1, m] - b * P[l - 2, m])
    return P


def eval_sh_basis(directions, l_max: int) -> ShBasisMatrix:
    """Evaluate the real symmetrized SH basis at unit directions.

    Parameters
    ----------
    directions : (n, 3) array-like
        Unit vectors.
    l_max : int
        Even maximum level.

    Returns
    -------
    ShBasisMatrix
        ``m < 0`` columns are ``sqrt(2) Re Y_lm``, ``m > 0`` columns are
        ``sqrt(2) Im Y_lm`` and ``m = 0`` is ``Y_l0``.
    """
    l_max = _check_lmax(l_max)
    d = as_unit_directions(directions)
    theta, phi = cart2sphere(d)
    P = normalized_legendre(l_max, np.cos(theta))
    out = np.empty((d.shape[0], n_coefficients(l_max)))
    sqrt2 = np.sqrt(2.0)
    for l in range(0, l_max + 1, 2):
        base = l * (l + 1) // 2
        out[:, base] = P[l, 0]
        for m in range(1, l + 1):
            # Y_{l,-m} = (-1)^m conj(Y_{lm})
            sign = -1.0 if m % 2 else 1.0
            out[:, base - m] = sqrt2 * sign * P[l, m] * np.cos(m * phi)
            out[:, base + m] = sqrt2 * P[l, m] * np.sin(m * phi)
    return ShBasisMatrix(out, l_max)


def acute_angle_deg(u, v) -> float | np.ndarray:
    """Acute angle in degrees between axes ``u`` and ``v`` (broadcasts)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    c = np.clip(np.abs(np.sum(u * v, axis=-1)), 0.0, 1.0)
    out = np.degrees(np.arccos(c))
    return float(out) if np.ndim(out) == 0 else out


# --------------------------------------------------------------------------
# grids

@dataclass(frozen=True)
class SphericalGrid:
    """Directions on the sphere, optionally with mesh faces and weights."""

    directions: np.ndarray
    source: str = "user-supplied"
    quadrature_weights: np.ndarray | None = None
    faces: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        as_unit_directions(self.directions)
        if self.quadrature_weights is not None:
            w = self.quadrature_weights
            if w.shape != (len(self.directions),) or np.any(w < 0):
                raise ValueError("quadrature weights must be nonnegative, one per direction")

    def __len__(self) -> int:
        return len(self.directions)

    def adjacency(self) -> tuple[np.ndarray, np.ndarray]:
        """CSR ``(indptr, indices)`` of mesh edge neighbours."""
        if self.faces is None:
            raise ValueError("grid has no mesh faces; adjacency unavailable")
        return mesh_adjacency(self.faces, len(self.directions))

    def to_csv(self, path) -> None:
        cols = [self.directions]
        header = "x,y,z"
        if self.quadrature_weights is not None:
            cols.append(self.quadrature_weights[:, None])
            header += ",weight"
        np.savetxt(path, np.hstack(cols), delimiter=",", header=header, comments="", fmt="%.17g")


_PHI = (1.0 + np.sqrt(5.0)) / 2.0
_ICO_VERTS = np.array([
    [-1, _PHI, 0], [1, _PHI, 0], [-1, -_PHI, 0], [1, -_PHI, 0],
    [0, -1, _PHI], [0, 1, _PHI], [0, -1, -_PHI], [0, 1, -_PHI],
    [_PHI, 0, -1], [_PHI, 0, 1], [-_PHI, 0, -1], [-_PHI, 0, 1],
])
_ICO_FACES = np.array([
    [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
    [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
    [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
    [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
])


def _normalize(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _subdivide(verts: list, faces: np.ndarray) -> np.ndarray:
    cache: dict[tuple[int, int], int] = {}

    def mid(i, j):
        key = (i, j) if i < j else (j, i)
        idx = cache.get(key)
        if idx is None:
            p = verts[i] + verts[j]
            verts.append(p / np.linalg.norm(p))
            idx = cache[key] = len(verts) - 1
        return idx

    out = []
    for a, b, c in faces:
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        out += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
    return np.array(out, dtype=np.int64)


@lru_cache(maxsize=8)
def icosphere_mesh(subdivision: int) -> tuple[np.ndarray, np.ndarray]:
    """Vertices and faces of the recursively subdivided icosahedron."""
    if not 0 <= subdivision <= 6:
        raise ValueError("subdivision must be in [0, 6]")
    verts = list(_normalize(_ICO_VERTS.astype(np.float64)))
    faces = _ICO_FACES.copy()
    for _ in range(subdivision):
        faces = _subdivide(verts, faces)
    v = np.array(verts)
    v.flags.writeable = False
    faces.flags.writeable = False
    return v, faces


@lru_cache(maxsize=8)
def geodesic_mesh(frequency: int) -> tuple[np.ndarray, np.ndarray]:
    """Class-I geodesic icosahedron: every face split into ``frequency**2``
    flat triangles before projection to the sphere."""
    k = int(frequency)
    if k < 1:
        raise ValueError("frequency must be >= 1")
    base = _normalize(_ICO_VERTS.astype(np.float64))
    index: dict[tuple, int] = {}
    verts: list[np.ndarray] = []

    def vid(p):
        q = p / np.linalg.norm(p)
        key = tuple(np.round(q, 9) + 0.0)
        idx = index.get(key)
        if idx is None:
            verts.append(q)
            idx = index[key] = len(verts) - 1
        return idx

    faces = []
    for a, b, c in _ICO_FACES:
        A, B, C = base[a], base[b], base[c]
        ids = {}
        for i in range(k + 1):
            for j in range(k + 1 - i):
                ids[i, j] = vid(A + (B - A) * i / k + (C - A) * j / k)
        for i in range(k):
            for j in range(k - i):
                faces.append([ids[i, j], ids[i + 1, j], ids[i, j + 1]])
                if i + j < k - 1:
                    faces.append([ids[i + 1, j], ids[i + 1, j + 1], ids[i, j + 1]])
    v = np.array(verts)
    f = np.array(faces, dtype=np.int64)
    v.flags.writeable = False
    f.flags.writeable = False
    return v, f


def upper_hemisphere_mask(directions: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """One representative per antipodal pair: z > 0, then y > 0, then x > 0."""
    x, y, z = directions.T
    return (z > tol) | ((np.abs(z) <= tol) & ((y > tol) | ((np.abs(y) <= tol) & (x > 0))))


def _face_centers(verts: np.ndarray, faces: np.ndarray) -> np.ndarray:
    return _normalize(verts[faces].sum(axis=1))


def _voronoi_weights(verts: np.ndarray, exact_degree: int = 24) -> np.ndarray:
    """Voronoi cell areas, minimally corrected so that every even harmonic of
    level <= ``exact_degree`` integrates exactly.

    The correction is skipped when the grid is too coarse for it or when it
    would make a weight negative; plain areas are returned then.
    """
    from scipy.spatial import SphericalVoronoi

    sv = SphericalVoronoi(verts, radius=1.0, center=np.zeros(3))
    w0 = sv.calculate_areas()
    deg = exact_degree
    while deg > 0 and 4 * n_coefficients(deg) > len(verts):
        deg -= 2
    if deg == 0:
        return w0
    B = eval_sh_basis(verts, deg).values
    target = np.zeros(B.shape[1])
    target[0] = np.sqrt(4.0 * np.pi)
    c = np.linalg.solve(B.T @ B, target - B.T @ w0)
    w = w0 + B @ c
    return w if w.min() > 0 else w0


def _make_grid(verts, faces, mode, hemisphere, source) -> SphericalGrid:
    if mode not in ("vertices", "face-centers"):
        raise ValueError(f"unknown mode {mode!r}")
    if hemisphere not in ("full", "upper"):
        raise ValueError(f"unknown hemisphere {hemisphere!r}")
    if mode == "vertices":
        dirs = np.array(verts)
        weights = _voronoi_weights(dirs)
        if hemisphere == "upper":
            keep = upper_hemisphere_mask(dirs)
            return SphericalGrid(dirs[keep], f"{source}-vertices", 2.0 * weights[keep])
        return SphericalGrid(dirs, f"{source}-vertices", weights, np.array(faces))
    dirs = _face_centers(verts, faces)
    if hemisphere == "upper":
        dirs = dirs[upper_hemisphere_mask(dirs)]
    return SphericalGrid(dirs, f"{source}-face-centers")


def icosphere_grid(subdivision: int, mode: str = "vertices", hemisphere: str = "full") -> SphericalGrid:
    """Directions from a recursively subdivided icosahedron.

    ``vertices`` yields ``10 * 4**s + 2`` points with Voronoi-area weights,
    ``face-centers`` yields ``20 * 4**s`` points.  ``hemisphere="upper"``
    keeps one direction from every antipodal pair (weights doubled so they
    still integrate even functions over the whole sphere).
    """
    verts, faces = icosphere_mesh(subdivision)
    return _make_grid(verts, faces, mode, hemisphere, "icosphere")


def geodesic_grid(frequency: int, mode: str = "face-centers", hemisphere: str = "upper") -> SphericalGrid:
    """Like :func:`icosphere_grid` for any subdivision frequency.

    Frequency ``k`` gives ``20 k**2`` faces, so the upper face-center grid
    has ``10 k**2`` directions (40, 90, 160, 250, ...).
    """
    verts, faces = geodesic_mesh(frequency)
    return _make_grid(verts, faces, mode, hemisphere, f"geodesic{int(frequency)}")


def design_for_count(n: int) -> SphericalGrid:
    """Upper-hemisphere face-center design with size closest to ``n``."""
    k = max(1, int(round(np.sqrt(n / 10.0))))
    return geodesic_grid(k, "face-centers", "upper")


def mesh_adjacency(faces: np.ndarray, n_vertices: int) -> tuple[np.ndarray, np.ndarray]:
    faces = np.asarray(faces)
    i = faces[:, [0, 1, 2, 1, 2, 0]].ravel()
    j = faces[:, [1, 2, 0, 0, 1, 2]].ravel()
    pairs = np.unique(np.stack([i, j], axis=1), axis=0)
    indptr = np.zeros(n_vertices + 1, dtype=np.int64)
    np.add.at(indptr, pairs[:, 0] + 1, 1)
    np.cumsum(indptr, out=indptr)
    return indptr, pairs[:, 1].astype(np.int64)


def k_hop_adjacency(indptr: np.ndarray, indices: np.ndarray, hops: int) -> tuple[np.ndarray, np.ndarray]:
    """CSR neighbourhoods within ``hops`` mesh edges (vertex itself excluded)."""
    from scipy import sparse

    n = len(indptr) - 1
    A = sparse.csr_matrix((np.ones(len(indices), dtype=np.int8), indices, indptr), shape=(n, n))
    reach = A.copy().astype(np.int32)
    step = A.astype(np.int32)
    for _ in range(hops - 1):
        step = (step @ A).astype(bool).astype(np.int32)
        reach = reach + step
    reach = reach.tolil()
    reach.setdiag(0)
    reach = reach.tocsr()
    reach.eliminate_zeros()
    reach.sort_indices()
    return reach.indptr.astype(np.int64), reach.indices.astype(np.int64)


# --------------------------------------------------------------------------
# gradient tables

@dataclass(frozen=True)
class GradientTable:
    """Gradient directions with per-measurement b-values (s/mm^2)."""

    directions: np.ndarray
    bvals: np.ndarray
    b0_threshold: float = 50.0

    def __post_init__(self):
        d = np.atleast_2d(np.asarray(self.directions, dtype=np.float64))
        b = np.broadcast_to(np.asarray(self.bvals, dtype=np.float64), (len(d),)).copy()
        if d.shape[1] != 3:
            raise ValueError("gradient directions must be (n, 3)")
        object.__setattr__(self, "directions", d)
        object.__setattr__(self, "bvals", b)
        dw = ~self.b0_mask
        as_unit_directions(d[dw], tol=1e-3)

    @classmethod
    def single_shell(cls, directions, b: float) -> "GradientTable":
        d = as_unit_directions(directions)
        return cls(d, np.full(len(d), float(b)))

    @property
    def b0_mask(self) -> np.ndarray:
        return self.bvals <= self.b0_threshold

    def __len__(self) -> int:
        return len(self.directions)

    def weighted(self) -> "GradientTable":
        """Diffusion-weighted subset, directions renormalized."""
        m = ~self.b0_mask
        return GradientTable(_normalize(self.directions[m]), self.bvals[m], self.b0_threshold)

    @property
    def b(self) -> float:
        """The shell b-value; raises for multi-shell tables."""
        bv = self.bvals[~self.b0_mask]
        if bv.size == 0:
            raise ValueError("no diffusion-weighted measurements")
        if np.ptp(bv) > 0.05 * bv.mean():
            raise ValueError("multi-shell gradient tables are not supported")
        return float(np.round(bv.mean()))


def read_bvecs_bvals(bvecs_path, bvals_path, b0_threshold: float = 50.0) -> GradientTable:
    """Read FSL-style ``bvecs`` (3 x n) and ``bvals`` (1 x n) text files."""
    bvecs = np.loadtxt(Path(bvecs_path), dtype=np.float64, ndmin=2)
    bvals = np.loadtxt(Path(bvals_path), dtype=np.float64, ndmin=1).ravel()
    if bvecs.shape[0] != 3 and bvecs.shape[1] == 3:
        bvecs = bvecs.T
    if bvecs.shape != (3, bvals.size):
        raise ValueError(f"bvecs shape {bvecs.shape} does not match {bvals.size} bvals")
    dirs = bvecs.T.copy()
    norms = np.linalg.norm(dirs, axis=1)
    nz = norms > 0
    dirs[nz] /= norms[nz, None]
    return GradientTable(dirs, bvals, b0_threshold)


def write_bvecs_bvals(table: GradientTable, bvecs_path, bvals_path) -> None:
    np.savetxt(bvecs_path, table.directions.T, fmt="%.10f")
    np.savetxt(bvals_path, table.bvals[None, :], fmt="%g")
