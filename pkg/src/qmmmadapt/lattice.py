"""Defective 2D lattices, neighbor queries, and weighted difference seminorms.

The computational domain is a finite ball of a Bravais lattice with a finite
set of removed sites.  Site ids are assigned deterministically (sorted by
radius, then angle, then integer coordinates) so that runs are reproducible
across processes and platforms.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DimensionError, GeometryError, InvalidSpecError

# Tolerance for closed-ball membership tests on site positions.  Radii used
# throughout (cutoffs, region radii) are well separated from lattice shells,
# so a fixed absolute slack is safe.
BALL_TOL = 1e-9


def triangular_cell() -> np.ndarray:
    """Cell matrix of the triangular lattice with unit nearest-neighbor bond."""
    return np.array([[1.0, 0.5], [0.0, math.sqrt(3.0) / 2.0]])


@dataclass(frozen=True)
class LatticeSpec:
    """Immutable description of a defective lattice.

    Parameters
    ----------
    cell_matrix : (2, 2) array_like
        Nonsingular matrix whose columns span the Bravais lattice.
    defects : tuple of (int, int)
        Integer coordinates of removed sites.
    defect_radius : float, optional
        Radius of the ball (about the origin) containing all defects.
        Defaults to the smallest such radius.
    """

    cell_matrix: tuple = field(default_factory=lambda: tuple(map(tuple, triangular_cell())))
    defects: tuple = ()
    defect_radius: float = None

    def __post_init__(self):
        cell = np.asarray(self.cell_matrix, dtype=float)
        if cell.shape != (2, 2) or not np.all(np.isfinite(cell)):
            raise InvalidSpecError(f"cell_matrix must be a finite 2x2 matrix, got {self.cell_matrix!r}")
        if abs(np.linalg.det(cell)) < 1e-12:
            raise InvalidSpecError("cell_matrix is singular")
        object.__setattr__(self, "cell_matrix", tuple(map(tuple, cell)))
        defects = []
        for p in self.defects:
            i, j = p
            if int(i) != i or int(j) != j:
                raise InvalidSpecError(f"defect coordinates must be integers, got {p!r}")
            defects.append((int(i), int(j)))
        if len(set(defects)) != len(defects):
            raise InvalidSpecError("defect sites must be distinct")
        object.__setattr__(self, "defects", tuple(defects))
        radii = [float(np.linalg.norm(cell @ np.array(p, dtype=float))) for p in defects]
        r_def = max(radii) if radii else 0.0
        if self.defect_radius is None:
            object.__setattr__(self, "defect_radius", r_def)
        else:
            if self.defect_radius < r_def - BALL_TOL:
                raise InvalidSpecError(
                    f"defect_radius {self.defect_radius} does not contain all defects (need >= {r_def})"
                )
            object.__setattr__(self, "defect_radius", float(self.defect_radius))

    @property
    def cell(self) -> np.ndarray:
        return np.asarray(self.cell_matrix, dtype=float)

    def fingerprint(self) -> str:
        payload = {
            "kind": "lattice-spec",
            "cell": [[repr(x) for x in row] for row in self.cell_matrix],
            "defects": list(self.defects),
            "defect_radius": repr(self.defect_radius),
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


class DefectiveLattice:
    """Finite ball of a Bravais lattice with defects removed.

    Attributes
    ----------
    spec : LatticeSpec
    domain_radius : float
    coords : (N, 2) int ndarray
        Integer lattice coordinates per site id.
    positions : (N, 2) float ndarray
        Reference (undeformed) Cartesian positions per site id.
    """

    def __init__(self, spec: LatticeSpec, domain_radius: float, coords: np.ndarray, positions: np.ndarray):
        self.spec = spec
        self.domain_radius = float(domain_radius)
        self.coords = coords
        self.positions = positions
        self._index = {(int(i), int(j)): k for k, (i, j) in enumerate(coords)}
        self._tree = None
        self._pair_cache = {}

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.positions)
        return self._tree

    def id_of(self, coord) -> int:
        """Site id of integer coordinate pair, or -1 if absent."""
        return self._index.get((int(coord[0]), int(coord[1])), -1)

    def ball_ids(self, point, radius: float) -> np.ndarray:
        """Sorted ids of sites within closed distance `radius` of `point`."""
        ids = self.tree.query_ball_point(np.asarray(point, dtype=float), radius + BALL_TOL)
        return np.array(sorted(ids), dtype=np.int64)

    def pairs_within(self, radius: float):
        """All unordered site pairs within `radius`, with their distances.

        Returns (ii, jj, dist) arrays with ii < jj.  Cached per radius since
        pair enumeration is the dominant cost for repeated seminorm calls.
        """
        key = round(float(radius), 12)
        if key not in self._pair_cache:
            pairs = self.tree.query_pairs(radius + BALL_TOL, output_type="ndarray")
            if len(pairs) == 0:
                ii = jj = np.zeros(0, dtype=np.int64)
                dist = np.zeros(0)
            else:
                ii = pairs[:, 0].astype(np.int64)
                jj = pairs[:, 1].astype(np.int64)
                dist = np.linalg.norm(self.positions[ii] - self.positions[jj], axis=1)
            self._pair_cache[key] = (ii, jj, dist)
        return self._pair_cache[key]

    def fingerprint(self) -> str:
        payload = {
            "kind": "lattice",
            "spec": self.spec.fingerprint(),
            "domain_radius": repr(self.domain_radius),
            "n_sites": len(self),
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def build_lattice(spec: LatticeSpec, domain_radius: float) -> DefectiveLattice:
    """Enumerate all lattice sites in the closed ball of `domain_radius`.

    Defect sites are removed.  Ids are assigned by sorting on (radius, angle,
    integer coordinates), which is stable under floating point noise because
    radius and angle are rounded to 9 decimals before comparison.
    """
    if domain_radius <= 0 or not math.isfinite(domain_radius):
        raise InvalidSpecError(f"domain_radius must be positive and finite, got {domain_radius}")
    if domain_radius < spec.defect_radius:
        raise GeometryError(
            f"domain_radius {domain_radius} is smaller than the defect region radius {spec.defect_radius}"
        )
    cell = spec.cell
    sigma_min = np.linalg.svd(cell, compute_uv=False)[-1]
    m = int(math.ceil(domain_radius / sigma_min)) + 1
    rng = np.arange(-m, m + 1)
    ii, jj = np.meshgrid(rng, rng, indexing="ij")
    coords = np.stack([ii.ravel(), jj.ravel()], axis=1)
    pos = coords @ cell.T
    radii = np.linalg.norm(pos, axis=1)
    keep = radii <= domain_radius + BALL_TOL
    coords = coords[keep]
    pos = pos[keep]
    radii = radii[keep]

    defect_set = set(spec.defects)
    if defect_set:
        mask = np.array([(int(i), int(j)) not in defect_set for i, j in coords])
        coords, pos, radii = coords[mask], pos[mask], radii[mask]

    angles = np.arctan2(pos[:, 1], pos[:, 0])
    order = np.lexsort((coords[:, 1], coords[:, 0], np.round(angles, 9), np.round(radii, 9)))
    coords = np.ascontiguousarray(coords[order], dtype=np.int64)
    pos = np.ascontiguousarray(pos[order])

    lat = DefectiveLattice(spec, domain_radius, coords, pos)
    if len(lat) > 1:
        d_nn, _ = lat.tree.query(lat.positions, k=2)
        if d_nn[:, 1].min() < 0.5:
            raise InvalidSpecError(
                f"minimum site separation {d_nn[:, 1].min():.3g} is below 0.5; cell matrix too degenerate"
            )
    return lat


def neighbors(lattice: DefectiveLattice, site: int, radius: float) -> np.ndarray:
    """Sorted ids of sites within `radius` of `site`, excluding `site` itself."""
    ids = lattice.ball_ids(lattice.positions[site], radius)
    return ids[ids != site]


@dataclass(frozen=True)
class Displacement:
    """Per-site displacement field, indexed by lattice site id."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2:
            raise DimensionError(f"displacement must have shape (N, 2), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvalidSpecError("displacement contains NaN or Inf")
        object.__setattr__(self, "values", v)

    @staticmethod
    def zeros(n: int) -> "Displacement":
        return Displacement(np.zeros((n, 2)))


@dataclass(frozen=True)
class SeminormParams:
    """Weights for the exponentially localized difference seminorm."""

    gamma: float = 1.0
    stencil_radius: float = 3.05

    def __post_init__(self):
        if self.gamma <= 0 or self.stencil_radius <= 0:
            raise InvalidSpecError(
                f"gamma and stencil_radius must be positive, got {self.gamma}, {self.stencil_radius}"
            )


def _values(u, lattice: DefectiveLattice) -> np.ndarray:
    v = u.values if isinstance(u, Displacement) else np.asarray(u, dtype=float)
    if v.shape != (len(lattice), 2):
        raise DimensionError(f"expected displacement of shape ({len(lattice)}, 2), got {v.shape}")
    return v


def seminorm(u, params: SeminormParams, lattice: DefectiveLattice) -> float:
    """Exponentially weighted finite-difference seminorm of a displacement.

    Squares site-to-site differences over all pairs within the stencil
    radius, weighted by exp(-2 gamma d).  Each ordered pair contributes once,
    hence the factor 2 over the unordered pair list.  Constant shifts are
    annihilated exactly.
    """
    v = _values(u, lattice)
    ii, jj, dist = lattice.pairs_within(params.stencil_radius)
    if len(ii) == 0:
        return 0.0
    diff = v[ii] - v[jj]
    sq = np.einsum("ij,ij->i", diff, diff)
    total = 2.0 * float(np.sum(np.exp(-2.0 * params.gamma * dist) * sq))
    return math.sqrt(total)


def du_gamma(u, params: SeminormParams, lattice: DefectiveLattice) -> np.ndarray:
    """Per-site localized difference magnitude.

    Entry at site l is the square root of the weighted sum of |u(k) - u(l)|^2
    over sites k within the stencil radius of l.  Summing the squares over all
    sites recovers the squared seminorm.
    """
    v = _values(u, lattice)
    ii, jj, dist = lattice.pairs_within(params.stencil_radius)
    out = np.zeros(len(lattice))
    if len(ii) > 0:
        diff = v[ii] - v[jj]
        contrib = np.exp(-2.0 * params.gamma * dist) * np.einsum("ij,ij->i", diff, diff)
        np.add.at(out, ii, contrib)
        np.add.at(out, jj, contrib)
    return np.sqrt(out)
