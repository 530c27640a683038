"""Residual-force error indicator with graded polar-mesh sampling.

The indicator measures how far a hybrid state is from quantum equilibrium:
for every site near the core and surrogate regions the force is recomputed
from a small quantum system truncated to a ball around that site, weighted
by a slowly growing logarithmic factor, and summed.  Evaluating a truncated
force costs one eigendecomposition, so the full sum is expensive; a graded
annular mesh samples one representative site per element and weights it by
the element population instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .coupling import RegionPartition
from .errors import GeometryError, InvalidSpecError
from .lattice import BALL_TOL, DefectiveLattice, _values
from .tightbinding import TBModel, total_forces

# Tolerance for assigning a site to a half-open angular sector.  Sites lie
# either exactly on a symmetry ray or at least ~1e-3 rad away from one, so
# absorbing upward rounding noise of this size never moves a site.
_ANGLE_TOL = 1e-12

# Width below which a clipped radial band is dropped instead of kept.
_BAND_TOL = 1e-9

# Convergence threshold for the implicit band-width relation.
_SPACING_TOL = 1e-8

# Leading far-field band widths.  Strictly increasing, all below one lattice
# spacing so that the first clamped rows (which dominate the far-field
# residual and whose forces drop ~10-20x per row) never share a band.
_FF_COLLAR_WIDTHS = [0.4, 0.45, 0.5, 0.6]


@dataclass(frozen=True)
class MeshElement:
    """One annular sector with its member sites and representative site."""

    index: int
    r_range: tuple
    theta_range: tuple
    member_ids: np.ndarray
    repatom: int
    weight: int


@dataclass(frozen=True)
class SampledMesh:
    """Polar partition of the indicator support, one sample site per element.

    Radial bands are unit width across the core, widen toward the middle of
    the surrogate annulus, shrink back toward its outer edge, and widen again
    through the far-field collar.  Elements without sites are dropped.
    """

    elements: tuple
    radii: np.ndarray
    angles: np.ndarray
    center: np.ndarray
    covered_ids: np.ndarray

    @property
    def n_elements(self) -> int:
        return len(self.elements)


@dataclass(frozen=True)
class IndicatorRow:
    """Per-element indicator record, one line of the structured report."""

    element: int
    repatom: int
    site_radius: float
    weight: int
    force_magnitude: float
    value: float


@dataclass(frozen=True)
class IndicatorReport:
    """Weighted residual-force indicator, exact or mesh-sampled."""

    per_element: tuple
    total: float
    r_cut_used: float
    mode: str
    n_force_evaluations: int

    def records(self) -> list:
        """Rows as plain dicts, in summation order, for tabular output."""
        return [
            {
                "element": r.element,
                "repatom": r.repatom,
                "site_radius": r.site_radius,
                "weight": r.weight,
                "force_magnitude": r.force_magnitude,
                "value": r.value,
            }
            for r in self.per_element
        ]


def omega_c(lattice: DefectiveLattice, partition: RegionPartition, r_cut: float) -> np.ndarray:
    """Sorted ids of sites within r_cut of any core or surrogate site.

    This is the support of the indicator: residual forces decay rapidly
    into the clamped far field, and sites farther than one cutoff from the
    relaxed regions feel no displaced neighbor at all.
    """
    core = np.concatenate([partition.qm_ids, partition.mm_ids])
    hits = set()
    for h in lattice.tree.query_ball_point(lattice.positions[core], r_cut + BALL_TOL):
        hits.update(h)
    return np.array(sorted(hits), dtype=np.int64)


def truncated_force(model: TBModel, lattice: DefectiveLattice, site: int, u,
                    r_cut: float) -> np.ndarray:
    """Force on one site from the quantum system on its r_cut ball.

    Assembles the full tight-binding system on the lattice sites within
    r_cut of `site` at the displaced positions and returns that site's row
    of the total forces.
    """
    site = int(site)
    pos = lattice.positions[site]
    if float(np.linalg.norm(pos)) + r_cut > lattice.domain_radius + BALL_TOL:
        raise GeometryError(
            f"force ball of radius {r_cut} around site {site} at |x|="
            f"{float(np.linalg.norm(pos)):.3f} leaves the domain of radius "
            f"{lattice.domain_radius}; enlarge the lattice"
        )
    ball = lattice.ball_ids(pos, r_cut)
    v = _values(u, lattice)
    y = (lattice.positions + v) if np.any(v) else None
    f = total_forces(model, lattice, ball, y=y)
    return f[int(np.searchsorted(ball, site))]


def _site_weight(radius: float) -> float:
    return math.log(2.0 + radius)


def full_indicator(model: TBModel, lattice: DefectiveLattice, u,
                   partition: RegionPartition, r_cut: float,
                   force_fn=None) -> IndicatorReport:
    """Exact indicator: one truncated force per supported site.

    force_fn(site_id) -> 2-vector may replace the truncated-force kernel,
    which keeps the weighting and reduction testable against closed forms.
    """
    sites = omega_c(lattice, partition, r_cut)
    if force_fn is None:
        def force_fn(s):
            return truncated_force(model, lattice, s, u, r_cut)

    rows = []
    for s in sites:
        s = int(s)
        f = np.asarray(force_fn(s), dtype=float)
        mag = float(np.linalg.norm(f))
        radius = float(np.linalg.norm(lattice.positions[s]))
        rows.append(IndicatorRow(s, s, radius, 1, mag, _site_weight(radius) * mag))
    total = math.fsum(r.value for r in rows)
    return IndicatorReport(tuple(rows), total, float(r_cut), "full", len(rows))


def d3_indicator_formula(forces) -> float:
    """Three-dimensional weighting rule: the l^(6/5) composite of magnitudes.

    Pure formula on a list of force vectors; nothing in this package drives
    it with a 3D lattice.
    """
    f = np.asarray(forces, dtype=float)
    if f.size == 0:
        return 0.0
    mags = np.linalg.norm(np.atleast_2d(f), axis=1)
    return float(np.sum(mags ** 1.2) ** (5.0 / 6.0))


def _implicit_spacing(r_prev: float, n_qm: int, cap: float) -> float:
    """Band width h solving h = ((r_prev/n_qm)^1.5 + ((r_prev+h)/n_qm)^1.5)/2.

    Fixed-point iteration from the explicit left term.  The iteration is a
    contraction for the radii that matter; if it ever exceeds `cap` the band
    is about to be clipped anyway, so cap is returned early.
    """
    base = 0.5 * (r_prev / n_qm) ** 1.5
    h = 2.0 * base
    for _ in range(1000):
        h_new = base + 0.5 * ((r_prev + h) / n_qm) ** 1.5
        if h_new >= cap:
            return cap
        if abs(h_new - h) <= _SPACING_TOL:
            return h_new
        h = h_new
    return min(h, cap)


def _radial_bands(r_qm: float, r_mm: float, r_outer: float) -> np.ndarray:
    """Monotone band boundaries 0 = r_0 < ... < r_n covering [0, r_outer].

    Unit bands across the core, implicit-relation widths up to the middle of
    the surrogate annulus, the same widths mirrored back down to r_mm, then
    strictly growing bands through the far-field collar.  The collar bands
    start below one lattice spacing: the frozen rows within interaction
    range of the last moving shell carry almost all of the far-field
    residual, and their force magnitudes fall off so steeply with depth
    that a band mixing two rows cannot be represented by any single member
    (sampled totals were off by 30-50% on the dominant band before the
    sub-unit resolution, and within a few percent after).  The last band of
    the surrogate and far-field groups is clipped so that r_mm and r_outer
    are hit exactly.
    """
    n_qm = max(1, int(round(r_qm)))
    spacings = [1.0] * n_qm
    cum = float(n_qm)

    midpoint = 0.5 * (r_qm + r_mm)
    fine = []
    while cum < midpoint - _BAND_TOL and cum < r_mm - _BAND_TOL:
        h = _implicit_spacing(cum, n_qm, cap=r_mm - cum)
        fine.append(h)
        cum += h

    if cum > r_mm - _BAND_TOL:
        # thin annulus: the fine group alone reaches the outer edge
        if fine:
            fine[-1] -= cum - r_mm
            cum = r_mm
            if fine[-1] <= _BAND_TOL:
                cum -= fine.pop()
    spacings.extend(fine)

    # mirror the pre-pivot widths outward; once the mirror walks past the
    # first fine band it continues into the unit core widths
    mirror_src = fine[:-1][::-1] + [1.0] * n_qm
    k = 0
    while cum < r_mm - _BAND_TOL:
        h = mirror_src[k] if k < len(mirror_src) else 1.0
        k += 1
        if cum + h > r_mm:
            h = r_mm - cum
        if h > _BAND_TOL:
            spacings.append(h)
            cum += h

    # far field: sub-unit bands across the frozen rows next to r_mm, then
    # the fine-to-coarse sequence resumes; widths keep growing (never cycle)
    ff_src = _FF_COLLAR_WIDTHS + (fine if fine else [1.0])
    k = 0
    h_prev = 0.0
    while cum < r_outer - _BAND_TOL:
        h = ff_src[k] if k < len(ff_src) else h_prev * 1.25
        k += 1
        h_prev = max(h, h_prev)
        if cum + h > r_outer:
            h = r_outer - cum
        if h > _BAND_TOL:
            spacings.append(h)
            cum += h

    return np.concatenate([[0.0], np.cumsum(spacings)])


def graded_mesh(lattice: DefectiveLattice, partition: RegionPartition,
                n_theta: int, r_cut: float) -> SampledMesh:
    """Annular sector mesh over the indicator support.

    Sectors are uniform in angle; radial bands follow the graded profile of
    _radial_bands about the mean decomposition center.  Each element records
    its member sites, the member closest to the element's polar midpoint
    (ties to the smallest id), and the member count as its weight.  Empty
    elements are dropped.
    """
    elements, radii, angles, center, covered = _mesh_about(
        lattice, partition, n_theta, r_cut,
        partition.centers.mean(axis=0), None, 0,
    )
    return SampledMesh(tuple(elements), radii, angles, center, covered)


def _mesh_about(lattice: DefectiveLattice, partition: RegionPartition,
                n_theta: int, r_cut: float, center, keep_ids, index_offset: int):
    """Mesh construction about an explicit center over a site subset.

    keep_ids = None meshes the whole indicator support; otherwise only
    supported sites also present in keep_ids are binned (used by the
    multi-defect mesher, which tiles the support into nearest-center cells).
    """
    if int(n_theta) != n_theta or n_theta < 4:
        raise InvalidSpecError(f"n_theta must be an integer >= 4, got {n_theta}")
    n_theta = int(n_theta)
    if partition.r_mm + r_cut > lattice.domain_radius + BALL_TOL:
        raise GeometryError(
            f"indicator support reaches {partition.r_mm + r_cut} but the domain "
            f"radius is only {lattice.domain_radius}"
        )
    center = np.asarray(center, dtype=float)
    covered = omega_c(lattice, partition, r_cut)
    if keep_ids is not None:
        covered = covered[np.isin(covered, keep_ids)]
    rel = lattice.positions[covered] - center
    r = np.linalg.norm(rel, axis=1)

    r_outer = max(partition.r_mm + r_cut, float(r.max()) if len(r) else 0.0)
    radii = _radial_bands(partition.r_qm, partition.r_mm, r_outer)
    angles = np.arange(n_theta + 1) * (2.0 * math.pi / n_theta)

    theta = np.arctan2(rel[:, 1], rel[:, 0])
    theta = np.where(theta <= 0.0, theta + 2.0 * math.pi, theta)

    band = np.searchsorted(radii, r - _BAND_TOL, side="left")
    band = np.clip(band, 1, len(radii) - 1)
    sector = np.searchsorted(angles, theta - _ANGLE_TOL, side="left")
    sector = np.clip(sector, 1, n_theta)
    # a site at the mesh center has no angle; it joins the first element
    at_center = r <= _BAND_TOL
    band[at_center] = 1
    sector[at_center] = 1

    members = {}
    for pos_k, (i, j) in enumerate(zip(band, sector)):
        members.setdefault((int(i), int(j)), []).append(pos_k)

    elements = []
    for (i, j) in sorted(members):
        ids = covered[np.array(members[(i, j)], dtype=np.int64)]
        r_lo, r_hi = radii[i - 1], radii[i]
        t_lo, t_hi = angles[j - 1], angles[j]
        mid_r = 0.5 * (r_lo + r_hi)
        mid_t = 0.5 * (t_lo + t_hi)
        centroid = center + mid_r * np.array([math.cos(mid_t), math.sin(mid_t)])
        d = np.linalg.norm(lattice.positions[ids] - centroid, axis=1)
        rep = ids[np.lexsort((ids, np.round(d, 12)))[0]]
        elements.append(MeshElement(
            index=index_offset + (i - 1) * n_theta + (j - 1),
            r_range=(float(r_lo), float(r_hi)),
            theta_range=(float(t_lo), float(t_hi)),
            member_ids=ids,
            repatom=int(rep),
            weight=len(ids),
        ))
    return elements, radii, angles, center, covered


def sampled_indicator(model: TBModel, lattice: DefectiveLattice, u,
                      mesh: SampledMesh, r_cut: float,
                      force_fn=None) -> IndicatorReport:
    """Mesh-sampled indicator: one truncated force per element.

    Each element contributes weight * log(2 + |repatom position|) * |force at
    the repatom|; the total is their sum in element order.  The number of
    force evaluations equals the number of elements.
    """
    if force_fn is None:
        def force_fn(s):
            return truncated_force(model, lattice, s, u, r_cut)

    rows = []
    for el in mesh.elements:
        f = np.asarray(force_fn(el.repatom), dtype=float)
        mag = float(np.linalg.norm(f))
        radius = float(np.linalg.norm(lattice.positions[el.repatom]))
        rows.append(IndicatorRow(
            el.index, el.repatom, radius, el.weight, mag,
            el.weight * _site_weight(radius) * mag,
        ))
    total = math.fsum(r.value for r in rows)
    return IndicatorReport(tuple(rows), total, float(r_cut), "sampled", len(rows))
