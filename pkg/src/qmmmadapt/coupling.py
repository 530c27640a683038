"""Region decomposition, the hybrid energy-difference functional, and its minimization.

Sites are split into a quantum core (QM), a surrogate region (MM), and a
clamped far field (FF).  A buffer inside MM surrounds the core so that QM
site energies are evaluated on the QM+buffer cluster only.  The hybrid
functional sums QM site-energy differences and shifted surrogate energies
over MM and near-field FF sites; displacements on FF are pinned to zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DimensionError, GeometryError, InvalidSpecError
from .lattice import BALL_TOL, DefectiveLattice, Displacement
from .minimize import lbfgs_minimize
from .mmpotential import MMPotential, mm_energy_shifted_many, mm_site_gradient_many
from .tightbinding import (
    TBModel,
    _contract_dh,
    _hamiltonian_from_distances,
    check_admissible,
    projected_density,
    site_energies,
    spectral_decompose,
)

QM, MM, FF = 0, 1, 2
_LABEL_NAMES = {QM: "QM", MM: "MM", FF: "FF"}


@dataclass(frozen=True)
class RegionPartition:
    """Per-site region labels plus the ball radii that generated them."""

    labels: np.ndarray
    buffer_ids: np.ndarray
    r_qm: float
    r_mm: float
    r_cut_buffer: float
    centers: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int8)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "buffer_ids", np.asarray(self.buffer_ids, dtype=np.int64))
        object.__setattr__(self, "centers", np.asarray(self.centers, dtype=float).reshape(-1, 2))
        if not np.all(np.isin(labels, [QM, MM, FF])):
            raise InvalidSpecError("labels must be QM, MM or FF")
        if len(self.buffer_ids) and not np.all(labels[self.buffer_ids] == MM):
            raise InvalidSpecError("buffer sites must carry the MM label")

    @property
    def r_buf(self) -> float:
        return self.r_qm + self.r_cut_buffer

    def ids(self, label) -> np.ndarray:
        return np.flatnonzero(self.labels == label).astype(np.int64)

    @property
    def qm_ids(self) -> np.ndarray:
        return self.ids(QM)

    @property
    def mm_ids(self) -> np.ndarray:
        return self.ids(MM)

    @property
    def ff_ids(self) -> np.ndarray:
        return self.ids(FF)

    def counts(self) -> dict:
        return {name: int(np.sum(self.labels == tag)) for tag, name in _LABEL_NAMES.items()}


def required_domain_radius(r_mm: float, model: TBModel) -> float:
    """Smallest lattice domain radius that closes every interaction stencil.

    Far-field sites within one surrogate cutoff of the MM ball still
    contribute shifted stencil energies, and residual forces are later
    sampled one hopping cutoff past r_mm; both need complete neighborhoods,
    so the lattice must extend two cutoffs beyond the MM ball.
    """
    return r_mm + 2.0 * model.r_cut


def center_distances(lattice: DefectiveLattice, centers) -> np.ndarray:
    """Distance from every site to the nearest decomposition center."""
    centers = np.asarray(centers, dtype=float).reshape(-1, 2)
    return cdist(lattice.positions, centers).min(axis=1)


def default_centers(lattice: DefectiveLattice) -> np.ndarray:
    """Defect positions, or the origin for a defect-free lattice."""
    if lattice.spec.defects:
        return np.array([lattice.spec.cell @ np.array(d, dtype=float) for d in lattice.spec.defects])
    return np.zeros((1, 2))


def decompose_ball(lattice: DefectiveLattice, r_qm: float, r_mm: float,
                   r_cut_buffer: float, centers=None) -> RegionPartition:
    """Partition sites by distance to the nearest center into QM/MM/FF balls.

    The buffer is the set of MM sites within r_cut_buffer of some QM site;
    requiring r_mm >= r_qm + r_cut_buffer makes the buffer condition (every
    QM site's r_cut_buffer ball stays inside QM union buffer) hold by
    construction.
    """
    if r_qm < 2.0:
        raise InvalidSpecError(f"r_qm must be at least 2, got {r_qm}")
    if r_cut_buffer <= 0:
        raise InvalidSpecError(f"r_cut_buffer must be positive, got {r_cut_buffer}")
    if r_mm < r_qm + r_cut_buffer:
        raise InvalidSpecError(
            f"r_mm={r_mm} too small: need r_qm + r_cut_buffer = {r_qm + r_cut_buffer} so the buffer fits"
        )
    if lattice.domain_radius < r_mm + r_cut_buffer - BALL_TOL:
        raise GeometryError(
            f"domain radius {lattice.domain_radius} cannot hold r_mm={r_mm} plus a {r_cut_buffer} far-field collar"
        )
    if centers is None:
        centers = default_centers(lattice)
    centers = np.asarray(centers, dtype=float).reshape(-1, 2)
    dmin = center_distances(lattice, centers)
    labels = np.full(len(lattice), FF, dtype=np.int8)
    labels[dmin <= r_mm + BALL_TOL] = MM
    labels[dmin <= r_qm + BALL_TOL] = QM

    qm_ids = np.flatnonzero(labels == QM)
    near_qm = set()
    for hits in lattice.tree.query_ball_point(lattice.positions[qm_ids], r_cut_buffer + BALL_TOL):
        near_qm.update(hits)
    buffer_ids = np.array(sorted(i for i in near_qm if labels[i] == MM), dtype=np.int64)
    return RegionPartition(labels, buffer_ids, float(r_qm), float(r_mm), float(r_cut_buffer), centers)


def _check_displacement(u, lattice, ff_ids) -> np.ndarray:
    v = u.values if isinstance(u, Displacement) else np.asarray(u, dtype=float)
    if v.shape != (len(lattice), 2):
        raise DimensionError(f"displacement must have shape ({len(lattice)}, 2), got {v.shape}")
    if len(ff_ids) and np.any(v[ff_ids] != 0.0):
        bad = int(ff_ids[np.flatnonzero(np.any(v[ff_ids] != 0.0, axis=1))[0]])
        raise InvalidSpecError(f"displacement must vanish on far-field sites; site {bad} is nonzero")
    return v


class HybridEvaluator:
    """Precomputed machinery for repeated hybrid energy/gradient evaluations.

    Construction performs the u-independent work: the QM+buffer reference
    spectrum, the stencil neighbor table for every surrogate-evaluated site,
    and index bookkeeping.  Evaluations then cost one eigendecomposition of
    the QM+buffer cluster plus dense batched stencil algebra.
    """

    def __init__(self, partition: RegionPartition, model: TBModel, pot: MMPotential,
                 lattice: DefectiveLattice):
        if pot.model_fingerprint != model.fingerprint():
            raise InvalidSpecError("surrogate potential was built for a different model")
        self.partition = partition
        self.model = model
        self.pot = pot
        self.lattice = lattice

        qm_ids = partition.qm_ids
        if len(qm_ids) == 0:
            raise InvalidSpecError("partition has no QM sites")
        self.cluster = np.sort(np.concatenate([qm_ids, partition.buffer_ids]))
        self.free_ids = np.sort(np.concatenate([qm_ids, partition.mm_ids]))
        self.ff_ids = partition.ff_ids
        pos_in_cluster = {int(s): k for k, s in enumerate(self.cluster)}
        self.qm_rows = np.array([pos_in_cluster[int(s)] for s in qm_ids], dtype=np.int64)

        ref = lattice.positions[self.cluster]
        self.ref_dists = cdist(ref, ref)
        spectral = spectral_decompose(_hamiltonian_from_distances(model, self.ref_dists), self.cluster)
        self.ref_qm_energy = float(np.sum(site_energies(spectral, model)[self.qm_rows]))

        # surrogate terms are evaluated on MM plus the FF fringe whose
        # stencils reach displaced MM sites; deeper FF contributes exactly zero
        fringe = set()
        mm_ids = partition.mm_ids
        if len(mm_ids):
            for hits in lattice.tree.query_ball_point(lattice.positions[mm_ids], pot.r_cut_mm + BALL_TOL):
                fringe.update(hits)
        ff_eval = np.array(sorted(fringe.intersection(self.ff_ids.tolist())), dtype=np.int64)
        self.eval_ids = np.sort(np.concatenate([mm_ids, ff_eval]))
        self.neighbor_table = self._build_neighbor_table()

    def _build_neighbor_table(self) -> np.ndarray:
        offsets = self.pot.stencil_offsets
        table = np.empty((len(self.eval_ids), len(offsets)), dtype=np.int64)
        for row, site in enumerate(self.eval_ids):
            ci, cj = self.lattice.coords[site]
            for col, (oi, oj) in enumerate(offsets):
                nb = self.lattice.id_of((ci + oi, cj + oj))
                if nb < 0:
                    raise GeometryError(
                        f"site {int(site)} has no lattice neighbor at stencil offset ({oi}, {oj}); "
                        "the surrogate region must stay clear of defects and the domain boundary"
                    )
                table[row, col] = nb
        return table

    def _stencil_differences(self, v: np.ndarray) -> np.ndarray:
        return v[self.neighbor_table] - v[self.eval_ids][:, None, :]

    def _qm_spectral(self, v: np.ndarray):
        pos = (self.lattice.positions + v)[self.cluster]
        dists = cdist(pos, pos)
        check_admissible(dists, self.ref_dists, self.cluster)
        spectral = spectral_decompose(_hamiltonian_from_distances(self.model, dists), self.cluster)
        return pos, dists, spectral

    def energy(self, u) -> float:
        v = _check_displacement(u, self.lattice, self.ff_ids)
        _, _, spectral = self._qm_spectral(v)
        e_qm = float(np.sum(site_energies(spectral, self.model)[self.qm_rows])) - self.ref_qm_energy
        e_mm = float(np.sum(mm_energy_shifted_many(self.pot, self._stencil_differences(v))))
        return e_qm + e_mm

    def energy_and_gradient(self, u):
        v = _check_displacement(u, self.lattice, self.ff_ids)
        pos, dists, spectral = self._qm_spectral(v)
        e_qm = float(np.sum(site_energies(spectral, self.model)[self.qm_rows])) - self.ref_qm_energy
        density = projected_density(self.model, spectral, self.qm_rows)
        grad = np.zeros((len(self.lattice), 2))
        grad[self.cluster] = _contract_dh(self.model, pos, dists, density)

        g_many = self._stencil_differences(v)
        e_mm = float(np.sum(mm_energy_shifted_many(self.pot, g_many)))
        dv = mm_site_gradient_many(self.pot, g_many)
        np.add.at(grad, self.neighbor_table.ravel(), dv.reshape(-1, 2))
        np.add.at(grad, self.eval_ids, -dv.sum(axis=1))
        grad[self.ff_ids] = 0.0
        return e_qm + e_mm, grad


def hybrid_energy(u, partition, model, pot, lattice) -> float:
    """Energy difference of the coupled functional at displacement u."""
    return HybridEvaluator(partition, model, pot, lattice).energy(u)


def hybrid_gradient(u, partition, model, pot, lattice) -> np.ndarray:
    """Exact gradient of hybrid_energy; rows for FF sites are identically zero."""
    return HybridEvaluator(partition, model, pot, lattice).energy_and_gradient(u)[1]


@dataclass(frozen=True)
class HybridState:
    """Converged (or budget-exhausted) result of a hybrid minimization."""

    u: Displacement
    partition: RegionPartition
    energy: float
    gradient_norm: float
    converged: bool
    iterations: int = 0
    n_evals: int = 0


def solve_equilibrium(partition, model, pot, lattice, u0=None, g_tol=1e-6,
                      max_iter=2000) -> HybridState:
    """Minimize the hybrid functional over QM and MM displacements.

    FF sites stay pinned at zero.  Inadmissible trial steps (interpenetration)
    are rejected inside the line search; a line search that cannot progress
    raises OptimizationError carrying the last iterate.
    """
    ev = HybridEvaluator(partition, model, pot, lattice)
    free = ev.free_ids
    if u0 is None:
        v0 = np.zeros((len(lattice), 2))
    else:
        v0 = _check_displacement(u0, lattice, ev.ff_ids).copy()

    def unpack(x):
        v = np.zeros((len(lattice), 2))
        v[free] = x.reshape(-1, 2)
        return v

    def fg(x):
        e, grad = ev.energy_and_gradient(unpack(x))
        return e, grad[free].ravel()

    res = lbfgs_minimize(fg, v0[free].ravel(), g_tol=g_tol, max_iter=max_iter)
    v = unpack(res.x)
    return HybridState(
        u=Displacement(v),
        partition=partition,
        energy=res.value,
        gradient_norm=float(np.max(np.abs(res.gradient))) if res.gradient.size else 0.0,
        converged=res.converged,
        iterations=res.iterations,
        n_evals=res.n_evals,
    )
