"""Quadratic surrogate for the homogeneous-lattice site energy.

The molecular-mechanics region replaces each tight-binding site energy by a
second-order Taylor expansion in the finite differences g of the
displacement field over a fixed neighbor stencil.  Expansion data (value,
gradient, hessian at the undeformed state) is computed once from the
homogeneous lattice: the gradient analytically, the hessian by central
finite differences of analytic gradients, which avoids one order of
cancellation.

Two radii play different roles.  The stencil radius r_cut_mm bounds which
neighbor differences the surrogate depends on, and therefore how close to
a defect it stays well-defined.  The energy whose Taylor data we take is
that of a site embedded in a cluster of the full interaction radius of the
model: truncating that cluster at the stencil radius would contaminate
every coefficient with cluster-edge error (about 1e-3 on the gradient at
the default temperature, versus 1e-5 with the full-radius template), which
shows up as a spurious force plateau along the QM/MM interface.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .errors import CacheError, DimensionError, InvalidSpecError, NumericalError, UnsupportedOrderError
from .lattice import LatticeSpec, build_lattice
from .tightbinding import (
    TBModel,
    assemble_hamiltonian,
    projected_energy_gradient,
    site_energies,
    spectral_decompose,
)

_FORMAT = "qmmmadapt-mmpot-v1"
_HESS_STEP = 1e-4


@dataclass(frozen=True)
class MMPotential:
    """Taylor data of the homogeneous site energy about the reference state.

    The stencil lists neighbor offsets in integer lattice coordinates,
    ordered by (radius, angle) so serialized potentials are portable.
    Flattened vectors interleave per-offset x and y components in stencil
    order, matching `grad.ravel()`.
    """

    stencil_offsets: np.ndarray
    stencil_positions: np.ndarray
    v0: float
    grad: np.ndarray
    hess: np.ndarray
    order: int
    r_cut_mm: float
    model_fingerprint: str

    @property
    def n_stencil(self) -> int:
        return len(self.stencil_offsets)

    def fingerprint(self) -> str:
        payload = {
            "kind": "mm-potential",
            "model": self.model_fingerprint,
            "r_cut_mm": repr(self.r_cut_mm),
            "order": self.order,
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def build_mm_potential(model: TBModel, r_cut_mm: float = 3.05, order: int = 2,
                       lattice_spec: LatticeSpec = None) -> MMPotential:
    """Expand the homogeneous site energy to second order about rest.

    The expanded quantity is the site energy of the central site of a
    homogeneous template cluster whose radius is the model interaction
    range (at least r_cut_mm).  Expansion variables are the displacements
    of the stencil sites within r_cut_mm of the center; the center and the
    outer template annulus are pinned, differences are relative to the
    center.
    """
    if order != 2:
        raise UnsupportedOrderError(f"only second-order expansion is implemented, got order={order}")
    if lattice_spec is None:
        lattice_spec = LatticeSpec()
    if lattice_spec.defects:
        raise InvalidSpecError("the expansion reference must be a homogeneous lattice")
    lat = build_lattice(lattice_spec, max(float(model.r_cut), float(r_cut_mm)))
    # id 0 is the origin by the (radius, angle) ordering, and the stencil
    # occupies the contiguous id range right after it
    assert lat.id_of((0, 0)) == 0
    n = int(np.sum(np.linalg.norm(lat.positions, axis=1) <= r_cut_mm)) - 1
    if n < 1:
        raise InvalidSpecError(f"r_cut_mm={r_cut_mm} captures no neighbors")
    cluster = np.arange(len(lat), dtype=np.int64)

    spectral = spectral_decompose(assemble_hamiltonian(model, lat, cluster), cluster)
    v0 = float(site_energies(spectral, model)[0])

    def center_gradient(y):
        return projected_energy_gradient(model, lat, cluster, [0], y)[1:1 + n]

    grad = center_gradient(None)

    hess = np.zeros((2 * n, 2 * n))
    for col in range(2 * n):
        y_p = lat.positions.copy()
        y_m = lat.positions.copy()
        site, axis = 1 + col // 2, col % 2
        y_p[site, axis] += _HESS_STEP
        y_m[site, axis] -= _HESS_STEP
        hess[:, col] = (center_gradient(y_p) - center_gradient(y_m)).ravel() / (2.0 * _HESS_STEP)

    asym = float(np.max(np.abs(hess - hess.T)))
    if asym > 1e-6:
        raise NumericalError(f"hessian asymmetry {asym:.3e} exceeds tolerance; step size unsuitable")
    hess = 0.5 * (hess + hess.T)

    return MMPotential(
        stencil_offsets=lat.coords[1:1 + n].copy(),
        stencil_positions=lat.positions[1:1 + n].copy(),
        v0=v0,
        grad=grad,
        hess=hess,
        order=2,
        r_cut_mm=float(r_cut_mm),
        model_fingerprint=model.fingerprint(),
    )


def _flat(pot: MMPotential, g) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    if g.shape != (pot.n_stencil, 2):
        raise DimensionError(f"expected stencil differences of shape ({pot.n_stencil}, 2), got {g.shape}")
    return g.ravel()


def mm_site_energy(pot: MMPotential, g) -> float:
    """Quadratic model energy at stencil differences g."""
    gf = _flat(pot, g)
    return pot.v0 + float(pot.grad.ravel() @ gf) + 0.5 * float(gf @ pot.hess @ gf)


def mm_site_gradient(pot: MMPotential, g) -> np.ndarray:
    """Derivative of mm_site_energy with respect to g, shaped like g."""
    gf = _flat(pot, g)
    return (pot.grad.ravel() + pot.hess @ gf).reshape(-1, 2)


def mm_energy_shifted_many(pot: MMPotential, g_many: np.ndarray) -> np.ndarray:
    """V(g) - V(0) for a batch of stencil differences, shape (n, |stencil|, 2)."""
    n = g_many.shape[0]
    if g_many.shape[1:] != (pot.n_stencil, 2):
        raise DimensionError(f"batch stencil size mismatch: {g_many.shape}")
    gf = g_many.reshape(n, 2 * pot.n_stencil)
    lin = gf @ pot.grad.ravel()
    quad = 0.5 * np.einsum("ij,ij->i", gf @ pot.hess, gf)
    return lin + quad


def mm_site_gradient_many(pot: MMPotential, g_many: np.ndarray) -> np.ndarray:
    """Batched mm_site_gradient, shape (n, |stencil|, 2)."""
    n = g_many.shape[0]
    if g_many.shape[1:] != (pot.n_stencil, 2):
        raise DimensionError(f"batch stencil size mismatch: {g_many.shape}")
    gf = g_many.reshape(n, 2 * pot.n_stencil)
    return (pot.grad.ravel()[None, :] + gf @ pot.hess).reshape(n, pot.n_stencil, 2)


def _payload(pot: MMPotential) -> dict:
    return {
        "format": _FORMAT,
        "model": pot.model_fingerprint,
        "r_cut_mm": pot.r_cut_mm,
        "order": pot.order,
        "stencil": [[int(i), int(j)] for i, j in pot.stencil_offsets],
        "positions": pot.stencil_positions.tolist(),
        "v0": pot.v0,
        "grad": pot.grad.tolist(),
        "hess": pot.hess.tolist(),
    }


def _checksum(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def save_mm_potential(pot: MMPotential, path: str) -> None:
    """Write the potential to a checksummed JSON cache file (atomic replace)."""
    payload = _payload(pot)
    doc = {"payload": payload, "checksum": _checksum(payload)}
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(doc, fh)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def load_mm_potential(path: str) -> MMPotential:
    """Read a potential written by save_mm_potential, verifying its checksum."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CacheError(f"cannot read MM potential cache {path}: {exc}") from exc
    payload = doc.get("payload", {})
    if payload.get("format") != _FORMAT:
        raise CacheError(f"unrecognized MM potential cache format in {path}")
    if doc.get("checksum") != _checksum(payload):
        raise CacheError(f"MM potential cache {path} failed its integrity check")
    return MMPotential(
        stencil_offsets=np.array(payload["stencil"], dtype=np.int64),
        stencil_positions=np.array(payload["positions"], dtype=float),
        v0=float(payload["v0"]),
        grad=np.array(payload["grad"], dtype=float),
        hess=np.array(payload["hess"], dtype=float),
        order=int(payload["order"]),
        r_cut_mm=float(payload["r_cut_mm"]),
        model_fingerprint=payload["model"],
    )
