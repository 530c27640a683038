import numpy as np
import pytest

from qmmmadapt import LatticeSpec, build_lattice
from qmmmadapt.coupling import decompose_ball, solve_equilibrium
from qmmmadapt.estimator import full_indicator, graded_mesh, sampled_indicator
from qmmmadapt.mmpotential import build_mm_potential
from qmmmadapt.tightbinding import morse_model


@pytest.fixture(scope="session")
def hom12():
    return build_lattice(LatticeSpec(), 12.0)


@pytest.fixture(scope="session")
def vac12():
    return build_lattice(LatticeSpec(defects=((0, 0),)), 12.0)


@pytest.fixture(scope="session")
def model():
    return morse_model()


@pytest.fixture(scope="session")
def pot(model):
    return build_mm_potential(model)


@pytest.fixture(scope="session")
def vac16(model, pot):
    """Converged single-vacancy state at r_qm=4, r_mm=16.

    The domain holds residual-force balls of radius up to 6 around every
    supported site (16 + 2*6), so indicator studies at cutoffs 5 and 6 both
    fit.  Shared session-wide because the solve is the expensive part.
    """
    lat = build_lattice(LatticeSpec(defects=((0, 0),)), 28.0)
    part = decompose_ball(lat, 4.0, 16.0, model.r_cut)
    state = solve_equilibrium(part, model, pot, lat)
    assert state.converged
    return lat, part, state


@pytest.fixture(scope="session")
def vac16_reports(vac16, model):
    """Indicator reports on the vac16 state, shared by module and gate tests."""
    lat, part, state = vac16
    mesh = graded_mesh(lat, part, 8, 5.0)
    return {
        "full5": full_indicator(model, lat, state.u, part, 5.0),
        "full6": full_indicator(model, lat, state.u, part, 6.0),
        "sampled5": sampled_indicator(model, lat, state.u, mesh, 5.0),
        "mesh": mesh,
    }


def perturbed_positions(lattice, cluster, scale=0.05, seed=0):
    """Reference positions with a small random displacement on cluster sites."""
    rng = np.random.default_rng(seed)
    y = lattice.positions.copy()
    y[cluster] += scale * rng.normal(size=(len(cluster), 2))
    return y
