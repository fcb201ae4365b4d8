import numpy as np
import pytest

from app.core.exceptions import SamplerError
from app.core.utils import spawn_rng
from app.models.points import load_samples
from app.models.schemas import MinimizerConfig, MinimizerMethod, ProposalKind, SamplerConfig
from app.services import library, sampler
from app.services.energy import hamiltonian


def test_delta_energy_matches_full_recomputation(ginibre16):
    V = library.quartic()
    new = np.array([0.3, -0.2])
    dH = sampler.delta_energy(ginibre16.points, 4, new, V)
    moved = ginibre16.with_point(4, new)
    assert dH == pytest.approx(hamiltonian(moved, V) - hamiltonian(ginibre16, V), rel=1e-10, abs=1e-10)
    assert sampler.delta_energy(ginibre16.points, 4, ginibre16.points[5], V) == np.inf


def test_acceptance_probability():
    assert sampler.acceptance_probability(-1.0, 2.0) == 1.0
    assert sampler.acceptance_probability(0.0, 2.0) == 1.0
    assert sampler.acceptance_probability(2.0, 2.0) == pytest.approx(np.exp(-2.0))


def _small(**overrides) -> SamplerConfig:
    base = dict(N=8, beta=2.0, proposal_sigma=0.1, burn_in=20, thinning=2, n_samples=5, seed=9)
    base.update(overrides)
    return SamplerConfig(**base)


def test_chains_are_reproducible():
    V = library.quadratic()
    a = sampler.run_chain(_small(), V)
    b = sampler.run_chain(_small(), V)
    c = sampler.run_chain(_small(), V, chain=1)
    assert len(a) == 5
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.points, y.points)
    assert not np.array_equal(a.samples[-1].points, c.samples[-1].points)
    assert a.stats["max_energy_drift"] < 1e-8
    np.testing.assert_allclose(a.energies[-1], hamiltonian(a.samples[-1], V), rtol=1e-9)


def test_threaded_chains_match_serial():
    V = library.quadratic()
    serial = sampler.run_chains(_small(), V, n_chains=3, threads=1)
    threaded = sampler.run_chains(_small(), V, n_chains=3, threads=3)
    for s, t in zip(serial, threaded):
        np.testing.assert_array_equal(s.samples[-1].points, t.samples[-1].points)


@pytest.mark.parametrize("proposal", [ProposalKind.METROPOLIS, ProposalKind.MALA])
def test_single_particle_is_gaussian(proposal):
    """For N = 1, beta = 2 and V = |x|^2 the Gibbs law is exp(-|x|^2), so E|x|^2 = 1."""
    cfg = SamplerConfig(N=1, beta=2.0, proposal_sigma=1.0, burn_in=200, thinning=1,
                        n_samples=4000, seed=21, proposal=proposal, init_box=0.5)
    result = sampler.run_chain(cfg, library.quadratic())
    r2 = np.array([np.sum(c.points ** 2) for c in result])
    assert np.mean(r2) == pytest.approx(1.0, abs=0.15)
    assert 0.05 < result.stats["acceptance"] < 0.95


def test_initialisation_needs_a_region():
    V = library.quadratic_bump()
    with pytest.raises(SamplerError):
        sampler.initial_configuration(_small(), V, spawn_rng(0, "init"))
    X = sampler.initial_configuration(_small(init_box=0.5), V, spawn_rng(0, "init"))
    assert X.N == 8 and np.all(np.abs(X.points) <= 0.5)


def test_initialisation_on_the_support(circular_law):
    X = sampler.initial_configuration(_small(N=50), library.quadratic(), spawn_rng(0, "init"), circular_law)
    assert np.all(np.hypot(X.x, X.y) <= 1.0 + circular_law.grid.spacing)


def test_save_chain(tmp_path):
    cfg = _small()
    result = sampler.run_chain(cfg, library.quadratic())
    files = sampler.save_chain(result, tmp_path / "chain.bin", cfg)
    loaded = load_samples(files["samples"])
    assert len(loaded) == len(result)
    assert files["sidecar"].exists()


def test_autocorrelation_time_of_white_noise(rng):
    assert sampler.autocorrelation_time(rng.standard_normal(5000)) == pytest.approx(1.0, abs=0.3)
    walk = np.cumsum(rng.standard_normal(5000))
    assert sampler.autocorrelation_time(walk) > 10
    assert sampler.autocorrelation_time(np.ones(10)) == 1.0


def test_ginibre_eigenvalues():
    X = sampler.sample_ginibre(200, spawn_rng(5, "g"))
    r = np.hypot(X.x, X.y)
    assert X.N == 200
    assert np.mean(r <= 1.0) > 0.9
    assert np.mean(r ** 2) == pytest.approx(0.5, abs=0.05)
    batch = sampler.ginibre_batch(10, 4, seed=3, threads=2)
    again = sampler.ginibre_batch(10, 4, seed=3)
    for a, b in zip(batch, again):
        np.testing.assert_array_equal(a.points, b.points)
    with pytest.raises(SamplerError):
        sampler.sample_ginibre(0, spawn_rng(5, "g"))


@pytest.mark.parametrize("method", [MinimizerMethod.LBFGS, MinimizerMethod.GRADIENT_DESCENT])
def test_two_particle_minimiser(method):
    cfg = MinimizerConfig(method=method, restarts=2, seed=4, max_iters=20000)
    result = sampler.minimize_energy(2, library.quadratic(), cfg)
    separation = np.hypot(*(result.config.points[0] - result.config.points[1]))
    assert result.converged
    assert separation == pytest.approx(1.0, abs=1e-6)
    assert result.energy == pytest.approx(1.0, abs=1e-10)


def test_minimiser_stays_in_the_support(circular_law):
    cfg = MinimizerConfig(restarts=2, seed=4)
    result = sampler.minimize_energy(20, library.quadratic(), cfg, eq=circular_law)
    assert result.confined
    assert sampler.confined_to_support(result.config.points, circular_law)
    assert not sampler.confined_to_support(np.array([[1.4, 0.0]]), circular_law)


@pytest.mark.parametrize("proposal", [ProposalKind.METROPOLIS, ProposalKind.MALA])
def test_sweep_keeps_cached_energy_exact(ginibre16, proposal):
    V = library.quadratic()
    state = sampler.ChainState.start(ginibre16, V, sigma=0.05)
    rng = spawn_rng(5, "sweep", proposal.value)
    for _ in range(5):
        sampler.metropolis_sweep(state, 2.0, V, rng, proposal)
    assert state.sweeps == 5
    assert state.proposed == 5 * ginibre16.N
    assert 0 < state.accepted <= state.proposed
    assert state.energy == pytest.approx(hamiltonian(state.config, V), rel=1e-10, abs=1e-10)
    assert state.resync(V) < 1e-10


def test_minimiser_energy_is_seed_independent(circular_law):
    N = 20
    energies = [
        sampler.minimize_energy(N, library.quadratic(), MinimizerConfig(restarts=4, seed=seed), eq=circular_law).energy
        for seed in (4, 19)
    ]
    assert abs(energies[0] - energies[1]) <= 1e-4 * N
