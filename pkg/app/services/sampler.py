"""
Configuration generators: single-particle Metropolis (optionally MALA)
for the Gibbs measure exp(-(beta/2) H_N), exact Ginibre eigenvalues for
beta = 2 with V = |x|^2, and deterministic energy minimisation.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Union

import numpy as np
from scipy import linalg, optimize
from scipy.ndimage import binary_dilation
from scipy.spatial.distance import pdist

from app.core.config import settings
from app.core.exceptions import SamplerError, SupportViolationError
from app.core.logging import get_logger
from app.core.utils import spawn_rng, write_json
from app.models.functions import Potential
from app.models.points import Configuration, save_samples
from app.models.schemas import MinimizerConfig, MinimizerMethod, ProposalKind, SamplerConfig
from app.services.energy import hamiltonian
from app.services.equilibrium import EquilibriumData, radial_support_radius

logger = get_logger("sampler")


# ---------------------------------------------------------------------------
# Chain state and single-particle moves
# ---------------------------------------------------------------------------

@dataclass
class ChainState:
    """Mutable chain position with a cached H_N and move counters."""
    points: np.ndarray
    energy: float
    sigma: float
    accepted: int = 0
    proposed: int = 0
    collisions: int = 0
    sweeps: int = 0
    max_drift: float = 0.0

    @classmethod
    def start(cls, config: Configuration, V: Potential, sigma: float) -> "ChainState":
        return cls(points=np.array(config.points, dtype=float), energy=hamiltonian(config, V), sigma=float(sigma))

    @property
    def config(self) -> Configuration:
        return Configuration(self.points)

    @property
    def N(self) -> int:
        return int(self.points.shape[0])

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else 0.0

    def resync(self, V: Potential) -> float:
        """Recompute H_N from scratch; returns the relative drift of the cached value."""
        exact = hamiltonian(self.config, V)
        drift = abs(self.energy - exact) / max(1.0, abs(exact))
        self.energy = exact
        self.max_drift = max(self.max_drift, drift)
        return drift


def delta_energy(points: np.ndarray, i: int, new: np.ndarray, V: Potential) -> float:
    """H_N after moving particle i to ``new`` minus H_N before, in O(N)."""
    others = np.delete(points, i, axis=0)
    old = points[i]
    d_old = np.hypot(others[:, 0] - old[0], others[:, 1] - old[1])
    d_new = np.hypot(others[:, 0] - new[0], others[:, 1] - new[1])
    if np.any(d_new == 0):
        return np.inf
    pair = 2.0 * float(np.sum(np.log(d_old) - np.log(d_new)))
    n = points.shape[0]
    dv = V.at_points(np.array([new, old]))
    return pair + n * float(dv[0] - dv[1])


def acceptance_probability(dH: float, beta: float) -> float:
    """min(1, exp(-(beta/2) dH))."""
    if dH <= 0:
        return 1.0
    return float(np.exp(-0.5 * beta * dH))


def particle_gradient(points: np.ndarray, i: int, x: np.ndarray, V: Potential) -> np.ndarray:
    """dH_N/dx_i with particle i placed at x."""
    others = np.delete(points, i, axis=0)
    diff = x[None, :] - others
    r2 = np.sum(diff * diff, axis=1)
    return -2.0 * np.sum(diff / r2[:, None], axis=0) + points.shape[0] * V.grad_at_points(x[None, :])[0]


def metropolis_sweep(
    state: ChainState,
    beta: float,
    V: Potential,
    rng: np.random.Generator,
    proposal: ProposalKind = ProposalKind.METROPOLIS,
) -> ChainState:
    """One pass over all particles in random order; updates ``state`` in place."""
    n = state.N
    order = rng.permutation(n)
    noise = rng.standard_normal((n, 2))
    uniforms = rng.random(n)
    sigma = state.sigma
    accepted = 0
    for k, i in enumerate(order):
        old = state.points[i].copy()
        if proposal == ProposalKind.MALA:
            drift_old = -0.25 * beta * sigma * sigma * particle_gradient(state.points, i, old, V)
            new = old + drift_old + sigma * noise[k]
        else:
            new = old + sigma * noise[k]
        dH = delta_energy(state.points, i, new, V)
        state.proposed += 1
        if not np.isfinite(dH):
            state.collisions += 1
            continue
        log_ratio = -0.5 * beta * dH
        if proposal == ProposalKind.MALA:
            drift_new = -0.25 * beta * sigma * sigma * particle_gradient(state.points, i, new, V)
            fwd = np.sum((new - old - drift_old) ** 2)
            bwd = np.sum((old - new - drift_new) ** 2)
            log_ratio += (fwd - bwd) / (2.0 * sigma * sigma)
        if log_ratio >= 0 or uniforms[k] < np.exp(log_ratio):
            state.points[i] = new
            state.energy += dH
            accepted += 1
    state.accepted += accepted
    state.sweeps += 1
    return state


# ---------------------------------------------------------------------------
# Chains
# ---------------------------------------------------------------------------

def autocorrelation_time(series: np.ndarray, window: float = 5.0) -> float:
    """Integrated autocorrelation time with FFT autocovariance and a self-consistent window."""
    x = np.asarray(series, dtype=float)
    n = x.size
    if n < 2:
        return 1.0
    x = x - x.mean()
    var = float(np.dot(x, x) / n)
    if var == 0.0:
        return 1.0
    size = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(x, n=size)
    acf = np.fft.irfft(f * np.conj(f), n=size)[:n] / (n * var)
    taus = 2.0 * np.cumsum(acf) - 1.0
    m = np.arange(n)
    ok = m >= window * taus
    cut = int(np.argmax(ok)) if ok.any() else n - 1
    return float(max(taus[cut], 1.0))


@dataclass
class ChainResult:
    samples: List[Configuration]
    energies: np.ndarray
    stats: Dict[str, float] = field(default_factory=dict)

    def __iter__(self) -> Iterator[Configuration]:
        return iter(self.samples)

    def __len__(self) -> int:
        return len(self.samples)


def initial_configuration(
    cfg: SamplerConfig,
    V: Potential,
    rng: np.random.Generator,
    eq: Optional[EquilibriumData] = None,
) -> Configuration:
    """N i.i.d. uniform points on supp(mu0), or on [-b, b]^2 when init_box is set."""
    n = cfg.N
    if cfg.init_box is not None:
        return Configuration(rng.uniform(-cfg.init_box, cfg.init_box, size=(n, 2)))
    if eq is not None:
        grid = eq.grid
        centers = grid.centers()[eq.sigma_mask.ravel()]
        if centers.shape[0] == 0:
            raise SamplerError("Equilibrium support is empty; cannot initialise the chain")
        picks = rng.integers(0, centers.shape[0], size=n)
        jitter = rng.uniform(-0.5, 0.5, size=(n, 2)) * grid.spacing
        return Configuration(centers[picks] + jitter)
    if V.is_radial:
        R = radial_support_radius(V)
        r = R * np.sqrt(rng.random(n))
        theta = 2.0 * np.pi * rng.random(n)
        return Configuration(np.column_stack([r * np.cos(theta), r * np.sin(theta)]))
    raise SamplerError("Initialisation needs an equilibrium support or an init_box", context={"potential": V.name})


def run_chain(cfg: SamplerConfig, V: Potential, eq: Optional[EquilibriumData] = None, chain: int = 0) -> ChainResult:
    """Burn in, then record one configuration every ``thinning`` sweeps.

    The step size adapts (Robbins-Monro on log sigma towards the target
    acceptance) only during burn-in. Deterministic for a given seed and
    chain index.
    """
    rng = spawn_rng(cfg.seed, "chain", chain)
    state = ChainState.start(initial_configuration(cfg, V, rng, eq), V, cfg.proposal_sigma)
    target = settings.TARGET_ACCEPTANCE
    log_sigma = np.log(state.sigma)

    for k in range(cfg.burn_in):
        before = state.accepted
        metropolis_sweep(state, cfg.beta, V, rng, cfg.proposal)
        if cfg.adapt:
            rate = (state.accepted - before) / state.N
            log_sigma += (rate - target) / (k + 1) ** 0.6
            state.sigma = float(np.exp(log_sigma))
        if state.sweeps % cfg.resync_every == 0:
            state.resync(V)
    burn_accepted, burn_proposed = state.accepted, state.proposed

    samples, energies = [], []
    for _ in range(cfg.n_samples):
        for _ in range(cfg.thinning):
            metropolis_sweep(state, cfg.beta, V, rng, cfg.proposal)
            if state.sweeps % cfg.resync_every == 0:
                drift = state.resync(V)
                if drift > 1e-6:
                    logger.warning(f"chain {chain}: cached energy drift {drift:.2e} at sweep {state.sweeps}")
        samples.append(state.config)
        energies.append(state.energy)
    state.resync(V)

    energies = np.asarray(energies)
    sampled = state.proposed - burn_proposed
    stats = {
        "chain": chain,
        "sweeps": state.sweeps,
        "sigma": state.sigma,
        "acceptance": (state.accepted - burn_accepted) / sampled if sampled else 0.0,
        "burn_in_acceptance": burn_accepted / burn_proposed if burn_proposed else 0.0,
        "collisions": state.collisions,
        "max_energy_drift": state.max_drift,
        "autocorrelation_time": autocorrelation_time(energies),
    }
    logger.debug(f"chain {chain} N={cfg.N} beta={cfg.beta}: acceptance {stats['acceptance']:.3f}, "
                 f"tau {stats['autocorrelation_time']:.2f}")
    return ChainResult(samples=samples, energies=energies, stats=stats)


def run_chains(cfg: SamplerConfig, V: Potential, n_chains: int, threads: int = 1, eq: Optional[EquilibriumData] = None) -> List[ChainResult]:
    """Independent chains on a thread pool; results come back in chain order."""
    if threads > 1 and n_chains > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda c: run_chain(cfg, V, eq, chain=c), range(n_chains)))
    return [run_chain(cfg, V, eq, chain=c) for c in range(n_chains)]


def save_chain(result: Union[ChainResult, List[ChainResult]], path: Union[str, Path], cfg: SamplerConfig) -> Dict[str, Path]:
    """Sample stream plus a JSON sidecar with config, seed and chain statistics."""
    results = result if isinstance(result, list) else [result]
    path = Path(path)
    samples = [c for r in results for c in r.samples]
    data = save_samples(path, samples)
    sidecar = write_json(path.with_suffix(path.suffix + ".json"), {
        "config": cfg.model_dump(mode="json"),
        "seed": cfg.seed,
        "chains": [r.stats for r in results],
    })
    return {"samples": data, "sidecar": sidecar}


# ---------------------------------------------------------------------------
# Ginibre oracle
# ---------------------------------------------------------------------------

def sample_ginibre(N: int, rng: np.random.Generator) -> Configuration:
    """Eigenvalues of an N x N complex Gaussian matrix scaled by 1/sqrt(N)."""
    if N < 1:
        raise SamplerError("Ginibre sampling needs N >= 1")
    A = (rng.standard_normal((N, N)) + 1j * rng.standard_normal((N, N))) / np.sqrt(2.0)
    try:
        z = linalg.eigvals(A, overwrite_a=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise SamplerError(f"Eigensolver failed: {exc}", context={"N": N}) from exc
    return Configuration.from_complex(z / np.sqrt(N))


def ginibre_batch(N: int, n_samples: int, seed: int, threads: int = 1) -> List[Configuration]:
    def draw(k: int) -> Configuration:
        return sample_ginibre(N, spawn_rng(seed, "ginibre", N, k))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(draw, range(n_samples)))
    return [draw(k) for k in range(n_samples)]


# ---------------------------------------------------------------------------
# Energy minimisation
# ---------------------------------------------------------------------------

def _energy_and_grad(flat: np.ndarray, V: Potential):
    pts = flat.reshape(-1, 2)
    n = pts.shape[0]
    if n > 1:
        d = pdist(pts)
        if np.any(d == 0):
            return np.inf, np.zeros_like(flat)
        pair = -2.0 * float(np.sum(np.log(d)))
        diff = pts[:, None, :] - pts[None, :, :]
        r2 = np.sum(diff * diff, axis=-1)
        np.fill_diagonal(r2, np.inf)
        gpair = -2.0 * np.sum(diff / r2[..., None], axis=1)
    else:
        pair, gpair = 0.0, np.zeros_like(pts)
    energy = pair + n * float(np.sum(V.at_points(pts)))
    grad = gpair + n * V.grad_at_points(pts)
    return energy, grad.ravel()


def _gradient_descent(x0: np.ndarray, V: Potential, cfg: MinimizerConfig, tol: float):
    x = x0.copy()
    f, g = _energy_and_grad(x, V)
    step = cfg.step
    it = 0
    for it in range(1, cfg.max_iters + 1):
        if np.max(np.abs(g)) <= tol:
            break
        t = step
        while True:
            trial = x - t * g
            ft, gt = _energy_and_grad(trial, V)
            if ft <= f - cfg.armijo * t * float(np.dot(g, g)):
                break
            t *= cfg.step_shrink
            if t < 1e-16:
                return x, f, g, it
        x, f, g = trial, ft, gt
        step = t / cfg.step_shrink
    return x, f, g, it


@dataclass
class MinimizerResult:
    config: Configuration
    energy: float
    grad_inf: float
    converged: bool
    confined: Optional[bool]
    iterations: int
    restart_energies: List[float]


def _restart(N: int, V: Potential, cfg: MinimizerConfig, k: int, radius: float):
    rng = spawn_rng(cfg.seed, "minimize", N, k)
    r = radius * np.sqrt(rng.random(N))
    theta = 2.0 * np.pi * rng.random(N)
    x0 = np.column_stack([r * np.cos(theta), r * np.sin(theta)]).ravel()
    tol = cfg.grad_tol * N
    if cfg.method == MinimizerMethod.LBFGS:
        res = optimize.minimize(
            _energy_and_grad, x0, args=(V,), jac=True, method="L-BFGS-B",
            options={"maxiter": cfg.max_iters, "gtol": tol, "ftol": 1e-16, "maxcor": 20},
        )
        x, it = res.x, int(res.nit)
        f, g = _energy_and_grad(x, V)
        if np.max(np.abs(g)) > tol:
            x, f, g, more = _gradient_descent(x, V, cfg, tol)
            it += more
    else:
        x, f, g, it = _gradient_descent(x0, V, cfg, tol)
    return x, f, g, it


def confined_to_support(points: np.ndarray, eq) -> bool:
    """All points in the support mask dilated by one cell."""
    grid = eq.grid
    mask = binary_dilation(eq.sigma_mask)
    inside = grid.contains(points)
    if not inside.all():
        return False
    ii, jj = grid.cell_index(points)
    return bool(np.all(mask[ii, jj]))


def minimize_energy(N: int, V: Potential, cfg: MinimizerConfig, eq: Optional[EquilibriumData] = None, threads: int = 1) -> MinimizerResult:
    """Best of ``restarts`` local minimisations of H_N.

    Converged means |grad H_N|_inf / N <= grad_tol. With ``eq`` the result
    must lie in the support (dilated by one cell), otherwise
    SupportViolationError is raised.
    """
    if eq is not None:
        radius = eq.support_radius()
    elif V.is_radial:
        radius = radial_support_radius(V)
    else:
        radius = 1.0

    runs = range(cfg.restarts)
    if threads > 1 and cfg.restarts > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(lambda k: _restart(N, V, cfg, k, radius), runs))
    else:
        outcomes = [_restart(N, V, cfg, k, radius) for k in runs]

    energies = [float(o[1]) for o in outcomes]
    best = int(np.argmin(energies))
    x, f, g, it = outcomes[best]
    grad_inf = float(np.max(np.abs(g))) if g.size else 0.0
    converged = grad_inf / N <= cfg.grad_tol
    if not converged:
        logger.warning(f"minimizer N={N}: |grad|_inf/N = {grad_inf / N:.2e} above tolerance {cfg.grad_tol:.1e}")
    points = x.reshape(N, 2)
    confined = None
    if eq is not None:
        confined = confined_to_support(points, eq)
        if not confined:
            raise SupportViolationError("Minimizer returned points outside the equilibrium support",
                                        context={"N": N, "energy": f})
    logger.info(f"minimizer N={N}: H_N = {f:.8f} after {it} iterations (best of {cfg.restarts})")
    return MinimizerResult(Configuration(points), float(f), grad_inf, converged, confined, it, energies)
