"""Time loop: initial conditions, CFL-adaptive steps, and diagnostics.

Each accepted step runs classify -> assemble -> solve -> recover mu and
appends a diagnostics row; the step size is min(dt_safety * eps^2,
dt_CFL from the previous step's chemical potential).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .kernel import KernelMatrices, KernelSpec, assemble_kernel_matrices
from .mesh import Domain2D, Mesh, build_uniform_mesh
from .potential import MobilityParams, PotentialParams, psi1, psi2
from .solver import (
    SolverError,
    build_step_operators,
    classify_nodes,
    solve_vi_step,
)

_IC_CLIP = 1e-9


@dataclass
class SimConfig:
    """Full configuration of a run; defaults reproduce the reference setup."""

    pot: PotentialParams = field(default_factory=lambda: PotentialParams(phibar=0.6, epsilon=0.014))
    mob: MobilityParams = field(default_factory=lambda: MobilityParams(alpha=1.0, friction=1.0))
    kernel: KernelSpec = field(default_factory=lambda: KernelSpec(epsilon=0.014, cutoff=1e-6))
    domain: Domain2D = field(default_factory=lambda: Domain2D(-1.0, 1.0, -1.0, 1.0))
    nx: int = 80
    ny: int = 80
    dt_safety: float = 0.1
    t_end: float = 0.03
    ic_mean: float = 0.05
    ic_amplitude: float = 0.025
    ic_symmetric: bool = True
    rng_seed: int = 0
    solver_tol: float = 1e-6
    solver_max_iters: int = 20000
    snapshot_every: int = 50
    output_dir: str = "out"

    def __post_init__(self):
        if self.t_end <= 0:
            raise ValueError(f"t_end must be positive, got {self.t_end}")
        lo = self.ic_mean - self.ic_amplitude if self.ic_symmetric else self.ic_mean
        hi = self.ic_mean + self.ic_amplitude
        if not (0.0 <= lo and hi < 1.0):
            raise ValueError(
                f"initial range [{lo}, {hi}] must lie inside [0, 1)"
            )


@dataclass
class Diagnostics:
    """Per-step time series recorded by the run (step 0 is the initial state)."""

    step: list = field(default_factory=list)
    time: list = field(default_factory=list)
    dt: list = field(default_factory=list)
    lyapunov: list = field(default_factory=list)
    mass: list = field(default_factory=list)
    min_phi: list = field(default_factory=list)
    max_phi: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    cfl_bound: list = field(default_factory=list)

    def append(self, step, time, dt, lyap, mass, mn, mx, iters, cfl):
        self.step.append(step)
        self.time.append(time)
        self.dt.append(dt)
        self.lyapunov.append(lyap)
        self.mass.append(mass)
        self.min_phi.append(mn)
        self.max_phi.append(mx)
        self.iterations.append(iters)
        self.cfl_bound.append(cfl)

    def rows(self):
        for k in range(len(self.step)):
            yield (self.step[k], self.time[k], self.dt[k], self.lyapunov[k],
                   self.mass[k], self.min_phi[k], self.max_phi[k],
                   self.iterations[k])


class SimulationError(RuntimeError):
    """Solver failure during a run; carries the last good state."""

    def __init__(self, message, step_index, last_phi, last_mu, diagnostics):
        super().__init__(message)
        self.step_index = step_index
        self.last_phi = last_phi
        self.last_mu = last_mu
        self.diagnostics = diagnostics


def _splitmix64(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer; a counter-based hash to uniform uint64."""
    x = (x + np.uint64(0x9E3779B97F4A7C15)).astype(np.uint64)
    x ^= x >> np.uint64(30)
    x *= np.uint64(0xBF58476D1CE4E5B9)
    x ^= x >> np.uint64(27)
    x *= np.uint64(0x94D049BB133111EB)
    x ^= x >> np.uint64(31)
    return x


def init_field(cfg: SimConfig, mesh: Mesh) -> np.ndarray:
    """Perturbed uniform initial state, independent of traversal order.

    Uses a counter-based hash of (seed, node index), so the field is
    bit-identical regardless of evaluation order or thread count. Values
    are clamped into [0, 1 - 1e-9]; for alpha >= 2 also away from 0.
    """
    idx = np.arange(mesh.n_nodes, dtype=np.uint64)
    seed = np.uint64(np.int64(cfg.rng_seed).view(np.uint64))
    bits = _splitmix64(_splitmix64(np.full_like(idx, seed)) ^ idx)
    u = bits.astype(np.float64) / 2.0 ** 64
    if cfg.ic_symmetric:
        phi = cfg.ic_mean + cfg.ic_amplitude * (2.0 * u - 1.0)
    else:
        phi = cfg.ic_mean + cfg.ic_amplitude * u
    lo = _IC_CLIP if cfg.mob.alpha >= 2.0 else 0.0
    clipped = np.clip(phi, lo, 1.0 - _IC_CLIP)
    if cfg.mob.alpha >= 2.0 and np.any(phi < _IC_CLIP):
        warnings.warn("initial field clamped away from 0 (alpha >= 2 requires "
                      "a strictly positive start)")
    return clipped


def compute_cfl_dt(phi_prev: np.ndarray, mu: np.ndarray, mesh: Mesh,
                   mob: MobilityParams) -> float:
    """CFL bound min_K h_K / max |v| with v = -phi^(alpha-1) (1-phi)^2 grad(mu).

    The gradient of mu is element-constant; the prefactor uses the element
    mean of phi_prev and vanishes where that mean is zero (no flux there).
    Returns +inf when the velocity vanishes identically.
    """
    phi_prev = np.asarray(phi_prev, dtype=float)
    mu = np.asarray(mu, dtype=float)
    grad = np.einsum("eki,ei->ek", mesh.element_grads, mu[mesh.elements])
    speed = np.hypot(grad[:, 0], grad[:, 1])
    pm = phi_prev[mesh.elements].mean(axis=1)
    # 0^(alpha-1) follows the limit: 1 for alpha = 1 (front speed), 0 above
    with np.errstate(divide="ignore"):
        pref = pm ** (mob.alpha - 1.0) * (1.0 - pm) ** 2
    contrib = np.where(speed > 0, pref * speed, 0.0)
    vmax = float(contrib.max()) if contrib.size else 0.0
    if vmax == 0.0:
        return np.inf
    return mesh.min_element_diameter() / vmax


def lyapunov(phi: np.ndarray, km: KernelMatrices, mesh: Mesh,
             pot: PotentialParams) -> float:
    """Discrete free energy: potential part plus the non-local quadratic pair."""
    phi = np.asarray(phi, dtype=float)
    if np.any(phi >= 1.0):
        raise ValueError("lyapunov requires phi < 1 at every node")
    if np.any(phi < 0.0):
        raise ValueError("lyapunov requires phi >= 0 at every node")
    m = mesh.lumped_mass
    eps = pot.epsilon
    pot_part = float(np.dot(m, psi1(phi, pot) + psi2(phi, pot))) / eps
    quad = 0.5 * eps * (float(np.dot(phi, km.J1 * phi))
                        - float(np.dot(phi, km.J2 @ phi)))
    return pot_part + quad


def run(cfg: SimConfig, snapshot_sink=None) -> Diagnostics:
    """Run the time loop to cfg.t_end and return the diagnostics series.

    ``snapshot_sink``, when given, is called as sink(step, time, phi, mu)
    at step 0, every cfg.snapshot_every accepted steps, and at the final
    step. Solver failures are re-raised as SimulationError with the step
    index, the last good state, and the partial diagnostics attached.
    """
    mesh = build_uniform_mesh(cfg.domain, cfg.nx, cfg.ny)
    km = assemble_kernel_matrices(mesh, cfg.kernel)
    phi = init_field(cfg, mesh)
    mu = np.zeros(mesh.n_nodes)
    diag = Diagnostics()
    m = mesh.lumped_mass

    def record(step, t, dt, iters, cfl):
        diag.append(step, t, dt, lyapunov(phi, km, mesh, cfg.pot),
                    float(np.dot(m, phi)), float(phi.min()), float(phi.max()),
                    iters, cfl)

    t = 0.0
    step = 0
    record(step, t, 0.0, 0, np.inf)
    if snapshot_sink is not None:
        snapshot_sink(step, t, phi.copy(), mu.copy())
    dt_base = cfg.dt_safety * cfg.pot.epsilon ** 2
    last_emitted = 0

    while t < cfg.t_end:
        cfl = compute_cfl_dt(phi, mu, mesh, cfg.mob) if step > 0 else np.inf
        dt = min(dt_base, cfl)
        part = classify_nodes(phi, mesh)
        ops = build_step_operators(phi, part, mesh, cfg.mob)
        try:
            res = solve_vi_step(phi, mu, ops, km, mesh, cfg.pot, cfg.mob, dt,
                                tol=cfg.solver_tol,
                                max_iters=cfg.solver_max_iters)
        except SolverError as err:
            raise SimulationError(
                f"step {step + 1} failed: {err}", step_index=step + 1,
                last_phi=phi, last_mu=mu, diagnostics=diag) from err
        phi = res.phi_new
        mu = res.mu_new
        t += dt
        step += 1
        record(step, t, dt, res.iterations, cfl)
        if snapshot_sink is not None and step % cfg.snapshot_every == 0:
            snapshot_sink(step, t, phi.copy(), mu.copy())
            last_emitted = step

    if snapshot_sink is not None and last_emitted != step:
        snapshot_sink(step, t, phi.copy(), mu.copy())
    return diag
