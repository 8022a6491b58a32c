"""One implicit time step of the discrete variational-inequality scheme.

The step classifies passive nodes (whole basis-support patch at zero),
freezes them, and solves the reduced complementarity system on the active
nodes with a projected, diagonally preconditioned gradient iteration. The
modified mobility stiffness has the indicator of each active component in
its kernel (all row sums of a stiffness matrix vanish, and elements
bridging a component to a passive patch carry zero mobility), so inner
solves are consistent singular CG solves and the projection enforces the
per-component lumped-mass constraint alongside the bound v >= 0; the
fixed points are the KKT points of the step's convex minimization problem
with per-component multipliers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.csgraph as csgraph

from .kernel import KernelMatrices
from .mesh import Mesh, assemble_stiffness
from .potential import (
    MobilityParams,
    PotentialParams,
    mobility,
    psi1,
    psi1_lambda,
    psi1_prime,
    psi1_second,
    psi2_prime,
)

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITERS = 20000
INNER_RTOL = 1e-10
COEFF_FLOOR = 1e-14
_ARMIJO_C1 = 1e-4
_MAX_BACKTRACKS = 60


class SolverError(RuntimeError):
    """Raised when an iteration fails to converge or hits invalid state."""

    def __init__(self, message, last_phi=None, residual=None):
        super().__init__(message)
        self.last_phi = last_phi
        self.residual = residual


@dataclass
class NodePartition:
    """Passive set and maximally connected active components.

    passive[j] is True when phi vanishes on the whole support patch of
    node j; components are index arrays of active nodes, connected under
    shared-element adjacency; labels[j] is the component id or -1.
    """

    passive: np.ndarray
    components: list
    labels: np.ndarray

    @property
    def passive_indices(self) -> np.ndarray:
        return np.where(self.passive)[0]

    @property
    def component_masks(self) -> list:
        return [np.where(self.labels == ci, 1.0, 0.0)
                for ci in range(len(self.components))]


@dataclass
class StepOperators:
    """Passive-modified matrices for one step.

    Ahat: mobility stiffness with passive rows/columns replaced by the
    identity; mhat: lumped masses with unit passive diagonal. The pair
    realizes Ahat^-1 Mhat as an implicit operator (apply = linear solve).
    kernel_flags[m] marks components whose indicator lies in ker(Ahat);
    inner solves there are consistent singular systems, handled by pinning
    one anchor node per such component and factorizing the pinned matrix.
    """

    Ahat: sp.csr_matrix
    mhat: np.ndarray
    diag: np.ndarray
    part: NodePartition
    lumped: np.ndarray
    kernel_flags: list
    floored_elements: int = 0
    _lu: object = field(default=None, repr=False)
    _anchors: np.ndarray = field(default=None, repr=False)

    def _factorized(self):
        """Sparse LU of Ahat with kernel components pinned at an anchor node."""
        if self._lu is None:
            anchors = np.array(
                [c[0] for c, isker in zip(self.part.components, self.kernel_flags)
                 if isker], dtype=np.int64)
            A = self.Ahat
            if anchors.size:
                keep = np.ones(A.shape[0])
                keep[anchors] = 0.0
                pin = np.zeros(A.shape[0])
                pin[anchors] = 1.0
                Zk = sp.diags(keep)
                A = (Zk @ A @ Zk + sp.diags(pin)).tocsr()
            self._lu = sp.linalg.splu(A.tocsc(),
                                      permc_spec="MMD_AT_PLUS_A",
                                      options={"SymmetricMode": True})
            self._anchors = anchors
        return self._lu, self._anchors


@dataclass
class StepResult:
    """Converged state of one step plus multipliers and diagnostics."""

    phi_new: np.ndarray
    mu_new: np.ndarray
    eta: np.ndarray
    iterations: int
    residual: float
    diagnostics: dict = field(default_factory=dict)


def classify_nodes(phi_prev: np.ndarray, mesh: Mesh) -> NodePartition:
    """Split nodes into the passive set and connected active components.

    A node is passive iff phi_prev vanishes at the node and at every
    neighbour sharing an element (the exact product (phi, chi_j) of a
    nonnegative P1 field vanishes exactly on such patches).
    """
    phi_prev = np.asarray(phi_prev, dtype=float)
    if phi_prev.shape != (mesh.n_nodes,):
        raise ValueError(f"field size mismatch: {phi_prev.shape} vs {mesh.n_nodes}")
    if np.any(phi_prev < 0):
        raise ValueError("classify_nodes requires a nonnegative field")
    pos = phi_prev > 0
    patch_pos = pos | (np.asarray(mesh.adjacency_matrix @ pos) > 0)
    passive = ~patch_pos
    labels = np.full(mesh.n_nodes, -1, dtype=np.int64)
    active_idx = np.where(~passive)[0]
    components = []
    if active_idx.size:
        sub = mesh.adjacency_matrix[active_idx][:, active_idx]
        ncomp, sublabels = csgraph.connected_components(sub, directed=False)
        labels[active_idx] = sublabels
        components = [active_idx[sublabels == ci] for ci in range(ncomp)]
    return NodePartition(passive=passive, components=components, labels=labels)


def build_step_operators(phi_prev: np.ndarray, part: NodePartition,
                         mesh: Mesh, mob: MobilityParams) -> StepOperators:
    """Assemble the passive-modified mobility stiffness and lumped mass.

    The element coefficient is the mobility at the mean of the three
    vertex values. Elements whose vertices are all active get a tiny floor
    so the mobility graph stays connected inside each component (the floor
    count is reported in the result's diagnostics).
    """
    phi_prev = np.asarray(phi_prev, dtype=float)
    if np.any(phi_prev[part.passive] != 0.0):
        raise ValueError("partition inconsistent with phi_prev: passive node with phi != 0")
    coeff = mobility(phi_prev[mesh.elements].mean(axis=1), mob)
    all_active = ~part.passive[mesh.elements].any(axis=1)
    needs_floor = all_active & (coeff < COEFF_FLOOR)
    floored = int(needs_floor.sum())
    if floored:
        coeff = np.where(needs_floor, COEFF_FLOOR, coeff)

    A = assemble_stiffness(mesh, coeff)
    active = (~part.passive).astype(float)
    Z = sp.diags(active)
    Ahat = (Z @ A @ Z + sp.diags(part.passive.astype(float))).tocsr()
    Ahat.sort_indices()
    mhat = np.where(part.passive, 1.0, mesh.lumped_mass)
    diag = Ahat.diagonal()
    if np.any(diag <= 0):
        raise SolverError("modified stiffness has a nonpositive diagonal entry")

    scale = max(1.0, float(np.abs(diag).max()))
    kernel_flags = []
    for c in part.components:
        ind = np.zeros(mesh.n_nodes)
        ind[c] = 1.0
        kernel_flags.append(bool(np.abs(Ahat @ ind).max() <= 1e-10 * scale))
    return StepOperators(Ahat=Ahat, mhat=mhat, diag=diag, part=part,
                         lumped=mesh.lumped_mass, kernel_flags=kernel_flags,
                         floored_elements=floored)


def _pcg(A: sp.csr_matrix, b: np.ndarray, x0, rtol: float, maxiter: int,
         diag: np.ndarray):
    """Jacobi-preconditioned CG; stops on the true relative residual."""
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), 0
    x = np.zeros_like(b) if x0 is None else x0.astype(float, copy=True)
    r = b - A @ x
    if np.linalg.norm(r) <= rtol * bnorm:
        return x, 0
    z = r / diag
    p = z.copy()
    rz = np.dot(r, z)
    for it in range(1, maxiter + 1):
        Ap = A @ p
        pAp = np.dot(p, Ap)
        if pAp <= 0:
            raise SolverError("inner CG met a nonpositive curvature direction "
                              "(modified stiffness not positive semi-definite?)")
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        if np.linalg.norm(r) <= rtol * bnorm:
            return x, it
        z = r / diag
        rz_new = np.dot(r, z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError(f"inner CG did not reach rtol={rtol:g} in {maxiter} iterations")


def _solve_inner(ops: StepOperators, rhs: np.ndarray, x0=None,
                 rtol: float = INNER_RTOL, maxiter: int | None = None):
    """Solve Ahat y = rhs, fixing the component-constant kernel directions.

    For components whose indicator spans ker(Ahat), the right-hand side is
    projected onto the range (per-component mean removal) and the solution
    is normalized to zero lumped mean there, which makes the map a
    deterministic linear pseudo-inverse realization. The pinned matrix is
    factorized once per step; solves are refined iteratively until the
    relative residual of the consistent system is below rtol.
    """
    rhs = np.asarray(rhs, dtype=float).copy()
    for c, isker in zip(ops.part.components, ops.kernel_flags):
        if isker:
            rhs[c] -= rhs[c].sum() / c.size
    bnorm = np.linalg.norm(rhs)
    if bnorm == 0.0:
        return np.zeros_like(rhs), 0
    lu, anchors = ops._factorized()
    b = rhs
    if anchors.size:
        b = rhs.copy()
        b[anchors] = 0.0
    y = lu.solve(b)
    iters = 1
    for _ in range(3):
        r = b - ops.Ahat @ y
        if anchors.size:
            r[anchors] = 0.0
        if np.linalg.norm(r) <= rtol * bnorm:
            break
        y += lu.solve(r)
        iters += 1
    else:
        raise SolverError(f"inner solve failed to reach rtol={rtol:g} "
                          "after iterative refinement")
    for c, isker in zip(ops.part.components, ops.kernel_flags):
        if isker:
            mc = ops.lumped[c]
            y[c] -= np.dot(mc, y[c]) / mc.sum()
    return y, iters


def apply_Q(v: np.ndarray, ops: StepOperators, km: KernelMatrices,
            dt: float, eps: float) -> np.ndarray:
    """Action of Q = eps*J1 + (1/dt) Ahat^-1 Mhat on nodal values."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    v = np.asarray(v, dtype=float)
    y, _ = _solve_inner(ops, ops.mhat * v)
    return eps * km.J1 * v + y / dt


def recover_mu(phi_new: np.ndarray, phi_prev: np.ndarray,
               ops: StepOperators, dt: float) -> np.ndarray:
    """Chemical potential mu = -(1/dt) Ahat^-1 Mhat (phi_new - phi_prev).

    Frozen passive nodes yield mu = 0 there; on each active component the
    solution is normalized to zero lumped mean (mu is unique only up to a
    per-component constant on the components' interiors).
    """
    phi_new = np.asarray(phi_new, dtype=float)
    phi_prev = np.asarray(phi_prev, dtype=float)
    if phi_new.shape != phi_prev.shape:
        raise ValueError("phi_new and phi_prev shapes differ")
    y, _ = _solve_inner(ops, ops.mhat * (phi_new - phi_prev))
    return -y / dt


def discrete_green_apply(v: np.ndarray, mesh: Mesh,
                         rtol: float = INNER_RTOL) -> np.ndarray:
    """Zero-mean solution of the constant-coefficient stiffness system.

    Solves (grad G v, grad chi) = (v, chi)^h for all chi, requiring the
    input to have zero lumped mean.
    """
    v = np.asarray(v, dtype=float)
    m = mesh.lumped_mass
    mean = float(np.dot(m, v))
    if abs(mean) > 1e-10 * max(1.0, float(np.dot(m, np.abs(v)))):
        raise ValueError(f"discrete Green operator needs zero lumped mean, got {mean:g}")
    A = mesh.unit_stiffness()
    b = m * v
    b -= b.sum() / b.size
    y, _ = _pcg(A, b, None, rtol, max(1000, 10 * mesh.n_nodes), A.diagonal())
    y -= np.dot(m, y) / m.sum()
    return y


def _project_mass_box(x, mc, wc, target):
    """Exact weighted projection onto {v >= 0, mc . v = target}.

    Returns max(0, x + theta*wc) with theta solving the piecewise-linear
    mass equation by breakpoint search. Requires target > 0, wc > 0.
    """
    th = -x / wc
    order = np.argsort(th)
    th_s = th[order]
    A = np.concatenate([[0.0], np.cumsum((mc * x)[order])])
    B = np.concatenate([[0.0], np.cumsum((mc * wc)[order])])
    k = th_s.size
    # S at breakpoint t, approached with the first t nodes switched on
    s_break = A[:k] + th_s * B[:k]
    idx = int(np.searchsorted(s_break, target, side="left"))
    theta = (target - A[idx]) / B[idx] if idx > 0 or B[idx] > 0 else th_s[0]
    return np.maximum(0.0, x + theta * wc)


def _stationarity(v, g, comps, m):
    """Worst KKT violation and per-component multiplier estimates.

    gamma_m is the mass-constraint multiplier (mass-weighted mean of the
    gradient over strictly positive nodes); eta = g - gamma*m must vanish
    on positive nodes and be nonnegative on zero nodes.
    """
    worst = 0.0
    gammas = np.zeros(len(comps))
    for ci, c in enumerate(comps):
        vc, gc, mc = v[c], g[c], m[c]
        pos = vc > 0
        gam = gc[pos].sum() / mc[pos].sum() if pos.any() else 0.0
        eta = gc - gam * mc
        if pos.any():
            worst = max(worst, float(np.abs(eta[pos]).max()))
        if (~pos).any():
            worst = max(worst, max(0.0, -float(eta[~pos].min())))
        gammas[ci] = gam
    return worst, gammas


def _trivial_result(phi_prev, n):
    return StepResult(phi_new=phi_prev.copy(), mu_new=np.zeros(n),
                      eta=np.zeros(n), iterations=0, residual=0.0,
                      diagnostics={"gamma": np.zeros(0), "inner_iterations": 0,
                                   "scale": 1.0})


def _projected_cg(apply_h, rhs, project, precond_diag, rtol, maxiter):
    """Preconditioned CG for P H P dv = P rhs on the range of P."""
    b = project(rhs)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b)
    x = np.zeros_like(b)
    r = b.copy()
    z = project(r / precond_diag)
    p = z.copy()
    rz = np.dot(r, z)
    for _ in range(maxiter):
        hp = project(apply_h(p))
        php = np.dot(p, hp)
        if php <= 0:
            break
        a = rz / php
        x += a * p
        r -= a * hp
        if np.linalg.norm(r) <= rtol * bnorm:
            break
        z = project(r / precond_diag)
        rz_new = np.dot(r, z)
        if rz_new <= 0:
            break
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x


def _newton_polish(v, y, grad_at, psi1_sec_scaled, J1, eps, dt, ops,
                   comps, m, barrier, target, precond_diag, max_newton=12):
    """Semismooth Newton refinement of a near-optimal iterate.

    Works on the face {v > 0} (releasing zero nodes whose reduced gradient
    is negative), solves the reduced Hessian system by projected CG in the
    per-component mass null space, and caps steps at the bounds so the
    blocking node lands exactly on zero. Returns the best
    (v, g, y, stationarity) seen.
    """
    g, y = grad_at(v, y)
    stat, gammas = _stationarity(v, g, comps, m)
    best = (v.copy(), g, y, stat)
    for _ in range(max_newton):
        if stat <= target:
            break
        free = []
        for ci, c in enumerate(comps):
            eta_c = g[c] - gammas[ci] * m[c]
            free.append(c[(v[c] > 0) | (eta_c < 0)])
        free = np.concatenate(free)
        if free.size == 0:
            break
        in_free = np.zeros(v.size, dtype=bool)
        in_free[free] = True
        sel_comp = [c[in_free[c]] for c in comps]

        def project(z):
            out = z.copy()
            for c in sel_comp:
                if c.size:
                    mc = m[c]
                    out[c] -= mc * (np.dot(mc, out[c]) / np.dot(mc, mc))
            return out

        curv = psi1_sec_scaled(v)

        def apply_h(z):
            yz, _ = _solve_inner(ops, ops.mhat * z)
            hz = eps * J1 * z + m * yz / dt + curv * z
            hz[~in_free] = 0.0
            return hz

        rhs = np.where(in_free, -g, 0.0)
        dv = _projected_cg(apply_h, rhs, project, precond_diag, rtol=1e-8,
                           maxiter=10 * free.size + 50)
        if not np.any(dv):
            break
        t = 1.0
        blocking = -1
        down = np.where(dv < 0)[0]
        if down.size:
            ratios = v[down] / -dv[down]
            k = int(np.argmin(ratios))
            if ratios[k] < t:
                t = float(ratios[k])
                blocking = int(down[k])
        if barrier:
            up = np.where(dv > 0)[0]
            if up.size:
                room = 0.95 * float(((1.0 - 1e-9 - v[up]) / dv[up]).min())
                if room < t:
                    t = room
                    blocking = -1
        if t <= 0:
            break
        v = np.maximum(v + t * dv, 0.0)
        if blocking >= 0:
            v[blocking] = 0.0
        g, y = grad_at(v, y)
        stat, gammas = _stationarity(v, g, comps, m)
        if stat < best[3]:
            best = (v.copy(), g, y, stat)
    return best


def _projected_gradient(phi_prev, ops, km, mesh, pot, dt, tol, max_iters,
                        initial_step, psi1_value, psi1_deriv, psi1_sec,
                        barrier):
    """Shared projected-gradient core for the VI and regularized steps.

    Steps v <- P(v - alpha D^-1 grad) with a Barzilai-Borwein step length,
    Armijo backtracking on the primal objective, and the D-metric
    projection P onto {v >= 0} with the per-component lumped mass pinned.
    When the first-order iteration reaches its numerical floor before the
    requested stationarity, a semismooth Newton polish finishes the job.
    """
    n = mesh.n_nodes
    m = mesh.lumped_mass
    eps = pot.epsilon
    part = ops.part
    comps = part.components
    if not comps:
        return _trivial_result(phi_prev, n)

    J1 = km.J1
    j2_prev = km.J2 @ phi_prev
    lin = m * psi2_prime(phi_prev, pot) / eps - eps * j2_prev
    targets = [float(np.dot(m[c], phi_prev[c])) for c in comps]
    D = eps * J1 + (1.0 / dt) * ops.mhat / ops.diag
    if np.any(D <= 0):
        raise SolverError("nonpositive preconditioner diagonal")
    w_proj = [m[c] / D[c] for c in comps]
    inner_total = 0

    def evaluate(v, y0):
        nonlocal inner_total
        if barrier and np.any(v >= 1.0):
            return np.inf, None, None
        y, it = _solve_inner(ops, ops.mhat * (v - phi_prev), x0=y0)
        inner_total += it
        obj = (0.5 * eps * np.dot(v, J1 * v)
               + 0.5 / dt * np.dot(m * (v - phi_prev), y)
               + np.dot(m, psi1_value(v)) / eps
               + np.dot(lin, v))
        grad = eps * J1 * v + m * y / dt + m * psi1_deriv(v) / eps + lin
        return obj, grad, y

    def grad_at(v, y0):
        nonlocal inner_total
        y, it = _solve_inner(ops, ops.mhat * (v - phi_prev), x0=y0)
        inner_total += it
        return eps * J1 * v + m * y / dt + m * psi1_deriv(v) / eps + lin, y

    def project(x):
        v = np.zeros(n)
        for c, wc, tgt in zip(comps, w_proj, targets):
            v[c] = _project_mass_box(x[c], m[c], wc, tgt)
        return v

    def polish(v, y):
        return _newton_polish(
            v, y, grad_at, lambda w: m * psi1_sec(w) / eps, J1, eps, dt, ops,
            comps, m, barrier, target=tol * scale, precond_diag=D)

    v = phi_prev.copy()
    obj, g, y = evaluate(v, None)
    if not np.all(np.isfinite(g)):
        raise SolverError("non-finite gradient at the warm start")
    active_any = np.concatenate(comps)
    scale = max(1.0, float(np.abs(g[active_any]).max()))
    alpha = initial_step
    v_old = g_old = None
    iters = 0
    done = False

    while iters < max_iters:
        iters += 1
        if v_old is not None:
            s = v - v_old
            dg = g - g_old
            denom = float(np.dot(s, dg))
            alpha = float(np.dot(s, D * s)) / denom if denom > 0 else 1.0
            alpha = min(max(alpha, 1e-12), 1e12)
        t = alpha
        accepted = False
        for _ in range(_MAX_BACKTRACKS):
            v_t = project(v - t * g / D)
            delta = v_t - v
            obj_t, g_t, y_t = evaluate(v_t, y)
            if np.isfinite(obj_t) and obj_t <= obj + _ARMIJO_C1 * np.dot(g, delta):
                accepted = True
                break
            t *= 0.5
        if accepted:
            if g_t is not None and not np.all(np.isfinite(g_t)):
                raise SolverError("non-finite gradient during iteration",
                                  last_phi=v_t)
            disp = float(np.abs(delta).max())
            v_old, g_old = v, g
            v, obj, g, y = v_t, obj_t, g_t, y_t
            if disp >= tol:
                continue
        # displacement below tolerance (or line-search floor): certify the
        # KKT conditions, refining with the semismooth Newton polish if the
        # first-order iteration left residual stationarity behind
        res, _ = _stationarity(v, g, comps, m)
        if res / scale > tol:
            v, g, y, res = polish(v, y)
        if res / scale > tol:
            raise SolverError("projected gradient stalled before reaching "
                              "stationarity", last_phi=v, residual=res / scale)
        done = True
        break
    if not done:
        res, _ = _stationarity(v, g, comps, m)
        if res / scale > tol:
            raise SolverError(f"iteration cap {max_iters} exceeded", last_phi=v,
                              residual=res / scale)

    res, gammas = _stationarity(v, g, comps, m)
    eta = np.zeros(n)
    for ci, c in enumerate(comps):
        eta[c] = np.maximum(g[c] - gammas[ci] * m[c], 0.0)
    mu = -y / dt
    if barrier and np.any(v >= 1.0):
        raise SolverError("barrier violated at convergence", last_phi=v)
    return StepResult(
        phi_new=v, mu_new=mu, eta=eta, iterations=iters,
        residual=res / scale,
        diagnostics={"gamma": gammas, "inner_iterations": inner_total,
                     "scale": scale,
                     "floored_elements": ops.floored_elements},
    )


def solve_vi_step(phi_prev, mu_prev, ops: StepOperators, km: KernelMatrices,
                  mesh: Mesh, pot: PotentialParams, mob: MobilityParams,
                  dt: float, tol: float = DEFAULT_TOL,
                  max_iters: int = DEFAULT_MAX_ITERS,
                  initial_step: float = 1.0) -> StepResult:
    """Solve one step of the variational-inequality scheme.

    Converges to the unique complementarity solution on the active nodes;
    passive nodes stay frozen at zero. ``initial_step`` seeds the first
    (pre-Barzilai-Borwein) step length; the converged state is independent
    of it up to the solver tolerance. The singular log potential acts as a
    barrier, so every iterate satisfies phi < 1 nodewise.
    """
    phi_prev = np.asarray(phi_prev, dtype=float)
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if np.any(phi_prev < 0) or np.any(phi_prev >= 1):
        raise ValueError("solve_vi_step requires 0 <= phi_prev < 1 nodewise")
    return _projected_gradient(
        phi_prev, ops, km, mesh, pot, dt, tol, max_iters, initial_step,
        psi1_value=lambda r: psi1(r, pot),
        psi1_deriv=lambda r: psi1_prime(r, pot),
        psi1_sec=lambda r: psi1_second(r, pot),
        barrier=True,
    )


def solve_regularized_step(phi_prev, mu_prev, lam: float, ops: StepOperators,
                           km: KernelMatrices, mesh: Mesh,
                           pot: PotentialParams, mob: MobilityParams,
                           dt: float, tol: float = DEFAULT_TOL,
                           max_iters: int = DEFAULT_MAX_ITERS,
                           initial_step: float = 1.0) -> StepResult:
    """Solve the lambda-regularized step (singular part replaced by its
    quadratic continuation); used as a cross-validation oracle for the
    unregularized step as lambda -> 0."""
    phi_prev = np.asarray(phi_prev, dtype=float)
    if not 0.0 < lam < 1.0:
        raise ValueError(f"lambda must lie in (0,1), got {lam}")
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if np.any(phi_prev < 0) or np.any(phi_prev >= 1):
        raise ValueError("solve_regularized_step requires 0 <= phi_prev < 1")
    def lam_second(r):
        r = np.asarray(r, dtype=float)
        inner = psi1_second(np.where(r < 1.0 - lam, r, 0.0), pot)
        return np.where(r < 1.0 - lam, inner, (1.0 - pot.phibar) / lam ** 2)

    return _projected_gradient(
        phi_prev, ops, km, mesh, pot, dt, tol, max_iters, initial_step,
        psi1_value=lambda r: psi1_lambda(r, lam, pot)[0],
        psi1_deriv=lambda r: psi1_lambda(r, lam, pot)[1],
        psi1_sec=lam_second,
        barrier=False,
    )


def dense_oracle_solve(phi_prev, mu_prev, ops: StepOperators,
                       km: KernelMatrices, mesh: Mesh, pot: PotentialParams,
                       mob: MobilityParams, dt: float,
                       tol: float = 1e-12) -> StepResult:
    """Small-instance oracle: active-set search plus damped Newton.

    Builds the Green operator densely (pseudo-inverse of the modified
    stiffness), walks candidate zero-sets with primal-dual active-set
    updates (exhaustive enumeration as a fallback), and solves the smooth
    reduced KKT equations with component-mass multipliers by damped
    Newton. The returned point satisfies the complementarity system to
    machine accuracy; uniqueness of the step solution makes the first
    feasible complementary point the answer.
    """
    n = mesh.n_nodes
    if n > 64:
        raise ValueError(f"dense oracle limited to 64 nodes, got {n}")
    phi_prev = np.asarray(phi_prev, dtype=float)
    m = mesh.lumped_mass
    eps = pot.epsilon
    part = ops.part
    comps = part.components
    if not comps:
        return _trivial_result(phi_prev, n)

    Ah = ops.Ahat.toarray()
    Ggreen = (np.diag(m) @ np.linalg.pinv(Ah, rcond=1e-13) @ np.diag(ops.mhat)) / dt
    J1 = km.J1
    j2_prev = km.J2 @ phi_prev
    lin = m * psi2_prime(phi_prev, pot) / eps - eps * j2_prev
    act = np.concatenate(comps)
    comp_of = part.labels
    targets = np.array([float(np.dot(m[c], phi_prev[c])) for c in comps])
    ncomp = len(comps)

    def grad_full(v):
        return (eps * J1 * v + Ggreen @ (v - phi_prev)
                + m * psi1_prime(np.minimum(v, 1.0 - 1e-12), pot) / eps + lin)

    def newton_on_face(zero_set):
        free = np.array([i for i in act if i not in zero_set], dtype=np.int64)
        gamma = np.zeros(ncomp)
        v = np.where(np.isin(np.arange(n), free), phi_prev, 0.0)
        v[part.passive] = 0.0
        gscale = 1.0
        for _ in range(200):
            g = grad_full(v)
            gscale = max(1.0, float(np.abs(g[act]).max()))
            r1 = g[free] - gamma[comp_of[free]] * m[free] if free.size else np.zeros(0)
            r2 = np.array([float(np.dot(m[c], v[c] - phi_prev[c])) for c in comps])
            rnorm = max(np.abs(r1).max() if r1.size else 0.0, np.abs(r2).max())
            if rnorm <= 1e-14 * gscale:
                break
            H = (eps * np.diag(J1) + Ggreen
                 + np.diag(m * psi1_second(np.minimum(v, 1.0 - 1e-12), pot) / eps))
            nf = free.size
            kkt = np.zeros((nf + ncomp, nf + ncomp))
            kkt[:nf, :nf] = H[np.ix_(free, free)]
            for k, i in enumerate(free):
                kkt[k, nf + comp_of[i]] = -m[i]
                kkt[nf + comp_of[i], k] = m[i]
            rhs = -np.concatenate([r1, r2])
            try:
                step = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                step = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
            dv, dgam = step[:nf], step[nf:]
            t = 1.0
            going_up = dv > 0
            if going_up.any():
                room = (1.0 - 1e-9 - v[free][going_up]) / dv[going_up]
                t = min(t, 0.95 * float(room.min()))
            improved = False
            for _ in range(50):
                v_t = v.copy()
                v_t[free] = v[free] + t * dv
                gam_t = gamma + t * dgam
                g_t = grad_full(v_t)
                r1t = g_t[free] - gam_t[comp_of[free]] * m[free] if free.size else np.zeros(0)
                r2t = np.array([float(np.dot(m[c], v_t[c] - phi_prev[c])) for c in comps])
                rnt = max(np.abs(r1t).max() if r1t.size else 0.0, np.abs(r2t).max())
                if rnt <= (1.0 - 1e-4 * t) * rnorm or rnt <= 1e-14 * gscale:
                    improved = True
                    break
                t *= 0.5
            if not improved:
                break
            v, gamma = v_t, gam_t
        g = grad_full(v)
        eta = np.zeros(n)
        eta[act] = g[act] - gamma[comp_of[act]] * m[act]
        return v, gamma, eta, gscale

    def kkt_residual(v, eta, gscale):
        r = max(0.0, float(-v[act].min()))
        r = max(r, max(0.0, float(-eta[act].min()) / gscale))
        r = max(r, float(np.abs(eta[act] * v[act]).max()) / gscale)
        for ci, c in enumerate(comps):
            r = max(r, abs(float(np.dot(m[c], v[c] - phi_prev[c]))) / max(1.0, targets[ci]))
        return r

    zero_set = frozenset(int(i) for i in act if phi_prev[i] == 0.0)
    visited = set()
    candidates = [zero_set]
    while candidates:
        zs = candidates.pop()
        if zs in visited:
            continue
        visited.add(zs)
        v, gamma, eta, gscale = newton_on_face(zs)
        nxt = frozenset(
            {int(i) for i in act if i not in zs and v[i] < -1e-14 * gscale}
            | {int(i) for i in zs if eta[i] > 1e-14 * gscale}
        )
        if nxt == zs:
            v = np.maximum(v, 0.0)
            v[list(zs)] = 0.0
            res = kkt_residual(v, eta, gscale)
            if res <= max(tol, 1e-11):
                mu = recover_mu(v, phi_prev, ops, dt)
                return StepResult(
                    phi_new=v, mu_new=mu,
                    eta=np.maximum(eta, 0.0), iterations=len(visited),
                    residual=res,
                    diagnostics={"gamma": np.asarray(gamma, dtype=float),
                                 "zero_set": sorted(zs)},
                )
            # fixed point of the set update but poor residual: fall through
        elif nxt not in visited:
            candidates.append(nxt)
            continue
        # cycled or rejected: enumerate nearby zero-sets exhaustively
        if len(act) <= 16:
            base = [int(i) for i in act]
            for size in range(len(base) + 1):
                for combo in combinations(base, size):
                    cs = frozenset(combo)
                    if cs not in visited:
                        candidates.append(cs)
            continue
        raise SolverError("dense oracle found no feasible complementary point "
                          "(indicates an assembly bug)")
    raise SolverError("dense oracle exhausted candidate zero-sets without a "
                      "feasible complementary point")
