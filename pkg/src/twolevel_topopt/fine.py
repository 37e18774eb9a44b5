"""Fine-scale SIMP solved independently per coarse cell.

Each unfrozen coarse element becomes a small n x n SIMP problem loaded by
the equilibrated edge tractions of its coarse edges. Because those loads
are self-equilibrated, three scalar supports (bottom-left pin plus a
bottom-right vertical roller) suffice and their reactions vanish. The loop
alternates FE solve / filter / OC update with an exponential density
projection applied every couple of iterations while the field is still far
from 0-1, doubling the projection steepness up to beta_max.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from . import coarse, fem
from .grid import EDGE_LNODES, BoundaryConditions, Grid

log = logging.getLogger(__name__)


class FineSolveError(RuntimeError):
    """A fine cell problem is invalid or failed to solve."""


@dataclass
class ProjectionParams:
    """Exponential projection schedule: threshold mu, beta doubling, gate."""

    beta0: float = 1.0
    beta_max: float = 2.0
    mu: float = 0.5
    m_nd_min: float = 50.0
    cadence: int = 2

    def __post_init__(self):
        if self.beta0 > self.beta_max:
            raise ValueError(
                f"beta0 {self.beta0} must not exceed beta_max {self.beta_max}"
            )
        if not 0 < self.mu < 1:
            raise ValueError(f"mu must be in (0, 1), got {self.mu}")
        if self.cadence < 1:
            raise ValueError("cadence must be a positive iteration count")


@dataclass
class FineCellProblem:
    """One cell's fine optimization input.

    tractions has shape (4, 2, 2): per local edge of the coarse cell, the
    linear traction's (start, end) 2-vectors in the cell's counter-clockwise
    orientation. hx, hy are the coarse cell's physical dimensions.
    """

    cell: int
    target: float
    tractions: np.ndarray
    hx: float
    hy: float
    n: int = 32
    material: fem.MaterialModel = field(
        default_factory=lambda: fem.MaterialModel(E=1000.0, nu=0.3, p=3.0)
    )
    r_min: float = 1.3
    eps: float = 0.01
    projection: ProjectionParams = field(default_factory=ProjectionParams)
    max_iter: int = 300
    oc_params: coarse.OCParams = field(default_factory=coarse.OCParams)
    # Control runs (e.g. loading cells with raw FE stresses for comparison)
    # may disable the balance check; the supports then carry real reactions.
    require_equilibrated: bool = True


@dataclass
class FineCellResult:
    """Fine density raster of one cell plus solve diagnostics."""

    cell: int
    rho: np.ndarray
    kind: str  # frozen-solid | frozen-void | optimized
    converged: bool = True
    iterations: int = 0
    m_nd: float = 0.0
    beta_final: float = 0.0
    compliance: float = 0.0
    max_reaction: float = 0.0
    reaction_scale: float = 0.0
    history: list = field(default_factory=list)


def project_density(rho, beta, mu):
    """Exponential projection pushing densities away from mu towards 0/1.

    Piecewise-exponential with fixed points 0, mu and 1; beta = 0 is the
    identity and larger beta sharpens the push. Monotone in rho for any
    beta >= 0.
    """
    rho = np.asarray(rho, dtype=float)
    if beta == 0.0:
        return rho.copy()
    out = np.empty_like(rho)
    low = rho <= mu
    r = rho[low] / mu
    out[low] = mu * (np.exp(-beta * (1.0 - r)) - (1.0 - r) * np.exp(-beta))
    r = (rho[~low] - mu) / (1.0 - mu)
    out[~low] = (1.0 - mu) * (1.0 - np.exp(-beta * r) + r * np.exp(-beta)) + mu
    return out


def measure_nondiscreteness(rho):
    """Grey-level measure M_nd = mean 4 rho (1 - rho) x 100, in percent."""
    rho = np.asarray(rho, dtype=float)
    return float((4.0 * rho * (1.0 - rho)).mean() * 100.0)


def cell_grid(problem):
    return Grid(problem.n, problem.n, problem.hx / problem.n, problem.hy / problem.n)


def rigid_body_supports(n):
    """Minimal support set: pin the bottom-left node, roll the bottom-right.

    Exactly three scalar constraints, which removes the two translations
    and the rotation and nothing else. With self-equilibrated edge loads
    the associated reactions vanish.
    """
    bc = BoundaryConditions()
    bc.fix_node(0, mask=(True, True))
    bc.fix_node(n * (n + 1), mask=(False, True))
    return bc


class _CellSolver:
    """Banded Cholesky FE solver for the fixed cell mesh.

    Mesh, supports and unit element stiffness never change while a cell is
    optimized, so the scatter pattern into the upper band is computed once;
    each iteration only rescales ke by rho^p, accumulates with bincount and
    calls the LAPACK banded Cholesky. Produces the same FESolution as
    fem.solve (a property test pins the agreement) at a fraction of the
    cost, which dominates the farm runtime.
    """

    def __init__(self, grid, material, bc, ke):
        self.grid = grid
        self.material = material
        self.ke = ke
        ndof = 2 * grid.n_nodes
        fixed = bc.constrained_dofs(grid)
        if fixed.size and np.any(bc.prescribed_values(grid) != 0.0):
            raise FineSolveError("cell supports must prescribe zero displacement")
        keep = np.setdiff1d(np.arange(ndof), fixed)
        remap = np.full(ndof, -1)
        remap[keep] = np.arange(keep.size)
        self.keep = keep
        self.ndof = ndof

        dofs = remap[grid.elem_dofs]  # (n_elems, 8), -1 where eliminated
        rows = np.repeat(dofs, 8, axis=1).reshape(-1, 8, 8)
        cols = np.tile(dofs, (1, 8)).reshape(-1, 8, 8)
        mask = (rows >= 0) & (cols >= 0) & (cols >= rows)
        self.bandwidth = int((cols[mask] - rows[mask]).max())
        self.n_band = (self.bandwidth + 1) * keep.size
        # Flat position in the (bandwidth+1, n_kept) upper band storage.
        flat = (self.bandwidth - (cols - rows)) * keep.size + cols
        elems = np.broadcast_to(
            np.arange(grid.n_elems)[:, None, None], mask.shape
        )
        kvals = np.broadcast_to(ke[None, :, :], mask.shape)
        self.tri_elem = elems[mask]
        self.tri_flat = flat[mask]
        self.tri_ke = kvals[mask]

    def solve(self, rho, f):
        rho = np.asarray(rho, dtype=float)
        if (rho < self.material.rho_min - 1e-12).any() or (rho > 1 + 1e-12).any():
            raise ValueError("density out of [rho_min, 1]")
        scale = rho**self.material.p
        vals = scale[self.tri_elem] * self.tri_ke
        ab = np.bincount(self.tri_flat, weights=vals, minlength=self.n_band)
        ab = ab.reshape(self.bandwidth + 1, self.keep.size)
        try:
            uf = sla.solveh_banded(ab, f[self.keep], lower=False, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise fem.SolverError(f"banded factorization failed: {exc}") from exc
        if not np.isfinite(uf).all():
            raise fem.SolverError("singular cell stiffness")
        u = np.zeros(self.ndof)
        u[self.keep] = uf
        energy = fem.element_compliance_contributions(
            self.grid, rho, self.material, u, ke=self.ke
        )
        return fem.FESolution(
            u=u, f=f, compliance=float(f @ u), element_energy=energy
        )


# Cell-local corner coordinates in the order of grid corner numbering.
def _cell_corners(hx, hy):
    return np.array([(0.0, 0.0), (hx, 0.0), (hx, hy), (0.0, hy)])


_SIDE_ELEMS = {
    0: lambda n: [(ix, 0) for ix in range(n)],
    1: lambda n: [(n - 1, iy) for iy in range(n)],
    2: lambda n: [(ix, n - 1) for ix in range(n)],
    3: lambda n: [(0, iy) for iy in range(n)],
}


def apply_cell_tractions(problem, grid=None):
    """Distribute the 4 coarse edge tractions onto the fine boundary mesh.

    Each coarse linear traction is sampled at the fine sub-edge endpoints
    and converted to consistent nodal loads, preserving the total force of
    every coarse edge. Returns the assembled fine load vector.
    """
    if grid is None:
        grid = cell_grid(problem)
    corners = _cell_corners(problem.hx, problem.hy)
    coords = grid.node_coords()
    f = np.zeros(2 * grid.n_nodes)
    for ledge in range(4):
        t_start, t_end = problem.tractions[ledge]
        c0, c1 = EDGE_LNODES[ledge]
        a, b = corners[c0], corners[c1]
        axis = b - a
        L2 = axis @ axis
        for ix, iy in _SIDE_ELEMS[ledge](problem.n):
            e = grid.elem_id(ix, iy)
            n1, n2 = grid.edge_nodes(e, ledge)
            f1 = ((coords[n1] - a) @ axis) / L2
            f2 = ((coords[n2] - a) @ axis) / L2
            t1 = t_start + f1 * (t_end - t_start)
            t2 = t_start + f2 * (t_end - t_start)
            p1, p2 = fem.consistent_edge_loads(t1, t2, grid.edge_length(ledge))
            f[2 * n1 : 2 * n1 + 2] += p1
            f[2 * n2 : 2 * n2 + 2] += p2
    return f


def _cross(a, b):
    return a[0] * b[1] - a[1] * b[0]


def traction_equilibrium(tractions, hx, hy):
    """Net force, net moment (about the cell centre) and force scale."""
    tractions = np.asarray(tractions, dtype=float)
    corners = _cell_corners(hx, hy)
    center = np.array([hx / 2.0, hy / 2.0])
    net_f = np.zeros(2)
    net_m = 0.0
    scale = 0.0
    for ledge in range(4):
        c0, c1 = EDGE_LNODES[ledge]
        a, b = corners[c0], corners[c1]
        L = np.linalg.norm(b - a)
        t_s, t_e = tractions[ledge]
        resultant = 0.5 * L * (t_s + t_e)
        net_f += resultant
        dvec = b - a
        dt = t_e - t_s
        net_m += L * (
            _cross(a - center, t_s)
            + 0.5 * (_cross(a - center, dt) + _cross(dvec, t_s))
            + _cross(dvec, dt) / 3.0
        )
        scale = max(scale, float(np.linalg.norm(resultant)))
    return net_f, float(net_m), scale


def fine_cell_solve(problem):
    """Optimize one cell per the fine-scale flowchart.

    Rejects traction sets that are not self-equilibrated. Runs FE / filter /
    OC iterations with uniform initial density equal to the cell target;
    every `cadence` iterations, while the grey measure still exceeds
    m_nd_min, the field is sharpened by the exponential projection and beta
    doubles (capped at beta_max). Convergence is max |drho| < eps on the
    end-of-iteration field. Hitting the iteration cap returns a flagged,
    still-usable result.
    """
    if not 0 < problem.target <= 1:
        raise FineSolveError(f"cell {problem.cell}: target {problem.target} invalid")
    net_f, net_m, scale = traction_equilibrium(problem.tractions, problem.hx, problem.hy)
    char_len = max(problem.hx, problem.hy)
    if problem.require_equilibrated and scale > 0 and (
        np.linalg.norm(net_f) > 1e-6 * scale or abs(net_m) > 1e-6 * scale * char_len
    ):
        raise FineSolveError(
            f"cell {problem.cell}: tractions are not self-equilibrated "
            f"(|F| = {np.linalg.norm(net_f):.3e}, |M| = {abs(net_m):.3e}, "
            f"scale = {scale:.3e})"
        )
    if problem.target >= 1.0:
        return FineCellResult(
            problem.cell, np.ones(problem.n * problem.n), "optimized", m_nd=0.0
        )

    grid = cell_grid(problem)
    bc = rigid_body_supports(problem.n)
    loads = apply_cell_tractions(problem, grid)
    ke = fem.element_stiffness(problem.material, grid.hx, grid.hy)
    solver = _CellSolver(grid, problem.material, bc, ke)
    frozen = np.zeros(grid.n_elems, dtype=np.int8)
    volume_target = problem.target * grid.n_elems * grid.hx * grid.hy

    rho = np.full(grid.n_elems, problem.target)
    beta = problem.projection.beta0
    mu = problem.projection.mu
    history = []
    converged = False
    solution = None
    it = 0
    for it in range(1, problem.max_iter + 1):
        solution = solver.solve(rho, loads)
        sens = coarse.sensitivity(grid, rho, problem.material, solution.element_energy)
        filtered = coarse.filter_sensitivities(grid, rho, sens, problem.r_min)
        new_rho, info = coarse.oc_update(
            grid, rho, filtered, volume_target, problem.material, frozen,
            problem.oc_params,
        )
        m_nd = measure_nondiscreteness(new_rho)
        projected = False
        if it % problem.projection.cadence == 0 and m_nd > problem.projection.m_nd_min:
            # The projection maps [0,1] onto itself, so densities near the
            # floor come out below it; pull them back into the FE-valid range.
            new_rho = np.clip(
                project_density(new_rho, beta, mu), problem.material.rho_min, 1.0
            )
            beta = min(2.0 * beta, problem.projection.beta_max)
            projected = True
        delta = float(np.abs(new_rho - rho).max())
        history.append(
            {
                "iteration": it,
                "compliance": solution.compliance,
                "volume_fraction": float(info["volume"] / (grid.n_elems * grid.hx * grid.hy)),
                "m_nd": m_nd,
                "beta": beta,
                "projected": projected,
                "max_delta": delta,
            }
        )
        rho = new_rho
        if delta < problem.eps and not info["clamped"]:
            converged = True
            break

    # Final solve on the returned field for compliance and support reactions.
    solution = fem.solve(grid, rho, problem.material, bc, extra_loads=loads, ke=ke)
    K = fem.assemble(grid, rho, problem.material, ke=ke)
    residual = K @ solution.u - loads
    fixed = bc.constrained_dofs(grid)
    max_reaction = float(np.abs(residual[fixed]).max()) if fixed.size else 0.0

    return FineCellResult(
        cell=problem.cell,
        rho=rho,
        kind="optimized",
        converged=converged,
        iterations=it,
        m_nd=measure_nondiscreteness(rho),
        beta_final=beta,
        compliance=solution.compliance,
        max_reaction=max_reaction,
        reaction_scale=scale,
        history=history,
    )


@dataclass
class FineBatchResult:
    """Keyed per-cell results plus any per-cell failures."""

    cells: dict
    failures: dict
    n: int

    @property
    def n_optimized(self):
        return sum(1 for r in self.cells.values() if r.kind == "optimized")


def _solve_for_pool(problem):
    """Picklable worker: returns (cell, result, error message or None)."""
    try:
        return problem.cell, fine_cell_solve(problem), None
    except (FineSolveError, coarse.InfeasibleVolumeError, fem.SolverError) as exc:
        return problem.cell, None, str(exc)


def solve_all_cells(
    grid,
    coarse_result,
    traction_field,
    n=32,
    material=None,
    r_min=1.3,
    eps=0.01,
    projection=None,
    max_iter=300,
    workers=None,
    require_equilibrated=True,
):
    """Fine-solve every active coarse cell; frozen cells are filled directly.

    Frozen-solid cells become all-ones rasters and frozen-void cells
    all-rho_min rasters without any FE work. Unfrozen cells are independent
    and are farmed out to a process pool when workers > 1. Per-cell failures
    are collected into the result instead of aborting the batch.
    """
    if material is None:
        material = fem.MaterialModel(E=1000.0, nu=0.3, p=3.0)
    projection = projection or ProjectionParams()
    # Accept either an EdgeTractionField or a bare (n_elems, 4, 2, 2) array.
    tractions = getattr(traction_field, "tractions", traction_field)

    problems = []
    results = {}
    rho_min = material.rho_min
    for e in grid.active_elems:
        state = coarse_result.frozen[e]
        if state == coarse.SOLID:
            results[e] = FineCellResult(e, np.ones(n * n), "frozen-solid")
        elif state == coarse.VOID:
            results[e] = FineCellResult(e, np.full(n * n, rho_min), "frozen-void")
        else:
            problems.append(
                FineCellProblem(
                    cell=int(e),
                    target=float(coarse_result.rho[e]),
                    tractions=np.array(tractions[e]),
                    hx=grid.hx,
                    hy=grid.hy,
                    n=n,
                    material=material,
                    r_min=r_min,
                    eps=eps,
                    projection=projection,
                    max_iter=max_iter,
                    require_equilibrated=require_equilibrated,
                )
            )

    failures = {}
    if workers and workers > 1 and len(problems) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_solve_for_pool, problems, chunksize=1))
    else:
        outcomes = [_solve_for_pool(problem) for problem in problems]
    for cell, outcome, error in outcomes:
        if error is None:
            results[cell] = outcome
        else:
            failures[cell] = error
            log.error("cell %d failed: %s", cell, error)

    return FineBatchResult(cells=results, failures=failures, n=n)
