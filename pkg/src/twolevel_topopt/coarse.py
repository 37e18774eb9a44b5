"""Coarse-scale SIMP with optimality-criteria updates and threshold freezing.

The inner loop iterates FE solve -> sensitivity -> cone filter -> OC update
until the largest density change drops below eps. The outer stage loop then
freezes densities beyond the prescribed thresholds to solid (1) or void
(rho_min) and repeats until every free density lies inside the range.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import fem

log = logging.getLogger(__name__)

FREE, SOLID, VOID = 0, 1, -1


class InfeasibleVolumeError(RuntimeError):
    """The volume target cannot be met with the current frozen set."""


@dataclass
class OCParams:
    """Move limit zeta, damping eta and volume tolerance of the OC update."""

    zeta: float = 0.2
    eta: float = 0.5
    vol_tol: float = 1e-4

    def __post_init__(self):
        if not 0 < self.zeta < 1:
            raise ValueError(f"zeta must be in (0, 1), got {self.zeta}")
        if not 0 < self.eta <= 1:
            raise ValueError(f"eta must be in (0, 1], got {self.eta}")


@dataclass
class ThresholdPolicy:
    """Freezing thresholds and the prescribed volume fraction rho0."""

    rho_bar_min: float = 0.12
    rho_bar_max: float = 0.88
    rho0: float = 0.5

    def validate(self, rho_min):
        if not 0 < self.rho_bar_min < self.rho_bar_max < 1:
            raise ValueError(
                f"need 0 < rho_bar_min < rho_bar_max < 1, got "
                f"[{self.rho_bar_min}, {self.rho_bar_max}]"
            )
        if self.rho_bar_min <= rho_min:
            raise ValueError("rho_bar_min must exceed rho_min")
        if not 0 < self.rho0 <= 1:
            raise ValueError(f"rho0 must be in (0, 1], got {self.rho0}")


@dataclass
class CoarseResult:
    """Converged coarse field: densities, frozen states and run history."""

    rho: np.ndarray
    frozen: np.ndarray
    stages: int
    converged: bool
    history: list
    solution: fem.FESolution
    stage_fields: list = field(default_factory=list)

    def volume_fraction(self, grid):
        act = grid.active_elems
        return float(self.rho[act].sum() / act.size)


def sensitivity(grid, rho, material, element_energy):
    """Compliance sensitivities dc/drho_e = -p rho^(p-1) u_e.K0.u_e (<= 0).

    element_energy holds the rho^p-scaled contributions, so the base energy
    is recovered by dividing once by rho.
    """
    rho = np.asarray(rho, dtype=float)
    sens = np.zeros(grid.n_elems)
    act = grid.active_elems
    sens[act] = -material.p * element_energy[act] / rho[act]
    return sens


def filter_weights(grid, r_min):
    """Cone-weight offsets (dx, dy, r_min - dist) within radius r_min."""
    reach = max(int(np.ceil(r_min)), 0)
    offsets = []
    for dx in range(-reach, reach + 1):
        for dy in range(-reach, reach + 1):
            dist = np.hypot(dx, dy)
            if dist < r_min:
                offsets.append((dx, dy, r_min - dist))
    return offsets


def filter_sensitivities(grid, rho, sens, r_min):
    """Sigmund sensitivity filter with cone weights over the index lattice.

    filtered_e = sum_f H_ef rho_f sens_f / (rho_e sum_f H_ef) with
    H_ef = r_min - dist(e, f), distances in element widths. Inactive
    elements never participate; frozen elements participate as neighbours.
    """
    shape = (grid.nx, grid.ny)
    rho2 = np.asarray(rho, dtype=float).reshape(shape)
    sens2 = np.asarray(sens, dtype=float).reshape(shape)
    act = grid.active.astype(float)

    num = np.zeros(shape)
    den = np.zeros(shape)
    for dx, dy, w in filter_weights(grid, r_min):
        src_x = slice(max(0, -dx), grid.nx - max(0, dx))
        dst_x = slice(max(0, dx), grid.nx - max(0, -dx))
        src_y = slice(max(0, -dy), grid.ny - max(0, dy))
        dst_y = slice(max(0, dy), grid.ny - max(0, -dy))
        contrib = w * act[src_x, src_y]
        num[dst_x, dst_y] += contrib * rho2[src_x, src_y] * sens2[src_x, src_y]
        den[dst_x, dst_y] += contrib

    out = np.zeros(shape)
    mask = grid.active & (den > 0)
    out[mask] = num[mask] / (rho2[mask] * den[mask])
    return out.ravel(order="C")


def oc_step_values(rho, B, zeta, eta, rho_min):
    """Pointwise OC move: rho*B^eta clamped to the move-limited box."""
    rho = np.asarray(rho, dtype=float)
    lo = np.maximum((1.0 - zeta) * rho, rho_min)
    hi = np.minimum((1.0 + zeta) * rho, 1.0)
    return np.clip(rho * np.asarray(B, dtype=float) ** eta, lo, hi)


def oc_update(grid, rho, filtered_sens, volume_target, material, frozen, params):
    """One OC density update with the volume multiplier found by bisection.

    volume_target is in absolute units (density times element area summed
    over all active elements, frozen included). Returns (new_rho, info)
    where info carries the multiplier and achieved volume.
    """
    rho = np.asarray(rho, dtype=float)
    free = (frozen == FREE) & grid.active.ravel(order="C")
    cell_vol = grid.hx * grid.hy
    act = grid.active_elems
    frozen_vol = rho[act[frozen[act] != FREE]].sum() * cell_vol

    if not free.any():
        return rho.copy(), {"lmbda": np.nan, "volume": frozen_vol, "clamped": False}

    drive = -np.asarray(filtered_sens, dtype=float)[free]
    drive = np.maximum(drive, 0.0)
    rho_f = rho[free]

    def free_volume(lmbda):
        B = drive / (lmbda * cell_vol)
        return oc_step_values(rho_f, B, params.zeta, params.eta, material.rho_min).sum() * cell_vol

    target_free = volume_target - frozen_vol
    vmax = np.minimum((1 + params.zeta) * rho_f, 1.0).sum() * cell_vol
    vmin = np.maximum((1 - params.zeta) * rho_f, material.rho_min).sum() * cell_vol
    clamped = False
    if target_free >= vmax or target_free <= vmin:
        # The move limits cannot reach the target this step. If the target is
        # beyond even the unlimited bounds the configuration is infeasible;
        # otherwise take the extreme admissible move and recover later.
        abs_max = free.sum() * cell_vol
        abs_min = free.sum() * material.rho_min * cell_vol
        if target_free > abs_max + 1e-12 or target_free < abs_min - 1e-12:
            raise InfeasibleVolumeError(
                f"volume target {volume_target:.6g} unattainable with the "
                f"current frozen set"
            )
        new = rho.copy()
        if target_free >= vmax:
            new[free] = np.minimum((1 + params.zeta) * rho_f, 1.0)
            lmbda = 0.0
        else:
            new[free] = np.maximum((1 - params.zeta) * rho_f, material.rho_min)
            lmbda = np.inf
        clamped = True
        achieved = new[act].sum() * cell_vol
        return new, {"lmbda": lmbda, "volume": achieved, "clamped": clamped}

    # Bracket the multiplier: free volume decreases monotonically in lambda.
    l1, l2 = 1e-9, 1e9
    for _ in range(200):
        if free_volume(l1) > target_free:
            break
        l1 *= 0.1
    for _ in range(200):
        if free_volume(l2) < target_free:
            break
        l2 *= 10.0

    tol = params.vol_tol * volume_target
    for _ in range(400):
        lmid = np.sqrt(l1 * l2)
        v = free_volume(lmid)
        if v > target_free:
            l1 = lmid
        else:
            l2 = lmid
        if abs(v - target_free) <= tol and l2 / l1 < 1 + 1e-10:
            break

    lmbda = np.sqrt(l1 * l2)
    new = rho.copy()
    B = drive / (lmbda * cell_vol)
    new[free] = oc_step_values(rho_f, B, params.zeta, params.eta, material.rho_min)
    achieved = new[act].sum() * cell_vol
    if abs(achieved - volume_target) > params.vol_tol * volume_target:
        raise InfeasibleVolumeError(
            f"bisection exhausted: volume {achieved:.6g} vs target "
            f"{volume_target:.6g}"
        )
    return new, {"lmbda": lmbda, "volume": achieved, "clamped": clamped}


def simp_inner_solve(
    grid,
    rho,
    material,
    bc,
    volume_target,
    frozen,
    r_min,
    eps,
    oc_params,
    max_iter=200,
    stage=1,
    history=None,
    ke=None,
):
    """Iterate FE solve / filter / OC update until max |drho| < eps.

    Returns (rho, solution, converged). The last FE solution corresponds to
    the densities before the final update; callers needing forces consistent
    with the returned field should re-solve.
    """
    if history is None:
        history = []
    if ke is None:
        ke = fem.element_stiffness(material, grid.hx, grid.hy)
    rho = np.asarray(rho, dtype=float).copy()
    free = (frozen == FREE) & grid.active.ravel(order="C")
    solution = None
    converged = False
    for it in range(1, max_iter + 1):
        solution = fem.solve(grid, rho, material, bc, ke=ke)
        sens = sensitivity(grid, rho, material, solution.element_energy)
        filtered = filter_sensitivities(grid, rho, sens, r_min)
        new_rho, info = oc_update(
            grid, rho, filtered, volume_target, material, frozen, oc_params
        )
        delta = float(np.abs(new_rho[free] - rho[free]).max()) if free.any() else 0.0
        rho = new_rho
        act = grid.active_elems
        history.append(
            {
                "stage": stage,
                "iteration": it,
                "compliance": solution.compliance,
                "volume_fraction": rho[act].sum() / act.size,
                "max_delta": delta,
            }
        )
        if delta < eps and not info["clamped"]:
            converged = True
            break
    return rho, solution, converged


def freeze_out_of_range(grid, rho, frozen, policy, rho_min):
    """Freeze densities beyond the thresholds; returns the number frozen.

    Values equal to a threshold freeze too. Free elements left with three or
    more frozen-void edge-neighbours cannot stay in equilibrium and are
    themselves voided, applied repeatedly until stable.
    """
    act_mask = grid.active.ravel(order="C")
    free = (frozen == FREE) & act_mask
    to_solid = free & (rho >= policy.rho_bar_max)
    to_void = free & (rho <= policy.rho_bar_min)
    frozen[to_solid] = SOLID
    frozen[to_void] = VOID
    rho[to_solid] = 1.0
    rho[to_void] = rho_min
    count = int(to_solid.sum() + to_void.sum())

    void2 = (frozen == VOID).reshape(grid.nx, grid.ny)
    while True:
        void_neighbors = np.zeros((grid.nx, grid.ny), dtype=int)
        void_neighbors[:-1, :] += void2[1:, :]
        void_neighbors[1:, :] += void2[:-1, :]
        void_neighbors[:, :-1] += void2[:, 1:]
        void_neighbors[:, 1:] += void2[:, :-1]
        forced = (
            (frozen.reshape(grid.nx, grid.ny) == FREE)
            & grid.active
            & (void_neighbors >= 3)
        )
        if not forced.any():
            break
        idx = forced.ravel(order="C")
        frozen[idx] = VOID
        rho[idx] = rho_min
        void2 = (frozen == VOID).reshape(grid.nx, grid.ny)
        count += int(idx.sum())
    return count


def stage_loop(
    grid,
    material,
    bc,
    policy,
    r_min=1.5,
    eps=0.03,
    oc_params=None,
    max_inner=200,
    stage_cap=50,
):
    """Fig.-style two-level outer loop at the coarse scale.

    Runs the SIMP inner loop, freezes out-of-range densities and repeats
    until a stage ends with every free density inside the threshold range.
    """
    policy.validate(material.rho_min)
    oc_params = oc_params or OCParams()
    ke = fem.element_stiffness(material, grid.hx, grid.hy)

    act_mask = grid.active.ravel(order="C")
    rho = np.zeros(grid.n_elems)
    rho[act_mask] = policy.rho0
    frozen = np.zeros(grid.n_elems, dtype=np.int8)
    volume_target = policy.rho0 * act_mask.sum() * grid.hx * grid.hy

    history = []
    stage_fields = []
    converged = False
    stages = 0
    for stage in range(1, stage_cap + 1):
        stages = stage
        rho, _, inner_ok = simp_inner_solve(
            grid,
            rho,
            material,
            bc,
            volume_target,
            frozen,
            r_min,
            eps,
            oc_params,
            max_iter=max_inner,
            stage=stage,
            history=history,
            ke=ke,
        )
        if not inner_ok:
            log.warning("stage %d hit the inner iteration cap", stage)
        n_frozen = freeze_out_of_range(grid, rho, frozen, policy, material.rho_min)
        stage_fields.append(rho.copy())
        log.info(
            "stage %d: %d newly frozen, %d free left",
            stage,
            n_frozen,
            int(((frozen == FREE) & act_mask).sum()),
        )
        if n_frozen == 0:
            converged = True
            break

    solution = fem.solve(grid, rho, material, bc, ke=ke)
    return CoarseResult(
        rho=rho,
        frozen=frozen,
        stages=stages,
        converged=converged,
        history=history,
        solution=solution,
        stage_fields=stage_fields,
    )
