"""Traction equilibration: split nodal forces into per-edge linear tractions.

Each element's FE nodal forces are redistributed onto its four edges so that
(a) every element is in exact force and moment equilibrium under its edge
tractions alone and (b) the two elements sharing an edge carry pointwise
opposite tractions. The construction works node by node: the nodal forces of
the elements around a node form a closed force polygon, a pole is placed in
force space (Maxwell diagram), and the two side forces of each element are
read off as pole-to-vertex vectors. Pole placement encodes the boundary
conditions: interior nodes use the polygon centroid, clamped nodes close the
polygon with a reaction side, traction boundaries pin the pole so prescribed
edges keep exactly their prescribed values.

Element fans follow grid.node_fan ordering (counter-clockwise, cycle for
interior nodes, chain for boundary nodes). Side forces are stored per
(element, local edge, edge end) in the owning element's orientation, so a
shared edge holds exact negations on its two sides.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import fem
from .grid import EDGE_LNODES, EDGE_NORMALS

log = logging.getLogger(__name__)

# Local (xi, eta) coordinates of element corners 0..3.
_CORNER_XI = ((-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0))


class EquilibrationError(RuntimeError):
    """Node splitting failed (inconsistent input or unsupported pattern)."""


def _cross(a, b):
    return a[0] * b[1] - a[1] * b[0]


def _segment_crossing(p1, p2, p3, p4):
    """Proper interior intersection point of segments p1p2 and p3p4, or None."""
    d1 = np.asarray(p2) - p1
    d2 = np.asarray(p4) - p3
    denom = _cross(d1, d2)
    if abs(denom) < 1e-14 * (np.abs(d1).sum() + np.abs(d2).sum() + 1e-300) ** 2:
        return None
    s = _cross(np.asarray(p3) - p1, d2) / denom
    t = _cross(np.asarray(p3) - p1, d1) / denom
    if 1e-12 < s < 1 - 1e-12 and 1e-12 < t < 1 - 1e-12:
        return np.asarray(p1) + s * d1
    return None


def polygon_centroid(F1, F2, F3, F4):
    """Centroid of the closed force polygon with sides F1..F4 from the origin.

    Vertices are the cumulative sums V0 = 0, V1 = F1, ... The quadrilateral
    is split along the V1-V3 diagonal into two triangles combined with
    signed areas, which handles convex and concave shapes alike. When two
    opposite sides cross, the doubly-counted overlap triangle is subtracted
    from the absolute-area combination instead.

    A polygon with vanishing area has collapsed onto a line segment; its
    centroid is taken as the midpoint of the farthest vertex pair. Uniform
    stress states produce exactly such polygons (e.g. a parallelogram
    flattened along the force axis) and the segment midpoint is the unique
    pole reproducing the exact uniform tractions on every edge, which also
    covers the all-zero polygon (midpoint at the origin).
    """
    forces = [np.asarray(F, dtype=float) for F in (F1, F2, F3, F4)]
    scale = max(np.linalg.norm(F) for F in forces)
    if scale == 0.0:
        return np.zeros(2)
    closure = forces[0] + forces[1] + forces[2] + forces[3]
    if np.linalg.norm(closure) > 1e-6 * scale:
        raise EquilibrationError(
            f"force polygon not closed: residual {np.linalg.norm(closure):.3e} "
            f"exceeds 1e-6 x scale {scale:.3e}"
        )
    V = np.zeros((4, 2))
    V[1] = forces[0]
    V[2] = forces[0] + forces[1]
    V[3] = forces[0] + forces[1] + forces[2]

    a1 = 0.5 * _cross(V[1] - V[0], V[3] - V[0])
    c1 = (V[0] + V[1] + V[3]) / 3.0
    a2 = 0.5 * _cross(V[2] - V[1], V[3] - V[1])
    c2 = (V[1] + V[2] + V[3]) / 3.0

    crossing = _segment_crossing(V[0], V[1], V[2], V[3])
    if crossing is None:
        crossing = _segment_crossing(V[1], V[2], V[3], V[0])
    tiny = 1e-9 * scale * scale
    if crossing is None:
        area = a1 + a2
        if abs(area) >= tiny:
            return (a1 * c1 + a2 * c2) / area
        return _segment_midpoint(V)

    a_ov = abs(0.5 * _cross(V[1] - crossing, V[3] - crossing))
    c_ov = (crossing + V[1] + V[3]) / 3.0
    den = abs(a1) + abs(a2) - 2.0 * a_ov
    if abs(den) >= tiny:
        return (abs(a1) * c1 + abs(a2) * c2 - 2.0 * a_ov * c_ov) / den
    return _segment_midpoint(V)


def _segment_midpoint(vertices):
    """Midpoint of the farthest pair among the vertices of a flat polygon."""
    best = (0.0, vertices[0], vertices[0])
    for i in range(len(vertices)):
        for j in range(i + 1, len(vertices)):
            d = float(np.linalg.norm(vertices[i] - vertices[j]))
            if d > best[0]:
                best = (d, vertices[i], vertices[j])
    return 0.5 * (best[1] + best[2])


def side_forces_to_tractions(p_start, p_end, length):
    """Invert the 2x2 edge mass matrix: consistent end forces -> linear traction."""
    return fem.tractions_from_forces(p_start, p_end, length)


@dataclass
class NodeClass:
    """Classification of one node with its ordered element fan."""

    node: int
    kind: str
    elements: list
    edges: list
    is_cycle: bool
    void_flags: list
    extreme_dirichlet: tuple = (False, False)

    @property
    def n_dirichlet_extremes(self):
        return int(self.extreme_dirichlet[0]) + int(self.extreme_dirichlet[1])


def _edge_is_dirichlet(grid, bc, elem, ledge):
    """A boundary edge transmits reactions when both end nodes are constrained."""
    if (elem, ledge) in bc.neumann:
        return False
    n1, n2 = grid.edge_nodes(elem, ledge)
    return n1 in bc.dirichlet and n2 in bc.dirichlet


def classify_nodes(grid, bc, void_mask=None):
    """Classify every active node by its fan topology and boundary conditions.

    void_mask marks frozen-void elements; they stay in the fans (their nodal
    forces are negligible) but steer pole placement so the solid-void
    interfaces end up essentially traction-free. Raises EquilibrationError
    when a non-void element has three or more void edge-neighbours, which
    the coarse freezing stage is required to have removed.
    """
    if void_mask is None:
        void_mask = np.zeros(grid.n_elems, dtype=bool)
    void_mask = np.asarray(void_mask, dtype=bool).ravel()

    act = grid.active_elems
    for e in act:
        if void_mask[e]:
            continue
        n_void = 0
        for ledge in range(4):
            nbr = grid.neighbor(e, ledge)
            if nbr >= 0 and void_mask[nbr]:
                n_void += 1
        if n_void >= 3:
            raise EquilibrationError(
                f"element {e} has {n_void} void edge-neighbours; it should "
                f"have been voided by the coarse freezing stage"
            )

    classes = {}
    for n in np.flatnonzero(grid.node_active):
        elements, edges, is_cycle = grid.node_fan(n)
        if not elements:
            continue
        voids = [bool(void_mask[e]) for e in elements]
        m = len(elements)
        if is_cycle:
            nv = sum(voids)
            if nv == 0:
                kind = "internal"
            elif nv == 2 and not _voids_adjacent_cyclic(voids):
                raise EquilibrationError(
                    f"node {n}: two opposite void neighbours (checkerboard "
                    f"pattern) cannot be split"
                )
            else:
                kind = f"internal-void-adjacent-{nv}"
            classes[n] = NodeClass(n, kind, elements, edges, True, voids)
            continue

        first_d = _edge_is_dirichlet(grid, bc, *edges[0])
        last_d = _edge_is_dirichlet(grid, bc, *edges[-1])
        d = int(first_d) + int(last_d)
        if d == 0:
            kind = {1: "neumann-outer-corner", 2: "neumann-standard"}.get(
                m, "neumann-reentrant"
            )
        elif m == 2 and d == 2:
            kind = "dirichlet-standard"
        elif m == 1 and d == 1:
            kind = "dirichlet-outer-corner"
        elif m == 1 and d == 2:
            kind = "dirichlet-corner-clamped"
        else:
            kind = f"dirichlet-chain-{m}-{d}"
        classes[n] = NodeClass(
            n, kind, elements, edges, False, voids, (first_d, last_d)
        )
    return classes


def _voids_adjacent_cyclic(voids):
    m = len(voids)
    for i in range(m):
        if voids[i] and voids[(i + 1) % m]:
            return True
    return False


def _void_aware_pole(vertices, voids, default):
    """Pole override near void elements: kill their interface side forces.

    One void side -> midpoint of that (vanishing) side; two adjacent void
    sides -> their shared vertex; three void sides -> midpoint of the sole
    non-void side, halving its nodal force between its two edges.
    """
    nv = sum(voids)
    m = len(voids)
    if nv == 0 or nv == m:
        return default
    if nv == 1:
        v = voids.index(True)
        return 0.5 * (vertices[v] + vertices[(v + 1) % len(vertices)])
    if nv == 2:
        for i in range(m):
            if voids[i] and voids[(i + 1) % m]:
                return vertices[(i + 1) % len(vertices)]
        return default
    if nv == m - 1:
        s = voids.index(False)
        return 0.5 * (vertices[s] + vertices[(s + 1) % len(vertices)])
    return default


def split_internal_node(forces, pole):
    """Side forces of a 4-element interior fan for a given pole.

    forces are the four nodal forces in cyclic fan order. Returns (sides,
    lam) where sides[c] = (P_left, P_right) acting on element c through its
    preceding and following edge, and lam is the polygon closure defect
    (absorbed by the last element's corner identity).
    """
    forces = [np.asarray(F, dtype=float) for F in forces]
    m = len(forces)
    W = np.zeros((m + 1, 2))
    for i, F in enumerate(forces):
        W[i + 1] = W[i] + F
    Q = [pole - W[i % m] for i in range(m + 1)]
    sides = [(Q[i], -Q[i + 1]) for i in range(m)]
    lam = W[m].copy()
    return sides, lam


def split_dirichlet_node(g, pole=None, voids=None):
    """Side forces of a chain whose both extreme edges carry reactions.

    g are the traction-adjusted nodal forces in chain order. The polygon is
    closed by the total reaction side and the pole defaults to the closed
    polygon's centroid (void-aware when voids are flagged). Returns (sides,
    reactions, lam) with reactions = (R_first, R_last) acting on the end
    elements through the extreme edges; lam is identically zero because the
    reactions close the polygon exactly.
    """
    g = [np.asarray(v, dtype=float) for v in g]
    m = len(g)
    W = np.zeros((m + 1, 2))
    for i, v in enumerate(g):
        W[i + 1] = W[i] + v
    if pole is None:
        sides_f = list(g) + [-W[m]] + [np.zeros(2)] * (3 - m)
        if m == 1:
            pole = 0.5 * W[1]
        else:
            pole = polygon_centroid(*sides_f[:4])
        if voids is not None:
            pole = _void_aware_pole(W[: m + 1], list(voids), pole)
    Q = [pole - W[i] for i in range(m + 1)]
    sides = [(Q[i], -Q[i + 1]) for i in range(m)]
    reactions = (Q[0], -Q[m])
    return sides, reactions, np.zeros(2)


def split_neumann_node(g, dirichlet_first=False, dirichlet_last=False):
    """Side forces of a chain with at most one reaction extreme.

    g are the traction-adjusted nodal forces in chain order. With no
    reaction the system is overdetermined by one vector equation; the two
    extreme edges keep exactly their prescribed (possibly zero) tractions
    and the middle element absorbs the closure defect lam = sum(g), which is
    the FE nodal residual. With one Dirichlet extreme the split is uniquely
    determined and lam = 0. Returns (sides, reaction, lam); reaction is None
    without a Dirichlet extreme.
    """
    if dirichlet_first and dirichlet_last:
        raise EquilibrationError("use split_dirichlet_node for two reactions")
    g = [np.asarray(v, dtype=float) for v in g]
    m = len(g)
    W = np.zeros((m + 1, 2))
    for i, v in enumerate(g):
        W[i + 1] = W[i] + v

    if dirichlet_first or dirichlet_last:
        pole = W[m] if dirichlet_first else W[0]
        Q = [pole - W[i] for i in range(m + 1)]
        sides = [(Q[i], -Q[i + 1]) for i in range(m)]
        reaction = Q[0] if dirichlet_first else -Q[m]
        return sides, reaction, np.zeros(2)

    # Both extremes prescribed: exact from each end, defect in the middle.
    mid = (m - 1) // 2
    Q = [-W[i] if i <= mid else W[m] - W[i] for i in range(m + 1)]
    sides = [(Q[i], -Q[i + 1]) for i in range(m)]
    return sides, None, W[m].copy()


@dataclass
class EquilibrationReport:
    """Per-element and per-node quality measures of a traction field."""

    force_scale: float
    moment_scale: float
    net_force: np.ndarray
    net_moment: np.ndarray
    lambda_norms: np.ndarray
    class_counts: dict

    @property
    def max_force_residual(self):
        return float(np.linalg.norm(self.net_force, axis=1).max())

    @property
    def max_moment_residual(self):
        return float(np.abs(self.net_moment).max())

    @property
    def max_lambda(self):
        return float(self.lambda_norms.max())

    def summary(self):
        fs = self.force_scale or 1.0
        ms = self.moment_scale or 1.0
        return {
            "force_scale": self.force_scale,
            "max_force_residual_rel": self.max_force_residual / fs,
            "max_moment_residual_rel": self.max_moment_residual / ms,
            "max_lambda_rel": self.max_lambda / fs,
            "class_counts": dict(self.class_counts),
        }


@dataclass
class EdgeTractionField:
    """Linear tractions (t_start, t_end) per element edge, element orientation.

    tractions[e, k, 0] and [e, k, 1] are the 2-vector traction values at the
    start and end node of local edge k of element e, acting on element e.
    side_forces holds the matching consistent end forces.
    """

    tractions: np.ndarray
    side_forces: np.ndarray
    classes: dict
    lambdas: dict
    report: EquilibrationReport = None

    def edge_tractions(self, elem, ledge):
        return self.tractions[elem, ledge, 0], self.tractions[elem, ledge, 1]


def _corner_slot(grid, elem, node):
    nodes = grid.elem_nodes[elem]
    for k in range(4):
        if nodes[k] == node:
            return k
    raise EquilibrationError(f"node {node} is not a corner of element {elem}")


def _end_slot(grid, elem, ledge, node):
    n_start, n_end = grid.edge_nodes(elem, ledge)
    if node == n_start:
        return 0
    if node == n_end:
        return 1
    raise EquilibrationError(f"node {node} not on edge {ledge} of element {elem}")


def _prescribed_end_force(grid, bc, elem, ledge, node):
    """Consistent end force at `node` of the prescribed traction on an edge."""
    data = bc.neumann.get((elem, ledge))
    if data is None:
        return np.zeros(2)
    t_start, t_end = data
    p_start, p_end = fem.consistent_edge_loads(t_start, t_end, grid.edge_length(ledge))
    return np.asarray(p_start if _end_slot(grid, elem, ledge, node) == 0 else p_end)


def equilibrate_all(grid, rho, material, bc, u, void_mask=None):
    """Split the full FE solution into an equilibrated edge traction field.

    Works from the element nodal forces rho^p K0 u_e, so the input state
    must be a converged solve for exactly this density field. Returns an
    EdgeTractionField whose report certifies per-element equilibrium,
    pointwise action-reaction and per-node closure defects.
    """
    if void_mask is None:
        void_mask = np.zeros(grid.n_elems, dtype=bool)
    void_mask = np.asarray(void_mask, dtype=bool).ravel()
    forces = fem.element_nodal_forces(grid, rho, material, u)
    act = grid.active_elems
    force_scale = float(np.linalg.norm(forces[act], axis=2).max()) if act.size else 0.0

    classes = classify_nodes(grid, bc, void_mask)

    side = np.full((grid.n_elems, 4, 2, 2), np.nan)
    # Boundary edges start from their prescription (zero where unloaded);
    # reaction edges are overwritten by the node splits below.
    for elem, ledge, _ in grid.boundary_edges():
        L = grid.edge_length(ledge)
        data = bc.neumann.get((elem, ledge))
        if data is None:
            side[elem, ledge] = 0.0
        else:
            p_start, p_end = fem.consistent_edge_loads(data[0], data[1], L)
            side[elem, ledge, 0] = p_start
            side[elem, ledge, 1] = p_end

    lambdas = {}
    for n, cls in classes.items():
        try:
            writes, lam = _split_node(grid, bc, forces, cls)
        except EquilibrationError as exc:
            raise EquilibrationError(f"node {n} ({cls.kind}): {exc}") from exc
        for elem, ledge, value in writes:
            slot = _end_slot(grid, elem, ledge, n)
            side[elem, ledge, slot] = value
        if np.linalg.norm(lam) > 0:
            lambdas[n] = lam

    if np.isnan(side[act]).any():
        missing = int(np.isnan(side[act]).any(axis=(1, 2, 3)).sum())
        raise EquilibrationError(f"{missing} elements have unassigned edge forces")
    side[~grid.active.ravel(order="C")] = 0.0

    tractions = np.zeros_like(side)
    for e in act:
        for ledge in range(4):
            t_s, t_e = fem.tractions_from_forces(
                side[e, ledge, 0], side[e, ledge, 1], grid.edge_length(ledge)
            )
            tractions[e, ledge, 0] = t_s
            tractions[e, ledge, 1] = t_e

    field_out = EdgeTractionField(tractions, side, classes, lambdas)
    field_out.report = build_report(grid, field_out, force_scale)
    return field_out


def _split_node(grid, bc, forces, cls):
    """Solve one node's splitting; returns ([(elem, ledge, force)], lam)."""
    n = cls.node
    m = len(cls.elements)
    F = [forces[e, _corner_slot(grid, e, n)] for e in cls.elements]

    if cls.is_cycle:
        W = np.zeros((m + 1, 2))
        for i, v in enumerate(F):
            W[i + 1] = W[i] + v
        # Close the polygon exactly through the last side so the FE nodal
        # residual cannot trip the centroid closure check; the defect is
        # still absorbed by the last element's corner identity.
        pole = polygon_centroid(F[0], F[1], F[2], -W[3])
        pole = _void_aware_pole(W[:m], cls.void_flags, pole)
        sides, lam = split_internal_node(F, pole)
        writes = []
        for i in range(m):
            owner, ledge = cls.edges[i]
            prev_elem = cls.elements[i - 1]
            q = sides[i][0]
            writes.append((owner, ledge, q))
            writes.append((prev_elem, (ledge + 2) % 4, -q))
        return writes, lam

    # Chain: subtract prescribed end forces on the two extreme edges.
    g = [np.asarray(v, dtype=float).copy() for v in F]
    first_d, last_d = cls.extreme_dirichlet
    if not first_d:
        g[0] = g[0] - _prescribed_end_force(grid, bc, *cls.edges[0], n)
    if not last_d:
        g[-1] = g[-1] - _prescribed_end_force(grid, bc, *cls.edges[-1], n)

    d = cls.n_dirichlet_extremes
    if d == 2:
        sides, reactions, lam = split_dirichlet_node(g, voids=cls.void_flags)
    else:
        sides, reaction, lam = split_neumann_node(g, first_d, last_d)

    writes = []
    for i in range(1, m):
        owner, ledge = cls.edges[i]
        prev_elem = cls.elements[i - 1]
        q = sides[i][0]
        writes.append((owner, ledge, q))
        writes.append((prev_elem, (ledge + 2) % 4, -q))
    if first_d:
        owner, ledge = cls.edges[0]
        writes.append((owner, ledge, sides[0][0]))
    if last_d:
        owner, ledge = cls.edges[-1]
        writes.append((owner, ledge, sides[-1][1]))
    return writes, lam


def build_report(grid, field_in, force_scale):
    """Integrate the traction field exactly and collect quality measures."""
    act = grid.active_elems
    net_force = np.zeros((grid.n_elems, 2))
    net_moment = np.zeros(grid.n_elems)
    coords = grid.node_coords()
    centers = np.zeros((grid.n_elems, 2))
    centers[act] = grid.elem_centers(act)

    for e in act:
        c = centers[e]
        for ledge in range(4):
            n1, n2 = grid.edge_nodes(e, ledge)
            a, b = coords[n1], coords[n2]
            L = grid.edge_length(ledge)
            t_s = field_in.tractions[e, ledge, 0]
            t_e = field_in.tractions[e, ledge, 1]
            dvec = b - a
            dt = t_e - t_s
            net_force[e] += 0.5 * L * (t_s + t_e)
            net_moment[e] += L * (
                _cross(a - c, t_s)
                + 0.5 * (_cross(a - c, dt) + _cross(dvec, t_s))
                + _cross(dvec, dt) / 3.0
            )

    lambda_norms = np.zeros(grid.n_nodes)
    for n, lam in field_in.lambdas.items():
        lambda_norms[n] = np.linalg.norm(lam)
    counts = {}
    for cls in field_in.classes.values():
        counts[cls.kind] = counts.get(cls.kind, 0) + 1
    moment_scale = force_scale * max(grid.hx, grid.hy)
    return EquilibrationReport(
        force_scale, moment_scale, net_force, net_moment, lambda_norms, counts
    )


def action_reaction_residual(grid, field_in):
    """Largest pointwise traction mismatch across interior shared edges."""
    worst = 0.0
    for e in grid.active_elems:
        for ledge in range(4):
            nbr = grid.neighbor(e, ledge)
            if nbr < 0 or nbr < e:
                continue
            opp = (ledge + 2) % 4
            # Shared edge: opposite orientations, so start pairs with end.
            worst = max(
                worst,
                np.abs(
                    field_in.tractions[e, ledge, 0] + field_in.tractions[nbr, opp, 1]
                ).max(),
                np.abs(
                    field_in.tractions[e, ledge, 1] + field_in.tractions[nbr, opp, 0]
                ).max(),
            )
    return worst


def stress_tractions(grid, rho, material, u):
    """Naive control field: edge tractions from the raw FE corner stresses.

    Evaluates each element's stress tensor at its corners and projects onto
    the outward edge normals, t = sigma . n. Unlike the equilibrated field
    this is discontinuous across edges and does not balance per element; it
    serves as the comparison baseline for boundary-continuity measurements.
    """
    rho = np.asarray(rho, dtype=float)
    ue = fem.element_displacements(grid, u)
    tractions = np.zeros((grid.n_elems, 4, 2, 2))
    for e in grid.active_elems:
        sig = {}
        for corner in range(4):
            xi, eta = _CORNER_XI[corner]
            sxx, syy, sxy = fem.element_stress(
                material, grid.hx, grid.hy, ue[e], rho=rho[e], p=material.p,
                xi=xi, eta=eta,
            )
            sig[corner] = np.array([[sxx, sxy], [sxy, syy]])
        for ledge in range(4):
            c_start, c_end = EDGE_LNODES[ledge]
            normal = EDGE_NORMALS[ledge]
            tractions[e, ledge, 0] = sig[c_start] @ normal
            tractions[e, ledge, 1] = sig[c_end] @ normal
    return tractions


def dump_tractions_csv(grid, field_in, path):
    """Write per-edge traction endpoints as CSV for external inspection."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["element", "edge", "t_start_x", "t_start_y", "t_end_x", "t_end_y"]
        )
        for e in grid.active_elems:
            for ledge in range(4):
                t_s, t_e = field_in.edge_tractions(e, ledge)
                writer.writerow(
                    [e, ledge]
                    + [repr(float(v)) for v in (t_s[0], t_s[1], t_e[0], t_e[1])]
                )
