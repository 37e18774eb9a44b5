"""Structured Cartesian grid of bilinear quadrilateral elements.

Elements and nodes are numbered column-major from the origin corner:
node id = jx*(ny+1) + jy, element id = ix*ny + iy. Element local nodes run
counter-clockwise from the lower-left corner, and local edges 0..3 are
bottom, right, top, left (start/end nodes in counter-clockwise order).
Non-rectangular domains are represented by deactivating elements of the
bounding rectangle; inactive elements carry no degrees of freedom.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Local corner order: (0,0), (1,0), (1,1), (0,1) in (ix, iy) offsets.
CORNER_OFFSETS = np.array([(0, 0), (1, 0), (1, 1), (0, 1)], dtype=int)

# Edge k connects local corners EDGE_LNODES[k] = (start, end), counter-clockwise.
EDGE_LNODES = ((0, 1), (1, 2), (2, 3), (3, 0))

# Outward unit normals of edges 0..3 (bottom, right, top, left).
EDGE_NORMALS = np.array([(0.0, -1.0), (1.0, 0.0), (0.0, 1.0), (-1.0, 0.0)])

# Neighbouring element offset across each edge.
EDGE_NEIGHBOR_OFFSETS = ((0, -1), (1, 0), (0, 1), (-1, 0))


class GridError(ValueError):
    """Invalid grid configuration (bad dimensions, disconnected mask, ...)."""


class Grid:
    """Cartesian mesh with an element activity mask.

    Parameters
    ----------
    nx, ny : int
        Element counts along x and y.
    hx, hy : float
        Element edge lengths.
    active : array-like of bool, shape (nx, ny), optional
        Element activity mask; defaults to all active. The active region
        must form a single edge-connected component.
    origin : pair of float
        Physical coordinates of the lower-left corner.
    """

    def __init__(self, nx, ny, hx, hy, active=None, origin=(0.0, 0.0)):
        if nx < 1 or ny < 1:
            raise GridError(f"element counts must be positive, got {nx}x{ny}")
        if hx <= 0 or hy <= 0:
            raise GridError(f"element sizes must be positive, got {hx}, {hy}")
        self.nx = int(nx)
        self.ny = int(ny)
        self.hx = float(hx)
        self.hy = float(hy)
        self.origin = np.asarray(origin, dtype=float)

        if active is None:
            active = np.ones((self.nx, self.ny), dtype=bool)
        active = np.asarray(active, dtype=bool)
        if active.shape != (self.nx, self.ny):
            raise GridError(
                f"active mask shape {active.shape} does not match {(self.nx, self.ny)}"
            )
        if not active.any():
            raise GridError("active region is empty")
        self.active = active
        self._check_connected()

        self.n_nodes = (self.nx + 1) * (self.ny + 1)
        self.n_elems = self.nx * self.ny

        eix, eiy = np.meshgrid(np.arange(self.nx), np.arange(self.ny), indexing="ij")
        eix = eix.ravel(order="C")  # element e -> ix = e // ny
        eiy = eiy.ravel(order="C")
        n00 = (eix) * (self.ny + 1) + eiy
        self.elem_nodes = np.stack(
            [n00, n00 + (self.ny + 1), n00 + (self.ny + 2), n00 + 1], axis=1
        )
        self.elem_dofs = np.repeat(2 * self.elem_nodes, 2, axis=1)
        self.elem_dofs[:, 1::2] += 1

        self.active_elems = np.flatnonzero(self.active.ravel(order="C"))
        self.node_active = np.zeros(self.n_nodes, dtype=bool)
        self.node_active[self.elem_nodes[self.active_elems].ravel()] = True

    # -- index maps ---------------------------------------------------------

    def node_id(self, jx, jy):
        return jx * (self.ny + 1) + jy

    def node_index(self, n):
        return divmod(n, self.ny + 1)

    def node_coords(self, nodes=None):
        """Physical coordinates of the given node ids (default: all nodes)."""
        if nodes is None:
            nodes = np.arange(self.n_nodes)
        nodes = np.asarray(nodes)
        jx, jy = np.divmod(nodes, self.ny + 1)
        return self.origin + np.stack([jx * self.hx, jy * self.hy], axis=-1)

    def elem_id(self, ix, iy):
        return ix * self.ny + iy

    def elem_index(self, e):
        return divmod(e, self.ny)

    def is_active(self, e):
        return bool(self.active.ravel(order="C")[e])

    def elem_centers(self, elems=None):
        if elems is None:
            elems = np.arange(self.n_elems)
        elems = np.asarray(elems)
        ix, iy = np.divmod(elems, self.ny)
        return self.origin + np.stack(
            [(ix + 0.5) * self.hx, (iy + 0.5) * self.hy], axis=-1
        )

    def edge_length(self, edge):
        return self.hx if edge in (0, 2) else self.hy

    def edge_nodes(self, e, edge):
        """Global (start, end) node ids of a local edge, counter-clockwise."""
        a, b = EDGE_LNODES[edge]
        nodes = self.elem_nodes[e]
        return int(nodes[a]), int(nodes[b])

    def neighbor(self, e, edge):
        """Active element sharing the given edge, or -1."""
        ix, iy = self.elem_index(e)
        dx, dy = EDGE_NEIGHBOR_OFFSETS[edge]
        mx, my = ix + dx, iy + dy
        if 0 <= mx < self.nx and 0 <= my < self.ny and self.active[mx, my]:
            return self.elem_id(mx, my)
        return -1

    # -- boundary topology ---------------------------------------------------

    def boundary_edges(self):
        """All (element id, local edge id, outward normal) on the active boundary.

        Every active-element edge not shared with another active element is
        returned exactly once.
        """
        out = []
        for e in self.active_elems:
            for edge in range(4):
                if self.neighbor(e, edge) < 0:
                    out.append((int(e), edge, EDGE_NORMALS[edge].copy()))
        return out

    def node_fan(self, n):
        """Incident active elements and edges of node n in counter-clockwise order.

        Returns (elements, edges, is_cycle). For an interior node the four
        elements form a cycle and ``edges[i]`` lies between ``elements[i-1]``
        and ``elements[i]``. For a boundary node the elements form a chain
        c_0..c_{m-1} with m+1 incident edges, ``edges[i]`` preceding element
        ``c_i`` so that ``edges[0]`` and ``edges[m]`` are the two boundary
        edges of the chain. Edges are (element id, local edge id) pairs of
        the element that owns them in the returned orientation.

        Raises GridError for non-manifold nodes (two element arms meeting
        only at this node).
        """
        jx, jy = self.node_index(n)
        quads = [  # ccw starting south-east
            (jx, jy - 1),  # SE
            (jx, jy),  # NE
            (jx - 1, jy),  # NW
            (jx - 1, jy - 1),  # SW
        ]
        present = []
        for ix, iy in quads:
            if 0 <= ix < self.nx and 0 <= iy < self.ny and self.active[ix, iy]:
                present.append(self.elem_id(ix, iy))
            else:
                present.append(-1)

        return _fan_from_quads(self, n, present)

    def _check_connected(self):
        """The active region must be one edge-connected component."""
        seen = np.zeros((self.nx, self.ny), dtype=bool)
        start = tuple(np.argwhere(self.active)[0])
        stack = [start]
        seen[start] = True
        while stack:
            ix, iy = stack.pop()
            for dx, dy in EDGE_NEIGHBOR_OFFSETS:
                mx, my = ix + dx, iy + dy
                if (
                    0 <= mx < self.nx
                    and 0 <= my < self.ny
                    and self.active[mx, my]
                    and not seen[mx, my]
                ):
                    seen[mx, my] = True
                    stack.append((mx, my))
        if not (seen == self.active).all():
            raise GridError("active region is not edge-connected")


# Quadrant q (SE, NE, NW, SW) of a node: local edge ids of the two element
# edges meeting at the node, (preceding, following) in ccw order around the
# node. E.g. the SE element touches the node with its top-left corner; going
# ccw the mesh edge south of the node is that element's left edge (3) and the
# mesh edge east of the node is its top edge (2).
_QUAD_EDGES = ((3, 2), (0, 3), (1, 0), (2, 1))


def _fan_from_quads(grid, n, present):
    """Order a node's incident elements into a ccw cycle or chain."""
    m = sum(1 for e in present if e >= 0)
    if m == 0:
        return [], [], False
    if m == 4:
        elements = list(present)
        edges = [(present[q], _QUAD_EDGES[q][0]) for q in range(4)]
        return elements, edges, True

    # Chain: rotate so the run of present elements is contiguous and starts
    # right after a gap. Non-contiguous runs mean a non-manifold node.
    start = None
    for q in range(4):
        if present[q] >= 0 and present[q - 1] < 0:
            if start is not None:
                raise GridError(f"non-manifold active region at node {n}")
            start = q
    run = [(start + i) % 4 for i in range(m)]
    if any(present[q] < 0 for q in run):
        raise GridError(f"non-manifold active region at node {n}")

    elements = [present[q] for q in run]
    edges = [(present[q], _QUAD_EDGES[q][0]) for q in run]
    last = run[-1]
    edges.append((present[last], _QUAD_EDGES[last][1]))
    return elements, edges, False


@dataclass
class BoundaryConditions:
    """Dirichlet constraints and Neumann edge tractions.

    dirichlet maps node id -> (mask, values) where mask is a length-2 bool
    (x, y constrained) and values the prescribed displacements. neumann maps
    (element id, local edge id) -> (t_start, t_end) linear traction endpoints
    in the element's counter-clockwise edge orientation.
    """

    dirichlet: dict = field(default_factory=dict)
    neumann: dict = field(default_factory=dict)

    def fix_node(self, node, ux=0.0, uy=0.0, mask=(True, True)):
        self.dirichlet[int(node)] = (
            np.asarray(mask, dtype=bool),
            np.array([ux, uy], dtype=float),
        )

    def add_edge_traction(self, elem, edge, t_start, t_end):
        self.neumann[(int(elem), int(edge))] = (
            np.asarray(t_start, dtype=float).copy(),
            np.asarray(t_end, dtype=float).copy(),
        )

    def validate(self, grid):
        """Check BC targets against the grid; raises GridError on conflicts."""
        boundary = {(e, k) for e, k, _ in grid.boundary_edges()}
        for key in self.neumann:
            if key not in boundary:
                raise GridError(f"Neumann edge {key} is not on the active boundary")
        for node in self.dirichlet:
            if not grid.node_active[node]:
                raise GridError(f"Dirichlet node {node} is inactive")
        constrained = self.constrained_dofs(grid)
        if len(constrained) < 3:
            raise GridError("insufficient Dirichlet constraints for rigid modes")
        loaded_nodes = set()
        for (e, k) in self.neumann:
            a, b = grid.edge_nodes(e, k)
            loaded_nodes.update((a, b))
        for node, (mask, _) in self.dirichlet.items():
            if node in loaded_nodes and mask.all():
                # A fully fixed node may not also carry Neumann data.
                for (e, k) in self.neumann:
                    if node in grid.edge_nodes(e, k):
                        raise GridError(
                            f"node {node} has both Dirichlet and Neumann data"
                        )

    def constrained_dofs(self, grid):
        """Sorted array of constrained global dof indices."""
        dofs = []
        for node, (mask, _) in self.dirichlet.items():
            for comp in range(2):
                if mask[comp]:
                    dofs.append(2 * node + comp)
        return np.array(sorted(dofs), dtype=int)

    def prescribed_values(self, grid):
        """Values aligned with constrained_dofs()."""
        vals = {}
        for node, (mask, values) in self.dirichlet.items():
            for comp in range(2):
                if mask[comp]:
                    vals[2 * node + comp] = values[comp]
        dofs = self.constrained_dofs(grid)
        return np.array([vals[d] for d in dofs])
