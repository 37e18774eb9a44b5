"""End-to-end pipeline: config parsing, presets, artifacts and stitching.

A run executes coarse stage loop -> traction equilibration -> per-cell fine
farm -> stitching, writing rasters (binary PGM and CSV), CSV logs, an
equilibrium certificate and a JSON summary into the output directory.
Expensive stages checkpoint their state as .npz files, so rerunning after a
partial failure only regenerates what is missing; everything is
deterministic for a fixed config.

Config files are INI-style (configparser) with sections [run], [grid],
[material], [thresholds], [coarse], [fine], [projection], [loads] and
[supports]; unknown sections or keys are rejected. `preset` in [run] seeds
all values from a named benchmark; any other keys then override it.
"""

from __future__ import annotations

import configparser
import csv
import json
import logging
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import coarse, equilibrate, fem, fine
from .grid import BoundaryConditions, Grid, GridError

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Bad run configuration (unknown keys, out-of-range values, ...)."""


class PipelineError(RuntimeError):
    """A pipeline stage failed; partial artifacts are left for inspection."""


@dataclass
class RunConfig:
    """Fully validated inputs of one pipeline run."""

    name: str = "custom"
    # grid
    nx: int = 32
    ny: int = 16
    hx: float = 0.0625
    hy: float = 0.0625
    mask: str = "none"  # none | upper-right-quadrant | file:<csv path>
    # material
    E: float = 1000.0
    nu: float = 0.3
    # thresholds / volume
    rho0: float = 0.5
    rho_bar_min: float = 0.12
    rho_bar_max: float = 0.88
    # coarse optimization
    coarse_p: float = 1.0
    coarse_r_min: float = 1.5
    coarse_eps: float = 0.03
    max_inner: int = 200
    stage_cap: int = 50
    # fine optimization
    fine_n: int = 32
    fine_p: float = 3.0
    fine_r_min: float = 1.3
    fine_eps: float = 0.01
    fine_max_iter: int = 300
    # projection schedule
    beta0: float = 1.0
    beta_max: float = 2.0
    mu: float = 0.5
    m_nd_min: float = 50.0
    cadence: int = 2
    # boundary conditions
    load_preset: str = "shear-right"  # shear-right | none
    neumann: list = field(default_factory=list)  # rows (ix, iy, ledge, tsx, tsy, tex, tey)
    support_preset: str = "clamp-left"  # clamp-left | clamp-top | none
    dirichlet: list = field(default_factory=list)  # rows (jx, jy, "x"|"y"|"xy")
    # execution
    out: str = "out"
    workers: int = 1
    deterministic: bool = True

    def validate(self):
        if self.nx < 1 or self.ny < 1:
            raise ConfigError(f"grid.nx/ny must be positive, got {self.nx}x{self.ny}")
        if self.hx <= 0 or self.hy <= 0:
            raise ConfigError("grid.hx/hy must be positive")
        if self.mask not in ("none", "upper-right-quadrant") and not self.mask.startswith(
            "file:"
        ):
            raise ConfigError(f"grid.mask: unknown mask spec {self.mask!r}")
        if self.E <= 0:
            raise ConfigError("material.E must be positive")
        if not -1 < self.nu < 0.5:
            raise ConfigError(f"material.nu out of range: {self.nu}")
        if not 0 < self.rho0 <= 1:
            raise ConfigError(f"thresholds.rho0 out of range: {self.rho0}")
        if not 0 < self.rho_bar_min < self.rho_bar_max < 1:
            raise ConfigError(
                f"thresholds: need 0 < rho_bar_min < rho_bar_max < 1, got "
                f"[{self.rho_bar_min}, {self.rho_bar_max}]"
            )
        for key in ("coarse_p", "coarse_r_min", "coarse_eps", "fine_p", "fine_r_min",
                    "fine_eps", "beta_max", "mu", "m_nd_min"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be positive")
        if self.beta0 < 0 or self.beta0 > self.beta_max:
            raise ConfigError(
                f"projection: need 0 <= beta0 <= beta_max, got "
                f"{self.beta0} vs {self.beta_max}"
            )
        if not 0 < self.mu < 1:
            raise ConfigError(f"projection.mu out of range: {self.mu}")
        if self.cadence < 1 or self.fine_n < 2:
            raise ConfigError("projection.cadence >= 1 and fine.n >= 2 required")
        if self.max_inner < 1 or self.stage_cap < 1 or self.fine_max_iter < 1:
            raise ConfigError("iteration caps must be positive")
        if self.load_preset not in ("shear-right", "none"):
            raise ConfigError(f"loads.preset: unknown preset {self.load_preset!r}")
        if self.support_preset not in ("clamp-left", "clamp-top", "none"):
            raise ConfigError(
                f"supports.preset: unknown preset {self.support_preset!r}"
            )
        if self.workers < 0:
            raise ConfigError("run.workers must be >= 0")
        if self.support_preset == "none" and not self.dirichlet:
            raise ConfigError("no supports: set supports.preset or supports.dirichlet")
        return self

    # -- factories ---------------------------------------------------------

    def build_grid(self):
        if self.mask == "none":
            active = None
        elif self.mask == "upper-right-quadrant":
            active = np.ones((self.nx, self.ny), dtype=bool)
            active[self.nx // 2 :, self.ny // 2 :] = False
        else:
            active = load_mask_csv(self.mask[len("file:") :], self.nx, self.ny)
        return Grid(self.nx, self.ny, self.hx, self.hy, active=active)

    def build_bc(self, grid):
        bc = BoundaryConditions()
        if self.support_preset == "clamp-left":
            _clamp_line(grid, bc, axis="x", value=0)
        elif self.support_preset == "clamp-top":
            _clamp_line(grid, bc, axis="y", value=grid.ny)
        for jx, jy, comps in self.dirichlet:
            node = grid.node_id(int(jx), int(jy))
            bc.fix_node(node, mask=("x" in comps, "y" in comps))
        if self.load_preset == "shear-right":
            apply_parabolic_edge_shear(grid, bc)
        for ix, iy, ledge, tsx, tsy, tex, tey in self.neumann:
            elem = grid.elem_id(int(ix), int(iy))
            bc.add_edge_traction(elem, int(ledge), (tsx, tsy), (tex, tey))
        bc.validate(grid)
        return bc

    def coarse_material(self):
        return fem.MaterialModel(E=self.E, nu=self.nu, p=self.coarse_p)

    def fine_material(self):
        return fem.MaterialModel(E=self.E, nu=self.nu, p=self.fine_p)

    def threshold_policy(self):
        return coarse.ThresholdPolicy(self.rho_bar_min, self.rho_bar_max, self.rho0)

    def projection_params(self):
        return fine.ProjectionParams(
            self.beta0, self.beta_max, self.mu, self.m_nd_min, self.cadence
        )


def _clamp_line(grid, bc, axis, value):
    """Fix both displacement components of all active nodes on a grid line."""
    if axis == "x":
        nodes = [grid.node_id(value, jy) for jy in range(grid.ny + 1)]
    else:
        nodes = [grid.node_id(jx, value) for jx in range(grid.nx + 1)]
    for node in nodes:
        if grid.node_active[node]:
            bc.fix_node(node)


def apply_parabolic_edge_shear(grid, bc, magnitude=1.0):
    """Parabolic downward shear on the structure's right boundary edges.

    Finds the active boundary edges on the rightmost material column, spans
    a beam-style parabola tau(y) = magnitude * (1 - (2(y-c)/h)^2) over their
    joint vertical extent (zero at the extent's ends, peak at its middle)
    and stores each edge's best linear fit. The per-edge fits are the exact
    L2 projections of the parabola, so every edge keeps its exact share of
    the total load.
    """
    edges = []
    for elem, ledge, _ in grid.boundary_edges():
        ix, iy = grid.elem_index(elem)
        if ledge == 1 and ix == grid.nx - 1:
            edges.append((elem, iy))
    if not edges:
        raise ConfigError("shear-right: no boundary edges on the right side")
    ys = [iy for _, iy in edges]
    y_lo = min(ys) * grid.hy
    y_hi = (max(ys) + 1) * grid.hy
    h = y_hi - y_lo
    c = 0.5 * (y_lo + y_hi)

    def tau(y):
        return magnitude * (1.0 - (2.0 * (y - c) / h) ** 2)

    for elem, iy in edges:
        y0 = iy * grid.hy
        y1 = y0 + grid.hy
        L = grid.hy
        # L2 projection of the parabola onto the edge's linear shape functions:
        # mass matrix [[L/3, L/6], [L/6, L/3]], right-hand sides by Simpson
        # (exact for the cubic integrands).
        ym = 0.5 * (y0 + y1)
        b1 = L / 6.0 * (tau(y0) * 1.0 + 4.0 * tau(ym) * 0.5 + 0.0)
        b2 = L / 6.0 * (0.0 + 4.0 * tau(ym) * 0.5 + tau(y1) * 1.0)
        det = L * L / 12.0
        t_s = (L / 3.0 * b1 - L / 6.0 * b2) / det
        t_e = (L / 3.0 * b2 - L / 6.0 * b1) / det
        bc.add_edge_traction(elem, 1, (0.0, -t_s), (0.0, -t_e))


def load_mask_csv(path, nx, ny):
    """Read an activity mask CSV: ny rows (top first) of nx 0/1 entries."""
    try:
        raster = np.loadtxt(path, delimiter=",", dtype=float)
    except OSError as exc:
        raise ConfigError(f"grid.mask: cannot read {path}: {exc}") from exc
    raster = np.atleast_2d(raster)
    if raster.shape != (ny, nx):
        raise ConfigError(
            f"grid.mask: {path} has shape {raster.shape}, expected {(ny, nx)}"
        )
    return np.flipud(raster).T.astype(bool)


# -- presets ---------------------------------------------------------------

PRESETS = {
    "example1": dict(
        name="example1",
        nx=32,
        ny=16,
        hx=2.0 / 32.0,
        hy=1.0 / 16.0,
        mask="none",
        support_preset="clamp-left",
        load_preset="shear-right",
        beta_max=2.0,
        m_nd_min=50.0,
    ),
    "example2": dict(
        name="example2",
        nx=32,
        ny=32,
        hx=10.0 / 32.0,
        hy=10.0 / 32.0,
        mask="upper-right-quadrant",
        support_preset="clamp-top",
        load_preset="shear-right",
        beta_max=4.5,
        m_nd_min=45.0,
    ),
}

PRESET_NOTES = {
    "example1": "2 x 1 cantilever, clamped left edge, parabolic end shear",
    "example2": "10 x 10 L-bracket, clamped upper arm, shear on the lower arm tip",
}


def preset_config(name, **overrides):
    """RunConfig for a named benchmark, with optional field overrides."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; have {sorted(PRESETS)}")
    params = dict(PRESETS[name])
    params.update(overrides)
    return RunConfig(**params).validate()


# -- config parsing --------------------------------------------------------

_SECTION_FIELDS = {
    "run": {"preset": None, "name": str, "out": str, "workers": int,
            "deterministic": bool},
    "grid": {"nx": int, "ny": int, "hx": float, "hy": float, "mask": str},
    "material": {"e": float, "nu": float},
    "thresholds": {"rho0": float, "rho_bar_min": float, "rho_bar_max": float},
    "coarse": {"p": float, "r_min": float, "eps": float, "max_inner": int,
               "stage_cap": int},
    "fine": {"n": int, "p": float, "r_min": float, "eps": float, "max_iter": int},
    "projection": {"beta0": float, "beta_max": float, "mu": float,
                   "m_nd_min": float, "cadence": int},
    "loads": {"preset": str, "neumann": None},
    "supports": {"preset": str, "dirichlet": None},
}

_KEY_TO_FIELD = {
    ("run", "name"): "name",
    ("run", "out"): "out",
    ("run", "workers"): "workers",
    ("run", "deterministic"): "deterministic",
    ("grid", "nx"): "nx",
    ("grid", "ny"): "ny",
    ("grid", "hx"): "hx",
    ("grid", "hy"): "hy",
    ("grid", "mask"): "mask",
    ("material", "e"): "E",
    ("material", "nu"): "nu",
    ("thresholds", "rho0"): "rho0",
    ("thresholds", "rho_bar_min"): "rho_bar_min",
    ("thresholds", "rho_bar_max"): "rho_bar_max",
    ("coarse", "p"): "coarse_p",
    ("coarse", "r_min"): "coarse_r_min",
    ("coarse", "eps"): "coarse_eps",
    ("coarse", "max_inner"): "max_inner",
    ("coarse", "stage_cap"): "stage_cap",
    ("fine", "n"): "fine_n",
    ("fine", "p"): "fine_p",
    ("fine", "r_min"): "fine_r_min",
    ("fine", "eps"): "fine_eps",
    ("fine", "max_iter"): "fine_max_iter",
    ("projection", "beta0"): "beta0",
    ("projection", "beta_max"): "beta_max",
    ("projection", "mu"): "mu",
    ("projection", "m_nd_min"): "m_nd_min",
    ("projection", "cadence"): "cadence",
    ("loads", "preset"): "load_preset",
    ("supports", "preset"): "support_preset",
}

_BOOL_STRINGS = {"true": True, "1": True, "yes": True,
                 "false": False, "0": False, "no": False}


def parse_config(text):
    """Parse and validate an INI run configuration into a RunConfig."""
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc

    for section in parser.sections():
        if section not in _SECTION_FIELDS:
            raise ConfigError(f"unknown config section [{section}]")
        for key in parser[section]:
            if key not in _SECTION_FIELDS[section]:
                raise ConfigError(f"unknown key {section}.{key}")

    if parser.has_option("run", "preset"):
        config = preset_config(parser.get("run", "preset"))
    else:
        config = RunConfig()

    updates = {}
    for (section, key), fname in _KEY_TO_FIELD.items():
        if not parser.has_option(section, key):
            continue
        raw = parser.get(section, key)
        caster = _SECTION_FIELDS[section][key]
        try:
            if caster is bool:
                updates[fname] = _BOOL_STRINGS[raw.strip().lower()]
            else:
                updates[fname] = caster(raw)
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"{section}.{key}: bad value {raw!r}") from exc

    if parser.has_option("loads", "neumann"):
        updates["neumann"] = _parse_rows(
            parser.get("loads", "neumann"), 7, "loads.neumann",
            (int, int, int, float, float, float, float),
        )
    if parser.has_option("supports", "dirichlet"):
        rows = []
        for lineno, parts in _split_rows(parser.get("supports", "dirichlet")):
            if len(parts) != 3 or parts[2] not in ("x", "y", "xy"):
                raise ConfigError(
                    f"supports.dirichlet row {lineno}: expected 'jx jy x|y|xy'"
                )
            rows.append((int(parts[0]), int(parts[1]), parts[2]))
        updates["dirichlet"] = rows

    return replace(config, **updates).validate()


def _split_rows(raw):
    for lineno, line in enumerate(raw.strip().splitlines(), 1):
        parts = line.split()
        if parts:
            yield lineno, parts


def _parse_rows(raw, width, where, casters):
    rows = []
    for lineno, parts in _split_rows(raw):
        if len(parts) != width:
            raise ConfigError(f"{where} row {lineno}: expected {width} fields")
        try:
            rows.append(tuple(cast(p) for cast, p in zip(casters, parts)))
        except ValueError as exc:
            raise ConfigError(f"{where} row {lineno}: {exc}") from exc
    return rows


# -- stitched image and rendering -------------------------------------------

@dataclass
class HighResImage:
    """Stitched fine-density image, indexed [x pixel, y pixel], y upward."""

    data: np.ndarray
    n: int  # pixels per coarse cell side
    active: np.ndarray  # coarse activity mask (nx, ny)

    @property
    def width(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    def raster_rows(self):
        """Rows top-to-bottom for file output (row 0 = top of the domain)."""
        return np.flipud(self.data.T)


def stitch(grid, batch, n=None):
    """Place every cell's fine raster into one high-resolution image.

    Inactive coarse cells render as zero-density background. Raises
    PipelineError when an active cell has no raster.
    """
    if n is None:
        n = batch.n
    image = np.zeros((grid.nx * n, grid.ny * n))
    for e in grid.active_elems:
        result = batch.cells.get(e)
        if result is None:
            raise PipelineError(f"missing cell raster for element {e}")
        ix, iy = grid.elem_index(e)
        image[ix * n : (ix + 1) * n, iy * n : (iy + 1) * n] = result.rho.reshape(n, n)
    return HighResImage(data=image, n=n, active=grid.active.copy())


def continuity_metric(image):
    """Mean |density jump| across each interior cell boundary of the image.

    Returns {"per_boundary": [...], "mean": float, "max": float,
    "count": int}; boundaries between an active and an inactive cell are
    skipped (there is no facing material row to compare).
    """
    n = image.n
    active = image.active
    nx, ny = active.shape
    per_boundary = []
    for ix in range(nx - 1):
        for iy in range(ny):
            if active[ix, iy] and active[ix + 1, iy]:
                a = image.data[(ix + 1) * n - 1, iy * n : (iy + 1) * n]
                b = image.data[(ix + 1) * n, iy * n : (iy + 1) * n]
                per_boundary.append(float(np.abs(a - b).mean()))
    for ix in range(nx):
        for iy in range(ny - 1):
            if active[ix, iy] and active[ix, iy + 1]:
                a = image.data[ix * n : (ix + 1) * n, (iy + 1) * n - 1]
                b = image.data[ix * n : (ix + 1) * n, (iy + 1) * n]
                per_boundary.append(float(np.abs(a - b).mean()))
    if not per_boundary:
        return {"per_boundary": [], "mean": 0.0, "max": 0.0, "count": 0}
    return {
        "per_boundary": per_boundary,
        "mean": float(np.mean(per_boundary)),
        "max": float(np.max(per_boundary)),
        "count": len(per_boundary),
    }


def write_pgm(path, raster):
    """Binary 8-bit graymap; density 1.0 renders black, 0.0 white."""
    raster = np.clip(np.asarray(raster, dtype=float), 0.0, 1.0)
    pixels = np.round((1.0 - raster) * 255.0).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes(order="C"))


def write_csv_raster(path, raster):
    np.savetxt(path, np.asarray(raster, dtype=float), delimiter=",", fmt="%.17g")


def read_csv_raster(path):
    return np.atleast_2d(np.loadtxt(path, delimiter=","))


def render(image, fmt, path):
    """Write a HighResImage (or bare top-down raster) as 'pgm' or 'csv'."""
    raster = image.raster_rows() if isinstance(image, HighResImage) else image
    if fmt == "pgm":
        write_pgm(path, raster)
    elif fmt == "csv":
        write_csv_raster(path, raster)
    else:
        raise ConfigError(f"unknown render format {fmt!r}")


def field_raster(grid, values):
    """Top-down (ny, nx) raster view of a per-element field."""
    return np.flipud(np.asarray(values, dtype=float).reshape(grid.nx, grid.ny).T)


# -- pipeline ---------------------------------------------------------------

def _write_coarse_artifacts(out, grid, result):
    for k, rho_k in enumerate(result.stage_fields, 1):
        base = out / f"coarse_stage_{k:02d}"
        raster = field_raster(grid, rho_k)
        if not base.with_suffix(".pgm").exists():
            write_pgm(base.with_suffix(".pgm"), raster)
        if not base.with_suffix(".csv").exists():
            write_csv_raster(base.with_suffix(".csv"), raster)
    hist = out / "coarse_history.csv"
    if not hist.exists():
        with open(hist, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["stage", "iteration", "compliance", "volume_fraction", "max_delta"]
            )
            for row in result.history:
                writer.writerow(
                    [row["stage"], row["iteration"], repr(row["compliance"]),
                     repr(row["volume_fraction"]), repr(row["max_delta"])]
                )


def _save_coarse_state(path, result):
    history = np.array(
        [
            (r["stage"], r["iteration"], r["compliance"], r["volume_fraction"],
             r["max_delta"])
            for r in result.history
        ],
        dtype=float,
    )
    np.savez_compressed(
        path,
        rho=result.rho,
        frozen=result.frozen,
        stages=result.stages,
        converged=int(result.converged),
        history=history,
        stage_fields=np.array(result.stage_fields),
        u=result.solution.u,
        f=result.solution.f,
        compliance=result.solution.compliance,
        element_energy=result.solution.element_energy,
    )


def _load_coarse_state(path):
    data = np.load(path)
    history = [
        {
            "stage": int(s),
            "iteration": int(i),
            "compliance": c,
            "volume_fraction": v,
            "max_delta": d,
        }
        for s, i, c, v, d in data["history"]
    ]
    solution = fem.FESolution(
        u=data["u"],
        f=data["f"],
        compliance=float(data["compliance"]),
        element_energy=data["element_energy"],
    )
    return coarse.CoarseResult(
        rho=data["rho"],
        frozen=data["frozen"],
        stages=int(data["stages"]),
        converged=bool(data["converged"]),
        history=history,
        solution=solution,
        stage_fields=list(data["stage_fields"]),
    )


_KIND_CODES = {"frozen-solid": 0, "frozen-void": 1, "optimized": 2}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


def _save_cells(path, batch):
    ids = sorted(batch.cells)
    np.savez_compressed(
        path,
        n=batch.n,
        ids=np.array(ids, dtype=int),
        rasters=np.array([batch.cells[i].rho for i in ids]),
        kinds=np.array([_KIND_CODES[batch.cells[i].kind] for i in ids], dtype=int),
        converged=np.array([batch.cells[i].converged for i in ids], dtype=bool),
        iterations=np.array([batch.cells[i].iterations for i in ids], dtype=int),
        m_nd=np.array([batch.cells[i].m_nd for i in ids]),
        beta_final=np.array([batch.cells[i].beta_final for i in ids]),
        compliance=np.array([batch.cells[i].compliance for i in ids]),
        max_reaction=np.array([batch.cells[i].max_reaction for i in ids]),
        reaction_scale=np.array([batch.cells[i].reaction_scale for i in ids]),
    )


def _load_cells(path):
    data = np.load(path)
    cells = {}
    for row, cell in enumerate(data["ids"]):
        cells[int(cell)] = fine.FineCellResult(
            cell=int(cell),
            rho=data["rasters"][row],
            kind=_KIND_NAMES[int(data["kinds"][row])],
            converged=bool(data["converged"][row]),
            iterations=int(data["iterations"][row]),
            m_nd=float(data["m_nd"][row]),
            beta_final=float(data["beta_final"][row]),
            compliance=float(data["compliance"][row]),
            max_reaction=float(data["max_reaction"][row]),
            reaction_scale=float(data["reaction_scale"][row]),
        )
    return fine.FineBatchResult(cells=cells, failures={}, n=int(data["n"]))


def _write_cells_csv(path, batch):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["cell", "kind", "converged", "iterations", "m_nd", "beta_final",
             "compliance", "max_reaction", "reaction_scale"]
        )
        for cell in sorted(batch.cells):
            r = batch.cells[cell]
            writer.writerow(
                [cell, r.kind, int(r.converged), r.iterations, repr(r.m_nd),
                 repr(r.beta_final), repr(r.compliance), repr(r.max_reaction),
                 repr(r.reaction_scale)]
            )


def equilibrium_certificate(grid, field_out):
    """Machine-readable certificate of the equilibrated traction field."""
    report = field_out.report
    fs = report.force_scale or 1.0
    ms = report.moment_scale or 1.0
    act = grid.active_elems
    force_rel = np.linalg.norm(report.net_force[act], axis=1) / fs
    moment_rel = np.abs(report.net_moment[act]) / ms
    return {
        "force_scale": report.force_scale,
        "elements": int(act.size),
        "max_force_residual_rel": float(force_rel.max()),
        "max_moment_residual_rel": float(moment_rel.max()),
        "elements_within_1e-8": int(((force_rel <= 1e-8) & (moment_rel <= 1e-8)).sum()),
        "max_lambda_rel": report.max_lambda / fs,
        "action_reaction_residual": equilibrate.action_reaction_residual(grid, field_out),
        "node_classes": report.class_counts,
    }


def run_pipeline(config, skip_fine=False):
    """Execute a full run; returns the summary dict written to summary.json.

    Artifacts land in config.out. Stages checkpoint to .npz files and are
    skipped when their checkpoint already exists, so reruns after a partial
    failure regenerate only what is missing (identically, as the whole
    pipeline is deterministic). With skip_fine=True the run stops after
    writing the equilibration certificate (CLI `verify`).
    """
    config.validate()
    t0 = time.perf_counter()
    out = Path(config.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PipelineError(f"cannot create output directory {out}: {exc}") from exc

    grid = config.build_grid()
    bc = config.build_bc(grid)

    coarse_ckpt = out / "coarse_state.npz"
    if coarse_ckpt.exists():
        log.info("coarse checkpoint found, skipping the stage loop")
        result = _load_coarse_state(coarse_ckpt)
    else:
        result = coarse.stage_loop(
            grid,
            config.coarse_material(),
            bc,
            config.threshold_policy(),
            r_min=config.coarse_r_min,
            eps=config.coarse_eps,
            max_inner=config.max_inner,
            stage_cap=config.stage_cap,
        )
        _save_coarse_state(coarse_ckpt, result)
    _write_coarse_artifacts(out, grid, result)
    if not result.converged:
        raise PipelineError(
            f"coarse stage loop did not converge in {config.stage_cap} stages"
        )

    void_mask = result.frozen == coarse.VOID
    field_out = equilibrate.equilibrate_all(
        grid, result.rho, config.coarse_material(), bc, result.solution.u,
        void_mask=void_mask,
    )
    certificate = equilibrium_certificate(grid, field_out)
    cert_path = out / "equilibrium_certificate.json"
    with open(cert_path, "w") as fh:
        json.dump(certificate, fh, indent=2, sort_keys=True)
    tr_path = out / "tractions.csv"
    if not tr_path.exists():
        equilibrate.dump_tractions_csv(grid, field_out, tr_path)

    summary = {
        "name": config.name,
        "stages": result.stages,
        "coarse_converged": result.converged,
        "coarse_compliance": result.solution.compliance,
        "coarse_volume_fraction": result.volume_fraction(grid),
        "frozen_solid": int((result.frozen == coarse.SOLID).sum()),
        "frozen_void": int((result.frozen == coarse.VOID).sum()),
        "free_cells": int(
            ((result.frozen == coarse.FREE) & grid.active.ravel(order="C")).sum()
        ),
        "certificate": certificate,
    }

    if skip_fine:
        summary["wall_time_s"] = time.perf_counter() - t0
        with open(out / "summary.json", "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
        return summary

    cells_ckpt = out / "cells.npz"
    if cells_ckpt.exists():
        log.info("cell checkpoint found, skipping the fine farm")
        batch = _load_cells(cells_ckpt)
    else:
        batch = fine.solve_all_cells(
            grid,
            result,
            field_out,
            n=config.fine_n,
            material=config.fine_material(),
            r_min=config.fine_r_min,
            eps=config.fine_eps,
            projection=config.projection_params(),
            max_iter=config.fine_max_iter,
            workers=config.workers,
        )
        if batch.failures:
            _write_cells_csv(out / "cells.csv", batch)
            details = "; ".join(
                f"cell {cell}: {msg}" for cell, msg in sorted(batch.failures.items())
            )
            raise PipelineError(f"fine farm failures: {details}")
        _save_cells(cells_ckpt, batch)
    _write_cells_csv(out / "cells.csv", batch)

    image = stitch(grid, batch)
    pgm_path = out / "highres.pgm"
    csv_path = out / "highres.csv"
    if not pgm_path.exists():
        render(image, "pgm", pgm_path)
    if not csv_path.exists():
        render(image, "csv", csv_path)
    metric = continuity_metric(image)

    summary.update(
        {
            "cells_optimized": batch.n_optimized,
            "cells_total": len(batch.cells),
            "fine_resolution": config.fine_n,
            "image_size": [image.width, image.height],
            "continuity_mean": metric["mean"],
            "continuity_max": metric["max"],
            "continuity_boundaries": metric["count"],
            "max_cell_reaction_rel": max(
                (
                    r.max_reaction / r.reaction_scale
                    for r in batch.cells.values()
                    if r.kind == "optimized" and r.reaction_scale > 0
                ),
                default=0.0,
            ),
        }
    )
    summary["wall_time_s"] = time.perf_counter() - t0
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary
