"""Config parsing, artifact formats, stitching and the end-to-end pipeline."""

import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from twolevel_topopt import cli, coarse, fem, fine, pipeline
from twolevel_topopt.grid import Grid

SMALL_RUN = """
[run]
name = small
workers = 1

[grid]
nx = 4
ny = 2
hx = 0.5
hy = 0.5

[coarse]
r_min = 1.3
eps = 0.02

[fine]
n = 4
eps = 0.02
max_iter = 150

[loads]
preset = shear-right

[supports]
preset = clamp-left
"""


# ------------------------------------------------------------------- config


def test_parse_config_defaults_and_overrides():
    config = pipeline.parse_config(SMALL_RUN)
    assert config.name == "small"
    assert (config.nx, config.ny) == (4, 2)
    assert config.hx == 0.5
    assert config.fine_n == 4
    assert config.coarse_r_min == 1.3
    assert config.coarse_eps == 0.02
    # untouched fields keep their defaults
    assert config.E == 1000.0
    assert config.rho_bar_min == 0.12
    assert config.mask == "none"


def test_parse_config_empty_is_default_run():
    config = pipeline.parse_config("")
    assert config.name == "custom"
    assert (config.nx, config.ny) == (32, 16)


def test_parse_config_preset_with_override():
    text = "[run]\npreset = example1\n\n[coarse]\neps = 0.05\n"
    config = pipeline.parse_config(text)
    assert config.name == "example1"
    assert (config.nx, config.ny) == (32, 16)
    assert_allclose(config.hx, 2.0 / 32.0)
    assert config.coarse_eps == 0.05


def test_parse_config_bool_and_int_casting():
    text = "[run]\ndeterministic = yes\nworkers = 3\n"
    config = pipeline.parse_config(text)
    assert config.deterministic is True
    assert config.workers == 3


def test_parse_config_rows():
    text = """
[loads]
preset = none
neumann =
    0 0 1 0 -1.5 0 -0.5
    0 1 1 0 -0.5 0 0

[supports]
preset = none
dirichlet =
    0 0 xy
    0 1 x
"""
    config = pipeline.parse_config(text)
    assert config.neumann == [
        (0, 0, 1, 0.0, -1.5, 0.0, -0.5),
        (0, 1, 1, 0.0, -0.5, 0.0, 0.0),
    ]
    assert config.dirichlet == [(0, 0, "xy"), (0, 1, "x")]


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("[nonsense]\nfoo = 1\n", "unknown config section"),
        ("[grid]\nspacing = 1\n", "unknown key grid.spacing"),
        ("[grid]\nnx = fast\n", "bad value"),
        ("[run]\npreset = example9\n", "unknown preset"),
        ("[loads]\nneumann = 0 0 1 0\n", "expected 7 fields"),
        ("[supports]\ndirichlet = 0 0 z\n", "jx jy x|y|xy"),
        ("[supports]\npreset = none\n", "no supports"),
        ("[grid]\nnx = 0\n", "positive"),
        ("[material]\nnu = 0.7\n", "nu out of range"),
        ("[thresholds]\nrho_bar_min = 0.9\n", "rho_bar_min < rho_bar_max"),
        ("[projection]\nbeta0 = 5.0\n", "beta0 <= beta_max"),
        ("[grid]\nmask = blob\n", "unknown mask spec"),
    ],
)
def test_parse_config_rejects(text, fragment):
    with pytest.raises(pipeline.ConfigError) as err:
        pipeline.parse_config(text)
    assert fragment in str(err.value)


def test_preset_config_fields():
    ex1 = pipeline.preset_config("example1")
    assert (ex1.nx, ex1.ny) == (32, 16)
    assert_allclose(ex1.nx * ex1.hx, 2.0)
    assert_allclose(ex1.ny * ex1.hy, 1.0)
    assert ex1.support_preset == "clamp-left"
    ex2 = pipeline.preset_config("example2", out="elsewhere")
    assert (ex2.nx, ex2.ny) == (32, 32)
    assert ex2.mask == "upper-right-quadrant"
    assert ex2.support_preset == "clamp-top"
    assert ex2.out == "elsewhere"
    with pytest.raises(pipeline.ConfigError):
        pipeline.preset_config("example3")


def test_build_grid_quadrant_mask():
    config = pipeline.preset_config("example2")
    g = config.build_grid()
    assert g.active.shape == (32, 32)
    assert g.active.sum() == 32 * 32 - 16 * 16
    assert not g.active[16, 16]
    assert g.active[15, 31] and g.active[31, 15]


def test_mask_file_roundtrip(tmp_path):
    # 2 x 3 domain with the top-right cell carved out; rows are top-first
    path = tmp_path / "mask.csv"
    path.write_text("1,1,0\n1,1,1\n")
    config = pipeline.parse_config(
        f"[grid]\nnx = 3\nny = 2\nmask = file:{path}\n"
    )
    g = config.build_grid()
    assert g.active.sum() == 5
    assert not g.active[2, 1]
    assert g.active[2, 0]


def test_mask_file_errors(tmp_path):
    # the file itself is only read when the grid is built
    path = tmp_path / "mask.csv"
    path.write_text("1,1\n")
    config = pipeline.parse_config(f"[grid]\nnx = 3\nny = 2\nmask = file:{path}\n")
    with pytest.raises(pipeline.ConfigError, match="expected"):
        config.build_grid()
    gone = pipeline.parse_config(
        f"[grid]\nnx = 3\nny = 2\nmask = file:{tmp_path / 'gone.csv'}\n"
    )
    with pytest.raises(pipeline.ConfigError, match="cannot read"):
        gone.build_grid()


def test_parabolic_shear_preserves_edge_shares():
    g = Grid(2, 4, 0.5, 0.25)
    config = pipeline.parse_config(
        "[grid]\nnx = 2\nny = 4\nhx = 0.5\nhy = 0.25\n"
    )
    bc = config.build_bc(g)
    f = fem.load_vector(g, bc)
    fy = f.reshape(-1, 2)[:, 1]
    assert_allclose(f.reshape(-1, 2)[:, 0], 0.0)
    # the parabola tau(y) = 1 - (2(y-c)/h)^2 integrates to 2h/3 over its span
    assert_allclose(fy.sum(), -2.0 / 3.0 * 1.0, rtol=1e-12)
    # every edge keeps its exact share of the load
    h, c = 1.0, 0.5
    for (elem, ledge), (t_s, t_e) in bc.neumann.items():
        assert ledge == 1
        _, iy = g.elem_index(elem)
        y0, y1 = iy * g.hy, (iy + 1) * g.hy
        exact = (y1 - y0) - 4.0 / (3.0 * h * h) * ((y1 - c) ** 3 - (y0 - c) ** 3)
        assert_allclose(0.5 * g.hy * (t_s[1] + t_e[1]), -exact, rtol=1e-12)
    # symmetric loading about the midline
    top = bc.neumann[(g.elem_id(1, 3), 1)]
    bottom = bc.neumann[(g.elem_id(1, 0), 1)]
    assert_allclose(top[0][1], bottom[1][1])
    assert_allclose(top[1][1], bottom[0][1])


# -------------------------------------------------------- stitch and rasters


def fake_batch(rasters, n):
    cells = {
        e: fine.FineCellResult(cell=e, rho=np.asarray(r, dtype=float), kind="optimized")
        for e, r in rasters.items()
    }
    return fine.FineBatchResult(cells=cells, failures={}, n=n)


def test_stitch_places_cells():
    g = Grid(2, 1, 1.0, 1.0)
    batch = fake_batch({0: np.arange(4) / 4.0, 1: np.arange(4, 8) / 8.0}, n=2)
    image = pipeline.stitch(g, batch)
    assert (image.width, image.height) == (4, 2)
    assert_allclose(image.data[0:2, 0:2], (np.arange(4) / 4.0).reshape(2, 2))
    assert_allclose(image.data[2:4, 0:2], (np.arange(4, 8) / 8.0).reshape(2, 2))
    # row 0 of the file raster is the top of the domain
    rows = image.raster_rows()
    assert rows.shape == (2, 4)
    assert_allclose(rows[0], image.data[:, 1])
    assert_allclose(rows[1], image.data[:, 0])


def test_stitch_missing_cell_raises():
    g = Grid(2, 1, 1.0, 1.0)
    batch = fake_batch({0: np.arange(4) / 4.0}, n=2)
    with pytest.raises(pipeline.PipelineError, match="missing cell raster"):
        pipeline.stitch(g, batch)


def test_continuity_metric_hand_example():
    data = np.zeros((4, 2))
    data[1, :] = [0.2, 0.4]  # last column of the left cell
    data[2, :] = [0.5, 0.1]  # first column of the right cell
    image = pipeline.HighResImage(
        data=data, n=2, active=np.ones((2, 1), dtype=bool)
    )
    metric = pipeline.continuity_metric(image)
    assert metric["count"] == 1
    assert_allclose(metric["per_boundary"], [0.3])
    assert_allclose(metric["mean"], 0.3)
    assert_allclose(metric["max"], 0.3)


def test_continuity_metric_skips_inactive_neighbors():
    image = pipeline.HighResImage(
        data=np.random.default_rng(0).uniform(size=(4, 2)),
        n=2,
        active=np.array([[True], [False]]),
    )
    metric = pipeline.continuity_metric(image)
    assert metric["count"] == 0
    assert metric["mean"] == 0.0


def test_write_pgm_format(tmp_path):
    path = tmp_path / "img.pgm"
    pipeline.write_pgm(path, np.array([[1.0, 0.0], [0.5, 0.25]]))
    blob = path.read_bytes()
    assert blob.startswith(b"P5\n2 2\n255\n")
    pixels = blob[len(b"P5\n2 2\n255\n") :]
    assert list(pixels) == [0, 255, 128, 191]


def test_csv_raster_roundtrip(tmp_path):
    path = tmp_path / "field.csv"
    raster = np.random.default_rng(3).uniform(size=(3, 5))
    pipeline.write_csv_raster(path, raster)
    assert np.array_equal(pipeline.read_csv_raster(path), raster)


def test_field_raster_orientation():
    g = Grid(2, 2, 1.0, 1.0)
    values = np.array([10.0, 11.0, 20.0, 21.0])  # elem (ix, iy) -> 10*ix+iy+10
    raster = pipeline.field_raster(g, values)
    assert_allclose(raster, [[11.0, 21.0], [10.0, 20.0]])


def test_render_rejects_unknown_format(tmp_path):
    with pytest.raises(pipeline.ConfigError):
        pipeline.render(np.zeros((2, 2)), "bmp", tmp_path / "x.bmp")


# ----------------------------------------------------------------- pipeline


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("small_run")
    config = pipeline.parse_config(SMALL_RUN)
    config.out = str(out)
    summary = pipeline.run_pipeline(config)
    return config, out, summary


def test_run_pipeline_artifacts(small_run):
    config, out, summary = small_run
    for name in (
        "coarse_state.npz",
        "coarse_history.csv",
        "coarse_stage_01.pgm",
        "coarse_stage_01.csv",
        "equilibrium_certificate.json",
        "tractions.csv",
        "cells.npz",
        "cells.csv",
        "highres.pgm",
        "highres.csv",
        "summary.json",
    ):
        assert (out / name).exists(), name
    on_disk = json.loads((out / "summary.json").read_text())
    assert on_disk["name"] == "small"
    assert on_disk["image_size"] == [4 * 4, 2 * 4]
    assert on_disk["cells_total"] == 8
    assert summary["coarse_converged"] is True
    assert abs(summary["coarse_volume_fraction"] - 0.5) < 1e-3
    assert summary["certificate"]["max_force_residual_rel"] <= 1e-8
    assert summary["certificate"]["max_moment_residual_rel"] <= 1e-8
    assert summary["max_cell_reaction_rel"] <= 1e-6
    highres = pipeline.read_csv_raster(out / "highres.csv")
    assert highres.shape == (2 * 4, 4 * 4)
    assert summary["continuity_mean"] >= 0.0


def test_run_pipeline_resumes_from_checkpoints(small_run, monkeypatch):
    config, out, summary = small_run

    def boom(*args, **kwargs):
        raise AssertionError("stage should have been resumed from checkpoint")

    monkeypatch.setattr(coarse, "stage_loop", boom)
    monkeypatch.setattr(fine, "solve_all_cells", boom)
    (out / "summary.json").unlink()
    again = pipeline.run_pipeline(config)
    assert (out / "summary.json").exists()
    assert again["cells_total"] == summary["cells_total"]
    assert_allclose(again["coarse_compliance"], summary["coarse_compliance"])


def test_run_pipeline_deterministic_reruns(small_run, tmp_path):
    config, out, _ = small_run
    from dataclasses import replace

    rerun = replace(config, out=str(tmp_path / "b"))
    pipeline.run_pipeline(rerun)
    first = (out / "highres.csv").read_bytes()
    second = (tmp_path / "b" / "highres.csv").read_bytes()
    assert first == second


def test_run_pipeline_verify_only(tmp_path):
    config = pipeline.parse_config(SMALL_RUN)
    config.out = str(tmp_path / "verify")
    summary = pipeline.run_pipeline(config, skip_fine=True)
    assert "cells_total" not in summary
    assert (tmp_path / "verify" / "equilibrium_certificate.json").exists()
    assert not (tmp_path / "verify" / "cells.npz").exists()
    cert = json.loads(
        (tmp_path / "verify" / "equilibrium_certificate.json").read_text()
    )
    assert cert["elements"] == 8
    assert cert["max_force_residual_rel"] <= 1e-8


# ---------------------------------------------------------------------- CLI


def test_cli_preset_list(capsys):
    assert cli.main(["preset-list"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert any(line.startswith("example1:") for line in lines)
    assert any(line.startswith("example2:") for line in lines)


def test_cli_run_small_config(tmp_path, capsys):
    path = tmp_path / "run.ini"
    path.write_text(SMALL_RUN)
    code = cli.main(
        ["run", "--config", str(path), "--out", str(tmp_path / "out")]
    )
    assert code == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["name"] == "small"
    assert (tmp_path / "out" / "highres.pgm").exists()


def test_cli_rejects_bad_config(tmp_path, capsys):
    path = tmp_path / "bad.ini"
    path.write_text("[grid]\nnx = -3\n")
    assert cli.main(["run", "--config", str(path)]) == cli.EXIT_CONFIG
    assert "configuration error" in capsys.readouterr().err


def test_cli_rejects_missing_config(tmp_path, capsys):
    missing = tmp_path / "nope.ini"
    assert cli.main(["run", "--config", str(missing)]) == cli.EXIT_CONFIG
    assert "cannot read" in capsys.readouterr().err


def test_cli_numerical_failure_exit_code(tmp_path, capsys):
    # a single pinned node leaves a rotation mode, which the loaded solve
    # must report as a numerical failure, not crash or hang
    path = tmp_path / "singular.ini"
    path.write_text(
        "[grid]\nnx = 2\nny = 2\nhx = 0.5\nhy = 0.5\n"
        "[supports]\npreset = none\ndirichlet = 0 0 xy\n"
    )
    code = cli.main(
        ["run", "--config", str(path), "--out", str(tmp_path / "out")]
    )
    assert code == cli.EXIT_NUMERICAL
    assert "run failed" in capsys.readouterr().err


def test_cli_io_failure_exit_code(tmp_path, capsys, monkeypatch):
    path = tmp_path / "run.ini"
    path.write_text(SMALL_RUN)

    def boom(config, skip_fine=False):
        raise OSError("disk full")

    monkeypatch.setattr(pipeline, "run_pipeline", boom)
    assert cli.main(["run", "--config", str(path)]) == cli.EXIT_IO
    assert "I/O error" in capsys.readouterr().err


def test_cli_workers_override(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(SMALL_RUN)
    config = cli._load_config(
        cli.build_parser().parse_args(
            ["run", "--config", str(path), "--workers", "2"]
        )
    )
    assert config.workers == 2
