"""Command line interface: subcommands, outputs, exit codes."""

import json

import pytest

from patrol3d import synthetic
from patrol3d.cli import (
    EXIT_DISCONNECTED,
    EXIT_INPUT,
    EXIT_INVARIANT,
    EXIT_OK,
    main,
)
from patrol3d.graph import save_graph
from patrol3d.terrain import save_map


@pytest.fixture()
def world(tmp_path):
    m = synthetic.flat_grid(12.0, 6.0, 0.5)
    map_path = tmp_path / "world.map"
    save_map(m, map_path)
    g = synthetic.line_graph([(-4, 0, 0), (4, 0, 0)])
    graph_path = tmp_path / "world.graph"
    save_graph(g, graph_path)
    sc_path = tmp_path / "scenario.json"
    synthetic.write_scenario(
        sc_path,
        map_path=map_path,
        graph_path=graph_path,
        robots=[(-4.0, 0.0, 0.0)],
        duration_s=20.0,
        tick_s=0.1,
        seed=1,
    )
    return tmp_path, sc_path


class TestRun:
    def test_run_ok(self, world, capsys):
        tmp_path, sc_path = world
        out = tmp_path / "out"
        code = main(["run", "--scenario", str(sc_path), "--out", str(out)])
        assert code == EXIT_OK
        captured = capsys.readouterr().out
        assert "visits=" in captured
        assert (out / "metrics_cc_1.csv").exists()
        assert (out / "messages_cc_1.log").exists()

    def test_overrides_applied(self, world, capsys):
        tmp_path, sc_path = world
        code = main(
            [
                "run", "--scenario", str(sc_path), "--out", str(tmp_path / "o"),
                "--strategy", "nocc", "--seed", "9", "--duration", "10",
                "--param", "v_max=0.3",
            ]
        )
        assert code == EXIT_OK
        assert "strategy=nocc seed=9" in capsys.readouterr().out
        assert (tmp_path / "o" / "metrics_nocc_9.csv").exists()

    def test_missing_map(self, world, capsys):
        tmp_path, sc_path = world
        doc = json.loads(sc_path.read_text())
        doc["map"] = "missing.map"
        sc_path.write_text(json.dumps(doc))
        code = main(["run", "--scenario", str(sc_path), "--out", str(tmp_path / "o")])
        assert code == EXIT_INPUT
        assert "error" in capsys.readouterr().err

    def test_bad_param(self, world, capsys):
        tmp_path, sc_path = world
        code = main(
            [
                "run", "--scenario", str(sc_path), "--out", str(tmp_path / "o"),
                "--param", "warp_speed=9",
            ]
        )
        assert code == EXIT_INPUT

    def test_missing_scenario(self, tmp_path, capsys):
        code = main(["run", "--scenario", str(tmp_path / "none.json")])
        assert code == EXIT_INPUT

    def test_scenario_without_graph_fails_invariantly(self, world, capsys):
        # patrolling mode without a graph is an engine-level error
        tmp_path, sc_path = world
        doc = json.loads(sc_path.read_text())
        del doc["graph"]
        sc_path.write_text(json.dumps(doc))
        code = main(["run", "--scenario", str(sc_path), "--out", str(tmp_path / "o")])
        assert code == EXIT_INVARIANT


class TestCompare:
    def test_compare_writes_table(self, world, capsys):
        tmp_path, sc_path = world
        out = tmp_path / "cmp"
        code = main(
            [
                "compare", "--scenario", str(sc_path), "--out", str(out),
                "--duration", "10", "--seeds", "1,2",
            ]
        )
        assert code == EXIT_OK
        table = (out / "compare.txt").read_text()
        for variant in ("cc", "cwmc", "nocc"):
            assert variant in table
        assert (out / "metrics_cwmc_2.csv").exists()


class TestBuildGraph:
    def test_waypoints_ok(self, world, tmp_path, capsys):
        world_path, _ = world
        wp = tmp_path / "wp.txt"
        wp.write_text("-4 0 0\n0 0 0\n4 0 0\n")
        out_graph = tmp_path / "built.graph"
        code = main(
            [
                "build-graph", "--map", str(world_path / "world.map"),
                "--waypoints", str(wp), "--out-graph", str(out_graph),
                "--d-max", "5.0",
            ]
        )
        assert code == EXIT_OK
        assert out_graph.exists()
        assert "connected" in capsys.readouterr().out

    def test_disconnected_waypoints(self, world, tmp_path, capsys):
        world_path, _ = world
        wp = tmp_path / "wp.txt"
        # two clusters farther apart than d_max: no bridging edge
        wp.write_text("-4 0 0\n-3.5 0 0\n3.5 0 0\n4 0 0\n")
        code = main(
            [
                "build-graph", "--map", str(world_path / "world.map"),
                "--waypoints", str(wp), "--out-graph", str(tmp_path / "g.graph"),
                "--d-max", "2.0",
            ]
        )
        assert code == EXIT_DISCONNECTED
        assert "disconnected" in capsys.readouterr().err

    def test_needs_an_input(self, world, tmp_path):
        world_path, _ = world
        code = main(
            [
                "build-graph", "--map", str(world_path / "world.map"),
                "--out-graph", str(tmp_path / "g.graph"),
            ]
        )
        assert code == EXIT_INPUT
