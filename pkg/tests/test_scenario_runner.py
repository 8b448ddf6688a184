import json
from pathlib import Path

import numpy as np
import pytest

from dualgrid.cli import main as cli_main
from dualgrid.compare import compare_runs
from dualgrid.errors import ConfigurationError, ScenarioError
from dualgrid.fieldio import load_particles, read_field, save_particles, write_field
from dualgrid.runner import run
from dualgrid.scenario import build_scenario, load_scenario, scenario_hash

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def _tiny_doc(**over):
    doc = {
        "schema": 1,
        "name": "tiny",
        "mode": "multiscale",
        "strategy": "distributed",
        "grids": {
            "coarse": {"origin": [0, 0, 0], "size": [0.4, 0.2, 0.2], "dims": [4, 2, 2]},
            "fine": {"origin": [0, 0, 0], "size": [0.4, 0.2, 0.2], "dims": [8, 4, 4]},
        },
        "fine_partition": {"weights": "uniform", "invert_ranks": False},
        "fluid": {"rho1": 1000.0, "mu1": 1e-3, "rho2": 1.0, "mu2": 1e-5,
                  "gravity": [0, 0, 0], "init_u": [0.5, 0, 0],
                  "init_alpha": {"type": "uniform", "value": 1.0}},
        "bc": {"x-": {"type": "inlet", "u": [0.5, 0, 0], "alpha": 1.0},
               "x+": {"type": "outlet"},
               "y-": {"type": "wall"}, "y+": {"type": "wall"},
               "z-": {"type": "wall"}, "z+": {"type": "wall"}},
        "particles": {"source": {"type": "single", "x": [0.11, 0.09, 0.11],
                                  "radius": 0.008, "density": 2500.0},
                      "contact": {"k": 1000.0, "e": 0.9, "mu": 0.3},
                      "drag": {"correlation": "difelice"},
                      "walls": [], "out_of_domain": "error"},
        "time": {"dt_cfd": 2e-3, "n_sub": 6, "n_cfd": 1, "end": 0.02},
        "solver": {"cg_tol": 1e-10, "cg_max_iters": 2000, "c_alpha": 1.0,
                   "eps_floor": 0.05},
        "output": {"probe_particles": [0], "snapshot_every": 0,
                   "snapshot_fields": ["u", "p", "eps"]},
    }
    for key, val in over.items():
        parts = key.split(".")
        cur = doc
        for part in parts[:-1]:
            cur = cur.setdefault(part, {})
        cur[parts[-1]] = val
    return doc


def test_validation_names_offending_field():
    doc = _tiny_doc()
    del doc["time"]["dt_cfd"]
    with pytest.raises(ScenarioError, match="time.dt_cfd"):
        build_scenario(doc)


def test_validation_rejects_bad_bc_type():
    doc = _tiny_doc(**{"bc.y-": {"type": "weird"}})
    with pytest.raises(ScenarioError, match="bc.y-"):
        build_scenario(doc)


def test_validation_rejects_oversized_particles():
    doc = _tiny_doc(**{"particles.source.radius": 0.06})
    with pytest.raises(ScenarioError, match="radius"):
        build_scenario(doc)


def test_validation_rejects_mismatched_domains():
    doc = _tiny_doc(**{"grids.fine.size": [0.5, 0.2, 0.2]})
    with pytest.raises(ScenarioError, match="span the same domain"):
        build_scenario(doc)


def test_bundled_scenarios_validate():
    for path in sorted(SCENARIOS.glob("*.json")):
        scen = load_scenario(path)
        assert scen.n_steps >= 1, path


def test_scenario_hash_ignores_strategy():
    doc = _tiny_doc()
    h1 = scenario_hash(doc)
    doc2 = dict(doc)
    doc2["strategy"] = "gather-scatter"
    assert scenario_hash(doc2) == h1
    doc3 = _tiny_doc(**{"time.dt_cfd": 1e-3})
    assert scenario_hash(doc3) != h1


def test_field_snapshot_roundtrip(tmp_path):
    from dualgrid.mesh import UniformGrid
    grid = UniformGrid((0, 0.5, 0), (0.1, 0.2, 0.3), (3, 2, 2))
    rng = np.random.default_rng(0)
    arr = rng.normal(size=(grid.ncells, 3))
    path = tmp_path / "f.bin"
    write_field(path, grid, arr, time=1.25)
    meta, back = read_field(path)
    assert meta["dims"] == (3, 2, 2)
    assert meta["time"] == 1.25
    assert np.array_equal(arr, back)


def test_particle_file_roundtrip(tmp_path):
    from dualgrid.dem import Particle, ParticleSet
    ps = ParticleSet.from_particles([
        Particle(3, (0.1, 0.2, 0.3), (1.0, -2.0, 0.5), r=0.01, rho=2500.0),
        Particle(1, (0.4, 0.5, 0.6), (0.0, 0.25, 0.125), r=0.02, rho=1200.0),
    ])
    path = tmp_path / "particles.txt"
    save_particles(path, ps)
    back = load_particles(path)
    assert back.ids.tolist() == [1, 3]
    assert np.array_equal(back.x, ps.x)
    assert np.array_equal(back.v, ps.v)


def test_run_writes_expected_outputs(tmp_path):
    res = run(_tiny_doc(), ranks=2, out_dir=tmp_path / "out")
    out = res.out_dir
    assert (out / "manifest.json").exists()
    assert (out / "diagnostics.csv").exists()
    assert (out / "metrics.csv").exists()
    assert (out / "probes" / "particle_0.csv").exists()
    assert (out / "series" / "kinetic_energy.csv").exists()
    assert (out / "particles_final.txt").exists()
    assert (out / "fields" / "index.csv").exists()
    man = json.loads((out / "manifest.json").read_text())
    assert man["ranks"] == 2
    assert man["matrix_builds"] == {"coarse_to_fine": 1, "fine_to_coarse": 1}


def test_run_refuses_nonempty_dir(tmp_path):
    target = tmp_path / "out"
    target.mkdir()
    (target / "keep.txt").write_text("data")
    with pytest.raises(ConfigurationError):
        run(_tiny_doc(), ranks=1, out_dir=target)


def test_compare_identical_dirs_all_zero(tmp_path):
    run(_tiny_doc(), ranks=1, out_dir=tmp_path / "a")
    run(_tiny_doc(), ranks=1, out_dir=tmp_path / "b")
    rep = compare_runs(tmp_path / "a", tmp_path / "b")
    assert rep.ok and rep.max_diff == 0.0


def test_compare_across_rank_counts_bitwise(tmp_path):
    run(_tiny_doc(), ranks=1, out_dir=tmp_path / "p1")
    run(_tiny_doc(), ranks=2, out_dir=tmp_path / "p2")
    rep = compare_runs(tmp_path / "p1", tmp_path / "p2", tolerance=0.0)
    assert rep.ok, rep.render()


def test_compare_rejects_different_scenarios(tmp_path):
    run(_tiny_doc(), ranks=1, out_dir=tmp_path / "a")
    run(_tiny_doc(**{"time.dt_cfd": 1e-3}), ranks=1, out_dir=tmp_path / "b")
    with pytest.raises(ValueError):
        compare_runs(tmp_path / "a", tmp_path / "b")


def test_compare_detects_differences(tmp_path):
    run(_tiny_doc(), ranks=1, out_dir=tmp_path / "a")
    run(_tiny_doc(), ranks=1, out_dir=tmp_path / "b")
    # corrupt one field file
    victim = sorted((tmp_path / "b" / "fields").glob("u_*.bin"))[0]
    meta, arr = read_field(victim)
    from dualgrid.mesh import UniformGrid
    grid = UniformGrid(meta["origin"], meta["spacing"], meta["dims"])
    arr = np.asarray(arr).copy()
    arr.reshape(-1)[0] += 1e-9
    write_field(victim, grid, arr, time=meta["time"])
    rep = compare_runs(tmp_path / "a", tmp_path / "b", tolerance=0.0)
    assert not rep.ok
    rep2 = compare_runs(tmp_path / "a", tmp_path / "b", tolerance=1e-8)
    assert rep2.ok


def test_manifest_rerun_reproduces_bitwise(tmp_path):
    doc = _tiny_doc()
    run(doc, ranks=2, out_dir=tmp_path / "first")
    man = json.loads((tmp_path / "first" / "manifest.json").read_text())
    run(doc, ranks=man["ranks"], backend=man["backend"], strategy=man["strategy"],
        steps=man["steps"], out_dir=tmp_path / "second")
    rep = compare_runs(tmp_path / "first", tmp_path / "second")
    assert rep.ok and rep.max_diff == 0.0


def test_metrics_wall_time_accounting(tmp_path):
    run(_tiny_doc(), ranks=2, out_dir=tmp_path / "out")
    import csv
    with open(tmp_path / "out" / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows
    for row in rows:
        phases = sum(float(v) for k, v in row.items()
                     if k.startswith("wall_") and k != "wall_total")
        assert phases <= float(row["wall_total"]) + 1e-12


def test_cli_run_and_compare(tmp_path):
    doc = _tiny_doc()
    spath = tmp_path / "tiny.json"
    spath.write_text(json.dumps(doc))
    rc = cli_main(["run", str(spath), "--ranks", "2", "--out", str(tmp_path / "a")])
    assert rc == 0
    rc = cli_main(["run", str(spath), "--ranks", "1", "--out", str(tmp_path / "b"),
                   "--strategy", "gather-scatter"])
    assert rc == 0
    rc = cli_main(["compare", str(tmp_path / "a"), str(tmp_path / "b"), "--tol", "0"])
    assert rc == 0


def test_cli_validation_error_exit_code(tmp_path):
    doc = _tiny_doc()
    del doc["fluid"]["rho1"]
    spath = tmp_path / "bad.json"
    spath.write_text(json.dumps(doc))
    rc = cli_main(["run", str(spath), "--ranks", "1", "--out", str(tmp_path / "x")])
    assert rc == 1


def test_cli_compare_failure_exit_code(tmp_path):
    doc = _tiny_doc()
    spath = tmp_path / "tiny.json"
    spath.write_text(json.dumps(doc))
    cli_main(["run", str(spath), "--ranks", "1", "--out", str(tmp_path / "a")])
    cli_main(["run", str(spath), "--ranks", "1", "--out", str(tmp_path / "b")])
    victim = tmp_path / "b" / "diagnostics.csv"
    text = victim.read_text().splitlines()
    text[1] = text[1].replace("0", "1", 1)
    victim.write_text("\n".join(text))
    rc = cli_main(["compare", str(tmp_path / "a"), str(tmp_path / "b")])
    assert rc == 1
