"""Experiment configs, reports and small end-to-end runs."""
import json
import math

import numpy as np
import pytest

from soshydro import harness
from soshydro.harness import (
    ConfigError,
    ExperimentAborted,
    ExperimentConfig,
    FourierField,
    Report,
    box_gap_eigenvalue,
    config_hash,
    load_config,
    quadratic_profile_weights,
    run_experiment,
    transport_table_for,
)
from soshydro.lattice import stencil_matrix
from soshydro.transport import TransportTable

SMALL_HYDRO = dict(experiment="hydro", mobility="constant(1)", n_list=(8, 16), replicas=4, horizon=1e-4,
                   pde_m=64, pde_dt=1e-5, seed=3)


def _doc(**kw):
    d = {"version": 1, "experiment": "hydro"}
    d.update(kw)
    return d


# --- configuration -------------------------------------------------------------------------


def test_defaults_round_trip_through_yaml(tmp_path):
    cfg = ExperimentConfig.from_mapping(_doc(mobility="bump(0.1)", n_list=[16, 32]))
    path = tmp_path / "c.yaml"
    path.write_text(cfg.to_yaml())
    assert load_config(path) == cfg
    assert cfg.n_list == (16, 32)


@pytest.mark.parametrize("doc, match", [
    (_doc(colour="red"), "unknown config keys"),
    ({"experiment": "hydro"}, "version"),
    (_doc(version=2), "version"),
    ({"version": 1}, "experiment"),
    (_doc(experiment="fly"), "experiment"),
    (_doc(n_list=[64, 32]), "ascending"),
    (_doc(n_list=[4]), "n_list"),
    (_doc(pde_m=33), "pde_m"),
    (_doc(c_dt=0.5), "c_dt"),
    (_doc(replicas=1), "replicas"),
    (_doc(seed=-1), "seed"),
    (_doc(mobility="wobble(1)"), "mobility"),
    (_doc(m0={"sin1": "big"}), "m0"),
    (_doc(l_list=[3, 2]), "l_list"),
    (_doc(table_grid=[1.0, -1.0, 9]), "table_grid"),
    (_doc(experiment="electro"), "field"),
    ("not a mapping", "mapping"),
])
def test_invalid_configs_are_rejected(doc, match):
    with pytest.raises(ConfigError, match=match):
        ExperimentConfig.from_mapping(doc)


def test_yaml_exponents_without_a_point_are_floats(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("version: 1\nexperiment: pde-solve\npde_dt: 1e-5\nhorizon: 1e-3\n")
    cfg = load_config(path)
    assert cfg.pde_dt == 1e-5 and cfg.horizon == 1e-3


def test_unreadable_or_malformed_files(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("version: [1\n")
    with pytest.raises(ConfigError, match="YAML"):
        load_config(bad)


def test_bundled_configs_validate():
    from importlib import resources
    root = resources.files("soshydro") / "configs"
    names = sorted(p.name for p in root.iterdir() if p.name.endswith(".yaml"))
    assert len(names) >= 6
    for name in names:
        cfg = load_config(root / name)
        assert cfg.experiment in harness.EXPERIMENTS


def test_config_hash_ignores_output_only():
    a = ExperimentConfig(**SMALL_HYDRO)
    assert config_hash(a) == config_hash(a.replace(output="elsewhere"))
    assert config_hash(a) != config_hash(a.replace(seed=4))
    assert len(config_hash(a)) == 64


def test_fourier_field():
    f = FourierField.from_mapping({"sin1": 2.0, "cos3": 0.5})
    th = np.linspace(0, 1, 11)
    np.testing.assert_allclose(f(0.3, th), 2 * np.sin(2 * np.pi * th) + 0.5 * np.cos(6 * np.pi * th))
    assert FourierField.from_mapping({"sin1": 0.0}).is_zero
    assert not f.is_zero


# --- transport tables ------------------------------------------------------------------------


def test_constant_mobility_uses_the_exact_flat_table():
    t = transport_table_for(ExperimentConfig("hydro", mobility="constant(2)"))
    np.testing.assert_array_equal(t.values, 2.0)
    np.testing.assert_array_equal(t.stderr, 0.0)


def test_table_for_another_mobility_is_a_config_error(tmp_path):
    path = tmp_path / "t.txt"
    TransportTable.constant(1.0, mobility="constant(1)").save(path)
    with pytest.raises(ConfigError, match="built for"):
        transport_table_for(ExperimentConfig("hydro", mobility="bump(0.1)", table=str(path)))
    with pytest.raises(ConfigError, match="cannot load"):
        transport_table_for(ExperimentConfig("hydro", table=str(tmp_path / "nope.txt")))


def test_table_with_another_basis_is_a_config_error(tmp_path):
    cfg = ExperimentConfig("tabulate", mobility="bump(0.1)", table_grid=(-1.0, 1.0, 5), table_samples=5000,
                           seed=4)
    run_experiment(cfg, out_dir=tmp_path)
    path = str(tmp_path / "transport_table.txt")
    assert transport_table_for(cfg.replace(experiment="hydro", table=path)).mobility == cfg.mob.label
    with pytest.raises(ConfigError, match="basis"):
        transport_table_for(cfg.replace(experiment="hydro", table=path, basis="rich"))


# --- reports ---------------------------------------------------------------------------------


def test_report_round_trip_and_exit_codes(tmp_path):
    rep = run_experiment(ExperimentConfig(**SMALL_HYDRO))
    paths = rep.write(tmp_path)
    assert paths[0].name == "hydro_report.json"
    back = Report.read(paths[0])
    assert back.canonical_bytes() == rep.canonical_bytes()
    csv_text = (tmp_path / "hydro_errors.csv").read_text()
    assert csv_text.splitlines()[0].startswith("config_hash,n,function")
    assert rep.config_hash in csv_text.splitlines()[1]
    meta = json.loads(paths[0].read_text())["metadata"]
    assert meta["config_hash"] == rep.config_hash and "code_version" in meta and "timing" in meta
    assert "timing" not in json.loads(rep.canonical_bytes())["metadata"]
    for verdict, code in (("pass", 0), ("inconclusive", 0), ("fail", 1), ("error", 3)):
        rep.verdict = verdict
        assert rep.exit_code == code


@pytest.mark.parametrize("kw", [
    SMALL_HYDRO,
    dict(experiment="gap", mobility="bump(0.1)", l_list=(2, 3), gap_samples=200, seed=1),
    dict(experiment="diag", mobility="bump(0.1)", n_list=(32,), replicas=3, horizon=1e-6, k_list=(1, 2),
         a_list=(0.05, 0.1), snapshots=3, seed=2),
    dict(experiment="pde-solve", pde_m=32, pde_dt=1e-5, horizon=1e-4),
])
def test_reports_are_deterministic(kw):
    cfg = ExperimentConfig(**kw)
    assert run_experiment(cfg).canonical_bytes() == run_experiment(cfg).canonical_bytes()


def test_seed_changes_the_report():
    cfg = ExperimentConfig(**SMALL_HYDRO)
    a = json.loads(run_experiment(cfg).canonical_bytes())["results"]["weak_errors"]
    b = json.loads(run_experiment(cfg.replace(seed=99)).canonical_bytes())["results"]["weak_errors"]
    assert a != b


def test_replica_workers_do_not_change_the_report():
    cfg = ExperimentConfig(**SMALL_HYDRO)
    assert run_experiment(cfg, workers=2).canonical_bytes() == run_experiment(cfg).canonical_bytes()


# --- hydro and electro ----------------------------------------------------------------------


def test_hydro_at_time_zero_is_initial_sampling_error():
    rep = run_experiment(ExperimentConfig(**dict(SMALL_HYDRO, horizon=0.0, n_list=(16, 64), replicas=16)))
    for n in ("16", "64"):
        for name, entry in rep.results["per_n"][n]["functions"].items():
            # The reference is the exact pairing of m0; the micro value is a mean of R Gaussian pairings
            # with standard deviation sqrt(1/(2N)) each.
            assert entry["reference"] == pytest.approx({"sin2pi": 0.25}.get(name, 0.0), abs=1e-12)
            assert entry["error"] <= 4.0 * math.sqrt(1.0 / (2 * int(n) * 16))


def test_hydro_deterministic_start_at_time_zero_is_exact():
    rep = run_experiment(ExperimentConfig(**dict(SMALL_HYDRO, horizon=0.0, init="deterministic")))
    assert max(rep.results["weak_errors"]) < 1e-12


def test_hydro_report_contents():
    rep = run_experiment(ExperimentConfig(**SMALL_HYDRO))
    assert set(rep.checks) == {"monotone_in_n", "final_below_tolerance"}
    assert len(rep.results["weak_errors"]) == 2
    assert rep.results["reference"]["mass_drift"] < 1e-12
    assert len(rep.tables["errors"]) == 6
    assert all(r["error"] >= 0 for r in rep.tables["errors"])


def test_electro_with_zero_field_reduces_to_hydro():
    base = run_experiment(ExperimentConfig(**SMALL_HYDRO))
    rep = run_experiment(ExperimentConfig(**dict(SMALL_HYDRO, experiment="electro", field={"sin1": 0.0})))
    assert rep.results["reduced_to_hydro"] is True
    assert rep.experiment == "electro"
    assert rep.results["weak_errors"] == base.results["weak_errors"]


def test_electro_constant_mobility_skips_discrimination():
    rep = run_experiment(ExperimentConfig(**dict(SMALL_HYDRO, experiment="electro", field={"sin1": 1.0})))
    pre = rep.results["precheck"]
    assert pre["skipped_constant_mobility"] and not pre["passed"]
    assert rep.results["references"]["max_difference"] < 1e-12
    assert rep.verdict == "inconclusive" and rep.exit_code == 0
    assert "micro" not in rep.results


def test_electro_unresolved_gap_is_inconclusive_not_passed():
    cfg = ExperimentConfig(**dict(SMALL_HYDRO, experiment="electro", mobility="bump(0.1)", field={"sin1": 1.0},
                                  table_grid=(-1.0, 1.0, 5), table_samples=5000))
    rep = run_experiment(cfg)
    assert rep.verdict == "inconclusive"
    assert rep.checks == {"precheck": False}
    forced = run_experiment(cfg.replace(run_if_inconclusive=True))
    assert forced.verdict == "inconclusive"
    assert len(forced.results["residual_a_hat"]) == 2


def test_electro_field_moves_the_reference():
    cfg = ExperimentConfig(**dict(SMALL_HYDRO, experiment="electro", field={"sin1": 1.0}, horizon=1e-3))
    ref = run_experiment(cfg).results["references"]["a_hat"]
    still = run_experiment(ExperimentConfig(**dict(SMALL_HYDRO, horizon=1e-3))).results["reference"]["values"]
    assert abs(ref["sin2pi"] - still["sin2pi"]) > 1e-4


def test_sub_run_failure_aborts_with_a_partial_report(monkeypatch):
    def boom(*a, **k):
        raise FloatingPointError("diverged")
    monkeypatch.setattr(harness, "simulate_replicas", boom)
    with pytest.raises(ExperimentAborted) as info:
        run_experiment(ExperimentConfig(**SMALL_HYDRO))
    rep = info.value.report
    assert rep.verdict == "error" and "diverged" in rep.results["error"]
    assert "reference" in rep.results
    assert "timing" in rep.metadata


# --- gap -------------------------------------------------------------------------------------


def test_box_gap_eigenvalue_is_the_slowest_fiber_mode():
    for l in (2, 3, 5):
        c = stencil_matrix(2 * l + 1)
        ev = np.linalg.eigvalsh(0.5 * c @ c.T)
        assert box_gap_eigenvalue(l) == pytest.approx(ev[0])
        assert ev[0] > 0
    # l^-4 scaling of the exact gap.
    slope = np.polyfit(np.log([4, 6, 8]), np.log([box_gap_eigenvalue(l) for l in (4, 6, 8)]), 1)[0]
    assert slope == pytest.approx(-4.0, abs=0.5)


def test_quadratic_weights_are_orthogonal_to_conserved_directions():
    for l in (2, 4, 7):
        w = quadratic_profile_weights(l)
        j = np.arange(-l, l + 1)
        assert abs(w.sum()) < 1e-12 and abs(w @ j) < 1e-12
        assert np.linalg.norm(w) == pytest.approx(1.0)


def test_gap_constant_mobility_matches_eigensolve():
    rep = run_experiment(ExperimentConfig("gap", mobility="constant(1)", l_list=(2, 3), gap_samples=2000, seed=1))
    assert max(rep.results["eigen_relative_error"]) <= 0.10
    assert rep.checks["eigen_match"]
    assert len(rep.tables["rates"]) == 2


# --- diagnostics -----------------------------------------------------------------------------


def test_block_means_and_statistics():
    x = np.arange(8, dtype=float)[None, None, :]
    bm = harness._block_means(x, 1)
    np.testing.assert_allclose(bm[0, 0], [(7 + 0 + 1) / 3, 1, 2, 3, 4, 5, 6, (6 + 7 + 0) / 3])
    flat = np.ones((2, 3, 16))
    t = np.array([0.0, 0.5, 1.0])
    np.testing.assert_array_equal(harness.two_block_statistic(flat, t, 2, 0.25), 0.0)
    stat = harness.local_ergodicity_statistic(flat, t, 2, lambda c: c, lambda a: a, lambda th: 1 + 0 * th)
    np.testing.assert_array_equal(stat, 0.0)


def test_diag_constant_mobility_statistic_vanishes():
    rep = run_experiment(ExperimentConfig("diag", mobility="constant(1)", n_list=(32,), replicas=3, horizon=1e-6,
                                          k_list=(1, 2), a_list=(0.05, 0.1), snapshots=3, seed=2))
    assert max(rep.results["local_ergodicity"]) < 1e-12
    assert rep.checks["local_ergodicity_decreasing"]


def test_diag_bump_statistics_decrease_with_block_size():
    rep = run_experiment(ExperimentConfig("diag", mobility="bump(0.1)", n_list=(64,), replicas=4, horizon=1e-6,
                                          k_list=(1, 2, 4), a_list=(0.05, 0.1, 0.2), snapshots=4, seed=2))
    le = rep.results["local_ergodicity"]
    assert le[0] > le[-1] > 0
    assert rep.verdict == "pass"


# --- tabulate and pde-solve -------------------------------------------------------------------


def test_tabulate_writes_a_loadable_table(tmp_path):
    cfg = ExperimentConfig("tabulate", mobility="bump(0.1)", table_grid=(-1.0, 1.0, 5), table_samples=5000, seed=4)
    rep = run_experiment(cfg, out_dir=tmp_path)
    assert rep.verdict == "pass"
    table = TransportTable.load(tmp_path / "transport_table.txt")
    assert table.mobility == cfg.mob.label
    rows = rep.tables["table"]
    assert len(rows) == 5
    assert all(r["lower"] <= r["upper"] for r in rows)


def test_pde_solve_report_and_profiles(tmp_path):
    cfg = ExperimentConfig("pde-solve", pde_m=32, pde_dt=1e-5, horizon=1e-4)
    rep = run_experiment(cfg, out_dir=tmp_path)
    assert rep.verdict == "pass"
    assert rep.results["mass_drift"] < 1e-12
    data = np.loadtxt(tmp_path / "pde_profiles.csv", delimiter=",")
    assert data.shape[1] == 33
    assert data[-1, 0] == pytest.approx(1e-4)
    amp = 0.5 * math.exp(-0.5 * (2 * math.pi) ** 4 * 1e-4)
    assert rep.results["final_pairings"]["sin2pi"] == pytest.approx(amp / 2, rel=1e-3)
