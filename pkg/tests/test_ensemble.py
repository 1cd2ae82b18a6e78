import fcntl
import json
import math
from pathlib import Path

import numpy as np
import pytest

from qaoalab import cli, ensemble
from qaoalab.ensemble import (
    ConfigError,
    EnsembleConfig,
    instance_id,
    instance_seed,
    kl_divergence,
    load_rows,
    relative_spread,
    report_betas,
    report_scaling,
    run_convergence_experiment,
    run_ensemble,
    sample_bitstrings,
)
from qaoalab.optimizer import optimize_chain
from qaoalab.problems import energy_table, sample_qubo
from qaoalab.simulator import run_qaoa


def small_config(tmp_path, name="out", **kw):
    base = dict(n_list=[4], p_list=[1, 2], instances=2, base_seed=7, output_dir=str(tmp_path / name))
    base.update(kw)
    return EnsembleConfig(**base)


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    cfg = small_config(tmp_path_factory.mktemp("ens"))
    return cfg, run_ensemble(cfg)


class TestConfig:
    def test_round_trip(self, tmp_path):
        cfg = small_config(tmp_path, zeta_list=[1.0, 2.0])
        assert EnsembleConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    @pytest.mark.parametrize("bad", [dict(instances=0), dict(n_list=[1]), dict(p_list=[0]),
                                     dict(zeta_list=[-1.0]), dict(workers=0), dict(colour="red")])
    def test_invalid(self, bad):
        data = dict(n_list=[4], p_list=[1], instances=1)
        data.update(bad)
        with pytest.raises(ConfigError):
            EnsembleConfig.from_dict(data)

    def test_workers_env(self, monkeypatch):
        monkeypatch.setenv(ensemble.WORKERS_ENV, "3")
        assert ensemble.resolve_workers(1) == 3
        monkeypatch.setenv(ensemble.WORKERS_ENV, "zero")
        with pytest.raises(ConfigError):
            ensemble.resolve_workers(1)


class TestSeeds:
    def test_distinct(self):
        seeds = {instance_seed(0, n, i) for n in (4, 5) for i in range(50)}
        assert len(seeds) == 100

    def test_stable(self):
        assert instance_seed(3, 8, 2) == instance_seed(3, 8, 2)
        assert instance_id(8, 2, 3) == "n8-i0002-b3"


class TestRun:
    def test_single_row(self, tmp_path):
        rep = run_ensemble(small_config(tmp_path, p_list=[1], instances=1))
        assert len(rep.rows) == 1 and rep.failure_rate == 0.0
        row = rep.rows[0]
        assert tuple(row) == ensemble.ROW_KEYS
        assert row["n"] == 4 and row["p"] == 1 and row["zeta"] == 1.0

    def test_rows_agree_with_direct_chain(self, small_run):
        cfg, rep = small_run
        row = next(r for r in rep.rows if r["p"] == 2)
        t = energy_table(sample_qubo(4, row["seed"]))
        res = list(optimize_chain(t, 2, ensemble.with_seed(cfg.optimizer, row["seed"])))[-1]
        assert row["gamma"] == list(res.schedule.gamma) and row["value"] == res.value

    def test_byte_identical_repeat(self, small_run, tmp_path):
        cfg, _ = small_run
        run_ensemble(small_config(tmp_path))
        ref = (tmp_path / "out" / ensemble.ROWS_FILE).read_bytes()
        assert (Path(cfg.output_dir) / ensemble.ROWS_FILE).read_bytes() == ref

    def test_workers_invariance(self, small_run, tmp_path, monkeypatch):
        cfg, rep = small_run
        monkeypatch.setenv(ensemble.WORKERS_ENV, "2")
        par = run_ensemble(small_config(tmp_path))
        assert par.rows == rep.rows

    def test_resume_after_torn_write(self, small_run, tmp_path):
        _, rep = small_run
        cfg = small_config(tmp_path)
        run_ensemble(cfg)
        path = tmp_path / "out" / ensemble.ROWS_FILE
        full = path.read_bytes()
        lines = full.splitlines(keepends=True)
        # last block loses a row and gains half a line
        path.write_bytes(b"".join(lines[:-1]) + lines[-1][:10])
        resumed = run_ensemble(cfg)
        assert path.read_bytes() == full
        assert resumed.rows == rep.rows

    def test_resume_skips_done(self, tmp_path, monkeypatch):
        cfg = small_config(tmp_path)
        run_ensemble(cfg)

        def boom(*args):
            raise AssertionError("completed instance re-run")

        monkeypatch.setattr(ensemble, "process_instance", boom)
        assert len(run_ensemble(cfg).rows) == 4

    def test_config_mismatch(self, tmp_path):
        run_ensemble(small_config(tmp_path, p_list=[1], instances=1))
        with pytest.raises(ConfigError):
            run_ensemble(small_config(tmp_path, p_list=[1], instances=1, base_seed=8))

    def test_concurrent_run_refused(self, tmp_path):
        cfg = small_config(tmp_path, p_list=[1], instances=1)
        (tmp_path / "out").mkdir()
        with open(tmp_path / "out" / ensemble.LOCK_FILE, "w") as held:
            fcntl.flock(held, fcntl.LOCK_EX)
            with pytest.raises(ConfigError):
                run_ensemble(cfg)
        assert len(run_ensemble(cfg).rows) == 1

    def test_failures_recorded(self, tmp_path, monkeypatch):
        real = ensemble.process_instance

        def flaky(cfg, n, index):
            if index == 1:
                raise RuntimeError("synthetic")
            return real(cfg, n, index)

        monkeypatch.setattr(ensemble, "process_instance", flaky)
        rep = run_ensemble(small_config(tmp_path, p_list=[1]))
        assert len(rep.rows) == 1 and rep.failure_rate == 0.5
        assert "synthetic" in rep.failures[0]["error"]

    def test_zeta_rows(self, tmp_path):
        rep = run_ensemble(small_config(tmp_path, p_list=[2], instances=1, zeta_list=[1.0, 2.0]))
        by_zeta = {r["zeta"]: r for r in rep.rows}
        assert set(by_zeta) == {1.0, 2.0}
        np.testing.assert_allclose(by_zeta[2.0]["gamma"], np.array(by_zeta[1.0]["gamma"]) / 2.0, rtol=1e-15)
        assert by_zeta[2.0]["gamma_max"] == pytest.approx(by_zeta[1.0]["gamma_max"] / 2.0, rel=1e-14)

    def test_aggregate(self, small_run):
        _, rep = small_run
        cells = {(a["n"], a["p"]): a for a in rep.aggregates}
        assert set(cells) == {(4, 1), (4, 2)}
        vals = [r["beta_high"] for r in rep.rows if r["p"] == 1]
        assert cells[(4, 1)]["beta_high"]["mean"] == pytest.approx(np.mean(vals))
        assert cells[(4, 1)]["count"] == 2

    def test_load_rows_dir_or_file(self, small_run):
        cfg, rep = small_run
        assert load_rows(cfg.output_dir) == rep.rows
        assert load_rows(f"{cfg.output_dir}/{ensemble.ROWS_FILE}") == rep.rows


def synthetic_rows(ns=(8, 10, 12), ps=range(1, 11), c=0.7, a=3.0, per_cell=5):
    rows = []
    for n in ns:
        for p in ps:
            for i in range(per_cell):
                g = c * p / math.sqrt(n)
                rows.append({"instance_id": f"n{n}-{i}", "n": n, "p": p, "zeta": 1.0,
                             "gamma_max": g, "theta_max": 1.5,
                             "beta_high": a * g / n**1.5})
    return rows


class TestReports:
    def test_relative_spread(self):
        assert relative_spread([2.0, 2.0]) == 0.0
        assert relative_spread([1.0, 1.25]) == pytest.approx(0.25)
        with pytest.raises(ValueError):
            relative_spread([0.0, 1.0])

    def test_resources_collapse_exactly(self):
        rep = report_scaling(synthetic_rows())
        for s in rep["resource_spread"]:
            assert s["gamma_max_sqrt_n_spread"] < 1e-12 and s["theta_max_spread"] < 1e-12
        fit = rep["resource_fits"]["10"]["gamma_max_sqrt_n"]
        assert fit["slope"] == pytest.approx(0.7, abs=1e-12) and fit["r2"] == pytest.approx(1.0)

    def test_beta_slope(self):
        rep = report_scaling(synthetic_rows())
        for n in (8, 10, 12):
            assert rep["beta_fits"][str(n)]["vs_gamma_max"]["slope"] == pytest.approx(3.0 / n**1.5, abs=1e-12)
        assert max(b["spread"] for b in rep["collapse_band"]) < 1e-12

    def test_needs_two_sizes(self):
        with pytest.raises(ValueError):
            report_scaling(synthetic_rows(ns=(8,)))

    def test_report_betas(self):
        rep = report_betas([{**r, "beta_low": 0.0, "p_low": 0.0, "ground_overlap": 0.5, "value": 0.0}
                            for r in synthetic_rows(ns=(8,))])
        assert rep["beta_high_vs_p"]["8"]["slope"] == pytest.approx(3.0 * 0.7 / 8**2, abs=1e-12)


@pytest.fixture(scope="module")
def setup():
    t = energy_table(sample_qubo(5, 12))
    chain = {r.schedule.p: r.schedule for r in optimize_chain(t, 8)}
    return t, chain


class TestConvergence:
    def test_k_equal_m_is_native(self, setup):
        t, chain = setup
        out = run_convergence_experiment(t, chain, 4, [4, 8])
        first = out["rescaled"][0]
        assert first["k"] == 4
        assert first["zeta_gamma"] == pytest.approx(1.0, abs=1e-15)
        assert first["zeta_theta"] == pytest.approx(1.0, abs=1e-15)
        assert first["fit"]["beta_high"] == pytest.approx(out["native"]["beta_high"], rel=1e-12)

    def test_resources_matched(self, setup):
        t, chain = setup
        out = run_convergence_experiment(t, chain, 4, [6, 8])
        for r in out["rescaled"]:
            assert r["kl_qa"] >= 0.0
        assert abs(out["qa"]["final_norm"] - 1.0) < 1e-8

    def test_missing(self, setup):
        t, chain = setup
        with pytest.raises(KeyError):
            run_convergence_experiment(t, chain, 4, [9])

    def test_kl(self):
        p = np.array([0.5, 0.5, 0.0])
        assert kl_divergence(p, p) == 0.0
        assert kl_divergence(p, np.array([0.25, 0.25, 0.5])) == pytest.approx(math.log(2.0))


class TestSampling:
    def test_frequencies(self):
        t = energy_table(sample_qubo(4, 3))
        res = list(optimize_chain(t, 3))[-1]
        state = run_qaoa(t, res.schedule)
        shots = 10**6
        draws = sample_bitstrings(state, shots, seed=5)
        counts = np.bincount([int(s, 2) for s in draws], minlength=16)
        p = state.probabilities
        sigma = np.sqrt(shots * p * (1 - p))
        assert np.all(np.abs(counts - shots * p) <= 4 * sigma + 1e-9)
        ground = counts[t.ground_states()].sum() / shots
        assert ground == pytest.approx(res.ground_overlap, abs=4 * math.sqrt(0.25 / shots))

    def test_deterministic(self):
        probs = np.full(8, 1 / 8)
        assert sample_bitstrings(probs, 50, 1) == sample_bitstrings(probs, 50, 1)
        assert sample_bitstrings(probs, 50, 1) != sample_bitstrings(probs, 50, 2)

    def test_basis_state(self):
        probs = np.zeros(8)
        probs[6] = 1.0
        assert set(sample_bitstrings(probs, 20, 0)) == {"110"}

    def test_invalid(self):
        with pytest.raises(ValueError):
            sample_bitstrings(np.full(6, 1 / 6), 5, 0, n=3)
        with pytest.raises(ValueError):
            sample_bitstrings(np.full(8, 1 / 8), 0, 0)


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert cli.main(["gen", "--n", "5", "--seed", "4", "--out", str(d / "inst.json")]) == 0
    return d


class TestCli:
    def run(self, capsys, *argv):
        code = cli.main(list(argv))
        return code, capsys.readouterr().out

    def test_optimize_fit_sample(self, files, capsys):
        code, out = self.run(capsys, "optimize", "--instance", str(files / "inst.json"), "--p", "3")
        assert code == 0
        res = json.loads(out)
        assert len(res["gamma"]) == 3 and "instance" in res
        (files / "r.json").write_text(out)
        code, out = self.run(capsys, "fit", "--result", str(files / "r.json"))
        assert code == 0 and json.loads(out)["p"] == 3
        code, out = self.run(capsys, "sample", "--result", str(files / "r.json"), "--shots", "7", "--seed", "1")
        lines = out.split()
        assert code == 0 and len(lines) == 7 and all(len(s) == 5 for s in lines)

    def test_trajectory_and_anneal(self, files, capsys):
        _, out = self.run(capsys, "optimize", "--instance", str(files / "inst.json"), "--p", "5")
        (files / "r5.json").write_text(out)
        code, out = self.run(capsys, "trajectory", "--results", str(files / "r5.json"))
        assert code == 0 and len(out.strip().splitlines()) == 6 + 1
        code, out = self.run(capsys, "trajectory", "--results", str(files / "r5.json"), "--fit-circle")
        assert code == 0 and json.loads(out)[0]["p"] == 5
        code, out = self.run(capsys, "anneal", "--schedule", str(files / "r5.json"), "--integrator", "trotter")
        man = json.loads(out)
        assert code == 0 and man["integrator"] == "trotter" and "fit" in man

    def test_ensemble_and_report(self, tmp_path, capsys):
        cfg = {"n_list": [4, 5], "p_list": [4, 5, 6], "instances": 1, "output_dir": str(tmp_path / "o")}
        (tmp_path / "c.json").write_text(json.dumps(cfg))
        code, out = self.run(capsys, "ensemble", "--config", str(tmp_path / "c.json"))
        assert code == 0 and json.loads(out)["rows"] == 6
        for kind in ("betas", "resources", "collapse"):
            code, out = self.run(capsys, "report", "--rows", str(tmp_path / "o"), "--kind", kind)
            assert code == 0 and json.loads(out)
        code, out = self.run(capsys, "report", "--rows", str(tmp_path / "o"), "--kind", "convergence")
        assert code == 0 and json.loads(out)["m"] == 5

    def test_exit_codes(self, tmp_path, capsys, monkeypatch):
        (tmp_path / "bad.json").write_text(json.dumps({"n_list": [4], "p_list": [1], "instances": 0}))
        assert cli.main(["ensemble", "--config", str(tmp_path / "bad.json")]) == 2
        assert cli.main(["fit", "--result", str(tmp_path / "missing.json")]) == 2
        monkeypatch.setattr(ensemble, "process_instance", lambda *a: 1 / 0)
        (tmp_path / "c.json").write_text(json.dumps({"n_list": [4], "p_list": [1], "instances": 2,
                                                     "output_dir": str(tmp_path / "o")}))
        assert cli.main(["ensemble", "--config", str(tmp_path / "c.json")]) == 1
        capsys.readouterr()
