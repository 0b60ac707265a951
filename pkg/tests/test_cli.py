import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from hetsched.cli import main
from hetsched.cluster import make_cluster
from hetsched.jobs import Job, JobCombination
from hetsched.matrices import AllocationMatrix, ThroughputMatrix


@pytest.fixture
def runner():
    return CliRunner()


def write_three_job_instance(tmp_path):
    cluster = make_cluster({"V100": 1, "K80": 1})
    rows = [JobCombination.of(i) for i in range(3)]
    T = ThroughputMatrix(cluster, rows,
                         [[(4.0,), (1.0,)], [(3.0,), (1.0,)], [(2.0,), (1.0,)]])
    thr = tmp_path / "thr.json"
    T.save(thr)
    jobs = tmp_path / "jobs.json"
    jobs.write_text(json.dumps([{"id": i, "num_steps": 1000} for i in range(3)]))
    return thr, jobs


class TestGenerateTrace:
    def test_static(self, runner, tmp_path):
        res = runner.invoke(main, ["--out", str(tmp_path), "generate-trace",
                                   "--mode", "static", "--jobs", "100",
                                   "--seed" if False else "--duration-mean-minutes", "60"])
        assert res.exit_code == 0, res.output
        lines = (tmp_path / "trace.jsonl").read_text().splitlines()
        assert len(lines) == 101  # header + jobs
        for line in lines[1:]:
            assert json.loads(line)["arrival_time"] == 0.0

    def test_continuous_poisson(self, runner, tmp_path):
        res = runner.invoke(main, ["--seed", "1", "--out", str(tmp_path),
                                   "generate-trace", "--mode", "continuous",
                                   "--jobs", "1000", "--lambda", "0.1"])
        assert res.exit_code == 0, res.output
        lines = (tmp_path / "trace.jsonl").read_text().splitlines()[1:]
        arrivals = [json.loads(x)["arrival_time"] for x in lines]
        gaps = np.diff([0.0] + arrivals)
        assert np.mean(gaps) == pytest.approx(10.0, rel=0.1)

    def test_static_with_lambda_is_usage_error(self, runner, tmp_path):
        res = runner.invoke(main, ["--out", str(tmp_path), "generate-trace",
                                   "--mode", "static", "--jobs", "10",
                                   "--lambda", "0.1"])
        assert res.exit_code == 2

    def test_missing_jobs_is_usage_error(self, runner, tmp_path):
        res = runner.invoke(main, ["--out", str(tmp_path), "generate-trace",
                                   "--mode", "static"])
        assert res.exit_code == 2


class TestSolve:
    def test_three_job_worked_example(self, runner, tmp_path):
        thr, jobs = write_three_job_instance(tmp_path)
        res = runner.invoke(main, ["--out", str(tmp_path), "solve",
                                   "--policy", "las", "--throughputs", str(thr),
                                   "--jobs", str(jobs)])
        assert res.exit_code == 0, res.output
        doc = json.loads((tmp_path / "allocation.json").read_text())
        assert doc["objective"] == pytest.approx(8 / 11, abs=0.01)
        # Allocation round-trips through validation.
        T = ThroughputMatrix.load(thr)
        vals = np.zeros((3, 2))
        for r, row in enumerate(doc["allocation"]["rows"]):
            for c, cfg in enumerate(T.configs):
                vals[r, c] = row["fractions"][cfg.key(T.cluster)]
        X = AllocationMatrix(T, vals)
        X.validate({i: Job(id=i) for i in range(3)})

    def test_makespan_single_job(self, runner, tmp_path):
        cluster = make_cluster({"gpu": 1})
        T = ThroughputMatrix(cluster, [JobCombination.of(0)], [[(1.0,)]])
        thr = tmp_path / "thr.json"
        T.save(thr)
        jobs = tmp_path / "jobs.json"
        jobs.write_text(json.dumps([{"id": 0, "num_steps": 100}]))
        res = runner.invoke(main, ["--out", str(tmp_path), "solve",
                                   "--policy", "makespan",
                                   "--throughputs", str(thr), "--jobs", str(jobs)])
        assert res.exit_code == 0, res.output
        doc = json.loads((tmp_path / "allocation.json").read_text())
        assert doc["objective"] == pytest.approx(100.0, abs=0.2)

    def test_impossible_slo_exit_code(self, runner, tmp_path):
        cluster = make_cluster({"gpu": 1}, costs={"gpu": 1.0})
        T = ThroughputMatrix(cluster, [JobCombination.of(0)], [[(1.0,)]])
        thr = tmp_path / "thr.json"
        T.save(thr)
        jobs = tmp_path / "jobs.json"
        jobs.write_text(json.dumps([{"id": 0, "num_steps": 10_000,
                                     "slo_seconds": 10.0}]))
        res = runner.invoke(main, ["--out", str(tmp_path), "solve",
                                   "--policy", "cost_slo",
                                   "--throughputs", str(thr), "--jobs", str(jobs)])
        assert res.exit_code == 3
        assert "0" in res.output

    def test_missing_file_exit_code(self, runner, tmp_path):
        res = runner.invoke(main, ["--out", str(tmp_path), "solve",
                                   "--policy", "las",
                                   "--throughputs", str(tmp_path / "nope.json"),
                                   "--jobs", str(tmp_path / "nope2.json")])
        assert res.exit_code == 4

    def test_dump_lp_flag(self, runner, tmp_path):
        thr, jobs = write_three_job_instance(tmp_path)
        res = runner.invoke(main, ["--out", str(tmp_path), "--dump-lp", "solve",
                                   "--policy", "las", "--throughputs", str(thr),
                                   "--jobs", str(jobs)])
        assert res.exit_code == 0
        assert "maximize" in res.output


class TestSimulate:
    def test_summary_has_mean_and_stddev(self, runner, tmp_path):
        res = runner.invoke(main, ["--out", str(tmp_path), "simulate",
                                   "--policy", "las", "--jobs", "8",
                                   "--lambda", "0.002", "--seeds", "1,2,3"])
        assert res.exit_code == 0, res.output
        doc = json.loads((tmp_path / "summary.json").read_text())
        row = doc["rows"][0]
        assert "mean_steady_jct_s" in row and "stddev_steady_jct_s" in row
        assert row["seeds"] == 3

    def test_baseline_flag_adds_rows(self, runner, tmp_path):
        res = runner.invoke(main, ["--out", str(tmp_path), "simulate",
                                   "--policy", "las", "--jobs", "6",
                                   "--lambda", "0.002", "--seeds", "1",
                                   "--baseline", "agnostic"])
        assert res.exit_code == 0, res.output
        doc = json.loads((tmp_path / "summary.json").read_text())
        assert {r["variant"] for r in doc["rows"]} == {"aware", "agnostic"}

    def test_lambda_sweep_rows(self, runner, tmp_path):
        res = runner.invoke(main, ["--out", str(tmp_path), "simulate",
                                   "--policy", "las", "--jobs", "5",
                                   "--lambda", "0.002,0.004", "--seeds", "1"])
        assert res.exit_code == 0, res.output
        doc = json.loads((tmp_path / "summary.json").read_text())
        assert [r["lambda"] for r in doc["rows"]] == [0.002, 0.004]

    def test_manifest_hashes_verify(self, runner, tmp_path):
        res = runner.invoke(main, ["--out", str(tmp_path), "simulate",
                                   "--policy", "las", "--jobs", "5",
                                   "--lambda", "0.002", "--seeds", "1"])
        assert res.exit_code == 0, res.output
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["outputs"]
        for name, digest in manifest["outputs"].items():
            actual = hashlib.sha256((tmp_path / name).read_bytes()).hexdigest()
            assert actual == digest, name

    def test_identical_seeds_byte_identical_metrics(self, runner, tmp_path):
        args = ["simulate", "--policy", "las", "--jobs", "6",
                "--lambda", "0.003", "--seeds", "7"]
        res1 = runner.invoke(main, ["--out", str(tmp_path / "a")] + args)
        res2 = runner.invoke(main, ["--out", str(tmp_path / "b")] + args)
        assert res1.exit_code == 0 and res2.exit_code == 0
        for name in ("metrics_aware_seed7_lam0.003.csv", "summary.json"):
            assert (tmp_path / "a" / name).read_bytes() == \
                (tmp_path / "b" / name).read_bytes()


class TestEstimate:
    def test_self_match_and_round_trip(self, runner, tmp_path):
        rng = np.random.default_rng(0)
        a = rng.uniform(0.1, 0.9, size=6)
        b = rng.uniform(0.1, 0.9, size=6)
        R = np.clip(1 - np.outer(a, b), 0.05, 1.0)
        names = [f"ref-{i}" for i in range(6)]
        refs = tmp_path / "refs.json"
        refs.write_text(json.dumps({"names": names, "matrix": R.tolist()}))
        meas = tmp_path / "meas.json"
        meas.write_text(json.dumps({
            "newjob": {names[0]: R[2][0], names[3]: R[2][3], names[5]: R[2][5]}}))
        res = runner.invoke(main, ["--out", str(tmp_path), "estimate",
                                   "--references", str(refs),
                                   "--measurements", str(meas)])
        assert res.exit_code == 0, res.output
        doc = json.loads((tmp_path / "estimates.json").read_text())
        assert doc["matches"]["newjob"] == "ref-2"
        assert doc["hyperparameters"]["rank"] == 3

    def test_under_observed_row_errors(self, runner, tmp_path):
        names = ["r0", "r1", "r2"]
        refs = tmp_path / "refs.json"
        refs.write_text(json.dumps({"names": names,
                                    "matrix": np.eye(3).tolist()}))
        meas = tmp_path / "meas.json"
        meas.write_text(json.dumps({"newjob": {"r0": 0.5}}))
        res = runner.invoke(main, ["--out", str(tmp_path), "estimate",
                                   "--references", str(refs),
                                   "--measurements", str(meas)])
        assert res.exit_code == 3
