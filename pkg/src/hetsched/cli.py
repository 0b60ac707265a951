"""Command-line front end: trace generation, one-shot policy solves,
simulation sweeps, and throughput estimation.

Exit codes: 0 success, 2 usage error, 3 infeasible model, 4 I/O error.
All emitted files are listed (with content hashes) in a run manifest;
metrics files contain only simulated quantities so identical seeds produce
byte-identical output.
"""

from __future__ import annotations

import csv
import hashlib
import json
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import __version__
from .cluster import ClusterSpec, make_cluster
from .estimator import CompletionError, ReferenceSet, fingerprint_and_match
from .jobs import Job
from .matrices import ThroughputMatrix, effective_throughput
from . import policies
from .mechanism import write_round_log
from .policies import (InfeasibleSloError, PolicyError, PolicyInfeasibleError,
                       parse_policy, solve_policy)
from .simulator import EstimatorConfig, SimConfig, Simulation
from .traces import Trace, generate_trace, load_catalog

EXIT_USAGE = 2
EXIT_INFEASIBLE = 3
EXIT_IO = 4

DEFAULT_COSTS = {"V100": 3.0, "P100": 1.5, "K80": 0.5}
DEFAULT_SERVERS = {"V100": 4, "P100": 4, "K80": 8}
# Simulated-scale default and the smaller physical-scale preset (which pairs
# with a 20-minute round).
CLUSTER_PRESETS = {
    "simulated": ({"V100": 36, "P100": 36, "K80": 36}, 360.0),
    "physical": ({"V100": 8, "P100": 16, "K80": 24}, 1200.0),
}
DEFAULT_CLUSTER = CLUSTER_PRESETS["simulated"][0]


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


class Manifest:
    def __init__(self, out_dir: Path, command: str, config: dict, seeds):
        self.out_dir = out_dir
        self.doc = {"tool": "hetsched", "version": __version__,
                    "command": command, "config": config,
                    "seeds": list(seeds), "inputs": {}, "outputs": {},
                    "timings_seconds": {}}

    def add_input(self, label: str, path):
        self.doc["inputs"][label] = {"path": str(path), "sha256": _sha256(Path(path))}

    def add_output(self, path: Path):
        self.doc["outputs"][path.name] = _sha256(path)

    def add_timing(self, label: str, seconds: float):
        self.doc["timings_seconds"][label] = seconds

    def write(self) -> Path:
        path = self.out_dir / "manifest.json"
        with open(path, "w") as f:
            json.dump(self.doc, f, indent=2, sort_keys=True)
            f.write("\n")
        return path


def _dump_json(path: Path, doc: dict):
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def _load_cluster(cluster_file, preset_counts=None) -> ClusterSpec:
    if cluster_file is None:
        return make_cluster(preset_counts or DEFAULT_CLUSTER,
                            costs=DEFAULT_COSTS,
                            workers_per_server=DEFAULT_SERVERS)
    try:
        with open(cluster_file) as f:
            return ClusterSpec.from_json(json.load(f))
    except OSError as e:
        raise click.ClickException(f"cannot read cluster file: {e}") from e


@click.group()
@click.option("--seed", default=0, show_default=True, help="Base RNG seed.")
@click.option("--round-duration", default=None, type=float,
              help="Scheduling round length in seconds (default: preset's).")
@click.option("--cluster", "cluster_file", type=click.Path(), default=None,
              help="Cluster spec JSON (overrides --preset).")
@click.option("--preset", type=click.Choice(sorted(CLUSTER_PRESETS)),
              default="simulated", show_default=True,
              help="Named cluster size / round-duration preset.")
@click.option("--out", "out_dir", type=click.Path(), default="out",
              show_default=True, help="Output directory.")
@click.option("--dump-lp", is_flag=True, help="Print built LPs before solving.")
@click.pass_context
def main(ctx, seed, round_duration, cluster_file, preset, out_dir, dump_lp):
    """Heterogeneity-aware cluster scheduling toolkit."""
    ctx.ensure_object(dict)
    preset_counts, preset_round = CLUSTER_PRESETS[preset]
    ctx.obj.update(seed=seed,
                   round_duration=round_duration if round_duration is not None
                   else preset_round,
                   cluster_file=cluster_file, preset_counts=preset_counts,
                   out_dir=Path(out_dir), dump_lp=dump_lp)
    if dump_lp:
        policies.lp_debug_sink = lambda text: click.echo(text, err=True)


@main.command("generate-trace")
@click.option("--mode", type=click.Choice(["static", "continuous"]), required=True)
@click.option("--jobs", "num_jobs", type=int, required=True)
@click.option("--lambda", "lambda_rate", type=float, default=None,
              help="Poisson arrival rate, jobs/second (continuous mode).")
@click.option("--single-worker", is_flag=True, help="Force scale factor 1.")
@click.option("--max-scale-factor", type=int, default=None)
@click.option("--duration-mean-minutes", type=float, default=10 ** 2.5,
              show_default=True)
@click.option("--slo-factors", default=None,
              help="Comma-separated SLO multiples of job duration, e.g. 1.2,2,10.")
@click.option("--entities", "num_entities", type=int, default=0)
@click.option("--entity-policy", default="fair", show_default=True,
              help="Internal entity policies, slash-separated (fair/fifo).")
@click.option("--catalog", "catalog_file", type=click.Path(), default=None,
              help="Template catalog JSON (defaults to the shipped catalog).")
@click.pass_context
def cmd_generate_trace(ctx, mode, num_jobs, lambda_rate, single_worker,
                       max_scale_factor, duration_mean_minutes, slo_factors,
                       num_entities, entity_policy, catalog_file):
    """Write a workload trace as JSON lines."""
    if mode == "static" and lambda_rate is not None:
        raise click.UsageError("--lambda only applies to continuous traces")
    if mode == "continuous" and lambda_rate is None:
        raise click.UsageError("continuous traces need --lambda")
    templates = load_catalog(catalog_file)
    factors = tuple(float(x) for x in slo_factors.split(",")) if slo_factors else None
    trace = generate_trace(mode, num_jobs, templates, seed=ctx.obj["seed"],
                           lambda_rate=lambda_rate, single_worker=single_worker,
                           max_scale_factor=max_scale_factor,
                           slo_factors=factors, num_entities=num_entities,
                           entity_policy=entity_policy,
                           duration_mean_minutes=duration_mean_minutes)
    out_dir = ctx.obj["out_dir"]
    out_dir.mkdir(parents=True, exist_ok=True)
    trace_path = out_dir / "trace.jsonl"
    trace.save(trace_path)
    manifest = Manifest(out_dir, "generate-trace",
                        {"mode": mode, "jobs": num_jobs, "lambda": lambda_rate,
                         "single_worker": single_worker,
                         "duration_mean_minutes": duration_mean_minutes},
                        [ctx.obj["seed"]])
    if catalog_file:
        manifest.add_input("catalog", catalog_file)
    manifest.add_output(trace_path)
    manifest.write()
    click.echo(f"wrote {trace_path} ({num_jobs} jobs)")


@main.command("solve")
@click.option("--policy", "policy_text", required=True,
              help='Policy string, e.g. "las", "las+ss", "makespan", "hier:fair+wf".')
@click.option("--throughputs", "thr_file", type=click.Path(), required=True,
              help="Throughput matrix JSON.")
@click.option("--jobs", "jobs_file", type=click.Path(), required=True,
              help="Job list JSON.")
@click.pass_context
def cmd_solve(ctx, policy_text, thr_file, jobs_file):
    """Solve a policy once and print the allocation."""
    try:
        spec = parse_policy(policy_text)
    except ValueError as e:
        raise click.UsageError(str(e))
    try:
        T = ThroughputMatrix.load(thr_file)
        with open(jobs_file) as f:
            jobs_doc = json.load(f)
    except OSError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_IO)
    # The jobs file is either a bare list of jobs or, for hierarchical
    # policies, {"jobs": [...], "entities": [{"id", "weight", "policy"}...]}.
    entities = None
    if isinstance(jobs_doc, dict):
        job_docs = jobs_doc["jobs"]
        from .jobs import Entity, EntityPolicy
        entities = [Entity(int(d["id"]), float(d.get("weight", 1.0)),
                           EntityPolicy(d.get("policy", "fairness")))
                    for d in jobs_doc.get("entities", [])] or None
    else:
        job_docs = jobs_doc
    jobs = [Job(id=int(d["id"]), name=d.get("name", ""),
                num_steps=int(d.get("num_steps", 1)),
                steps_done=float(d.get("steps_done", 0.0)),
                scale_factor=int(d.get("scale_factor", 1)),
                weight=float(d.get("weight", 1.0)),
                entity_id=d.get("entity_id"),
                slo_seconds=d.get("slo_seconds"),
                arrival_time=float(d.get("arrival_time", 0.0)),
                elapsed_time=float(d.get("elapsed_time", 0.0)),
                isolated_elapsed_time=float(d.get("isolated_elapsed_time", 0.0)))
            for d in job_docs]
    t0 = time.perf_counter()
    try:
        result = solve_policy(spec, jobs, T.cluster, T, entities=entities)
    except InfeasibleSloError as e:
        click.echo(f"infeasible SLOs for jobs: {e.job_ids}", err=True)
        sys.exit(EXIT_INFEASIBLE)
    except (PolicyInfeasibleError, PolicyError) as e:
        click.echo(f"infeasible: {e}", err=True)
        sys.exit(EXIT_INFEASIBLE)
    solve_s = time.perf_counter() - t0

    X = result.allocation
    per_job = {str(j.id): effective_throughput(j.id, X, X.T) for j in jobs}
    doc = {"policy": spec.label(), "objective": result.objective,
           "allocation": X.to_json(), "effective_throughputs": per_job,
           "violations": result.violations}
    out_dir = ctx.obj["out_dir"]
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "allocation.json"
    _dump_json(path, doc)
    manifest = Manifest(out_dir, "solve", {"policy": policy_text}, [ctx.obj["seed"]])
    manifest.add_input("throughputs", thr_file)
    manifest.add_input("jobs", jobs_file)
    manifest.add_output(path)
    manifest.add_timing("solve", solve_s)
    manifest.write()
    click.echo(json.dumps(doc, indent=2, sort_keys=True))


def _metrics_rows(report):
    rows = []
    for r in report.records:
        rows.append({
            "job_id": r.job_id, "template": r.template,
            "arrival_s": f"{r.arrival:.3f}", "completion_s": f"{r.completion:.3f}",
            "jct_s": f"{r.jct:.3f}", "num_steps": r.num_steps,
            "scale_factor": r.scale_factor,
            "slo_s": "" if r.slo_seconds is None else f"{r.slo_seconds:.3f}",
            "slo_violated": int(r.slo_violated),
            "ftf_rho": f"{r.ftf_rho:.6f}",
        })
    return rows


@main.command("simulate")
@click.option("--policy", "policy_text", required=True)
@click.option("--trace", "trace_file", type=click.Path(), default=None)
@click.option("--jobs", "num_jobs", type=int, default=None,
              help="Generate traces of this size instead of reading --trace.")
@click.option("--lambda", "lambdas", default=None,
              help="Comma-separated arrival rates (jobs/s) to sweep.")
@click.option("--mode", type=click.Choice(["static", "continuous"]),
              default="continuous", show_default=True)
@click.option("--seeds", default=None, help="Comma-separated seed list.")
@click.option("--baseline", type=click.Choice(["agnostic"]), default=None,
              help="Also run the heterogeneity-agnostic baseline.")
@click.option("--recompute-every", type=int, default=None,
              help="Re-solve every K rounds instead of on reset events.")
@click.option("--catalog", "catalog_file", type=click.Path(), default=None)
@click.option("--references", type=int, default=0,
              help="Use the throughput estimator with this many reference templates.")
@click.option("--profile-fraction", type=float, default=0.2, show_default=True)
@click.option("--round-log", is_flag=True, help="Write per-round JSONL logs.")
@click.pass_context
def cmd_simulate(ctx, policy_text, trace_file, num_jobs, lambdas, mode, seeds,
                 baseline, recompute_every, catalog_file, references,
                 profile_fraction, round_log):
    """Run the simulator across seeds (and optionally a lambda sweep)."""
    try:
        spec = parse_policy(policy_text)
    except ValueError as e:
        raise click.UsageError(str(e))
    if trace_file is None and num_jobs is None:
        raise click.UsageError("need --trace or --jobs")
    seed_list = [int(s) for s in seeds.split(",")] if seeds else [ctx.obj["seed"]]
    lambda_list = [float(x) for x in lambdas.split(",")] if lambdas else [None]
    if trace_file is not None and lambdas:
        raise click.UsageError("--lambda sweeps generate traces; drop --trace")
    templates = load_catalog(catalog_file)
    cluster = _load_cluster(ctx.obj["cluster_file"], ctx.obj["preset_counts"])
    out_dir = ctx.obj["out_dir"]
    out_dir.mkdir(parents=True, exist_ok=True)

    estimator = None
    if references:
        estimator = EstimatorConfig(
            reference_names=[t.name for t in templates[:references]],
            profile_fraction=profile_fraction)

    manifest = Manifest(out_dir, "simulate",
                        {"policy": policy_text, "baseline": baseline,
                         "mode": mode, "jobs": num_jobs, "lambdas": lambda_list,
                         "recompute_every": recompute_every,
                         "references": references},
                        seed_list)
    if trace_file:
        manifest.add_input("trace", trace_file)
    if catalog_file:
        manifest.add_input("catalog", catalog_file)

    variants = [("aware", False)] + ([("agnostic", True)] if baseline else [])
    summary_rows = []
    for lam in lambda_list:
        for label, agnostic in variants:
            per_seed = []
            for seed in seed_list:
                if trace_file:
                    trace = Trace.load(trace_file)
                else:
                    trace = generate_trace(mode, num_jobs, templates, seed=seed,
                                           lambda_rate=lam)
                cfg = SimConfig(cluster=cluster, policy=spec,
                                round_duration=ctx.obj["round_duration"],
                                recompute_every=recompute_every,
                                agnostic=agnostic, estimator=estimator,
                                seed=seed, collect_round_log=round_log)
                sim = Simulation(cfg, trace, templates)
                t0 = time.perf_counter()
                report = sim.run()
                wall = time.perf_counter() - t0
                tag = f"{label}_seed{seed}" + (f"_lam{lam:g}" if lam else "")
                csv_path = out_dir / f"metrics_{tag}.csv"
                rows = _metrics_rows(report)
                with open(csv_path, "w", newline="") as f:
                    writer = csv.DictWriter(f, fieldnames=list(rows[0].keys())
                                            if rows else ["job_id"])
                    writer.writeheader()
                    writer.writerows(rows)
                manifest.add_output(csv_path)
                manifest.add_timing(tag, wall)
                manifest.add_timing(f"{tag}_policy_solves", report.solve_seconds)
                if round_log:
                    log_path = out_dir / f"rounds_{tag}.jsonl"
                    write_round_log(log_path, sim.round_log)
                    manifest.add_output(log_path)
                per_seed.append(report)
            jcts = [r.avg_steady_jct for r in per_seed]
            summary_rows.append({
                "variant": label,
                "lambda": lam if lam is not None else "",
                "seeds": len(seed_list),
                "mean_steady_jct_s": float(np.mean(jcts)),
                "stddev_steady_jct_s": float(np.std(jcts)),
                "mean_jct_s": float(np.mean([r.avg_jct for r in per_seed])),
                "mean_makespan_s": float(np.mean([r.makespan for r in per_seed])),
                "mean_cost_dollars": float(np.mean([r.total_cost for r in per_seed])),
                "mean_utilization": float(np.mean([r.utilization for r in per_seed])),
                "slo_violation_fraction": float(np.mean(
                    [r.slo_violation_fraction for r in per_seed])),
            })
    summary_path = out_dir / "summary.json"
    _dump_json(summary_path, {"rows": summary_rows,
                              "steady_state_window": 0.10})
    manifest.add_output(summary_path)
    manifest.write()
    click.echo(json.dumps(summary_rows, indent=2, sort_keys=True))


@main.command("estimate")
@click.option("--references", "refs_file", type=click.Path(), required=True,
              help="Reference set: a throughput-matrix JSON with pair rows "
                   "(reference: true) or {names, matrix}.")
@click.option("--measurements", "meas_file", type=click.Path(), required=True,
              help="Partial measurement rows: {name: {ref_name: value, ...}}.")
@click.option("--rank", default=3, show_default=True)
@click.option("--reg", default=1e-2, show_default=True)
@click.option("--iters", default=50, show_default=True)
@click.pass_context
def cmd_estimate(ctx, refs_file, meas_file, rank, reg, iters):
    """Complete partial colocation measurements and match reference jobs."""
    try:
        with open(refs_file) as f:
            refs_doc = json.load(f)
        with open(meas_file) as f:
            meas_doc = json.load(f)
    except OSError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_IO)
    if "rows" in refs_doc:
        refs = ReferenceSet.from_throughputs(ThroughputMatrix.from_json(refs_doc))
        names = refs.names
    else:
        names = refs_doc["names"]
        refs = ReferenceSet(names, np.array(refs_doc["matrix"], dtype=float))
    out = {"hyperparameters": {"rank": rank, "reg": reg, "iters": iters,
                               "seed": ctx.obj["seed"]},
           "matches": {}, "completed_rows": {}}
    for name, row_doc in sorted(meas_doc.items()):
        vec = np.zeros(refs.size)
        mask = np.zeros(refs.size, dtype=bool)
        for ref_name, value in row_doc.items():
            k = names.index(ref_name)
            vec[k] = float(value)
            mask[k] = True
        try:
            match, fingerprint = fingerprint_and_match(
                vec, mask, refs, rank=rank, reg=reg, iters=iters,
                seed=ctx.obj["seed"])
        except CompletionError as e:
            click.echo(f"error: {name}: {e}", err=True)
            sys.exit(EXIT_INFEASIBLE)
        out["matches"][name] = names[match]
        out["completed_rows"][name] = [round(v, 6) for v in fingerprint]
    out_dir = ctx.obj["out_dir"]
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "estimates.json"
    _dump_json(path, out)
    manifest = Manifest(out_dir, "estimate",
                        {"rank": rank, "reg": reg, "iters": iters},
                        [ctx.obj["seed"]])
    manifest.add_input("references", refs_file)
    manifest.add_input("measurements", meas_file)
    manifest.add_output(path)
    manifest.write()
    click.echo(json.dumps(out["matches"], indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
