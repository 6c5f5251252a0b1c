import dataclasses
import logging
import os
import platform
import sys
import time
from pathlib import Path

# one BLAS worker for the whole run; the thread count is read once, when numpy loads
BLAS_THREAD_VARIABLES = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")
for _name in BLAS_THREAD_VARIABLES:
    os.environ.setdefault(_name, "1")

import click
import numpy as np
import wtforms

from adapters import (SPECTRAL_KINDS, AdapterKind, available_budgets, budget_table,
                      init_adapter, merge)
from benchmark import SIZE_CAP, BenchRow, bench_svd
from containers import (SCHEMA_VERSION, read_adapter, read_manifest, read_matrix, write_adapter, write_csv,
                        write_decomposition, write_json, write_manifest, write_matrix)
from errors import FormatError, NumericalError, PreconditionError, ShapeError, SpectralError, TrainingDiverged
from experiments import (experiment_rank_recovery, experiment_subspace_alignment, loss_compare)
from forms import (FusionPlanForm, LossCompareExperimentForm, RankRecoveryExperimentForm,
                   SubspaceExperimentForm, TrainConfigForm, load_document, validate_document)
from fusion import (FusionEntry, FusionPlan, column_overlaps, fedavg_merge,
                    fusion_objective, gradient_fusion, identity_preservation_report, spectral_fuse)
from linalg import ColumnSelect, fingerprint, reconstruct, svd_thin
from rank_capacity import rank_capacity_empirical
from training import AdapterObjective, LinearRegressionTask, grad_check, train

VERSION = "0.1.0"
KINDS = [k.value for k in AdapterKind]

logger = logging.getLogger("app")


@dataclasses.dataclass(frozen=True)
class RunContext:
    seed: int
    out_dir: Path
    tol: float


def versions():
    return {"spectral-adapters": VERSION, "python": platform.python_version(),
            "numpy": np.__version__, "click": click.__version__, "wtforms": wtforms.__version__}


def _finish(ctx, artifacts, measurements=None):
    """Write manifest.json for the command that owns `ctx`."""

    run = ctx.obj
    settings = {"seed": run.seed, "tol": run.tol}
    write_manifest(run.out_dir, ctx.command.name, dict(ctx.params), artifacts, versions(),
                   settings=settings, measurements=measurements)


def _needs_decomposition(kind):
    return kind in SPECTRAL_KINDS or kind is AdapterKind.SVDIFF


###################################################################
# ERROR HANDLING


class SpectralGroup(click.Group):
    """Maps library errors onto exit codes: 3 for bad input, 4 for numerical failure."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except SpectralError as exc:
            click.echo(f"error: {exc}", err=True)
            ctx.exit(exc.exit_code)


@click.group(cls=SpectralGroup)
@click.option("--seed", type=int, default=0, show_default=True, envvar="SPECTRAL_SEED",
              help="Seed for every random stream.")
@click.option("--out-dir", type=click.Path(file_okay=False, path_type=Path), default=Path("out"),
              show_default=True, envvar="SPECTRAL_OUT_DIR", help="Directory for artifacts and manifest.json.")
@click.option("--tol", type=float, default=1e-9, show_default=True, envvar="SPECTRAL_TOL",
              help="Relative reconstruction tolerance for decompose.")
@click.option("-v", "--verbose", is_flag=True, help="Log at DEBUG level.")
@click.version_option(VERSION)
@click.pass_context
def app(ctx, seed, out_dir, tol, verbose):
    """Spectral adapters: decompose, train, merge and fuse weight matrices."""

    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    ctx.obj = RunContext(seed=seed, out_dir=Path(out_dir), tol=tol)


##############################################################################
# Decomposition, training and merging


@app.command()
@click.argument("matrix", type=click.Path(dir_okay=False))
@click.pass_context
def decompose(ctx, matrix):
    """Thin SVD of a matrix container into DIR/decomposition."""

    run = ctx.obj
    w = read_matrix(matrix)
    start = time.perf_counter()
    d = svd_thin(w)
    seconds = time.perf_counter() - start
    error = float(np.linalg.norm(reconstruct(d) - w))
    bound = run.tol * (1.0 + float(np.linalg.norm(w)))
    if error > bound:
        raise NumericalError(f"reconstruction error {error:.3e} of {w.shape[0]}x{w.shape[1]} matrix "
                             f"exceeds {bound:.3e}")

    target = write_decomposition(run.out_dir / "decomposition", d)
    click.echo(f"{w.shape[0]}x{w.shape[1]}: k={d.k} s_max={d.s[0]:.6g} s_min={d.s[-1]:.6g} "
               f"error={error:.3e} ({seconds:.3f}s)")
    _finish(ctx, [target], {"seconds": seconds, "reconstruction_error": error})


@app.command("train")
@click.argument("base", type=click.Path(dir_okay=False))
@click.argument("target", type=click.Path(dir_okay=False))
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False),
              help="Training configuration JSON.")
@click.pass_context
def train_adapter(ctx, base, target, config_path):
    """Fit an adapter on BASE so the linear model reproduces TARGET."""

    run = ctx.obj
    form = load_document(TrainConfigForm, config_path)
    config = form.to_config(seed=run.seed)
    w, t = read_matrix(base), read_matrix(target)
    if t.shape != w.shape:
        raise ShapeError(f"target shape {t.shape} does not match base {w.shape}")

    spec = config.adapter
    base_form = svd_thin(w) if _needs_decomposition(spec.kind) else w
    rng = np.random.default_rng(config.seed)
    task = LinearRegressionTask.from_target(t, form.n_samples.data, rng)
    state = init_adapter(spec.kind, base_form, spec.rank, columns=spec.columns, seed=config.seed, **spec.extras)

    trace_path = run.out_dir / "trace.csv"
    run.out_dir.mkdir(parents=True, exist_ok=True)
    try:
        trace = train(AdapterObjective(task, base_form, state, t), config)
    except TrainingDiverged as exc:
        exc.trace.to_csv(trace_path)
        raise
    trace.to_csv(trace_path)
    adapter_dir = write_adapter(run.out_dir / "adapter", trace.state)
    merged = write_matrix(run.out_dir / "merged", merge(base_form, trace.state))

    click.echo(f"{spec.kind.value} rank {spec.rank}: {trace.state.parameter_count()} trainable, "
               f"loss {trace.records[0].loss:.6e} -> {trace.final_loss:.6e}")
    _finish(ctx, [trace_path, adapter_dir, *merged], {"final_loss": trace.final_loss})


@app.command("merge")
@click.argument("base", type=click.Path(dir_okay=False))
@click.argument("adapter", type=click.Path(file_okay=False))
@click.pass_context
def merge_adapter(ctx, base, adapter):
    """Fold an adapter container into BASE and write DIR/merged."""

    run = ctx.obj
    w = read_matrix(base)
    state = read_adapter(adapter)
    base_form = svd_thin(w) if _needs_decomposition(state.kind) else w
    if state.kind in SPECTRAL_KINDS and state.base_fingerprint != fingerprint(base_form):
        raise PreconditionError("adapter was trained against a different base decomposition")
    merged = write_matrix(run.out_dir / "merged", merge(base_form, state))
    click.echo(f"merged {state.kind.value} adapter into {w.shape[0]}x{w.shape[1]} base")
    _finish(ctx, list(merged))


##############################################################################
# Fusion


def _check_policy(policy, states):
    if policy != "contiguous-top":
        return
    for i, state in enumerate(states):
        expected = ColumnSelect.block(i, state.rank).indices.tolist()
        if state.columns.indices.tolist() != expected:
            raise PreconditionError(f"entry {i} columns {state.columns.describe()} break the contiguous-top policy")


@app.command()
@click.argument("plan", type=click.Path(dir_okay=False))
@click.pass_context
def fuse(ctx, plan):
    """Combine the adapters listed in a fusion plan; paths are relative to the plan."""

    run = ctx.obj
    form = load_document(FusionPlanForm, plan)
    root = Path(plan).parent
    w = read_matrix(root / form.base.data)
    d = svd_thin(w)

    entries = [field.form for field in form.entries.entries]
    states, weights, activations, probes = [], [], [], []
    for i, entry in enumerate(entries):
        state = read_adapter(root / entry.adapter.data)
        columns = entry.columns.form.to_columns()
        held = getattr(state, "columns", None)
        if columns is not None and (held is None or held.indices.tolist() != columns.indices.tolist()):
            raise PreconditionError(f"entry {i}: plan columns {columns.describe()} differ from the adapter's")
        states.append(state)
        weights.append(1.0 / len(entries) if entry.weight.data is None else entry.weight.data)
        activations.append(read_matrix(root / entry.activations.data) if entry.activations.data else None)
        probes.append(read_matrix(root / entry.probes.data) if entry.probes.data else None)

    method = form.method.data
    base_forms = [d if _needs_decomposition(s.kind) else w for s in states]
    deltas = [merge(b, s) - w for b, s in zip(base_forms, states)]
    have_activations = all(a is not None for a in activations)
    report = {"method": method, "weights": weights}

    if method == "spectral":
        _check_policy(form.policy.data, states)
        fused = spectral_fuse(FusionPlan(d, [FusionEntry(s, lam) for s, lam in zip(states, weights)],
                                         form.policy.data))
    elif method == "fedavg":
        fused = fedavg_merge(w, deltas, weights)
    else:
        if not have_activations:
            raise PreconditionError("gradient fusion needs activations for every entry")
        result = gradient_fusion(w, deltas, activations, form.ridge.data)
        fused = result.weight
        report.update(ridge=result.ridge, optimality_residual=result.residual)

    selections = [s.columns for s in states if hasattr(s, "columns")]
    report["overlaps"] = [list(o) for o in column_overlaps(selections)]
    rng = np.random.default_rng(run.seed)
    probe_sets = [p if p is not None else (a if a is not None else rng.standard_normal((w.shape[1], 16)))
                  for p, a in zip(probes, activations)]
    report["deviations"] = [float(x) for x in _deviations(base_forms, states, fused, probe_sets)]
    if have_activations:
        report["objectives"] = {
            method: fusion_objective(w, deltas, activations, fused),
            "fedavg": fusion_objective(w, deltas, activations, fedavg_merge(w, deltas, weights)),
        }

    fused_paths = write_matrix(run.out_dir / "fused", fused)
    report_path = write_json(run.out_dir / "fusion_report.json", report)
    click.echo(f"fused {len(states)} adapters by {method}; worst deviation {max(report['deviations']):.3e}")
    _finish(ctx, [*fused_paths, report_path])


def _deviations(base_forms, states, fused, probes):
    out = []
    for base, state, probe in zip(base_forms, states, probes):
        out.extend(identity_preservation_report(base, [state], fused, [probe]).deviations)
    return out


##############################################################################
# Analysis


@app.command()
@click.option("--kind", "kinds", multiple=True, type=click.Choice(KINDS), help="Adapter kinds (default: all).")
@click.option("--n", "n", type=click.IntRange(min=1), required=True, help="Rows of the weight.")
@click.option("--m", "m", type=click.IntRange(min=1), required=True, help="Columns of the weight.")
@click.option("--max-rank", type=click.IntRange(min=1), default=32, show_default=True)
@click.pass_context
def budget(ctx, kinds, n, m, max_rank):
    """Trainable-parameter counts per kind and rank."""

    run = ctx.obj
    kinds = list(kinds) or KINDS
    rows = budget_table(kinds, n, m, max_rank)
    header = ["kind", "rank", "count", "granularity", "scaling"]
    csv_path = write_csv(run.out_dir / "budget.csv", [header] + [[r[h] for h in header] for r in rows])
    budgets = {kind: available_budgets(kind, n, m, max_rank) for kind in kinds}
    json_path = write_json(run.out_dir / "budgets.json", budgets)
    for kind in kinds:
        click.echo(f"{kind:>10}: {budgets[kind]}")
    _finish(ctx, [csv_path, json_path])


@app.command()
@click.argument("base", type=click.Path(dir_okay=False))
@click.option("--kind", type=click.Choice(KINDS), required=True)
@click.option("--rank", type=click.IntRange(min=0), default=1, show_default=True)
@click.option("--trials", type=click.IntRange(min=0), default=50, show_default=True)
@click.option("--lenient", is_flag=True, help="Report a rank-deficient base instead of failing.")
@click.pass_context
def rankcap(ctx, base, kind, rank, trials, lenient):
    """Empirical rank range of the adapted weight."""

    run = ctx.obj
    report = rank_capacity_empirical(kind, read_matrix(base), rank, trials=trials, seed=run.seed,
                                     strict=not lenient)
    artifacts = [write_json(run.out_dir / "rankcap.json", report.to_dict())]
    if report.certificate is not None:
        artifacts.append(write_adapter(run.out_dir / "certificate", report.certificate))
    click.echo(f"{kind}(r={rank}): rank in [{report.min_rank_achieved}, {report.max_rank_achieved}] "
               f"of base rank {report.base_rank}")
    _finish(ctx, artifacts)


@app.command()
@click.option("--kind", type=click.Choice(KINDS), required=True)
@click.option("--n", "n", type=click.IntRange(min=1), default=6, show_default=True)
@click.option("--m", "m", type=click.IntRange(min=1), default=8, show_default=True)
@click.option("--rank", type=click.IntRange(min=0), default=2, show_default=True)
@click.option("--variant", type=click.Choice(["dora", "spectral"]), default="dora", show_default=True)
@click.option("--independent-blocks", is_flag=True, help="OFT: one generator per block.")
@click.option("--threshold", type=float, default=1e-5, show_default=True)
@click.pass_context
def gradcheck(ctx, kind, n, m, rank, variant, independent_blocks, threshold):
    """Compare analytic gradients with central differences on a random instance."""

    run = ctx.obj
    extras = {}
    if kind == AdapterKind.DORA_VECTOR.value:
        extras["variant"] = variant
    elif kind == AdapterKind.OFT.value:
        extras["shared"] = not independent_blocks
    base = np.random.default_rng(run.seed).standard_normal((n, m))
    error = grad_check(kind, base, rank, seed=run.seed, **extras)
    path = write_json(run.out_dir / "gradcheck.json", {"kind": kind, "n": n, "m": m, "rank": rank,
                                                       "max_relative_error": error, "threshold": threshold})
    click.echo(f"{kind}: max relative error {error:.3e}")
    _finish(ctx, [path])
    if error > threshold:
        raise NumericalError(f"{kind} gradient check failed: {error:.3e} > {threshold:.1e}")


##############################################################################
# Experiments and benchmarks


EXPERIMENT_FORMS = {
    "subspace": SubspaceExperimentForm,
    "rank-recovery": RankRecoveryExperimentForm,
    "loss-compare": LossCompareExperimentForm,
}


@app.command()
@click.argument("name", type=click.Choice(sorted(EXPERIMENT_FORMS)))
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Experiment configuration JSON.")
@click.pass_context
def experiment(ctx, name, config_path):
    """Run one of the reproducible experiments."""

    run = ctx.obj
    form_cls = EXPERIMENT_FORMS[name]
    if config_path:
        form = load_document(form_cls, config_path)
    else:
        form = validate_document(form_cls, {"schema_version": SCHEMA_VERSION})
    config = form.to_experiment(seed=run.seed)
    out = run.out_dir
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []

    if name == "subspace":
        report = experiment_subspace_alignment(config)
        control = experiment_subspace_alignment(dataclasses.replace(config, weight_decay=0.0),
                                                record_trace=False)
        if not report.aligned:
            logger.warning("neurons did not align with the data plane (ratio %.3e, angle %.3e)",
                           report.out_of_plane_ratio, report.plane_angle)
        report.trace.to_csv(out / "subspace_trace.csv")
        artifacts.append(out / "subspace_trace.csv")
        artifacts.append(write_json(out / "subspace.json", {**report.to_dict(), "control": control.to_dict()}))
        click.echo(f"out-of-plane ratio {report.out_of_plane_ratio:.3e}, plane angle {report.plane_angle:.3e} "
                   f"(beta=0 control ratio {control.out_of_plane_ratio:.3e})")
    elif name == "rank-recovery":
        report = experiment_rank_recovery(config)
        for run_name, trace in report.traces.items():
            path = out / f"rank_recovery_{run_name}.csv"
            trace.to_csv(path)
            artifacts.append(path)
        artifacts.append(write_json(out / "rank_recovery.json", report.to_dict()))
        click.echo(f"LoRA {report.lora_distance:.4f} (floor {report.lora_floor:.4f}), "
                   f"SpectralA {report.spectral_distance:.4f}, certified {report.spectral_certified_distance:.3e}")
    else:
        report = loss_compare(config)
        artifacts.append(write_csv(out / "loss_compare.csv", report.rows()))
        artifacts.append(write_json(out / "loss_compare.json", report.to_dict()))
        for kind, loss in report.to_dict()["final_loss"].items():
            click.echo(f"{kind:>10} ({report.budgets[kind]} params): {loss:.6e}")
    _finish(ctx, artifacts)


@app.command("bench-svd")
@click.option("--size", "sizes", multiple=True, type=click.IntRange(min=1), default=(64, 128, 256),
              show_default=True)
@click.option("--repeats", type=click.IntRange(min=1), default=5, show_default=True)
@click.option("--randomized-rank", type=click.IntRange(min=1), default=None)
@click.option("--cap", type=click.IntRange(min=1), default=SIZE_CAP, show_default=True)
@click.pass_context
def bench_svd_command(ctx, sizes, repeats, randomized_rank, cap):
    """Wall-clock and peak memory of the SVD paths."""

    run = ctx.obj
    rows = bench_svd(sizes, repeats=repeats, seed=run.seed, randomized_rank=randomized_rank, cap=cap)
    path = write_csv(run.out_dir / "bench.csv", [list(BenchRow.HEADER)] + [row.cells() for row in rows])
    for row in rows:
        click.echo(f"{row.method:>10} {row.size:>5}: median {row.t_median_ms:.2f} ms, p90 {row.t_p90_ms:.2f} ms")
    _finish(ctx, [path], {"blas_threads": {name: os.environ.get(name) for name in BLAS_THREAD_VARIABLES}})


@app.command()
@click.argument("manifest", type=click.Path(dir_okay=False))
@click.pass_context
def replay(ctx, manifest):
    """Re-run the command recorded in MANIFEST, writing to the current --out-dir."""

    document = read_manifest(manifest)
    name = document["command"]
    command = app.get_command(ctx, name)
    if command is None or name == "replay":
        raise FormatError(f"{manifest}: cannot replay command {name!r}")
    settings = document.get("settings", {})
    ctx.obj = dataclasses.replace(ctx.obj, seed=settings.get("seed", ctx.obj.seed),
                                  tol=settings.get("tol", ctx.obj.tol))
    logger.info("replaying %s from %s", name, manifest)
    ctx.invoke(command, **document["params"])


if __name__ == "__main__":
    app()
