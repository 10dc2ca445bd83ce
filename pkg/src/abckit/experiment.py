"""End-to-end runs: dataset, codebook, ensemble, landscapes, attribution,
statistics and plots, driven by one ExperimentConfig."""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import report
from .attribution import (counterfactual_attribution, intersection_stat, visual_attribution,
                          visual_similarity_rank, write_attribution_csv, write_summary_json)
from .codebook import assign_codewords, verify_theorem1
from .dataset import MNIST_STYLE, generate_synthetic, load_dataset, load_idx, normalize, regroup_sources
from .diffabl import approx_landscape, fidelity_report, jacobian
from .diffusion import draw_exogenous, make_schedule
from .ensemble import save_ensemble, train_ensemble
from .errors import AbcError, ComputeError
from .landscape import counterfactual_distance_rank, counterfactual_radius, enumerate_landscape
from .stats import ols_loglog


class StageError(ComputeError):
    """Wraps an unexpected failure with the name of the stage it hit."""


@dataclass
class ReportBundle:
    out_dir: str
    outputs: list = field(default_factory=list)
    radii: dict = field(default_factory=dict)  # N -> array of radii
    intersections: dict = field(default_factory=dict)
    trend: object = None
    fidelity: dict = field(default_factory=dict)
    manifest_path: str | None = None


def build_dataset(spec, count=None):
    """Materialise the configured dataset; ``count`` overrides the image
    count for synthetic trend sweeps."""
    if spec.kind == "synthetic":
        count = spec.count if count is None else count
        d = generate_synthetic(count, spec.side, spec.n_sources, spec.seed, spec.jitter, tuple(spec.blobs))
    elif spec.kind == "idx":
        d = load_idx(spec.images, spec.labels, source_mode=spec.source_mode)
    else:
        d = load_dataset(spec.images)
    if spec.groups is not None:
        d = regroup_sources(d, spec.groups, spec.seed)
    if spec.normalize and d.normalization is None:
        d = normalize(d, MNIST_STYLE)
    return d


def eps_seed(base, m):
    return int(base) + int(m)


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except AbcError as exc:
        exc.args = (f"stage {name}: {exc.args[0] if exc.args else exc}",) + exc.args[1:]
        exc.stage = name
        raise
    except Exception as exc:  # noqa: BLE001 - anything else is a compute failure
        err = StageError(f"stage {name}: {type(exc).__name__}: {exc}")
        err.stage = name
        raise err from exc


def _one_size(cfg, data, sched, label, out_dir, threads, bundle, rows):
    n, w = cfg.codebook.n, cfg.weight
    N = data.n_sources
    size = len(data)
    cb = _stage("codebook", assign_codewords, N, n, w, cfg.codebook.seed)
    if not verify_theorem1(cb).ok:
        raise ComputeError("stage codebook: ablation property violated")
    e = _stage("train", train_ensemble, data, cb, cfg.train, sched, threads)
    ens_dir = os.path.join(out_dir, f"ensemble_{label}")
    bundle.outputs += _stage("train", save_ensemble, e, ens_dir)
    shape = (data.images.shape[1],) + data.images.shape[2:]
    at, sm = cfg.attribution, cfg.sampling
    radii, rankings, vis, cfr, fid = [], {}, [], [], []
    for m in range(sm.samples):
        noise = draw_exogenous(eps_seed(sm.seed, m), sched, sm.mode, shape)
        l = _stage("landscape", enumerate_landscape, e, noise, at.metric, keep_images=at.differential,
                   threads=threads)
        r = counterfactual_radius(l, at.tau)
        radii.append(r.radius)
        v = _stage("attribution", visual_attribution, l.factual, data, at.visual_metric)
        c = counterfactual_attribution(l)
        vis.append(v)
        cfr.append(c)
        rankings[m] = [v, c]
        vrank = visual_similarity_rank(data, l.factual, c.top(1)[0], at.visual_metric) if N > 1 else 0.0
        crank = counterfactual_distance_rank(l, int(v.top(1)[0])) if N > 1 else 0.0
        rows["radii"].append([size, N, m, noise.seed, r.radius, r.argmax, r.verdict or ""])
        rows["ranks"].append([size, N, m, vrank, crank])
        for s, dist in zip(l.source_ids, l.distances):
            rows["landscapes"].append([size, N, m, int(s), float(dist)])
        if at.differential:
            jac = _stage("diffabl", jacobian, e, noise, threads=threads)
            a = approx_landscape(jac, cb, at.metric, keep_images=True)
            fr = fidelity_report(l, a)
            fid.append(fr)
            rows["fidelity"].append([size, N, m, fr.spearman, fr.median_pearson])
            rankings[m].append(counterfactual_attribution(a))
    path = os.path.join(out_dir, f"attribution_{label}.csv")
    write_attribution_csv(path, rankings)
    bundle.outputs.append(path)
    k = min(at.k, N)
    bundle.intersections[size] = intersection_stat(vis, cfr, k)
    bundle.radii[size] = np.array(radii)
    if fid:
        bundle.fidelity[size] = fid


def run_experiment(cfg, out_dir, threads=None, command=None, manifest_path=None):
    """Run every stage and write CSVs, SVGs, a summary and a manifest.

    On failure the manifest is still written, marked with the failing stage,
    and the error is re-raised.
    """
    os.makedirs(out_dir, exist_ok=True)
    manifest = report.RunManifest(command or report.command_line(), config_hash=cfg.hash())
    manifest.seeds = {"dataset": cfg.dataset.seed, "codebook": cfg.codebook.seed, "train": cfg.train.seed,
                      "sampling": cfg.sampling.seed}
    if cfg.dataset.images:
        manifest.add_input(cfg.dataset.images)
        manifest.add_input(cfg.dataset.labels)
    manifest.settings = {"mode": cfg.sampling.mode, "metric": cfg.attribution.metric,
                         "visual_metric": cfg.attribution.visual_metric, "tau": cfg.attribution.tau}
    bundle = ReportBundle(out_dir, manifest_path=manifest_path)
    rows = {"radii": [], "ranks": [], "landscapes": [], "fidelity": []}
    echo = os.path.join(out_dir, "config.toml")
    with open(echo, "w") as fh:
        fh.write(cfg.to_toml())
    bundle.outputs.append(echo)
    try:
        sched = _stage("schedule", make_schedule, cfg.schedule.T_train, cfg.schedule.K, cfg.schedule.beta_lo,
                       cfg.schedule.beta_hi)
        sizes = list(cfg.trend.sizes) or [None]
        for size in sizes:
            data = _stage("dataset", build_dataset, cfg.dataset, size)
            label = f"N{len(data)}"
            _one_size(cfg, data, sched, label, out_dir, threads, bundle, rows)
        _stage("statistics", _statistics, cfg, bundle, rows)
        _stage("report", _emit, cfg, bundle, rows)
    except AbcError as exc:
        manifest.status = f"failed at stage {getattr(exc, 'stage', 'unknown')}: partial outputs"
        _finish_manifest(manifest, bundle)
        raise
    _finish_manifest(manifest, bundle)
    return bundle


def _finish_manifest(manifest, bundle):
    for p in bundle.outputs:
        if os.path.isfile(p):
            manifest.add_output(p)
    bundle.manifest_path = manifest.write(bundle.manifest_path or os.path.join(bundle.out_dir, "manifest.json"))


def _statistics(cfg, bundle, rows):
    sizes = sorted(bundle.radii)
    if len(sizes) >= 2:
        xs, ys = [], []
        for r in rows["radii"]:
            xs.append(np.log10(r[0]))
            ys.append(float(report.log10_safe([r[4]])[0]))
        bundle.trend = ols_loglog(xs, ys, cfg.trend.permutations, cfg.sampling.seed)


def _emit(cfg, bundle, rows):
    out = bundle.out_dir
    add = bundle.outputs.append
    add(report.write_csv(os.path.join(out, "radii.csv"),
                         ["n_images", "n_sources", "sample_id", "eps_seed", "radius", "argmax_source", "verdict"], rows["radii"]))
    add(report.write_csv(os.path.join(out, "landscapes.csv"),
                         ["n_images", "n_sources", "sample_id", "source_id", "distance"], rows["landscapes"]))
    add(report.write_csv(os.path.join(out, "ranks.csv"),
                         ["n_images", "n_sources", "sample_id", "visual_rank_of_top_counterfactual",
                          "counterfactual_rank_of_top_visual"], rows["ranks"]))
    trend_rows = []
    for N in sorted(bundle.radii):
        logs = report.log10_safe(bundle.radii[N])
        trend_rows.append([N, len(logs), float(np.mean(logs)), float(np.median(bundle.radii[N]))])
    add(report.write_csv(os.path.join(out, "trend.csv"),
                         ["n_images", "landscapes", "mean_log10_radius", "median_radius"], trend_rows))
    if rows["fidelity"]:
        add(report.write_csv(os.path.join(out, "fidelity.csv"),
                             ["n_images", "n_sources", "sample_id", "spearman", "median_pixel_pearson"], rows["fidelity"]))
    extra = {"config_hash": cfg.hash(), "trend": None}
    if bundle.trend is not None:
        t = bundle.trend
        extra["trend"] = {"slope": t.slope, "intercept": t.intercept, "r2": t.r2, "p_perm": t.p_perm,
                          "permutations": t.permutations}
    stats = {f"N{N}": st for N, st in sorted(bundle.intersections.items())}
    path = os.path.join(out, "summary.json")
    write_summary_json(path, stats, extra)
    add(path)
    groups = {f"N={N}": list(bundle.radii[N]) for N in sorted(bundle.radii)}
    add(report.write_svg(os.path.join(out, "radius_strip.svg"),
                         report.emit_svg_strip(groups, "counterfactual radius", "radius")))
    if bundle.trend is not None:
        pts = [[np.log10(r[0]), float(report.log10_safe([r[4]])[0])] for r in rows["radii"]]
        add(report.write_svg(os.path.join(out, "radius_vs_n.svg"),
                             report.emit_svg_scatter(pts, (bundle.trend.slope, bundle.trend.intercept),
                                                     "radius vs training-set size", "log10 N",
                                                     "log10 radius")))
    ranks = np.array([r[3:] for r in rows["ranks"]], dtype=np.float64)
    add(report.write_svg(os.path.join(out, "visual_rank_hist.svg"),
                         report.emit_svg_histogram(ranks[:, 0], title="visual rank of top counterfactual source",
                                                   xlabel="normalised rank")))
    add(report.write_svg(os.path.join(out, "counterfactual_rank_hist.svg"),
                         report.emit_svg_histogram(ranks[:, 1], title="counterfactual rank of top visual source",
                                                   xlabel="normalised rank")))


def regenerate_report(run_dir):
    """Rebuild plots from the CSVs of an earlier run."""
    import csv

    with open(os.path.join(run_dir, "radii.csv")) as fh:
        radii = [(int(r["n_images"]), float(r["radius"])) for r in csv.DictReader(fh)]
    outputs = []
    groups = {}
    for N, r in radii:
        groups.setdefault(f"N={N}", []).append(r)
    outputs.append(report.write_svg(os.path.join(run_dir, "radius_strip.svg"),
                                    report.emit_svg_strip(groups, "counterfactual radius", "radius")))
    if len({N for N, _ in radii}) >= 2:
        xs = [np.log10(N) for N, _ in radii]
        ys = list(report.log10_safe([r for _, r in radii]))
        fit = ols_loglog(xs, ys, 1000, 0)
        outputs.append(report.write_svg(os.path.join(run_dir, "radius_vs_n.svg"),
                                        report.emit_svg_scatter(list(zip(xs, ys)), (fit.slope, fit.intercept),
                                                                "radius vs training-set size", "log10 N",
                                                                "log10 radius")))
    with open(os.path.join(run_dir, "summary.json")) as fh:
        json.load(fh)  # presence check: a report needs a finished run
    return outputs
