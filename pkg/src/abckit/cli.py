"""``abckit`` command line.  Exit codes: 0 ok, 2 config, 3 data, 4 compute."""

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import __version__, report
from .attribution import (AttributionRanking, counterfactual_attribution, intersection_stat, visual_attribution,
                          write_attribution_csv, write_summary_json)
from .codebook import SourceCodebook, assign_codewords, estimate_costs, parse_bitstring, verify_theorem1
from .config import load_config
from .dataset import (MNIST_STYLE, generate_synthetic, load_dataset, load_idx, normalize, regroup_sources,
                      save_dataset, write_tensor)
from .diffabl import approx_landscape, jacobian, load_jacobian, save_jacobian
from .diffusion import (TrainConfig, draw_exogenous, load_checkpoint, make_schedule, predict, sample,
                        save_checkpoint, train_denoiser)
from .ensemble import load_ensemble, mask_to_coefficients, save_ensemble, train_ensemble
from .errors import AbcError, ConfigError
from .experiment import regenerate_report, run_experiment
from .landscape import _sample_with, enumerate_landscape, save_landscape
from .retrain import (compare_paradigms, load_rbc_suite, rbc_attribution, rbc_landscape, save_rbc_suite,
                      train_rbc_suite)


def _train_args(p):
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    g.add_argument("--steps", type=int, default=None, help="exact optimizer steps (overrides --epochs)")
    g.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    g.add_argument("--lr", type=float, default=TrainConfig.learning_rate)
    g.add_argument("--train-seed", type=int, default=0)
    g.add_argument("--width", type=int, default=TrainConfig.width)
    g.add_argument("--hidden", type=int, default=TrainConfig.hidden)
    g.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    g.add_argument("--T", type=int, default=200, dest="T_train")
    g.add_argument("--K", type=int, default=20)
    g.add_argument("--config", help="experiment config; its [train] and [schedule] replace the flags above")


def _train_config(a):
    if getattr(a, "config", None):
        return load_config(a.config).train
    return TrainConfig(epochs=a.epochs, steps=a.steps, batch_size=a.batch_size, learning_rate=a.lr,
                       seed=a.train_seed, width=a.width, hidden=a.hidden, optimizer=a.optimizer)


def _load_data(path):
    d = load_dataset(path)
    return d if d.normalization is not None else normalize(d, MNIST_STYLE)


def _schedule(a):
    if getattr(a, "config", None):
        sc = load_config(a.config).schedule
        return make_schedule(sc.T_train, sc.K, sc.beta_lo, sc.beta_hi)
    return make_schedule(a.T_train, a.K)


def _noise_for(e, seed, mode):
    return draw_exogenous(seed, e.schedule, mode, e.image_shape)


def _mode(text):
    return {"det": "deterministic", "anc": "ancestral"}.get(text, text)


def _manifest_path(out):
    return os.path.join(out, "manifest.json") if os.path.isdir(out) else out + ".manifest.json"


# -- subcommands ---------------------------------------------------------------


def cmd_codebook(a, m):
    cb = assign_codewords(a.N, a.n, a.w, a.seed)
    verdict = verify_theorem1(cb)
    cb.save(a.out)
    print(json.dumps({"N": cb.N, "n": cb.n, "w": cb.w, "theorem_ok": verdict.ok}))
    return [a.out]


def cmd_costs(a, m):
    costs = estimate_costs(a.N, a.n, a.w, a.K, a.samples)
    doc = {k: {"trainings": c.trainings, "denoiser_calls": c.denoiser_calls, "matvecs": c.matvecs}
           for k, c in costs.items()}
    text = json.dumps(doc, indent=1, sort_keys=True) + "\n"
    if a.out:
        with open(a.out, "w") as fh:
            fh.write(text)
        return [a.out]
    sys.stdout.write(text)
    return []


def cmd_dataset(a, m):
    if a.action == "load" and not a.idx:
        raise ConfigError("dataset load needs --images")
    if a.action == "synth" and not a.synthetic:
        raise ConfigError("dataset synth needs --count")
    if bool(a.idx) == bool(a.synthetic):
        raise ConfigError("give exactly one of --count (synthetic) or --images (IDX)")
    if a.idx:
        d = load_idx(a.idx, a.labels, dedupe=a.dedupe, source_mode=a.source_mode)
        m.add_input(a.idx)
        m.add_input(a.labels)
    else:
        d = generate_synthetic(a.synthetic, a.side, a.sources, a.seed, blobs=(a.blobs_min, a.blobs_max))
    if a.groups:
        d = regroup_sources(d, a.groups, a.seed)
    if not a.raw:
        d = normalize(d, MNIST_STYLE)
    save_dataset(d, a.out)
    print(json.dumps({"images": len(d), "sources": d.n_sources, "shape": list(d.image_shape)}))
    return [a.out]


def cmd_train(a, m):
    d = _load_data(a.data)
    m.add_input(a.data)
    m.add_input(a.config)
    sched = _schedule(a)
    cfg = _train_config(a)
    params, losses = train_denoiser(d, cfg, sched)
    save_checkpoint(a.out, params, sched)
    m.seeds = {"train": cfg.seed}
    print(json.dumps({"steps": int(losses.size), "final_loss": float(losses[-20:].mean())}))
    return [a.out]


def cmd_train_ensemble(a, m):
    d = _load_data(a.data)
    m.add_input(a.data)
    if a.codebook:
        cb = SourceCodebook.load(a.codebook)
        m.add_input(a.codebook)
    else:
        cb = assign_codewords(d.n_sources, a.n, a.w, a.codebook_seed)
    m.add_input(a.config)
    sched = _schedule(a)
    e = train_ensemble(d, cb, _train_config(a), sched)
    m.seeds = {"train": e.manifest["train_config"]["seed"], "members": e.manifest["seeds"]}
    return save_ensemble(e, a.out)


def cmd_sample(a, m):
    if bool(a.ensemble) == bool(a.ckpt):
        raise ConfigError("give exactly one of --ensemble or --ckpt")
    if a.ckpt:
        if a.mask is not None:
            raise ConfigError("--mask needs an ensemble")
        params, sched = load_checkpoint(a.ckpt)
        m.add_input(a.ckpt)
        a_ = params.arch
        noise = draw_exogenous(a.seed, sched, a.mode, (a_.channels, a_.side, a_.side))
        x = sample(lambda z, t: predict(params, z, t), sched, noise, batch=1)[0]
    else:
        e = load_ensemble(a.ensemble)
        noise = _noise_for(e, a.seed, a.mode)
        mask = np.ones(e.n, dtype=bool) if a.mask is None else np.array(parse_bitstring(a.mask), dtype=bool)
        x = _sample_with(e, mask_to_coefficients(mask), noise)[0]
    write_tensor(a.out, x[None], [0], {"eps_seed": a.seed, "mode": noise.mode, "mask": a.mask})
    m.seeds = {"eps": a.seed}
    m.settings["mode"] = noise.mode
    return [a.out]


def cmd_landscape(a, m):
    e = load_ensemble(a.ensemble)
    noise = _noise_for(e, a.seed, a.mode)
    thr = None
    if a.binarize:
        thr = 0.0 if a.threshold is None else a.threshold
    l = enumerate_landscape(e, noise, a.metric, keep_images=a.keep_images, binarize_threshold=thr)
    m.seeds = {"eps": a.seed}
    m.settings.update(mode=noise.mode, metric=a.metric, tau=a.tau)
    return save_landscape(l, a.out, a.tau, a.keep_images)


def cmd_diffabl(a, m):
    e = load_ensemble(a.ensemble)
    jac = jacobian(e, _noise_for(e, a.seed, a.mode))
    save_jacobian(a.out, jac)
    m.seeds = {"eps": a.seed}
    m.settings["mode"] = jac.mode
    return [a.out]


def cmd_diffabl_landscape(a, m):
    jac = load_jacobian(a.jacobian)
    cb = SourceCodebook.load(a.codebook)
    m.add_input(a.jacobian)
    m.add_input(a.codebook)
    l = approx_landscape(jac, cb, a.metric)
    return save_landscape(l, a.out, a.tau)


def cmd_attribute(a, m):
    if bool(a.ensemble) == bool(a.rbc):
        raise ConfigError("give exactly one of --ensemble or --rbc")
    d = _load_data(a.data)
    m.add_input(a.data)
    os.makedirs(a.out, exist_ok=True)
    if a.rbc:
        suite = load_rbc_suite(a.rbc)
        shape = (suite.full.arch.channels, suite.full.arch.side, suite.full.arch.side)

        def landscape_for(seed):
            noise = draw_exogenous(seed, suite.schedule, a.mode, shape)
            l = rbc_landscape(suite, noise, a.metric)
            return l, rbc_attribution(l)
    else:
        e = load_ensemble(a.ensemble)

        def landscape_for(seed):
            l = enumerate_landscape(e, _noise_for(e, seed, a.mode), a.metric)
            return l, counterfactual_attribution(l)
    rankings, vis, cfr = {}, [], []
    for i in range(a.samples):
        l, c = landscape_for(a.seed + i)
        v = visual_attribution(l.factual, d, a.visual_metric)
        rankings[i] = [v, c]
        vis.append(v)
        cfr.append(c)
    path = os.path.join(a.out, "attribution.csv")
    write_attribution_csv(path, rankings)
    st = intersection_stat(vis, cfr, a.k)
    summary = os.path.join(a.out, "summary.json")
    write_summary_json(summary, {"rbc" if a.rbc else "abc": st}, {"eps_seeds": [a.seed, a.seed + a.samples - 1]})
    print(json.dumps(st.to_json()))
    m.seeds = {"eps_first": a.seed, "samples": a.samples}
    m.settings.update(mode=a.mode, metric=a.metric, visual_metric=a.visual_metric, k=a.k)
    return [path, summary]


def cmd_rbc_suite(a, m):
    d = _load_data(a.data)
    m.add_input(a.data)
    m.add_input(a.config)
    sched = _schedule(a)
    suite = train_rbc_suite(d, _train_config(a), sched, max_sources=a.max_sources)
    m.seeds = {"train": suite.config.seed}
    m.settings["optimizer_state"] = "fresh per run"
    return save_rbc_suite(suite, a.out)


def read_rankings(path, method=None):
    """Rankings per sample from an attribution CSV, in file order."""
    rows = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            if method is not None and r["method"] != method:
                continue
            rows.setdefault((r["sample_id"], r["method"]), []).append((int(r["rank"]), int(r["source_id"]),
                                                                      float(r["score"])))
    out = {}
    for (sid, meth), entries in rows.items():
        entries.sort()
        ids = np.array([e[1] for e in entries])
        scores = np.array([e[2] for e in entries])
        out.setdefault(sid, []).append(AttributionRanking(ids, scores, meth == "visual", meth))
    return out


def _pick(rankings, want):
    picked = {}
    for sid, rs in rankings.items():
        for r in rs:
            if r.method == want or (want != "visual" and r.method != "visual"):
                picked[sid] = r
                break
    return picked


def cmd_compare(a, m):
    abc = _pick(read_rankings(a.abc), "counterfactual")
    rbc = _pick(read_rankings(a.rbc), "retraining")
    vis_abc = _pick(read_rankings(a.visual), "visual")
    vis_rbc = _pick(read_rankings(a.rbc_visual), "visual") if a.rbc_visual else vis_abc
    for p in (a.abc, a.rbc, a.visual, a.rbc_visual):
        m.add_input(p)
    keys = sorted(set(abc) & set(rbc) & set(vis_abc) & set(vis_rbc), key=lambda s: int(s))
    if not keys:
        raise ConfigError("the attribution files share no sample ids")
    res = compare_paradigms([abc[k] for k in keys], [rbc[k] for k in keys], [vis_abc[k] for k in keys], a.k,
                            rbc_visual=[vis_rbc[k] for k in keys])
    doc = {"abc_hits": res["abc_hits"], "rbc_hits": res["rbc_hits"], "baseline_mean": res["baseline"][0],
           "baseline_sd": res["baseline"][1], "abc_z": res["abc_z"], "rbc_z": res["rbc_z"], "k": a.k,
           "samples": len(keys)}
    print(json.dumps(doc))
    if a.out:
        with open(a.out, "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")
        return [a.out]
    return []


def cmd_run(a, m):
    cfg = load_config(a.config)
    m.add_input(a.config)
    bundle = run_experiment(cfg, a.out, command=m.command, manifest_path=a.manifest)
    if bundle.trend is not None:
        print(json.dumps({"slope": bundle.trend.slope, "p_perm": bundle.trend.p_perm}))
    # run_experiment writes its own manifest
    return None


def cmd_report(a, m):
    outs = regenerate_report(a.run)
    m.add_input(os.path.join(a.run, "radii.csv"))
    return outs


# -- parser ----------------------------------------------------------------------


def build_parser():
    ap = argparse.ArgumentParser(prog="abckit", description="Ablation-based counterfactuals for diffusion ensembles.")
    ap.add_argument("--version", action="version", version=f"abckit {__version__}")
    ap.add_argument("--manifest", help="where to write the run manifest (default: next to the output)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("codebook", help="assign constant-weight codewords to sources")
    p.add_argument("--sources", "--N", dest="N", type=int, required=True)
    p.add_argument("--members", "--n", dest="n", type=int, required=True)
    p.add_argument("--weight", "--w", dest="w", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_codebook)

    p = sub.add_parser("costs", help="training and inference cost of each paradigm")
    p.add_argument("--sources", "--N", dest="N", type=int, required=True)
    p.add_argument("--members", "--n", dest="n", type=int, required=True)
    p.add_argument("--weight", "--w", dest="w", type=int, required=True)
    p.add_argument("--steps", "--K", dest="K", type=int, required=True)
    p.add_argument("--samples", type=int, default=1)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_costs)

    p = sub.add_parser("dataset", help="build an ABCD dataset file")
    p.add_argument("action", nargs="?", choices=["synth", "load"], help="synthetic blobs or IDX files")
    p.add_argument("--count", "--synthetic", dest="synthetic", type=int, metavar="COUNT")
    p.add_argument("--images", "--idx", dest="idx", metavar="IMAGES")
    p.add_argument("--labels")
    p.add_argument("--source-mode", choices=["label", "datum"])
    p.add_argument("--dedupe", action="store_true")
    p.add_argument("--side", type=int, default=16)
    p.add_argument("--sources", type=int, default=None)
    p.add_argument("--groups", type=int, default=None)
    p.add_argument("--blobs-min", type=int, default=2)
    p.add_argument("--blobs-max", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--raw", action="store_true", help="skip the [-1, 1] normalization")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_dataset)

    p = sub.add_parser("train", help="train one denoiser")
    p.add_argument("--split", "--data", dest="data", required=True)
    p.add_argument("--out", required=True)
    _train_args(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("train-ensemble", help="train one member per codebook split")
    p.add_argument("--data", required=True)
    p.add_argument("--codebook")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--w", type=int, default=None)
    p.add_argument("--codebook-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _train_args(p)
    p.set_defaults(fn=cmd_train_ensemble)

    def sampling(p, out=True, seed_required=True, ensemble_required=True):
        p.add_argument("--ensemble", required=ensemble_required)
        p.add_argument("--seed", type=int, required=seed_required, default=0)
        p.add_argument("--mode", type=_mode, choices=["deterministic", "ancestral"], default="deterministic",
                       help="deterministic (det) or ancestral (anc)")
        if out:
            p.add_argument("--out", required=True)

    p = sub.add_parser("sample", help="generate one sample, optionally with an ablation mask")
    sampling(p, ensemble_required=False)
    p.add_argument("--ckpt", help="sample from a single denoiser checkpoint instead of an ensemble")
    p.add_argument("--mask", help="bitstring of kept members, e.g. 11110000")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("landscape", help="exact counterfactual landscape for one noise seed")
    sampling(p)
    p.add_argument("--metric", default="euclidean")
    p.add_argument("--tau", type=float, required=True, help="attributability threshold (no default)")
    p.add_argument("--keep-images", action="store_true")
    p.add_argument("--binarize", action="store_true")
    p.add_argument("--threshold", type=float, default=None)
    p.set_defaults(fn=cmd_landscape)

    p = sub.add_parser("diffabl", help="Jacobian of a sample with respect to member coefficients")
    sampling(p)
    p.set_defaults(fn=cmd_diffabl)

    p = sub.add_parser("diffabl-landscape", help="first-order landscape from a saved Jacobian")
    p.add_argument("--jacobian", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--metric", default="euclidean")
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_diffabl_landscape)

    p = sub.add_parser("attribute", help="visual and counterfactual rankings for generated samples")
    sampling(p, out=False, seed_required=False, ensemble_required=False)
    p.add_argument("--rbc", help="retraining suite directory (instead of --ensemble)")
    p.add_argument("--data", required=True)
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--metric", default="euclidean")
    p.add_argument("--visual-metric", default="euclidean-native")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_attribute)

    p = sub.add_parser("rbc-suite", help="full model plus one leave-one-out model per source")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-sources", type=int, default=64)
    _train_args(p)
    p.set_defaults(fn=cmd_rbc_suite)

    p = sub.add_parser("compare", help="top-k intersection counts of both paradigms")
    p.add_argument("--abc", required=True, help="attribution CSV with counterfactual rankings")
    p.add_argument("--rbc", required=True, help="attribution CSV with retraining rankings")
    p.add_argument("--visual", required=True, help="attribution CSV with visual rankings")
    p.add_argument("--rbc-visual", help="visual rankings of the retrained model's samples")
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("run", help="end-to-end experiment from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("report", help="rebuild plots from a finished run directory")
    p.add_argument("--run", required=True)
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv=None):
    ap = build_parser()
    a = ap.parse_args(argv)
    m = report.RunManifest(["abckit"] + list(sys.argv[1:] if argv is None else argv))
    try:
        outputs = a.fn(a, m)
    except AbcError as exc:
        print(f"abckit {a.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    if outputs is not None:
        m.add_outputs(p for p in outputs if os.path.isfile(p))
        m.write(_manifest_target(a))
    return 0


def _manifest_target(a):
    if a.manifest:
        return a.manifest
    if getattr(a, "out", None):
        return _manifest_path(a.out)
    if getattr(a, "run", None):
        return os.path.join(a.run, "report.manifest.json")
    # stdout-only commands still leave a record in the working directory
    return f"abckit-{a.command}.manifest.json"


if __name__ == "__main__":
    sys.exit(main())
