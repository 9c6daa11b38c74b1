"""Command-line driver: pretrain -> fit-prior -> rescale-sweep -> infer, plus analysis.

Every subcommand reads the same JSON config (``--config``), writes into
``--out-dir`` and exits with 0 on success, 2 on a config error, 3 on a
numeric divergence and 4 on an I/O or file-format error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import replace
from functools import partial

import numpy as np

from . import __version__
from .bma import bma_predict, evaluate
from .config import ConfigError, ExperimentConfig, load_config
from .data import CsvFormatError, load_csv, make_transfer_pair
from .formats import (FormatError, config_hash, load_checkpoint, load_params, load_prior,
                      save_checkpoint, save_prior, save_samples, write_csv)
from .geometry import (lambda_sweep, perturbation_scan, random_directions, rank_ablation,
                       top_singular_directions)
from .model import MlpModel
from .pipeline import (DownstreamSpec, ensemble_params, fit_head, fit_swag_prior, group_layout,
                       pretrain, run_downstream, timed)
from .prior import LowRankGaussian
from .samplers import DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
METRIC_COLUMNS = ["method", "n_train", "seed", "error", "nll", "ece", "runtime_s"]


# --- shared setup ------------------------------------------------------------------

class Run:
    """Resolved config plus the datasets and models it implies."""

    def __init__(self, cfg: ExperimentConfig, out_dir: str, threads: int):
        self.cfg = cfg
        self.out_dir = out_dir
        self.threads = threads
        self.provenance = {"config_hash": config_hash(cfg.raw), "seed": cfg.seed,
                           "version": __version__}
        self.source, self.train, self.val, self.test, self.shifted = load_task(cfg)
        n_out = cfg.pretrain.embed_dim if cfg.pretrain.loss == "info_nce" \
            else self.source.n_classes
        dims = [self.source.dim, *cfg.model.hidden]
        self.source_model = MlpModel(dims + [n_out], cfg.model.activation)
        n_target = max(d.n_classes for d in (self.train, self.val, self.test))
        self.model = MlpModel(dims + [n_target], cfg.model.activation)

    def path(self, name):
        return os.path.join(self.out_dir, name)

    def csv(self, name, columns, rows):
        write_csv(self.path(name), columns, rows, self.provenance)

    def downstream(self, method=None, lam=None, head_var=None) -> DownstreamSpec:
        inf, pr = self.cfg.inference, self.cfg.prior
        method = method or inf.method
        return DownstreamSpec(method, inf.run_config(method), pr.lam if lam is None else lam,
                              pr.head_var if head_var is None else head_var, pr.fe_var,
                              inf.jitter, 1.0, inf.precondition, inf.precond_cap)

    @contextmanager
    def pool(self):
        if self.threads > 1:
            with ProcessPoolExecutor(self.threads) as ex:
                yield ex
        else:
            yield None


def load_task(cfg: ExperimentConfig):
    if cfg.synthetic is not None:
        src, tr, va, te, sh = make_transfer_pair(cfg.synthetic)
        return src, tr, va, te, sh
    paths = cfg.csv
    sets = [load_csv(paths[k], True, k) for k in ("source", "target_train", "target_val", "target_test")]
    shifted = load_csv(paths["target_shifted_test"], True, "target_shifted_test") \
        if paths.get("target_shifted_test") else None
    return (*sets, shifted)


def _load_learned(run: Run, path) -> LowRankGaussian:
    prior, layout = load_prior(path)
    expected = group_layout(run.model.layout)
    if layout.to_dict() != expected.to_dict():
        raise ConfigError("prior", f"{path} was fitted for a different feature extractor layout")
    return prior


def _needs_prior(method: str) -> bool:
    return method not in ("bnn_iso_zero", "map_iso_zero")


def _metrics_row(method, n_train, seed, report, runtime, record):
    return {"method": method, "n_train": n_train, "seed": seed, "error": report.error,
            "nll": report.nll, "ece": report.ece, "runtime_s": runtime if record else None}


def _reliability_rows(report):
    return [{"bin": i, "mid": b.mid, "confidence": b.confidence, "accuracy": b.accuracy,
             "count": b.count} for i, b in enumerate(report.reliability_bins)]


# --- subcommands ---------------------------------------------------------------------

def cmd_pretrain(run: Run, args):
    cfg = run.cfg
    (w, trace), _ = timed(pretrain, run.source_model, run.source, cfg.pretrain, cfg.seed)
    save_checkpoint(run.path("checkpoint.bin"), w, run.source_model.layout)
    run.csv("pretrain_trace.csv", ["step", "energy"],
            [{"step": i + 1, "energy": float(e)} for i, e in enumerate(trace)])
    if cfg.pretrain.loss == "cross_entropy":
        rep = evaluate(bma_predict(run.source_model, [w], run.source.features, run.source.labels))
        print(f"source train error {rep.error:.4f}")
    return w


def cmd_fit_prior(run: Run, args):
    cfg = run.cfg
    ckpt = args.checkpoint or run.path("checkpoint.bin")
    w, layout = load_checkpoint(ckpt)
    if layout.to_dict() != run.source_model.layout.to_dict():
        raise ConfigError("model", f"{ckpt} does not match the configured model")
    pt = cfg.pretrain
    learned, _ = fit_swag_prior(run.source_model, w, run.source, pt.loss_kind(), cfg.swag.spec(),
                                cfg.seed, pt.weight_var, (pt.aug_noise, pt.aug_scale))
    save_prior(run.path("prior.bin"), learned, group_layout(run.source_model.layout))
    print(f"prior: d={learned.dim} rank={learned.rank}")
    return learned


def _sweep_point(model, train, val, learned, spec, seed, n_bins):
    params = run_downstream(model, train, learned, spec, seed)
    return evaluate(bma_predict(model, params, val.features, val.labels), n_bins)


def cmd_rescale_sweep(run: Run, args):
    cfg = run.cfg
    if not cfg.inference.method.endswith("learned"):
        raise ConfigError("inference.method", "the scale sweep needs a learned-prior method")
    learned = _load_learned(run, args.prior or run.path("prior.bin"))
    grid = [(lam, hv) for lam in sorted(cfg.prior.lam_grid) for hv in sorted(cfg.prior.head_var_grid)]
    specs = [run.downstream(lam=lam, head_var=hv) for lam, hv in grid]
    job = partial(_sweep_point, run.model, run.train, run.val, learned, seed=cfg.seed,
                  n_bins=cfg.eval.n_bins)
    with run.pool() as pool:
        reports = list((pool.map if pool else map)(job, specs))
    rows = [{"lambda": lam, "head_var": hv, "val_error": r.error, "val_nll": r.nll, "val_ece": r.ece}
            for (lam, hv), r in zip(grid, reports)]
    lam, hv = select_best(rows)
    run.csv("sweep.csv", ["lambda", "head_var", "val_error", "val_nll", "val_ece"], rows)
    with open(run.path("best.json"), "w", encoding="utf-8") as fh:
        json.dump({"lambda": lam, "head_var": hv}, fh, sort_keys=True)
        fh.write("\n")
    print(f"selected lambda={lam:g} head_var={hv:g}")
    return lam, hv


def select_best(rows):
    """Lowest validation error; ties go to the smaller scale, then the smaller head variance."""
    best = min(rows, key=lambda r: (r["val_error"], r["lambda"], r["head_var"]))
    return best["lambda"], best["head_var"]


def _chosen_scale(run: Run, args):
    lam, hv = args.lam, args.head_var
    best = run.path("best.json")
    if (lam is None or hv is None) and os.path.exists(best):
        with open(best, encoding="utf-8") as fh:
            b = json.load(fh)
        lam = b["lambda"] if lam is None else lam
        hv = b["head_var"] if hv is None else hv
    return lam, hv


def cmd_infer(run: Run, args):
    cfg = run.cfg
    lam, hv = _chosen_scale(run, args)
    spec = run.downstream(args.method, lam, hv)
    learned = _load_learned(run, args.prior or run.path("prior.bin")) if _needs_prior(spec.method) else None
    params, runtime = timed(run_downstream, run.model, run.train, learned, spec, cfg.seed)
    if spec.method.startswith("bnn"):
        k = spec.sampler.samples_per_chain
        save_samples(run.path(f"samples_{spec.method}.bin"),
                     [(i // k, i % k, w) for i, w in enumerate(params)], run.model.layout)
    else:
        save_checkpoint(run.path(f"params_{spec.method}.bin"), params[0], run.model.layout)
    reports = _report(run, spec.method, params, runtime, f"metrics_{spec.method}")
    return params, reports


def _report(run: Run, method, params, runtime, stem):
    cfg = run.cfg
    splits = [("", run.test)]
    if cfg.eval.shifted_test:
        if run.shifted is None:
            raise ConfigError("eval.shifted_test", "no shifted test set available")
        splits.append(("_shifted", run.shifted))
    reports = []
    for suffix, ds in splits:
        rep = evaluate(bma_predict(run.model, params, ds.features, ds.labels), cfg.eval.n_bins)
        run.csv(f"{stem}{suffix}.csv", METRIC_COLUMNS,
                [_metrics_row(method, len(run.train), cfg.seed, rep, runtime, cfg.eval.record_runtime)])
        run.csv(f"reliability_{stem.removeprefix('metrics_')}{suffix}.csv",
                ["bin", "mid", "confidence", "accuracy", "count"], _reliability_rows(rep))
        print(f"{method}{suffix}: error {rep.error:.4f} nll {rep.nll:.4f} ece {rep.ece:.4f}")
        reports.append(rep)
    return reports


def _ablation_run(model, train, test, spec, prior, seed):
    params = run_downstream(model, train, prior, spec, seed)
    return evaluate(bma_predict(model, params, test.features, test.labels)).error


def cmd_analyze(run: Run, args):
    cfg, an = run.cfg, run.cfg.analysis
    learned = _load_learned(run, args.prior or run.path("prior.bin"))
    what = set(args.what.split(","))
    unknown = what - {"scan", "rank", "lambda"}
    if unknown:
        raise ConfigError("--what", f"unknown analyses {sorted(unknown)}")
    out = {}
    if "scan" in what:
        out["scan"] = directions_scan(run.model, learned, run.train, run.test, an.top_k, an.n_random,
                                      an.grid, cfg.seed)
        rows = [{"origin": origin, "direction": i, "t": t, "loss": float(loss)}
                for origin, scan in out["scan"].items()
                for i, line in enumerate(scan.losses) for t, loss in zip(scan.grid, line)]
        run.csv("scan.csv", ["origin", "direction", "t", "loss"], rows)
    lam, hv = _chosen_scale(run, args)
    spec = run.downstream(an.method, lam, hv)
    seeds = [cfg.seed + i for i in range(an.n_seeds)]
    job = partial(_ablation_run, run.model, run.train, run.test, spec)
    with run.pool() as pool:
        if "rank" in what:
            ranks = an.ranks if an.ranks is not None else list(range(learned.rank + 1))
            rows = rank_ablation(learned.rescale(spec.lam), ranks, job, seeds, pool)
            out["rank"] = rows
            run.csv("rank_ablation.csv", ["rank", "mean_error", "se", "n_seeds"],
                    [dict(r, n_seeds=len(seeds)) for r in rows])
        if "lambda" in what:
            lams = an.lambdas if an.lambdas is not None else cfg.prior.lam_grid
            rows = lambda_sweep(learned, lams, job, seeds, pool)
            out["lambda"] = rows
            run.csv("lambda_sweep.csv", ["lambda", "mean_error", "se", "n_seeds"],
                    [dict(r, n_seeds=len(seeds)) for r in rows])
    return out


def directions_scan(model, learned, train, test, top_k, n_random, grid, seed):
    """Filter-normalized scans along the top singular and random directions.

    The base point is the prior mean with a head fitted on frozen features;
    only feature-extractor parameters are perturbed.
    """
    base = fit_head(model, learned.mean, train, seed)
    top = top_singular_directions(learned, min(top_k, learned.rank))
    rnd = random_directions(learned.dim, n_random, seed)
    testset = (test.features, test.labels)
    return {"top_singular": perturbation_scan(model, base, top, grid, testset),
            "random": perturbation_scan(model, base, rnd, grid, testset)}


def cmd_ensemble(run: Run, args):
    cfg = run.cfg
    k = args.k if args.k is not None else cfg.ensemble.k
    if k < 1:
        raise ConfigError("ensemble.k", "must be at least 1")
    spec = run.downstream("map_transfer")
    learned = _load_learned(run, args.prior or run.path("prior.bin"))
    seeds = member_seeds(cfg.seed, k)
    params, runtime = timed(ensemble_params, run.model, run.train, learned, spec, seeds)
    return params, _report(run, f"ensemble_{k}", params, runtime, "metrics_ensemble")


def member_seeds(seed: int, k: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence([seed, 31]).generate_state(k)]


def cmd_evaluate(run: Run, args):
    cfg = run.cfg
    params, layout = load_params(args.params)
    if layout.to_dict() != run.model.layout.to_dict():
        raise ConfigError("model", f"{args.params} does not match the configured target model")
    ds = load_csv(args.data, True) if args.data else {"test": run.test, "val": run.val,
                                                       "shifted": run.shifted}[args.split]
    if ds is None:
        raise ConfigError("--split", "no shifted test set available")
    rep = evaluate(bma_predict(run.model, params, ds.features, ds.labels), cfg.eval.n_bins)
    stem = os.path.splitext(os.path.basename(args.params))[0]
    run.csv(f"eval_{stem}.csv", METRIC_COLUMNS,
            [_metrics_row(stem, len(run.train), cfg.seed, rep, None, False)])
    run.csv(f"reliability_eval_{stem}.csv", ["bin", "mid", "confidence", "accuracy", "count"],
            _reliability_rows(rep))
    print(f"{stem}: error {rep.error:.4f} nll {rep.nll:.4f} ece {rep.ece:.4f}")
    return rep


# --- argument parsing --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config (defaults are used when omitted)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out-dir", default=".", help="directory for all outputs")
    common.add_argument("--threads", type=int, default=1, help="worker processes for grid runs")

    p = argparse.ArgumentParser(prog="learnedprior", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="train the source model")
    s = sub.add_parser("fit-prior", parents=[common], help="fit the SWAG prior from a checkpoint")
    s.add_argument("--checkpoint")
    for name, helptext in [("rescale-sweep", "select the prior scale on validation data"),
                           ("infer", "downstream MAP or MCMC inference"),
                           ("analyze", "loss-geometry scans and ablations"),
                           ("ensemble", "deep-ensemble baseline")]:
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--prior", help="PriorBundle path (default OUT_DIR/prior.bin)")
        if name in ("infer", "analyze"):
            s.add_argument("--lambda", dest="lam", type=float)
            s.add_argument("--head-var", type=float)
        if name == "infer":
            s.add_argument("--method", help="overrides inference.method")
        if name == "analyze":
            s.add_argument("--what", default="scan,rank,lambda")
        if name == "ensemble":
            s.add_argument("--k", type=int)
    s = sub.add_parser("evaluate", parents=[common], help="score saved parameters")
    s.add_argument("--params", required=True, help="checkpoint or sample-set file")
    s.add_argument("--split", choices=["test", "val", "shifted"], default="test")
    s.add_argument("--data", help="labelled CSV to score instead of a configured split")
    return p


COMMANDS = {"pretrain": cmd_pretrain, "fit-prior": cmd_fit_prior,
            "rescale-sweep": cmd_rescale_sweep, "infer": cmd_infer, "analyze": cmd_analyze,
            "ensemble": cmd_ensemble, "evaluate": cmd_evaluate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigError("--threads", "must be at least 1")
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed", "must be non-negative")
            cfg = cfg.with_seed(args.seed)
        if getattr(args, "method", None):
            try:
                cfg = replace(cfg, inference=replace(cfg.inference, method=args.method))
            except ValueError as e:
                raise ConfigError("--method", str(e)) from None
        os.makedirs(args.out_dir, exist_ok=True)
        COMMANDS[args.command](Run(cfg, args.out_dir, args.threads), args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, CsvFormatError, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
