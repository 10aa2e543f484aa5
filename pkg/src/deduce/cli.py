"""Command line entry point: train, fit-gmm, explain, bench, ablate, report.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import baselines, classifier, engine, evaluation, feature_density, kernels
from .config import RunConfig, load_config
from .data_io import generate_synthetic, load_idx, read_pgm, write_pgm
from .errors import ConfigError, FormatError, InputError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("deduce")


class DataError(Exception):
    pass


def _load_dataset(cfg: RunConfig, data_arg):
    """Resolve --data: 'synthetic', a directory holding IDX files, or 'IMAGES,LABELS'."""
    source = data_arg or cfg.data.source
    try:
        if source == "synthetic":
            return generate_synthetic(cfg.data.synthetic_spec())
        if source == "idx":
            if not cfg.data.images or not cfg.data.labels:
                raise DataError("data.source is 'idx' but data.images/data.labels are unset")
            return load_idx(cfg.data.images, cfg.data.labels)
        if "," in source:
            images, labels = source.split(",", 1)
            return load_idx(images, labels)
        path = Path(source)
        if path.is_dir():
            imgs = sorted(path.glob("*images*idx3*"))
            labs = sorted(path.glob("*labels*idx1*"))
            if not imgs or not labs:
                raise DataError(f"no IDX image/label files in {path}")
            return load_idx(imgs[0], labs[0])
        raise DataError(f"data path {source} does not exist")
    except (OSError, FormatError, InputError) as exc:
        raise DataError(str(exc)) from None


def _splits(cfg, dataset):
    return dataset.split(cfg.data.test_fraction, cfg.data.split_seed)


def _fit_gmm(cfg, model, train_set):
    feats = classifier.extract_features_batch(model, train_set.images)
    gmm = feature_density.fit(feats, train_set.labels, train_set.class_count,
                              cfg.gmm.jitter, cfg.gmm.jitter_floor)
    gmm = feature_density.with_threshold(gmm, feats, cfg.gmm.nll_percentile)
    return gmm, feats


def _echo(cfg):
    print("effective config: " + json.dumps(cfg.echo(), sort_keys=True))


def cmd_train(args, cfg):
    dataset = _load_dataset(cfg, args.data)
    train_set, test_set = _splits(cfg, dataset)
    model = classifier.train(train_set, cfg.train, test_set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.meta["effective_config"] = cfg.echo()
    classifier.save_model(model, out / "model.ckpt")
    print(f"train accuracy {model.train_accuracy:.4f}")
    print(f"test accuracy  {model.test_accuracy:.4f}")
    print(f"wrote {out / 'model.ckpt'}")
    return EXIT_OK


def _load_model(path):
    try:
        return classifier.load_model(path)
    except (OSError, FormatError, InputError) as exc:
        raise DataError(f"cannot read model {path}: {exc}") from None


def cmd_fit_gmm(args, cfg):
    model = _load_model(args.model)
    dataset = _load_dataset(cfg, args.data)
    if dataset.images.shape[1] != model.input_dim:
        raise DataError("dataset image size does not match the model input")
    train_set, _ = _splits(cfg, dataset)
    gmm, feats = _fit_gmm(cfg, model, train_set)
    model.gmm = gmm
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    classifier.save_model(model, out / "model.ckpt")
    nll = feature_density.epistemic_nll(gmm, feats)
    for c in range(gmm.class_count):
        sel = nll[train_set.labels == c]
        print(f"class {c}: n={sel.size} mean NLL {sel.mean():.4f} std {sel.std():.4f}")
    print(f"NLL {cfg.gmm.nll_percentile:g}th percentile threshold {gmm.nll_threshold:.6f}")
    print(f"wrote {out / 'model.ckpt'}")
    return EXIT_OK


def _search_from_args(cfg, args):
    search = cfg.search
    overrides = {
        "target_confidence": args.gamma, "step_size": args.delta,
        "pixels_per_step": args.pixels, "per_pixel_cap": args.cap,
        "max_iter": args.max_iter, "mu": args.mu, "lam": args.lam,
        "momentum": args.momentum, "gradient_mode": args.mode,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    try:
        return replace(search, **overrides)
    except InputError as exc:
        raise ConfigError("search", str(exc)) from None


def cmd_explain(args, cfg):
    model = _load_model(args.model)
    search = _search_from_args(cfg, args)
    image_arg = str(args.image)
    if image_arg.isdigit():
        dataset = _load_dataset(cfg, args.data)
        _, test_set = _splits(cfg, dataset)
        idx = int(image_arg)
        if idx >= len(test_set):
            raise DataError(f"image id {idx} outside test split of {len(test_set)}")
        x, h, w = test_set.images[idx], test_set.height, test_set.width
    else:
        try:
            x, h, w = read_pgm(image_arg)
        except (OSError, InputError) as exc:
            raise DataError(str(exc)) from None
    if x.shape[0] != model.input_dim:
        raise DataError("image size does not match the model input")
    if not 0 <= args.target < model.class_count:
        raise ConfigError("--target", f"class {args.target} out of range")
    gmm = model.gmm
    if args.generator == "deduce" and gmm is None:
        raise DataError("model checkpoint has no fitted GMM; run fit-gmm first")

    _, pred = classifier.predict(model, x)
    if pred == args.target:
        print(f"warning: target {args.target} is already the predicted class", file=sys.stderr)

    t0 = time.perf_counter_ns()
    if args.generator == "deduce":
        res = engine.generate(model, gmm, x, args.target, search)
    elif args.generator == "jsma":
        res = baselines.jsma_generate(model, x, args.target, search)
    else:
        wcfg = replace(cfg.wachter, target_confidence=search.target_confidence)
        res = baselines.wachter_generate(model, x, args.target, wcfg)
    wall_ms = (time.perf_counter_ns() - t0) / 1e6

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    diff = np.abs(res.x_final - x)
    if diff.max() > 0:
        diff = diff / diff.max()
    write_pgm(x, out / "original.pgm", h, w)
    write_pgm(res.x_final, out / "counterfactual.pgm", h, w)
    write_pgm(diff, out / "diff.pgm", h, w)
    record = {
        "set": 0,
        "image_id": image_arg,
        "source_class": int(pred),
        "target_class": int(args.target),
        "generator": args.generator,
        "success": bool(res.success),
        "iterations": int(res.iterations),
        "l0": evaluation.l0_distance(x, res.x_final),
        "l1": evaluation.l1_distance(x, res.x_final),
        "nll_realism": evaluation.realism_score(model, gmm, res.x_final) if gmm is not None else None,
        "wall_ms": wall_ms,
        "final_target_confidence": res.final_target_confidence,
        "effective_search": {k: getattr(search, k) for k in search.__dataclass_fields__},
    }
    with open(out / "result.json", "w") as fh:
        json.dump(record, fh, indent=2)
        fh.write("\n")
    print(json.dumps({k: record[k] for k in evaluation.LEDGER_FIELDS}))
    return EXIT_OK


def _prepare(cfg, args):
    """Model (with GMM) and test split for benchmark commands."""
    dataset = _load_dataset(cfg, args.data)
    train_set, test_set = _splits(cfg, dataset)
    if args.model:
        model = _load_model(args.model)
    else:
        model = classifier.train(train_set, cfg.train, test_set)
        print(f"trained model: test accuracy {model.test_accuracy:.4f}")
    if model.gmm is None:
        model.gmm, _ = _fit_gmm(cfg, model, train_set)
    return model, test_set


def _workers(cfg, args):
    if args.workers is not None:
        return replace(cfg.benchmark.spec(), workers=args.workers)
    return cfg.benchmark.spec()


def _write_reports(out, rows, echo):
    text = evaluation.render_table(rows, echo)
    (out / "report.txt").write_text(text)
    (out / "report.csv").write_text(evaluation.render_csv(rows))
    return text


def cmd_bench(args, cfg):
    model, test_set = _prepare(cfg, args)
    spec = _workers(cfg, args)
    gens = evaluation.make_generators(model, model.gmm, cfg.search, cfg.wachter, spec.generators)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump = out / "images" if cfg.benchmark.dump_images else None
    rows, ledger = evaluation.run_benchmark(spec, model, model.gmm, test_set, gens, dump)
    evaluation.write_ledger(ledger, out / "ledger.csv")
    echo = cfg.echo()
    (out / "config.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")
    # the inline report is rendered from the persisted ledger, like cmd_report
    rows = evaluation.aggregate(evaluation.read_ledger(out / "ledger.csv"), list(gens))
    print(_write_reports(out, rows, echo), end="")
    return EXIT_OK


def cmd_ablate(args, cfg):
    model, test_set = _prepare(cfg, args)
    spec = _workers(cfg, args)
    modes = evaluation.ablation_modes(cfg.benchmark.ablation_lambdas, cfg.benchmark.ablation_mus)
    gens = evaluation.ablation_generators(model, model.gmm, cfg.search, modes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, ledger = evaluation.run_benchmark(spec, model, model.gmm, test_set, gens)
    evaluation.write_ledger(ledger, out / "ablation_ledger.csv")
    echo = cfg.echo()
    (out / "config.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")
    text = evaluation.render_ablation(rows, echo)
    (out / "ablation.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_report(args, cfg):
    ledger_path = Path(args.ledger)
    try:
        ledger = evaluation.read_ledger(ledger_path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read ledger {ledger_path}: {exc}") from None
    echo = None
    sidecar = ledger_path.with_name("config.json")
    if sidecar.exists():
        echo = json.loads(sidecar.read_text())
    rows = evaluation.aggregate(ledger)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        text = _write_reports(out, rows, echo)
    else:
        text = evaluation.render_table(rows, echo)
    print(text, end="")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="deduce", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--backend", choices=sorted(kernels.BACKENDS),
                   help="kernel backend (default: compiled when available)")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="JSON config (defaults apply when omitted)")
        if data:
            sp.add_argument("--data", help="'synthetic', an IDX directory, or IMAGES,LABELS")

    sp = sub.add_parser("train", help="train the classifier")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("fit-gmm", help="fit the class-conditional feature GMM")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_fit_gmm)

    sp = sub.add_parser("explain", help="generate one counterfactual")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--image", required=True, help="test-split index or PGM path")
    sp.add_argument("--target", type=int, required=True)
    sp.add_argument("--generator", choices=("deduce", "jsma", "wachter"), default="deduce")
    sp.add_argument("--out", required=True)
    sp.add_argument("--gamma", type=float)
    sp.add_argument("--delta", type=float)
    sp.add_argument("--pixels", type=int)
    sp.add_argument("--cap", type=int)
    sp.add_argument("--max-iter", type=int)
    sp.add_argument("--mu", type=float)
    sp.add_argument("--lam", type=float)
    sp.add_argument("--momentum", type=float)
    sp.add_argument("--mode", choices=(engine.NORMALIZED, engine.WEIGHTED))
    sp.set_defaults(func=cmd_explain)

    for name, fn, helptext in (("bench", cmd_bench, "run the generator benchmark"),
                               ("ablate", cmd_ablate, "run the objective ablation")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--model", help="checkpoint; trained from config when omitted")
        sp.add_argument("--out", required=True)
        sp.add_argument("--workers", type=int, help="worker threads (env DEDUCE_WORKERS wins)")
        sp.set_defaults(func=fn)

    sp = sub.add_parser("report", help="rebuild report tables from a ledger CSV")
    sp.add_argument("--ledger", required=True)
    sp.add_argument("--out")
    sp.add_argument("--config", help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.backend:
        kernels.set_backend(args.backend)
    try:
        cfg = load_config(args.config)
        if args.command != "report":
            _echo(cfg)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        if args.command != "report" and getattr(args, "config", None) and \
                not Path(args.config).exists():
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (InputError, RuntimeError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
