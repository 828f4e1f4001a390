"""Command-line front end.

Subcommands: pretrain, train, analyze, evaluate, make-fixtures, make-corpus,
inspect. Parameters resolve as built-in defaults, then the JSON config file
given with --config, then explicit command-line flags (highest priority).
Every command that writes files also writes the resolved configuration as
``config.json`` in its output directory.

Exit codes: 0 success, 2 invalid input or usage, 3 pipeline failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import fingerprint as fpmod
from . import imageio, plotting
from .errors import ComprintError, InputError, PipelineError
from .evaluation import Pipeline, detection_statistic, evaluate_dataset, max_f1
from .fixtures import make_fixture_set, texture
from .jpeg_sim import CompressionClassRegistry, load_photoshop_tables, nearest_standard_qf, parse_dqt
from .localization import PROVIDER_NAMES, LocalizationConfig, localize, make_providers

log = logging.getLogger("comprint")

EXIT_OK, EXIT_INPUT, EXIT_PIPELINE = 0, 2, 3

CORPUS_SIZE = 200
PRETRAIN_PRESETS = {"desk": fpmod.DESK_PRETRAIN, "full": fpmod.TrainingConfig()}


# ---------------------------------------------------------------- config


def _load_config(path):
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise InputError(f"no such config file: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise InputError(f"{path}: top level must be an object")
    return cfg


def _merge(dc, section, flags, name):
    """Apply a config-file section, then non-None flags, to dataclass `dc`."""
    known = {f.name for f in fields(dc)}
    section = section or {}
    unknown = set(section) - known
    if unknown:
        raise InputError(f"unknown {name} config keys: {', '.join(sorted(unknown))}")
    values = dict(section)
    values.update({k: v for k, v in flags.items() if v is not None and k in known})
    return replace(dc, **values)


def _write_config(out_dir, resolved):
    Path(out_dir, "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")


def _out_dir(path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _training_setup(args, cfg, pretrain):
    preset = args.preset or cfg.get("preset", "desk")
    if preset not in fpmod.PRESETS:
        raise InputError(f"unknown preset {preset!r}; choose from {', '.join(fpmod.PRESETS)}")
    spec, train_cfg = fpmod.PRESETS[preset]
    if pretrain:
        train_cfg = PRETRAIN_PRESETS[preset]
    spec = _merge(spec, cfg.get("model"), {}, "model")
    flags = {"epochs": args.epochs, "batches_per_epoch": args.batches,
             "pairs_per_batch": args.pairs, "seed": args.seed, "lr": args.lr}
    if args.registry:
        flags["registry"] = args.registry.split(",")
    train_cfg = _merge(train_cfg, cfg.get("pretrain" if pretrain else "training"), flags,
                       "training").validate()
    return preset, spec, train_cfg


def _load_corpus(directory, size):
    paths = imageio.list_images(directory, imageio.IMAGE_EXTENSIONS)
    if not paths:
        raise InputError(f"no images in {directory}")
    return [imageio.load_gray(p, size) for p in paths]


def _ps_tables(path):
    return load_photoshop_tables(path) if path else None


def _write_losses(path, result):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, v in enumerate(result.step_losses, start=1):
            w.writerow([i, repr(float(v))])


# ---------------------------------------------------------------- commands


def cmd_pretrain(args):
    cfg = _load_config(args.config)
    preset, spec, train_cfg = _training_setup(args, cfg, pretrain=True)
    images = _load_corpus(args.corpus, args.size or cfg.get("image_size", CORPUS_SIZE))
    out = _out_dir(args.output)
    result = fpmod.pretrain_denoiser(images, train_cfg, spec, _ps_tables(args.tables))
    result.model.save(out / "model.cpm")
    _write_losses(out / "loss.csv", result)
    plotting.loss_figure(out / "loss.png", result.step_losses, result.epoch_losses, "MSE")
    _write_config(out, {"command": "pretrain", "preset": preset, "corpus": str(args.corpus),
                        "model": asdict(spec), "pretrain": train_cfg.to_dict()})
    print(f"final epoch MSE\t{result.epoch_losses[-1]:.6g}")
    print(f"model\t{out / 'model.cpm'}")


def cmd_train(args):
    cfg = _load_config(args.config)
    preset, spec, train_cfg = _training_setup(args, cfg, pretrain=False)
    pretrained = fpmod.FingerprintModel.load(args.pretrained)
    size = args.size or cfg.get("image_size", CORPUS_SIZE)
    images = _load_corpus(args.corpus, size)
    val = _load_corpus(args.validation, size) if args.validation else None
    out = _out_dir(args.output)
    result = fpmod.train_siamese(pretrained, images, train_cfg, val, _ps_tables(args.tables))
    result.model.save(out / "model.cpm")
    _write_losses(out / "loss.csv", result)
    plotting.loss_figure(out / "loss.png", result.step_losses, result.epoch_losses)
    if result.validation:
        keys = sorted(result.validation[0])
        with open(out / "validation.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch"] + keys)
            for i, v in enumerate(result.validation, start=1):
                w.writerow([i] + [repr(float(v[k])) for k in keys])
        final = result.final_validation
        print(f"validation separation\t{final['separation']:.6g}\tp\t{final['mannwhitney_p']:.3g}")
    _write_config(out, {"command": "train", "preset": preset, "pretrained": str(args.pretrained),
                        "corpus": str(args.corpus), "training": train_cfg.to_dict()})
    print(f"model\t{out / 'model.cpm'}")


def _localization_config(args, cfg):
    flags = {"window": args.window, "stride": args.stride, "seed": args.seed,
             "em_restarts": args.em_restarts}
    return _merge(LocalizationConfig(), cfg.get("localization"), flags, "localization")


def _providers_from_args(args):
    names = args.provider or (["comprint"] if args.model else [])
    if not names:
        raise InputError("give --model for the comprint provider, or --provider highpass")
    return names


def cmd_analyze(args):
    cfg = _load_config(args.config)
    opts = _localization_config(args, cfg)
    names = _providers_from_args(args)
    providers = make_providers(names, args.model or ())
    img = imageio.load_gray(args.image)
    out = _out_dir(args.output)

    # keep each fingerprint for the output files
    fps = []

    def keep(name, fn):
        def run(im):
            f = fn(im)
            fps.append((name, f))
            return f
        return (name, run)

    hm = localize(img, [keep(n, f) for n, f in providers], opts)
    score = detection_statistic(hm.scores)
    for name, f in fps:
        imageio.write_pfm(out / f"fingerprint_{name}.pfm", f)
    imageio.write_pfm(out / "heatmap.pfm", hm.scores)
    imageio.save_heatmap_png(out / "heatmap.png", hm.scores)
    mask = imageio.load_mask(args.mask) if args.mask else None
    result = {"image": str(args.image), "score": score, "provenance": hm.provenance,
              "em_weights": [float(w) for w in hm.em.weights],
              "em_iterations": len(hm.em.loglik_trace), "em_converged": hm.em.converged}
    if mask is not None:
        best = max_f1(hm.scores, mask)
        if best is not None:
            result.update(max_f1=best[0], threshold=best[1], orientation=best[2])
    plotting.analysis_figure(out / "analysis.png", img, fps, hm.scores, score, mask)
    Path(out, "result.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    _write_config(out, {"command": "analyze", "providers": names,
                        "models": [str(m) for m in args.model or ()],
                        "localization": opts.to_dict()})
    print(f"score\t{score:.6f}")
    print(f"provenance\t{','.join(hm.provenance)}")
    if "max_f1" in result:
        print(f"max_f1\t{result['max_f1']:.6f}")


def cmd_evaluate(args):
    cfg = _load_config(args.config)
    opts = _localization_config(args, cfg)
    names = _providers_from_args(args)
    make_providers(names, args.model or ())          # fail early on bad models
    pipeline = Pipeline(tuple(names), tuple(str(m) for m in args.model or ()), opts)
    out = _out_dir(args.output)
    report = evaluate_dataset(args.fakes, args.masks, pipeline, args.real, args.workers)
    report.config = {"command": "evaluate", "providers": names,
                     "models": list(pipeline.model_paths), "fakes": str(args.fakes),
                     "masks": str(args.masks), "real": str(args.real) if args.real else None,
                     "localization": opts.to_dict()}
    report.write(out / "report.tsv")
    f1 = [r.f1 for r in report.records if r.kind == "fake" and r.status == "ok"]
    if f1:
        plotting.f1_histogram(out / "f1.png", f1)
    if report.roc_points:
        report.write_roc(out / "roc.tsv")
        plotting.roc_figure(out / "roc.png", report.roc_points, report.auc, "+".join(names))
    _write_config(out, report.config)
    print(report.table())


def cmd_make_fixtures(args):
    cfg = _load_config(args.config).get("fixtures", {})
    n = args.count if args.count is not None else cfg.get("count", 20)
    size = args.size or cfg.get("size", 256)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    classes = args.classes.split(",") if args.classes else cfg.get("classes", ["QF30", "QF90"])
    if n < 1:
        raise InputError("fixture count must be positive")
    registry = CompressionClassRegistry.from_labels(classes, _ps_tables(args.tables))
    if len(registry) < 2:
        raise InputError("splicing needs at least two compression classes")
    out = _out_dir(args.output)
    dirs = {k: _out_dir(out / k) for k in ("fake", "masks", "pristine")}
    fixtures = make_fixture_set(n, list(registry), np.random.default_rng(seed), size)
    with open(out / "fixtures.tsv", "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["name", "host_class", "splice_class", "forged_fraction"])
        for i, fx in enumerate(fixtures):
            name = f"img{i:03d}"
            imageio.save_gray_png(dirs["fake"] / f"{name}.png", fx.fake)
            imageio.save_mask_png(dirs["masks"] / f"{name}_mask.png", fx.mask)
            imageio.save_gray_png(dirs["pristine"] / f"{name}.png", fx.pristine)
            w.writerow([name, fx.host_class, fx.splice_class, f"{fx.mask.mean():.4f}"])
    _write_config(out, {"command": "make-fixtures", "count": n, "size": size, "seed": seed,
                        "classes": classes})
    print(f"{n} fixtures\t{out}")


def cmd_make_corpus(args):
    out = _out_dir(args.output)
    rng = np.random.default_rng(args.seed)
    for i in range(args.count):
        imageio.save_gray_png(out / f"tex{i:04d}.png", texture(rng, args.size))
    _write_config(out, {"command": "make-corpus", "count": args.count, "size": args.size,
                        "seed": args.seed})
    print(f"{args.count} textures\t{out}")


def cmd_inspect(args):
    path = Path(args.jpeg)
    if not path.is_file():
        raise InputError(f"no such file: {path}")
    tables = parse_dqt(path.read_bytes())
    if not tables:
        raise InputError(f"{path}: no quantization tables found")
    print("table\tnearest_qf\tl1_distance")
    for t in tables:
        qf, d = nearest_standard_qf(t)
        print(f"{t.label}\t{qf}\t{d:g}")
        if args.verbose:
            for row in t.values:
                print("  " + " ".join(f"{v:3d}" for v in row))


# ---------------------------------------------------------------- parser


def _training_flags(p):
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--preset", choices=sorted(fpmod.PRESETS), help="model/schedule preset")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batches", type=int, help="batches per epoch")
    p.add_argument("--pairs", type=int, help="pairs per batch")
    p.add_argument("--lr", type=float, help="Adam learning rate")
    p.add_argument("--registry", help="comma-separated classes, e.g. QF30,QF90,PS7")
    p.add_argument("--size", type=int, help="resize corpus images to SIZE x SIZE (default 200)")
    p.add_argument("--tables", help="alternative Photoshop table file")


def _localization_flags(p):
    p.add_argument("--model", action="append", help="fingerprint model file (repeatable)")
    p.add_argument("--provider", action="append", choices=PROVIDER_NAMES,
                   help="fingerprint provider (repeatable; two or more = fusion)")
    p.add_argument("--window", type=int, help="feature window size in pixels")
    p.add_argument("--stride", type=int, help="feature window stride in pixels")
    p.add_argument("--em-restarts", type=int, help="extra random EM initializations")


def build_parser():
    parser = argparse.ArgumentParser(prog="comprint", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--config", help="JSON configuration file")
    parser.add_argument("--seed", type=int)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="pretrain the network as a compression-noise denoiser")
    p.add_argument("corpus", help="directory of training images")
    _training_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="Siamese training from a pretrained model")
    p.add_argument("pretrained", help="pretrained model file")
    p.add_argument("corpus", help="directory of training images")
    p.add_argument("--validation", help="directory of validation images")
    _training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("analyze", help="fingerprint, heatmap and detection score of one image")
    p.add_argument("image")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--mask", help="ground-truth mask, to report max-F1")
    _localization_flags(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("evaluate", help="max-F1 and AUC over a dataset")
    p.add_argument("fakes", help="directory of forged images")
    p.add_argument("masks", help="directory of masks (NAME_mask.png or NAME.png)")
    p.add_argument("--real", help="directory of pristine images, for the AUC")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--workers", type=int, help="worker processes (default: CPU count)")
    _localization_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("make-fixtures", help="generate synthetic splice fixtures")
    p.add_argument("output")
    p.add_argument("-n", "--count", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--classes", help="comma-separated compression classes")
    p.add_argument("--tables", help="alternative Photoshop table file")
    p.set_defaults(func=cmd_make_fixtures)

    p = sub.add_parser("make-corpus", help="generate synthetic training textures")
    p.add_argument("output")
    p.add_argument("-n", "--count", type=int, default=50)
    p.add_argument("--size", type=int, default=200)
    p.set_defaults(func=cmd_make_corpus)

    p = sub.add_parser("inspect", help="list the quantization tables of a JPEG file")
    p.add_argument("jpeg")
    p.add_argument("--tables-verbose", dest="verbose", action="store_true",
                   help="also print the table entries")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "make-corpus" and args.seed is None:
        args.seed = 0
    try:
        args.func(args)
    except InputError as exc:
        print(f"comprint {args.command}: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (PipelineError, ComprintError) as exc:
        print(f"comprint {args.command}: pipeline error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    except OSError as exc:
        print(f"comprint {args.command}: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
