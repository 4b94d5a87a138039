"""Command-line entry point: ``semcolor <command> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from semcolor import CHECKPOINT_FORMAT_VERSION, __version__
from semcolor import analysis, dataset, eecnn, nstcnn, prepost, trainer
from semcolor.colorspace import ChromaMap, RgbImage, lab_to_rgb, merge_l_ab, rgb_to_lab
from semcolor.errors import (
    CheckpointError,
    DivergenceError,
    MaskError,
    SemcolorError,
    ShapeError,
    SurveyValidationError,
)

EXIT_CODES = {
    "ok": 0,
    "internal": 1,
    "usage": 2,
    "io": 3,
    "shape": 4,
    "checkpoint": 5,
    "divergence": 6,
    "mask": 7,
    "invalid": 8,
}

EPILOG = """exit codes:
  0 success          4 shape error         7 mask coverage error
  1 internal error   5 checkpoint error    8 invalid value / survey record
  2 usage error      6 training diverged
  3 missing or unreadable file

Errors print one line to stderr:  error kind=<kind> exit=<code> msg=<json string>
Options may also come from --config FILE (key=value lines); flags win over the file."""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _size(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WIDTHxHEIGHT, got {text!r}")


def _add_common(p):
    p.add_argument("--config", help="key=value file with defaults for this command")
    p.add_argument("--seed", type=int, default=0, help="seed for every random choice")


def _add_net(p):
    p.add_argument("--preset", choices=sorted(eecnn.PRESETS), default="small")
    p.add_argument("--embedder", default="constant",
                   help="'constant' or 'torchvision:<model>' (pretrained weights download on first use)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="semcolor", description=__doc__, epilog=EPILOG,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version",
                        version=f"semcolor {__version__} (checkpoint format {CHECKPOINT_FORMAT_VERSION})")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("dataset-split", help="write a seeded train/test manifest", epilog=EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_common(p)
    p.add_argument("--dir", required=True, help="directory of colourful training images")
    p.add_argument("--ratio", type=float, default=0.9)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--size", type=_size, default=dataset.DEFAULT_SIZE, help="resize target WxH")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train the end-to-end network", epilog=EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_common(p)
    _add_net(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest")
    src.add_argument("--dir")
    p.add_argument("--ratio", type=float, default=0.9)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--size", type=_size, default=dataset.DEFAULT_SIZE)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--min-delta", type=float, default=1e-4)
    p.add_argument("--checkpoint-dir")
    p.add_argument("--checkpoint-every", type=int, default=10)
    p.add_argument("--report", help="CSV of per-epoch losses")
    p.add_argument("--out", required=True, help="checkpoint with the best weights")

    p = sub.add_parser("colorize-ee", help="colorize with trained weights", epilog=EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--embedder", help="override the provider recorded in the checkpoint")
    p.add_argument("--edges", action="store_true", help="fill edge-bounded regions with one colour")
    p.add_argument("--edge-map", help="8-bit edge image to use instead of the gradient detector")
    p.add_argument("--edge-threshold", type=float, default=0.5)
    p.add_argument("--debug-planes", help="directory for L/A/B CSV dumps")

    p = sub.add_parser("colorize-nst", help="colorize from reference image(s)", epilog=EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_common(p)
    _add_net(p)
    p.add_argument("--input", required=True)
    p.add_argument("--reference", action="append", required=True)
    p.add_argument("--mask", action="append", default=[],
                   help="8-bit mask per reference, in the same order; nonzero = coloured by it")
    p.add_argument("--threshold-split", action="store_true",
                   help="two references: adaptive threshold gives the bright part to the first")
    p.add_argument("--window", type=int, default=31)
    p.add_argument("--offset", type=float, default=0.0)
    p.add_argument("--budget", type=int, default=nstcnn.DEFAULT_BUDGET)
    p.add_argument("--fit-threshold", type=float, default=nstcnn.DEFAULT_THRESHOLD)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--bin-width", type=float, default=1.0)
    p.add_argument("--cache-dir", help="reuse fitted weights keyed by reference content")
    p.add_argument("--out", required=True)
    p.add_argument("--debug-planes")

    p = sub.add_parser("analyze", help="saturation / hue / survey statistics", epilog=EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    asub = p.add_subparsers(dest="analysis", required=True, parser_class=_Parser)
    a = asub.add_parser("saturation")
    _add_common(a)
    a.add_argument("--input", required=True)
    a.add_argument("--block-size", type=int, default=1)
    a.add_argument("--out", required=True)
    a.add_argument("--heatmap")
    a = asub.add_parser("hue")
    _add_common(a)
    a.add_argument("--input", required=True)
    a.add_argument("--bins", type=int, default=36)
    a.add_argument("--out", required=True)
    a = asub.add_parser("survey")
    _add_common(a)
    a.add_argument("--records", required=True, help="JSON lines: participant_id, shown, selected")
    a.add_argument("--key", required=True)
    a.add_argument("--out", required=True)

    p = sub.add_parser("survey", help="build a shuffled 16+16 survey", epilog=EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_common(p)
    real = p.add_mutually_exclusive_group(required=True)
    real.add_argument("--real", help="directory or id list of real images")
    real.add_argument("--manifest", help="draw real images from this manifest's test split")
    p.add_argument("--predicted", required=True, help="directory or id list of predictions")
    p.add_argument("--order-out", required=True)
    p.add_argument("--key-out", required=True)
    return parser


def _read_config(path) -> dict:
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _leaf_parser(parser, argv):
    """Walk the subcommand chain of argv to the parser that owns the options."""
    current = parser
    for token in argv:
        actions = [a for a in current._actions if isinstance(a, argparse._SubParsersAction)]
        if actions and token in actions[0].choices:
            current = actions[0].choices[token]
    return current


def _config_path(argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    return known.config


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    config_path = _config_path(argv)
    if config_path:
        leaf = _leaf_parser(parser, argv)
        known = {a.dest: a for a in leaf._actions}
        if "config" not in known:
            raise UsageError("--config belongs after the command name")
        defaults = {}
        for key, raw in _read_config(config_path).items():
            if key not in known or key == "config":
                raise UsageError(f"unknown option {key!r} in {config_path}")
            action = known[key]
            if isinstance(action, argparse._StoreTrueAction):
                defaults[key] = raw.lower() in ("1", "true", "yes", "on")
            elif isinstance(action, argparse._AppendAction):
                defaults[key] = [v.strip() for v in raw.split(",") if v.strip()]
            else:
                try:
                    defaults[key] = action.type(raw) if action.type else raw
                except (ValueError, argparse.ArgumentTypeError) as exc:
                    raise UsageError(f"{config_path}: bad value for {key!r}: {exc}")
        # Options supplied by the file are no longer required on the command line.
        for key in defaults:
            known[key].required = False
        leaf.set_defaults(**defaults)
    return parser.parse_args(argv)


def _load_rgb(path) -> RgbImage:
    return dataset.load_image(path)


def _save_rgb(img: RgbImage, path) -> None:
    Image.fromarray(img.pixels, mode="RGB").save(path, format="PNG")


def _dump_planes(directory, l, ab: ChromaMap) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, plane in (("L", l), ("A", ab.a), ("B", ab.b)):
        np.savetxt(d / f"{name}.csv", plane, fmt="%.6f", delimiter=",")


def _provider(name: str, config: eecnn.EeCnnConfig, seed: int):
    if not config.use_embedding:
        return None
    if name == "constant":
        return eecnn.constant_embedder(config.embedding_dim, seed)
    provider = eecnn.provider_from_name(name)
    if provider.dim != config.embedding_dim:
        raise ShapeError(f"embedder {name} has dim {provider.dim}, config expects {config.embedding_dim}")
    return provider


def _preset(name: str, provider_name: str) -> eecnn.EeCnnConfig:
    config = eecnn.PRESETS[name]
    if provider_name.startswith("torchvision:"):
        model = provider_name.split(":", 1)[1]
        config = dataclasses.replace(config, embedding_dim=eecnn.TorchvisionEmbedder._dims[model])
    return config


def cmd_dataset_split(args) -> None:
    paths = dataset.list_images(args.dir)
    manifest = dataset.make_split(paths, args.ratio, args.split_seed, args.size)
    dataset.save_manifest(manifest, args.out)


def cmd_train(args) -> None:
    if args.manifest:
        manifest = dataset.load_manifest(args.manifest)
    else:
        manifest = dataset.make_split(dataset.list_images(args.dir), args.ratio, args.split_seed, args.size)
    config = _preset(args.preset, args.embedder)
    tc = trainer.TrainConfig(
        learning_rate=args.lr, batch_size=args.batch_size, max_epochs=args.epochs,
        patience=args.patience, min_delta=args.min_delta, seed=args.seed,
        checkpoint_every=args.checkpoint_every,
    )
    provider = _provider(args.embedder, config, args.seed)
    weights, report = trainer.train_eecnn(manifest, config, tc, provider, args.checkpoint_dir)
    trainer.save_checkpoint(weights, args.out)
    if args.report:
        report.write_csv(args.report)


def cmd_colorize_ee(args) -> None:
    weights = trainer.load_checkpoint(args.weights)
    name = args.embedder or weights.meta.get("provider", "constant")
    if name.startswith("constant") and name != "constant":
        provider = eecnn.provider_from_name(name)
    else:
        provider = _provider(name, weights.config, args.seed)
    lab = rgb_to_lab(_load_rgb(args.input))
    ab = eecnn.forward(lab.l, provider, weights)
    if args.edges or args.edge_map:
        detector = None
        if args.edge_map:
            detector = prepost.PrecomputedEdges(prepost.load_edge_png(args.edge_map))
        regions = prepost.label_regions(prepost.detect_edges(lab.l, detector), args.edge_threshold)
        ab = prepost.uniform_fill(ab, regions)
    if args.debug_planes:
        _dump_planes(args.debug_planes, lab.l, ab)
    _save_rgb(lab_to_rgb(merge_l_ab(lab.l, ab)), args.out)


def _fit_cache_key(ref_lab, config, args, provider) -> str:
    h = hashlib.sha256()
    for plane in (ref_lab.l, ref_lab.a, ref_lab.b):
        h.update(np.ascontiguousarray(plane).tobytes())
    h.update(json.dumps(
        [list(ref_lab.l.shape), config.fingerprint(), args.budget, args.fit_threshold, args.lr,
         args.seed, provider.name if provider else None]
    ).encode())
    return h.hexdigest()[:32]


def _fit_cached(ref: nstcnn.ReferenceSpec, config, args, provider) -> nstcnn.FitResult:
    lab = ref.lab()
    path = None
    if args.cache_dir:
        Path(args.cache_dir).mkdir(parents=True, exist_ok=True)
        path = Path(args.cache_dir) / f"{_fit_cache_key(lab, config, args, provider)}.ckpt"
        if path.exists():
            w = trainer.load_checkpoint(path, config)
            loss = float(w.meta["fit_loss"])
            return nstcnn.FitResult(w, loss, int(w.meta["fit_steps"]), loss < args.fit_threshold)
    fit = nstcnn.fit_reference(ref, config, args.budget, args.fit_threshold,
                               provider=provider, learning_rate=args.lr, seed=args.seed)
    if path is not None:
        trainer.save_checkpoint(fit.weights, path)
    return fit


def cmd_colorize_nst(args) -> None:
    config = _preset(args.preset, args.embedder)
    provider = _provider(args.embedder, config, args.seed)
    content = rgb_to_lab(_load_rgb(args.input))
    refs = [_load_rgb(p) for p in args.reference]
    if args.threshold_split:
        if len(refs) != 2 or args.mask:
            raise MaskError("--threshold-split needs exactly two references and no --mask")
        fg = prepost.adaptive_threshold(content.l, args.window, args.offset).labels == 1
        masks = [fg, ~fg]
    elif args.mask:
        if len(args.mask) != len(refs):
            raise MaskError(f"{len(args.mask)} masks for {len(refs)} references")
        masks = [prepost.load_label_png(p) > 0 for p in args.mask]
    else:
        masks = [None] * len(refs)
    specs = tuple(nstcnn.ReferenceSpec(r, m) for r, m in zip(refs, masks))
    job = nstcnn.TransferJob(
        content.l, specs, budget=args.budget, threshold=args.fit_threshold,
        bin_width=args.bin_width, learning_rate=args.lr, seed=args.seed,
    )
    fits = [_fit_cached(ref, config, args, provider) for ref in specs]
    for path, fit in zip(args.reference, fits):
        logging.getLogger(__name__).info("%s: fit loss %.3f after %d steps", path, fit.final_loss, fit.steps)
    ab = nstcnn.transfer(job, config, provider, fits=fits)
    if args.debug_planes:
        _dump_planes(args.debug_planes, content.l, ab)
    _save_rgb(lab_to_rgb(merge_l_ab(content.l, ab)), args.out)


def cmd_analyze(args) -> None:
    if args.analysis == "saturation":
        surface = analysis.saturation_surface(_load_rgb(args.input), args.block_size)
        Path(args.out).write_text(surface.to_csv(), encoding="utf-8")
        if args.heatmap:
            analysis.render_heatmap(surface.values, args.heatmap)
    elif args.analysis == "hue":
        counts = analysis.hue_histogram(_load_rgb(args.input), args.bins)
        edges = analysis.hue_bin_edges(args.bins)
        lines = ["bin_start,bin_end,count"]
        lines += [f"{edges[i]:.6g},{edges[i + 1]:.6g},{c}" for i, c in enumerate(counts)]
        Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    else:
        score = analysis.score_survey(analysis.load_records(args.records), analysis.load_key(args.key))
        lines = ["participant_id,accuracy"]
        lines += [f"{pid},{acc!r}" for pid, acc in score.accuracies.items()]
        lines.append(f"mean,{score.mean!r}")
        Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_ids(source: str) -> list[str]:
    path = Path(source)
    if path.is_dir():
        return [Path(p).name for p in dataset.list_images(path)]
    return [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]


def _pick(ids: list[str], rng: np.random.Generator) -> list[str]:
    if len(ids) < analysis.SURVEY_HALF:
        raise ValueError(f"need at least {analysis.SURVEY_HALF} ids, got {len(ids)}")
    if len(ids) == analysis.SURVEY_HALF:
        return ids
    idx = np.sort(rng.choice(len(ids), analysis.SURVEY_HALF, replace=False))
    return [ids[i] for i in idx]


def cmd_survey(args) -> None:
    rng = np.random.default_rng(args.seed)
    if args.manifest:
        real_ids = dataset.load_manifest(args.manifest).paths("test")
    else:
        real_ids = _read_ids(args.real)
    real = _pick(real_ids, rng)
    predicted = _pick(_read_ids(args.predicted), rng)
    survey = analysis.build_survey(real, predicted, args.seed)
    Path(args.order_out).write_text("\n".join(survey.order) + "\n", encoding="utf-8")
    analysis.save_key(survey.key, args.key_out)


COMMANDS = {
    "dataset-split": cmd_dataset_split,
    "train": cmd_train,
    "colorize-ee": cmd_colorize_ee,
    "colorize-nst": cmd_colorize_nst,
    "analyze": cmd_analyze,
    "survey": cmd_survey,
}


def _fail(kind: str, message) -> int:
    code = EXIT_CODES[kind]
    print(f"error kind={kind} exit={code} msg={json.dumps(str(message))}", file=sys.stderr)
    return code


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        return _fail("usage", exc)
    except OSError as exc:
        return _fail("io", exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except ShapeError as exc:
        return _fail("shape", exc)
    except CheckpointError as exc:
        return _fail("checkpoint", exc)
    except DivergenceError as exc:
        return _fail("divergence", exc)
    except MaskError as exc:
        return _fail("mask", exc)
    except (SurveyValidationError, ValueError) as exc:
        return _fail("invalid", exc)
    except OSError as exc:
        return _fail("io", exc)
    except UsageError as exc:
        return _fail("usage", exc)
    except SemcolorError as exc:
        return _fail("internal", exc)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
