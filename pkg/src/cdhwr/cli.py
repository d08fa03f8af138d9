"""Command-line interface: ``cdhwr <command> [flags]``.

Exit codes: 0 success, 1 runtime fault, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import data, dct, preprocess, train
from .ctc import lexicon_correct, load_lexicon
from .network import load_checkpoint

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("cdhwr")

DEFAULT_SEED = 0
# train flags that may also come from a --config file
TRAIN_KEYS = {"data": None, "index": None, "images": None, "mode": "normal", "epochs": 50,
              "batch": 50, "lr": 0.001, "seed": DEFAULT_SEED, "out": "runs/latest",
              "quality": None, "decode": "best", "overfit": False, "target_wa": None,
              "target_cer": None, "include_err": False}


class UsageError(Exception):
    pass


def _corpus_paths(args) -> tuple[Path, Path]:
    if args.data:
        root = Path(args.data)
        return root / "words.txt", root / "words"
    if args.index and args.images:
        return Path(args.index), Path(args.images)
    raise UsageError("give --data DIR or both --index and --images")


def _load_samples(args) -> list[data.Sample]:
    index, images = _corpus_paths(args)
    if not index.exists():
        raise FileNotFoundError(f"index file not found: {index}")
    samples = data.load_iam(index, images, include_err=getattr(args, "include_err", False))
    if not samples:
        raise ValueError(f"no usable samples in {index}")
    return samples


def _read_image(path) -> np.ndarray:
    if not Path(path).exists():
        raise FileNotFoundError(f"input image not found: {path}")
    return preprocess.load_gray(path)


# ---------------------------------------------------------------------------
# commands

def cmd_compress(args) -> int:
    plane = preprocess.preprocess(_read_image(args.input))
    quant = dct.jpeg_quant_table(args.block, args.quality) if args.quality else None
    img = dct.compress_image(plane, args.block, quant, args.quality or 0)
    dct.write_cdct(args.output, img)
    c = img.coeffs
    print(f"wrote {args.output}: block {args.block}x{args.block}, "
          f"{'quality ' + str(args.quality) if args.quality else 'unquantized'}")
    print(f"coefficients: min {c.min():.4f} max {c.max():.4f} mean|c| {np.abs(c).mean():.4f} "
          f"zeros {100 * np.mean(c == 0):.1f}%")
    return 0


def cmd_preprocess(args) -> int:
    plane = preprocess.preprocess(_read_image(args.input))
    out = Path(args.output)
    if out.suffix == ".npy":
        np.save(out, plane)
    else:
        preprocess.save_gray(out, preprocess.denormalize_transpose(plane))
    print(f"wrote {out}: plane {plane.shape[0]}x{plane.shape[1]}")
    return 0


def cmd_gen_toy(args) -> int:
    words = data.TOY_WORDS[:args.words]
    samples = data.gen_toy(words, args.renders, seed=args.seed)
    index = data.write_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples ({len(words)} words x {args.renders}) to {index}")
    return 0


def resolve_train_options(args) -> dict:
    """Flags override the --config file, which overrides the defaults."""
    opts = dict(TRAIN_KEYS)
    if args.config:
        with open(args.config, "rb") as fh:
            doc = tomllib.load(fh)
        doc = doc.get("train", doc)
        unknown = set(doc) - set(TRAIN_KEYS)
        if unknown:
            raise UsageError(f"unknown keys in {args.config}: {', '.join(sorted(unknown))}")
        opts.update(doc)
    for key in TRAIN_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            opts[key] = value
    return opts


def plot_history(history: list[dict], path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = [h["epoch"] for h in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(epochs, [h["mean_loss"] for h in history], marker=".")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("mean CTC loss")
    with_cer = [h for h in history if "cer" in h]
    ax2.plot([h["epoch"] for h in with_cer], [h["cer"] for h in with_cer], marker=".", label="CER")
    ax2.plot([h["epoch"] for h in with_cer], [h["wa"] for h in with_cer], marker=".", label="WA")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("%")
    ax2.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_train(args) -> int:
    opts = resolve_train_options(args)
    ns = argparse.Namespace(**opts)
    samples = _load_samples(ns)
    vocab = data.build_vocab(samples)
    if opts["overfit"]:
        split = data.Split(samples, samples, opts["seed"])
    else:
        split = data.split_95_5(samples, seed=opts["seed"])
    config = train.TrainConfig(epochs=opts["epochs"], batch_size=opts["batch"], lr=opts["lr"],
                               mode=opts["mode"], quality=opts["quality"], seed=opts["seed"],
                               checkpoint_dir=opts["out"], decode=opts["decode"],
                               target_wa=opts["target_wa"], target_cer=opts["target_cer"])
    print(f"training on {len(split.train)} samples, testing on {len(split.test)}, "
          f"vocabulary {len(vocab)} characters, mode {config.mode}")
    result = train.train_loop(split, vocab, config)
    out = Path(opts["out"])
    if result.history:
        plot_history(result.history, out / "curves.png")
        last = result.history[-1]
        print(f"finished after {last['epoch']} epochs: loss {last['mean_loss']:.4f}"
              + (f", CER {last['cer']:.2f}, WA {last['wa']:.2f}" if "cer" in last else ""))
    else:
        print("no epochs run; wrote the initial checkpoint")
    print(f"checkpoints and log in {out}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(_existing(args.model))
    samples = _load_samples(args)
    report = train.evaluate(ckpt, samples, decode=args.decode, mode=args.mode)
    print(report.table())
    if args.json:
        Path(args.json).write_text(report.to_json(model=str(args.model), decode=args.decode))
    return 0


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(_existing(args.model))
    vocab = data.CharVocab(ckpt.vocab)
    lexicon = load_lexicon(args.lexicon) if args.lexicon else None
    mode = ckpt.meta.get("input_mode", "normal")
    if args.mode is not None and args.mode != mode:
        raise ValueError(f"checkpoint was trained on {mode!r} inputs, not {args.mode!r}")
    planes = np.stack([dct.encode_plane(preprocess.preprocess(_read_image(p)), mode,
                                        ckpt.meta.get("quality")) for p in args.input])
    preds = train.predict(ckpt.model, planes.astype(np.float32), vocab, args.decode)
    for path, raw in zip(args.input, preds):
        print(f"{path}: {raw} (without correction)")
        if lexicon is not None:
            print(f"{path}: {lexicon_correct(raw, lexicon)} (with correction)")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    results = run_selftest()
    for r in results:
        print(f"[{'PASS' if r.passed else 'FAIL'}] {r.name} ({r.seconds:.1f}s): {r.detail}")
    return 0 if all(r.passed for r in results) else 1


def _existing(path):
    if not Path(path).exists():
        raise FileNotFoundError(f"file not found: {path}")
    return path


# ---------------------------------------------------------------------------

def _add_corpus_flags(p, defaults_none=False):
    p.add_argument("--data", help="corpus directory holding words.txt and words/")
    p.add_argument("--index", help="IAM words index file")
    p.add_argument("--images", help="root of the IAM word images")
    p.add_argument("--include-err", action="store_true", default=None if defaults_none else False,
                   help="keep samples whose segmentation is flagged err")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdhwr", description="Handwritten word recognition "
                                     "on raw or block-DCT compressed images.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compress", help="write the block-DCT stream of a preprocessed image")
    p.add_argument("--input", required=True)
    p.add_argument("--block", type=int, choices=dct.SUPPORTED_BLOCKS, required=True)
    p.add_argument("--quality", type=int, choices=range(1, 101), metavar="1..100")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("preprocess", help="contrast stretch, resize and pad an image")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True, help=".png for the 128x32 image, .npy for the plane")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("gen-toy", help="render a synthetic word corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--words", type=int, default=30, choices=range(1, len(data.TOY_WORDS) + 1),
                   metavar=f"1..{len(data.TOY_WORDS)}")
    p.add_argument("--renders", type=int, default=10)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.set_defaults(func=cmd_gen_toy)

    p = sub.add_parser("train", help="train a recognizer")
    p.add_argument("--config", help="TOML file with train options (flags take precedence)")
    _add_corpus_flags(p, defaults_none=True)
    p.add_argument("--mode", choices=train.INPUT_MODES)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--quality", type=int, choices=range(1, 101), metavar="1..100")
    p.add_argument("--decode", choices=("best", "beam"))
    p.add_argument("--overfit", action="store_true", default=None,
                   help="evaluate on the training set instead of a 95:5 split")
    p.add_argument("--target-wa", type=float, help="stop once test WA reaches this")
    p.add_argument("--target-cer", type=float, help="with --target-wa, also require CER at most this")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a corpus")
    p.add_argument("--model", required=True)
    _add_corpus_flags(p)
    p.add_argument("--decode", choices=("best", "beam"), default="best")
    p.add_argument("--mode", choices=train.INPUT_MODES,
                   help="expected input mode; rejected if the checkpoint differs")
    p.add_argument("--json", help="write the report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="recognize word images")
    p.add_argument("--model", required=True)
    p.add_argument("--input", nargs="+", required=True)
    p.add_argument("--decode", choices=("best", "beam"), default="best")
    p.add_argument("--mode", choices=train.INPUT_MODES)
    p.add_argument("--lexicon", help="word list (one per line) for nearest-word correction")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("selftest", help="run the fast oracle checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def _thread_limit():
    value = os.environ.get("CDHWR_THREADS")
    if not value:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(value))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as err:
        parser.print_usage(sys.stderr)
        print(f"cdhwr: error: {err}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, FloatingPointError) as err:
        print(f"cdhwr: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
