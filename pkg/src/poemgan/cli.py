"""Command-line entry point: ``poemgan <command> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Every command
finishes with one log line naming the files it wrote.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import corpus as C
from .adversary import NoRewardError
from .embedding import VisualPoeticEmbedding, embed_image, expand_dataset
from .evalsuite import build_ngram_stats, evaluate_run, format_table, write_report
from .features import MeanWordEncoder, load_features
from .generator import DecodeConfig, GruDecoder, greedy_decode, sample_sequence
from .synthetic import SyntheticConfig, make_synthetic
from . import trainer as T

log = logging.getLogger("poemgan")


class UsageError(Exception):
    pass


def _config(args):
    data = json.loads(Path(args.config).read_text()) if getattr(args, "config", None) else {}
    if getattr(args, "seed", None) is not None:
        data["seed"] = args.seed
    return T.TrainConfig.from_dict(data)


def _need(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n, None) is None]
    if missing:
        raise UsageError(f"{args.command}: missing required flag(s) {', '.join(missing)}")


def _load_models(model_dir):
    d = Path(model_dir)
    vocab = C.Vocabulary.load(d / "vocab.json")
    encoder = MeanWordEncoder.load(d / "encoder.ckpt", vocab)
    model = VisualPoeticEmbedding.load(d / "embedding.ckpt")
    return vocab, encoder, model


# ------------------------------------------------------------------ commands

def cmd_ingest(args):
    """Raw poems (JSONL with id/lines, or plain text with blank-line separated poems) to poems JSONL."""
    src = Path(args.input)
    if src.suffix == ".jsonl":
        poems = [C.Poem(p.id, p.lines, args.source) for p in C.load_poems(src)]
    else:
        blocks = [b for b in src.read_text(encoding="utf-8").split("\n\n") if b.strip()]
        poems = [C.Poem(f"{args.prefix}{i:06d}", [ln for ln in b.splitlines() if ln.strip()], args.source)
                 for i, b in enumerate(blocks)]
    C.save_poems(args.out, poems)
    log.info("ingested %d poems", len(poems))
    return [args.out]


def cmd_filter(args):
    poems = C.load_poems(args.poems)
    kept = C.filter_poems(poems, args.min_lines, args.max_lines, args.min_ascii)
    C.save_poems(args.out, kept)
    log.info("kept %d of %d poems", len(kept), len(poems))
    return [args.out]


def cmd_build_vocab(args):
    vocab = C.build_vocabulary(C.load_poems(args.poems), args.min_freq)
    vocab.save(args.out)
    log.info("vocabulary size %d", len(vocab))
    return [args.out]


def cmd_train_embedding(args):
    _need(args, "features", "poems", "pairs", "model_dir")
    config = _config(args)
    poems = C.load_poems(args.poems)
    pairs = C.load_pairs(args.pairs)
    images = load_features(args.features)
    C.check_pairs(pairs, [p.id for p in poems], images)
    vocab, encoder, model = T.fit_embedding(poems, pairs, images, config)
    out = Path(args.model_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = [out / "vocab.json", out / "encoder.ckpt", out / "embedding.ckpt"]
    vocab.save(files[0])
    encoder.save(files[1])
    model.save(files[2])
    log.info("embedding loss %.4f -> %.4f", model.history[0], model.history[-1])
    return files


def cmd_expand(args):
    _need(args, "model_dir", "features", "poems", "pairs", "out")
    _, encoder, model = _load_models(args.model_dir)
    poems = C.load_poems(args.poems)
    pairs = C.load_pairs(args.pairs)
    images = load_features(args.features)
    expanded = expand_dataset(pairs, poems, images, model, encoder, args.k)
    C.save_pairs(args.out, expanded)
    log.info("%d human pairs expanded to %d", len(pairs), len(expanded))
    return [args.out]


def cmd_pretrain(args):
    _need(args, "model_dir", "features", "poems", "pairs")
    config = _config(args)
    vocab, _, model = _load_models(args.model_dir)
    poems = C.load_poems(args.poems)
    pairs = C.load_pairs(args.pairs)
    images = load_features(args.features)
    image_X = T.image_embeddings(images, model)
    generator, history = T.pretrain_from_pairs(pairs, poems, image_X, vocab, config)
    out = Path(args.model_dir)
    files = [out / "pretrained.ckpt", out / "generator.ckpt"]
    for f in files:
        generator.save(f)
    log.info("pretraining NLL %.4f -> %.4f", history[0], history[-1])
    return files


def cmd_train_gan(args):
    config = _config(args)  # validated first: a config without reward fails before any I/O
    if not (config.use_dm or config.use_dp):
        raise NoRewardError("both discriminators are disabled: no reward is defined (use pretrain instead)")
    _need(args, "model_dir", "features", "poems", "pairs")
    vocab, _, model = _load_models(args.model_dir)
    out = Path(args.model_dir)
    poems = C.load_poems(args.poems)
    pairs = C.load_pairs(args.pairs)
    paragraphs = C.load_poems(args.paragraphs) if args.paragraphs else []
    images = load_features(args.features)
    generator = GruDecoder.load(out / "pretrained.ckpt")
    image_X = T.image_embeddings(images, model)
    data = T.build_adversarial_data(pairs, poems, paragraphs, image_X, vocab)
    dm, dp = T.init_discriminators(len(vocab), config)
    records = T.adversarial_training(data, generator, dm, dp, config, out / "metrics.jsonl")
    files = [out / "metrics.jsonl", out / "generator.ckpt", out / "dm.ckpt", out / "dp.ckpt"]
    generator.save(files[1])
    dm.save(files[2])
    dp.save(files[3])
    log.info("mean R %.4f (round 1) -> %.4f (round %d)", records[0]["mean_R"], records[-1]["mean_R"],
             records[-1]["round"])
    return files


def _generate_one(x, generator, vocab, config, rng, attempts=5):
    for _ in range(attempts):
        roll = sample_sequence(x, generator, config, rng) if config.mode == "sample" else \
            greedy_decode(x, generator, config)
        try:
            return C.detokenize(roll.tokens, vocab)
        except C.CorpusError:
            if config.mode != "sample":
                break
    return None


def cmd_generate(args):
    _need(args, "model_dir", "features", "out")
    vocab, _, model = _load_models(args.model_dir)
    generator = GruDecoder.load(Path(args.model_dir) / (args.checkpoint or "generator.ckpt"))
    images = load_features(args.features)
    seed = T.stage_seed(args.seed or 0, "generate")
    config = DecodeConfig(mode=args.mode, temperature=args.temperature, seed=seed)
    streams = np.random.SeedSequence(seed).spawn(len(images))
    poems = []
    for (image_id, feats), ss in zip(images.items(), streams):
        x = embed_image(feats.vector(), model)
        poem = _generate_one(x, generator, vocab, config, np.random.default_rng(ss))
        if poem is None:
            log.warning("image %s: no nonempty poem produced; skipped", image_id)
            continue
        poems.append(C.Poem(image_id, poem.lines, "generated"))
    C.save_poems(args.out, poems)
    log.info("generated %d poems for %d images", len(poems), len(images))
    return [args.out]


def cmd_evaluate(args):
    _need(args, "model_dir", "features", "generated", "train_poems")
    _, encoder, model = _load_models(args.model_dir)
    images = load_features(args.features)
    generated = {p.id: p for p in C.load_poems(args.generated)}
    train_poems = C.load_poems(args.train_poems)
    stats = build_ngram_stats(train_poems, args.top_k)
    references = {}
    if args.ground_truth:
        by_id = {p.id: p for p in train_poems}
        if args.reference_poems:
            by_id.update({p.id: p for p in C.load_poems(args.reference_poems)})
        for pair in C.load_pairs(args.ground_truth):
            if pair.origin == "human" and pair.image_id not in references:
                if pair.poem_id not in by_id:
                    raise KeyError(f"ground-truth poem {pair.poem_id!r} not found")
                references[pair.image_id] = by_id[pair.poem_id]
    report = evaluate_run(generated, references, images, model, encoder, stats, workers=args.threads)
    print(format_table(report))
    files = []
    if args.out:
        write_report(args.out, report)
        files.append(args.out)
    return files


def cmd_make_synthetic(args):
    config = SyntheticConfig(n_images=args.n_images, corpus_size=args.corpus_size, D=args.D, M=args.M,
                             seed=args.seed or 0, n_paragraphs=args.n_paragraphs)
    files = make_synthetic(args.out_dir, config)
    return list(files.values())


# -------------------------------------------------------------------- parser

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (default: config value or 0)")
    common.add_argument("--threads", type=int, default=1, help="worker cap (default 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="poemgan", description="Image-to-poem generation pipeline.")
    sub = p.add_subparsers(dest="command", metavar="command")

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=fn)
        return sp

    sp = add("ingest", cmd_ingest, "normalize raw poems into poems JSONL")
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--source", default="unim", choices=C.SOURCES)
    sp.add_argument("--prefix", default="poem")

    sp = add("filter", cmd_filter, "length, ASCII and duplicate filter")
    sp.add_argument("--poems", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--min-lines", type=int, default=3)
    sp.add_argument("--max-lines", type=int, default=10)
    sp.add_argument("--min-ascii", type=float, default=0.95)

    sp = add("build-vocab", cmd_build_vocab, "build a vocabulary file")
    sp.add_argument("--poems", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--min-freq", type=int, default=1)

    def data_flags(sp, pairs=True):
        sp.add_argument("--features")
        sp.add_argument("--poems")
        if pairs:
            sp.add_argument("--pairs")
        sp.add_argument("--model-dir")
        sp.add_argument("--config")

    sp = add("train-embedding", cmd_train_embedding, "train the visual-poetic embedding")
    data_flags(sp)

    sp = add("expand", cmd_expand, "expand human pairs by embedding retrieval")
    data_flags(sp)
    sp.add_argument("--out")
    sp.add_argument("--k", type=int, default=3)

    sp = add("pretrain", cmd_pretrain, "MLE pretraining of the generator")
    data_flags(sp)

    sp = add("train-gan", cmd_train_gan, "adversarial policy-gradient training")
    data_flags(sp)
    sp.add_argument("--paragraphs")

    sp = add("generate", cmd_generate, "generate one poem per image")
    sp.add_argument("--model-dir")
    sp.add_argument("--features")
    sp.add_argument("--out")
    sp.add_argument("--checkpoint", help="generator file inside --model-dir (default generator.ckpt)")
    sp.add_argument("--mode", default="sample", choices=("sample", "greedy"))
    sp.add_argument("--temperature", type=float, default=1.0)

    sp = add("evaluate", cmd_evaluate, "BLEU, novelty and relevance of generated poems")
    sp.add_argument("--model-dir")
    sp.add_argument("--features")
    sp.add_argument("--generated")
    sp.add_argument("--train-poems")
    sp.add_argument("--ground-truth", help="pairs JSONL; human pairs give the reference poem per image")
    sp.add_argument("--reference-poems", help="extra poems file holding the reference texts")
    sp.add_argument("--out")
    sp.add_argument("--top-k", type=int, default=50)

    sp = add("make-synthetic", cmd_make_synthetic, "write a planted-correspondence corpus")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--n-images", type=int, default=50)
    sp.add_argument("--corpus-size", type=int, default=100)
    sp.add_argument("--D", type=int, default=16)
    sp.add_argument("--M", type=int, default=64)
    sp.add_argument("--n-paragraphs", type=int, default=30)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        written = args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"poemgan: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"poemgan {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    log.info("wrote: %s", ", ".join(str(f) for f in written) if written else "(nothing)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
