"""``charseq`` command line: vocabularies, training, translation, evaluation and beam sweeps.

Exit codes: 0 success, 2 usage or data error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from charseq.checkpoint import load_checkpoint, same_vocabulary, save_checkpoint
from charseq.config import PRESETS, RunConfig
from charseq.decoding import SWEEP_HEADER, DecodeConfig, beam_sweep, search_model, translate
from charseq.errors import TrainingDiverged, UsageError
from charseq.metrics import corpus_chrf, corpus_report, format_report
from charseq.model import Seq2SeqModel
from charseq.noise import NOISE_OPS, NoiseConfig, noisy_eval
from charseq.tasks import TASKS, make_task
from charseq.text import (
    ParallelCorpus,
    build_char_vocab,
    learn_bpe,
    load_corpus,
    load_vocabulary,
    read_lines,
    write_lines,
)
from charseq.training import MetricsLog, Trainer, average_parameters, restore

logger = logging.getLogger("charseq")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# -- learn-vocab ------------------------------------------------------------------------

def cmd_learn_vocab(args) -> int:
    texts = [line for path in args.input for line in read_lines(path)]
    if args.mode == "char":
        vocab = build_char_vocab(texts, cap=args.cap)
        vocab.save(args.output)
        print(f"char vocabulary: {vocab.size} symbols -> {args.output}")
    else:
        model = learn_bpe(texts, merges=args.merges)
        model.save(args.output)
        print(f"bpe: {len(model.merges)} merges, {model.size} tokens -> {args.output}")
    return EXIT_OK


# -- make-data --------------------------------------------------------------------------

def cmd_make_data(args) -> int:
    corpus = make_task(args.task, args.n, seed=args.seed)
    prefix = Path(args.prefix)
    write_lines(f"{prefix}.src", corpus.sources)
    write_lines(f"{prefix}.tgt", corpus.targets)
    print(f"{len(corpus)} {args.task} pairs -> {prefix}.src / {prefix}.tgt")
    return EXIT_OK


# -- train ------------------------------------------------------------------------------

def _training_corpus(cfg: RunConfig) -> tuple[ParallelCorpus, ParallelCorpus | None]:
    run = cfg.run
    if run.train_src and run.train_tgt:
        train = load_corpus(run.train_src, run.train_tgt)
    elif run.task:
        train = make_task(run.task, run.task_size, seed=run.seed + 1)
    else:
        raise UsageError("no training data: give --src/--tgt (run.train_src/train_tgt) or a task preset")
    valid = None
    if run.valid_src and run.valid_tgt:
        valid = load_corpus(run.valid_src, run.valid_tgt)
    elif run.task and cfg.training.valid_every:
        valid = make_task(run.task, 200, seed=run.seed + 2)
    return train, valid


def _encode_pairs(vocab, corpus: ParallelCorpus):
    return [(vocab.encode(s), vocab.encode(t)) for s, t in zip(corpus.sources, corpus.targets)]


def cmd_train(args) -> int:
    overrides = list(args.set or [])
    for flag, key in (("src", "run.train_src"), ("tgt", "run.train_tgt"), ("valid_src", "run.valid_src"),
                      ("valid_tgt", "run.valid_tgt"), ("vocab", "run.vocab"), ("out", "run.output_dir"),
                      ("max_steps", "training.max_steps"), ("seed", "training.seed"),
                      ("max_seconds", "training.max_seconds")):
        value = getattr(args, flag)
        if value is not None:
            overrides.append(f"{key}={value}")
    cfg = RunConfig.build(args.preset, args.config, overrides)
    out = Path(cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_corpus, valid_corpus = _training_corpus(cfg)

    if args.resume:
        ck = load_checkpoint(args.resume)
        model, vocab, state = ck.model, ck.tgt_vocab, ck.state
        if state is None:
            raise UsageError(f"{args.resume} holds no optimizer state; cannot resume")
        train_cfg = ck.train_config or cfg.training
        if args.max_steps is not None:
            train_cfg.max_steps = args.max_steps
    else:
        vocab = load_vocabulary(cfg.run.vocab) if cfg.run.vocab else build_char_vocab(train_corpus, cfg.run.vocab_cap)
        model = Seq2SeqModel(cfg.model_config(vocab.size, vocab.size), seed=cfg.training.seed)
        state, train_cfg = None, cfg.training
    (out / "config.ini").write_text(cfg.to_ini(), encoding="utf-8")

    pairs = _encode_pairs(vocab, train_corpus)
    valid = _encode_pairs(vocab, valid_corpus) if valid_corpus else None
    last = out / "last.ckpt"

    def checkpoint(m, st):
        save_checkpoint(out / f"step{st.step:07d}.ckpt", m, vocab, vocab, st, train_cfg)
        save_checkpoint(last, m, vocab, vocab, st, train_cfg)

    trainer = Trainer(model, pairs, train_cfg, valid, state=state, log=MetricsLog(out / "metrics.tsv"),
                      on_checkpoint=checkpoint)
    average = train_cfg.average_best
    train_cfg.average_best = False
    try:
        trainer.run()
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}; last checkpoint kept at {last}", file=sys.stderr)
        return EXIT_DIVERGED
    finally:
        train_cfg.average_best = average
    save_checkpoint(last, model, vocab, vocab, trainer.state, train_cfg)
    if average and trainer.best:
        restore(model, average_parameters([snap for _, _, snap in trainer.best]))
    save_checkpoint(out / "final.ckpt", model, vocab, vocab, trainer.state, train_cfg)
    print(f"trained to step {trainer.state.step}; final checkpoint {out / 'final.ckpt'}")
    return EXIT_OK


# -- translate --------------------------------------------------------------------------

def _load_for_decoding(args):
    ck = load_checkpoint(args.checkpoint)
    if getattr(args, "vocab", None):
        given = load_vocabulary(args.vocab)
        if not same_vocabulary(given, ck.src_vocab):
            raise UsageError(f"vocabulary {args.vocab} does not match the one stored in {args.checkpoint}")
    return ck


def _decode_config(args) -> DecodeConfig:
    return DecodeConfig(strategy=args.strategy, width=args.beam, alpha=args.alpha, temperature=args.temperature,
                        seed=args.seed, n_samples=args.samples, max_len=args.max_len, workers=args.workers)


def _translator(ck, dcfg: DecodeConfig):
    """Map source lines to (text, normalised score); empty lines stay empty."""
    search = search_model(ck.model)

    def run(lines: list[str]) -> list[tuple[str, float]]:
        ids = [ck.src_vocab.encode(line) for line in lines]
        keep = [i for i, x in enumerate(ids) if x]
        results = translate(search, [ids[i] for i in keep], dcfg, to_text=ck.tgt_vocab.decode)
        out = [("", 0.0)] * len(lines)
        for i, r in zip(keep, results):
            out[i] = (ck.tgt_vocab.decode(r.ids), r.normalized_score)
        return out

    return run


def cmd_translate(args) -> int:
    ck = _load_for_decoding(args)
    dcfg = _decode_config(args)
    lines = read_lines(args.input)
    results = _translator(ck, dcfg)(lines)
    out_lines = [f"{text}\t{score:.6f}" if args.scores else text for text, score in results]
    if args.output:
        write_lines(args.output, out_lines)
    else:
        sys.stdout.write("".join(f"{line}\n" for line in out_lines))
    return EXIT_OK


# -- evaluate ---------------------------------------------------------------------------

def _parse_noise(spec: str) -> NoiseConfig:
    fields: dict = {}
    for item in spec.replace(",", " ").split():
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--noise expects key=value items, got {item!r}")
        if key == "rate":
            fields["rate"] = float(value)
        elif key == "replicas":
            fields["replicas"] = int(value)
        elif key == "seed":
            fields["seed"] = int(value)
        elif key == "ops":
            fields["ops"] = tuple(value.split("+"))
        else:
            raise UsageError(f"--noise: unknown key {key!r} (rate, replicas, seed, ops)")
    if "rate" not in fields:
        raise UsageError("--noise needs an explicit rate=... value")
    return NoiseConfig(**fields)


def cmd_evaluate(args) -> int:
    hyps, refs = read_lines(args.hyp), read_lines(args.ref)
    if len(hyps) != len(refs):
        raise UsageError(f"hypothesis and reference files differ in length ({len(hyps)}, {len(refs)})")
    rows = corpus_report(hyps, refs, bootstrap=args.bootstrap, seed=args.seed)
    extra = []
    if args.noise:
        if not (args.checkpoint and args.source):
            raise UsageError("--noise needs --checkpoint and --source to re-translate noisy input")
        noise = _parse_noise(args.noise)
        ck = _load_for_decoding(args)
        dcfg = DecodeConfig(max_len=args.max_len)
        run = _translator(ck, dcfg)
        sources = read_lines(args.source)
        if len(sources) != len(refs):
            raise UsageError(f"source and reference files differ in length ({len(sources)}, {len(refs)})")

        def translate_texts(lines):
            return [text for text, _ in run(lines)]

        report = noisy_eval(translate_texts, sources, refs, noise, corpus_chrf, workers=args.workers)
        extra.append(("chrF_noisy_mean", report.mean, None, None))
        extra.append(("chrF_noisy_std", report.std, None, None))
        extra += [(f"chrF_noisy_r{i:02d}", s, None, None) for i, s in enumerate(report.scores)]
    text = format_report(rows + extra)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- sweep-beam -------------------------------------------------------------------------

def _parse_numbers(spec: str, kind):
    """``1,5,10`` or ``start:stop:step`` (stop inclusive)."""
    spec = spec.strip()
    if not spec:
        return []
    if ":" in spec:
        parts = [kind(p) for p in spec.split(":")]
        start, stop = parts[0], parts[1]
        step = parts[2] if len(parts) > 2 else 1
        out, x = [], start
        while x <= stop:
            out.append(x)
            x += step
        return out
    return [kind(p) for p in spec.split(",") if p.strip()]


def cmd_sweep_beam(args) -> int:
    widths = _parse_numbers(args.widths, int)
    alphas = _parse_numbers(args.alphas, float)
    if not widths or not alphas:
        raise UsageError("sweep-beam needs at least one width and one alpha")
    ck = _load_for_decoding(args)
    sources = read_lines(args.source)
    refs = read_lines(args.reference)
    if len(sources) != len(refs):
        raise UsageError(f"source and reference files differ in length ({len(sources)}, {len(refs)})")
    ids = [ck.src_vocab.encode(s) for s in sources]
    rows = beam_sweep(search_model(ck.model), ids, refs, widths, alphas, ck.tgt_vocab.decode, max_len=args.max_len)
    text = "\n".join([SWEEP_HEADER] + [r.tsv() for r in rows]) + "\n"
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- parser -----------------------------------------------------------------------------

def _add_decoding_flags(p) -> None:
    p.add_argument("--strategy", choices=("greedy", "beam", "sample", "mbr"), default="greedy")
    p.add_argument("--beam", type=int, default=5, help="beam width")
    p.add_argument("--alpha", type=float, default=1.0, help="length normalisation exponent")
    p.add_argument("--samples", type=int, default=100, help="MBR sample count")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="charseq", description="Character-level NMT toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("learn-vocab", help="build a character vocabulary or learn BPE merges")
    p.add_argument("--mode", choices=("char", "bpe"), required=True)
    p.add_argument("--input", nargs="+", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--cap", type=int, default=300)
    p.add_argument("--merges", type=int, default=16000)
    p.set_defaults(func=cmd_learn_vocab)

    p = sub.add_parser("make-data", help="write a synthetic copy/reverse corpus")
    p.add_argument("--task", choices=TASKS, required=True)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prefix", required=True)
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--src")
    p.add_argument("--tgt")
    p.add_argument("--valid-src")
    p.add_argument("--valid-tgt")
    p.add_argument("--vocab")
    p.add_argument("--out")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--max-seconds", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", metavar="CHECKPOINT")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="decode an input file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output")
    p.add_argument("--vocab", help="optional vocabulary to check against the checkpoint")
    p.add_argument("--scores", action="store_true", help="append the normalised score column")
    _add_decoding_flags(p)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="score hypotheses against references")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--bootstrap", type=int, default=0, metavar="RESAMPLES")
    p.add_argument("--noise", metavar="rate=R,replicas=N,seed=S,ops=a+b",
                   help=f"noisy re-translation; ops from {'+'.join(NOISE_OPS)}")
    p.add_argument("--checkpoint")
    p.add_argument("--source")
    p.add_argument("--vocab")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--output")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep-beam", help="chrF over a grid of beam widths and alphas")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--widths", default="1,5,10", help="comma list or start:stop:step")
    p.add_argument("--alphas", default="0,1")
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--vocab")
    p.add_argument("--output")
    p.set_defaults(func=cmd_sweep_beam)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except (UsageError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
