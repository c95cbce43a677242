"""Command-line pipeline: build-vocab, train, decode, train-lm, rerank, score, analyze.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Settings resolve as command-line flags over ``--config`` file values over
defaults; the resolved configuration and seed are logged at the start of
every run.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import shutil
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from . import numcore as nc
from .corpus import CorpusError, CorpusFilter, Vocabularies, load_parallel_corpus, load_sentences, parse_m2
from .decoder import (DEFAULT_BEAM, DEFAULT_CHAR_BEAM, DEFAULT_MAX_CHARS, CorrectionLexicon, DecodeConfig,
                      Decoder, build_correction_lexicon, nbest_entries, read_nbest, write_nbest, write_output)
from .eval import LARGE, SMALL, ScoringError, analysis_report, portion_filter, score_m2, segment_oov
from .lm import NgramModel, group_nbest, lambda_grid, rerank, train_kn_lm, tune_lambda
from .model_word import VARIANTS, ModelConfig
from .records import RecordFormatError
from .trainer import NonFiniteLoss, TrainConfig, Trainer, init_params, load_checkpoint, select_model

log = logging.getLogger("nestedgec")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


# -- configuration ------------------------------------------------------------------


def _defaults() -> dict[str, Any]:
    d = TrainConfig().to_dict()
    d.update({"beam": DEFAULT_BEAM, "char_beam": DEFAULT_CHAR_BEAM, "max_chars": DEFAULT_MAX_CHARS,
              "max_len": 0, "length_norm": False, "nbest": 1, "lambda": 1.0, "order": 5,
              "workers": 1, "vocab_mode": "combined", "filter": True})
    return d


DEFAULTS = _defaults()


@dataclass
class RunConfig:
    values: dict[str, Any] = field(default_factory=lambda: dict(DEFAULTS))

    def __getitem__(self, key: str):
        return self.values[key]

    def train_config(self) -> TrainConfig:
        names = {f.name for f in dataclasses.fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in self.values.items() if k in names})

    def decode_config(self) -> DecodeConfig:
        v = self.values
        return DecodeConfig(v["beam"], v["char_beam"], v["max_len"] or None, v["max_chars"],
                            v["length_norm"], v["nbest"])

    def lines(self) -> list[str]:
        return [f"{k}={self.values[k]}" for k in sorted(self.values)]


def _coerce(key: str, raw, default):
    if isinstance(raw, type(default)) and not (isinstance(default, bool) and not isinstance(raw, bool)):
        return raw
    text = str(raw).strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(text)
            return low in ("1", "true", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot read {text!r} as {type(default).__name__}") from None
    return text


def parse_config(path=None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Resolve defaults, then ``key=value`` lines of ``path``, then ``overrides``."""
    values = dict(DEFAULTS)
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise CorpusError(f"cannot read config {path}: {exc}") from exc
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, raw = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in DEFAULTS:
                raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _coerce(key, raw, DEFAULTS[key])
    for key, raw in (overrides or {}).items():
        if raw is None:
            continue
        if key not in DEFAULTS:
            raise UsageError(f"unknown config key {key!r}")
        values[key] = _coerce(key, raw, DEFAULTS[key])
    cfg = RunConfig(values)
    if values["variant"] not in VARIANTS:
        raise UsageError(f"unknown variant {values['variant']!r} (choose from {', '.join(VARIANTS)})")
    if values["lambda"] < 0:
        raise UsageError("lambda must be non-negative")
    for key in ("beam", "char_beam", "max_chars", "nbest", "order", "workers"):
        if values[key] < 1:
            raise UsageError(f"{key} must be at least 1")
    try:
        cfg.train_config()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return cfg


# -- argument parsing ----------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# flag name -> config key for the shared run options
_SHARED = {"seed": "seed", "variant": "variant", "vocab_size": "vocab_size", "beam": "beam",
           "char_beam": "char_beam", "lambda_": "lambda", "workers": "workers"}


def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file; flags override its values")
    p.add_argument("--seed", type=int, help="run seed")
    p.add_argument("--variant", choices=VARIANTS, help="model architecture")
    p.add_argument("--vocab-size", type=int, help="number of words kept (K)")
    p.add_argument("--beam", type=int, help="word beam width")
    p.add_argument("--char-beam", type=int, help="character beam width")
    p.add_argument("--lambda", dest="lambda_", type=float, help="LM interpolation weight")
    p.add_argument("--lm", help="language model file")
    p.add_argument("--workers", type=int, help="parallel decode workers")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nestedgec", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build-vocab", help="rank words of a parallel corpus")
    _shared(p)
    p.add_argument("--train", required=True, help="source<TAB>target corpus")
    p.add_argument("--out", required=True, help="vocabulary JSON to write")

    p = sub.add_parser("train", help="train a model, writing checkpoints")
    _shared(p)
    p.add_argument("--train", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--valid", help="validation corpus (default: a training sample)")
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--out", required=True, help="checkpoint directory; the selected model is model.nahm")

    p = sub.add_parser("decode", help="correct sentences with a trained model")
    _shared(p)
    p.add_argument("--model", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--input", required=True, help="one tokenized sentence per line")
    p.add_argument("--lexicon-corpus", help="parallel corpus for the baseline correction lexicon")
    p.add_argument("--nbest", type=int, help="candidates per sentence in the n-best file")
    p.add_argument("--nbest-out", help="write 'index ||| tokens ||| nn_logprob' lines here")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-lm", help="estimate a modified Kneser-Ney n-gram model")
    _shared(p)
    p.add_argument("--input", required=True, help="tokenized text, one sentence per line")
    p.add_argument("--order", type=int)
    p.add_argument("--arpa", help="also write an ARPA text export")
    p.add_argument("--out", required=True)

    p = sub.add_parser("rerank", help="rerank an n-best file with a language model")
    _shared(p)
    p.add_argument("--nbest", required=True)
    p.add_argument("--tune-m2", help="choose lambda on this M2 file (grid 0.0-2.0 step 0.1)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("score", help="P/R/F0.5 of system output against M2 gold edits")
    _shared(p)
    p.add_argument("--hyp", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--out", help="also write the report here")

    p = sub.add_parser("analyze", help="OOV/NonOOV and small/large breakdowns")
    _shared(p)
    p.add_argument("--hyp", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--segment", choices=("all", "oov", "nonoov"), default="all")
    p.add_argument("--portion", choices=("all", SMALL, LARGE), default="all")
    p.add_argument("--out")
    return parser


def _overrides(args) -> dict[str, Any]:
    out = {key: getattr(args, flag, None) for flag, key in _SHARED.items()}
    for name in ("steps", "order", "nbest"):
        val = getattr(args, name, None)
        if isinstance(val, int) and not isinstance(val, bool):
            out[name] = val
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip().replace("-", "_")] = v
    return out


def _require(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).exists():
            raise CorpusError(f"{p}: no such file")


def _emit(text: str, out) -> None:
    sys.stdout.write(text)
    if out:
        Path(out).write_text(text, encoding="utf-8")


# -- subcommands ------------------------------------------------------------------------


def cmd_build_vocab(args, cfg: RunConfig) -> None:
    _require(args.train)
    pairs = load_parallel_corpus(args.train, CorpusFilter() if cfg["filter"] else None)
    if not pairs:
        raise CorpusError(f"{args.train}: no sentence pairs")
    vocabs = Vocabularies.build(pairs, cfg["vocab_size"], cfg["vocab_mode"])
    vocabs.save(args.out)
    log.info("vocabulary: %d source, %d target words, %d characters",
             vocabs.source.size, vocabs.target.size, len(vocabs.chars))


def _dev_f_score(vocabs, cfg: RunConfig, pairs):
    """Model-selection F0.5 on the validation pairs, using their targets as gold."""
    from .corpus import M2Sentence, GoldEdit
    from .eval import extract_edits
    doc = [M2Sentence(p.source, {0: [GoldEdit(e.start, e.end, e.correction) for e in extract_edits(p.source, p.target)]})
           for p in pairs]

    def f(ckpt) -> float:
        params = ckpt.params if hasattr(ckpt, "params") else load_checkpoint(ckpt).params
        dec = Decoder(params, vocabs, cfg.decode_config())
        return score_m2([r.words for r in dec.decode_all([p.source for p in pairs])], doc).f
    return f


def cmd_train(args, cfg: RunConfig) -> None:
    _require(args.train, args.vocab, args.valid, args.resume)
    tc = cfg.train_config()
    vocabs = Vocabularies.load(args.vocab)
    pairs = load_parallel_corpus(args.train, CorpusFilter() if cfg["filter"] else None)
    if not pairs:
        raise CorpusError(f"{args.train}: no sentence pairs")
    valid = load_parallel_corpus(args.valid) if args.valid else None
    out = Path(args.out)
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        # the run continues under its recorded settings; only the step budget may change
        tc = dataclasses.replace(ckpt.train_config, steps=tc.steps)
        ckpt.train_config = tc
        trainer = Trainer.from_checkpoint(ckpt, pairs, vocabs, valid, out)
    else:
        mc = ModelConfig(tc.variant, len(vocabs.source), len(vocabs.target), len(vocabs.chars),
                         emb=tc.emb, hidden=tc.hidden)
        trainer = Trainer(init_params(mc, nc.Rng(tc.seed)), pairs, vocabs, tc, valid, out)

    def report(it, rep):
        if it % tc.cost_interval == 0:
            log.info("iteration %d loss %s lr %.6g", it,
                     " ".join(f"{k}={v:.4f}" for k, v in rep.loss.values().items()), trainer.opt.lr)

    remaining = max(0, tc.steps - trainer.iteration)
    trainer.run(remaining, report)
    if not trainer.saved or trainer.saved[-1][0] != trainer.iteration:
        trainer.save()
    saved = [s for s in trainer.saved if s[2] is not None]
    chosen = select_model([s[2] for s in saved], [s[1] for s in saved],
                          _dev_f_score(vocabs, cfg, trainer.valid_pairs[:tc.valid_sample]),
                          iterations=[s[0] for s in saved])
    shutil.copyfile(chosen, out / "model.nahm")
    log.info("selected %s", chosen.name)


def cmd_decode(args, cfg: RunConfig) -> None:
    _require(args.model, args.vocab, args.input, args.lexicon_corpus)
    ckpt = load_checkpoint(args.model)
    vocabs = Vocabularies.load(args.vocab)
    lexicon = CorrectionLexicon()
    if args.lexicon_corpus:
        lexicon = build_correction_lexicon(load_parallel_corpus(args.lexicon_corpus))
    dcfg = cfg.decode_config()
    if args.nbest_out:
        dcfg.nbest = cfg["beam"] if args.nbest is None else cfg["nbest"]
    decoder = Decoder(ckpt.params, vocabs, dcfg, lexicon)
    results = decoder.decode_all(load_sentences(args.input), cfg["workers"])
    write_output(args.out, [r.words for r in results])
    if args.nbest_out:
        write_nbest(args.nbest_out, nbest_entries(results))


def cmd_train_lm(args, cfg: RunConfig) -> None:
    _require(args.input)
    sentences = [s for s in load_sentences(args.input) if s]
    if not sentences:
        raise CorpusError(f"{args.input}: no sentences")
    model = train_kn_lm(sentences, cfg["order"])
    model.save(args.out)
    if args.arpa:
        model.write_arpa(args.arpa)


def cmd_rerank(args, cfg: RunConfig) -> None:
    if not args.lm:
        raise UsageError("rerank needs --lm")
    _require(args.nbest, args.lm, args.tune_m2)
    model = NgramModel.load(args.lm)
    entries = read_nbest(args.nbest)
    doc = parse_m2(args.tune_m2) if args.tune_m2 else None
    groups = group_nbest(entries, len(doc) if doc is not None else None)
    lam = cfg["lambda"]
    if doc is not None:
        lam, table = tune_lambda(groups, model, lambda outs: score_m2(outs, doc).f, lambda_grid())
        for g, f in table.items():
            log.info("lambda %.1f dev F0.5 %.2f", g, f)
        sys.stdout.write(f"lambda={lam:g}\n")
    best = [c[rerank(c, model, lam)[0]].tokens if c else () for c in groups]
    write_output(args.out, best)


def _read_hyp(path, doc) -> list:
    hyp = load_sentences(path)
    if len(hyp) != len(doc):
        raise ScoringError(f"{path}: {len(hyp)} lines but the M2 file has {len(doc)} sentences")
    return hyp


def cmd_score(args, cfg: RunConfig) -> None:
    _require(args.hyp, args.gold)
    doc = parse_m2(args.gold)
    rep = score_m2(_read_hyp(args.hyp, doc), doc)
    _emit(rep.text() + rep.key_values(), args.out)


def cmd_analyze(args, cfg: RunConfig) -> None:
    _require(args.hyp, args.gold, args.vocab)
    doc = parse_m2(args.gold)
    hyp = _read_hyp(args.hyp, doc)
    vocab = Vocabularies.load(args.vocab).source
    if args.segment == "all" and args.portion == "all":
        _emit(analysis_report(hyp, doc, vocab), args.out)
        return
    oov, non_oov = segment_oov([s.source for s in doc], vocab)
    idx = {"all": range(len(doc)), "oov": oov, "nonoov": non_oov}[args.segment]
    filt = None if args.portion == "all" else portion_filter(args.portion)
    rep = score_m2([hyp[i] for i in idx], [doc[i] for i in idx], edit_filter=filt)
    title = f"segment={args.segment} portion={args.portion} sentences={len(idx)}"
    _emit(rep.text(title) + rep.key_values(), args.out)


COMMANDS = {"build-vocab": cmd_build_vocab, "train": cmd_train, "decode": cmd_decode,
            "train-lm": cmd_train_lm, "rerank": cmd_rerank, "score": cmd_score, "analyze": cmd_analyze}


def main(argv: Sequence[str] | None = None) -> int:
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
        cfg = parse_config(args.config, _overrides(args))
        log.info("command %s seed=%d", args.command, cfg["seed"])
        for line in cfg.lines():
            log.info("config %s", line)
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return EXIT_USAGE
    except (NonFiniteLoss, FloatingPointError) as exc:
        sys.stderr.write(f"numeric failure: {exc}\n")
        return EXIT_NUMERIC
    except (CorpusError, RecordFormatError, ScoringError, OSError, ValueError) as exc:
        sys.stderr.write(f"data error: {exc}\n")
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
