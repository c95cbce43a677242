"""Grammatical error correction with word-level attention and nested character decoding."""

from .corpus import (M2Sentence, SentencePair, Vocabularies, build_vocab, encode_batch, load_parallel_corpus,
                     load_sentences, parse_m2)
from .decoder import (DecodeConfig, Decoder, beam_search_chars, beam_search_words, build_correction_lexicon,
                      unk_replace)
from .eval import classify_edit, extract_edits, f_beta, score_m2, segment_oov
from .lm import NgramModel, lm_logprob, rerank, train_kn_lm, tune_lambda
from .model_hybrid import total_loss
from .model_word import ModelConfig, ModelParams
from .trainer import TrainConfig, Trainer, load_checkpoint, save_checkpoint

__all__ = [
    "M2Sentence", "SentencePair", "Vocabularies", "build_vocab", "encode_batch", "load_parallel_corpus",
    "load_sentences", "parse_m2",
    "DecodeConfig", "Decoder", "beam_search_chars", "beam_search_words", "build_correction_lexicon", "unk_replace",
    "classify_edit", "extract_edits", "f_beta", "score_m2", "segment_oov",
    "NgramModel", "lm_logprob", "rerank", "train_kn_lm", "tune_lambda",
    "total_loss", "ModelConfig", "ModelParams",
    "TrainConfig", "Trainer", "load_checkpoint", "save_checkpoint",
]
