"""Decode n-best lists with a small trained model and rerank them with an n-gram LM."""

from nestedgec import numcore as nc
from nestedgec.corpus import Vocabularies
from nestedgec.decoder import DecodeConfig, Decoder
from nestedgec.eval import score_m2
from nestedgec.lm import Candidate, lm_logprob, rerank, train_kn_lm, tune_lambda
from nestedgec.model_word import ModelConfig
from nestedgec.toydata import gec_corpus, m2_from_pairs
from nestedgec.trainer import TrainConfig, Trainer, init_params

pairs = gec_corpus(80, seed=3, n_words=12)
vocabs = Vocabularies.build(pairs, 20)
mc = ModelConfig("nested", len(vocabs.source), len(vocabs.target), len(vocabs.chars), emb=32, hidden=32)
trainer = Trainer(init_params(mc, nc.Rng(0)), pairs, vocabs,
                  TrainConfig(batch_size=20, epoch_checkpoints=False, seed=2, valid_sample=20))
trainer.run(1500)

lm = train_kn_lm([p.target for p in pairs], order=3)
dev = pairs[:15]
decoder = Decoder(trainer.params, vocabs, DecodeConfig(beam=6, nbest=6))
nbest = [[Candidate(tuple(h.words), h.logprob) for h in r.hypotheses] for r in decoder.decode_all([p.source for p in dev])]

first = nbest[0]
print("source:", " ".join(dev[0].source))
for i in rerank(first, lm, 1.0):
    c = first[i]
    print(f"  nn {c.nn_logprob:8.3f}  lm {lm_logprob(lm, c.tokens):8.3f}  {' '.join(c.tokens)}")

doc = m2_from_pairs(dev)
lam, table = tune_lambda(nbest, lm, lambda outs: score_m2(outs, doc).f)
print("dev F0.5 by lambda:", " ".join(f"{k:g}:{v:.1f}" for k, v in table.items()))
print("chosen lambda:", lam)
