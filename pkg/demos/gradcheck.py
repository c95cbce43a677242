"""Compare analytic gradients of the full training loss with finite differences."""

from nestedgec import numcore as nc
from nestedgec.corpus import SentencePair, Vocabularies, encode_batch
from nestedgec.model_hybrid import total_loss
from nestedgec.model_word import ModelConfig, ModelParams

pairs = [SentencePair(tuple("the cat violets the rules".split()), tuple("the cat violates the rules".split())),
         SentencePair(tuple("a dog zqx runs".split()), tuple("a dog zqx runs blorp".split()))]
vocabs = Vocabularies.build(pairs, 4)
batch = encode_batch(pairs, vocabs)

for variant in ("baseline", "hybrid", "nested"):
    cfg = ModelConfig(variant, len(vocabs.source), len(vocabs.target), len(vocabs.chars), emb=8, hidden=8)
    params = ModelParams.uniform(cfg, nc.Rng(0), 0.6)
    err = nc.check_gradients(lambda: total_loss(params, batch).total, params, samples_per_param=4)
    print(f"{variant:<9} max relative error {err:.2e}")
