"""Train the nested model to copy rare words while rewriting one letter.

Every rare word is outside the 10-word vocabulary, so it reaches the output
only through the character decoder that attends over the source word.
"""

import time

from nestedgec import numcore as nc
from nestedgec.corpus import Vocabularies
from nestedgec.decoder import DecodeConfig, Decoder
from nestedgec.model_word import ModelConfig
from nestedgec.toydata import copy_correct_corpus
from nestedgec.trainer import TrainConfig, Trainer, init_params

pairs = copy_correct_corpus(40, seed=0)          # every "x" in a rare word becomes "s"
vocabs = Vocabularies.build(pairs, 10)
mc = ModelConfig("nested", len(vocabs.source), len(vocabs.target), len(vocabs.chars), emb=32, hidden=32)
tc = TrainConfig(batch_size=20, epoch_checkpoints=False, seed=5, valid_sample=40)
trainer = Trainer(init_params(mc, nc.Rng(1)), pairs, vocabs, tc)

t0 = time.perf_counter()
trainer.run(3000, lambda it, rep: it % 500 == 0 and print(
    f"step {it:5d}  loss {rep.loss.values()['total']:.4f}"))
print(f"trained in {time.perf_counter() - t0:.1f}s")

decoder = Decoder(trainer.params, vocabs, DecodeConfig(beam=4, char_beam=4))
correct = 0
for pair in pairs:
    out = decoder.decode(pair.source).words
    correct += out == list(pair.target)
for pair in pairs[:5]:
    print(" ".join(pair.source), "->", " ".join(decoder.decode(pair.source).words))
print(f"{correct}/{len(pairs)} sentences reproduced exactly")
