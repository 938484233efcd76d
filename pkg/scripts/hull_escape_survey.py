"""Train a small boosted language model and measure how far its outputs leave the value hull.

    python scripts/hull_escape_survey.py --epochs 2 --samples 300
"""

import argparse

import numpy as np

from boostedattn.analysis import boosted_hull_escape_survey
from boostedattn.lm import Corpus, LmConfig, LmRecipe, lm_diagnostics, train_lm, windows


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--epochs", type=int, default=1)
    parser.add_argument("--rounds", type=int, default=2)
    parser.add_argument("--samples", type=int, default=200)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    corpus = Corpus.bundled()
    config = LmConfig(vocab_size=corpus.vocab_size, mechanism="boosted", rounds=args.rounds)
    model, curve = train_lm(corpus, config, LmRecipe(epochs=args.epochs), seed=args.seed)
    print(f"val loss {curve.initial_loss:.3f} -> {curve.val_loss[-1]:.3f}")
    x, _ = windows(corpus.test, config.seq_len, limit=8)
    survey = boosted_hull_escape_survey(lambda t: lm_diagnostics(model, t), x, args.samples, seed=args.seed)
    for layer in survey.layer_mean:
        dists = survey.distances(layer)
        print(f"layer {layer}: mean distance {dists.mean():.4f}, median {np.median(dists):.4f}, "
              f"escape fraction {survey.escape_fraction[layer]:.3f}")


if __name__ == "__main__":
    main()
