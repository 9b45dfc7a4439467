"""Train whole-word GMM-HMMs on toy 2-D data, decode, and score.

Each word is a chain of four well-separated means.  Embedded training grows
the mixtures one split at a time, then Viterbi decoding over a phrase list
recovers the spoken phrases and the scorer reports word and sentence rates.

    python3 demos/toy_recognizer.py
"""

import numpy as np

from lipvsr import gmmhmm, scoring

LEXICON = {"red": [0, 1, 2, 3], "green": [4, 5, 6, 7], "blue": [8, 9, 10, 11]}
PHRASES = [("red",), ("green", "blue"), ("blue", "red"), ("green",)]


def make_corpus(rng, centers, reps, noise):
    data = []
    for _ in range(reps):
        for phrase in PHRASES:
            rows = [centers[s] + rng.normal(0, noise, 2)
                    for w in phrase for s in LEXICON[w]
                    for _ in range(int(rng.integers(1, 4)))]
            data.append((np.array(rows), list(phrase)))
    return data


def main():
    rng = np.random.default_rng(1)
    centers = rng.normal(0, 4, size=(12, 2))
    train = make_corpus(rng, centers, reps=6, noise=0.4)
    test = make_corpus(rng, centers, reps=3, noise=0.8)

    models, report = gmmhmm.embedded_train(train, max_mixtures=2)
    print(report.to_csv().splitlines()[-1], "(last training pass: pass,loglik,components)")

    grammar = gmmhmm.Grammar(PHRASES)
    pairs, total = [], None
    for X, ref in test:
        hyp = gmmhmm.viterbi_decode(models, grammar, X).words
        pairs.append((ref, hyp))
        counts = scoring.align_words(ref, hyp)
        total = counts if total is None else total + counts
    print(f"{len(test)} test phrases: SC {scoring.sentence_correctness(pairs):.1f}%, "
          f"WC {scoring.correctness(total):.1f}%, WA {scoring.accuracy(total):.1f}%")


if __name__ == "__main__":
    main()
