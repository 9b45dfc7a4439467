"""Walk one synthetic mouth frame through the front end.

Renders frames, learns the two PCA filter banks, turns a frame into its
32,768-dim block-histogram feature and shows how log-posteriors become a
tandem observation with delta and acceleration columns.

    python3 demos/feature_walkthrough.py
"""

import numpy as np

from lipvsr import pcanet, synth, tandem


def main():
    rng = np.random.default_rng(0)
    style = synth.SpeakerStyle.draw(rng)
    frames = [synth.render_frame(c, style, 0, 0.1, rng) / 255.0 for c in range(28)]
    print(f"rendered {len(frames)} frames of shape {frames[0].shape}")

    bank1, bank2 = pcanet.learn_banks(frames)
    gram = bank1.filters @ bank1.filters.T
    print(f"stage-1 bank: {bank1.n_filters} filters of {bank1.k}x{bank1.k}, "
          f"max |F F^T - I| = {np.abs(gram - np.eye(8)).max():.1e}")
    print("leading stage-1 eigenvalues:", np.round(bank1.eigenvalues[:4], 2))

    feat = pcanet.extract_feature(frames[5], bank1, bank2)
    print(f"feature: {feat.size} dims, total count {feat.sum():.0f}, "
          f"{np.count_nonzero(feat)} non-zero bins")

    # a fake 10-frame posterior sequence over 28 classes
    post = rng.dirichlet(np.ones(28), size=10)
    obs = tandem.assemble(post)
    print(f"tandem observation: {obs.shape[0]} frames x {obs.shape[1]} dims "
          "(log | delta | acceleration)")
    fused = tandem.concat_views({0: post, 30: post[::-1]})
    print(f"two fused views: {fused.shape[1]} dims")


if __name__ == "__main__":
    main()
