"""Deterministic synthetic lip-reading corpus for desk-scale experiments.

Frame labels index 28 "mouth shape" classes laid out as 7 apertures x 4
widths.  Every word is a fixed sequence of three classes, every class lasts
2-3 frames, and a class renders as a dark elliptical mouth opening inside a
lip ring on a skin-tone background.  Speakers differ by brightness,
contrast, offset and scale; views foreshorten the mouth horizontally and
add a shading ramp.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataio
from .dataio import N_CLASSES, Utterance

HEIGHT, WIDTH = 60, 90
N_APERTURES, N_WIDTHS = 7, 4
N_VISEMES = 12
CLASSES_PER_WORD = 3

PHRASES = (
    ("excuse", "me"),
    ("goodbye",),
    ("hello",),
    ("how", "are", "you"),
    ("nice", "to", "meet", "you"),
    ("see", "you"),
    ("i", "am", "sorry"),
    ("thank", "you"),
    ("have", "a", "good", "time"),
    ("you", "are", "welcome"),
)
MAX_PHRASES = len(PHRASES)


def lexicon_table():
    """Fixed word -> class-sequence table shared by every corpus."""
    words = sorted({w for p in PHRASES for w in p})
    rng = np.random.default_rng(20170707)
    table, used = {}, set()
    for w in words:
        while True:
            seq = tuple(int(c) for c in rng.choice(N_CLASSES, CLASSES_PER_WORD, replace=False))
            if seq not in used:
                break
        used.add(seq)
        table[w] = seq
    return table


def viseme_map():
    """28 classes -> 12 visemes: (aperture, narrow/wide) pairs, top two apertures merged."""
    out = np.empty(N_CLASSES, dtype=np.int64)
    for c in range(N_CLASSES):
        a, w = divmod(c, N_WIDTHS)
        out[c] = 2 * min(a, 5) + (w >= 2)
    return out


@dataclass(frozen=True)
class SpeakerStyle:
    brightness: float
    contrast: float
    dx: float
    dy: float
    scale: float

    @classmethod
    def draw(cls, rng):
        return cls(brightness=rng.uniform(-0.06, 0.06), contrast=rng.uniform(0.9, 1.1),
                   dx=rng.uniform(-2.5, 2.5), dy=rng.uniform(-2.0, 2.0),
                   scale=rng.uniform(0.93, 1.07))


_YY, _XX = np.mgrid[0:HEIGHT, 0:WIDTH].astype(np.float64)


def render_clean(cls, style, view=0):
    """Noise-free intensity image in [0, 1] for one class."""
    a, w = divmod(int(cls), N_WIDTHS)
    theta = math.radians(view)
    half_h = (1.0 + 3.0 * a) * style.scale
    half_w = (16.0 + 5.0 * w) * style.scale * math.cos(theta) ** 0.5
    cy = HEIGHT / 2 + style.dy
    cx = WIDTH / 2 + style.dx + 8.0 * math.sin(theta)
    outer = ((_XX - cx) / (half_w + 4.0)) ** 2 + ((_YY - cy) / (half_h + 4.0)) ** 2
    inner = ((_XX - cx) / half_w) ** 2 + ((_YY - cy) / half_h) ** 2
    img = np.full((HEIGHT, WIDTH), 0.70)
    img[outer <= 1.0] = 0.42
    img[inner <= 1.0] = 0.08
    img += 0.15 * math.sin(theta) * (_XX / WIDTH - 0.5)
    img = (img - 0.5) * style.contrast + 0.5 + style.brightness
    return img


def render_frame(cls, style, view, noise_level, rng):
    img = render_clean(cls, style, view)
    if noise_level > 0:
        img = img + rng.normal(0.0, noise_level, img.shape)
    return np.clip(np.rint(np.clip(img, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class SynthCorpus:
    root: Path
    train_manifest: Path
    test_manifest: Path
    viseme_map: Path
    lexicon: Path
    grammar: Path
    classes: Path


def synth_corpus(out_dir, seed=7, n_speakers=4, n_phrases=10, reps=3, noise_level=0.1,
                 views=(0,), n_test_speakers=None):
    """Render a corpus under ``out_dir`` and write its manifests and side files.

    The last ``n_test_speakers`` speakers (default a quarter, at least one
    when there are two or more) form the test split.  Output is a pure
    function of the arguments.
    """
    if not 1 <= n_phrases <= MAX_PHRASES:
        raise ValueError(f"n_phrases must be in [1, {MAX_PHRASES}]")
    if reps < 1 or n_speakers < 1:
        raise ValueError("need at least one speaker and one repetition")
    views = tuple(int(v) for v in views)
    for v in views:
        if v not in dataio.VIEWS:
            raise ValueError(f"unknown view {v}")
    if n_test_speakers is None:
        n_test_speakers = n_speakers // 4 if n_speakers >= 4 else min(1, n_speakers - 1)
    if not 0 <= n_test_speakers < n_speakers:
        raise ValueError("n_test_speakers must leave at least one training speaker")

    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    table = lexicon_table()
    phrases = PHRASES[:n_phrases]
    train, test = [], []
    for si in range(n_speakers):
        spk = f"s{si + 1:02d}"
        style = SpeakerStyle.draw(np.random.default_rng([seed, 1, si]))
        for pi, phrase in enumerate(phrases):
            for rep in range(reps):
                uid = f"{spk}_p{pi + 1:02d}_r{rep + 1}"
                dur_rng = np.random.default_rng([seed, 2, si, pi, rep])
                labels = []
                for word in phrase:
                    for c in table[word]:
                        labels.extend([c] * int(dur_rng.integers(2, 4)))
                label_rel = f"labels/{uid}.lab"
                (root / "labels").mkdir(exist_ok=True)
                dataio.write_labels(root / label_rel, labels)
                for view in views:
                    frames_rel = f"frames/v{view}/{uid}"
                    fdir = root / frames_rel
                    fdir.mkdir(parents=True, exist_ok=True)
                    noise_rng = np.random.default_rng([seed, 3, si, pi, rep, view])
                    paths = []
                    for t, c in enumerate(labels, 1):
                        p = fdir / (dataio.FRAME_PATTERN % t)
                        dataio.write_image(p, render_frame(c, style, view, noise_level,
                                                           noise_rng))
                        paths.append(str(p))
                    utt = Utterance(uid, spk, view, frames_rel, paths, list(phrase),
                                    labels, label_rel)
                    (test if si >= n_speakers - n_test_speakers else train).append(utt)

    out = SynthCorpus(root, root / "train.tsv", root / "test.tsv", root / "visemes.tsv",
                      root / "lexicon.tsv", root / "grammar.txt", root / "classes.txt")
    dataio.write_manifest(out.train_manifest, train)
    dataio.write_manifest(out.test_manifest, test)
    dataio.write_viseme_map(out.viseme_map, viseme_map())
    with open(out.lexicon, "w", encoding="utf-8") as fh:
        for w in sorted({w for p in phrases for w in p}):
            fh.write(f"{w}\t{' '.join(map(str, table[w]))}\n")
    with open(out.grammar, "w", encoding="utf-8") as fh:
        fh.writelines(" ".join(p) + "\n" for p in phrases)
    with open(out.classes, "w", encoding="utf-8") as fh:
        fh.writelines(f"a{a}w{w}\n" for a in range(N_APERTURES) for w in range(N_WIDTHS))
    return out
