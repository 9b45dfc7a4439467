"""Recognition metrics: word correctness/accuracy, sentence and frame accuracy."""

from __future__ import annotations

import statistics
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AlignmentCounts:
    H: int
    S: int
    D: int
    I: int  # noqa: E741
    N: int

    def __post_init__(self):
        if min(self.H, self.S, self.D, self.I, self.N) < 0:
            raise ValueError("counts must be non-negative")
        if self.H != self.N - self.D - self.S:
            raise ValueError("H must equal N - D - S")

    def __add__(self, other):
        return AlignmentCounts(self.H + other.H, self.S + other.S, self.D + other.D,
                               self.I + other.I, self.N + other.N)

    @property
    def errors(self):
        return self.S + self.D + self.I


def align_words(reference, hypothesis):
    """Unit-cost minimum edit alignment of two word lists.

    Among equal-cost alignments the traceback prefers, at every cell,
    match/substitution, then deletion, then insertion.
    """
    ref, hyp = list(reference), list(hypothesis)
    n, m = len(ref), len(hyp)
    cost = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[:, 0] = np.arange(n + 1)
    cost[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            diag = cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            cost[i, j] = min(diag, cost[i - 1, j] + 1, cost[i, j - 1] + 1)
    H = S = D = I = 0  # noqa: E741
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i, j] == cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            if ref[i - 1] == hyp[j - 1]:
                H += 1
            else:
                S += 1
            i, j = i - 1, j - 1
        elif i > 0 and cost[i, j] == cost[i - 1, j] + 1:
            D += 1
            i -= 1
        else:
            I += 1  # noqa: E741
            j -= 1
    return AlignmentCounts(H, S, D, I, n)


def accuracy(counts):
    """(H - I) / N in percent; negative when insertions outnumber hits."""
    if counts.N == 0:
        raise ZeroDivisionError("accuracy undefined for N = 0")
    return (counts.H - counts.I) / counts.N * 100.0


def correctness(counts):
    """H / N in percent."""
    if counts.N == 0:
        raise ZeroDivisionError("correctness undefined for N = 0")
    return counts.H / counts.N * 100.0


def sentence_correctness(pairs):
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no sentence pairs")
    hits = sum(list(r) == list(h) for r, h in pairs)
    return hits / len(pairs) * 100.0


def frame_accuracy(labels, predictions, class_map=None):
    """Percent of frames whose predicted class matches the label.

    With ``class_map`` (an index array, e.g. phoneme -> viseme) both sides are
    mapped before comparison.
    """
    y = np.asarray(labels, dtype=np.int64)
    p = np.asarray(predictions, dtype=np.int64)
    if y.shape != p.shape:
        raise ValueError(f"{y.size} labels vs {p.size} predictions")
    if y.size == 0:
        raise ValueError("no frames")
    if class_map is not None:
        cmap = np.asarray(class_map)
        top = max(y.max(), p.max())
        if min(y.min(), p.min()) < 0 or top >= len(cmap):
            raise ValueError(f"class {top} has no mapping")
        y, p = cmap[y], cmap[p]
    return float(np.mean(y == p) * 100.0)


# --------------------------------------------------------------------------
# per-speaker report

@dataclass(frozen=True)
class SpeakerResult:
    speaker: str
    view: str
    SC: float
    WC: float
    WA: float


def speaker_results(utterances, view):
    """Aggregate ``[(speaker, reference, hypothesis), ...]`` into per-speaker rows.

    Word counts are pooled over each speaker's utterances before the
    percentages are taken.
    """
    by_spk = {}
    for spk, ref, hyp in utterances:
        by_spk.setdefault(spk, []).append((list(ref), list(hyp)))
    rows = []
    for spk in sorted(by_spk):
        pairs = by_spk[spk]
        total = AlignmentCounts(0, 0, 0, 0, 0)
        for ref, hyp in pairs:
            total = total + align_words(ref, hyp)
        rows.append(SpeakerResult(spk, str(view), sentence_correctness(pairs),
                                  correctness(total), accuracy(total)))
    return rows


@dataclass(frozen=True)
class Report:
    rows: tuple          # SpeakerResult
    summary: dict        # view -> {"mean": (SC, WC, WA), "sd": (SC, WC, WA)}

    def to_csv(self):
        out = ["speaker,view,SC,WC,WA"]
        for r in self.rows:
            out.append(f"{r.speaker},{r.view},{r.SC:.2f},{r.WC:.2f},{r.WA:.2f}")
        for view, stats in self.summary.items():
            for label, key in (("Mean", "mean"), ("SD", "sd")):
                sc, wc, wa = stats[key]
                out.append(f"{label},{view},{sc:.2f},{wc:.2f},{wa:.2f}")
        return "\n".join(out) + "\n"

    def to_text(self):
        head = f"{'Spkr.':<10}{'view':>8}{'SC':>8}{'WC':>8}{'WA':>8}"
        out = [head, "-" * len(head)]
        for r in self.rows:
            out.append(f"{r.speaker:<10}{r.view:>8}{r.SC:>8.1f}{r.WC:>8.1f}{r.WA:>8.1f}")
        out.append("-" * len(head))
        for view, stats in self.summary.items():
            for label, key in (("Mean", "mean"), ("SD", "sd")):
                sc, wc, wa = stats[key]
                out.append(f"{label:<10}{view:>8}{sc:>8.1f}{wc:>8.1f}{wa:>8.1f}")
        return "\n".join(out) + "\n"


def report(rows):
    """Per-speaker rows plus mean and sample SD (n - 1) per view; SD is 0.0 for one speaker."""
    rows = tuple(rows)
    if not rows:
        raise ValueError("no speaker results")
    summary = {}
    for view in dict.fromkeys(r.view for r in rows):
        sel = [r for r in rows if r.view == view]
        cols = [[getattr(r, c) for r in sel] for c in ("SC", "WC", "WA")]
        mean = tuple(statistics.fmean(c) for c in cols)
        sd = tuple(statistics.stdev(c) if len(c) > 1 else 0.0 for c in cols)
        summary[view] = {"mean": mean, "sd": sd}
    return Report(rows, summary)
