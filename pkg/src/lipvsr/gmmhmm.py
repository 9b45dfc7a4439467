"""Whole-word left-to-right HMMs with diagonal-covariance GMM emissions.

Every word has ``n_states`` emitting states with self and next transitions
only.  Training is segmental (Viterbi) re-estimation: flat start, then
alternating forced alignment and per-state re-estimation, growing the
mixtures by splitting.  Decoding is exact Viterbi over either a list of
whole phrases or a free word loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .dataio import FormatError

LOG_2PI = math.log(2.0 * math.pi)
ABS_VAR_FLOOR = 1e-8
TRANS_FLOOR = 1e-3


class NoPathError(ValueError):
    """No state path fits the observations (sequence too short)."""


# --------------------------------------------------------------------------
# Gaussian mixtures

@dataclass
class GaussianMixture:
    weights: np.ndarray     # (K,)
    means: np.ndarray       # (K, M)
    variances: np.ndarray   # (K, M)

    @property
    def n_components(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    def copy(self):
        return GaussianMixture(self.weights.copy(), self.means.copy(), self.variances.copy())

    def component_logpdf(self, X):
        """(N, K) matrix of ``log w_k + log N(x_n; mu_k, diag var_k)``."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.dim:
            raise ValueError(f"observation dim {X.shape[1]} != model dim {self.dim}")
        const = -0.5 * (self.dim * LOG_2PI + np.log(self.variances).sum(axis=1))
        quad = np.empty((X.shape[0], self.n_components))
        for k in range(self.n_components):
            d = X - self.means[k]
            quad[:, k] = (d * d) @ (1.0 / self.variances[k])
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return logw + const - 0.5 * quad

    def logpdf(self, X):
        X = np.asarray(X, dtype=np.float64)
        out = logsumexp(self.component_logpdf(X), axis=1)
        return float(out[0]) if X.ndim == 1 else out


def gmm_logpdf(gmm, x):
    """Log density of one vector (or each row of a matrix) under ``gmm``."""
    return gmm.logpdf(x)


def variance_floor(data, ratio=1e-4):
    """Per-dimension floor: ``ratio`` times the global variance, never below 1e-8."""
    return np.maximum(ratio * np.var(np.asarray(data, dtype=np.float64), axis=0), ABS_VAR_FLOOR)


def em_step(gmm, X, floor):
    """One EM iteration; returns ``(new_gmm, loglik_under_old_gmm)``.

    Components with no responsibility mass keep their previous mean and
    variance and get zero weight.
    """
    comp = gmm.component_logpdf(X)
    norm = logsumexp(comp, axis=1)
    ll = float(norm.sum())
    resp = np.exp(comp - norm[:, None])
    nk = resp.sum(axis=0)
    means = gmm.means.copy()
    variances = gmm.variances.copy()
    for k in np.flatnonzero(nk > 0):
        means[k] = resp[:, k] @ X / nk[k]
        d = X - means[k]
        variances[k] = np.maximum(resp[:, k] @ (d * d) / nk[k], floor)
    return GaussianMixture(nk / nk.sum(), means, variances), ll


def kmeans_pp(X, K, rng):
    """k-means++ seeding: indices of K rows of X."""
    n = X.shape[0]
    idx = [int(rng.integers(n))]
    d2 = ((X - X[idx[0]]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            nxt = int(rng.integers(n))
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        idx.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(axis=1))
    return idx


def gmm_em(data, n_components, iters=20, seed=0, floor_ratio=1e-4, floor=None):
    """Fit a diagonal GMM by EM from a k-means++ start.

    Returns ``(gmm, trace)`` where ``trace[i]`` is the data log-likelihood of
    the i-th parameter set (``iters + 1`` entries, starting with the
    initialization).  A component left with no responsibility is re-seeded at
    the worst-explained data point.
    """
    X = np.asarray(data, dtype=np.float64)
    N, M = X.shape
    K = int(n_components)
    if N < K:
        raise ValueError(f"need at least {K} points for {K} components, got {N}")
    if floor is None:
        floor = variance_floor(X, floor_ratio)
    rng = np.random.default_rng(seed)
    gvar = np.maximum(X.var(axis=0), floor)
    gmm = GaussianMixture(np.full(K, 1.0 / K), X[kmeans_pp(X, K, rng)].copy(),
                          np.tile(gvar, (K, 1)))
    trace = []
    for _ in range(iters):
        new, ll = em_step(gmm, X, floor)
        trace.append(ll)
        empty = np.flatnonzero(new.weights <= 0)
        if empty.size:
            worst = np.argsort(new.logpdf(X), kind="stable")
            w = new.weights.copy()
            for j, k in enumerate(empty):
                new.means[k] = X[worst[j % N]]
                new.variances[k] = gvar
                w[k] = 1.0 / N
            new.weights = w / w.sum()
        gmm = new
    trace.append(float(gmm.logpdf(X).sum()))
    return gmm, np.array(trace)


def split_mixtures(gmm, target=None, perturb=0.2):
    """Grow a mixture by splitting its heaviest components.

    The component count becomes ``min(2K, target)``.  Each split component
    keeps ``mu + perturb*sigma`` in place and appends ``mu - perturb*sigma``;
    both take half the weight.
    """
    K = gmm.n_components
    new_k = 2 * K if target is None else min(2 * K, int(target))
    n_split = max(new_k - K, 0)
    order = np.argsort(-gmm.weights, kind="stable")[:n_split]
    weights = list(gmm.weights)
    means = list(gmm.means)
    variances = list(gmm.variances)
    for k in order:
        offset = perturb * np.sqrt(gmm.variances[k])
        weights[k] = gmm.weights[k] / 2.0
        means[k] = gmm.means[k] + offset
        weights.append(gmm.weights[k] / 2.0)
        means.append(gmm.means[k] - offset)
        variances.append(gmm.variances[k].copy())
    return GaussianMixture(np.array(weights), np.array(means), np.array(variances))


def mixture_schedule(max_mixtures):
    """Component counts visited by repeated splitting: 1, 2, 4, ..., capped."""
    out = [1]
    while out[-1] < max_mixtures:
        out.append(min(2 * out[-1], max_mixtures))
    return out


# --------------------------------------------------------------------------
# word models, grammar

@dataclass
class WordHmm:
    word: str
    states: list            # GaussianMixture per emitting state
    log_self: np.ndarray    # (S,)
    log_next: np.ndarray    # (S,), last entry is the exit transition

    @property
    def n_states(self):
        return len(self.states)

    def transition_matrix(self):
        """Log transitions over {enter, s1..sS, exit}."""
        S = self.n_states
        A = np.full((S + 2, S + 2), -np.inf)
        A[0, 1] = 0.0
        for s in range(S):
            A[s + 1, s + 1] = self.log_self[s]
            A[s + 1, s + 2] = self.log_next[s]
        return A

    def emissions(self, X):
        """(T, S) emission log-densities."""
        return np.stack([g.logpdf(X) for g in self.states], axis=1)


@dataclass
class Grammar:
    phrases: list                       # list of word tuples
    mode: str = "phrase_list"
    word_penalty: float = 0.0

    def __post_init__(self):
        if self.mode not in ("phrase_list", "word_loop"):
            raise ValueError(f"unknown grammar mode {self.mode!r}")
        self.phrases = [tuple(p) for p in self.phrases]
        if not self.phrases or any(len(p) == 0 for p in self.phrases):
            raise ValueError("grammar needs non-empty phrases")

    @property
    def lexicon(self):
        return sorted({w for p in self.phrases for w in p})


def load_grammar(path, mode="phrase_list"):
    with open(path, encoding="utf-8") as fh:
        phrases = [tuple(line.split()) for line in fh if line.strip()]
    return Grammar(phrases, mode)


def write_grammar(path, phrases):
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(" ".join(p) + "\n" for p in phrases)


@dataclass
class PhraseModelSet:
    words: dict                          # word -> WordHmm
    n_states: int = 4
    meta: dict = field(default_factory=dict)

    def __getitem__(self, word):
        try:
            return self.words[word]
        except KeyError:
            raise KeyError(f"no model for word {word!r}") from None

    def emissions(self, X, words=None):
        return {w: self[w].emissions(X) for w in (words or self.words)}

    def save(self, path):
        lines = ["LIPHMMSET 1", f"states_per_word {self.n_states}"]
        meta = {"silence": "none", "priors": "uniform", "insertion_penalty": "0"}
        meta.update(self.meta)
        lines += [f"meta {k} {v}" for k, v in sorted(meta.items())]
        fmt = lambda arr: " ".join(repr(float(v)) for v in arr)  # noqa: E731
        for w in sorted(self.words):
            hmm = self.words[w]
            lines.append(f"word {w}")
            lines.append("trans_self " + fmt(hmm.log_self))
            lines.append("trans_next " + fmt(hmm.log_next))
            for s, g in enumerate(hmm.states, 1):
                lines.append(f"state {s} components {g.n_components} dim {g.dim}")
                lines.append("weights " + fmt(g.weights))
                for k in range(g.n_components):
                    lines.append("mean " + fmt(g.means[k]))
                    lines.append("var " + fmt(g.variances[k]))
            lines.append("endword")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            lines = [ln.rstrip("\n") for ln in fh]
        if not lines or lines[0] != "LIPHMMSET 1":
            raise FormatError("not a model set file", path)
        pos = 1

        def take(prefix):
            nonlocal pos
            if pos >= len(lines) or not lines[pos].startswith(prefix):
                raise FormatError(f"line {pos + 1}: expected {prefix!r}", path)
            pos += 1
            return lines[pos - 1][len(prefix):].split()

        n_states = int(take("states_per_word ")[0])
        meta = {}
        while pos < len(lines) and lines[pos].startswith("meta "):
            _, k, v = lines[pos].split(" ", 2)
            meta[k] = v
            pos += 1
        words = {}
        while pos < len(lines) and lines[pos]:
            w = take("word ")[0]
            log_self = np.array([float(v) for v in take("trans_self ")])
            log_next = np.array([float(v) for v in take("trans_next ")])
            states = []
            for _ in range(n_states):
                head = take("state ")
                K = int(head[2])
                weights = np.array([float(v) for v in take("weights ")])
                means, variances = [], []
                for _ in range(K):
                    means.append([float(v) for v in take("mean ")])
                    variances.append([float(v) for v in take("var ")])
                states.append(GaussianMixture(weights, np.array(means), np.array(variances)))
            take("endword")
            words[w] = WordHmm(w, states, log_self, log_next)
        return cls(words, n_states, meta)


# --------------------------------------------------------------------------
# Viterbi

@dataclass
class DecodeResult:
    words: list
    score: float
    alignment: np.ndarray    # (T, 2): word position, state index
    phrase_index: int | None = None


def viterbi_chain(log_emit, log_self, log_next):
    """Best path through a strict left-to-right chain.

    The path starts in state 0 at frame 0 and leaves through the last
    state's exit transition after the final frame.  On equal scores the
    predecessor with the lower state index wins.  Returns ``(score, path)``.
    """
    E = np.asarray(log_emit, dtype=np.float64)
    T, S = E.shape
    if T < S:
        raise NoPathError(f"{T} frames cannot cover {S} states")
    delta = np.full(S, -np.inf)
    delta[0] = E[0, 0]
    back = np.zeros((T, S), dtype=np.int64)
    states = np.arange(S)
    for t in range(1, T):
        stay = delta + log_self
        move = np.full(S, -np.inf)
        move[1:] = delta[:-1] + log_next[:-1]
        take_move = move >= stay
        back[t] = np.where(take_move, states - 1, states)
        delta = np.where(take_move, move, stay) + E[t]
    score = delta[-1] + log_next[-1]
    if not np.isfinite(score):
        raise NoPathError("no finite-score path")
    path = np.empty(T, dtype=np.int64)
    path[-1] = S - 1
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return float(score), path


def _chain(models, words, emis):
    E = np.hstack([emis[w] for w in words])
    log_self = np.concatenate([models[w].log_self for w in words])
    log_next = np.concatenate([models[w].log_next for w in words])
    return E, log_self, log_next


def _path_to_alignment(models, words, path):
    sizes = [models[w].n_states for w in words]
    starts = np.cumsum([0] + sizes[:-1])
    word_pos = np.searchsorted(starts, path, side="right") - 1
    return np.stack([word_pos, path - starts[word_pos]], axis=1)


def force_align(models, words, observations, emissions=None):
    """Viterbi alignment of one known word sequence: ``(alignment, score)``."""
    words = list(words)
    if not words:
        raise ValueError("empty word sequence")
    emis = emissions or models.emissions(observations, set(words))
    score, path = viterbi_chain(*_chain(models, words, emis))
    return _path_to_alignment(models, words, path), score


def _decode_phrases(models, grammar, emis):
    best = None
    for i, phrase in enumerate(grammar.phrases):
        try:
            score, path = viterbi_chain(*_chain(models, phrase, emis))
        except NoPathError:
            continue
        if best is None or score > best[0]:
            best = (score, i, path)
    if best is None:
        raise NoPathError("observations too short for every phrase")
    score, i, path = best
    phrase = grammar.phrases[i]
    return DecodeResult(list(phrase), score, _path_to_alignment(models, phrase, path), i)


def _decode_word_loop(models, grammar, emis):
    lex = grammar.lexicon
    V = len(lex)
    enter = -math.log(V) + grammar.word_penalty
    T = next(iter(emis.values())).shape[0]
    deltas = [np.full(models[w].n_states, -np.inf) for w in lex]
    for d, w in zip(deltas, lex):
        d[0] = enter + emis[w][0, 0]
    # back pointers: within-word predecessor state, or -1 = came from word end
    backs = [np.zeros((T, models[w].n_states), dtype=np.int64) for w in lex]
    end_from = np.zeros(T, dtype=np.int64)    # best finishing word at frame t-1
    for t in range(1, T):
        ends = np.array([d[-1] + models[w].log_next[-1] for d, w in zip(deltas, lex)])
        best_word = int(np.argmax(ends))          # first maximum = lowest index
        end_from[t] = best_word
        new_enter = ends[best_word] + enter
        for j, w in enumerate(lex):
            m, d = models[w], deltas[j]
            stay = d + m.log_self
            move = np.full(m.n_states, -np.inf)
            move[0] = new_enter
            move[1:] = d[:-1] + m.log_next[:-1]
            take_move = move >= stay
            idx = np.arange(m.n_states)
            backs[j][t] = np.where(take_move, idx - 1, idx)
            deltas[j] = np.where(take_move, move, stay) + emis[w][t]
    finals = np.array([d[-1] + models[w].log_next[-1] for d, w in zip(deltas, lex)])
    j = int(np.argmax(finals))
    score = float(finals[j])
    if not np.isfinite(score):
        raise NoPathError("observations too short for any word")
    s = models[lex[j]].n_states - 1
    seq = []          # (lexicon index, state, first frame of a word), reversed
    for t in range(T - 1, -1, -1):
        prev = -1 if t == 0 else backs[j][t, s]
        seq.append((j, s, prev == -1))
        if t == 0:
            break
        if prev == -1:
            j = int(end_from[t])
            s = models[lex[j]].n_states - 1
        else:
            s = int(prev)
    seq.reverse()
    words, align, pos = [], [], -1
    for j, s, starts in seq:
        if starts:
            words.append(lex[j])
            pos += 1
        align.append((pos, s))
    return DecodeResult(words, score, np.array(align, dtype=np.int64))


def viterbi_decode(models, grammar, observations, emissions=None):
    """Most likely word sequence allowed by ``grammar``."""
    words = grammar.lexicon
    emis = emissions or models.emissions(observations, words)
    if grammar.mode == "phrase_list":
        return _decode_phrases(models, grammar, emis)
    return _decode_word_loop(models, grammar, emis)


# --------------------------------------------------------------------------
# embedded (segmental) training

@dataclass
class TrainReport:
    rows: list = field(default_factory=list)      # (pass, loglik, components)
    flags: list = field(default_factory=list)

    def to_csv(self):
        out = ["pass,loglik,components"]
        out += [f"{p},{ll!r},{k}" for p, ll, k in self.rows]
        return "\n".join(out) + "\n"


def _flat_assign(T, n_units):
    bounds = (np.arange(n_units + 1) * T) // n_units
    return np.repeat(np.arange(n_units), np.diff(bounds))


class _Trainer:
    def __init__(self, data, lexicon, n_states, floor_ratio):
        self.data = [(np.asarray(X, dtype=np.float64), list(w)) for X, w in data]
        if not self.data:
            raise ValueError("empty training set")
        self.lexicon = sorted(lexicon) if lexicon is not None else sorted(
            {w for _, ws in self.data for w in ws})
        missing = {w for _, ws in self.data for w in ws} - set(self.lexicon)
        if missing:
            raise ValueError(f"transcript words outside the lexicon: {sorted(missing)}")
        self.S = n_states
        self.key = {(w, s): i * n_states + s for i, w in enumerate(self.lexicon)
                    for s in range(n_states)}
        self.X = np.vstack([X for X, _ in self.data])
        self.floor = variance_floor(self.X, floor_ratio)
        self.gmean = self.X.mean(axis=0)
        self.gvar = np.maximum(self.X.var(axis=0), self.floor)
        self.models = None
        self.flags = []

    def assignments_flat(self):
        keys, seg_counts = [], np.zeros(len(self.key))
        for X, words in self.data:
            units = [self.key[(w, s)] for w in words for s in range(self.S)]
            a = np.array(units)[_flat_assign(X.shape[0], len(units))]
            keys.append(a)
            np.add.at(seg_counts, units, 1)
        return np.concatenate(keys), seg_counts

    def align_all(self):
        keys, seg_counts, total = [], np.zeros(len(self.key)), 0.0
        for X, words in self.data:
            align, score = force_align(self.models, words, X)
            total += score
            keys.append(np.array([self.key[(words[p], s)] for p, s in align]))
            np.add.at(seg_counts, [self.key[(w, s)] for w in words for s in range(self.S)], 1)
        return np.concatenate(keys), seg_counts, total

    def reestimate(self, keys, seg_counts, pass_no):
        occupancy = np.bincount(keys, minlength=len(self.key))
        order = np.argsort(keys, kind="stable")
        bounds = np.concatenate([[0], np.cumsum(occupancy)])
        words = {}
        for i, w in enumerate(self.lexicon):
            prev = None if self.models is None else self.models[w]
            states, log_self, log_next = [], np.zeros(self.S), np.zeros(self.S)
            for s in range(self.S):
                k = self.key[(w, s)]
                n = occupancy[k]
                if n == 0:
                    self.flags.append(f"pass {pass_no}: {w} state {s + 1} received no frames")
                    if prev is not None:
                        states.append(prev.states[s])
                        log_self[s], log_next[s] = prev.log_self[s], prev.log_next[s]
                    else:
                        states.append(GaussianMixture(np.ones(1), self.gmean[None].copy(),
                                                      self.gvar[None].copy()))
                        log_self[s] = log_next[s] = math.log(0.5)
                    continue
                frames = self.X[order[bounds[k]:bounds[k + 1]]]
                if prev is None or prev.states[s].n_components == 1:
                    mu = frames.mean(axis=0)
                    var = np.maximum(((frames - mu) ** 2).mean(axis=0), self.floor)
                    g = GaussianMixture(np.ones(1), mu[None], var[None])
                else:
                    g = em_step(prev.states[s], frames, self.floor)[0]
                states.append(g)
                p_next = min(max(seg_counts[k] / n, TRANS_FLOOR), 1.0 - TRANS_FLOOR)
                log_self[s], log_next[s] = math.log(1.0 - p_next), math.log(p_next)
            words[w] = WordHmm(w, states, log_self, log_next)
        self.models = PhraseModelSet(words, self.S)

    def split_all(self, target):
        for hmm in self.models.words.values():
            hmm.states = [split_mixtures(g, target) for g in hmm.states]


def embedded_train(data, lexicon=None, n_states=4, max_mixtures=15, passes_per_split=4,
                   max_iters=20, rel_tol=1e-4, floor_ratio=1e-4, seed=0, schedule=None):
    """Train whole-word models from ``[(observations, words), ...]``.

    ``schedule`` lists the mixture sizes to grow through (default: doubling
    from 1 up to ``max_mixtures``).

    Returns ``(PhraseModelSet, TrainReport)``.  Report rows hold the total
    aligned log-likelihood seen at each alignment pass and the mixture size
    in use.
    """
    tr = _Trainer(data, lexicon, n_states, floor_ratio)
    for X, words in tr.data:
        if X.shape[0] < n_states * len(words):
            raise NoPathError(f"{X.shape[0]} frames for {len(words)} words")
    keys, segs = tr.assignments_flat()
    tr.reestimate(keys, segs, 0)
    report = TrainReport()
    pass_no, prev_ll = 0, None
    for _ in range(max_iters):
        pass_no += 1
        keys, segs, ll = tr.align_all()
        report.rows.append((pass_no, ll, 1))
        converged = prev_ll is not None and (ll - prev_ll) < rel_tol * abs(prev_ll)
        tr.reestimate(keys, segs, pass_no)
        prev_ll = ll
        if converged:
            break
    if schedule is None:
        schedule = mixture_schedule(max_mixtures)
    for target in schedule[1:]:
        tr.split_all(target)
        for _ in range(passes_per_split):
            pass_no += 1
            keys, segs, ll = tr.align_all()
            report.rows.append((pass_no, ll, target))
            tr.reestimate(keys, segs, pass_no)
    report.flags = tr.flags
    tr.models.meta.update({"max_mixtures": str(schedule[-1]), "seed": str(seed)})
    return tr.models, report
