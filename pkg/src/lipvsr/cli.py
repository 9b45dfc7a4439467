"""Command-line driver: one subcommand per pipeline stage, cached on disk.

Work directory layout (``--out``, default ``work``)::

    view-<v>/bank1.bank, bank2.bank      filter banks
    view-<v>/features/<id>.feat          PCA network histograms
    view-<v>/lstm.model, lstm_loss.csv   LSTM and its loss trace
    view-<v>/posteriors/<id>.feat        per-frame class posteriors
    tandem-<v1+v2..>/features/<id>.feat  tandem observations
    tandem-<...>/hmm.model, hmm_report.csv
    tandem-<...>/hyp-<split>.txt         decoded transcripts, ``id<TAB>words``
    tandem-<...>/report-<split>.csv/.txt, frames-<split>.csv

Every stage directory gets ``config.ini`` (the resolved configuration) and
each artifact group records the config hash that produced it.  A stage
refuses upstream artifacts made under another hash unless ``--force``.

Errors print one line, ``error: <category>: <message>``, and exit nonzero.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

THREAD_ENV = "LIPVSR_THREADS"
_BLAS_ENV = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMBA_NUM_THREADS")
META = "meta.txt"


class StageError(Exception):
    """Failure with a machine-readable category (exit code 1)."""

    def __init__(self, category, message):
        super().__init__(message)
        self.category = category


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise StageError("usage", message)


# --------------------------------------------------------------------------
# helpers

def _log(msg):
    print(msg, flush=True)


def _view_dir(args, view):
    return Path(args.out) / f"view-{view}"


def _tandem_dir(args, views):
    return Path(args.out) / ("tandem-" + "+".join(str(v) for v in views))


def _check_stamp(meta_path, expected, what, stage, force):
    """Refuse artifacts missing or produced under a different config hash."""
    from . import dataio
    if not Path(meta_path).exists():
        raise StageError("missing-artifact", f"missing {what}; run {stage}")
    got = dataio.read_meta(meta_path).get("config_hash")
    if got != expected and not force:
        raise StageError("config-mismatch",
                         f"{what} built under config {got}, current config is {expected}; "
                         f"re-run {stage} or pass --force")


def _check_header(meta, expected, what, stage, force):
    got = meta.get("config_hash")
    if got != expected and not force:
        raise StageError("config-mismatch",
                         f"{what} built under config {got}, current config is {expected}; "
                         f"re-run {stage} or pass --force")


def _stage_dir(path, cfg):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    cfg.write(path / "config.ini")
    return path


def _manifest(cfg, args, split):
    from . import dataio
    override = getattr(args, split, None)
    path = cfg.path(split, override)
    if path is None:
        raise StageError("usage", f"no {split} manifest; pass --{split} or set [paths] {split}")
    if not path.exists():
        raise StageError("missing-artifact", f"missing {split} manifest {path}")
    return dataio.load_manifest(path)


def _utterances(cfg, args, view, splits=("train", "test")):
    out = []
    for split in splits:
        if split == "test" and cfg.path("test", getattr(args, "test", None)) is None:
            continue
        out += [u for u in _manifest(cfg, args, split) if u.view == view]
    return out


def _by_id(utts):
    seen = {}
    for u in utts:
        if u.id in seen:
            raise StageError("data", f"utterance id {u.id} appears twice")
        seen[u.id] = u
    return seen


def _target_views(cfg, args):
    if getattr(args, "view", None) is not None:
        return [args.view]
    return cfg.views()


def _feature_path(d, uid):
    return Path(d) / f"{uid}.feat"


# --------------------------------------------------------------------------
# stages

def cmd_synth(args, cfg):
    from . import synth
    from .dataio import VIEWS
    views = _parse_views(args.views)
    for v in views:
        if v not in VIEWS:
            raise StageError("usage", f"unknown view {v}")
    corpus = synth.synth_corpus(args.out, seed=args.seed, n_speakers=args.speakers,
                                n_phrases=args.phrases, reps=args.reps,
                                noise_level=args.noise, views=views,
                                n_test_speakers=args.test_speakers)
    from . import dataio
    train = dataio.load_manifest(corpus.train_manifest)
    test = dataio.load_manifest(corpus.test_manifest)
    n_spk = len({u.speaker for u in train + test})
    _log(f"synth: {n_spk} speakers, {args.phrases} phrases x {args.reps} reps, "
         f"views {','.join(map(str, views))}; {len(train)} train / {len(test)} test "
         f"utterance-views under {corpus.root}")


def _learn_banks(cfg, args, view):
    from . import pcanet
    pc = cfg.pcanet_config()
    utts = _utterances(cfg, args, view, ("train",))
    if not utts:
        raise StageError("data", f"no training utterances for view {view}")
    frames = [f for u in utts for f in u.load_frames(normalize=pc.normalize)]
    b1, b2 = pcanet.learn_banks(frames, pc)
    d = _stage_dir(_view_dir(args, view), cfg)
    stamp = {"config_hash": cfg.hash("pcanet"), "view": str(view)}
    for bank in (b1, b2):
        pcanet.FilterBank(bank.stage, bank.k, bank.filters, bank.eigenvalues,
                          stamp).save(d / f"bank{bank.stage}.bank")
    _log(f"learn-filters: view {view}: {len(frames)} frames, "
         f"stage-1 eigenvalues {b1.eigenvalues[0]:.4g}..{b1.eigenvalues[-1]:.4g}")
    return b1, b2


def _load_banks(cfg, args, view, learn_if_missing=False):
    from . import pcanet
    d = _view_dir(args, view)
    paths = [d / "bank1.bank", d / "bank2.bank"]
    if not all(p.exists() for p in paths):
        if learn_if_missing:
            return _learn_banks(cfg, args, view)
        raise StageError("missing-artifact", f"missing filter bank for view {view}; "
                                             "run learn-filters")
    banks = [pcanet.FilterBank.load(p) for p in paths]
    for b in banks:
        _check_header(b.meta, cfg.hash("pcanet"), f"filter bank for view {view}",
                      "learn-filters", args.force)
    _log(f"extract: view {view}: reusing cached filter banks")
    return banks


def cmd_learn_filters(args, cfg):
    for view in _target_views(cfg, args):
        _learn_banks(cfg, args, view)


def cmd_extract(args, cfg):
    from . import dataio, pcanet
    pc = cfg.pcanet_config()
    for view in _target_views(cfg, args):
        b1, b2 = _load_banks(cfg, args, view, learn_if_missing=True)
        utts = _utterances(cfg, args, view)
        out = _stage_dir(_view_dir(args, view) / "features", cfg)
        shape = None
        t0 = time.perf_counter()
        for u in utts:
            frames = u.load_frames(normalize=pc.normalize)
            if shape is None:
                shape = frames.shape[1:]
            elif frames.shape[1:] != shape:
                raise StageError("data", f"utterance {u.id} frames are {frames.shape[1:]}, "
                                         f"expected {shape}")
            feats = pcanet.extract_features(frames, b1, b2, pc)
            dataio.write_features(_feature_path(out, u.id), feats)
        dataio.write_meta(out / META, {"config_hash": cfg.hash("pcanet"), "view": view,
                                       "dim": pc.feature_dim(), "count": len(utts),
                                       "frame_height": shape[0], "frame_width": shape[1]})
        _log(f"extract: view {view}: {len(utts)} utterances in "
             f"{time.perf_counter() - t0:.1f} s")


def _read_features(d, uid, stage):
    from . import dataio
    p = _feature_path(d, uid)
    if not p.exists():
        raise StageError("missing-artifact", f"missing features for {uid} in {d}; run {stage}")
    return dataio.read_features(p)


def cmd_train_lstm(args, cfg):
    from . import dataio, lstm
    for view in _target_views(cfg, args):
        fdir = _view_dir(args, view) / "features"
        _check_stamp(fdir / META, cfg.hash("pcanet"), f"features for view {view}",
                     "extract", args.force)
        meta = dataio.read_meta(fdir / META)
        scaling = cfg.scaling(int(meta["frame_height"]), int(meta["frame_width"]))
        tc = cfg.train_config(scaling)
        utts = _utterances(cfg, args, view, ("train",))
        missing = [u.id for u in utts if u.frame_labels is None]
        if missing:
            raise StageError("data", f"utterance {missing[0]} has no frame labels")
        data = [(_read_features(fdir, u.id, "extract"), u.frame_labels) for u in utts]
        t0 = time.perf_counter()
        params, trace = lstm.train(data, tc)
        d = _stage_dir(_view_dir(args, view), cfg)
        params.save(d / "lstm.model", {"config_hash": cfg.hash("lstm"), "view": view})
        with open(d / "lstm_loss.csv", "w", encoding="utf-8") as fh:
            fh.write("iteration,loss\n")
            fh.writelines(f"{i + 1},{v!r}\n" for i, v in enumerate(trace))
        tail = trace[-min(len(trace), 100):].mean()
        _log(f"train-lstm: view {view}: {tc.max_iterations} iterations in "
             f"{time.perf_counter() - t0:.1f} s, scaling {scaling:.6g}, "
             f"final mean loss {tail:.4f}")


def _load_lstm(cfg, args, view):
    from . import lstm
    path = _view_dir(args, view) / "lstm.model"
    if not path.exists():
        raise StageError("missing-artifact", f"missing LSTM model for view {view}; "
                                             "run train-lstm")
    params, meta = lstm.LstmParams.load(path)
    _check_header(meta, cfg.hash("lstm"), f"LSTM model for view {view}", "train-lstm",
                  args.force)
    return params


def cmd_posteriors(args, cfg):
    from . import dataio, lstm
    for view in _target_views(cfg, args):
        params = _load_lstm(cfg, args, view)
        fdir = _view_dir(args, view) / "features"
        _check_stamp(fdir / META, cfg.hash("pcanet"), f"features for view {view}",
                     "extract", args.force)
        out = _stage_dir(_view_dir(args, view) / "posteriors", cfg)
        utts = _utterances(cfg, args, view)
        for u in utts:
            post = lstm.posteriors(params, _read_features(fdir, u.id, "extract"))
            dataio.write_features(_feature_path(out, u.id), post)
        dataio.write_meta(out / META, {"config_hash": cfg.hash("lstm"), "view": view,
                                       "classes": params.n_classes, "count": len(utts)})
        _log(f"posteriors: view {view}: {len(utts)} utterances")


def _posterior_dir(cfg, args, view):
    d = _view_dir(args, view) / "posteriors"
    _check_stamp(d / META, cfg.hash("lstm"), f"posteriors for view {view}", "posteriors",
                 args.force)
    return d


def _write_tandem(cfg, args, views):
    from . import dataio, tandem
    floor, window = cfg.tandem_params()
    pdirs = {v: _posterior_dir(cfg, args, v) for v in views}
    per_view = {v: _by_id(_utterances(cfg, args, v)) for v in views}
    ids = sorted(set().union(*per_view.values()))
    for uid in ids:
        absent = [v for v in views if uid not in per_view[v]]
        if absent:
            raise StageError("data", f"utterance {uid} missing from view "
                                     f"{', '.join(map(str, absent))}")
    out = _stage_dir(_tandem_dir(args, views) / "features", cfg)
    dim = None
    for uid in ids:
        posts = {v: _read_features(pdirs[v], uid, "posteriors") for v in views}
        try:
            obs = tandem.concat_views(posts, floor, window)
        except ValueError as exc:
            raise StageError("data", f"utterance {uid}: {exc}") from None
        dim = obs.shape[1]
        dataio.write_features(_feature_path(out, uid), obs)
    dataio.write_meta(out / META, {
        "config_hash": cfg.hash("tandem"), "views": "+".join(map(str, views)),
        "V": len(views), "C": dim // (3 * len(views)) if dim else 0, "dim": dim or 0,
        "delta_window": window, "floor": repr(floor), "count": len(ids)})
    _log(f"tandem: views {'+'.join(map(str, views))}: {len(ids)} utterances, dim {dim}")


def cmd_tandem(args, cfg):
    for view in _target_views(cfg, args):
        _write_tandem(cfg, args, [view])


def cmd_fuse(args, cfg):
    views = _parse_views(args.views) if args.views else cfg.views()
    from .tandem import order_views
    try:
        views = order_views(views)
    except ValueError as exc:
        raise StageError("usage", str(exc)) from None
    _write_tandem(cfg, args, views)


def _decode_views(cfg, args):
    views = _parse_views(args.views) if getattr(args, "views", None) else cfg.views()
    from .tandem import order_views
    return order_views(views)


def _tandem_features(cfg, args, views):
    d = _tandem_dir(args, views) / "features"
    stage = "tandem" if len(views) == 1 else "fuse"
    _check_stamp(d / META, cfg.hash("tandem"),
                 f"tandem features for views {'+'.join(map(str, views))}", stage, args.force)
    return d, stage


def _grammar(cfg, args):
    from . import gmmhmm
    path = cfg.path("grammar", args.grammar)
    if path is None:
        raise StageError("usage", "no grammar; pass --grammar or set [paths] grammar")
    if not path.exists():
        raise StageError("missing-artifact", f"missing grammar file {path}")
    return gmmhmm.load_grammar(path, cfg.get("hmm", "grammar_mode"))


def cmd_train_hmm(args, cfg):
    from . import gmmhmm
    views = _decode_views(cfg, args)
    tdir, stage = _tandem_features(cfg, args, views)
    hp = cfg.hmm_params()
    utts = _by_id(_utterances(cfg, args, views[0], ("train",)))
    data = [(_read_features(tdir, uid, stage), utts[uid].transcript) for uid in sorted(utts)]
    lexicon = None
    if cfg.path("grammar", args.grammar) is not None:
        lexicon = _grammar(cfg, args).lexicon
    t0 = time.perf_counter()
    models, report = gmmhmm.embedded_train(
        data, lexicon, n_states=hp["n_states"], max_mixtures=hp["schedule"][-1],
        passes_per_split=hp["passes_per_split"], max_iters=hp["max_iters"],
        floor_ratio=hp["floor_ratio"], seed=hp["seed"], schedule=hp["schedule"])
    models.meta["config_hash"] = cfg.hash("hmm")
    d = _stage_dir(_tandem_dir(args, views), cfg)
    models.save(d / "hmm.model")
    (d / "hmm_report.csv").write_text(report.to_csv(), encoding="utf-8")
    for flag in report.flags:
        _log(f"train-hmm: warning: {flag}")
    _log(f"train-hmm: {len(models.words)} words, {len(report.rows)} passes in "
         f"{time.perf_counter() - t0:.1f} s")


def _load_models(cfg, args, views):
    from . import gmmhmm
    path = _tandem_dir(args, views) / "hmm.model"
    if not path.exists():
        raise StageError("missing-artifact", "missing model set; run train-hmm")
    models = gmmhmm.PhraseModelSet.load(path)
    _check_header(models.meta, cfg.hash("hmm"), "model set", "train-hmm", args.force)
    return models


def cmd_decode(args, cfg):
    from . import dataio, gmmhmm
    views = _decode_views(cfg, args)
    models = _load_models(cfg, args, views)
    tdir, stage = _tandem_features(cfg, args, views)
    grammar = _grammar(cfg, args)
    utts = _by_id(_utterances(cfg, args, views[0], (args.split,)))
    d = _tandem_dir(args, views)
    lines = []
    for uid in sorted(utts):
        try:
            res = gmmhmm.viterbi_decode(models, grammar, _read_features(tdir, uid, stage))
            words = " ".join(res.words)
        except gmmhmm.NoPathError:
            words = ""
        lines.append(f"{uid}\t{words}\n")
    with open(d / f"hyp-{args.split}.txt", "w", encoding="utf-8") as fh:
        fh.writelines(lines)
    dataio.write_meta(d / f"hyp-{args.split}.meta", {"config_hash": cfg.hash("hmm"),
                                                      "count": len(lines)})
    _log(f"decode: {len(lines)} {args.split} utterances")


def _read_hypotheses(path):
    hyps = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line:
                uid, _, words = line.partition("\t")
                hyps[uid] = words.split()
    return hyps


def cmd_score(args, cfg):
    import numpy as np

    from . import dataio, scoring
    views = _decode_views(cfg, args)
    d = _tandem_dir(args, views)
    hyp_path = d / f"hyp-{args.split}.txt"
    _check_stamp(d / f"hyp-{args.split}.meta", cfg.hash("hmm"),
                 f"{args.split} hypotheses", "decode", args.force)
    hyps = _read_hypotheses(hyp_path)
    utts = _by_id(_utterances(cfg, args, views[0], (args.split,)))
    missing = sorted(set(utts) - set(hyps))
    if missing:
        raise StageError("data", f"no hypothesis for {missing[0]}; run decode")
    label = "+".join(map(str, views))
    rows = scoring.speaker_results(
        [(utts[uid].speaker, utts[uid].transcript, hyps[uid]) for uid in sorted(utts)], label)
    rep = scoring.report(rows)
    (d / f"report-{args.split}.csv").write_text(rep.to_csv(), encoding="utf-8")
    (d / f"report-{args.split}.txt").write_text(rep.to_text(), encoding="utf-8")
    _log(rep.to_text().rstrip())

    vmap_path = cfg.path("viseme_map", args.viseme_map)
    frame_lines = ["view,phoneme,viseme"]
    for view in views:
        vutts = [u for u in _utterances(cfg, args, view, (args.split,))
                 if u.frame_labels is not None]
        if not vutts:
            continue
        pdir = _posterior_dir(cfg, args, view)
        labels = np.concatenate([u.frame_labels for u in vutts])
        preds = np.concatenate([np.argmax(_read_features(pdir, u.id, "posteriors"), axis=1)
                                for u in vutts])
        phon = scoring.frame_accuracy(labels, preds)
        if vmap_path is not None:
            vis = scoring.frame_accuracy(labels, preds, dataio.load_viseme_map(vmap_path))
            frame_lines.append(f"{view},{phon:.2f},{vis:.2f}")
            _log(f"score: view {view}: frame accuracy phoneme {phon:.2f}%, viseme {vis:.2f}%")
        else:
            frame_lines.append(f"{view},{phon:.2f},")
            _log(f"score: view {view}: frame accuracy phoneme {phon:.2f}%")
    if len(frame_lines) > 1:
        (d / f"frames-{args.split}.csv").write_text("\n".join(frame_lines) + "\n",
                                                    encoding="utf-8")


# --------------------------------------------------------------------------
# argument parsing

def _parse_views(text):
    try:
        return [int(v) for v in str(text).replace("+", ",").split(",") if v.strip()]
    except ValueError:
        raise StageError("usage", f"bad view list {text!r}") from None


def _phrase_count(text):
    from .synth import MAX_PHRASES
    n = int(text)
    if not 1 <= n <= MAX_PHRASES:
        raise argparse.ArgumentTypeError(f"must be in [1, {MAX_PHRASES}], got {n}")
    return n


def _positive_int(text):
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {n}")
    return n


def _add_globals(p, suppress):
    default = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--config", default=default(None), help="INI configuration file")
    p.add_argument("--out", default=default(None),
                   help="work directory (corpus directory for synth); default work")
    p.add_argument("--force", action="store_true", default=default(False),
                   help="accept upstream artifacts built under another config")
    p.add_argument("--threads", type=_positive_int, default=default(None),
                   help=f"numeric thread count (else ${THREAD_ENV}, else 1)")
    p.add_argument("--set", action="append", default=default([]), metavar="SECTION.KEY=VALUE",
                   help="override one configuration value (repeatable)")


def _add_paths(p, grammar=False, vmap=False):
    p.add_argument("--train", help="training manifest (default [paths])")
    p.add_argument("--test", help="test manifest (default [paths])")
    if grammar:
        p.add_argument("--grammar", help="grammar file, one phrase per line")
    if vmap:
        p.add_argument("--viseme-map", dest="viseme_map", help="class -> viseme table")


def build_parser():
    parser = _Parser(prog="lipvsr", description=__doc__.split("\n\n")[0])
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        _add_globals(p, suppress=True)
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "render a synthetic corpus")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--speakers", type=_positive_int, default=4)
    p.add_argument("--phrases", type=_phrase_count, default=10)
    p.add_argument("--reps", type=_positive_int, default=3)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--views", default="0", help="comma-separated view angles")
    p.add_argument("--test-speakers", dest="test_speakers", type=int, default=None,
                   help="held-out speakers, taken from the end (default a quarter)")

    for name, func, text in (
            ("learn-filters", cmd_learn_filters, "learn both PCA filter banks per view"),
            ("extract", cmd_extract, "compute histogram features (learns banks if absent)"),
            ("train-lstm", cmd_train_lstm, "train the frame-level LSTM per view"),
            ("posteriors", cmd_posteriors, "write LSTM posteriors for every utterance"),
            ("tandem", cmd_tandem, "build single-view tandem observations")):
        p = add(name, func, text)
        _add_paths(p)
        p.add_argument("--view", type=int, help="one view (default: all in [tandem] views)")

    p = add("fuse", cmd_fuse, "concatenate several views into fused tandem observations")
    _add_paths(p)
    p.add_argument("--views", help="views to fuse, e.g. 0,30 (default [tandem] views)")

    for name, func, text, extra in (
            ("train-hmm", cmd_train_hmm, "train whole-word GMM-HMMs", False),
            ("decode", cmd_decode, "Viterbi-decode a split", True),
            ("score", cmd_score, "score decoded transcripts and frame accuracy", True)):
        p = add(name, func, text)
        _add_paths(p, grammar=name != "score", vmap=name == "score")
        p.add_argument("--views", help="view combination (default [tandem] views)")
        if extra:
            p.add_argument("--split", choices=("train", "test"), default="test")
    return parser


def _apply_threads(n):
    if n is None:
        raw = os.environ.get(THREAD_ENV)
        if raw:
            try:
                n = _positive_int(raw)
            except (ValueError, argparse.ArgumentTypeError):
                raise StageError("usage", f"{THREAD_ENV}={raw!r} is not a positive integer")\
                    from None
    n = n or 1
    for var in _BLAS_ENV:
        os.environ[var] = str(n)
    return n


def run(argv=None):
    """Parse ``argv`` and run one stage; raises :class:`StageError` on failure."""
    args = build_parser().parse_args(argv)
    _apply_threads(args.threads)
    if args.out is None:
        args.out = "work" if args.command != "synth" else "corpus"
    from .config import ConfigError, PipelineConfig
    try:
        cfg = PipelineConfig.load(args.config, args.set)
    except ConfigError as exc:
        raise StageError("config", str(exc)) from None
    except OSError as exc:
        raise StageError("io", f"cannot read config: {exc}") from None

    from filelock import FileLock, Timeout

    from .dataio import FormatError
    from .gmmhmm import NoPathError
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        with FileLock(str(out / ".lipvsr.lock"), timeout=0):
            args.func(args, cfg)
    except Timeout:
        raise StageError("locked", f"another lipvsr stage holds {out}") from None
    except FormatError as exc:
        raise StageError("format", str(exc)) from None
    except NoPathError as exc:
        raise StageError("data", str(exc)) from None
    except OSError as exc:
        raise StageError("io", str(exc)) from None
    except ValueError as exc:
        raise StageError("data", str(exc)) from None


def main(argv=None):
    try:
        run(argv)
    except StageError as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {exc.category}: {msg}", file=sys.stderr)
        return 2 if exc.category == "usage" else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
