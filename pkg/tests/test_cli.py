import hashlib

import numpy as np
import pytest
from filelock import FileLock

from lipvsr import cli, dataio
from lipvsr.config import ConfigError, PipelineConfig

CONFIG = """\
[lstm]
iterations = 40
hidden = 16
[hmm]
max_mixtures = 2
[tandem]
views = 0, 30
[paths]
corpus = corpus
"""

CHAIN = ["learn-filters", "extract", "train-lstm", "posteriors", "tandem", "fuse",
         "train-hmm", "decode", "score"]


def _tree_hash(root):
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def _run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def _setup(root):
    root.mkdir(parents=True, exist_ok=True)
    assert cli.main(["synth", "--seed", "3", "--speakers", "2", "--phrases", "3", "--reps", "2",
                     "--views", "0,30", "--out", str(root / "corpus")]) == 0
    (root / "c.ini").write_text(CONFIG)
    return root / "c.ini"


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = _setup(root)
    for stage in CHAIN:
        assert cli.main(["--config", str(cfg), "--out", str(root / "work"), stage]) == 0
    return root, cfg


# ---------------------------------------------------------------- config

def test_config_defaults_pin_published_settings():
    cfg = PipelineConfig.load()
    tc = cfg.train_config(cfg.scaling(60, 90))
    assert (tc.learning_rate, tc.weight_decay, tc.momentum, tc.max_iterations) == \
        (0.5, 0.001, 0.8, 10000)
    assert tc.scaling == pytest.approx(16 / 1350)
    assert cfg.pcanet_config().feature_dim() == 32768
    assert cfg.hmm_params()["schedule"] == [1, 2, 4, 8, 15]
    assert cfg.tandem_params() == (1e-8, 2)


def test_config_rejects_unknown_key(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[lstm]\nlearning_rate = 0.1\n")
    with pytest.raises(ConfigError, match="unknown key 'learning_rate'"):
        PipelineConfig.load(p)
    p.write_text("[decoder]\nbeam = 3\n")
    with pytest.raises(ConfigError, match="unknown section"):
        PipelineConfig.load(p)


def test_config_rejects_bad_values():
    with pytest.raises(ConfigError):
        PipelineConfig.load(overrides=["hmm.max_mixtures=16"])
    with pytest.raises(ConfigError):
        PipelineConfig.load(overrides=["hmm.schedule=1,4,2"])
    with pytest.raises(ConfigError):
        PipelineConfig.load(overrides=["tandem.views=0,15"])


def test_config_normalize_flag():
    assert PipelineConfig.load().pcanet_config().normalize is False
    on = PipelineConfig.load(overrides=["pcanet.normalize=yes"])
    assert on.pcanet_config().normalize is True
    assert on.hash("pcanet") != PipelineConfig.load().hash("pcanet")
    with pytest.raises(ConfigError, match="boolean"):
        PipelineConfig.load(overrides=["pcanet.normalize=maybe"])


def test_normalized_extraction_differs(pipeline, tmp_path, capsys):
    root, cfg = pipeline
    work = tmp_path / "w"
    code, _, _ = _run(capsys, "--config", cfg, "--out", work, "--set", "pcanet.normalize=true",
                      "extract", "--view", 0)
    assert code == 0
    a = dataio.read_features(work / "view-0" / "features" / "s01_p01_r1.feat")
    b = dataio.read_features(root / "work" / "view-0" / "features" / "s01_p01_r1.feat")
    assert a.shape == b.shape and not np.array_equal(a, b)


def test_config_hash_scoping():
    base = PipelineConfig.load()
    moved = PipelineConfig.load(overrides=["paths.corpus=/elsewhere"])
    decoder = PipelineConfig.load(overrides=["hmm.max_mixtures=4"])
    assert all(base.hash(s) == moved.hash(s) for s in ("pcanet", "lstm", "tandem", "hmm"))
    assert base.hash("lstm") == decoder.hash("lstm")
    assert base.hash("hmm") != decoder.hash("hmm")


def test_resolved_config_roundtrip(tmp_path):
    cfg = PipelineConfig.load(overrides=["lstm.hidden=32"])
    cfg.write(tmp_path / "r.ini")
    again = PipelineConfig.load(tmp_path / "r.ini")
    assert again.values == cfg.values


# ---------------------------------------------------------------- synth

def test_synth_reproducible(tmp_path, capsys):
    for name in ("a", "b"):
        code, out, _ = _run(capsys, "synth", "--seed", 7, "--speakers", 4, "--phrases", 2,
                            "--reps", 1, "--out", tmp_path / name)
        assert code == 0 and "4 speakers" in out
    assert _tree_hash(tmp_path / "a") == _tree_hash(tmp_path / "b")
    assert (tmp_path / "a" / "visemes.tsv").exists()


def test_synth_phrase_cap(tmp_path, capsys):
    code, _, err = _run(capsys, "synth", "--phrases", 11, "--out", tmp_path)
    assert code == 2
    assert err.count("\n") == 1 and err.startswith("error: usage:")


# ---------------------------------------------------------------- stage errors

def test_decode_before_train_hmm(tmp_path, capsys):
    cfg = _setup(tmp_path)
    code, _, err = _run(capsys, "--config", cfg, "--out", tmp_path / "w", "decode")
    assert code == 1
    assert err.strip() == "error: missing-artifact: missing model set; run train-hmm"


def test_train_lstm_before_extract(tmp_path, capsys):
    cfg = _setup(tmp_path)
    code, _, err = _run(capsys, "--config", cfg, "--out", tmp_path / "w", "train-lstm")
    assert code == 1 and "run extract" in err


def test_unknown_config_key_cli(tmp_path, capsys):
    (tmp_path / "c.ini").write_text("[pcanet]\nstride = 3\n")
    code, _, err = _run(capsys, "--config", tmp_path / "c.ini", "extract")
    assert code == 1 and err.startswith("error: config:") and "stride" in err


def test_bad_thread_env(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv(cli.THREAD_ENV, "many")
    code, _, err = _run(capsys, "--out", tmp_path, "learn-filters")
    assert code == 2 and cli.THREAD_ENV in err


def test_threads_flag_sets_blas_env(monkeypatch):
    monkeypatch.setenv(cli.THREAD_ENV, "3")
    assert cli._apply_threads(None) == 3
    assert cli._apply_threads(2) == 2


def test_locked_output_dir(tmp_path, capsys):
    cfg = _setup(tmp_path)
    work = tmp_path / "w"
    work.mkdir()
    with FileLock(str(work / ".lipvsr.lock")):
        code, _, err = _run(capsys, "--config", cfg, "--out", work, "learn-filters")
    assert code == 1 and err.startswith("error: locked:")


def test_global_flags_after_subcommand(tmp_path, capsys):
    cfg = _setup(tmp_path)
    code, out, _ = _run(capsys, "learn-filters", "--config", cfg, "--out", tmp_path / "w",
                        "--view", 30)
    assert code == 0 and "view 30" in out
    assert not (tmp_path / "w" / "view-0").exists()


# ---------------------------------------------------------------- full chain

def test_chain_outputs(pipeline):
    root, _ = pipeline
    work = root / "work"
    d = work / "tandem-0+30"
    report = (d / "report-test.csv").read_text().splitlines()
    assert report[0] == "speaker,view,SC,WC,WA"
    hyps = (d / "hyp-test.txt").read_text().splitlines()
    assert len(hyps) == 6 and all("\t" in h for h in hyps)
    assert (d / "hmm_report.csv").read_text().startswith("pass,loglik,components\n")
    loss = (work / "view-0" / "lstm_loss.csv").read_text().splitlines()
    assert loss[0] == "iteration,loss" and len(loss) == 41
    frames = (d / "frames-test.csv").read_text().splitlines()
    assert frames[0] == "view,phoneme,viseme" and len(frames) == 3
    for line in frames[1:]:
        _, phon, vis = line.split(",")
        assert float(vis) >= float(phon)
    for stage_dir in (work / "view-0", work / "view-0" / "features", d):
        assert (stage_dir / "config.ini").exists()


def test_chain_is_deterministic(pipeline, tmp_path):
    root, cfg = pipeline
    for stage in CHAIN:
        assert cli.main(["--config", str(cfg), "--out", str(tmp_path / "again"), stage]) == 0
    for name in ("report-test.csv", "hyp-test.txt", "hmm.model"):
        a = (root / "work" / "tandem-0+30" / name).read_bytes()
        b = (tmp_path / "again" / "tandem-0+30" / name).read_bytes()
        assert a == b


def test_fused_dimension(pipeline):
    root, _ = pipeline
    fdir = root / "work" / "tandem-0+30" / "features"
    meta = dataio.read_meta(fdir / cli.META)
    assert meta["dim"] == "168" and meta["views"] == "0+30"
    single = dataio.read_meta(root / "work" / "tandem-0" / "features" / cli.META)
    assert single["dim"] == "84"


def test_single_view_fuse_equals_tandem(pipeline, capsys):
    root, cfg = pipeline
    work = root / "work"
    before = _tree_hash(work / "tandem-30" / "features")
    code, _, _ = _run(capsys, "--config", cfg, "--out", work, "fuse", "--views", "30")
    assert code == 0
    assert _tree_hash(work / "tandem-30" / "features") == before


def test_extract_reuses_bank(pipeline, capsys):
    root, cfg = pipeline
    work = root / "work"
    feats = work / "view-0" / "features"
    before = _tree_hash(feats)
    bank = (work / "view-0" / "bank1.bank").stat().st_mtime_ns
    code, out, _ = _run(capsys, "--config", cfg, "--out", work, "extract", "--view", 0)
    assert code == 0 and "reusing cached filter banks" in out
    assert _tree_hash(feats) == before
    assert (work / "view-0" / "bank1.bank").stat().st_mtime_ns == bank


def test_config_hash_gating(pipeline, capsys):
    root, cfg = pipeline
    work = root / "work"
    code, _, err = _run(capsys, "--config", cfg, "--out", work, "--set", "lstm.hidden=8",
                        "posteriors", "--view", 0)
    assert code == 1
    assert err.startswith("error: config-mismatch:") and "train-lstm" in err
    # decoder-only changes leave upstream artifacts valid
    code, _, err = _run(capsys, "--config", cfg, "--out", root / "work", "--set",
                        "hmm.max_mixtures=1", "decode")
    assert code == 1 and "run train-hmm" in err


def test_force_overrides_gating(pipeline, tmp_path, capsys):
    root, cfg = pipeline
    import shutil
    work = tmp_path / "w"
    shutil.copytree(root / "work" / "view-0", work / "view-0")
    code, _, _ = _run(capsys, "--config", cfg, "--out", work, "--set", "lstm.seed=5",
                      "--force", "posteriors", "--view", 0)
    assert code == 0


def test_fuse_frame_mismatch_names_utterance(pipeline, tmp_path, capsys):
    root, cfg = pipeline
    import shutil
    work = tmp_path / "w"
    for v in (0, 30):
        shutil.copytree(root / "work" / f"view-{v}", work / f"view-{v}")
    post = work / "view-30" / "posteriors" / "s01_p02_r1.feat"
    dataio.write_features(post, dataio.read_features(post)[:-1])
    code, _, err = _run(capsys, "--config", cfg, "--out", work, "fuse")
    assert code == 1 and "s01_p02_r1" in err and err.count("\n") == 1


def test_fuse_missing_view_utterance(pipeline, tmp_path, capsys):
    root, cfg = pipeline
    text = (root / "corpus" / "test.tsv").read_text().splitlines()
    kept = [ln for ln in text if not (ln.startswith("s02_p01_r1\t") and "\t30\t" in ln)]
    (root / "corpus" / "trimmed.tsv").write_text("\n".join(kept) + "\n")
    code, _, err = _run(capsys, "--config", cfg, "--out", root / "work", "fuse",
                        "--test", root / "corpus" / "trimmed.tsv")
    assert code == 1 and "s02_p01_r1 missing from view 30" in err


def test_posteriors_are_distributions(pipeline):
    root, _ = pipeline
    p = dataio.read_features(root / "work" / "view-0" / "posteriors" / "s01_p01_r1.feat")
    assert p.shape[1] == 28
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-5)
