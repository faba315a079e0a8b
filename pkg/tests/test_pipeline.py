import json
import shutil

import numpy as np
import pytest
from scipy.stats import kurtosis

from ivector_nda import cli, io
from ivector_nda.compare import compare_projections, split_by_speaker
from ivector_nda.discriminant import NdaConfig, fit_lda
from ivector_nda.pipeline import (
    STAGES,
    PipelineConfig,
    PipelineError,
    build_config,
    format_config,
    load_config,
    parse_config_text,
    read_manifest,
    run_pipeline,
)
from ivector_nda.synth import SynthSpec, gen_synthetic, make_audio_corpus

# recorded at first implementation on the bundled corpus (seed 0, defaults)
SMOKE_EER = 0.1203125


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    make_audio_corpus(root / "data")
    return root


def _config(root, work="work", **extra):
    values = {"paths.data_dir": str(root / "data"), "paths.work_dir": str(root / work)}
    values.update(extra)
    return build_config(values)


@pytest.fixture(scope="module")
def reference_run(corpus):
    cfg = _config(corpus, "ref")
    results = run_pipeline(cfg)
    return cfg, results


class TestConfig:
    def test_defaults_roundtrip(self, tmp_path):
        cfg = PipelineConfig()
        (tmp_path / "c.txt").write_text(format_config(cfg))
        assert load_config(tmp_path / "c.txt") == cfg

    def test_parse_types_and_comments(self):
        values = parse_config_text("# header\nubm.components = 64  # G\nprojection.one_vs_rest = false\n")
        cfg = build_config(values)
        assert cfg.ubm.components == 64 and cfg.projection.one_vs_rest is False
        assert build_config({"ubm.subsample": "none"}).ubm.subsample is None

    @pytest.mark.parametrize(
        "values, match",
        [
            ({"ubm.components": "48"}, "power of two"),
            ({"projection.dim": "30"}, "tv.rank"),
            ({"split.train_fraction": "1.0"}, "train_fraction"),
            ({"projection.metric": "l1"}, "metric"),
            ({"nope.key": "1"}, "unknown config key"),
            ({"tv.rank": "ten"}, "cannot parse"),
        ],
    )
    def test_invalid(self, values, match):
        with pytest.raises(ValueError, match=match):
            build_config(values)

    def test_duplicate_key(self):
        with pytest.raises(ValueError, match="duplicate"):
            parse_config_text("tv.rank = 2\ntv.rank = 3\n")


class TestSmoke:
    def test_full_run(self, reference_run):
        cfg, results = reference_run
        assert results["eer"] == pytest.approx(SMOKE_EER, abs=1e-12)
        assert results["n_target"] == 140 and results["n_nontarget"] == 640
        manifest = read_manifest(cfg.work)
        assert list(manifest) == list(STAGES)
        assert manifest["ubm"]["seed"] == 0
        for stage, entry in manifest.items():
            assert entry["outputs"], stage

    def test_rerun_and_workers_byte_identical(self, corpus, reference_run):
        ref_cfg, _ = reference_run
        cfg = _config(corpus, "jobs4", **{"run.n_jobs": "4"})
        run_pipeline(cfg)
        a, b = read_manifest(ref_cfg.work), read_manifest(cfg.work)
        assert a == b
        for rel in a["evaluate"]["outputs"]:
            assert (ref_cfg.work / rel).read_bytes() == (cfg.work / rel).read_bytes()

    def test_stage_rerun_rewrites_manifest_line(self, corpus, reference_run):
        ref_cfg, _ = reference_run
        work = corpus / "rerun"
        shutil.copytree(ref_cfg.work, work)
        cfg = _config(corpus, "rerun")
        before = (work / "manifest.jsonl").read_text()
        run_pipeline(cfg, ["plda"])
        assert (work / "manifest.jsonl").read_text() == before

    def test_lda_branch(self, corpus, reference_run):
        ref_cfg, _ = reference_run
        work = corpus / "lda"
        shutil.copytree(ref_cfg.work, work)
        cfg = _config(corpus, "lda", **{"projection.method": "lda"})
        results = run_pipeline(cfg, ["projection", "whiten", "plda", "score", "evaluate"])
        assert 0 <= results["eer"] <= 1
        assert json.loads((work / "projection.json").read_text())["method"] == "lda"

    def test_trial_file(self, corpus, reference_run):
        ref_cfg, _ = reference_run
        work = corpus / "trials"
        shutil.copytree(ref_cfg.work, work)
        io.write_trials(corpus / "t.txt", [("spk0005-s00", "spk0005-s01", True), ("spk0005-s00", "spk0006-s00", False)])
        cfg = _config(corpus, "trials", **{"paths.trials": str(corpus / "t.txt")})
        results = run_pipeline(cfg, ["score", "evaluate"])
        assert (results["n_target"], results["n_nontarget"]) == (1, 1)


class TestFailures:
    def test_missing_upstream_names_stage(self, corpus):
        with pytest.raises(PipelineError, match=r"stage 'tv'.*ubm\.json.*'ubm'"):
            run_pipeline(_config(corpus, "empty"), ["tv"])

    def test_corrupt_fmat_before_compute(self, corpus, reference_run):
        ref_cfg, _ = reference_run
        work = corpus / "corrupt"
        shutil.copytree(ref_cfg.work, work)
        (work / "ubm.json").unlink()
        victim = work / "features" / "spk0000-s03.fmat"  # a training utterance
        raw = bytearray(victim.read_bytes())
        raw[:4] = b"JUNK"
        victim.write_bytes(bytes(raw))
        with pytest.raises(PipelineError, match="bad FMAT magic"):
            run_pipeline(_config(corpus, "corrupt"), ["ubm"])
        assert not (work / "ubm.json").exists()

    def test_out_of_order_stages(self, corpus):
        with pytest.raises(PipelineError, match="dependency order"):
            run_pipeline(_config(corpus), ["tv", "ubm"])


def test_external_posteriors(corpus, reference_run):
    ref_cfg, _ = reference_run
    work = corpus / "ext"
    post_dir = corpus / "posteriors"
    post_dir.mkdir()
    for p in sorted((ref_cfg.work / "features").iterdir()):
        T = io.read_fmat(p).shape[0]
        io.write_fmat(post_dir / p.name, np.eye(4)[np.arange(T) % 4])
    shutil.copytree(ref_cfg.work / "features", work / "features")
    cfg = _config(
        corpus, "ext", **{"paths.posteriors_dir": str(post_dir), "ubm.components": "4", "tv.rank": "8"}
    )
    results = run_pipeline(cfg, STAGES[1:])
    assert 0 <= results["eer"] <= 1


class TestSynthetic:
    def test_count_and_determinism(self):
        spec = SynthSpec(num_speakers=50, sessions_per_speaker=20, dim=10)
        a, b = gen_synthetic(spec), gen_synthetic(spec)
        assert a.X.shape == (1000, 10)
        assert a.X.tobytes() == b.X.tobytes()
        assert len(a.classes) == 50

    def test_single_mode_is_gaussian(self):
        spec = SynthSpec(num_speakers=200, sessions_per_speaker=20, dim=10, channel_modes=1)
        data, modes = gen_synthetic(spec, return_modes=True)
        assert np.all(modes == 0)
        resid = data.X - np.repeat(data.X.reshape(200, 20, 10).mean(axis=1), 20, axis=0)
        assert np.all(np.abs(kurtosis(resid, axis=0)) < 0.3)

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            SynthSpec(channel_spread=0.0)


def test_identical_projections_identical_metrics():
    data = gen_synthetic(SynthSpec(num_speakers=30, sessions_per_speaker=6, dim=8))
    train, test = split_by_speaker(data)
    proj = fit_lda(train, 4)
    report = compare_projections(train, test, 4, NdaConfig(K=3), projections={"LDA": proj, "NDA": proj})
    assert report["rows"]["LDA"] == report["rows"]["NDA"]
    assert report["relative_improvement"] == {"eer": 0.0, "min_dcf08": 0.0, "min_dcf10": 0.0}


class TestCli:
    def test_stage_commands(self, corpus, reference_run, capsys):
        ref_cfg, results = reference_run
        work = corpus / "cli"
        shutil.copytree(ref_cfg.work, work)
        flags = ["--paths.data_dir", str(corpus / "data"), "--paths.work_dir", str(work)]
        for cmd in ("train-projection", "whiten", "train-plda", "score", "evaluate"):
            assert cli.main([cmd, *flags]) == 0
        out = capsys.readouterr().out.strip().splitlines()
        assert json.loads(out[-1])["eer"] == results["eer"]

    def test_config_file_and_override(self, tmp_path, capsys):
        (tmp_path / "c.txt").write_text("tv.rank = 30\nprojection.dim = 12\n")
        assert cli.main(["config", "--config", str(tmp_path / "c.txt"), "--projection.dim", "7"]) == 0
        out = capsys.readouterr().out
        assert "tv.rank = 30\n" in out and "projection.dim = 7\n" in out

    def test_error_is_one_line(self, tmp_path, capsys):
        assert cli.main(["whiten", "--paths.work_dir", str(tmp_path)]) == 1
        err = capsys.readouterr().err
        assert err.count("\n") == 1 and err.startswith("error: PipelineError: stage 'whiten'")

    def test_usage_error(self, capsys):
        with pytest.raises(SystemExit) as e:
            cli.main(["train-projection", "--method", "pca"])
        assert e.value.code == 2

    def test_synth_and_compare(self, tmp_path, capsys):
        assert cli.main(["synth", "ivectors", "--out", str(tmp_path), "--num-speakers", "20",
                         "--sessions-per-speaker", "5", "--dim", "6"]) == 0
        assert io.read_ivectors(tmp_path / "ivectors.fmat")[1].shape == (100, 6)
        assert cli.main(["compare", "--ivectors", str(tmp_path / "ivectors.fmat"), "--utt2spk",
                         str(tmp_path / "utt2spk"), "--projection.dim", "3", "--projection.K", "2",
                         "--json", str(tmp_path / "r.json")]) == 0
        assert "NDA rel. gain" in capsys.readouterr().out
        assert set(json.loads((tmp_path / "r.json").read_text())["rows"]) == {"LDA", "NDA"}
