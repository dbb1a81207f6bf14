import json

import numpy as np
import pytest

from adaptive_sv.cli import main
from adaptive_sv.embedding_model import BlockSpec, ModelConfig, count_params
from adaptive_sv.features import AudioSignal, write_wav
from adaptive_sv.formats import (
    EmbeddingStore,
    format_labels,
    parse_labels,
    read_arrays,
    read_embeddings,
    write_embeddings,
    write_kv,
)
from adaptive_sv.synthetic import separable_clusters, write_cohort


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    return write_cohort(tmp_path_factory.mktemp("cohort"))


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


class TestExitCodes:
    def test_usage_error(self, capsys):
        code, _, err = run(capsys, "nope")
        assert code == 1 and "invalid choice" in err

    def test_missing_argument(self, capsys):
        assert run(capsys, "score", "--trials", "t")[0] == 1

    def test_bad_far_target(self, capsys, cohort, tmp_path):
        t, e, m = cohort
        assert run(capsys, "--output-dir", tmp_path, "calibrate", "--trials", t, "--embeddings", e, "--far-target", "2")[0] == 1

    def test_data_error(self, capsys, tmp_path):
        code, _, err = run(capsys, "--output-dir", tmp_path, "score", "--trials", tmp_path / "x", "--embeddings", tmp_path / "y")
        assert code == 2 and "cannot read" in err

    def test_format_error(self, capsys, tmp_path, cohort):
        (tmp_path / "bad.emb1").write_bytes(b"NOPE" + bytes(16))
        code, _, err = run(capsys, "--output-dir", tmp_path, "score", "--trials", cohort[0], "--embeddings", tmp_path / "bad.emb1")
        assert code == 2 and "bad magic at offset 0" in err

    def test_selftest(self, capsys):
        code, out, _ = run(capsys, "selftest")
        assert code == 0
        assert out.count("PASS") == 7 and "FAIL" not in out


class TestPipeline:
    def test_run_writes_report(self, capsys, cohort, tmp_path):
        t, e, m = cohort
        code, out, _ = run(capsys, "--output-dir", tmp_path, "run", "--trials", t, "--embeddings", e, "--metadata", m, "--dimension", "group")
        assert code == 0
        report = json.loads((tmp_path / "report.json").read_text())
        assert sorted(report["scores"]) == ["group:A", "group:B"]
        first = (tmp_path / "report.json").read_bytes()
        run(capsys, "--output-dir", tmp_path, "run", "--trials", t, "--embeddings", e, "--metadata", m, "--dimension", "group")
        assert (tmp_path / "report.json").read_bytes() == first

    def test_calibrate(self, capsys, cohort, tmp_path):
        t, e, m = cohort
        code, out, _ = run(
            capsys, "--output-dir", tmp_path, "calibrate", "--trials", t, "--embeddings", e, "--metadata", m,
            "--dimension", "group", "--far-target", "0.01", "--far-target", "0.05",
        )
        assert code == 0
        table = json.loads((tmp_path / "thresholds_far0.01.json").read_text())
        assert table["single_threshold"] == max(g["threshold"] for g in table["groups"])
        assert (tmp_path / "thresholds_far0.05.json").exists()

    def test_sweep_and_score(self, capsys, cohort, tmp_path):
        t, e, m = cohort
        assert run(capsys, "--output-dir", tmp_path, "sweep", "--trials", t, "--embeddings", e)[0] == 0
        assert (tmp_path / "det_all_all.csv").read_text().startswith("threshold,far,frr\n")
        assert (tmp_path / "det.svg").exists()
        code, out, _ = run(capsys, "--output-dir", tmp_path, "score", "--trials", t, "--embeddings", e)
        assert code == 0 and "EER" in out
        lines = (tmp_path / "scores.txt").read_text().splitlines()
        assert len(lines) == len(t.read_text().splitlines())

    def test_unknown_speaker_skip(self, capsys, cohort, tmp_path):
        t, e, _ = cohort
        meta = tmp_path / "m.csv"
        meta.write_text("speaker_id,gender\na000,male\na001,male\n")
        args = ("--output-dir", tmp_path, "run", "--trials", t, "--embeddings", e, "--metadata", meta)
        assert run(capsys, *args)[0] == 2
        assert run(capsys, *args, "--on-unknown", "skip")[0] == 0


SMALL = ModelConfig(
    basewidth=8,
    scale=2,
    stem_channels=8,
    blocks=(BlockSpec(64, 32, 1, 1), BlockSpec(64, 32, 1, 2)),
    embedding_dim=8,
    n_classes=4,
    asp_hidden=8,
)


class TestModelCommands:
    @pytest.fixture
    def config_file(self, tmp_path):
        path = tmp_path / "model.cfg"
        path.write_text(write_kv(SMALL.to_dict()))
        return path

    def test_param_count_default(self, capsys):
        code, out, _ = run(capsys, "param-count")
        assert code == 0 and "6,842,977" in out

    def test_param_count_config(self, capsys, config_file):
        code, out, _ = run(capsys, "--config", config_file, "param-count")
        assert code == 0 and f"{count_params(SMALL):,}" in out

    def test_bad_config_key(self, capsys, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("widht = 3\n")
        assert run(capsys, "--config", path, "param-count")[0] == 1

    def test_featurize_embed(self, capsys, config_file, tmp_path):
        rng = np.random.default_rng(0)
        wavs = []
        for name in ("u1", "u2"):
            path = tmp_path / f"{name}.wav"
            write_wav(path, AudioSignal(0.1 * rng.standard_normal(4000), 16000))
            wavs.append(path)
        out = tmp_path / "out"
        assert run(capsys, "--output-dir", out, "--config", config_file, "featurize", *wavs)[0] == 0
        feats = read_arrays((out / "features.arr").read_bytes())
        assert list(feats) == ["u1", "u2"] and feats["u1"].shape == (23, 80)
        assert run(capsys, "--output-dir", out, "--config", config_file, "--seed", "4", "embed", "--features", out / "features.arr")[0] == 0
        a = read_embeddings((out / "embeddings.emb1").read_bytes())
        assert list(a) == ["u1", "u2"] and a.dim == 8
        assert run(capsys, "--output-dir", out, "--config", config_file, "--seed", "4", "embed", *wavs)[0] == 0
        b = read_embeddings((out / "embeddings.emb1").read_bytes())
        # features stored as float32 in the container, so agreement is to float32 precision
        np.testing.assert_allclose(a.matrix(), b.matrix(), rtol=1e-3, atol=1e-4)

    def test_short_audio(self, capsys, tmp_path):
        write_wav(tmp_path / "s.wav", AudioSignal(np.zeros(100), 16000))
        code, _, err = run(capsys, "--output-dir", tmp_path, "featurize", tmp_path / "s.wav")
        assert code == 2 and "too short" in err


class TestDetectorCommands:
    def test_train_and_detect(self, capsys, tmp_path):
        train, u = separable_clusters(400, dim=16, seed=0)
        test, _ = separable_clusters(200, dim=16, seed=1, direction=u)
        for name, data in (("train", train), ("test", test)):
            store = EmbeddingStore(dict(zip(data.ids, data.embeddings)))
            (tmp_path / f"{name}.emb1").write_bytes(write_embeddings(store))
            labels = {i: data.class_names[y] for i, y in zip(data.ids, data.labels)}
            (tmp_path / f"{name}.csv").write_text(format_labels(labels))
        code, out, _ = run(
            capsys, "--output-dir", tmp_path, "train-detector", "--embeddings", tmp_path / "train.emb1",
            "--labels", tmp_path / "train.csv", "--test-embeddings", tmp_path / "test.emb1", "--test-labels",
            tmp_path / "test.csv", "--hidden", "8", "8", "--epochs", "10", "--classes", "male", "female",
        )
        assert code == 0
        acc = float(out.split("test accuracy")[1].split()[0])
        assert acc >= 0.99
        code, _, _ = run(capsys, "--output-dir", tmp_path, "detect", "--embeddings", tmp_path / "test.emb1", "--detector", tmp_path / "detector")
        assert code == 0
        detected = parse_labels((tmp_path / "detected.csv").read_text())
        truth = parse_labels((tmp_path / "test.csv").read_text())
        assert np.mean([detected[k] == truth[k] for k in truth]) >= 0.99

    def test_deterministic_training(self, capsys, tmp_path):
        data, _ = separable_clusters(100, dim=8, seed=0)
        (tmp_path / "e.emb1").write_bytes(write_embeddings(EmbeddingStore(dict(zip(data.ids, data.embeddings)))))
        (tmp_path / "l.csv").write_text(format_labels({i: data.class_names[y] for i, y in zip(data.ids, data.labels)}))
        blobs = []
        for _ in range(2):
            run(capsys, "--seed", "5", "--output-dir", tmp_path, "train-detector", "--embeddings", tmp_path / "e.emb1",
                "--labels", tmp_path / "l.csv", "--hidden", "4", "4", "--epochs", "3")
            blobs.append((tmp_path / "detector.arr").read_bytes())
        assert blobs[0] == blobs[1]
