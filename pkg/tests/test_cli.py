import json

import numpy as np
import pytest

from pseaec.cli import main
from pseaec.dsp import read_wav, write_wav
from pseaec.embedding import embedding_for
from pseaec.models import forward_full, load_model
from pseaec.scene import read_manifest


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def error_of(err):
    lines = [l for l in err.splitlines() if l.startswith("{")]
    assert len(lines) == 1
    return json.loads(lines[0])


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--scenario", "train", "--count", "4", "--duration", "1.5", "--seed", "2",
                 "--out-dir", str(d)]) == 0
    for kind in ("ts1", "ts2-echo"):
        assert main(["gen-data", "--scenario", kind, "--count", "1", "--duration", "1.5",
                     "--out-dir", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, data):
    r = tmp_path_factory.mktemp("run")
    assert main(["train", "--tiny", "--pool", str(data / "train.jsonl"), "--steps", "3", "--batch-size", "1",
                 "--out-dir", str(r)]) == 0
    return r


def test_gen_data_ts3(tmp_path, capsys):
    code, out, _ = run(capsys, "gen-data", "--scenario", "ts3", "--count", 4, "--duration", 1,
                       "--out-dir", tmp_path)
    assert code == 0
    samples = read_manifest(out.strip())
    assert len(samples) == 4
    for s in samples:
        assert not (s.spec.has_echo or s.spec.has_noise or s.spec.has_interferer)
    assert json.loads((tmp_path / "config.json").read_text())["scene"]["duration"] == 1


def test_gen_data_repeatable(tmp_path, capsys):
    for sub in ("a", "b"):
        run(capsys, "gen-data", "--scenario", "ts1-echo", "--count", 2, "--duration", 1, "--seed", 4,
            "--out-dir", tmp_path / sub)
    assert (tmp_path / "a" / "ts1-echo.jsonl").read_text() == (tmp_path / "b" / "ts1-echo.jsonl").read_text()
    for f in (tmp_path / "a" / "audio").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / "audio" / f.name).read_bytes()


def test_count_zero_is_usage_error(tmp_path, capsys):
    code, _, err = run(capsys, "gen-data", "--scenario", "ts1", "--count", 0, "--out-dir", tmp_path)
    assert code == 2
    assert error_of(err)["error"] == "usage"


def test_unknown_subcommand(capsys):
    code, _, err = run(capsys, "frobnicate")
    assert code == 2 and error_of(err)["error"] == "usage"


def test_train_writes_run_directory(run_dir):
    assert {p.name for p in run_dir.iterdir()} >= {"config.json", "checkpoints", "logs", "reports"}
    rows = [json.loads(l) for l in (run_dir / "logs" / "loss.jsonl").read_text().splitlines()]
    assert [r["task"] for r in rows] == ["AEC", "PSE", "PSE_AEC"]
    cfg = json.loads((run_dir / "config.json").read_text())
    assert cfg["model"]["F_mic"] == 64 and cfg["train"]["steps"] == 3


def test_train_missing_manifest_names_task(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--tiny", "--steps", 1, "--out-dir", tmp_path)
    assert code == 1
    e = error_of(err)
    assert e["error"] == "missing-manifest" and "AEC" in e["message"]


def test_train_naive_has_no_align(tmp_path, data, capsys):
    code, _, _ = run(capsys, "train", "--tiny", "--variant", "e3net", "--ablation", "naive", "--pool",
                     data / "train.jsonl", "--steps", 2, "--batch-size", 1, "--out-dir", tmp_path)
    assert code == 0
    model, _, _ = load_model(tmp_path / "checkpoints" / "latest.ckpt")
    assert not hasattr(model, "align")


def test_train_resume_matches_unbroken(tmp_path, data, capsys):
    common = ["train", "--tiny", "--pool", data / "train.jsonl", "--batch-size", 1, "--seed", 3]
    run(capsys, *common, "--steps", 4, "--out-dir", tmp_path / "u")
    run(capsys, *common, "--steps", 2, "--checkpoint-every", 1, "--out-dir", tmp_path / "r")
    code, _, _ = run(capsys, *common, "--steps", 4, "--resume", "--out-dir", tmp_path / "r")
    assert code == 0
    assert (tmp_path / "u" / "logs" / "loss.jsonl").read_text() == \
        (tmp_path / "r" / "logs" / "loss.jsonl").read_text()


def test_config_file_with_flag_override(tmp_path, data, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 9, "train": {"steps": 5, "batch_size": 1},
                               "paths": {"pool": str(data / "train.jsonl")}}))
    code, _, _ = run(capsys, "train", "--config", cfg, "--tiny", "--steps", 2, "--out-dir", tmp_path / "r")
    assert code == 0
    resolved = json.loads((tmp_path / "r" / "config.json").read_text())
    assert resolved["seed"] == 9 and resolved["train"]["steps"] == 2


def test_bad_config_file(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text("{not json")
    code, _, err = run(capsys, "inspect", "--config", cfg)
    assert code == 1 and error_of(err)["error"] == "config"


def test_eval_reports(tmp_path, data, run_dir, capsys):
    ckpt = run_dir / "checkpoints" / "latest.ckpt"
    code, out, _ = run(capsys, "eval", "--checkpoint", ckpt, "--manifest", data / "ts2-echo.jsonl",
                       "--manifest", data / "ts1.jsonl", "--out-dir", tmp_path)
    assert code == 0
    echo = json.loads((tmp_path / "reports" / "ts2-echo_full.json").read_text())
    plain = json.loads((tmp_path / "reports" / "ts1_full.json").read_text())
    assert echo["aggregate"]["erle_db"] is not None
    assert plain["aggregate"]["erle_db"] is None
    assert "ts2-echo" in out and "ts1" in out
    first = (tmp_path / "reports" / "ts2-echo_full.json").read_text()
    run(capsys, "eval", "--checkpoint", ckpt, "--manifest", data / "ts2-echo.jsonl", "--out-dir", tmp_path)
    assert (tmp_path / "reports" / "ts2-echo_full.json").read_text() == first


def test_eval_bypass_on_pse_model(tmp_path, data, capsys):
    run(capsys, "train", "--tiny", "--task", "pse", "--pool", data / "train.jsonl", "--steps", 1,
        "--batch-size", 1, "--out-dir", tmp_path)
    code, _, err = run(capsys, "eval", "--checkpoint", tmp_path / "checkpoints" / "latest.ckpt", "--manifest",
                       data / "ts1.jsonl", "--path", "bypass", "--out-dir", tmp_path)
    assert code == 2 and "bypass" in error_of(err)["message"]


def test_eval_config_mismatch(tmp_path, data, run_dir, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": {"variant": "vfl"}}))
    code, _, err = run(capsys, "eval", "--config", cfg, "--checkpoint", run_dir / "checkpoints" / "latest.ckpt",
                       "--manifest", data / "ts1.jsonl", "--out-dir", tmp_path)
    assert code == 1 and error_of(err)["error"] == "config-mismatch"


def test_eval_missing_checkpoint(tmp_path, data, capsys):
    code, _, err = run(capsys, "eval", "--checkpoint", tmp_path / "nope.ckpt", "--manifest", data / "ts1.jsonl")
    assert code == 1 and error_of(err)["error"] == "missing-file"


def test_enhance_matches_offline(tmp_path, data, run_dir, capsys):
    s = read_manifest(data / "ts2-echo.jsonl")[0]
    write_wav(tmp_path / "mic.wav", s.mic)
    write_wav(tmp_path / "far.wav", s.farend)
    ckpt = run_dir / "checkpoints" / "latest.ckpt"
    code, _, _ = run(capsys, "enhance", "--checkpoint", ckpt, "--mic", tmp_path / "mic.wav", "--farend",
                     tmp_path / "far.wav", "--speaker", s.spec.speaker_id, "--out", tmp_path / "out.wav")
    assert code == 0
    out = read_wav(tmp_path / "out.wav")
    assert len(out) == len(s.mic)
    model, _, _ = load_model(ckpt)
    ref = forward_full(model, read_wav(tmp_path / "mic.wav"), read_wav(tmp_path / "far.wav"),
                       embedding_for(s.spec.speaker_id))
    assert np.sqrt(np.mean((out - ref) ** 2)) < 1e-5


def test_enhance_missing_farend_warns(tmp_path, run_dir, capsys, caplog):
    write_wav(tmp_path / "mic.wav", np.random.default_rng(0).standard_normal(4000) * 0.1)
    code, _, err = run(capsys, "enhance", "--checkpoint", run_dir / "checkpoints" / "latest.ckpt", "--mic",
                       tmp_path / "mic.wav", "--speaker", "spk001", "--out", tmp_path / "out.wav")
    assert code == 0
    assert "all-zero far-end" in caplog.text + err
    assert len(read_wav(tmp_path / "out.wav")) == 4000


def test_enhance_rejects_wrong_rate(tmp_path, run_dir, capsys):
    from scipy.io import wavfile
    wavfile.write(tmp_path / "mic.wav", 8000, np.zeros(800, dtype=np.float32))
    code, _, err = run(capsys, "enhance", "--checkpoint", run_dir / "checkpoints" / "latest.ckpt", "--mic",
                       tmp_path / "mic.wav", "--speaker", "a", "--out", tmp_path / "o.wav")
    assert code == 1 and error_of(err)["error"] == "audio-format"


def test_inspect_defaults(capsys):
    code, out, _ = run(capsys, "inspect", "--trials", 1)
    assert code == 0
    count = int(out.split("parameters")[1].split()[0])
    assert abs(count / 3.28e6 - 1) < 0.15
    assert "causality    pass" in out
    assert "align window 100" in out


def test_inspect_vfl_aec(capsys):
    code, out, _ = run(capsys, "inspect", "--variant", "vfl", "--task", "aec", "--trials", 1)
    assert code == 0
    count = int(out.split("parameters")[1].split()[0])
    assert abs(count / 8.56e6 - 1) < 0.15


def test_inspect_checkpoint(run_dir, capsys):
    code, out, _ = run(capsys, "inspect", "--checkpoint", run_dir / "checkpoints" / "latest.ckpt", "--trials", 1)
    assert code == 0 and "step         3" in out
