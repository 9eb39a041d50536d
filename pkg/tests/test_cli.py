import json

import pytest

import dgtts.diffusion as diffusion
from dgtts.cli import main
from dgtts.numerics import load_tensors


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    assert main(["gen-data", "--out", str(d), "--speakers", "2", "--utterances", "12", "--min-frames", "12",
                 "--max-frames", "20", "--seed", "1"]) == 0
    return d


@pytest.fixture(scope="module")
def trained(corpus_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", str(corpus_dir), "--out", str(out), "--steps", "10", "--valid", "2",
                 "--batch-size", "4"]) == 0
    return out


def _log_steps(path):
    return [int(l.split(",")[0]) for l in path.read_text().splitlines()[1:]]


def test_train_writes_one_log_line_per_step(trained):
    assert _log_steps(trained / "train_log.csv") == list(range(1, 11))
    assert (trained / "checkpoint.dgtt").exists()
    assert (trained / "losses.png").read_bytes().startswith(b"\x89PNG")


def test_train_resume(corpus_dir, trained, tmp_path):
    out = tmp_path / "r"
    out.mkdir()
    for name in ("train_log.csv", "checkpoint.dgtt"):
        (out / name).write_bytes((trained / name).read_bytes())
    assert main(["train", "--data", str(corpus_dir), "--out", str(out), "--steps", "13", "--valid", "2",
                 "--batch-size", "4", "--resume"]) == 0
    assert _log_steps(out / "train_log.csv") == list(range(1, 14))


def test_missing_flags_are_usage_errors(corpus_dir, capsys):
    assert main(["train", "--out", "x"]) == 2
    assert "--data" in capsys.readouterr().err
    assert main(["train", "--data", str(corpus_dir)]) == 2
    assert main(["infer", "--out", "x"]) == 2
    assert main(["nonsense"]) == 2
    assert main(["variation", "--checkpoint", "x", "--n-samples", "1"]) == 2


def test_missing_files_are_io_errors(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path)]) == 3
    assert main(["infer", "--checkpoint", str(tmp_path / "none.dgtt"), "--out", str(tmp_path),
                 "--tokens", "1,2"]) == 3
    (tmp_path / "bad.dgtt").write_bytes(b"junk")
    assert main(["infer", "--checkpoint", str(tmp_path / "bad.dgtt"), "--out", str(tmp_path),
                 "--tokens", "1,2"]) == 3


def test_config_file_precedence(corpus_dir, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("steps = 3\nbatch_size = 2\nseed = 5\n")
    assert main(["train", "--data", str(corpus_dir), "--out", str(tmp_path / "o"), "--config", str(cfg),
                 "--steps", "2", "--valid", "2"]) == 0
    _, meta = load_tensors(tmp_path / "o" / "checkpoint.dgtt")
    assert meta["train.steps"] == "2"  # flag beats file
    assert meta["train.batch_size"] == "2"  # file beats default
    assert meta["train.seed"] == "5"
    assert meta["train.g_lr"] == "0.0001"  # default
    cfg.write_text("steps = lots\n")
    assert main(["train", "--data", str(corpus_dir), "--out", str(tmp_path / "o"), "--config", str(cfg)]) == 2


def test_infer_outputs_and_trace(trained, corpus_dir, tmp_path):
    out = tmp_path / "inf"
    assert main(["infer", "--checkpoint", str(trained / "checkpoint.dgtt"), "--out", str(out),
                 "--data", str(corpus_dir), "--trace", "--seed", "7"]) == 0
    assert sorted(p.name for p in out.glob("trace_t*.pgm")) == [f"trace_t{t}.pgm" for t in (1, 2, 3, 4)]
    assert (out / "mel.pgm").exists() and (out / "trace.png").exists()
    tensors, meta = load_tensors(out / "mel.dgtt")
    assert meta["decoder_passes"] == "4"
    first = (out / "mel.dgtt").read_bytes()
    assert main(["infer", "--checkpoint", str(trained / "checkpoint.dgtt"), "--out", str(out),
                 "--data", str(corpus_dir), "--seed", "7"]) == 0
    assert (out / "mel.dgtt").read_bytes() == first


def test_infer_T_override_and_tokens(trained, tmp_path):
    assert main(["infer", "--checkpoint", str(trained / "checkpoint.dgtt"), "--out", str(tmp_path),
                 "--tokens", "1,2,3", "--T", "2"]) == 0
    _, meta = load_tensors(tmp_path / "mel.dgtt")
    assert meta["decoder_passes"] == "2"
    assert main(["infer", "--checkpoint", str(trained / "checkpoint.dgtt"), "--out", str(tmp_path),
                 "--tokens", "1,x"]) == 2


def test_two_stage_mode_on_single_stage_checkpoint(trained, tmp_path, capsys):
    code = main(["infer", "--checkpoint", str(trained / "checkpoint.dgtt"), "--out", str(tmp_path),
                 "--tokens", "1,2", "--mode", "two-stage"])
    assert code == 2
    assert "two-stage" in capsys.readouterr().err


def test_train_two_stage_and_shallow_infer(corpus_dir, tmp_path):
    out = tmp_path / "two"
    assert main(["train-two-stage", "--data", str(corpus_dir), "--out", str(out), "--steps", "3",
                 "--stage1-iters", "3", "--valid", "2", "--batch-size", "4"]) == 0
    assert (out / "stage1.dgtt").exists() and (out / "stage1_log.csv").exists()
    assert main(["infer", "--checkpoint", str(out / "checkpoint.dgtt"), "--out", str(out),
                 "--tokens", "1,2,3", "--mode", "two-stage"]) == 0
    _, meta = load_tensors(out / "mel.dgtt")
    assert meta["decoder_passes"] == "1"


def test_variation(trained, tmp_path):
    assert main(["variation", "--checkpoint", str(trained / "checkpoint.dgtt"), "--out", str(tmp_path),
                 "--tokens", "1,2,3", "--n-samples", "3"]) == 0
    lines = (tmp_path / "variation.csv").read_text().splitlines()
    assert lines[0] == "sample,seed,frame,energy,centroid"
    assert (tmp_path / "variation.png").exists()


def test_bench(tmp_path, capsys):
    assert main(["bench", "--out", str(tmp_path), "--lengths", "4,8", "--repeats", "1"]) == 0
    rows = (tmp_path / "bench.csv").read_text().splitlines()
    assert rows[0].startswith("mode,n_tokens,frames,decoder_passes")
    passes = {(r.split(",")[0], r.split(",")[1]): r.split(",")[3:5] for r in rows[1:]}
    assert passes[("T=4", "8")] == ["4", "0"]
    assert passes[("two-stage", "4")] == ["1", "1"]
    assert (tmp_path / "bench.png").exists()
    assert main(["bench", "--out", str(tmp_path), "--modes", "fast"]) == 2


def test_check_passes_and_json(capsys):
    assert main(["check", "--no-gradients", "--json"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["passed"] and report["first_failure"] is None
    assert {c["name"] for c in report["checks"]} == {"schedule", "posterior", "moments", "losses"}
    assert report["schedule_table"].splitlines()[0] == "t,beta,alpha,alpha_bar"


def test_check_prints_schedule_table(capsys):
    assert main(["check", "--no-gradients", "--T", "2"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "t,beta,alpha,alpha_bar"
    assert [l.split(",")[0] for l in lines[1:3]] == ["1", "2"]


def test_check_catches_wrong_schedule(monkeypatch, capsys):
    real = diffusion.make_variance_schedule

    def wrong(T, beta_min=0.1, beta_max=40.0):
        # every beta 0.1% too small: valid, but off the closed form
        s = real(T, beta_min, beta_max)
        return diffusion.schedule_from_betas([float(b) * 0.999 for b in s.beta[1:]])

    monkeypatch.setattr(diffusion, "make_variance_schedule", wrong)
    assert main(["check", "--no-gradients"]) == 1
    assert "first failing check: schedule" in capsys.readouterr().out


@pytest.mark.slow
def test_check_with_gradients(capsys):
    assert main(["check"]) == 0
    assert "gradients" in capsys.readouterr().out
