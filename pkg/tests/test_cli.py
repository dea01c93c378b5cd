import pytest

from charseq.cli import main
from charseq.text import read_lines, write_lines

TINY = ["--set", "model.model_dim=16", "--set", "model.ffn_dim=32", "--set", "model.heads=2",
        "--set", "model.enc_layers=1", "--set", "model.dec_layers=1", "--set", "run.task_size=100"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--preset", "copy", *TINY, "--max-steps", "8", "--out", str(out / "model")]) == 0
    return out


def test_make_data_and_learn_vocab(tmp_path):
    assert main(["make-data", "--task", "reverse", "--n", "20", "--prefix", str(tmp_path / "d")]) == 0
    src, tgt = read_lines(tmp_path / "d.src"), read_lines(tmp_path / "d.tgt")
    assert len(src) == 20 and all(s[::-1] == t for s, t in zip(src, tgt))
    assert main(["learn-vocab", "--mode", "char", "--input", str(tmp_path / "d.src"), "--output",
                 str(tmp_path / "v")]) == 0
    assert main(["learn-vocab", "--mode", "bpe", "--merges", "5", "--input", str(tmp_path / "d.src"),
                 "--output", str(tmp_path / "b")]) == 0
    assert (tmp_path / "b.vocab").exists()


def test_train_outputs(trained):
    run = trained / "model"
    for name in ("config.ini", "metrics.tsv", "last.ckpt", "final.ckpt"):
        assert (run / name).exists()
    assert len((run / "metrics.tsv").read_text().splitlines()) == 9


def test_resume_continues(trained, tmp_path):
    run = trained / "model"
    assert main(["train", "--preset", "copy", *TINY, "--max-steps", "10", "--out", str(tmp_path / "r"),
                 "--resume", str(run / "last.ckpt")]) == 0
    lines = (tmp_path / "r" / "metrics.tsv").read_text().splitlines()
    assert lines[-1].split("\t")[0] == "10"


def test_translate_keeps_empty_lines(trained, tmp_path):
    write_lines(tmp_path / "in", ["abc", "", "de"])
    ck = str(trained / "model" / "final.ckpt")
    assert main(["translate", "--checkpoint", ck, "--input", str(tmp_path / "in"),
                 "--output", str(tmp_path / "g")]) == 0
    assert main(["translate", "--checkpoint", ck, "--input", str(tmp_path / "in"), "--strategy", "beam",
                 "--beam", "1", "--output", str(tmp_path / "b")]) == 0
    greedy, beam1 = read_lines(tmp_path / "g"), read_lines(tmp_path / "b")
    assert len(greedy) == 3 and greedy[1] == ""
    assert greedy == beam1
    assert main(["translate", "--checkpoint", ck, "--input", str(tmp_path / "in"), "--strategy", "mbr",
                 "--samples", "3", "--scores", "--output", str(tmp_path / "m")]) == 0
    assert all("\t" in line for line in read_lines(tmp_path / "m") if line)


def test_evaluate(tmp_path, capsys):
    write_lines(tmp_path / "h", ["abc", "def"])
    assert main(["evaluate", "--hyp", str(tmp_path / "h"), "--ref", str(tmp_path / "h")]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "metric\tvalue\tci_low\tci_high"
    assert out[1].startswith("chrF\t1.000000")


def test_evaluate_with_noise(trained, tmp_path):
    write_lines(tmp_path / "s", ["abc", "defg"])
    assert main(["evaluate", "--hyp", str(tmp_path / "s"), "--ref", str(tmp_path / "s"), "--checkpoint",
                 str(trained / "model" / "final.ckpt"), "--source", str(tmp_path / "s"), "--noise",
                 "rate=0.1,replicas=2,seed=1", "--output", str(tmp_path / "rep")]) == 0
    names = [line.split("\t")[0] for line in read_lines(tmp_path / "rep")]
    assert "chrF_noisy_mean" in names and "chrF_noisy_r01" in names


def test_sweep_beam(trained, tmp_path):
    write_lines(tmp_path / "s", ["abc", "de"])
    assert main(["sweep-beam", "--checkpoint", str(trained / "model" / "final.ckpt"), "--source",
                 str(tmp_path / "s"), "--reference", str(tmp_path / "s"), "--widths", "1:3:2", "--alphas", "0,1",
                 "--output", str(tmp_path / "sw")]) == 0
    assert len(read_lines(tmp_path / "sw")) == 5


@pytest.mark.parametrize("argv", [
    ["train", "--preset", "copy", "--set", "training.nope=1"],
    ["evaluate", "--hyp", "/nonexistent", "--ref", "/nonexistent"],
    ["sweep-beam", "--checkpoint", "x", "--source", "x", "--reference", "x", "--widths", ""],
    ["frobnicate"],
    ["translate"],
])
def test_usage_errors_exit_2(argv):
    assert main(argv) == 2


def test_divergence_exits_3(tmp_path):
    assert main(["train", "--preset", "copy", *TINY, "--set", "training.peak_lr=1e12", "--set",
                 "training.warmup=1", "--max-steps", "40", "--out", str(tmp_path)]) == 3
