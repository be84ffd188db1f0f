import numpy as np
import pytest

from dfsmc.cli import main
from dfsmc.ingest import read_image, read_manifest


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("seed=7\nratio=0.6\nepochs=1\ninput_size=16\nfeature_dim=8\nbatch_size=4\n")
    return p


def test_split_is_deterministic(capsys, texture_tree, tmp_path):
    for name in ("a.tsv", "b.tsv"):
        code, _, _ = run(capsys, "split", "--data", texture_tree, "--ratio", 0.6, "--seed", 7,
                         "--out", tmp_path / name)
        assert code == 0
    assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()
    assert (tmp_path / "a.tsv").read_text().startswith("# dfsmc-manifest v1 seed=7 ratio=0.6")


def test_flag_beats_config(capsys, texture_tree, tmp_path, cfg_file):
    run(capsys, "split", "--config", cfg_file, "--data", texture_tree, "--seed", 11, "--out", tmp_path / "m.tsv")
    assert read_manifest(tmp_path / "m.tsv").seed == 11


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["split", "--bogus"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_data_error_exit_code(capsys, tmp_path):
    code, _, err = run(capsys, "split", "--data", tmp_path / "missing", "--out", tmp_path / "m.tsv")
    assert code == 3 and err.count("\n") == 1 and "error" in err


def test_bad_thread_setting(capsys, texture_tree, tmp_path, monkeypatch):
    monkeypatch.setenv("DFSMC_THREADS", "many")
    code, _, err = run(capsys, "split", "--data", texture_tree, "--out", tmp_path / "m.tsv")
    assert code == 3 and "DFSMC_THREADS" in err
    monkeypatch.setenv("DFSMC_THREADS", "1")
    assert run(capsys, "split", "--data", texture_tree, "--out", tmp_path / "m.tsv")[0] == 0


def test_convert(capsys, tmp_path):
    src = tmp_path / "bin" / "famA"
    src.mkdir(parents=True)
    (src / "x.exe").write_bytes(bytes(range(200)))
    code, _, _ = run(capsys, "convert", "--in", tmp_path / "bin", "--out", tmp_path / "img")
    assert code == 0
    img = read_image(tmp_path / "img" / "famA" / "x.exe.pgm")
    assert img.pixels.reshape(-1)[:200].tolist() == list(range(200))
    (src / "empty.exe").write_bytes(b"")
    code, _, err = run(capsys, "convert", "--in", tmp_path / "bin", "--out", tmp_path / "img2")
    assert code == 3 and "empty" in err


def test_full_workflow(capsys, texture_tree, tmp_path, cfg_file):
    w = tmp_path / "work"
    c = ["--config", cfg_file]
    assert run(capsys, "split", *c, "--data", texture_tree, "--out", w / "m.tsv")[0] == 0
    src_manifest = (w / "m.tsv").read_bytes()
    assert run(capsys, "augment", *c, "--manifest", w / "m.tsv", "--copies", 1, "--out", w / "ma.tsv")[0] == 0
    assert (w / "m.tsv").read_bytes() == src_manifest
    for arch, tag in (("mini-resnet", "r"), ("mini-densenet", "d")):
        code, out, _ = run(capsys, "train", *c, "--arch", arch, "--manifest", w / "ma.tsv", "--out", w / f"{tag}.bin")
        assert code == 0 and "epoch 1 loss" in out
        assert run(capsys, "features", *c, "--weights", w / f"{tag}.bin", "--manifest", w / "ma.tsv",
                   "--out", w / f"{tag}.csv")[0] == 0
    assert run(capsys, "fuse-svm", *c, "--resnet-cache", w / "r.csv", "--densenet-cache", w / "d.csv",
               "--out", w / "svm.txt")[0] == 0
    pair = ["--svm", w / "svm.txt", "--resnet-weights", w / "r.bin", "--densenet-weights", w / "d.bin"]
    image = next(texture_tree.glob("*/*.pgm"))
    code, out, _ = run(capsys, "predict", *c, *pair, "--image", image)
    assert code == 0 and out.startswith("class ")
    code, out, _ = run(capsys, "eval", *c, *pair, "--manifest", w / "ma.tsv", "--out", w / "report")
    assert code == 0 and "accuracy=" in out
    for name in ("summary.txt", "confusion.csv", "per_class.csv", "comparison.csv"):
        assert (w / "report" / name).is_file()

    # fine-tune with a frozen body: only head tensors move
    code, _, _ = run(capsys, "train", *c, "--arch", "mini-resnet", "--scheme", "finetune",
                     "--source-weights", w / "r.bin", "--freeze", "--manifest", w / "ma.tsv", "--out", w / "ft.bin")
    assert code == 0
    from dfsmc.models import load_weights

    before, after = load_weights(w / "r.bin").parameters(), load_weights(w / "ft.bin").parameters()
    for name in before:
        assert np.array_equal(before[name], after[name]) != name.startswith("head."), name

    # wrong weight file for the architecture
    code, _, err = run(capsys, "predict", *c, "--svm", w / "svm.txt", "--resnet-weights", w / "d.bin",
                       "--densenet-weights", w / "d.bin", "--image", image)
    assert code == 3 and "mismatch" in err


def test_scheme_flags_checked(capsys, tmp_path, texture_tree):
    run(capsys, "split", "--data", texture_tree, "--out", tmp_path / "m.tsv")
    code, _, err = run(capsys, "train", "--arch", "mini-resnet", "--manifest", tmp_path / "m.tsv",
                       "--freeze", "--out", tmp_path / "x.bin")
    assert code == 3 and "finetune" in err
    code, _, err = run(capsys, "train", "--arch", "mini-resnet", "--scheme", "finetune",
                       "--manifest", tmp_path / "m.tsv", "--out", tmp_path / "x.bin")
    assert code == 3 and "--source-weights" in err


def test_synth(capsys, tmp_path):
    code, _, _ = run(capsys, "synth", "--out", tmp_path / "s", "--families", 2, "--per-class", 3,
                     "--input-size", 16)
    assert code == 0 and len(list((tmp_path / "s").glob("*/*.pgm"))) == 6
