import json

import numpy as np
import pytest

from arconv.cli import main
from arconv.fundus import save_image


def run(capsys, *argv):
    code = main(list(argv))
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def test_fig6(capsys):
    code, out, _ = run(capsys, "fig6")
    assert code == 0
    mae = float(out.strip().splitlines()[-1].split()[-1])
    assert abs(mae - 0.3678) <= 1e-3


def test_unknown_flag_is_usage_error(capsys, tmp_path):
    code, _, err = run(capsys, "fig7", "--out", str(tmp_path / "o"), "--bogus")
    assert code == 2
    assert len(err.strip().splitlines()) == 1 and err.startswith("arconv: error=usage")
    assert not (tmp_path / "o").exists()


def test_missing_subcommand(capsys):
    assert run(capsys)[0] == 2


def test_summary(capsys):
    code, out, _ = run(capsys, "summary", "--classes", "2")
    assert code == 0
    assert "head parameter delta (2 classes): 3074" in out
    assert "56x56x24" in out and "7x7x1536" in out
    assert "reference: 1,316,376" in out
    assert "checkpoint size" in out


def test_fig7_small_sweep_is_reproducible(capsys, tmp_path):
    args = ["--sizes", "5-6", "--trials", "2", "--gd-max-iter", "300", "--seed", "3"]
    assert run(capsys, "fig7", "--out", str(tmp_path / "a"), *args)[0] == 0
    assert run(capsys, "fig7", "--out", str(tmp_path / "b"), *args)[0] == 0
    a = (tmp_path / "a" / "fig7.csv").read_bytes()
    assert a == (tmp_path / "b" / "fig7.csv").read_bytes()
    first = a.decode().splitlines()[0]
    assert first.startswith("# config:")
    cfg = json.loads(first.split(":", 1)[1])
    assert cfg["seed"] == 3 and cfg["sizes"] == [5, 6] and cfg["dtype"] == "float32"
    assert len(a.decode().splitlines()) == 2 + 2 * 2 * 2


def test_config_file_sets_defaults_and_flags_win(capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"trials": 1, "sizes": [4], "gd_max_iter": 50, "seed": 9}))
    assert run(capsys, "fig8", "--config", str(cfg), "--seed", "2", "--out", str(tmp_path / "o"))[0] == 0
    header = (tmp_path / "o" / "fig8.csv").read_text().splitlines()[0]
    resolved = json.loads(header.split(":", 1)[1])
    assert resolved["trials"] == 1 and resolved["seed"] == 2 and resolved["gd_max_iter"] == 50


def test_config_unknown_key(capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"nonsense": 1}))
    assert run(capsys, "fig8", "--config", str(cfg))[0] == 2


def test_missing_config_file_is_io_error(capsys, tmp_path):
    code, _, err = run(capsys, "fig8", "--config", str(tmp_path / "nope.json"))
    assert code == 3 and "error=io" in err


def test_bench_zero_iterations(capsys, tmp_path):
    code, out, _ = run(capsys, "bench", "--iterations", "0", "--out", str(tmp_path))
    assert code == 0
    assert "0 iterations" in out
    assert (tmp_path / "bench.csv").exists()


def test_bench_checksums_stable(capsys):
    sums = []
    for _ in range(2):
        code, out, _ = run(capsys, "bench", "--iterations", "20", "--size", "8x8x2")
        assert code == 0
        sums.append([line for line in out.splitlines() if line.startswith("checksums")][0])
    assert sums[0] == sums[1]


def test_bench_bad_size(capsys):
    assert run(capsys, "bench", "--size", "8x8")[0] == 2


def test_train_eval_round_trip(capsys, tmp_path):
    common = ["--synthetic", "8", "--image-size", "32", "--seed", "1"]
    out = tmp_path / "t"
    code, text, _ = run(capsys, "train", "--arch", "tiny", "--epochs", "2", "--batch", "4",
                        "--out", str(out), *common)
    assert code == 0 and "epoch 2 loss" in text
    for name in ("loss.csv", "train_metrics.csv", "model.arcv"):
        assert (out / name).exists()
    code, text, _ = run(capsys, "eval", "--checkpoint", str(out / "model.arcv"),
                        "--out", str(tmp_path / "e"), *common)
    assert code == 0
    train_rows = (out / "train_metrics.csv").read_text().splitlines()[1:]
    eval_rows = (tmp_path / "e" / "metrics.csv").read_text().splitlines()[1:]
    assert train_rows == eval_rows


def test_eval_corrupt_checkpoint(capsys, tmp_path):
    bad = tmp_path / "bad.arcv"
    bad.write_bytes(b"ARCV\x01")
    code, _, err = run(capsys, "eval", "--checkpoint", str(bad), "--synthetic", "2", "--image-size", "32")
    assert code == 3 and "offset" in err


def test_preprocess_and_augment(capsys, tmp_path):
    src = tmp_path / "raw"
    src.mkdir()
    yy, xx = np.mgrid[0:64, 0:64]
    for i in range(3):
        img = np.zeros((64, 64, 3))
        img[(yy - 30 - i) ** 2 + (xx - 32) ** 2 <= 20 ** 2] = 0.7
        save_image(src / f"{i + 1}.png", img)
    code, _, _ = run(capsys, "preprocess", "--input", str(src), "--target", "32", "--out", str(tmp_path / "crop"))
    assert code == 0
    boxes = (tmp_path / "crop" / "boxes.csv").read_text().splitlines()
    assert len(boxes) == 2 + 3
    labels = tmp_path / "labels.csv"
    labels.write_text("id,label\n1,1\n2,0\n3,0\n")
    argv = ["augment", "--labels", str(labels), "--schema", "generic_binary",
            "--images", str(tmp_path / "crop"), "--multiplier", "2", "--merge-fraction", "0.5", "--seed", "5"]
    assert run(capsys, *argv, "--out", str(tmp_path / "a1"))[0] == 0
    assert run(capsys, *argv, "--out", str(tmp_path / "a2"))[0] == 0
    m1 = (tmp_path / "a1" / "manifest.csv").read_bytes()
    assert m1 == (tmp_path / "a2" / "manifest.csv").read_bytes()
    assert len(m1.decode().splitlines()) == 1 + 6 + 3


def test_augment_bad_labels_reports_line(capsys, tmp_path):
    labels = tmp_path / "labels.csv"
    labels.write_text("id,label\n1,7\n")
    code, _, err = run(capsys, "augment", "--labels", str(labels), "--schema", "generic_binary",
                       "--out", str(tmp_path / "o"))
    assert code == 3 and "line 2" in err
