import json

import pytest

from ookgc.cli import main


@pytest.mark.slow
def test_cli_end_to_end(tmp_path, capsys):
    data = tmp_path / "bench"
    assert main(["make-splits", "--synthetic", "0", "--amount", "10", "--valid-from-test", "0.5", "--out", str(data)]) == 0
    for name in ("train.tsv", "valid.tsv", "test.tsv", "aux.tsv", "manifest.json"):
        assert (data / name).exists()

    rules = tmp_path / "pool.tsv"
    assert main(["mine-rules", "--data", str(data), "--alpha-hc", "0.1", "--alpha-sc", "0.5", "--out", str(rules)]) == 0
    assert rules.read_text().strip()

    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"dim": 8, "batch_size": 256, "alpha_hc": 0.1, "alpha_sc": 0.5}))
    ckpt, log = tmp_path / "m.npz", tmp_path / "log.jsonl"
    assert main(["train", "--data", str(data), "--config", str(cfg), "--rules", str(rules),
                 "--mode", "full", "--epochs", "2", "--log", str(log), "--out", str(ckpt)]) == 0
    rows = [json.loads(line) for line in log.read_text().splitlines()]
    assert [r["epoch"] for r in rows] == [1, 2]

    report = tmp_path / "lp.json"
    assert main(["eval-lp", "--data", str(data), "--checkpoint", str(ckpt), "--json", str(report)]) == 0
    lp = json.loads(report.read_text())
    assert lp["count"] > 0 and lp["hits1"] <= lp["hits10"]

    assert main(["eval-tc", "--data", str(data), "--checkpoint", str(ckpt)]) == 0
    vn = tmp_path / "vn.tsv"
    assert main(["report-vn", "--data", str(data), "--checkpoint", str(ckpt), "--out", str(vn)]) == 0
    for line in vn.read_text().splitlines():
        h, r, t, s, n = line.split("\t")
        assert 0.0 <= float(s) <= 1.0 and int(n) >= 1
    assert "Accuracy" in capsys.readouterr().out


def test_make_splits_needs_input(tmp_path):
    with pytest.raises(SystemExit):
        main(["make-splits", "--out", str(tmp_path / "x")])


def test_split_real_directory(tmp_path):
    src = tmp_path / "kg"
    src.mkdir()
    rows = [f"e{i}\tr\te{(i + 1) % 30}\n" for i in range(30)] + [f"e{i}\ts\te{(i * 7) % 30}\n" for i in range(30)]
    (src / "train.tsv").write_text("".join(rows[:50]))
    (src / "test.tsv").write_text("".join(rows[50:]))
    out = tmp_path / "split"
    assert main(["make-splits", "--data", str(src), "--split-mode", "both", "--amount", "50", "--out", str(out)]) == 0
    assert (out / "train.tsv").exists()
