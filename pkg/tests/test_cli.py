import json
import os
import struct
import subprocess
import sys

import numpy as np
import pytest

from rawres.audio import save_wav
from rawres.cli import COMMANDS, main
from rawres.model import MAGIC

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
SYNTH_CONF = os.path.join(ROOT, "configs", "synthetic.conf")


def _tiny_conf(tmp_path, **extra):
    lines = {"dataset": "synthetic", "rb_kinds": "RB1,RB5", "preprocessing": "none", "repetitions": "2",
             "seed": "3", "epochs": "2", "batch_size": "8", "widths": "4,8,16,32", "depths": "1,1,1,1"}
    lines.update({k: str(v) for k, v in extra.items()})
    path = tmp_path / "tiny.conf"
    path.write_text("".join(f"{k} = {v}\n" for k, v in lines.items()))
    return str(path)


def test_param_count_rb1(capsys):
    assert main(["param-count", "--rb", "RB1"]) == 0
    assert capsys.readouterr().out.splitlines()[-1] == "total parameters: 3,989,914"


def test_param_count_rb5_csv(capsys, tmp_path):
    out = tmp_path / "ledger.csv"
    assert main(["param-count", "--rb", "RB5", "--csv", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert text == out.read_text()
    rows = [line.split(",") for line in text.splitlines()[1:]]
    assert sum(int(r[1]) + int(r[2]) for r in rows) == 3_988_570


def test_param_count_slim2d(capsys):
    assert main(["param-count", "--arch", "slim2d", "--rb", "RB3"]) == 0
    assert capsys.readouterr().out.splitlines()[-1] == "total parameters: 4,167,130"


def test_unknown_block_exits_2(capsys):
    assert main(["param-count", "--rb", "RB7"]) == 2
    assert "RB7" in capsys.readouterr().err


@pytest.mark.parametrize("command", sorted(COMMANDS))
def test_help_for_every_command(command):
    with pytest.raises(SystemExit) as info:
        main([command, "--help"])
    assert info.value.code == 0


def test_bad_arguments_exit_2():
    with pytest.raises(SystemExit) as info:
        main(["param-count"])
    assert info.value.code == 2


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "rawres.cli", "param-count", "--rb", "RB2"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert "3,989,914" in proc.stdout


def test_experiment_rows_and_determinism(tmp_path, capsys):
    conf = _tiny_conf(tmp_path)
    assert main(["experiment", "--config", conf, "--out", str(tmp_path / "a")]) == 0
    assert main(["experiment", "--config", conf, "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "results.csv").read_bytes()
    assert a == (tmp_path / "b" / "results.csv").read_bytes()
    assert len(a.decode().splitlines()) == 1 + 4
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert set(summary["cells"]["none"]) == {"RB1", "RB5"}
    assert "config hash" in capsys.readouterr().out


def test_experiment_seed_override_changes_results(tmp_path):
    conf = _tiny_conf(tmp_path, rb_kinds="RB1", repetitions=1)
    main(["experiment", "--config", conf, "--out", str(tmp_path / "a")])
    main(["experiment", "--config", conf, "--seed", "4", "--out", str(tmp_path / "b")])
    summary_a = json.loads((tmp_path / "a" / "summary.json").read_text())
    summary_b = json.loads((tmp_path / "b" / "summary.json").read_text())
    assert summary_a["config_hash"] != summary_b["config_hash"]


def test_experiment_rb7_config_exits_2(tmp_path, capsys):
    assert main(["experiment", "--config", _tiny_conf(tmp_path, rb_kinds="RB1,RB7")]) == 2
    assert "RB7" in capsys.readouterr().err


def test_missing_dataset_root_exits_3(tmp_path, capsys):
    conf = _tiny_conf(tmp_path, dataset="urbansound8k", root=str(tmp_path / "nope"))
    assert main(["experiment", "--config", conf, "--out", str(tmp_path / "o")]) == 3
    assert "nope" in capsys.readouterr().err


def test_missing_config_exits_3(tmp_path):
    assert main(["experiment", "--config", str(tmp_path / "absent.conf")]) == 3


def _results(path, groups):
    lines = ["rb,preproc,rep,accuracy,epochs"]
    for rb, values in groups.items():
        lines += [f"{rb},none,{i},{v},10" for i, v in enumerate(values)]
    path.write_text("\n".join(lines) + "\n")
    return str(path)


def test_stats_hand_example(tmp_path, capsys):
    res = _results(tmp_path / "r.csv", {"RB1": [1, 2, 3], "RB2": [4, 5, 6]})
    assert main(["stats", "--results", res, "--out", str(tmp_path / "s")]) == 0
    out = capsys.readouterr().out
    assert "F=13.5 p=0.02131" in out
    assert "alpha=0.05" in out
    assert (tmp_path / "s" / "significance.csv").exists()
    assert (tmp_path / "s" / "report.txt").read_text() == out


def test_stats_two_datasets_both(tmp_path, capsys):
    groups = {"RB1": [0.50, 0.51, 0.49], "RB2": [0.80, 0.81, 0.79], "RB5": [0.50, 0.52, 0.50]}
    a = _results(tmp_path / "a.csv", groups)
    b = _results(tmp_path / "b.csv", groups)
    assert main(["stats", "--results", a, "--results2", b, "--out", str(tmp_path / "s")]) == 0
    assert "@" in capsys.readouterr().out
    matching = (tmp_path / "s" / "matching.csv").read_text().splitlines()
    assert "none,RB1,RB2,both" in matching
    assert "none,RB1,RB5,none" in matching


def test_stats_malformed_line(tmp_path, capsys):
    path = tmp_path / "bad.csv"
    path.write_text("rb,preproc,rep,accuracy,epochs\nRB1,none,0,0.5,1\nRB1,none,x,0.6,1\n")
    assert main(["stats", "--results", str(path)]) == 3
    assert "line 3" in capsys.readouterr().err


def test_stats_too_few_groups_exit_2(tmp_path):
    assert main(["stats", "--results", _results(tmp_path / "r.csv", {"RB1": [0.5, 0.6]})]) == 2


def test_features_logmel_csv(tmp_path):
    wav = tmp_path / "x.wav"
    save_wav(wav, 0.1 * np.sin(np.arange(16000) / 5.0), 16000)
    out = tmp_path / "f.csv"
    assert main(["features", "--input", str(wav), "--out", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert len(rows) == 64 and len(rows[0].split(",")) == 201


def test_features_raw_bin(tmp_path):
    wav = tmp_path / "x.wav"
    save_wav(wav, np.zeros(8000), 8000)
    out = tmp_path / "f.bin"
    assert main(["features", "--input", str(wav), "--preprocessing", "none", "--seconds", "5",
                 "--format", "bin", "--out", str(out)]) == 0
    data = out.read_bytes()
    assert data[:4] == MAGIC
    _, mlen = struct.unpack_from("<BI", data, 4)
    manifest = json.loads(data[9:9 + mlen])
    assert manifest["tensors"][0][1] == [1, 40000]
    assert len(data) == 9 + mlen + 4 * 40000


def test_features_missing_input_exits_3(tmp_path):
    assert main(["features", "--input", str(tmp_path / "none.wav")]) == 3


def test_features_bad_wav_exits_3(tmp_path):
    path = tmp_path / "bad.wav"
    path.write_bytes(b"not audio")
    assert main(["features", "--input", str(path)]) == 3


def test_train_then_evaluate(tmp_path, capsys):
    conf = _tiny_conf(tmp_path)
    run = tmp_path / "run"
    assert main(["train", "--config", conf, "--rb", "RB5", "--out", str(run)]) == 0
    history = json.loads((run / "history.json").read_text())
    assert history["rb_kind"] == "RB5"
    capsys.readouterr()
    assert main(["evaluate", "--checkpoint", str(run / "model.rbn"), "--config", conf]) == 0
    acc = float(capsys.readouterr().out.strip().split("=")[1])
    # float32 checkpoint rounding does not flip any prediction here
    assert acc == history["test_accuracy"]


def test_synth(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "c"), "--clips-per-class", "1", "--seed", "2"]) == 0
    assert len([n for n in os.listdir(tmp_path / "c") if n.endswith(".wav")]) == 10


def test_shipped_synthetic_config_parses():
    from rawres.training import load_config
    cfg = load_config(SYNTH_CONF)
    assert cfg.dataset == "synthetic" and cfg.rb_kinds == ("RB1", "RB5")


def test_parallel_jobs_match_serial(tmp_path, monkeypatch):
    monkeypatch.setenv("RAWRES_THREADS", "2")
    conf = _tiny_conf(tmp_path, epochs=1)
    assert main(["experiment", "--config", conf, "--out", str(tmp_path / "serial")]) == 0
    assert main(["experiment", "--config", conf, "--jobs", "2", "--out", str(tmp_path / "parallel")]) == 0
    assert (tmp_path / "serial" / "results.csv").read_bytes() == (tmp_path / "parallel" / "results.csv").read_bytes()
