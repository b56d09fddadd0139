import numpy as np
import pytest

from conftest import TINY_TRAIN
from dlif import cli
from dlif.config import TrainConfig, parse_kv_text, read_kv_file, resolve_config
from dlif.metrics import read_embeddings
from dlif.synthdata import load_dataset, read_manifest
from dlif.trainer import read_table

TINY_SETS = [f"{k}={','.join(map(str, v)) if isinstance(v, list) else v}" for k, v in TINY_TRAIN.items()]


def sets(*extra):
    out = []
    for item in list(TINY_SETS) + list(extra):
        out += ["--set", item]
    return out


@pytest.fixture(scope="module")
def trained(tiny_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    assert cli.main(["train", "--source", str(tiny_data[0]), "--target", str(tiny_data[1]), "--out", str(out)]
                    + sets()) == 0
    return out


def test_gen_data(tmp_path, capsys):
    spec = tmp_path / "spec.txt"
    spec.write_text("n_domains = 1\nids_per_domain = 2  # small\nsamples_per_id_per_liveness = 2\nimage_size = 8\n")
    assert cli.main(["gen-data", "--spec", str(spec), "--out", str(tmp_path / "d"), "--set", "seed=4"]) == 0
    assert "wrote 8 samples" in capsys.readouterr().out
    rows = read_manifest(tmp_path / "d" / "manifest.csv")
    assert len(rows) == 8 and len(load_dataset(tmp_path / "d")) == 8


def test_gen_data_bad_key(tmp_path, capsys):
    assert cli.main(["gen-data", "--out", str(tmp_path), "--set", "colour=red"]) == 1
    assert "valid keys" in capsys.readouterr().err


def test_usage_errors(capsys):
    assert cli.main([]) == 1
    assert cli.main(["train", "--out", "x", "--set", "nonsense"]) == 1
    assert cli.main(["train", "--out", "x", "--set", "lr=-1"]) == 1
    assert cli.main(["frobnicate"]) == 1
    assert cli.main(["--help"]) == 0
    capsys.readouterr()


def test_missing_data_is_runtime_error(tmp_path, capsys):
    assert cli.main(["train", "--source", str(tmp_path / "nope"), "--out", str(tmp_path / "o")] + sets()) == 2
    assert "error" in capsys.readouterr().err


def test_config_echo_roundtrip(trained):
    text = (trained / "config.txt").read_text()
    cfg = TrainConfig.from_mapping(parse_kv_text(text))
    assert cfg.to_text() == text
    assert cfg == TrainConfig.from_mapping(dict(s.split("=", 1) for s in TINY_SETS))


def test_config_precedence(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("lr = 0.01\nseed = 3\n")
    cfg = resolve_config(path, {"seed": "5"}, environ={"DLIF_SEED": "9"})
    assert cfg.lr == 0.01 and cfg.seed == 9
    assert resolve_config(path, {"seed": "5"}, environ={}).seed == 5
    assert read_kv_file(path) == {"lr": "0.01", "seed": "3"}


def test_train_outputs(trained):
    for name in ("history.csv", "losses.csv", "summary.txt", "best/manifest.csv", "last/state.txt"):
        assert (trained / name).exists()
    hist = read_table(trained / "history.csv")
    assert list(hist[0]) == ["epoch", "split", "HTER", "AUC", "threshold"]


def test_resume_cli(tiny_data, trained, tmp_path):
    part = tmp_path / "part"
    base = ["train", "--source", str(tiny_data[0]), "--target", str(tiny_data[1]), "--out", str(part)]
    assert cli.main(base + sets("epochs=1")) == 0
    assert cli.main(base + sets() + ["--resume"]) == 0
    for name in ("history.csv", "losses.csv"):
        assert (part / name).read_bytes() == (trained / name).read_bytes()
    for f in (trained / "last").iterdir():
        assert (part / "last" / f.name).read_bytes() == f.read_bytes()


def test_eval(tiny_data, trained, tmp_path, capsys):
    out = tmp_path / "m.txt"
    assert cli.main(["eval", "--checkpoint", str(trained / "best"), "--manifest",
                     str(tiny_data[1] / "manifest.csv"), "--out", str(out)]) == 0
    vals = parse_kv_text(out.read_text())
    assert 0 <= float(vals["AUC"]) <= 1 and int(vals["n"]) == 24
    assert cli.main(["eval", "--checkpoint", str(trained / "best"), "--manifest",
                     str(tiny_data[1] / "manifest.csv"), "--threshold", "2.0"]) == 0
    assert "HTER = 0.5" in capsys.readouterr().out


@pytest.mark.parametrize("space", ["u", "v"])
def test_export_embeddings(tiny_data, trained, tmp_path, space):
    out = tmp_path / f"{space}.csv"
    assert cli.main(["export-embeddings", "--checkpoint", str(trained / "last"), "--manifest",
                     str(tiny_data[1] / "manifest.csv"), "--out", str(out), "--space", space]) == 0
    feats, ident, live, dom = read_embeddings(out)
    data = load_dataset(tiny_data[1])
    assert feats.shape == (24, 8)
    assert np.array_equal(ident, data.identity) and np.array_equal(live, data.liveness)
    assert np.all(dom == 3)


def test_ablation_cells():
    flows = cli.ablation_cells("sc_flow")
    assert len(flows) == 11 and flows[-2] == ("M+H", {"sc_levels": "M,H", "sc_mode": "parallel"})
    assert [n for n, _ in cli.ablation_cells("contrast")] == ["aaic", "binary", "triplet", "none"]
    with pytest.raises(cli.UsageError):
        cli.ablation_cells("depth")


def test_ablate_contrast(tiny_data, tmp_path):
    out = tmp_path / "abl"
    assert cli.main(["ablate", "--axis", "contrast", "--source", str(tiny_data[0]), "--target", str(tiny_data[1]),
                     "--out", str(out)] + sets("epochs=1")) == 0
    for name in ("aaic", "binary", "triplet", "none"):
        assert (out / name / "history.csv").exists()
        assert f"contrast = {name}" in (out / name / "config.txt").read_text()


def test_gradcheck_cli(capsys):
    assert cli.main(["gradcheck", "--seed", "1"]) == 0
    assert "32/32 checks passed" in capsys.readouterr().out
