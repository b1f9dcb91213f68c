import json

import numpy as np
import pytest

from hartleyseg import transforms as T
from hartleyseg.cli import main
from hartleyseg.data import read_volume, write_volume


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "phantom.cfg"
    spec.write_text("dims = 16,16,8\nseed = 3\n")
    assert main(["phantom", "--spec", str(spec), "--out", str(root / "data"), "--count", "2"]) == 0
    cfg = root / "train.cfg"
    cfg.write_text("variant = hnoseg\nwidth = 4\nk_max = 2,2,1\nn_blocks = 2\n"
                   "n_classes = 4\nepochs = 2\nval_fraction = 0\nseed = 1\n")
    return root


def test_phantom_writes_cases(dataset):
    names = sorted(p.name for p in (dataset / "data").iterdir())
    assert names == ["case_000_image.hvol", "case_000_label.hvol",
                     "case_001_image.hvol", "case_001_label.hvol"]


def test_transform_round_trip(tmp_path, rng, capsys):
    v = rng.normal(size=(2, 4, 6, 2)).astype(np.float32)
    write_volume(v, tmp_path / "v.hvol")
    assert main(["transform", str(tmp_path / "v.hvol"), str(tmp_path / "h.hvol")]) == 0
    assert main(["transform", str(tmp_path / "h.hvol"), str(tmp_path / "b.hvol"), "--inverse"]) == 0
    np.testing.assert_allclose(read_volume(tmp_path / "b.hvol"), v, atol=1e-5)
    assert main(["transform", str(tmp_path / "v.hvol"), str(tmp_path / "k.hvol"),
                 "--kmax", "1,2,1"]) == 0
    banded = read_volume(tmp_path / "k.hvol")
    assert banded.shape == (2, 2, 4, 2)
    expected = T.truncate(T.dht3(v.astype(np.float64)), (1, 2, 1)).data
    np.testing.assert_allclose(banded, expected, atol=1e-6)
    assert "wrote" in capsys.readouterr().out


def test_transform_bad_kmax_exits_nonzero(tmp_path, capsys):
    write_volume(np.zeros((1, 4, 4, 4), np.float32), tmp_path / "v.hvol")
    assert main(["transform", str(tmp_path / "v.hvol"), str(tmp_path / "o.hvol"),
                 "--kmax", "3,1,1"]) == 2
    assert "exceeds half" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["transform", "a", "b", "--kmax", "1,1"])


def test_count_params(capsys):
    assert main(["count-params", "--variant", "hnoseg", "--width", "12", "--kmax", "14,14,10"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("hnoseg: 21888 parameters")
    assert main(["count-params", "--variant", "fno"]) == 0
    assert capsys.readouterr().out.startswith("fno: 144513424 parameters")


def test_train_predict_eval(dataset, tmp_path, capsys):
    ckpt = tmp_path / "model.ckpt"
    assert main(["train", "--config", str(dataset / "train.cfg"), "--data", str(dataset / "data"),
                 "--out", str(ckpt), "--no-augment"]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == "epoch,lr,train_loss,val_loss,val_dice"
    assert len(out.splitlines()) == 3
    assert (tmp_path / "model.ckpt.history.csv").read_text() == out

    pred = tmp_path / "pred.hvol"
    assert main(["predict", "--model", str(ckpt), "--input",
                 str(dataset / "data" / "case_000_image.hvol"), "--out", str(pred)]) == 0
    labels = read_volume(pred)
    assert labels.shape == (1, 16, 16, 8) and labels.dtype == np.uint8
    capsys.readouterr()

    gt = dataset / "data" / "case_000_label.hvol"
    assert main(["eval", "--pred", str(gt), str(pred), "--gt", str(gt), str(gt)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "case | Dice WT | Dice TC | Dice ET | HD95 WT | HD95 TC | HD95 ET"
    assert lines[1].endswith("100.0 | 100.0 | 100.0 | 0.00 | 0.00 | 0.00")
    assert lines[-1].startswith("mean |")
    assert main(["eval", "--pred", str(gt), "--gt", str(gt), "--regions", "FG:1,2,3"]) == 0
    assert "Dice FG" in capsys.readouterr().out


def test_train_is_deterministic(dataset, tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        assert main(["train", "--config", str(dataset / "train.cfg"), "--data",
                     str(dataset / "data"), "--out", str(tmp_path / name)]) == 0
        outs.append(capsys.readouterr().out)
    assert outs[0] == outs[1]
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_train_rejects_unknown_key(dataset, tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("dropout = 0.1\n")
    assert main(["train", "--config", str(cfg), "--data", str(dataset / "data"),
                 "--out", str(tmp_path / "m")]) == 2
    assert "dropout" in capsys.readouterr().err


def test_predict_missing_file(tmp_path, capsys):
    assert main(["predict", "--model", str(tmp_path / "none"), "--input", "x",
                 "--out", str(tmp_path / "y")]) == 2


def test_experiment(tmp_path, capsys):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("variants = hnoseg\nfactors = 1\nseeds = 0\nn_train = 1\nn_test = 1\n"
                   "width = 4\nk_max = 2,2,1\nn_blocks = 2\nphantom.dims = 16,16,8\n"
                   "train.epochs = 1\n")
    assert main(["experiment", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 0
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert [c["status"] for c in summary["cells"]] == ["ok"]
    assert main(["experiment", "--config", str(cfg)]) == 2


def test_gradcheck_subcommand(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "hnoseg_network" in out and "FAIL" not in out
