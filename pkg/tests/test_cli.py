import json

import pytest

from maskbev.cli import main
from maskbev.config import AggregationConfig, DecoderConfig, EncoderConfig, QueryConfig, RunConfig, TrainConfig
from maskbev.scenes import GridSpec


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["gen", "--out", str(data), "--count", "12", "--seed", "2", "--grid", "16", "--val-count", "3"]) == 0
    cfg = RunConfig(grid=GridSpec(16, 16, 1.0), encoder=EncoderConfig(channels=16, depth=1), queries=QueryConfig(n=4),
                    decoder=DecoderConfig(layers=2), aggregation=AggregationConfig(loops=1),
                    train=TrainConfig(epochs=1, batch=3, probe_size=2), dataset=str(data))
    cfg.save(root / "cfg.json")
    assert main(["train", "--config", str(root / "cfg.json"), "--out", str(root / "run")]) == 0
    return root


def test_gen_writes_manifest(cli_run):
    manifest = json.loads((cli_run / "data" / "manifest.json").read_text())
    assert manifest["count"] == 12 and manifest["val_count"] == 3


def test_train_outputs(cli_run):
    run = cli_run / "run"
    assert (run / "model.ckpt").is_file() and (run / "epoch_001.ckpt").is_file()
    assert (run / "metrics.csv").read_text().startswith("epoch,step,l_total,l_cls,l_box,l_seg,miou,ap@1,ap@2\n")


def test_eval_prints_report(cli_run, capsys):
    code = main(["eval", "--config", str(cli_run / "cfg.json"), "--checkpoint", str(cli_run / "run" / "model.ckpt")])
    assert code == 0
    report = json.loads(capsys.readouterr().out)
    assert report["scenes"] == 3
    assert 0.0 <= report["miou"] <= 1.0 and "baseline_miou" in report


def test_eval_without_checkpoint_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["eval"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_eval_missing_checkpoint_file(cli_run):
    assert main(["eval", "--config", str(cli_run / "cfg.json"), "--checkpoint", str(cli_run / "none.ckpt")]) == 2


def test_unknown_flag():
    with pytest.raises(SystemExit) as exc:
        main(["gen", "--out", "x", "--count", "1", "--bogus"])
    assert exc.value.code == 2


def test_render_twice_identical(cli_run):
    args = ["render", "--checkpoint", str(cli_run / "run" / "model.ckpt"), "--scene", "0", "--scale", "2"]
    assert main(args + ["--out", str(cli_run / "a.ppm")]) == 0
    assert main(args + ["--out", str(cli_run / "b.ppm")]) == 0
    a = (cli_run / "a.ppm").read_bytes()
    assert a == (cli_run / "b.ppm").read_bytes()
    assert a.startswith(b"P6\n64 32\n255\n")  # ground truth | prediction


def test_missing_dataset_exit_code(tmp_path):
    cfg = RunConfig(dataset=str(tmp_path / "absent"))
    cfg.save(tmp_path / "c.json")
    assert main(["train", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "r")]) == 1


def test_gradcheck_passes():
    assert main(["gradcheck"]) == 0


def test_ablate_mask_design_three_rows(cli_run, capsys):
    code = main(["ablate", "--config", str(cli_run / "cfg.json"), "--knob", "mask-design", "--seeds", "0",
                 "--train-limit", "3", "--val-limit", "2"])
    assert code == 0
    out = capsys.readouterr().out.strip().splitlines()
    table = out[next(i for i, line in enumerate(out) if line.startswith("variant")) + 1:]
    rows = [line.split()[0] for line in table]
    assert rows == ["Box", "Circle", "1.3x"]
