import json
import struct
from pathlib import Path

import numpy as np
import pytest
import torch

from houghlane import cli
from houghlane.datasets import parse_tusimple, validate_culane, validate_tusimple
from houghlane.pipeline import PipelineConfig, ToyHoughLaneNet, save_model
from houghlane.serialization import (FormatError, config_hash, hmap_bytes, hmap_from_bytes, load_checkpoint,
                                     overlay, read_hmap, read_jsonl, read_png, save_checkpoint, to_uint8,
                                     write_hmap, write_jsonl, write_png)
from houghlane.geometry import LanePolyline, LaneSet
from houghlane.synth import scene_stream

FIXTURES = Path(__file__).parent / "fixtures"


def test_hmap_layout_and_roundtrip(tmp_path):
    g = np.random.default_rng(0).random((5, 7)).astype(np.float32)
    data = hmap_bytes(g)
    assert data[:4] == b"HMAP" and struct.unpack("<III", data[4:16]) == (5, 7, 0)
    assert len(data) == 16 + 4 * 35
    assert np.array_equal(hmap_from_bytes(data), g)
    write_hmap(tmp_path / "a.hmap", g)
    assert np.array_equal(read_hmap(tmp_path / "a.hmap"), g)
    for bad in (b"XMAP" + data[4:], data[:-4]):
        with pytest.raises(FormatError):
            hmap_from_bytes(bad)


def test_png_roundtrip(tmp_path):
    g = np.linspace(0, 1, 12).reshape(3, 4)
    write_png(tmp_path / "a.png", g)
    assert np.array_equal(read_png(tmp_path / "a.png"), to_uint8(g))
    assert to_uint8(np.array([[2.0, 4.0]]), normalize=True).tolist() == [[128, 255]]
    img = overlay(np.zeros((10, 10)), [LanePolyline.from_xy([2, 2], [0, 9])])
    assert img.shape == (10, 10) and np.all(img[:, 2] == 255) and img.sum() == 255 * 10


def test_checkpoint_container(tmp_path):
    tensors = {"w": np.arange(6, dtype=np.float32).reshape(2, 3), "i": np.array([1, -2], dtype=np.int64),
               "d": np.ones((1,), np.float64), "u": np.zeros((2, 2, 2), np.uint8)}
    cfg = {"a": 1, "b": [1, 2]}
    path = tmp_path / "m.hlwt"
    save_checkpoint(path, tensors, cfg)
    raw = path.read_bytes()
    assert raw[:4] == b"HLWT" and struct.unpack("<HH", raw[4:8]) == (1, 0)
    assert raw[8:40] == config_hash(cfg)
    back, got_cfg = load_checkpoint(path, expect_config=cfg)
    assert got_cfg == cfg and set(back) == set(tensors)
    for k in tensors:
        assert back[k].dtype == tensors[k].dtype and np.array_equal(back[k], tensors[k])
    with pytest.raises(FormatError, match="config"):
        load_checkpoint(path, expect_config={"a": 2})
    for bad in (raw[:-3], raw + b"\0", b"HLWX" + raw[4:], raw[:4] + struct.pack("<HH", 9, 0) + raw[8:]):
        (tmp_path / "bad").write_bytes(bad)
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "bad")


def test_jsonl(tmp_path):
    rows = [{"a": 1}, {"b": [1, 2]}]
    write_jsonl(tmp_path / "x.jsonl", rows)
    assert read_jsonl(tmp_path / "x.jsonl") == rows


# ------------------------------------------------------------------- CLI


def _run(capsys, *argv):
    code = cli.main(list(map(str, argv)))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_cli_build_labels(tmp_path, capsys):
    code, out, _ = _run(capsys, "build-labels", "--format", "tusimple", FIXTURES / "tusimple_2lane.json",
                        "--out", tmp_path)
    assert code == 0 and json.loads(out)["labels"] == 2
    peaks = read_jsonl(tmp_path / "peaks.jsonl")
    assert len(peaks[0]["peaks"]) == 2 and peaks[1]["peaks"] == []
    hm = read_hmap(next(tmp_path.glob("clips__0530*.hmap")))
    assert hm.shape == (240, 240) and hm.max() == 1.0
    assert list(tmp_path.glob("*.png"))
    code, out, _ = _run(capsys, "build-labels", "--format", "culane", FIXTURES, "--out", tmp_path / "c",
                        "--no-png")
    assert code == 0 and json.loads(out)["theta"] == 360
    assert not list((tmp_path / "c").glob("*.png"))


def test_cli_eval_tusimple(tmp_path, capsys):
    gt = FIXTURES / "tusimple_2lane.json"
    recs = parse_tusimple(gt.read_text())
    pred = tmp_path / "pred.json"
    rows = []
    for r in recs:
        lanes = [[x + 30 if x >= 0 and i == 0 else x for x in ln] for i, ln in enumerate(r.lanes)]
        rows.append(json.dumps({"raw_file": r.raw_file, "lanes": lanes, "run_time": 1}))
    pred.write_text("\n".join(rows) + "\n")
    code, out, _ = _run(capsys, "eval", "--format", "tusimple", "--pred", pred, "--gt", gt)
    res = json.loads(out.splitlines()[0])
    assert code == 0 and res["n_gt"] == 18 and res["n_correct"] == 9


def test_cli_eval_culane_per_category(tmp_path, capsys):
    lane = "100 590 200 400 300 200\n"
    for cat, gt_text, pred_text in (("normal", lane, lane), ("cross", "", "900 590 950 300\n")):
        for root, text in (("gt", gt_text), ("pred", pred_text)):
            d = tmp_path / root / cat
            d.mkdir(parents=True)
            (d / "0001.lines.txt").write_text(text)
    code, out, _ = _run(capsys, "eval", "--format", "culane", "--pred", tmp_path / "pred", "--gt", tmp_path / "gt",
                        "--per-category")
    lines = out.splitlines()
    assert code == 0 and json.loads(lines[0])["tp"] == 1
    assert json.loads(lines[2])["categories"] == {"normal": 1.0, "cross": 1}


def test_cli_errors_return_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{nope\n")
    code, _, err = _run(capsys, "eval", "--format", "tusimple", "--pred", bad, "--gt", bad)
    assert code == 2 and "line 1" in err


def test_cli_predict_and_bench(tmp_path, capsys):
    cfg = PipelineConfig.toy()
    torch.manual_seed(0)
    save_model(tmp_path / "m.hlwt", ToyHoughLaneNet(cfg))
    sc = next(scene_stream(0, 1, 0.2, width=cfg.width, height=cfg.height, spec=cfg.scene_spec))
    np.save(tmp_path / "img.npy", sc.image)
    write_png(tmp_path / "big.png", np.kron(sc.image, np.ones((2, 2))))
    code, _, _ = _run(capsys, "predict", "--checkpoint", tmp_path / "m.hlwt", tmp_path / "img.npy",
                      tmp_path / "big.png", "--out", tmp_path / "o", "--threshold", "0.0", "--overlay")
    assert code == 0
    for line in (tmp_path / "o" / "predictions.json").read_text().splitlines():
        obj = json.loads(line)
        validate_tusimple(obj, prediction=True)
    assert len(list((tmp_path / "o").glob("*.overlay.png"))) == 2
    code, _, _ = _run(capsys, "predict", "--checkpoint", tmp_path / "m.hlwt", tmp_path / "img.npy",
                      "--out", tmp_path / "c", "--format", "culane", "--threshold", "0.0")
    validate_culane((tmp_path / "c" / "img.lines.txt").read_text())
    code, out, _ = _run(capsys, "dht-bench", "--h", 12, "--w", 20, "--theta", 16, "--r", 16, "--iters", 1)
    assert code == 0 and json.loads(out)["mass_identity_ok"]


def test_cli_train_toy_writes_artifacts(tmp_path, capsys):
    code, out, _ = _run(capsys, "--deterministic", "train-toy", "--scenes", 3, "--epochs", 1, "--out", tmp_path,
                        "--quiet")
    assert code == 0 and "accuracy" in json.loads(out.splitlines()[-1])
    assert len(read_jsonl(tmp_path / "trace.jsonl")) == 2
    assert len(read_jsonl(tmp_path / "losses.jsonl")) == 3
    assert (tmp_path / "model.hlwt").exists()
