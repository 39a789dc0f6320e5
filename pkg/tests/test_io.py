import json
import struct
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

import oracles
from unext.analysis import count_params
from unext.arch import CANONICAL, build_model
from unext.checkpoint import CheckpointError, dumps, load_checkpoint, loads, save_checkpoint
from unext.data import IngestionError, load_dataset, load_sample, synth_dataset


def _randomize(model, seed):
    r = np.random.default_rng(seed)
    for p in model.params.values():
        p.data[...] = r.standard_normal(p.shape)
    for b in model.buffers.values():
        b[...] = r.uniform(0.1, 3, b.shape)
    return model


def _same(a, b):
    return (list(a.params) == list(b.params)
            and all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
            and all(np.array_equal(a.buffers[k], b.buffers[k]) for k in a.buffers))


@settings(max_examples=12, deadline=None)
@given(st.sampled_from(sorted(CANONICAL)), st.integers(0, 2**31))
def test_checkpoint_round_trip_bitwise(name, seed):
    model = _randomize(build_model(CANONICAL[name], seed % 7), seed)
    back = loads(dumps(model))
    assert back.config == model.config
    assert _same(model, back)


def test_checkpoint_file_and_param_count(tmp_path):
    model = build_model(CANONICAL["unext-s"], 3)
    save_checkpoint(model, tmp_path / "s.ckpt")
    back = load_checkpoint(tmp_path / "s.ckpt")
    assert back.mode == "eval" and _same(model, back)
    assert count_params(back).params == model.param_count()


def test_checkpoint_header_layout():
    blob = dumps(build_model(CANONICAL["unext-s"]))
    assert blob[:4] == b"UNXT"
    assert struct.unpack("<I", blob[4:8]) == (1,)
    (clen,) = struct.unpack("<I", blob[8:12])
    assert "channels=8,16,32,64,128" in blob[12:12 + clen].decode("utf-8").splitlines()


def test_checkpoint_corruption_detected():
    blob = dumps(build_model(CANONICAL["unext-s"]))
    with pytest.raises(CheckpointError, match="CRC"):
        loads(blob[:-100])
    flipped = bytearray(blob)
    flipped[len(blob) // 2] ^= 0x01
    with pytest.raises(CheckpointError, match="CRC"):
        loads(bytes(flipped))
    with pytest.raises(CheckpointError):
        loads(b"NOPE" + blob[4:])


def _reseal(body):
    import zlib
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def test_checkpoint_version_and_shape_checks():
    blob = dumps(build_model(CANONICAL["unext-s"]))
    body = bytearray(blob[:-4])
    body[4:8] = struct.pack("<I", 9)
    with pytest.raises(CheckpointError, match="version"):
        loads(_reseal(bytes(body)))
    # embed a wider config in front of the narrow tensors
    text = "\n".join(CANONICAL["unext"].to_lines()).encode()
    (clen,) = struct.unpack("<I", blob[8:12])
    body = blob[:8] + struct.pack("<I", len(text)) + text + blob[12 + clen:-4]
    with pytest.raises(CheckpointError, match="shape"):
        loads(_reseal(body))


def _write(path, arr):
    Image.fromarray(arr).save(path)


def test_load_sample_examples(tmp_path):
    _write(tmp_path / "w.png", np.full((40, 40, 3), 255, np.uint8))
    _write(tmp_path / "m.png", np.full((40, 40), 255, np.uint8))
    s = load_sample(tmp_path / "w.png", tmp_path / "m.png", 32)
    assert s.image.shape == (3, 32, 32) and np.all(s.image == 1.0)
    assert s.mask.shape == (1, 32, 32) and np.all(s.mask == 1)


def test_resize_matches_pixel_oracle(tmp_path):
    rgb = np.random.default_rng(0).integers(0, 256, (100, 60, 3)).astype(np.uint8)
    _write(tmp_path / "i.png", rgb)
    _write(tmp_path / "m.png", np.zeros((100, 60), np.uint8))
    s = load_sample(tmp_path / "i.png", tmp_path / "m.png", 256)
    assert s.image.shape == (3, 256, 256)
    for c in range(3):
        ref = oracles.bilinear_pixel(rgb[:, :, c] / 255.0, 256, 256)
        np.testing.assert_allclose(s.image[c], ref, atol=1e-6)


def test_grayscale_pgm_and_threshold(tmp_path):
    gray = np.array([[0, 127], [128, 255]], np.uint8)
    Image.fromarray(np.full((2, 2), 51, np.uint8)).save(tmp_path / "g.pgm")
    Image.fromarray(gray).save(tmp_path / "m.pgm")
    s = load_sample(tmp_path / "g.pgm", tmp_path / "m.pgm", 2)
    assert np.allclose(s.image, 0.2)
    assert s.mask[0].tolist() == [[0, 0], [1, 1]]


def test_ingestion_errors(tmp_path):
    _write(tmp_path / "i.png", np.zeros((8, 8), np.uint8))
    _write(tmp_path / "m.png", np.zeros((4, 8), np.uint8))
    with pytest.raises(IngestionError, match="m.png"):
        load_sample(tmp_path / "i.png", tmp_path / "m.png", 8)
    with pytest.raises(IngestionError, match="missing"):
        load_sample(tmp_path / "i.png", tmp_path / "none.png", 8)
    (tmp_path / "bad.png").write_bytes(b"not an image")
    with pytest.raises(IngestionError, match="bad.png"):
        load_sample(tmp_path / "bad.png", tmp_path / "m.png", 8)


def test_dataset_pairs_and_determinism(tmp_path):
    for d in ("images", "masks"):
        (tmp_path / d).mkdir()
    rng = np.random.default_rng(1)
    for name in ("a", "b"):
        _write(tmp_path / "images" / f"{name}.png", rng.integers(0, 256, (20, 30, 3)).astype(np.uint8))
        _write(tmp_path / "masks" / f"{name}.png", (rng.uniform(size=(20, 30)) > 0.5).astype(np.uint8) * 255)
    first, second = load_dataset(tmp_path, 32), load_dataset(tmp_path, 32)
    assert [s.id for s in first] == ["a", "b"]
    assert all(np.array_equal(x.image, y.image) and np.array_equal(x.mask, y.mask) for x, y in zip(first, second))
    _write(tmp_path / "images" / "c.png", np.zeros((20, 30), np.uint8))
    with pytest.raises(IngestionError, match="c.png"):
        load_dataset(tmp_path, 32)


def test_synth_dataset():
    a, b = synth_dataset(8, 64, seed=5), synth_dataset(8, 64, seed=5)
    assert len(a) == 8
    assert all(np.array_equal(x.image, y.image) and np.array_equal(x.mask, y.mask) for x, y in zip(a, b))
    assert all(s.mask.sum() > 0 for s in a)
    assert all(s.image.min() >= 0 and s.image.max() <= 1 for s in a)
    assert not np.array_equal(a[0].image, synth_dataset(1, 64, seed=6)[0].image)


def _cli(*args, cwd=None):
    return subprocess.run([sys.executable, "-m", "unext.cli", *args], capture_output=True, text=True, cwd=cwd)


def test_cli_exit_codes(tmp_path):
    assert _cli("count", "--config", "unext-s", "--size", "96").returncode == 0
    assert _cli("count", "--bogus").returncode == 2
    assert _cli("count", "--config", str(tmp_path / "missing.cfg")).returncode == 2
    (tmp_path / "bad.cfg").write_text("channels=1,2\n")
    assert _cli("count", "--config", str(tmp_path / "bad.cfg")).returncode == 2
    (tmp_path / "bad.ckpt").write_bytes(b"UNXT" + b"\0" * 20)
    r = _cli("bench", "--ckpt", str(tmp_path / "bad.ckpt"), "--size", "96", "--n", "1")
    assert r.returncode == 1 and "CheckpointError" in r.stderr
    assert _cli("gradcheck", "--op", "nonexistent").returncode == 2


def test_cli_count_totals():
    r = _cli("count", "--config", "unext", "--size", "256")
    total = r.stdout.strip().splitlines()[-1].split(",")
    assert total[0] == "TOTAL" and int(total[1]) == 1469137


def test_cli_config_file(tmp_path):
    (tmp_path / "s.cfg").write_text("\n".join(CANONICAL["unext-s"].to_lines()))
    r = _cli("count", "--config", str(tmp_path / "s.cfg"), "--size", "96")
    assert r.returncode == 0
    assert int(r.stdout.strip().splitlines()[-1].split(",")[1]) == count_params(CANONICAL["unext-s"]).params


def test_cli_ablate_rows():
    r = _cli("ablate", "--table2")
    rows = r.stdout.strip().splitlines()[1:]
    params = [int(line.rsplit(",", 4)[1]) for line in rows]
    assert r.returncode == 0 and len(params) == 6
    assert params[0] < params[1] <= params[2] == params[3] == params[4] == params[5]


def test_cli_infer_negative_logits_gives_empty_mask(tmp_path):
    model = build_model(CANONICAL["unext-s"])
    model.params["head.weight"].data[...] = 0
    model.params["head.bias"].data[...] = -5
    save_checkpoint(model, tmp_path / "m.ckpt")
    _write(tmp_path / "in.png", np.random.default_rng(0).integers(0, 256, (50, 70, 3)).astype(np.uint8))
    r = _cli("infer", "--ckpt", str(tmp_path / "m.ckpt"), "--input", str(tmp_path / "in.png"),
             "--out", str(tmp_path / "out.png"), "--img-size", "96")
    assert r.returncode == 0, r.stderr
    with Image.open(tmp_path / "out.png") as im:
        out = np.asarray(im)
    assert im.mode == "L" and out.shape == (50, 70) and not out.any()


def test_cli_bench_and_train(tmp_path):
    r = _cli("bench", "--config", "unext-s", "--size", "96", "--n", "2", "--warmup", "0")
    rep = json.loads(r.stdout)
    assert r.returncode == 0 and len(rep["runs_ms"]) == 2 and rep["mean_ms"] > 0
    out = tmp_path / "run" / "s.ckpt"
    r = _cli("train", "--synth", "5", "--config", "unext-s", "--img-size", "96", "--epochs", "1",
             "--folds", "1", "--out", str(out))
    assert r.returncode == 0, r.stderr
    assert load_checkpoint(out).config == CANONICAL["unext-s"]
    assert (tmp_path / "run" / "s_folds" / "fold0_log.csv").exists()
    assert "f1" in json.loads((tmp_path / "run" / "s.json").read_text())
