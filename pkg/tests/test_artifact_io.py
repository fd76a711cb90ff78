import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uniconvnet.artifact_io import (
    MAGIC,
    ConfigParseError,
    ImageFormatError,
    WeightsError,
    config_to_dict,
    dump_config,
    load_image_dir,
    load_weights,
    parse_config,
    read_pgm,
    read_ppm,
    save_weights,
    write_pgm,
    write_ppm,
)
from uniconvnet.model import build_model, model_forward, tiny_config
from uniconvnet.rfa import ConfigError, RfaConfig
from uniconvnet.tensor import Rng, Tensor


def doc(**rfa):
    d = config_to_dict(tiny_config())
    d["rfa"].update(rfa)
    return d


def test_formula_schedule_expands():
    model, rfa, seed = parse_config(json.dumps(doc()))
    assert rfa.large_kernels == (7, 9, 11)
    assert model.stage_channels == (8, 16, 24, 32)
    assert seed == 0


def test_explicit_schedule():
    _, rfa, _ = parse_config(json.dumps(doc(schedule=[5, 7, 9])))
    assert rfa.schedule_mode == "explicit" and rfa.large_kernels == (5, 7, 9)


def test_indivisible_channels_name_the_field():
    d = doc()
    d["model"]["stage_channels"] = [10, 16, 24, 32]
    with pytest.raises(ConfigError) as e:
        parse_config(json.dumps(d))
    assert e.value.field == "model.stage_channels"


@pytest.mark.parametrize("where", ["top", "model", "rfa"])
def test_unknown_key_rejected(where):
    d = doc()
    target = d if where == "top" else d[where]
    target["dropout"] = 0.1
    with pytest.raises(ConfigError) as e:
        parse_config(json.dumps(d))
    assert "dropout" in e.value.field


@pytest.mark.parametrize("patch,field", [
    ({"schedule": "linear"}, "rfa.schedule"),
    ({"schedule": [7, 8, 11]}, "rfa.schedule"),
    ({"layer_count": "3"}, "rfa.layer_count"),
    ({"amp_projection": 1}, "rfa.amp_projection"),
    ({"small_kernel": 2.5}, "rfa.small_kernel"),
    ({"small_kernel": 4}, "rfa.small_kernel"),
    ({"dis_topology": "product"}, "rfa.dis_topology"),
])
def test_rfa_field_errors(patch, field):
    with pytest.raises(ConfigError) as e:
        parse_config(json.dumps(doc(**patch)))
    assert e.value.field == field


def test_syntax_error_has_position():
    with pytest.raises(ConfigParseError) as e:
        parse_config('{\n  "model": {\n    "stage_channels": [8, 16,, 24]\n  }\n}')
    assert e.value.line == 3 and e.value.column > 0


def test_seed_range():
    d = doc()
    d["seed"] = 2**64
    with pytest.raises(ConfigError):
        parse_config(json.dumps(d))


def test_config_round_trip():
    cfg = tiny_config(rfa=RfaConfig(layer_count=3, channels=8, dis_topology="sequential", amp_projection=True))
    again, _, seed = parse_config(dump_config(cfg, seed=42))
    assert again == cfg and seed == 42


def test_weights_round_trip(tmp_path):
    m = build_model(tiny_config(), Rng(1))
    save_weights(m, tmp_path / "w.bin")
    back = load_weights(tmp_path / "w.bin")
    assert list(back.params) == list(m.params)
    x = Tensor(Rng(2).uniform((1, 3, 32, 32)).astype(np.float32))
    assert model_forward(back, x).data.tobytes() == model_forward(m, x).data.tobytes()


def test_weights_header(tmp_path):
    save_weights(build_model(tiny_config(), Rng(1)), tmp_path / "w.bin")
    raw = (tmp_path / "w.bin").read_bytes()
    assert raw[:8] == MAGIC
    version, mlen = struct.unpack("<II", raw[8:16])
    manifest = json.loads(raw[16:16 + mlen])
    assert version == 1
    assert manifest["tensors"][0]["name"] == "stem.conv1.weight"


def test_weights_mismatched_config_names_parameter(tmp_path):
    save_weights(build_model(tiny_config(), Rng(1)), tmp_path / "w.bin")
    with pytest.raises(WeightsError, match="stem.conv1.weight"):
        load_weights(tmp_path / "w.bin", tiny_config(stage_channels=(12, 16, 24, 32)))


def test_weights_truncated(tmp_path):
    save_weights(build_model(tiny_config(), Rng(1)), tmp_path / "w.bin")
    raw = (tmp_path / "w.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-7])
    with pytest.raises(WeightsError, match="truncated"):
        load_weights(tmp_path / "t.bin")
    (tmp_path / "x.bin").write_bytes(raw + b"\0\0\0\0")
    with pytest.raises(WeightsError, match="trailing"):
        load_weights(tmp_path / "x.bin")


def test_weights_bad_magic_and_version(tmp_path):
    save_weights(build_model(tiny_config(), Rng(1)), tmp_path / "w.bin")
    raw = bytearray((tmp_path / "w.bin").read_bytes())
    (tmp_path / "m.bin").write_bytes(b"NOTAWGHT" + raw[8:])
    with pytest.raises(WeightsError, match="magic"):
        load_weights(tmp_path / "m.bin")
    raw[8:12] = struct.pack("<I", 9)
    (tmp_path / "v.bin").write_bytes(bytes(raw))
    with pytest.raises(WeightsError, match="version"):
        load_weights(tmp_path / "v.bin")


def test_ppm_all_white(tmp_path):
    write_ppm(np.full((2, 2, 3), 255, np.uint8), tmp_path / "w.ppm")
    x = read_ppm(tmp_path / "w.ppm")
    assert x.shape == (1, 3, 2, 2)
    np.testing.assert_array_equal(x, np.ones((1, 3, 2, 2)))


def test_ppm_channel_order(tmp_path):
    rgb = np.zeros((1, 1, 3), np.uint8)
    rgb[0, 0] = (255, 0, 51)
    write_ppm(rgb, tmp_path / "c.ppm")
    np.testing.assert_allclose(read_ppm(tmp_path / "c.ppm").ravel(), [1.0, 0.0, 0.2])


def test_ppm_with_comment(tmp_path):
    (tmp_path / "c.ppm").write_bytes(b"P6\n# made by hand\n1 1\n255\n\x00\xff\x00")
    np.testing.assert_array_equal(read_ppm(tmp_path / "c.ppm").ravel(), [0.0, 1.0, 0.0])


@pytest.mark.parametrize("content,match", [
    (b"P3\n1 1\n255\n0 0 0\n", "unsupported format"),
    (b"P6\n1 1\n65535\n\0\0\0\0\0\0", "maxval"),
    (b"P6\n2 2\n255\n\0\0\0", "truncated"),
    (b"P6\nx 2\n255\n\0\0\0", "malformed"),
])
def test_ppm_errors(tmp_path, content, match):
    (tmp_path / "bad.ppm").write_bytes(content)
    with pytest.raises(ImageFormatError, match=match):
        read_ppm(tmp_path / "bad.ppm")


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**32))
def test_pgm_round_trip(tmp_path_factory, h, w, seed):
    grid = Rng(seed).integers(0, 256, (h, w)).astype(np.uint8)
    path = tmp_path_factory.mktemp("pgm") / "g.pgm"
    write_pgm(grid, path)
    raw = path.read_bytes()
    header = f"P5\n{w} {h}\n255\n".encode()
    assert raw == header + grid.tobytes()
    assert read_pgm(path).tobytes() == grid.tobytes()


def test_pgm_rejects_non_uint8(tmp_path):
    with pytest.raises(ImageFormatError):
        write_pgm(np.zeros((2, 2)), tmp_path / "g.pgm")


def test_image_dir_crops_and_skips(tmp_path):
    big = np.arange(40 * 36 * 3, dtype=np.uint32).reshape(40, 36, 3) % 256
    write_ppm(big.astype(np.uint8), tmp_path / "a.ppm")
    write_ppm(np.zeros((16, 16, 3), np.uint8), tmp_path / "b_small.ppm")
    (tmp_path / "c_broken.ppm").write_bytes(b"P6\n4 4\n255\n")
    (tmp_path / "notes.txt").write_text("ignored")
    images = load_image_dir(tmp_path, 32)
    assert len(images) == 1
    np.testing.assert_array_equal(images[0][0], big[4:36, 2:34].transpose(2, 0, 1) / 255.0)
