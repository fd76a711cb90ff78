"""JSON configs, the binary weights container and binary PPM/PGM images.

Weights container layout (all integers little-endian)::

    magic      8 bytes   b"UCNW0001"
    version    uint32    1
    length     uint32    byte length of the manifest
    manifest   UTF-8 JSON {"config": {...}, "tensors": [{"name", "shape", "offset"}, ...]}
    payload    float32 little-endian, tensor i at byte ``offset`` from payload start
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .model import Model, ModelConfig, build_model
from .rfa import ConfigError, RfaConfig
from .tensor import Rng, resolve_dtype

MAGIC = b"UCNW0001"
VERSION = 1

_MODEL_KEYS = {"stage_channels", "stage_depths", "ffn_ratio", "num_classes", "layer_scale_init"}
_RFA_KEYS = {"layer_count", "schedule", "small_kernel", "dis_topology", "amp_projection"}
_TOP_KEYS = {"model", "rfa", "seed"}


class ConfigParseError(ValueError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        where = f"line {line}, column {column}: " if line is not None else ""
        super().__init__(where + message)
        self.line, self.column = line, column


class WeightsError(ValueError):
    """Weights file is corrupt, truncated or does not fit the target model."""


class ImageFormatError(ValueError):
    """Malformed, truncated or unsupported PPM/PGM data."""


def _reject_unknown(section: str, obj: dict, allowed: set[str]) -> None:
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ConfigError(f"{section}.{unknown[0]}" if section else unknown[0], "unknown key")


def _int(field: str, v: Any) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(field, f"expected an integer, got {v!r}")
    return v


def _real(field: str, v: Any) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(field, f"expected a number, got {v!r}")
    return float(v)


def _bool(field: str, v: Any) -> bool:
    if not isinstance(v, bool):
        raise ConfigError(field, f"must be true or false, got {v!r}")
    return v


def _int_list(field: str, v: Any) -> tuple[int, ...]:
    if not isinstance(v, list):
        raise ConfigError(field, f"expected a list of integers, got {v!r}")
    return tuple(_int(f"{field}[{i}]", x) for i, x in enumerate(v))


def parse_config(text: str) -> tuple[ModelConfig, RfaConfig, int]:
    """Parse and validate a JSON config; returns (model config, RFA template, seed)."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigParseError(e.msg, e.lineno, e.colno) from None
    if not isinstance(doc, dict):
        raise ConfigParseError("top level must be a JSON object")
    _reject_unknown("", doc, _TOP_KEYS)
    if "model" not in doc:
        raise ConfigError("model", "missing section")
    model = doc["model"]
    rfa = doc.get("rfa", {})
    if not isinstance(model, dict):
        raise ConfigError("model", "must be an object")
    if not isinstance(rfa, dict):
        raise ConfigError("rfa", "must be an object")
    _reject_unknown("model", model, _MODEL_KEYS)
    _reject_unknown("rfa", rfa, _RFA_KEYS)
    seed = _int("seed", doc.get("seed", 0))
    if not 0 <= seed < 2**64:
        raise ConfigError("seed", f"must be an unsigned 64-bit integer, got {seed}")

    for key in ("stage_channels", "stage_depths"):
        if key not in model:
            raise ConfigError(f"model.{key}", "missing")
    channels = _int_list("model.stage_channels", model["stage_channels"])
    depths = _int_list("model.stage_depths", model["stage_depths"])

    layer_count = _int("rfa.layer_count", rfa.get("layer_count", 3))
    schedule = rfa.get("schedule", "formula")
    if schedule == "formula":
        mode, kernels = "formula", None
    elif isinstance(schedule, list):
        mode, kernels = "explicit", _int_list("rfa.schedule", schedule)
    else:
        raise ConfigError("rfa.schedule", f"must be \"formula\" or a list of kernel sizes, got {schedule!r}")
    try:
        rfa_cfg = RfaConfig(
            layer_count=layer_count,
            channels=channels[0] if channels else layer_count + 1,
            large_kernels=kernels,
            small_kernel=_int("rfa.small_kernel", rfa.get("small_kernel", 3)),
            schedule_mode=mode,
            dis_topology=rfa.get("dis_topology", "sum"),
            amp_projection=_bool("rfa.amp_projection", rfa.get("amp_projection", False)),
        )
    except ConfigError as e:
        if e.field.startswith("rfa."):
            raise
        field = "schedule" if e.field in ("large_kernels", "schedule_mode") else e.field
        raise ConfigError(f"rfa.{field}" if field != "channels" else "model.stage_channels",
                          e.message) from None
    try:
        model_cfg = ModelConfig(
            stage_channels=channels,
            stage_depths=depths,
            rfa=rfa_cfg,
            ffn_ratio=_real("model.ffn_ratio", model.get("ffn_ratio", 4.0)),
            num_classes=_int("model.num_classes", model.get("num_classes", 1000)),
            layer_scale_init=_real("model.layer_scale_init", model.get("layer_scale_init", 1e-6)),
        )
    except ConfigError as e:
        if e.field.startswith("model."):
            raise
        raise ConfigError(f"model.{e.field}", e.message) from None
    return model_cfg, rfa_cfg, seed


def config_to_dict(cfg: ModelConfig, seed: int = 0) -> dict:
    r = cfg.rfa
    return {
        "model": {
            "stage_channels": list(cfg.stage_channels),
            "stage_depths": list(cfg.stage_depths),
            "ffn_ratio": cfg.ffn_ratio,
            "num_classes": cfg.num_classes,
            "layer_scale_init": cfg.layer_scale_init,
        },
        "rfa": {
            "layer_count": r.layer_count,
            "schedule": "formula" if r.schedule_mode == "formula" else list(r.large_kernels),
            "small_kernel": r.small_kernel,
            "dis_topology": r.dis_topology,
            "amp_projection": r.amp_projection,
        },
        "seed": seed,
    }


def dump_config(cfg: ModelConfig, seed: int = 0) -> str:
    return json.dumps(config_to_dict(cfg, seed), indent=2) + "\n"


def load_config(path: str | Path) -> tuple[ModelConfig, RfaConfig, int]:
    return parse_config(Path(path).read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# weights


def save_weights(m: Model, path: str | Path) -> None:
    """Write all parameters as little-endian float32."""
    entries, blobs, offset = [], [], 0
    for name, arr in m.params.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(data)
        offset += len(data)
    manifest = json.dumps({"config": config_to_dict(m.config), "tensors": entries}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(manifest)))
        f.write(manifest)
        for b in blobs:
            f.write(b)


def load_weights(path: str | Path, config: ModelConfig | None = None, dtype=None) -> Model:
    """Read a weights file; when ``config`` is given every tensor must match it."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise WeightsError(f"{path}: bad magic, not a UCNW weights file")
    version, mlen = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise WeightsError(f"{path}: unsupported version {version}")
    if len(raw) < 16 + mlen:
        raise WeightsError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[16:16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise WeightsError(f"{path}: corrupt manifest ({e})") from None
    payload = raw[16 + mlen:]

    if config is None:
        config, _, _ = parse_config(json.dumps(manifest["config"]))
    expected = {k: v.shape for k, v in build_model(config, Rng(0)).params.items()}
    tensors = manifest["tensors"]
    names = [t["name"] for t in tensors]
    missing = [k for k in expected if k not in names]
    extra = [k for k in names if k not in expected]
    if missing or extra:
        raise WeightsError(f"{path}: parameter set differs from config (missing {missing[:3]}, unexpected {extra[:3]})")

    dtype = resolve_dtype(dtype)
    params, end = {}, 0
    for t in sorted(tensors, key=lambda t: t["offset"]):
        shape = tuple(t["shape"])
        if shape != expected[t["name"]]:
            raise WeightsError(f"{t['name']}: file shape {shape} != model shape {expected[t['name']]}")
        if t["offset"] < end:
            raise WeightsError(f"{t['name']}: overlapping offset {t['offset']}")
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        end = t["offset"] + nbytes
        if end > len(payload):
            raise WeightsError(f"{path}: truncated payload at {t['name']}")
        params[t["name"]] = np.frombuffer(payload, dtype="<f4", count=nbytes // 4,
                                          offset=t["offset"]).reshape(shape).astype(dtype)
    if end != len(payload):
        raise WeightsError(f"{path}: payload has {len(payload) - end} trailing bytes")
    return Model(config, {k: params[k] for k in expected})


# --------------------------------------------------------------------------
# images


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """First ``count`` whitespace-separated header tokens (skipping # comments)
    and the index of the single whitespace byte that ends the header."""
    tokens, i, n = [], 0, len(data)
    while len(tokens) < count:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i < n and data[i:i + 1] == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not data[i:i + 1].isspace() and data[i:i + 1] != b"#":
            i += 1
        if start == i:
            raise ImageFormatError("truncated header")
        tokens.append(data[start:i])
    if i >= n or not data[i:i + 1].isspace():
        raise ImageFormatError("header must end with a single whitespace byte")
    return tokens, i + 1


def read_ppm(path: str | Path) -> np.ndarray:
    """Binary P6 image as a (1, 3, H, W) float64 array scaled to [0, 1]."""
    data = Path(path).read_bytes()
    if data[:2] != b"P6":
        raise ImageFormatError(f"{path}: unsupported format {data[:2]!r}, only binary P6 is read")
    tokens, start = _header_tokens(data, 4)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ImageFormatError(f"{path}: malformed header {tokens!r}") from None
    if w < 1 or h < 1:
        raise ImageFormatError(f"{path}: bad extent {w}x{h}")
    if maxval != 255:
        raise ImageFormatError(f"{path}: unsupported maxval {maxval}, only 255")
    body = data[start:]
    if len(body) < 3 * w * h:
        raise ImageFormatError(f"{path}: truncated payload ({len(body)} of {3 * w * h} bytes)")
    pix = np.frombuffer(body, dtype=np.uint8, count=3 * w * h).reshape(h, w, 3)
    return (pix.transpose(2, 0, 1)[None].astype(np.float64)) / 255.0


def write_ppm(rgb: np.ndarray, path: str | Path) -> None:
    """Write an (H, W, 3) uint8 array as binary P6."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.tobytes())


def write_pgm(grid: np.ndarray, path: str | Path) -> None:
    """Write an (H, W) uint8 grid as binary P5."""
    grid = np.asarray(grid)
    if grid.ndim != 2 or grid.dtype != np.uint8:
        raise ImageFormatError(f"PGM grid must be 2-D uint8, got {grid.dtype} {grid.shape}")
    h, w = grid.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(grid).tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise ImageFormatError(f"{path}: unsupported format {data[:2]!r}, only binary P5 is read")
    tokens, start = _header_tokens(data, 4)
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ImageFormatError(f"{path}: unsupported maxval {maxval}")
    body = data[start:]
    if len(body) < w * h:
        raise ImageFormatError(f"{path}: truncated payload")
    return np.frombuffer(body, dtype=np.uint8, count=w * h).reshape(h, w).copy()


def load_image_dir(directory: str | Path, size: int) -> list[np.ndarray]:
    """Readable P6 images in name order, center-cropped to ``size`` x ``size``."""
    images = []
    for p in sorted(Path(directory).glob("*.ppm")):
        try:
            im = read_ppm(p)
        except (ImageFormatError, OSError):
            continue
        h, w = im.shape[2:]
        if h < size or w < size:
            continue
        top, left = (h - size) // 2, (w - size) // 2
        images.append(im[:, :, top:top + size, left:left + size])
    return images
