"""Binary model files.

Layout, all integers little-endian uint32 and all reals little-endian
float32:

    magic  b"STSW1"
    header_len, header (UTF-8 text block, versioned key = value lines)
    per parameter, in declaration order:
        name_len, name bytes, rank, dims[rank], data (row-major)

The header carries the network spec (variant, fusion layer, width scale,
input size) and the stored channel means.
"""

from __future__ import annotations

import struct
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import FormatError
from .network import Model, NetworkSpec, build_network

MAGIC = b"STSW1"
HEADER_VERSION = "stsw-header v1"


def _header_text(model: Model) -> str:
    spec = model.spec
    lines = [
        HEADER_VERSION,
        f"variant = {spec.variant}",
        f"fusion_layer = {spec.fusion_layer}",
        f"width_scale = {spec.width_scale}",
        f"input_width = {spec.input_size[0]}",
        f"input_height = {spec.input_size[1]}",
        "appearance_mean = " + ",".join(repr(float(v)) for v in model.appearance_mean),
        "flow_mean = " + ",".join(repr(float(v)) for v in model.flow_mean),
    ]
    return "\n".join(lines) + "\n"


def _parse_header(text: str):
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != HEADER_VERSION:
        raise FormatError(f"unsupported model header version: {lines[0] if lines else '<empty>'}")
    kv = {}
    for ln in lines[1:]:
        key, _, value = ln.partition("=")
        kv[key.strip()] = value.strip()
    try:
        spec = NetworkSpec(
            variant=kv["variant"],
            fusion_layer=int(kv["fusion_layer"]),
            width_scale=Fraction(kv["width_scale"]),
            input_size=(int(kv["input_width"]), int(kv["input_height"])),
        )
        app_mean = [float(v) for v in kv["appearance_mean"].split(",")]
        flow_mean = [float(v) for v in kv["flow_mean"].split(",")]
    except KeyError as exc:
        raise FormatError(f"model header missing key {exc}") from exc
    return spec, app_mean, flow_mean


def save_model(model: Model, path) -> None:
    path = Path(path)
    header = _header_text(model).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for name, array in model.parameters():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", array.ndim))
            fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
            fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def _read_exact(fh, n, path, what):
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"{path}: truncated while reading {what}")
    return data


def load_model(path) -> Model:
    """Rebuild a model from disk; parameters load as float32."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        (header_len,) = struct.unpack("<I", _read_exact(fh, 4, path, "header length"))
        header = _read_exact(fh, header_len, path, "header").decode("utf-8")
        spec, app_mean, flow_mean = _parse_header(header)

        model = build_network(spec, seed=0, dtype=np.float32)
        model.set_means(app_mean, flow_mean)
        for name, array in model.parameters():
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, path, "record name length"))
            stored = _read_exact(fh, name_len, path, "record name").decode("utf-8")
            if stored != name:
                raise FormatError(f"{path}: expected parameter {name!r}, found {stored!r}")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, path, "rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, path, "dims"))
            if dims != array.shape:
                raise FormatError(f"{path}: {name} has dims {dims}, expected {array.shape}")
            raw = _read_exact(fh, 4 * int(np.prod(dims)), path, f"data of {name}")
            array[...] = np.frombuffer(raw, dtype="<f4").reshape(dims)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after last parameter record")
    return model


def model_file_size(model: Model) -> int:
    """Exact on-disk byte size of save_model's output."""
    size = len(MAGIC) + 4 + len(_header_text(model).encode("utf-8"))
    for name, array in model.parameters():
        size += 4 + len(name.encode("utf-8")) + 4 + 4 * array.ndim + 4 * array.size
    return size
