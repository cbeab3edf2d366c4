"""NLRT tensor container plus adapter (de)serialization.

Layout::

    b"NLRT" | u32 version | u64 header_len | JSON header | zero pad to 64 | payload

The header maps tensor name -> {"dtype", "shape", "offset", "length"} with
offsets relative to the payload start; the optional ``"__meta__"`` key holds
a free-form JSON document. Tensors are laid out in name-sorted order and the
header is serialized with sorted keys, so equal logical content always
produces equal bytes. All integers are little-endian.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from nullora.adapter import AdapterLayer, Mode, verify_invariants

MAGIC = b"NLRT"
VERSION = 1
ALIGN = 64
META_KEY = "__meta__"
_PREAMBLE = struct.Struct("<4sIQ")
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
ADAPTER_FORMAT_VERSION = 1


class FormatError(ValueError):
    """Base class for malformed NLRT files."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class DuplicateNameError(FormatError):
    pass


class ShapeMismatchError(FormatError):
    pass


class NonFiniteError(FormatError):
    pass


class InvalidNameError(FormatError):
    pass


class AdapterError(ValueError):
    """Adapter file does not fit the checkpoint it is loaded against."""


class AdapterInvariantError(AdapterError):
    pass


@dataclass
class TensorFile:
    entries: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict | None = None
    # names whose f32 payload was widened to f64 by read_tensor_file(upcast=True)
    upcast: list[str] = field(default_factory=list)


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype == np.float64:
        return "f64"
    if arr.dtype == np.float32:
        return "f32"
    raise FormatError(f"unsupported dtype {arr.dtype}; only f32/f64 are stored")


def _check_name(name: str) -> None:
    if not isinstance(name, str) or not name or name == META_KEY:
        raise InvalidNameError(f"invalid tensor name {name!r}")
    if any(ord(ch) < 0x20 or ord(ch) == 0x7F for ch in name):
        raise InvalidNameError(f"tensor name {name!r} contains control characters")


def encode(tf: TensorFile) -> bytes:
    header: dict = {}
    payloads = []
    offset = 0
    for name in sorted(tf.entries):
        _check_name(name)
        arr = np.asarray(tf.entries[name])
        if arr.ndim != 2:
            raise ShapeMismatchError(f"tensor {name!r} must be 2-D, got shape {arr.shape}")
        tag = _dtype_tag(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        header[name] = {"dtype": tag, "shape": list(arr.shape), "offset": offset, "length": len(raw)}
        payloads.append(raw)
        offset += len(raw)
    if tf.metadata is not None:
        header[META_KEY] = tf.metadata
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()
    pad = -(_PREAMBLE.size + len(hbytes)) % ALIGN
    return b"".join([_PREAMBLE.pack(MAGIC, VERSION, len(hbytes)), hbytes, b"\0" * pad, *payloads])


def _no_duplicates(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise DuplicateNameError(f"duplicate key {k!r} in header")
        out[k] = v
    return out


def decode(buf: bytes, upcast: bool = False) -> TensorFile:
    if len(buf) < _PREAMBLE.size:
        raise TruncatedError(f"file is {len(buf)} bytes, shorter than the preamble")
    magic, version, hlen = _PREAMBLE.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported NLRT version {version}")
    hend = _PREAMBLE.size + hlen
    if len(buf) < hend:
        raise TruncatedError("header extends past end of file")
    try:
        header = json.loads(buf[_PREAMBLE.size : hend].decode(), object_pairs_hook=_no_duplicates)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}") from exc
    if not isinstance(header, dict):
        raise FormatError("header must be a JSON object")
    start = hend + (-hend % ALIGN)
    tf = TensorFile(metadata=header.pop(META_KEY, None))
    for name in sorted(header):
        _check_name(name)
        spec = header[name]
        try:
            dtype = _DTYPES[spec["dtype"]]
            rows, cols = (int(x) for x in spec["shape"])
            off, length = int(spec["offset"]), int(spec["length"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"tensor {name!r}: malformed header entry {spec!r}") from exc
        if rows < 0 or cols < 0 or length != rows * cols * dtype.itemsize:
            raise ShapeMismatchError(
                f"tensor {name!r}: shape {rows}x{cols} {spec['dtype']} needs "
                f"{rows * cols * dtype.itemsize} bytes, header says {length}"
            )
        if off < 0 or start + off + length > len(buf):
            raise TruncatedError(f"tensor {name!r}: payload truncated")
        arr = np.frombuffer(buf, dtype=dtype, count=rows * cols, offset=start + off).reshape(rows, cols)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"tensor {name!r} contains non-finite values")
        arr = arr.astype(dtype.newbyteorder("="), copy=True)
        if upcast and arr.dtype == np.float32:
            arr = arr.astype(np.float64)
            tf.upcast.append(name)
        tf.entries[name] = arr
    return tf


def write_tensor_file(path, tf: TensorFile) -> None:
    """Write atomically: temp file in the target directory, then rename."""
    data = encode(tf)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_tensor_file(path, upcast: bool = False) -> TensorFile:
    return decode(Path(path).read_bytes(), upcast=upcast)


# -- adapters ---------------------------------------------------------------


@dataclass
class LayerMeta:
    name: str
    r: int
    d_out: int
    d_in: int
    skipped: bool = False
    lora_alpha: float | None = None


@dataclass
class AdapterMeta:
    mode: str
    tau: float
    seed: int
    layers: list[LayerMeta] = field(default_factory=list)
    format_version: int = ADAPTER_FORMAT_VERSION

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> AdapterMeta:
        try:
            layers = [LayerMeta(**entry) for entry in doc["layers"]]
            meta = cls(
                mode=doc["mode"],
                tau=float(doc["tau"]),
                seed=int(doc["seed"]),
                layers=layers,
                format_version=int(doc["format_version"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise AdapterError(f"malformed adapter metadata: {exc}") from exc
        if meta.format_version != ADAPTER_FORMAT_VERSION:
            raise AdapterError(f"unsupported adapter format version {meta.format_version}")
        Mode(meta.mode)
        return meta


_FIELDS = ("B", "A", "s", "B_f", "A_f", "U_hat")


def adapter_tensors(layers: list[AdapterLayer]) -> dict[str, np.ndarray]:
    out = {}
    for layer in layers:
        for key in _FIELDS:
            val = getattr(layer, key)
            if val is None:
                continue
            out[f"{layer.name}.{key}"] = val.reshape(1, -1) if key == "s" else val
    return out


def save_adapter(path, layers: list[AdapterLayer], meta: AdapterMeta) -> None:
    listed = {m.name for m in meta.layers if not m.skipped}
    missing = [layer.name for layer in layers if layer.name not in listed]
    if missing:
        raise AdapterError(f"layers {missing} are not listed in the adapter metadata")
    write_tensor_file(path, TensorFile(entries=adapter_tensors(layers), metadata=meta.to_json()))


def load_adapter(
    path, checkpoint: dict[str, np.ndarray], check: bool = True
) -> tuple[list[AdapterLayer], AdapterMeta]:
    """Rebuild adapter layers against ``checkpoint`` (name -> W0).

    With ``check`` the frozen bases are verified against W0; a mismatch
    means the adapter was built for a different checkpoint or is corrupt.
    """
    tf = read_tensor_file(path)
    if tf.metadata is None:
        raise AdapterError(f"{path}: no adapter metadata")
    meta = AdapterMeta.from_json(tf.metadata)
    mode = Mode(meta.mode)
    layers = []
    for lm in meta.layers:
        if lm.skipped:
            continue
        if lm.name not in checkpoint:
            raise AdapterError(f"layer {lm.name!r} not found in checkpoint")
        W0 = np.asarray(checkpoint[lm.name], dtype=np.float64)
        if W0.shape != (lm.d_out, lm.d_in):
            raise AdapterError(
                f"layer {lm.name!r}: checkpoint shape {W0.shape} != adapter ({lm.d_out}, {lm.d_in})"
            )

        def get(key, required=True, prefix=lm.name):
            full = f"{prefix}.{key}"
            if full not in tf.entries:
                if required:
                    raise AdapterError(f"missing tensor {full!r}")
                return None
            return np.asarray(tf.entries[full], dtype=np.float64)

        layer = AdapterLayer(
            name=lm.name,
            W0=W0,
            mode=mode,
            r=lm.r,
            B_f=get("B_f"),
            A_f=get("A_f"),
            B=get("B"),
            A=get("A"),
            s=get("s").reshape(-1),
            U_hat=get("U_hat", required=mode is Mode.NULL_LORA),
            lora_alpha=lm.lora_alpha,
        )
        _check_shapes(layer)
        if check:
            report = verify_invariants(layer)
            bad = [
                k
                for k in ("frozen_alignment", "frozen_orthonormality", "projection_fixes_frozen")
                if report.checks[k]["applicable"] and not report.checks[k]["pass"]
            ]
            if bad:
                details = ", ".join(f"{k}={report.checks[k]['measured']:.3e}" for k in bad)
                raise AdapterInvariantError(f"layer {lm.name!r} fails on load: {details}")
        layers.append(layer)
    return layers, meta


def _check_shapes(layer: AdapterLayer) -> None:
    d_out, d_in = layer.W0.shape
    width = layer.r if layer.mode is Mode.VANILLA_LORA else layer.r // 2
    expected = {"B": (d_out, width), "A": (width, d_in)}
    if layer.mode is not Mode.VANILLA_LORA:
        expected.update({"B_f": (d_out, width), "A_f": (width, d_in), "s": (layer.r,)})
    if layer.mode is Mode.NULL_LORA:
        expected["U_hat"] = (d_out, width)
    for key, shape in expected.items():
        got = getattr(layer, key).shape
        if got != shape:
            raise AdapterError(f"layer {layer.name!r}: {key} has shape {got}, expected {shape}")
    if layer.mode is Mode.VANILLA_LORA and not (layer.lora_alpha and math.isfinite(layer.lora_alpha)):
        raise AdapterError(f"layer {layer.name!r}: missing lora_alpha")
