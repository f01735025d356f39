"""Binary frame/checkpoint formats and key=value configuration files.

Frame file (little-endian)::

    "D2SF" | u32 version=1 | u32 K | u32 D | u32 flags
    f32[K*D] descriptors | f32[K*2] keypoints
    if flags & 1: f32[K*3] coords | u8[K] reliability
    if flags & 2: f64[12] pose (row-major R, then t) | f64[4] fx fy cx cy
    u32 crc32 of everything before it

An all-zero pose block means "intrinsics only, pose unknown".

Checkpoint file::

    "D2SM" | u32 version=1
    u32 D | u32 L | u32 H | u32 n_widths | u32[n_widths] widths | f64 beta
    u32 n_tensors | per tensor: u16 name_len, name, u8 ndim, u32[ndim] dims
    f32[...] parameter payload, tensors in index order
    u8 has_state | if set: u64 step, f32 Adam first moments, f32 second moments
    u32 crc32
"""
from __future__ import annotations

import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .exceptions import ArchitectureMismatch, BadConfig, FormatError, IoError
from .frames import Frame
from .geometry import CameraPose, Intrinsics
from .network import Architecture, ModelParams

FRAME_MAGIC = b"D2SF"
MODEL_MAGIC = b"D2SM"
VERSION = 1
HAS_LABELS = 1
HAS_POSE = 2
FRAME_SUFFIX = ".d2sf"


def atomic_write(path, data):
    """Write bytes via a temporary file and rename."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _read_bytes(path):
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated while reading {what}", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), what))

    def array(self, dtype, count, what):
        dt = np.dtype(dtype).newbyteorder("<")
        return np.frombuffer(self.take(dt.itemsize * count, what), dtype=dt).astype(np.dtype(dtype))


def _check_crc(data):
    if len(data) < 4:
        raise FormatError("file too short for checksum", 0)
    body, (stored,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != stored:
        raise FormatError("checksum mismatch", len(data) - 4)
    return body


# ---------------------------------------------------------------------------
# frames
# ---------------------------------------------------------------------------

def encode_frame(frame):
    K, D = frame.descriptors.shape
    flags = (HAS_LABELS if frame.has_labels else 0) | (HAS_POSE if frame.intrinsics is not None else 0)
    parts = [FRAME_MAGIC, struct.pack("<IIII", VERSION, K, D, flags),
             np.ascontiguousarray(frame.descriptors, "<f4").tobytes(),
             np.ascontiguousarray(frame.keypoints, "<f4").tobytes()]
    if flags & HAS_LABELS:
        parts.append(np.ascontiguousarray(frame.gt_coords, "<f4").tobytes())
        parts.append(np.ascontiguousarray(frame.gt_reliability, np.uint8).tobytes())
    if flags & HAS_POSE:
        pose = frame.pose.to_array() if frame.pose is not None else np.zeros(12)
        parts.append(np.asarray(pose, "<f8").tobytes())
        parts.append(np.asarray(frame.intrinsics.to_array(), "<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def _frame_length(K, D, flags):
    n = 20 + 4 * K * D + 8 * K
    if flags & HAS_LABELS:
        n += 12 * K + K
    if flags & HAS_POSE:
        n += 16 * 8
    return n + 4


def decode_frame(data, frame_id=""):
    r = _Reader(data)
    if r.take(4, "magic") != FRAME_MAGIC:
        raise FormatError("bad frame magic", 0)
    (version,) = r.unpack("I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported frame version {version}", 4)
    K, D, flags = r.unpack("III", "header")
    if K < 1:
        raise FormatError("frame has no descriptors", 8)
    if D < 1:
        raise FormatError("descriptor dimension is zero", 12)
    if flags & ~(HAS_LABELS | HAS_POSE):
        raise FormatError(f"unknown flag bits {flags:#x}", 16)
    expected = _frame_length(K, D, flags)
    if expected != len(data):
        raise FormatError(f"header implies {expected} bytes, file has {len(data)}", min(expected, len(data)))
    _check_crc(data)
    desc = r.array(np.float32, K * D, "descriptors").reshape(K, D)
    kp = r.array(np.float32, K * 2, "keypoints").reshape(K, 2)
    if not (np.all(np.isfinite(desc)) and np.all(np.isfinite(kp))):
        raise FormatError("non-finite descriptor or keypoint", 20)
    coords = rel = pose = k = None
    if flags & HAS_LABELS:
        coords = r.array(np.float32, K * 3, "coords").reshape(K, 3)
        at = r.pos
        rel = r.array(np.uint8, K, "reliability")
        if np.any(rel > 1):
            raise FormatError("reliability entries must be 0 or 1", at + int(np.argmax(rel > 1)))
    if flags & HAS_POSE:
        at = r.pos
        pose_arr = r.array(np.float64, 12, "pose")
        k_arr = r.array(np.float64, 4, "intrinsics")
        if np.any(pose_arr):
            pose = CameraPose.from_array(pose_arr)
            if not pose.is_valid(1e-6):
                raise FormatError("pose rotation is not orthonormal", at)
        try:
            k = Intrinsics.from_array(k_arr)
        except ValueError:
            raise FormatError("invalid intrinsics", at + 96) from None
    return Frame(desc, kp, coords, rel, pose, k, frame_id=frame_id)


def write_frame(path, frame):
    atomic_write(path, encode_frame(frame))


def read_frame(path):
    path = Path(path)
    return decode_frame(_read_bytes(path), frame_id=path.stem)


def write_frames(directory, frames):
    directory = Path(directory)
    for i, f in enumerate(frames):
        write_frame(directory / f"{f.frame_id or f'frame-{i:04d}'}{FRAME_SUFFIX}", f)


def read_frames(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise IoError(f"not a directory: {directory}")
    return [read_frame(p) for p in sorted(directory.glob(f"*{FRAME_SUFFIX}"))]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def encode_checkpoint(params, optimizer=None):
    a = params.arch
    parts = [MODEL_MAGIC, struct.pack("<IIIII", VERSION, a.descriptor_dim, a.num_layers,
                                      a.num_heads, len(a.head_widths))]
    parts.append(struct.pack(f"<{len(a.head_widths)}I", *a.head_widths))
    parts.append(struct.pack("<d", a.beta))
    parts.append(struct.pack("<I", len(params.tensors)))
    for name, t in params.tensors.items():
        raw = name.encode()
        parts.append(struct.pack(f"<H{len(raw)}sB", len(raw), raw, t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
    for t in params.tensors.values():
        parts.append(np.ascontiguousarray(t.value, "<f4").tobytes())
    if optimizer is None:
        parts.append(b"\x00")
    else:
        parts.append(b"\x01" + struct.pack("<Q", optimizer.step_count))
        for name in params.tensors:
            parts.append(np.ascontiguousarray(optimizer.m[name], "<f4").tobytes())
        for name in params.tensors:
            parts.append(np.ascontiguousarray(optimizer.v[name], "<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


@dataclass
class Checkpoint:
    params: ModelParams
    step: int = 0
    m: dict = None
    v: dict = None

    def optimizer(self):
        opt = dc.Adam(self.params.tensors)
        if self.m is not None:
            opt.step_count = self.step
            opt.m = {k: a.copy() for k, a in self.m.items()}
            opt.v = {k: a.copy() for k, a in self.v.items()}
        return opt


def decode_checkpoint(data, expected_arch=None):
    r = _Reader(data)
    if r.take(4, "magic") != MODEL_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    (version,) = r.unpack("I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    at = r.pos
    D, L, H, n_widths = r.unpack("IIII", "architecture")
    if n_widths > 64 or L > 1024:
        raise FormatError("implausible architecture block", at)
    widths = r.unpack(f"{n_widths}I", "head widths")
    (beta,) = r.unpack("d", "beta")
    try:
        arch = Architecture(D, L, H, widths, beta)
    except BadConfig as exc:
        raise FormatError(f"invalid architecture: {exc}", at) from None
    # validate the whole file before trusting any shapes
    _check_crc(data)
    expected = arch.tensor_shapes()
    at = r.pos
    (n_tensors,) = r.unpack("I", "tensor count")
    if n_tensors != len(expected):
        raise FormatError(f"{n_tensors} tensors listed, architecture needs {len(expected)}", at)
    index = []
    for want_name, want_shape in expected.items():
        at = r.pos
        (name_len,) = r.unpack("H", "name length")
        name = r.take(name_len, "tensor name").decode("utf-8", errors="replace")
        (ndim,) = r.unpack("B", "ndim")
        shape = r.unpack(f"{ndim}I", "tensor shape")
        if name != want_name or tuple(shape) != tuple(want_shape):
            raise FormatError(f"tensor {name}{shape} does not match architecture ({want_name}{want_shape})", at)
        index.append((name, shape))
    tensors = {}
    for name, shape in index:
        tensors[name] = dc.parameter(r.array(np.float32, int(np.prod(shape)), name).reshape(shape),
                                     name=name, dtype=np.float32)
    at = r.pos
    (has_state,) = r.unpack("B", "state flag")
    ckpt = Checkpoint(ModelParams(arch, tensors))
    if has_state == 1:
        (ckpt.step,) = r.unpack("Q", "optimizer step")
        ckpt.m = {n: r.array(np.float32, int(np.prod(s)), "moments").reshape(s) for n, s in index}
        ckpt.v = {n: r.array(np.float32, int(np.prod(s)), "moments").reshape(s) for n, s in index}
    elif has_state != 0:
        raise FormatError("bad optimizer-state flag", at)
    if r.pos != len(data) - 4:
        raise FormatError("trailing bytes after checkpoint payload", r.pos)
    if expected_arch is not None and expected_arch != arch:
        raise ArchitectureMismatch(f"checkpoint architecture {arch} != expected {expected_arch}")
    return ckpt


def save_checkpoint(path, params, optimizer=None):
    atomic_write(path, encode_checkpoint(params, optimizer))


def load_checkpoint(path, expected_arch=None):
    return decode_checkpoint(_read_bytes(path), expected_arch)


def load_params(path, expected_arch=None):
    return load_checkpoint(path, expected_arch).params


# ---------------------------------------------------------------------------
# key=value configuration
# ---------------------------------------------------------------------------

def parse_key_values(text):
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise BadConfig(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise BadConfig(f"line {lineno}: empty key")
        out[key] = value
    return out


def _coerce(value, default, key):
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value.replace("_", ""))
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            return tuple(float(v) if "." in v else int(v) for v in value.split(",") if v.strip())
        return value
    except ValueError:
        raise BadConfig(f"{key}: cannot parse {value!r}") from None


def build_config(cls, values, prefix=""):
    """Instantiate dataclass ``cls`` from string ``values`` (keys optionally prefixed)."""
    kwargs = {}
    defaults = cls()
    for f in fields(cls):
        key = prefix + f.name
        if key in values:
            kwargs[f.name] = _coerce(values[key], getattr(defaults, f.name), key)
    return cls(**kwargs)
