"""On-disk formats. Everything is little-endian and round-trips bit-exactly.

* Color frames: binary PPM (P6), 8-bit RGB.
* Masks: binary PGM (P5), 0/255.
* Flow: magic ``PIDGFLO1``, u32 width, u32 height, then row-major f32
  (du, dv) pairs, then row-major u8 validity (1 = valid).
* Depth: 16-byte header — magic ``PIDGDEP1``, u32 width, u32 height — then
  the row-major f64 grid.
* Checkpoint: magic ``PIDGCKPT``, u32 format version, u64 JSON-manifest
  length, the manifest (config, iteration, scalar state, array directory),
  then the arrays' raw bytes in directory order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .flow import FlowField

FLOW_MAGIC = b"PIDGFLO1"
DEPTH_MAGIC = b"PIDGDEP1"
CKPT_MAGIC = b"PIDGCKPT"
CKPT_VERSION = 1

_DTYPES = {"f8": "<f8", "i8": "<i8", "u1": "|u1"}


def write_ppm(path, image: np.ndarray) -> None:
    """Float image (H, W, 3) in [0, 1] -> binary P6 file."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("expected (H, W, 3) image")
    u8 = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        f.write(u8.tobytes())


def _read_pnm_header(f, magic: bytes):
    if f.read(2) != magic:
        raise ValueError(f"not a {magic.decode()} file")
    fields = []
    while len(fields) < 3:
        line = f.readline()
        if not line:
            raise ValueError("truncated header")
        fields += line.split(b"#")[0].split()
    w, h, maxval = (int(x) for x in fields[:3])
    if maxval != 255:
        raise ValueError("only 8-bit files supported")
    return w, h


def read_ppm(path) -> np.ndarray:
    """Binary P6 file -> float image (H, W, 3) in [0, 1]."""
    with open(path, "rb") as f:
        w, h = _read_pnm_header(f, b"P6")
        data = np.frombuffer(f.read(w * h * 3), dtype=np.uint8)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def write_pgm(path, mask: np.ndarray) -> None:
    """Binary mask (bool or 0/255 u8) -> binary P5 file."""
    m = np.asarray(mask)
    u8 = (m.astype(bool).astype(np.uint8) * 255) if m.dtype != np.uint8 else m
    with open(path, "wb") as f:
        f.write(f"P5\n{m.shape[1]} {m.shape[0]}\n255\n".encode())
        f.write(u8.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        w, h = _read_pnm_header(f, b"P5")
        data = np.frombuffer(f.read(w * h), dtype=np.uint8)
    return data.reshape(h, w)


def write_flow(path, field: FlowField) -> None:
    with open(path, "wb") as f:
        f.write(FLOW_MAGIC)
        f.write(struct.pack("<II", field.width, field.height))
        f.write(field.vectors.astype("<f4").tobytes())
        f.write(field.valid.astype(np.uint8).tobytes())


def read_flow(path) -> FlowField:
    with open(path, "rb") as f:
        if f.read(8) != FLOW_MAGIC:
            raise ValueError("not a flow file")
        w, h = struct.unpack("<II", f.read(8))
        vec = np.frombuffer(f.read(w * h * 8), dtype="<f4").reshape(h, w, 2)
        valid = np.frombuffer(f.read(w * h), dtype=np.uint8).reshape(h, w)
    return FlowField(vec.astype(np.float64), valid > 0)


def write_depth(path, depth: np.ndarray) -> None:
    d = np.asarray(depth, dtype=np.float64)
    if d.ndim != 2:
        raise ValueError("expected (H, W) depth map")
    with open(path, "wb") as f:
        f.write(DEPTH_MAGIC)
        f.write(struct.pack("<II", d.shape[1], d.shape[0]))
        f.write(d.astype("<f8").tobytes())


def read_depth(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.read(8) != DEPTH_MAGIC:
            raise ValueError("not a depth file")
        w, h = struct.unpack("<II", f.read(8))
        return np.frombuffer(f.read(w * h * 8), dtype="<f8").reshape(h, w).copy()


def write_cameras(path, cameras) -> None:
    with open(path, "w") as f:
        json.dump([c.to_dict() for c in cameras], f, indent=1, sort_keys=True)


def read_cameras(path):
    from .camera import Camera

    with open(path) as f:
        return [Camera.from_dict(d) for d in json.load(f)]


def _dtype_code(arr: np.ndarray) -> str:
    if arr.dtype == np.float64:
        return "f8"
    if arr.dtype == np.int64:
        return "i8"
    if arr.dtype == np.bool_ or arr.dtype == np.uint8:
        return "u1"
    raise ValueError(f"unsupported checkpoint dtype {arr.dtype}")


def write_checkpoint(path, config: dict, iteration: int, arrays: dict, scalars: dict) -> None:
    """Serialize named arrays + scalar state behind a JSON manifest.

    ``arrays`` maps name -> ndarray (f8/i8/bool); ``scalars`` must be
    JSON-representable. Byte output is a pure function of the inputs.
    """
    directory = []
    blobs = []
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        code = _dtype_code(arr)
        # note: ascontiguousarray would promote 0-d to 1-d, so record shape first
        directory.append({"name": name, "dtype": code, "shape": list(arr.shape)})
        blobs.append(np.ascontiguousarray(arr).astype(_DTYPES[code]).tobytes())
    manifest = json.dumps(
        {"config": config, "iteration": int(iteration), "scalars": scalars, "arrays": directory},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(struct.pack("<Q", len(manifest)))
        f.write(manifest)
        for blob in blobs:
            f.write(blob)


def read_checkpoint(path):
    """Returns (config, iteration, arrays, scalars)."""
    with open(path, "rb") as f:
        if f.read(8) != CKPT_MAGIC:
            raise ValueError("not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CKPT_VERSION:
            raise ValueError(f"checkpoint format version {version} not supported (expected {CKPT_VERSION})")
        (mlen,) = struct.unpack("<Q", f.read(8))
        manifest = json.loads(f.read(mlen).decode())
        arrays = {}
        for entry in manifest["arrays"]:
            dt = np.dtype(_DTYPES[entry["dtype"]])
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            raw = np.frombuffer(f.read(count * dt.itemsize), dtype=dt)
            arr = raw.reshape(entry["shape"]).copy()
            if entry["dtype"] == "u1":
                arr = arr.astype(bool)
            arrays[entry["name"]] = arr
    return manifest["config"], manifest["iteration"], arrays, manifest["scalars"]


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
