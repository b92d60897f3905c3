"""On-disk formats: sequence records, key=value configs, parameter snapshots.

A sequence record is a directory::

    manifest.txt          key=value metadata
    frames/t00000_c0.pgm  one binary PGM (P5, maxval 255) per frame and channel
    measurements.csv      t,px,py,vx,vy
    actions.csv           t,alpha,tau

Snapshots are a small binary container: an 8-byte magic, a length-prefixed
config echo, then named little-endian float32 tensors.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gridops import ROLES, Ogm


class DataError(ValueError):
    """Malformed or inconsistent on-disk data."""


class ConfigError(ValueError):
    """Invalid run configuration."""


# ---------------------------------------------------------------- PGM

def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError(f"write_pgm needs a 2-D uint8 array, got {img.shape} {img.dtype}")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"{path}: cannot read ({e})") from None
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise DataError(f"{path}: bad PGM header") from None
    if maxval != 255:
        raise DataError(f"{path}: maxval {maxval}, expected 255")
    body = raw[pos:]
    if len(body) != w * h:
        raise DataError(f"{path}: expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def quantize(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def dequantize(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float64) / 255.0


# ---------------------------------------------------------------- key=value

def format_kv(items: dict[str, object]) -> str:
    lines = []
    for k, v in items.items():
        if isinstance(v, (tuple, list)):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        k = k.strip()
        if k in out:
            raise ConfigError(f"{source}:{n}: duplicate key {k!r}")
        out[k] = v.strip()
    return out


# ---------------------------------------------------------------- records

MANIFEST_KEYS = ("h", "w", "c", "meters_per_pixel", "dt", "ego_anchor_row", "ego_anchor_col",
                 "value_mode", "channel_roles", "length", "heading0")


@dataclass
class SequenceRecord:
    frames: np.ndarray                # (T, h, w, c) in [0, 1], multiples of 1/255
    measurements: np.ndarray          # (T, 4)
    actions: np.ndarray               # (T-1, 2)
    meters_per_pixel: float
    dt: float
    ego_anchor: tuple[int, int]
    value_mode: str
    channel_roles: tuple[str, ...]
    heading0: float = 0.0
    flags: dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.measurements = np.asarray(self.measurements, dtype=np.float64).reshape(-1, 4)
        self.actions = np.asarray(self.actions, dtype=np.float64).reshape(-1, 2)
        self.ego_anchor = (int(self.ego_anchor[0]), int(self.ego_anchor[1]))
        self.channel_roles = tuple(self.channel_roles)
        self.validate()

    def validate(self) -> None:
        if self.frames.ndim != 4:
            raise DataError(f"frames must be (T, h, w, c), got {self.frames.shape}")
        T = self.frames.shape[0]
        if self.measurements.shape[0] != T:
            raise DataError(f"{self.measurements.shape[0]} measurement rows for {T} frames")
        if self.actions.shape[0] != T - 1:
            raise DataError(f"{self.actions.shape[0]} action rows for {T} frames (expected {T - 1})")
        if len(self.channel_roles) != self.c or any(r not in ROLES for r in self.channel_roles):
            raise DataError(f"bad channel roles {self.channel_roles} for {self.c} channels")
        if not (np.all(np.isfinite(self.measurements)) and np.all(np.isfinite(self.actions))):
            raise DataError("non-finite measurements or actions")
        if self.frames.size and (self.frames.min() < 0 or self.frames.max() > 1):
            raise DataError("frame values outside [0, 1]")
        if self.value_mode not in ("real", "binary"):
            raise DataError(f"bad value_mode {self.value_mode!r}")
        r, c = self.ego_anchor
        if not (0 <= r < self.h and 0 <= c < self.w):
            raise DataError(f"ego anchor {self.ego_anchor} outside {self.h}x{self.w}")

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    @property
    def h(self) -> int:
        return self.frames.shape[1]

    @property
    def w(self) -> int:
        return self.frames.shape[2]

    @property
    def c(self) -> int:
        return self.frames.shape[3]

    def ogm(self, t: int) -> Ogm:
        return Ogm(self.frames[t], self.ego_anchor, self.meters_per_pixel, self.channel_roles, self.value_mode)

    def manifest(self) -> dict[str, object]:
        m = {
            "h": self.h, "w": self.w, "c": self.c,
            "meters_per_pixel": float(self.meters_per_pixel), "dt": float(self.dt),
            "ego_anchor_row": self.ego_anchor[0], "ego_anchor_col": self.ego_anchor[1],
            "value_mode": self.value_mode, "channel_roles": self.channel_roles,
            "length": self.length, "heading0": float(self.heading0),
            "axes": "row=-forward,col=+right",
        }
        for k, v in self.flags.items():
            m[f"flag_{k}"] = v
        return m

    def save(self, path) -> Path:
        path = Path(path)
        (path / "frames").mkdir(parents=True, exist_ok=True)
        (path / "manifest.txt").write_text(format_kv(self.manifest()))
        q = quantize(self.frames)
        for t in range(self.length):
            for ch in range(self.c):
                write_pgm(path / "frames" / f"t{t:05d}_c{ch}.pgm", q[t, :, :, ch])
        _write_csv(path / "measurements.csv", ("t", "px", "py", "vx", "vy"), self.measurements)
        _write_csv(path / "actions.csv", ("t", "alpha", "tau"), self.actions)
        return path

    @classmethod
    def load(cls, path) -> "SequenceRecord":
        path = Path(path)
        mpath = path / "manifest.txt"
        if not mpath.is_file():
            raise DataError(f"{mpath}: missing manifest")
        m = parse_kv(mpath.read_text(), str(mpath))
        missing = [k for k in MANIFEST_KEYS if k not in m]
        if missing:
            raise DataError(f"{mpath}: missing keys {missing}")
        try:
            h, w, c, T = int(m["h"]), int(m["w"]), int(m["c"]), int(m["length"])
            anchor = (int(m["ego_anchor_row"]), int(m["ego_anchor_col"]))
            mpp, dt, heading0 = float(m["meters_per_pixel"]), float(m["dt"]), float(m["heading0"])
        except ValueError as e:
            raise DataError(f"{mpath}: {e}") from None
        frames = np.empty((T, h, w, c), dtype=np.uint8)
        for t in range(T):
            for ch in range(c):
                fp = path / "frames" / f"t{t:05d}_c{ch}.pgm"
                img = read_pgm(fp)
                if img.shape != (h, w):
                    raise DataError(f"{fp}: shape {img.shape}, manifest says {(h, w)}")
                frames[t, :, :, ch] = img
        meas = _read_csv(path / "measurements.csv", ("t", "px", "py", "vx", "vy"), T)
        acts = _read_csv(path / "actions.csv", ("t", "alpha", "tau"), T - 1)
        flags = {k[5:]: v for k, v in m.items() if k.startswith("flag_")}
        return cls(dequantize(frames), meas, acts, mpp, dt, anchor, m["value_mode"],
                   tuple(m["channel_roles"].split(",")), heading0, flags)


def _write_csv(path: Path, header, rows: np.ndarray) -> None:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    for t, row in enumerate(rows):
        wr.writerow([t, *(repr(float(x)) for x in row)])
    path.write_text(buf.getvalue())


def _read_csv(path: Path, header, n_rows: int) -> np.ndarray:
    if not path.is_file():
        raise DataError(f"{path}: missing")
    rows = list(csv.reader(io.StringIO(path.read_text())))
    if not rows or tuple(rows[0]) != tuple(header):
        raise DataError(f"{path}: header {rows[0] if rows else None}, expected {list(header)}")
    body = rows[1:]
    if len(body) != n_rows:
        raise DataError(f"{path}: {len(body)} rows, expected {n_rows}")
    try:
        arr = np.array([[float(x) for x in r[1:]] for r in body], dtype=np.float64)
    except ValueError as e:
        raise DataError(f"{path}: {e}") from None
    return arr.reshape(n_rows, len(header) - 1)


def list_records(root) -> list[Path]:
    root = Path(root)
    if (root / "manifest.txt").is_file():
        return [root]
    if not root.is_dir():
        raise DataError(f"{root}: no such data directory")
    found = sorted(p.parent for p in root.glob("*/manifest.txt"))
    if not found:
        raise DataError(f"{root}: no sequence records found")
    return found


def load_dataset(root) -> list[SequenceRecord]:
    return [SequenceRecord.load(p) for p in list_records(root)]


# ---------------------------------------------------------------- snapshots

MAGIC = b"ANTSNAP1"


def write_snapshot(path, config_text: str, tensors: dict[str, np.ndarray]) -> None:
    buf = bytearray(MAGIC)
    cfg = config_text.encode("utf-8")
    buf += struct.pack("<I", len(cfg)) + cfg
    buf += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        nb = name.encode("utf-8")
        buf += struct.pack("<H", len(nb)) + nb
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def read_snapshot(path) -> tuple[str, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"{path}: cannot read ({e})") from None
    if raw[:8] != MAGIC:
        raise DataError(f"{path}: bad snapshot magic {raw[:8]!r}")
    try:
        pos = 8
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        cfg = raw[pos:pos + n].decode("utf-8")
        pos += n
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + ln].decode("utf-8")
            pos += ln
            (nd,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{nd}I", raw, pos)
            pos += 4 * nd
            size = int(np.prod(shape)) if nd else 1
            arr = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
            tensors[name] = arr.astype(np.float32)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise DataError(f"{path}: truncated or corrupt snapshot ({e})") from None
    if pos != len(raw):
        raise DataError(f"{path}: {len(raw) - pos} trailing bytes")
    return cfg, tensors
