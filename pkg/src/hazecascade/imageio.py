"""On-disk formats: PPM images, PTNS tensors, PPWA weight archives, detection JSONL, dataset manifests.

PTNS layout (little-endian)::

    b"PTNS" | version u32 | ndim u32 | dims u64 * ndim | payload f64 * prod(dims)

PPWA layout (little-endian)::

    b"PPWA" | version u32 | header_len u32 | header (UTF-8 JSON) | payload f64

The PPWA header is ``{"tensors": [{"name", "shape", "offset"}, ...]}`` with
names sorted lexicographically and ``offset`` counted in bytes from the start
of the payload.
"""

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

PTNS_MAGIC = b"PTNS"
PPWA_MAGIC = b"PPWA"
FORMAT_VERSION = 1


@dataclass
class ImageU8:
    width: int
    height: int
    data: bytes

    def __post_init__(self):
        if len(self.data) != 3 * self.width * self.height:
            raise ValueError(f"image data length {len(self.data)} != 3*{self.width}*{self.height}")

    def to_array(self):
        return np.frombuffer(self.data, dtype=np.uint8).reshape(self.height, self.width, 3)

    @classmethod
    def from_array(cls, arr):
        arr = np.ascontiguousarray(arr, dtype=np.uint8)
        h, w, c = arr.shape
        if c != 3:
            raise ValueError(f"expected 3 channels, got {c}")
        return cls(width=w, height=h, data=arr.tobytes())


# --- PPM --------------------------------------------------------------------

def _ppm_tokens(buf, count):
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    tokens = []
    pos = 0
    n = len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        if pos >= n:
            raise FormatError("truncated PPM header", offset=pos)
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        tokens.append((buf[start:pos], start))
    return tokens, pos


def decode_ppm(buf, path=None):
    if buf[:2] != b"P6":
        raise FormatError(f"bad PPM magic {buf[:2]!r}, expected b'P6'", path=path, offset=0)
    try:
        tokens, pos = _ppm_tokens(buf[2:], 3)
    except FormatError as exc:
        raise FormatError("truncated PPM header", path=path, offset=(exc.offset or 0) + 2) from None
    values = []
    for tok, off in tokens:
        if not tok.isdigit():
            raise FormatError(f"non-numeric PPM header field {tok!r}", path=path, offset=off + 2)
        values.append(int(tok))
    width, height, maxval = values
    if width <= 0 or height <= 0:
        raise FormatError(f"non-positive PPM size {width}x{height}", path=path, offset=tokens[0][1] + 2)
    if maxval != 255:
        raise FormatError(f"unsupported PPM maxval {maxval}, expected 255", path=path, offset=tokens[2][1] + 2)
    pos += 2
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after PPM header", path=path, offset=pos)
    pos += 1
    need = 3 * width * height
    payload = buf[pos:pos + need]
    if len(payload) < need:
        raise FormatError(f"truncated PPM payload: {len(payload)} of {need} bytes", path=path,
                          offset=pos + len(payload))
    return ImageU8(width, height, bytes(payload))


def encode_ppm(image):
    return f"P6\n{image.width} {image.height}\n255\n".encode("ascii") + image.data


def read_ppm(path):
    return decode_ppm(Path(path).read_bytes(), path=path)


def write_ppm(path, image):
    Path(path).write_bytes(encode_ppm(image))


# --- float conversion -------------------------------------------------------

def u8_to_float(image):
    """ImageU8 -> float tensor (3, H, W) in [0, 1]."""
    return image.to_array().transpose(2, 0, 1).astype(np.float64) / 255.0


def float_to_u8(tensor):
    """Float tensor (3, H, W) -> ImageU8; clamps to [0, 1], rounds half to even."""
    t = np.asarray(tensor, dtype=np.float64)
    if t.ndim != 3 or t.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) tensor, got {t.shape}")
    q = np.rint(np.clip(t, 0.0, 1.0) * 255.0).astype(np.uint8)
    return ImageU8.from_array(q.transpose(1, 2, 0))


# --- PTNS tensors -----------------------------------------------------------

def encode_tensor(arr):
    arr = np.asarray(arr, dtype=np.float64)
    head = PTNS_MAGIC + struct.pack("<II", FORMAT_VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.astype("<f8").tobytes()


def decode_tensor(buf, path=None):
    if len(buf) < 12:
        raise FormatError("truncated PTNS header", path=path, offset=len(buf))
    if buf[:4] != PTNS_MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {PTNS_MAGIC!r}", path=path, offset=0)
    version, ndim = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported PTNS version {version}", path=path, offset=4)
    dims_end = 12 + 8 * ndim
    if len(buf) < dims_end:
        raise FormatError(f"truncated PTNS dims: need {ndim} u64 values", path=path, offset=len(buf))
    dims = struct.unpack_from(f"<{ndim}Q", buf, 12)
    count = math.prod(dims)
    payload = len(buf) - dims_end
    if payload != 8 * count:
        raise FormatError(f"PTNS payload is {payload} bytes, dims {list(dims)} need {8 * count}",
                          path=path, offset=dims_end)
    return np.frombuffer(buf, dtype="<f8", count=count, offset=dims_end).astype(np.float64).reshape(dims)


def read_tensor(path):
    return decode_tensor(Path(path).read_bytes(), path=path)


def write_tensor(path, arr):
    Path(path).write_bytes(encode_tensor(arr))


# --- PPWA weight archives ---------------------------------------------------

def encode_weights(tensors):
    """``tensors`` is a mapping or a sequence of (name, array) pairs."""
    items = list(tensors.items()) if isinstance(tensors, dict) else list(tensors)
    names = [n for n, _ in items]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise FormatError(f"duplicate tensor names {dupes}")
    entries = []
    chunks = []
    offset = 0
    for name, arr in sorted(items, key=lambda kv: kv[0]):
        arr = np.asarray(arr, dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        raw = arr.astype("<f8").tobytes()
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries}, separators=(",", ":"), sort_keys=True).encode("utf-8")
    return PPWA_MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header + b"".join(chunks)


def decode_weights(buf, path=None):
    if len(buf) < 12:
        raise FormatError("truncated PPWA header", path=path, offset=len(buf))
    if buf[:4] != PPWA_MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {PPWA_MAGIC!r}", path=path, offset=0)
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported PPWA version {version}", path=path, offset=4)
    if len(buf) < 12 + hlen:
        raise FormatError("truncated PPWA manifest", path=path, offset=len(buf))
    try:
        header = json.loads(bytes(buf[12:12 + hlen]).decode("utf-8"))
        entries = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed PPWA manifest: {exc}", path=path, offset=12) from None
    payload = memoryview(buf)[12 + hlen:]
    out = {}
    spans = []
    for e in entries:
        try:
            name, shape, off = str(e["name"]), tuple(int(d) for d in e["shape"]), int(e["offset"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed PPWA entry {e!r}: {exc}", path=path, offset=12) from None
        if any(d < 0 for d in shape):
            raise FormatError(f"negative dimension in {name!r}", path=path, offset=12)
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}", path=path, offset=12)
        nbytes = 8 * math.prod(shape)
        if off < 0 or off + nbytes > len(payload):
            raise FormatError(f"tensor {name!r} extends past payload", path=path, offset=12 + hlen + off)
        spans.append((off, off + nbytes, name))
        out[name] = np.frombuffer(payload, dtype="<f8", count=math.prod(shape), offset=off) \
            .astype(np.float64).reshape(shape)
    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise FormatError(f"tensors {n0!r} and {n1!r} overlap", path=path, offset=12 + hlen + s1)
    if sum(e - s for s, e, _ in spans) != len(payload):
        raise FormatError("PPWA payload length inconsistent with manifest shapes", path=path,
                          offset=12 + hlen)
    return out


def save_weights(path, tensors):
    Path(path).write_bytes(encode_weights(tensors))


def load_weights(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"weight archive not found: {path}")
    return decode_weights(path.read_bytes(), path=path)


# --- detections -------------------------------------------------------------

@dataclass(frozen=True)
class DetectionRecord:
    image_id: str
    class_id: int
    score: float
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError(f"class_id must be >= 0, got {self.class_id}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box size must be positive, got w={self.w} h={self.h}")

    @property
    def box(self):
        return (self.x, self.y, self.w, self.h)

    def to_json(self):
        return {"image_id": self.image_id, "class_id": self.class_id, "score": self.score,
                "x": self.x, "y": self.y, "w": self.w, "h": self.h}


_DET_KEYS = ("image_id", "class_id", "score", "x", "y", "w", "h")


def parse_detection(obj, line=None, path=None):
    if not isinstance(obj, dict):
        raise FormatError("detection line must be a JSON object", path=path, line=line)
    missing = [k for k in _DET_KEYS if k not in obj]
    if missing:
        raise FormatError(f"detection missing keys {missing}", path=path, line=line)
    try:
        cid = obj["class_id"]
        if isinstance(cid, bool) or not isinstance(cid, int):
            if isinstance(cid, float) and cid.is_integer():
                cid = int(cid)
            else:
                raise ValueError(f"class_id must be an integer, got {cid!r}")
        vals = {}
        for k in ("score", "x", "y", "w", "h"):
            v = obj[k]
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                raise ValueError(f"{k} must be a finite number, got {v!r}")
            vals[k] = float(v)
        if not isinstance(obj["image_id"], str):
            raise ValueError("image_id must be a string")
        return DetectionRecord(image_id=obj["image_id"], class_id=cid, **vals)
    except ValueError as exc:
        raise FormatError(f"invalid detection: {exc}", path=path, line=line) from None


def read_detections(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                obj = json.loads(text)
            except ValueError as exc:
                raise FormatError(f"malformed JSON: {exc.msg}", path=path, line=lineno) from None
            records.append(parse_detection(obj, line=lineno, path=path))
    return records


def write_detections(path, records):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), separators=(",", ":")) + "\n")


# --- dataset manifest -------------------------------------------------------

@dataclass
class ManifestRecord:
    id: str
    clear_path: str
    foggy_path: str
    depth_path: str
    boxes: list  # [(class_id, x, y, w, h), ...]
    beta: float = 0.0


@dataclass
class DatasetManifest:
    split: str
    class_names: list
    records: list = field(default_factory=list)
    root: Path = None  # directory the relative paths resolve against

    def resolve(self, rel):
        return Path(self.root) / rel if self.root is not None else Path(rel)

    def to_json(self):
        return {
            "split": self.split,
            "class_names": list(self.class_names),
            "records": [
                {"id": r.id, "clear_path": r.clear_path, "foggy_path": r.foggy_path,
                 "depth_path": r.depth_path, "beta": r.beta,
                 "boxes": [[int(b[0]), *map(float, b[1:])] for b in r.boxes]}
                for r in self.records
            ],
        }


SPLITS = ("train", "val", "test")


def save_manifest(path, manifest):
    text = json.dumps(manifest.to_json(), indent=1, sort_keys=True)
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_manifest(path, check_files=True):
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise FormatError(f"malformed manifest JSON: {exc}", path=path) from None
    try:
        split = obj["split"]
        if split not in SPLITS:
            raise FormatError(f"unknown split {split!r}", path=path)
        records = []
        seen = set()
        for raw in obj["records"]:
            if raw["id"] in seen:
                raise FormatError(f"duplicate record id {raw['id']!r}", path=path)
            seen.add(raw["id"])
            boxes = [(int(b[0]), float(b[1]), float(b[2]), float(b[3]), float(b[4])) for b in raw["boxes"]]
            records.append(ManifestRecord(raw["id"], raw["clear_path"], raw["foggy_path"],
                                          raw["depth_path"], boxes, float(raw.get("beta", 0.0))))
        manifest = DatasetManifest(split, list(obj["class_names"]), records, root=path.parent)
    except (KeyError, TypeError, IndexError) as exc:
        raise FormatError(f"malformed manifest: {exc!r}", path=path) from None
    if check_files:
        for r in manifest.records:
            for rel in (r.clear_path, r.foggy_path, r.depth_path):
                if not os.path.exists(manifest.resolve(rel)):
                    raise FormatError(f"record {r.id!r} references missing file {rel}", path=path)
    return manifest
