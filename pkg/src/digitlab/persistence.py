"""Checkpoint archives, metrics CSV, PGM sample grids and run manifests.

Checkpoint layout (all integers little-endian)::

    b"BHND"  u32 version  u32 entry_count
    entry_count x [u16 name_len, name (UTF-8), u8 ndim, u32 dims[ndim],
                   u8 dtype (0 = float32), float32 payload]
    u32 CRC32 of every preceding byte
"""

import io
import json
import os
import platform
import struct
import tempfile
import zlib
from collections import OrderedDict

import numpy as np

from . import __version__, kernels
from .errors import ChecksumError, ConsistencyError, FormatError

MAGIC = b"BHND"
FORMAT_VERSION = 1
DTYPE_FLOAT32 = 0
OPTIM_PREFIX = "__optim__/"
META_PREFIX = "__meta__/"


def _atomic_write(path, payload):
    directory = os.path.dirname(os.path.abspath(path))
    try:
        os.makedirs(directory, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(payload)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as err:
        raise OSError(f"cannot write {path}: {err}") from err


def encode_entries(entries):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(entries)))
    for name, arr in entries.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(struct.pack("<B", DTYPE_FLOAT32))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_entries(blob, source="<bytes>"):
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise FormatError(f"{source}: not a checkpoint (magic {blob[:4]!r}, expected {MAGIC!r})")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    actual = zlib.crc32(body) & 0xFFFFFFFF
    if actual != crc:
        raise ChecksumError(f"{source}: CRC32 mismatch (stored 0x{crc:08X}, computed 0x{actual:08X})")
    version, count = struct.unpack_from("<II", body, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{source}: checkpoint version {version}, this build reads version {FORMAT_VERSION}")
    pos = 12
    entries = OrderedDict()
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<B", body, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            (tag,) = struct.unpack_from("<B", body, pos)
            pos += 1
            if tag != DTYPE_FLOAT32:
                raise FormatError(f"{source}: entry {name!r} has unknown dtype tag {tag}")
            size = int(np.prod(dims)) * 4
            if pos + size > len(body):
                raise FormatError(f"{source}: entry {name!r} payload runs past the end of the file")
            entries[name] = np.frombuffer(body, dtype="<f4", count=size // 4, offset=pos).reshape(dims).astype(np.float32)
            pos += size
    except struct.error as err:
        raise FormatError(f"{source}: truncated entry table ({err})") from None
    if pos != len(body):
        raise FormatError(f"{source}: {len(body) - pos} trailing bytes after the last entry")
    return entries


def write_checkpoint(path, entries):
    _atomic_write(path, encode_entries(entries))


def read_checkpoint(path):
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as err:
        raise OSError(f"cannot read checkpoint {path}: {err}") from err
    return decode_entries(blob, path)


def _named(obj):
    # a single object saves without a prefix; a dict saves each under "<key>/"
    if obj is None:
        return {}
    if isinstance(obj, dict):
        return {f"{k}/": v for k, v in obj.items()}
    return {"": obj}


def save_checkpoint(path, graph, optimizer=None, meta=None):
    """Write model parameters, buffers, optimizer state and scalar metadata.

    ``graph`` / ``optimizer`` may be single objects or ``{"name": obj}``
    dicts (e.g. generator and discriminator in one archive).
    """
    entries = OrderedDict()
    for prefix, g in _named(graph).items():
        for name, arr in g.state_dict().items():
            entries[prefix + name] = arr
    for prefix, opt in _named(optimizer).items():
        for name, arr in opt.state_dict().items():
            entries[OPTIM_PREFIX + prefix + name] = arr
    for key, value in (meta or {}).items():
        entries[META_PREFIX + key] = np.atleast_1d(np.asarray(value, dtype=np.float32))
    write_checkpoint(path, entries)


def load_checkpoint(path, graph, optimizer=None):
    """Populate ``graph`` (and ``optimizer``) from ``path``; return the metadata dict.

    Every expected name must be present and nothing unexpected may remain;
    otherwise nothing is loaded and the orphans are listed.
    """
    entries = read_checkpoint(path)
    expected = {}
    for prefix, g in _named(graph).items():
        for name, arr in g.state_dict().items():
            expected[prefix + name] = np.shape(arr)
    stored = {n for n in entries if not n.startswith((OPTIM_PREFIX, META_PREFIX))}
    missing = sorted(set(expected) - stored)
    extra = sorted(stored - set(expected))
    if missing or extra:
        raise ConsistencyError(f"{path}: checkpoint does not match the model; missing {missing}, unexpected {extra}")
    bad = [n for n, shape in expected.items() if entries[n].shape != tuple(shape)]
    if bad:
        raise ConsistencyError(f"{path}: shape mismatch for {bad}")
    opt_states = {}
    for prefix, opt in _named(optimizer).items():
        want = {OPTIM_PREFIX + prefix + n for n in opt.state_dict()}
        missing = sorted(want - set(entries))
        if missing:
            raise ConsistencyError(f"{path}: optimizer state missing {missing}")
        opt_states[prefix] = {n[len(OPTIM_PREFIX + prefix):]: entries[n] for n in want}
    for prefix, g in _named(graph).items():
        g.load_state_dict({n[len(prefix):]: a for n, a in entries.items() if n.startswith(prefix) and n in expected})
    for prefix, opt in _named(optimizer).items():
        opt.load_state_dict(opt_states[prefix])
    return {n[len(META_PREFIX):]: float(a.reshape(-1)[0]) for n, a in entries.items() if n.startswith(META_PREFIX)}


# ---------------------------------------------------------------------------
# metrics, grids, manifest
# ---------------------------------------------------------------------------

RECOGNIZER_COLUMNS = ("step", "split", "loss", "accuracy")
SGAN_COLUMNS = ("step", "d_loss", "d_accuracy", "g_loss")


def _fmt(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.9g}"


def write_metrics_csv(metrics, path):
    """One row per logged step; floats carry 9 significant digits."""
    columns = metrics.columns
    lines = [",".join(columns)]
    lines += [",".join(_fmt(row[c]) for c in columns) for row in metrics.rows]
    _atomic_write(path, ("\n".join(lines) + "\n").encode("ascii"))


def image_grid(images, columns, gutter=2):
    """Tile ``(N, 1, H, W)`` images in [-1, 1] into a uint8 canvas, row-major."""
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1] != 1 or len(images) < 1:
        raise ValueError(f"expected (N>=1, 1, H, W) images, got {images.shape}")
    n, _, h, w = images.shape
    columns = max(1, min(columns, n))
    rows = -(-n // columns)
    canvas = np.zeros((rows * h + (rows - 1) * gutter, columns * w + (columns - 1) * gutter), dtype=np.uint8)
    pixels = np.clip(np.floor((images[:, 0].astype(np.float64) + 1) / 2 * 255 + 0.5), 0, 255).astype(np.uint8)
    for i in range(n):
        r, c = divmod(i, columns)
        y, x = r * (h + gutter), c * (w + gutter)
        canvas[y:y + h, x:x + w] = pixels[i]
    return canvas


def write_image_grid(images, columns, path):
    """Binary PGM (P5, maxval 255) of the tiled images with 2-pixel black gutters."""
    canvas = image_grid(images, columns)
    height, width = canvas.shape
    _atomic_write(path, f"P5\n{width} {height}\n255\n".encode("ascii") + canvas.tobytes())


def read_pgm(path):
    with open(path, "rb") as f:
        blob = f.read()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5" or len(parts) < 4:
        raise FormatError(f"{path}: not a binary PGM")
    width, height = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=width * height).reshape(height, width)


def build_identifier():
    return {
        "package": __version__,
        "kernels": kernels.BACKEND,
        "numpy": np.__version__,
        "python": platform.python_version(),
    }


def write_run_manifest(out_dir, command, config, results=None):
    manifest = {
        "command": command,
        "seed": config.get("seed"),
        "config": config,
        "build": build_identifier(),
        "results": results or {},
    }
    _atomic_write(os.path.join(out_dir, "run.json"), (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return manifest
