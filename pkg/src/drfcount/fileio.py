"""Binary and JSON file formats: checkpoints, density maps, PGM images,
annotations, and run manifests.

Checkpoint layout (magic ``DRFCKPT1``): for each named parameter, a
little-endian u32 name length, the UTF-8 name, a u32 rank, one u32 per
extent, then the payload as little-endian float64, row-major.

Density-map layout (magic ``DRFDMAP1``): u32 width, u32 height, f64 scale,
payload as little-endian float64, row-major. Dilation maps reuse this
format with the scale field holding the grid ratio.
"""

import hashlib
import json
import struct

import numpy as np

from .density import DensityMap, PointAnnotation

CKPT_MAGIC = b"DRFCKPT1"
DMAP_MAGIC = b"DRFDMAP1"


def save_checkpoint(path, named_arrays):
    """Write named parameter arrays in insertion order."""
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        for name, arr in named_arrays.items():
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic {blob[:8]!r})")
    out = {}
    pos = 8
    while pos < len(blob):
        (name_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        out[name] = arr.astype(np.float64)
    return out


def save_density_map(path, dmap):
    values = np.ascontiguousarray(dmap.values, dtype=np.float64)
    with open(path, "wb") as f:
        f.write(DMAP_MAGIC)
        f.write(struct.pack("<II", values.shape[1], values.shape[0]))
        f.write(struct.pack("<d", float(dmap.scale)))
        f.write(values.astype("<f8").tobytes())


def load_density_map(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != DMAP_MAGIC:
        raise ValueError(f"{path}: not a density-map file (bad magic {blob[:8]!r})")
    width, height = struct.unpack_from("<II", blob, 8)
    (scale,) = struct.unpack_from("<d", blob, 16)
    values = np.frombuffer(blob, dtype="<f8", count=width * height, offset=24)
    return DensityMap(values.reshape(height, width).astype(np.float64), scale=scale)


def write_pgm(path, image):
    """Binary 8-bit PGM. ``image`` is a uint8 or [0, 1] float 2-D array."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_pgm(path):
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    return np.frombuffer(blob, dtype=np.uint8, count=width * height, offset=pos).reshape(
        height, width
    )


def write_heatmap_pgm(path, dmap):
    """Density map as an 8-bit grayscale heatmap, max-normalized per map."""
    v = dmap.values
    peak = v.max()
    img = v / peak if peak > 0 else np.zeros_like(v)
    write_pgm(path, img)


def save_annotation(path, ann):
    payload = {
        "width": ann.image_width,
        "height": ann.image_height,
        "points": [[float(x), float(y)] for x, y in ann.points],
    }
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True)
        f.write("\n")


def load_annotation(path):
    with open(path) as f:
        payload = json.load(f)
    return PointAnnotation(
        image_width=payload["width"],
        image_height=payload["height"],
        points=[tuple(p) for p in payload["points"]],
    )


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path, payload):
    """Deterministic JSON: sorted keys, fixed indentation, trailing newline."""
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")
