"""Readers and writers for every on-disk format used by the pipeline.

PPM (P6, 8-bit), PFM (little-endian written, both endiannesses read),
binary little-endian PLY (points, meshes, splat checkpoints), camera JSON,
raw float32 feature blobs with a text header, and CSV metrics.
Readers raise a :class:`FormatError` subclass naming the byte offset of the
problem instead of crashing on bad input.
"""

from __future__ import annotations

import csv
import json
import re
from pathlib import Path

import numpy as np

from .errors import MalformedHeader, TruncatedPayload, UnsupportedVariant
from .geom import Camera
from .scene import Scene

# ----------------------------------------------------------------------------
# PPM


def _read_tokens(data: bytes, count: int, start: int = 0) -> tuple[list[bytes], int]:
    """Whitespace-separated header tokens with ``#`` comments; returns the offset after the last token."""
    tokens, i, n = [], start, len(data)
    while len(tokens) < count:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i < n and data[i:i + 1] == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        if i >= n:
            raise MalformedHeader("header ended early", i)
        j = i
        while j < n and not data[j:j + 1].isspace() and data[j:j + 1] != b"#":
            j += 1
        tokens.append(data[i:j])
        i = j
    return tokens, i


def _to_u8(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def ppm_write(path: str | Path, image: np.ndarray) -> None:
    """Write (H, W, 3) uint8 or [0, 1] float data as binary P6."""
    u8 = _to_u8(image)
    if u8.ndim != 3 or u8.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {u8.shape}")
    h, w = u8.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(np.ascontiguousarray(u8).tobytes())


def ppm_decode(data: bytes) -> np.ndarray:
    if len(data) < 2:
        raise MalformedHeader("file too short for a magic number", 0)
    magic = data[:2]
    if magic in (b"P1", b"P2", b"P3", b"P4", b"P5"):
        raise UnsupportedVariant(f"PNM variant {magic.decode()} is not supported (P6 only)", 0)
    if magic != b"P6":
        raise MalformedHeader(f"bad magic {magic!r}", 0)
    (w, h, mx), end = _read_tokens(data, 3, 2)
    try:
        w, h, mx = int(w), int(h), int(mx)
    except ValueError:
        raise MalformedHeader("non-integer size or maxval", end) from None
    if w <= 0 or h <= 0:
        raise MalformedHeader(f"invalid size {w}x{h}", end)
    if mx != 255:
        raise UnsupportedVariant(f"maxval {mx} (only 255 supported)", end)
    if end >= len(data) or not data[end:end + 1].isspace():
        raise MalformedHeader("missing whitespace after maxval", end)
    start = end + 1
    need = w * h * 3
    if len(data) - start < need:
        raise TruncatedPayload(f"expected {need} pixel bytes, found {len(data) - start}", len(data))
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=start).reshape(h, w, 3).copy()


def ppm_read(path: str | Path) -> np.ndarray:
    """(H, W, 3) uint8 array."""
    return ppm_decode(Path(path).read_bytes())


def ppm_read_float(path: str | Path) -> np.ndarray:
    return ppm_read(path).astype(np.float64) / 255.0


# ----------------------------------------------------------------------------
# PFM


def pfm_write(path: str | Path, image: np.ndarray) -> None:
    """Write (H, W) or (H, W, 3) float data, little-endian, bottom-up rows."""
    a = np.asarray(image, dtype="<f4")
    if a.ndim == 2:
        magic = "Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        magic = "PF"
    else:
        raise ValueError(f"PFM supports (H, W) or (H, W, 3), got {a.shape}")
    h, w = a.shape[:2]
    with open(path, "wb") as f:
        f.write(f"{magic}\n{w} {h}\n-1\n".encode())
        f.write(np.ascontiguousarray(a[::-1]).tobytes())


def pfm_decode(data: bytes) -> np.ndarray:
    if len(data) < 2:
        raise MalformedHeader("file too short for a magic number", 0)
    magic = data[:2]
    if magic not in (b"PF", b"Pf"):
        raise MalformedHeader(f"bad magic {magic!r}", 0)
    (w, h, scale), end = _read_tokens(data, 3, 2)
    try:
        w, h, scale = int(w), int(h), float(scale)
    except ValueError:
        raise MalformedHeader("non-numeric size or scale", end) from None
    if w <= 0 or h <= 0:
        raise MalformedHeader(f"invalid size {w}x{h}", end)
    if scale == 0 or not np.isfinite(scale):
        raise MalformedHeader(f"invalid scale {scale}", end)
    if end >= len(data) or not data[end:end + 1].isspace():
        raise MalformedHeader("missing whitespace after scale", end)
    start = end + 1
    chans = 3 if magic == b"PF" else 1
    need = w * h * chans * 4
    if len(data) - start < need:
        raise TruncatedPayload(f"expected {need} payload bytes, found {len(data) - start}", len(data))
    dt = "<f4" if scale < 0 else ">f4"
    a = np.frombuffer(data, dtype=dt, count=w * h * chans, offset=start).astype(np.float32)
    a = a.reshape((h, w, 3) if chans == 3 else (h, w))
    return a[::-1].copy()


def pfm_read(path: str | Path) -> np.ndarray:
    """Top-down float32 array, (H, W) or (H, W, 3)."""
    return pfm_decode(Path(path).read_bytes())


# ----------------------------------------------------------------------------
# PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _ply_header(elements, comments=()) -> bytes:
    """``elements``: list of (name, count, [(prop, type) or (prop, 'list', count_type, item_type)])."""
    lines = ["ply", "format binary_little_endian 1.0"]
    lines += [f"comment {c}" for c in comments]
    for name, count, props in elements:
        lines.append(f"element {name} {count}")
        for pr in props:
            if len(pr) == 2:
                lines.append(f"property {pr[1]} {pr[0]}")
            else:
                lines.append(f"property list {pr[2]} {pr[3]} {pr[0]}")
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode()


def ply_decode(data: bytes) -> tuple[dict[str, dict[str, np.ndarray]], list[str]]:
    """Parse a binary little-endian PLY into ``{element: {property: array}}`` plus comments."""
    if not data.startswith(b"ply"):
        raise MalformedHeader("missing 'ply' magic", 0)
    marker = data.find(b"end_header")
    if marker < 0:
        raise MalformedHeader("no end_header line", len(data))
    nl = data.find(b"\n", marker)
    if nl < 0:
        raise MalformedHeader("end_header not terminated by newline", marker)
    offset = nl + 1
    try:
        header = data[:marker].decode("ascii")
    except UnicodeDecodeError as exc:
        raise MalformedHeader("non-ASCII header", exc.start) from None
    elements: list[tuple[str, int, list]] = []
    comments: list[str] = []
    fmt_seen = False
    pos = 0
    for line in header.splitlines(keepends=True):
        toks = line.split()
        here = pos
        pos += len(line.encode())
        if not toks or toks[0] in ("ply", "obj_info"):
            continue
        if toks[0] == "format":
            if len(toks) != 3:
                raise MalformedHeader("bad format line", here)
            if toks[1] != "binary_little_endian":
                raise UnsupportedVariant(f"PLY format {toks[1]} (only binary_little_endian)", here)
            if toks[2] != "1.0":
                raise UnsupportedVariant(f"PLY version {toks[2]}", here)
            fmt_seen = True
        elif toks[0] == "comment":
            comments.append(line.strip()[len("comment"):].strip())
        elif toks[0] == "element":
            if len(toks) != 3 or not toks[2].isdigit():
                raise MalformedHeader("bad element line", here)
            elements.append((toks[1], int(toks[2]), []))
        elif toks[0] == "property":
            if not elements:
                raise MalformedHeader("property before any element", here)
            if len(toks) == 5 and toks[1] == "list":
                if toks[2] not in _PLY_TYPES or toks[3] not in _PLY_TYPES:
                    raise MalformedHeader(f"unknown list types {toks[2]}/{toks[3]}", here)
                elements[-1][2].append((toks[4], _PLY_TYPES[toks[2]], _PLY_TYPES[toks[3]]))
            elif len(toks) == 3:
                if toks[1] not in _PLY_TYPES:
                    raise MalformedHeader(f"unknown property type {toks[1]}", here)
                elements[-1][2].append((toks[2], _PLY_TYPES[toks[1]]))
            else:
                raise MalformedHeader("bad property line", here)
        else:
            raise MalformedHeader(f"unexpected header keyword {toks[0]!r}", here)
    if not fmt_seen:
        raise MalformedHeader("missing format line", 0)

    out: dict[str, dict[str, np.ndarray]] = {}
    for name, count, props in elements:
        if all(len(pr) == 2 for pr in props):
            dt = np.dtype([(pr[0], "<" + pr[1]) for pr in props])
            need = dt.itemsize * count
            if len(data) - offset < need:
                raise TruncatedPayload(f"element {name}: expected {need} bytes, found {len(data) - offset}",
                                       len(data))
            rec = np.frombuffer(data, dtype=dt, count=count, offset=offset)
            out[name] = {pr[0]: rec[pr[0]].copy() for pr in props}
            offset += need
        elif (fast := _fixed_list(data, offset, count, props)) is not None:
            out[name], offset = fast
        else:
            cols: dict[str, list] = {pr[0]: [] for pr in props}
            for _ in range(count):
                for pr in props:
                    if len(pr) == 2:
                        dt = np.dtype("<" + pr[1])
                        if offset + dt.itemsize > len(data):
                            raise TruncatedPayload(f"element {name} ends early", offset)
                        cols[pr[0]].append(np.frombuffer(data, dt, 1, offset)[0])
                        offset += dt.itemsize
                    else:
                        ct, it = np.dtype("<" + pr[1]), np.dtype("<" + pr[2])
                        if offset + ct.itemsize > len(data):
                            raise TruncatedPayload(f"element {name} ends early", offset)
                        k = int(np.frombuffer(data, ct, 1, offset)[0])
                        offset += ct.itemsize
                        if k < 0 or offset + k * it.itemsize > len(data):
                            raise TruncatedPayload(f"element {name} list of {k} items ends early", offset)
                        cols[pr[0]].append(np.frombuffer(data, it, k, offset).copy())
                        offset += k * it.itemsize
            out[name] = {}
            for pr in props:
                vals = cols[pr[0]]
                if len(pr) == 2:
                    out[name][pr[0]] = np.array(vals, dtype=pr[1])
                else:
                    lens = {len(v) for v in vals}
                    out[name][pr[0]] = (np.stack(vals) if len(lens) == 1 and vals
                                        else np.zeros((0, 3), dtype=pr[2]) if not vals else vals)
    return out, comments


def _fixed_list(data: bytes, offset: int, count: int, props):
    """Fast path for a single list property whose lists all share the first list's length."""
    if len(props) != 1 or len(props[0]) != 4 or count == 0:
        return None
    name, ct, it = props[0][0], np.dtype("<" + props[0][1]), np.dtype("<" + props[0][2])
    if offset + ct.itemsize > len(data):
        raise TruncatedPayload("list element ends early", offset)
    k = int(np.frombuffer(data, ct, 1, offset)[0])
    if k < 0:
        return None
    dt = np.dtype([("n", ct), ("v", it, (k,))])
    if len(data) - offset < dt.itemsize * count:
        # may still be valid with varying lengths; the slow path decides
        return None
    rec = np.frombuffer(data, dt, count, offset)
    if not np.all(rec["n"] == k):
        return None
    return {name: rec["v"].copy()}, offset + dt.itemsize * count


def ply_read(path: str | Path):
    return ply_decode(Path(path).read_bytes())


def _write_ply(path, elements, arrays, comments=()) -> None:
    with open(path, "wb") as f:
        f.write(_ply_header(elements, comments))
        for (name, count, props), arr in zip(elements, arrays):
            f.write(arr.tobytes())


def write_points(path: str | Path, points: np.ndarray) -> None:
    pts = np.asarray(points, dtype="<f4").reshape(-1, 3)
    props = [("x", "float"), ("y", "float"), ("z", "float")]
    _write_ply(path, [("vertex", len(pts), props)], [np.ascontiguousarray(pts)])


def read_points(path: str | Path) -> np.ndarray:
    el, _ = ply_read(path)
    if "vertex" not in el:
        raise MalformedHeader("no vertex element", 0)
    v = el["vertex"]
    return np.stack([v["x"], v["y"], v["z"]], axis=-1).astype(np.float64)


def write_mesh(path: str | Path, vertices: np.ndarray, faces: np.ndarray) -> None:
    verts = np.asarray(vertices, dtype="<f4").reshape(-1, 3)
    tri = np.asarray(faces, dtype="<i4").reshape(-1, 3)
    face_rec = np.empty(len(tri), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
    face_rec["n"] = 3
    face_rec["idx"] = tri
    _write_ply(path, [("vertex", len(verts), [("x", "float"), ("y", "float"), ("z", "float")]),
                      ("face", len(tri), [("vertex_indices", "list", "uchar", "int")])],
               [np.ascontiguousarray(verts), face_rec])


def read_mesh(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    el, _ = ply_read(path)
    if "vertex" not in el:
        raise MalformedHeader("no vertex element", 0)
    v = el["vertex"]
    verts = np.stack([v["x"], v["y"], v["z"]], axis=-1).astype(np.float64)
    faces = el.get("face", {}).get("vertex_indices", np.zeros((0, 3), np.int32))
    if isinstance(faces, list):
        raise UnsupportedVariant("only triangle meshes are supported", 0)
    return verts, np.asarray(faces, dtype=np.int64).reshape(-1, 3)


_SPLAT_FIELDS = (["x", "y", "z", "qw", "qx", "qy", "qz", "log_su", "log_sv", "opacity_logit", "r", "g", "b"]
                 + [f"f{i}" for i in range(8)])


def write_splats(path: str | Path, scene: Scene) -> None:
    """Splat checkpoint: float64 parameters and appearance (exact round trip), int32 provenance, extent in a comment."""
    n = len(scene)
    C = scene.feature.shape[1]
    names = _SPLAT_FIELDS[:13] + [f"f{i}" for i in range(C)]
    dt = np.dtype([(k, "<f8") for k in names] + [("view_index", "<i4"), ("pixel_index", "<i4")])
    rec = np.empty(n, dtype=dt)
    cols = np.concatenate([scene.p, scene.q, scene.log_s, scene.opacity_logit[:, None], scene.color,
                           scene.feature], axis=1)
    for i, k in enumerate(names):
        rec[k] = cols[:, i]
    rec["view_index"] = scene.view_index
    rec["pixel_index"] = scene.pixel_index
    props = [(k, "double") for k in names] + [("view_index", "int"), ("pixel_index", "int")]
    _write_ply(path, [("vertex", n, props)], [rec], comments=[f"extent {scene.extent!r}"])


def read_splats(path: str | Path) -> Scene:
    el, comments = ply_read(path)
    if "vertex" not in el:
        raise MalformedHeader("no vertex element", 0)
    v = el["vertex"]
    missing = [k for k in _SPLAT_FIELDS[:13] + ["view_index", "pixel_index"] if k not in v]
    if missing:
        raise MalformedHeader(f"splat checkpoint lacks properties {missing}", 0)
    extent = 1.0
    for c in comments:
        m = re.match(r"extent\s+(\S+)", c)
        if m:
            extent = float(m.group(1))
    feats = sorted((k for k in v if re.fullmatch(r"f\d+", k)), key=lambda k: int(k[1:]))

    def col(*ks):
        return np.stack([v[k].astype(np.float64) for k in ks], axis=-1)

    return Scene(
        col("x", "y", "z"), col("qw", "qx", "qy", "qz"), col("log_su", "log_sv"),
        v["opacity_logit"].astype(np.float64), col("r", "g", "b"),
        col(*feats) if feats else np.zeros((len(v["x"]), 0)),
        v["view_index"].astype(np.int32), v["pixel_index"].astype(np.int32), extent=extent,
    )


# ----------------------------------------------------------------------------
# cameras


def cameras_write(path: str | Path, cameras: list[Camera]) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cameras], indent=1))


def cameras_read(path: str | Path) -> list[Camera]:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedHeader(f"invalid camera JSON: {exc.msg}", exc.pos) from None
    if not isinstance(doc, list):
        raise MalformedHeader("camera JSON must be an array", 0)
    try:
        return [Camera.from_dict(d) for d in doc]
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedHeader(f"invalid camera record: {exc}", 0) from None


# ----------------------------------------------------------------------------
# feature blobs

FEAT_MAGIC = "SSFEAT1"


def feat_write(path: str | Path, features: np.ndarray) -> None:
    """Raw little-endian float32 (H, W, C) blob behind an 8-line text header."""
    a = np.asarray(features, dtype="<f4")
    if a.ndim != 3:
        raise ValueError(f"expected (H, W, C) features, got {a.shape}")
    h, w, c = a.shape
    header = (f"{FEAT_MAGIC}\nwidth {w}\nheight {h}\nchannels {c}\ndtype float32\n"
              f"endian little\nlayout hwc\nend\n")
    with open(path, "wb") as f:
        f.write(header.encode())
        f.write(np.ascontiguousarray(a).tobytes())


def feat_decode(data: bytes) -> np.ndarray:
    lines, offset = [], 0
    for _ in range(8):
        nl = data.find(b"\n", offset)
        if nl < 0:
            raise MalformedHeader("header has fewer than 8 lines", len(data))
        lines.append((data[offset:nl], offset))
        offset = nl + 1
    if lines[0][0] != FEAT_MAGIC.encode():
        raise MalformedHeader(f"bad magic {lines[0][0][:16]!r}", 0)
    vals = {}
    for raw, at in lines[1:7]:
        parts = raw.split()
        if len(parts) != 2:
            raise MalformedHeader(f"bad header line {raw[:32]!r}", at)
        vals[parts[0].decode(errors="replace")] = (parts[1].decode(errors="replace"), at)
    if lines[7][0] != b"end":
        raise MalformedHeader("header not terminated by 'end'", lines[7][1])
    for key, want in (("dtype", "float32"), ("endian", "little"), ("layout", "hwc")):
        if key not in vals:
            raise MalformedHeader(f"missing {key}", 0)
        if vals[key][0] != want:
            raise UnsupportedVariant(f"{key} {vals[key][0]} (only {want})", vals[key][1])
    dims = []
    for key in ("width", "height", "channels"):
        if key not in vals:
            raise MalformedHeader(f"missing {key}", 0)
        try:
            d = int(vals[key][0])
        except ValueError:
            raise MalformedHeader(f"non-integer {key}", vals[key][1]) from None
        if d <= 0:
            raise MalformedHeader(f"non-positive {key}", vals[key][1])
        dims.append(d)
    w, h, c = dims
    need = w * h * c * 4
    if len(data) - offset < need:
        raise TruncatedPayload(f"expected {need} payload bytes, found {len(data) - offset}", len(data))
    return np.frombuffer(data, dtype="<f4", count=w * h * c, offset=offset).reshape(h, w, c).copy()


def feat_read(path: str | Path) -> np.ndarray:
    return feat_decode(Path(path).read_bytes())


# ----------------------------------------------------------------------------
# CSV


def csv_append(path: str | Path, row: dict, columns: list[str] | None = None) -> None:
    """Append one row, writing the header first when the file is new or empty."""
    path = Path(path)
    columns = list(row) if columns is None else columns
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns, lineterminator="\n")
        if new:
            w.writeheader()
        w.writerow({k: _csv_value(row.get(k, "")) for k in columns})


def _csv_value(v):
    if isinstance(v, float):
        return repr(v)
    return v


def csv_read(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
