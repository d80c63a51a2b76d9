"""Point-cloud container, PLY/XYZ file I/O and background-plane removal."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np

from glfm.rng import SeededRng, as_rng

LOGGER = logging.getLogger(__name__)

FORMATS = ("ply-ascii", "ply-binary-le", "xyz")

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


class CloudParseError(ValueError):
    """Malformed point-cloud file; message carries the byte or line offset."""


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    mask: np.ndarray | None = None
    id: str = ""

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError(f"cloud {self.id!r} has non-finite coordinates")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        if self.mask is not None:
            m = np.asarray(self.mask).astype(np.uint8).reshape(-1)
            if len(m) != len(pts):
                raise ValueError(
                    f"mask length {len(m)} does not match point count {len(pts)}"
                )
            if np.any(m > 1):
                raise ValueError("mask entries must be 0 or 1")
            m.flags.writeable = False
            object.__setattr__(self, "mask", m)

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, indices) -> "PointCloud":
        idx = np.asarray(indices, dtype=np.int64)
        mask = None if self.mask is None else self.mask[idx]
        return PointCloud(self.points[idx], mask, self.id)

    def with_mask(self, mask) -> "PointCloud":
        return PointCloud(self.points, mask, self.id)


def infer_format(path) -> str:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".xyz" or ext == ".txt":
        return "xyz"
    if ext == ".ply":
        with open(path, "rb") as fh:
            head = fh.read(512)
        if b"format ascii" in head:
            return "ply-ascii"
        return "ply-binary-le"
    raise ValueError(f"cannot infer point-cloud format from {path}")


def read_cloud(path, format: str | None = None, with_properties: bool = False):
    """Read a cloud from ``path``.

    PLY vertex properties other than x, y, z are ignored except an integer
    ``anomaly`` property, which becomes the mask.  With ``with_properties``
    the raw vertex property arrays are returned as a second value.
    """
    fmt = format or infer_format(path)
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    sample_id = os.path.splitext(os.path.basename(str(path)))[0]
    if fmt == "xyz":
        cloud, props = _read_xyz(path, sample_id)
    else:
        cloud, props = _read_ply(path, fmt, sample_id)
    return (cloud, props) if with_properties else cloud


def _read_xyz(path, sample_id):
    rows, mask = [], []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) not in (3, 4):
                raise CloudParseError(f"{path}: line {lineno}: expected 3 or 4 columns")
            try:
                xyz = [float(v) for v in parts[:3]]
            except ValueError as exc:
                raise CloudParseError(f"{path}: line {lineno}: {exc}") from None
            if not all(np.isfinite(xyz)):
                raise CloudParseError(f"{path}: line {lineno}: non-finite coordinate")
            rows.append(xyz)
            if len(parts) == 4:
                mask.append(int(float(parts[3])))
    if mask and len(mask) != len(rows):
        raise CloudParseError(f"{path}: mask column present on only some lines")
    pts = np.array(rows, dtype=np.float64).reshape(-1, 3)
    m = np.array(mask, dtype=np.uint8) if mask else None
    return PointCloud(pts, m, sample_id), {}


def _parse_ply_header(fh, path):
    first = fh.readline()
    if first.strip() != b"ply":
        raise CloudParseError(f"{path}: byte 0: missing 'ply' magic")
    fmt = None
    elements = []  # (name, count, [(prop name, dtype or ('list', count_t, item_t))])
    while True:
        offset = fh.tell()
        raw = fh.readline()
        if not raw:
            raise CloudParseError(f"{path}: byte {offset}: header not terminated")
        tokens = raw.decode("ascii", errors="replace").split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        key = tokens[0]
        if key == "end_header":
            break
        if key == "format":
            if len(tokens) != 3 or tokens[2] != "1.0":
                raise CloudParseError(f"{path}: byte {offset}: bad format line")
            fmt = tokens[1]
        elif key == "element":
            if len(tokens) != 3:
                raise CloudParseError(f"{path}: byte {offset}: bad element line")
            try:
                count = int(tokens[2])
            except ValueError:
                raise CloudParseError(f"{path}: byte {offset}: bad element count") from None
            elements.append((tokens[1], count, []))
        elif key == "property":
            if not elements:
                raise CloudParseError(f"{path}: byte {offset}: property before element")
            if len(tokens) == 5 and tokens[1] == "list":
                if tokens[2] not in _PLY_TYPES or tokens[3] not in _PLY_TYPES:
                    raise CloudParseError(f"{path}: byte {offset}: unknown list type")
                elements[-1][2].append(
                    (tokens[4], ("list", _PLY_TYPES[tokens[2]], _PLY_TYPES[tokens[3]]))
                )
            elif len(tokens) == 3 and tokens[1] in _PLY_TYPES:
                elements[-1][2].append((tokens[2], _PLY_TYPES[tokens[1]]))
            else:
                raise CloudParseError(f"{path}: byte {offset}: bad property line")
        else:
            raise CloudParseError(f"{path}: byte {offset}: unexpected header keyword {key!r}")
    if fmt is None:
        raise CloudParseError(f"{path}: header has no format line")
    return fmt, elements, fh.tell()


def _read_ply(path, fmt, sample_id):
    with open(path, "rb") as fh:
        file_fmt, elements, data_start = _parse_ply_header(fh, path)
        expected = {"ply-ascii": "ascii", "ply-binary-le": "binary_little_endian"}[fmt]
        if file_fmt != expected:
            raise CloudParseError(
                f"{path}: declared format {fmt} but header says {file_fmt}"
            )
        body = fh.read()

    names = [e[0] for e in elements]
    if "vertex" not in names:
        raise CloudParseError(f"{path}: no vertex element")
    v_pos = names.index("vertex")
    _, n_vert, vprops = elements[v_pos]
    prop_names = [p[0] for p in vprops]
    for axis in ("x", "y", "z"):
        if axis not in prop_names:
            raise CloudParseError(f"{path}: vertex element lacks property {axis!r}")
    if any(isinstance(p[1], tuple) for p in vprops):
        raise CloudParseError(f"{path}: list properties on vertices are not supported")

    if file_fmt == "ascii":
        props = _ply_ascii_vertices(body, elements, v_pos, path, data_start)
    else:
        props = _ply_binary_vertices(body, elements, v_pos, path, data_start)

    pts = np.stack([props["x"], props["y"], props["z"]], axis=1).astype(np.float64)
    bad = np.flatnonzero(~np.all(np.isfinite(pts), axis=1))
    if len(bad):
        raise CloudParseError(
            f"{path}: vertex {bad[0]}: non-finite coordinate "
            f"(at {props['_locator'](bad[0])})"
        )
    mask = None
    if "anomaly" in props:
        dtype = dict(vprops)["anomaly"]
        if dtype[0] not in "iu":
            raise CloudParseError(f"{path}: 'anomaly' property must be an integer type")
        mask = (props["anomaly"] != 0).astype(np.uint8)
    out = {k: v for k, v in props.items() if not k.startswith("_")}
    return PointCloud(pts, mask, sample_id), out


def _ply_ascii_vertices(body, elements, v_pos, path, data_start):
    text = body.decode("ascii", errors="replace")
    lines = text.splitlines()
    header_lines = _count_header_lines(path)
    line_no = 0
    for _, count, _ in elements[:v_pos]:
        line_no += count
    _, n_vert, vprops = elements[v_pos]
    if line_no + n_vert > len(lines):
        raise CloudParseError(
            f"{path}: line {header_lines + len(lines) + 1}: expected {n_vert} vertices, "
            f"file ends after {max(0, len(lines) - line_no)}"
        )
    cols = {p[0]: [] for p in vprops}
    for i in range(n_vert):
        fields = lines[line_no + i].split()
        lineno = header_lines + line_no + i + 1
        if len(fields) != len(vprops):
            raise CloudParseError(
                f"{path}: line {lineno}: expected {len(vprops)} values, got {len(fields)}"
            )
        for (pname, _), tok in zip(vprops, fields):
            try:
                cols[pname].append(float(tok))
            except ValueError:
                raise CloudParseError(f"{path}: line {lineno}: bad number {tok!r}") from None
    out = {k: np.asarray(v, dtype=np.dtype(dict(vprops)[k])) for k, v in cols.items()}
    out["_locator"] = lambda i: f"line {header_lines + line_no + i + 1}"
    return out


def _count_header_lines(path):
    with open(path, "rb") as fh:
        n = 0
        for raw in fh:
            n += 1
            if raw.strip() == b"end_header":
                return n
    return n


def _ply_binary_vertices(body, elements, v_pos, path, data_start):
    pos = 0
    for name, count, props in elements[:v_pos]:
        if any(isinstance(p[1], tuple) for p in props):
            raise CloudParseError(
                f"{path}: element {name!r} with list properties precedes vertices"
            )
        size = sum(np.dtype(p[1]).itemsize for p in props)
        pos += size * count
    _, n_vert, vprops = elements[v_pos]
    dtype = np.dtype([(p[0], "<" + p[1]) for p in vprops])
    need = dtype.itemsize * n_vert
    if pos + need > len(body):
        have = max(0, (len(body) - pos) // max(dtype.itemsize, 1))
        raise CloudParseError(
            f"{path}: byte {data_start + len(body)}: expected {n_vert} vertices "
            f"({need} bytes from byte {data_start + pos}), found {have}"
        )
    arr = np.frombuffer(body, dtype=dtype, count=n_vert, offset=pos)
    out = {name: arr[name].copy() for name in dtype.names}
    start = data_start + pos
    out["_locator"] = lambda i: f"byte {start + i * dtype.itemsize}"
    return out


def write_cloud(cloud: PointCloud, path, format: str | None = None, extra=None,
                comments=()) -> None:
    """Write ``cloud`` to ``path``.

    ``extra`` maps property names to per-point arrays (float arrays become
    ``float`` properties, integer arrays ``int``); only PLY carries them.
    Binary PLY stores coordinates as doubles so round trips are exact.
    """
    fmt = format or ("xyz" if str(path).endswith((".xyz", ".txt")) else "ply-binary-le")
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    pts = cloud.points
    n = len(pts)
    extra = dict(extra or {})
    for k, v in extra.items():
        if len(v) != n:
            raise ValueError(f"extra property {k!r} has length {len(v)}, expected {n}")

    if fmt == "xyz":
        with open(path, "w") as fh:
            for i in range(n):
                line = " ".join(repr(float(c)) for c in pts[i])
                if cloud.mask is not None:
                    line += f" {int(cloud.mask[i])}"
                fh.write(line + "\n")
        return

    fields = [("x", "<f8", "double"), ("y", "<f8", "double"), ("z", "<f8", "double")]
    columns = [pts[:, 0], pts[:, 1], pts[:, 2]]
    if cloud.mask is not None:
        fields.append(("anomaly", "u1", "uchar"))
        columns.append(cloud.mask)
    for k, v in extra.items():
        v = np.asarray(v)
        if v.dtype.kind in "iub":
            fields.append((k, "<i4", "int"))
        else:
            fields.append((k, "<f4", "float"))
        columns.append(v)

    header = ["ply"]
    header.append("format ascii 1.0" if fmt == "ply-ascii" else "format binary_little_endian 1.0")
    header.extend(f"comment {c}" for c in comments)
    header.append(f"element vertex {n}")
    header.extend(f"property {ptype} {name}" for name, _, ptype in fields)
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")

    with open(path, "wb") as fh:
        fh.write(head)
        if fmt == "ply-binary-le":
            rec = np.empty(n, dtype=np.dtype([(f[0], f[1]) for f in fields]))
            for (name, _, _), col in zip(fields, columns):
                rec[name] = col
            fh.write(rec.tobytes())
        else:
            for i in range(n):
                toks = []
                for (name, dt, _), col in zip(fields, columns):
                    if dt == "<f8":
                        toks.append(repr(float(col[i])))
                    elif dt == "<f4":
                        toks.append(repr(float(np.float32(col[i]))))
                    else:
                        toks.append(str(int(col[i])))
                fh.write((" ".join(toks) + "\n").encode("ascii"))


def remove_dominant_plane(cloud: PointCloud, dist_threshold: float = 0.005,
                          min_inlier_frac: float = 0.3, rng: SeededRng | int | None = None,
                          iterations: int = 256) -> PointCloud:
    """Drop the inliers of the best RANSAC plane if it covers enough points.

    The best plane is the one with the most inliers found in ``iterations``
    random three-point draws (first found wins ties).  Order of surviving
    points is preserved; degenerate clouds come back unchanged.
    """
    rng = as_rng(rng)
    pts = cloud.points
    n = len(pts)
    if n < 3:
        return cloud
    best_count, best_inliers = 0, None
    for _ in range(iterations):
        i, j, k = rng.choice(n, size=3, replace=False)
        normal = np.cross(pts[j] - pts[i], pts[k] - pts[i])
        norm = np.linalg.norm(normal)
        if norm < 1e-12:
            continue
        normal /= norm
        dist = np.abs((pts - pts[i]) @ normal)
        inliers = dist <= dist_threshold
        count = int(inliers.sum())
        if count > best_count:
            best_count, best_inliers = count, inliers
    if best_inliers is None or best_count < min_inlier_frac * n:
        return cloud
    LOGGER.debug("plane removal dropped %d of %d points", best_count, n)
    return cloud.subset(np.flatnonzero(~best_inliers))
