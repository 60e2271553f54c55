"""Container and key-file serialization.

The container is a binary little-endian PLY whose vertex properties are the
plain anchor-cloud schema (position, feature, log-scaling, offsets).  Nothing
about the hidden stream, including which anchors grew from it, is written.

Key files are a small custom binary format: a header with the MLP dimension
table, the float64 weights, and a 64-bit FNV-1a checksum of the weights.
"""
from __future__ import annotations

import io
import json
import struct
import zipfile
from importlib import resources
from pathlib import Path

import numpy as np

from .scene import FEATURE_DIM, HIDDEN_UNITS, MLP, AnchorCloud, KeyBundle, KeyIntegrityError

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF

KEY_MAGIC = b"SPLATKEY"
KEY_VERSION = 1
KEY_ORDER = ("F_o", "F_c", "F_alpha", "F_q", "F_s", "F_b")


class ContainerError(IOError):
    pass


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


# ----------------------------------------------------------------- container

def container_properties(k: int) -> list[tuple[str, str]]:
    props = [("float", n) for n in ("x", "y", "z")]
    props += [("float", f"f_anchor_feat_{i}") for i in range(FEATURE_DIM)]
    props += [("float", f"scale_{i}") for i in range(3)]
    props += [("float", f"f_offset_{i}") for i in range(3 * k)]
    return props


def load_schema_fixture(name: str = "container_k10.json") -> list[tuple[str, str]]:
    text = resources.files("stegosplat.schemas").joinpath(name).read_text()
    return [tuple(p) for p in json.loads(text)["properties"]]


def container_header(n: int, k: int) -> bytes:
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    lines += [f"property {t} {name}" for t, name in container_properties(k)]
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def _records(cloud: AnchorCloud) -> np.ndarray:
    n = len(cloud)
    # offsets are stored channel-major: all x offsets, then y, then z
    offs = cloud.offsets.transpose(0, 2, 1).reshape(n, 3 * cloud.k)
    rec = np.concatenate([cloud.positions, cloud.features, cloud.raw_scaling, offs], axis=1)
    return rec.astype("<f4")


def container_bytes(cloud: AnchorCloud) -> bytes:
    return container_header(len(cloud), cloud.k) + _records(cloud).tobytes()


def write_container(cloud: AnchorCloud, path) -> Path:
    path = Path(path)
    try:
        path.write_bytes(container_bytes(cloud))
    except OSError as exc:
        raise ContainerError(f"cannot write container {path}: {exc}") from exc
    return path


def parse_header(data: bytes) -> tuple[dict, int]:
    """Parse a PLY header; returns ({format, elements}, payload offset)."""
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise ContainerError("not a PLY file (missing magic or end_header)")
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    fmt, elements, current = None, [], None
    for line in lines[1:]:
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            current = {"name": parts[1], "count": int(parts[2]), "properties": []}
            elements.append(current)
        elif parts[0] == "property":
            if current is None or len(parts) < 3:
                raise ContainerError(f"malformed property line: {line!r}")
            current["properties"].append((parts[1], parts[-1]))
        else:
            raise ContainerError(f"unexpected header line: {line!r}")
    return {"format": fmt, "elements": elements}, end + len(b"end_header\n")


def read_container(path, k: int | None = None) -> AnchorCloud:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ContainerError(f"cannot read container {path}: {exc}") from exc
    header, offset = parse_header(data)
    if header["format"] != "binary_little_endian":
        raise ContainerError(f"{path}: unsupported PLY format {header['format']}")
    (vertex,) = [e for e in header["elements"] if e["name"] == "vertex"]
    n_props = len(vertex["properties"])
    k_file = (n_props - 3 - FEATURE_DIM - 3) // 3
    if k is not None and k != k_file:
        raise ContainerError(f"{path}: container has k={k_file}, expected {k}")
    if container_properties(k_file) != vertex["properties"]:
        raise ContainerError(f"{path}: vertex properties do not match the anchor schema")
    n = vertex["count"]
    rec = np.frombuffer(data, dtype="<f4", count=n * n_props, offset=offset).reshape(n, n_props)
    rec = rec.astype(np.float64)
    pos, feat = rec[:, :3], rec[:, 3:3 + FEATURE_DIM]
    scl = rec[:, 3 + FEATURE_DIM:6 + FEATURE_DIM]
    offs = rec[:, 6 + FEATURE_DIM:].reshape(n, 3, k_file).transpose(0, 2, 1)
    return AnchorCloud(pos, feat, scl, offs)


# ----------------------------------------------------------------------- key

def key_bytes(key: KeyBundle) -> bytes:
    mlps = key.mlps()
    out = [KEY_MAGIC, struct.pack("<IIII", KEY_VERSION, key.k, key.n_bits, len(mlps))]
    for name, m in mlps.items():
        raw = name.encode("ascii")
        out.append(struct.pack("<B", len(raw)) + raw)
        out.append(struct.pack("<III", m.d_in, m.params["W1"].shape[1], m.d_out))
    payload = key.payload()
    out.append(payload)
    out.append(struct.pack("<Q", fnv1a64(payload)))
    return b"".join(out)


def write_key(key: KeyBundle, path) -> Path:
    path = Path(path)
    try:
        path.write_bytes(key_bytes(key))
    except OSError as exc:
        raise ContainerError(f"cannot write key {path}: {exc}") from exc
    return path


def parse_key(data: bytes, k: int | None = None, n_bits: int | None = None) -> KeyBundle:
    if not data.startswith(KEY_MAGIC):
        raise KeyIntegrityError("not a key file (bad magic)")
    pos = len(KEY_MAGIC)
    version, k_file, bits_file, n_mlps = struct.unpack_from("<IIII", data, pos)
    pos += 16
    if version != KEY_VERSION:
        raise KeyIntegrityError(f"unsupported key version {version}")
    if k is not None and k != k_file:
        raise KeyIntegrityError(f"key was built for k={k_file}, scene uses k={k}")
    if n_bits is not None and n_bits != bits_file:
        raise KeyIntegrityError(f"key carries {bits_file} bits, expected {n_bits}")
    table = []
    for _ in range(n_mlps):
        (ln,) = struct.unpack_from("<B", data, pos)
        name = data[pos + 1:pos + 1 + ln].decode("ascii")
        pos += 1 + ln
        table.append((name,) + struct.unpack_from("<III", data, pos))
        pos += 12
    sizes = [d_in * h + h + h * d_out + d_out for _, d_in, h, d_out in table]
    payload = data[pos:pos + 8 * sum(sizes)]
    if len(data) != pos + len(payload) + 8 or len(payload) != 8 * sum(sizes):
        raise KeyIntegrityError("key file truncated or padded")
    (checksum,) = struct.unpack_from("<Q", data, pos + len(payload))
    if fnv1a64(payload) != checksum:
        raise KeyIntegrityError("key checksum mismatch")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    mlps, off = {}, 0
    for name, d_in, h, d_out in table:
        if h != HIDDEN_UNITS:
            raise KeyIntegrityError(f"{name}: unexpected hidden width {h}")
        m = MLP.__new__(MLP)
        m._tensors = None
        m.params = {}
        for pname, shape in (("W1", (d_in, h)), ("b1", (h,)), ("W2", (h, d_out)), ("b2", (d_out,))):
            size = int(np.prod(shape))
            m.params[pname] = flat[off:off + size].reshape(shape).copy()
            off += size
        mlps[name] = m
    missing = [n for n in KEY_ORDER[:5] if n not in mlps]
    if missing:
        raise KeyIntegrityError(f"key lacks decoders {missing}")
    return KeyBundle(k=k_file, F_o=mlps["F_o"], F_c=mlps["F_c"], F_alpha=mlps["F_alpha"],
                     F_q=mlps["F_q"], F_s=mlps["F_s"], F_b=mlps.get("F_b"), version=version,
                     checksum=checksum)


def read_key(path, k: int | None = None, n_bits: int | None = None) -> KeyBundle:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ContainerError(f"cannot read key {path}: {exc}") from exc
    return parse_key(data, k=k, n_bits=n_bits)


# --------------------------------------------------------- public decoders

def decoder_bytes(dec) -> bytes:
    """Public decoder weights, shipped alongside the container (npz).

    Zip entries carry a fixed timestamp so identical weights give identical bytes.
    """
    arrays = {f"{name}.{p}": v for name, m in dec.mlps().items() for p, v in m.params.items()}
    arrays["k"] = np.array(dec.k)
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            with zf.open(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), "w") as fh:
                np.lib.format.write_array(fh, np.asarray(arr), allow_pickle=False)
    return buf.getvalue()


def write_decoders(dec, path) -> Path:
    path = Path(path)
    path.write_bytes(decoder_bytes(dec))
    return path


def read_decoders(path):
    from .scene import DecoderSet
    with np.load(path) as z:
        k = int(z["k"])
        mlps = {}
        for name in ("F_w", "F_c", "F_alpha", "F_q", "F_s"):
            m = MLP.__new__(MLP)
            m._tensors = None
            m.params = {p: z[f"{name}.{p}"].copy() for p in ("W1", "b1", "W2", "b2")}
            mlps[name] = m
    return DecoderSet(k=k, **mlps)
