"""File formats: a NIfTI-1 subset, the network model container, the dataset
manifest and the statistics CSV.

NIfTI files are single-file (``.nii``, optionally gzipped as ``.nii.gz``),
little-endian, with a 348-byte header and no extensions. Supported
datatypes are uint8 (2), int16 (4) and float32 (16). Label volumes are
written as uint8 with intent code 1002 (NIFTI_INTENT_LABEL) and come back
as :class:`LabelVolume`; everything else is read as an
:class:`IntensityVolume`.
"""
from __future__ import annotations

import csv
import gzip
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .volcore import TISSUES, IntensityVolume, LabelVolume


class NiftiError(ValueError):
    """Malformed or unsupported NIfTI file."""


class ModelFormatError(ValueError):
    """Malformed network model file."""


class ModelVersionError(ModelFormatError):
    """Model file written by an incompatible format version."""


HEADER_SIZE = 348
VOX_OFFSET = 352
INTENT_LABEL = 1002

DATATYPES = {2: np.dtype("<u1"), 4: np.dtype("<i2"), 16: np.dtype("<f4")}
DATATYPE_CODES = {"uint8": 2, "int16": 4, "float32": 16}
_CODE_NAMES = {v: k for k, v in DATATYPE_CODES.items()}

_HDR = np.dtype([
    ("sizeof_hdr", "<i4"), ("data_type", "S10"), ("db_name", "S18"),
    ("extents", "<i4"), ("session_error", "<i2"), ("regular", "S1"),
    ("dim_info", "u1"), ("dim", "<i2", (8,)), ("intent_p1", "<f4"),
    ("intent_p2", "<f4"), ("intent_p3", "<f4"), ("intent_code", "<i2"),
    ("datatype", "<i2"), ("bitpix", "<i2"), ("slice_start", "<i2"),
    ("pixdim", "<f4", (8,)), ("vox_offset", "<f4"), ("scl_slope", "<f4"),
    ("scl_inter", "<f4"), ("slice_end", "<i2"), ("slice_code", "u1"),
    ("xyzt_units", "u1"), ("cal_max", "<f4"), ("cal_min", "<f4"),
    ("slice_duration", "<f4"), ("toffset", "<f4"), ("glmax", "<i4"),
    ("glmin", "<i4"), ("descrip", "S80"), ("aux_file", "S24"),
    ("qform_code", "<i2"), ("sform_code", "<i2"), ("quatern_b", "<f4"),
    ("quatern_c", "<f4"), ("quatern_d", "<f4"), ("qoffset_x", "<f4"),
    ("qoffset_y", "<f4"), ("qoffset_z", "<f4"), ("srow_x", "<f4", (4,)),
    ("srow_y", "<f4", (4,)), ("srow_z", "<f4", (4,)), ("intent_name", "S16"),
    ("magic", "S4"),
])
assert _HDR.itemsize == HEADER_SIZE


@dataclass(frozen=True)
class VolumeHeader:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    datatype: str = "float32"
    scale: float = 1.0
    intercept: float = 0.0
    # Orientation of the stored array axes, e.g. "RAS" or "LPS".
    orientation: str = "RAS"
    is_label: bool = False
    modality: str = "T1"

    def __post_init__(self):
        if self.datatype not in DATATYPE_CODES:
            raise ValueError(f"unsupported datatype {self.datatype!r}")


def _open(path, mode):
    path = os.fspath(path)
    if path.endswith(".gz"):
        if "w" in mode:
            # fixed mtime keeps repeated writes byte-identical
            return gzip.GzipFile(path, mode, mtime=0)
        return gzip.open(path, mode)
    return open(path, mode)


_AXIS_LETTERS = ("LR", "PA", "IS")


def _orientation_from_matrix(m: np.ndarray) -> str:
    """Axis codes ("RAS", "LPI", ...) of an axis-aligned 3x3 direction matrix."""
    codes = []
    used = set()
    for col in range(3):
        v = m[:, col]
        world = int(np.argmax(np.abs(v)))
        if world in used or np.abs(v[world]) == 0:
            raise NiftiError("orientation: degenerate direction matrix")
        off = np.abs(np.delete(v, world))
        if np.any(off > 1e-4 * np.abs(v[world])):
            raise NiftiError("orientation: oblique axes are not supported")
        used.add(world)
        codes.append(_AXIS_LETTERS[world][1 if v[world] > 0 else 0])
    return "".join(codes)


def _quaternion_matrix(b, c, d) -> np.ndarray:
    a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    return np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ])


def to_ras(data: np.ndarray, orientation: str) -> np.ndarray:
    """Permute/flip array axes from ``orientation`` to canonical RAS."""
    src_world = []
    for code in orientation:
        for w, letters in enumerate(_AXIS_LETTERS):
            if code in letters:
                src_world.append((w, code == letters[1]))
    order = [next(i for i, (w, _) in enumerate(src_world) if w == k) for k in range(3)]
    out = np.transpose(data, order)
    for k, i in enumerate(order):
        if not src_world[i][1]:
            out = np.flip(out, axis=k)
    return out


def _parse_header(raw: bytes, path) -> tuple[np.void, VolumeHeader, np.ndarray]:
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"{path}: truncated header ({len(raw)} of {HEADER_SIZE} bytes)")
    h = np.frombuffer(raw[:HEADER_SIZE], dtype=_HDR)[0]
    if int(h["sizeof_hdr"]) != HEADER_SIZE:
        raise NiftiError(f"{path}: bad header size {int(h['sizeof_hdr'])} (expected 348)")
    if bytes(h["magic"]) != b"n+1":
        raise NiftiError(f"{path}: bad magic {bytes(h['magic'])!r} (expected b'n+1\\x00')")
    code = int(h["datatype"])
    if code not in DATATYPES:
        raise NiftiError(f"{path}: unsupported datatype code {code}")
    dim = h["dim"]
    ndim = int(dim[0])
    if not 1 <= ndim <= 7 or any(int(d) != 1 for d in dim[4:ndim + 1]) or np.any(dim[1:4] < 1):
        raise NiftiError(f"{path}: bad dim field {dim.tolist()} (need a 3D volume)")
    dims = tuple(int(d) if i < ndim else 1 for i, d in enumerate(dim[1:4]))
    pixdim = h["pixdim"]
    if int(h["sform_code"]) > 0:
        m = np.stack([h["srow_x"][:3], h["srow_y"][:3], h["srow_z"][:3]]).astype(float)
    elif int(h["qform_code"]) > 0:
        qfac = -1.0 if pixdim[0] < 0 else 1.0
        r = _quaternion_matrix(float(h["quatern_b"]), float(h["quatern_c"]), float(h["quatern_d"]))
        m = r * np.array([pixdim[1], pixdim[2], pixdim[3] * qfac])
    else:
        m = np.diag(pixdim[1:4]).astype(float)
    orient = _orientation_from_matrix(m)
    spacing = tuple(float(abs(p)) for p in pixdim[1:4])
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise NiftiError(f"{path}: bad pixdim {pixdim[1:4].tolist()}")
    slope = float(h["scl_slope"])
    inter = float(h["scl_inter"])
    if slope == 0 or not np.isfinite(slope):
        slope, inter = 1.0, 0.0
    if not np.isfinite(inter):
        inter = 0.0
    descrip = bytes(h["descrip"]).split(b"\0")[0].decode("ascii", "replace")
    modality = "T2" if "modality=T2" in descrip else "T1"
    header = VolumeHeader(
        dims=dims, spacing=spacing, datatype=_CODE_NAMES[code], scale=slope,
        intercept=inter, orientation=orient,
        is_label=int(h["intent_code"]) == INTENT_LABEL, modality=modality,
    )
    return h, header, m


def read_nifti_header(path) -> VolumeHeader:
    with _open(path, "rb") as fh:
        raw = fh.read(HEADER_SIZE)
    return _parse_header(raw, path)[1]


def read_nifti(path) -> IntensityVolume | LabelVolume:
    """Read a NIfTI-1 file, apply scl_slope/scl_inter and reorient to RAS."""
    with _open(path, "rb") as fh:
        raw = fh.read()
    h, header, _ = _parse_header(raw, path)
    dt = DATATYPES[DATATYPE_CODES[header.datatype]]
    offset = int(h["vox_offset"])
    if offset < HEADER_SIZE:
        raise NiftiError(f"{path}: bad vox_offset {offset}")
    n = int(np.prod(header.dims))
    need = n * dt.itemsize
    payload = raw[offset:offset + need]
    if len(payload) != need:
        raise NiftiError(f"{path}: truncated payload ({len(payload)} of {need} bytes)")
    arr = np.frombuffer(payload, dtype=dt).reshape(header.dims, order="F")
    if dt.kind == "f" and not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise NiftiError(f"{path}: non-finite voxel at index {tuple(int(i) for i in bad)}")
    arr = to_ras(arr, header.orientation)
    spacing = _ras_spacing(header)
    if header.is_label and header.datatype == "uint8" and header.scale == 1.0 and header.intercept == 0.0:
        return LabelVolume(np.array(arr, dtype=np.uint8), spacing)
    if header.scale == 1.0 and header.intercept == 0.0:
        data = np.array(arr, dtype=np.float32)
    else:
        data = arr.astype(np.float64) * header.scale + header.intercept
    return IntensityVolume(data, spacing, header.modality)


def _ras_spacing(header: VolumeHeader) -> tuple[float, float, float]:
    out = [0.0, 0.0, 0.0]
    for i, code in enumerate(header.orientation):
        w = next(k for k, letters in enumerate(_AXIS_LETTERS) if code in letters)
        out[w] = header.spacing[i]
    return tuple(out)


def write_nifti(vol: IntensityVolume | LabelVolume, path, datatype: str | None = None,
                scale: float = 1.0, intercept: float = 0.0) -> VolumeHeader:
    """Write ``vol`` as a single-file NIfTI-1 volume in RAS orientation.

    Labels are always stored as uint8. Intensities default to float32; with
    ``datatype="int16"`` values are stored as ``round((v - intercept) / scale)``.
    """
    is_label = isinstance(vol, LabelVolume)
    if is_label:
        if datatype not in (None, "uint8"):
            raise ValueError("label volumes are written as uint8")
        datatype, scale, intercept = "uint8", 1.0, 0.0
        raw = vol.labels
        modality = ""
    else:
        datatype = datatype or "float32"
        if datatype not in DATATYPE_CODES:
            raise ValueError(f"unsupported datatype {datatype!r}")
        if scale == 0 or not np.isfinite(scale):
            raise ValueError("scale must be finite and non-zero")
        dt = DATATYPES[DATATYPE_CODES[datatype]]
        if dt.kind == "f":
            raw = ((vol.data - intercept) / scale) if (scale, intercept) != (1.0, 0.0) else vol.data
        else:
            raw = np.round((np.asarray(vol.data, dtype=np.float64) - intercept) / scale)
            info = np.iinfo(dt)
            if raw.min() < info.min or raw.max() > info.max:
                raise ValueError(f"values do not fit {datatype} with scale={scale}, intercept={intercept}")
        modality = f"modality={vol.modality}"
    dt = DATATYPES[DATATYPE_CODES[datatype]]
    header = VolumeHeader(vol.dims, vol.spacing, datatype, float(scale), float(intercept),
                          "RAS", is_label, "T1" if is_label else vol.modality)
    h = np.zeros((), dtype=_HDR)
    h["sizeof_hdr"] = HEADER_SIZE
    h["regular"] = b"r"
    h["dim"] = [3, *vol.dims, 1, 1, 1, 1]
    h["datatype"] = DATATYPE_CODES[datatype]
    h["bitpix"] = dt.itemsize * 8
    # geometry from the stored float32 spacing, so rewriting a read volume is byte-stable
    spacing = [float(np.float32(s)) for s in vol.spacing]
    h["pixdim"] = [1.0, *spacing, 0, 0, 0, 0]
    h["vox_offset"] = VOX_OFFSET
    h["scl_slope"] = scale
    h["scl_inter"] = intercept
    h["xyzt_units"] = 2  # mm
    h["intent_code"] = INTENT_LABEL if is_label else 0
    h["descrip"] = modality.encode("ascii")
    origin = [-(n - 1) * s / 2.0 for n, s in zip(vol.dims, spacing)]
    h["qform_code"] = 1
    h["sform_code"] = 1
    h["qoffset_x"], h["qoffset_y"], h["qoffset_z"] = origin
    sx, sy, sz = spacing
    h["srow_x"] = [sx, 0, 0, origin[0]]
    h["srow_y"] = [0, sy, 0, origin[1]]
    h["srow_z"] = [0, 0, sz, origin[2]]
    h["magic"] = b"n+1"
    payload = np.asarray(raw).astype(dt).tobytes(order="F")
    with _open(path, "wb") as fh:
        fh.write(h.tobytes())
        fh.write(b"\0\0\0\0")
        fh.write(payload)
    return header


# ---------------------------------------------------------------------------
# Network model container
# ---------------------------------------------------------------------------

MODEL_MAGIC = b"HSEGNET\0"
MODEL_FORMAT_VERSION = 1
_GROUPS = ("param", "m", "v")


def save_model(model, path) -> None:
    """Write a :class:`~headseg.forknet.NetworkModel`.

    Layout: 8-byte magic, uint32 format version, uint64 manifest length, a
    UTF-8 JSON manifest (config, step, tensor names/shapes/dtypes), then one
    ``uint64 nbytes + raw little-endian data`` record per tensor.
    """
    tensors = []
    blobs = []
    for group, store in zip(_GROUPS, (model.params, model.m, model.v)):
        for name, arr in store.items():
            arr = np.ascontiguousarray(arr)
            dt = arr.dtype.newbyteorder("<")
            tensors.append({"group": group, "name": name, "dtype": dt.str, "shape": list(arr.shape)})
            blobs.append(arr.astype(dt, copy=False).tobytes())
    manifest = {"config": model.config.to_dict(), "step": int(model.step), "tensors": tensors}
    text = json.dumps(manifest, indent=1).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<IQ", MODEL_FORMAT_VERSION, len(text)))
        fh.write(text)
        for blob in blobs:
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)


def load_model(path):
    from .forknet.network import NetworkConfig, NetworkModel

    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: not a model file (bad magic)")
    if len(raw) < 20:
        raise ModelFormatError(f"{path}: corrupted: truncated preamble")
    version, mlen = struct.unpack_from("<IQ", raw, 8)
    if version != MODEL_FORMAT_VERSION:
        raise ModelVersionError(
            f"{path}: model format version {version} is incompatible with reader version {MODEL_FORMAT_VERSION}")
    pos = 20
    if pos + mlen > len(raw):
        raise ModelFormatError(f"{path}: corrupted: manifest length {mlen} exceeds file size")
    try:
        manifest = json.loads(raw[pos:pos + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: corrupted manifest: {exc}") from None
    pos += mlen
    stores = {g: {} for g in _GROUPS}
    for t in manifest["tensors"]:
        if pos + 8 > len(raw):
            raise ModelFormatError(f"{path}: corrupted: missing record for {t['name']}")
        (n,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        dt = np.dtype(t["dtype"])
        expect = int(np.prod(t["shape"], dtype=np.int64)) * dt.itemsize
        if n != expect or pos + n > len(raw):
            raise ModelFormatError(
                f"{path}: corrupted: record {t['group']}:{t['name']} has length {n}, expected {expect}")
        arr = np.frombuffer(raw, dtype=dt, count=expect // dt.itemsize, offset=pos).reshape(t["shape"])
        stores[t["group"]][t["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
        pos += n
    if pos != len(raw):
        raise ModelFormatError(f"{path}: corrupted: {len(raw) - pos} trailing bytes")
    config = NetworkConfig.from_dict(manifest["config"])
    return NetworkModel(config, stores["param"], stores["m"], stores["v"], int(manifest["step"]))


# ---------------------------------------------------------------------------
# Dataset manifest
# ---------------------------------------------------------------------------

MANIFEST_FIELDS = ("id", "t1", "t2", "labels", "age", "sex", "height_m", "weight_kg")


@dataclass(frozen=True)
class SubjectEntry:
    id: str
    t1: Path
    t2: Path
    labels: Path | None
    age: float
    sex: str
    height_m: float
    weight_kg: float


def read_manifest(path, check_files: bool = True) -> list[SubjectEntry]:
    """Read a manifest CSV; relative paths resolve against its directory.

    Columns: ``id,t1,t2,labels,age,sex,height_m,weight_kg``. ``labels`` may
    be empty, ``sex`` is one of F, M or unknown.
    """
    base = Path(path).parent
    entries = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: manifest lacks columns {sorted(missing)}")
        for row in reader:
            sex = row["sex"].strip() or "unknown"
            if sex not in ("F", "M", "unknown"):
                raise ValueError(f"{path}: subject {row['id']}: bad sex {sex!r}")
            labels = row["labels"].strip()
            entries.append(SubjectEntry(
                id=row["id"].strip(), t1=base / row["t1"].strip(), t2=base / row["t2"].strip(),
                labels=base / labels if labels else None, age=float(row["age"]), sex=sex,
                height_m=float(row["height_m"]), weight_kg=float(row["weight_kg"]),
            ))
    ids = [e.id for e in entries]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise ValueError(f"{path}: duplicate subject ids {dup}")
    if check_files:
        for e in entries:
            for p in (e.t1, e.t2, e.labels):
                if p is not None and not p.exists():
                    raise FileNotFoundError(f"{path}: subject {e.id}: missing file {p}")
    return entries


def write_manifest(entries, path) -> None:
    base = Path(path).parent.resolve()

    def rel(p):
        if p is None:
            return ""
        p = Path(p).resolve()
        try:
            return p.relative_to(base).as_posix()
        except ValueError:
            return p.as_posix()

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for e in entries:
            w.writerow([e.id, rel(e.t1), rel(e.t2), rel(e.labels), repr(float(e.age)), e.sex,
                        repr(float(e.height_m)), repr(float(e.weight_kg))])


# ---------------------------------------------------------------------------
# Statistics CSV
# ---------------------------------------------------------------------------

def stats_columns() -> list[str]:
    cols = ["subject_id", "age", "sex", "bmi"]
    cols += [f"{t.label}_ml" for t in TISSUES]
    cols += [f"{t.label}_g" for t in TISSUES]
    cols += ["tiv_l", "gm_wm_ratio", "gm_wm_ratio_cerebrum"]
    return cols


def write_stats_csv(records, path) -> None:
    """One row per subject; fixed column order from :func:`stats_columns`."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(stats_columns())
        for r in records:
            row = [r.id, _num(r.age), r.sex, _num(r.bmi)]
            row += [_num(r.volumes_ml.get(t, 0.0)) for t in TISSUES]
            row += [_num(r.masses_g.get(t, float("nan"))) for t in TISSUES]
            row += [_num(r.tiv_l), _num(r.gm_wm_ratio), _num(r.gm_wm_ratio_cerebrum)]
            w.writerow(row)


def _num(x) -> str:
    x = float(x)
    return "" if not np.isfinite(x) else repr(x)


def read_stats_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
