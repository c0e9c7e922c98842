"""File formats: volumes (raw f32 + JSON sidecar, minimal NIfTI-1 reader),
coefficient and peak tables, and the FODC binary record stream."""
from __future__ import annotations

import csv
import gzip
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

FODC_MAGIC = b"FODC"
FODC_VERSION = 1

_NIFTI_DTYPES = {
    2: "u1",
    4: "i2",
    8: "i4",
    16: "f4",
    64: "f8",
    256: "i1",
    512: "u2",
}


class VolumeFormatError(ValueError):
    """Unreadable or inconsistent volume file."""


@dataclass
class Volume:
    """A 4-D (or 3-D) image with voxel sizes in mm.

    ``data`` has shape ``(nx, ny, nz[, frames])``.
    """

    data: np.ndarray
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape[:3])

    @property
    def frame_count(self) -> int:
        return int(self.data.shape[3]) if self.data.ndim == 4 else 1


# --------------------------------------------------------------------------
# raw + sidecar

def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json") if path.suffix != ".json" else path


def write_raw_volume(path, data: np.ndarray, voxel_size=(1.0, 1.0, 1.0)) -> None:
    """Little-endian f32 in C order with a ``<path>.json`` sidecar."""
    path = Path(path)
    data = np.asarray(data)
    if data.ndim not in (3, 4):
        raise ValueError("volume must be 3-D or 4-D")
    path.write_bytes(np.ascontiguousarray(data, dtype="<f4").tobytes())
    meta = {"dims": list(data.shape[:3]), "voxel_size": [float(v) for v in voxel_size],
            "frame_count": int(data.shape[3]) if data.ndim == 4 else 1}
    _sidecar(path).write_text(json.dumps(meta, indent=2))


def read_raw_volume(path) -> Volume:
    path = Path(path)
    side = _sidecar(path)
    try:
        meta = json.loads(side.read_text())
        dims = [int(d) for d in meta["dims"]]
        frames = int(meta.get("frame_count", 1))
        vox = tuple(float(v) for v in meta.get("voxel_size", (1, 1, 1)))
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise VolumeFormatError(f"bad or missing sidecar {side}: {exc}") from exc
    if len(dims) != 3 or min(dims) < 1 or frames < 1:
        raise VolumeFormatError(f"sidecar {side} has invalid dims/frame_count")
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    shape = tuple(dims) + ((frames,) if frames > 1 else ())
    if raw.size != int(np.prod(shape)):
        raise VolumeFormatError(f"{path}: {raw.size} values, sidecar implies {int(np.prod(shape))}")
    return Volume(raw.reshape(shape).astype(np.float64), vox)


# --------------------------------------------------------------------------
# NIfTI-1

def _nifti_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_nifti(path) -> Volume:
    """Minimal NIfTI-1 reader (single file ``.nii`` / ``.nii.gz``).

    Supports the common integer and floating data types, both byte orders and
    ``scl_slope``/``scl_inter`` scaling.  Orientation matrices are ignored.
    """
    path = Path(path)
    raw = _nifti_bytes(path)
    if len(raw) < 348:
        raise VolumeFormatError(f"{path}: shorter than a NIfTI-1 header")
    for endian in "<>":
        if struct.unpack(endian + "i", raw[:4])[0] == 348:
            break
    else:
        raise VolumeFormatError(f"{path}: sizeof_hdr is not 348")
    if raw[344:348] not in (b"n+1\x00", b"ni1\x00"):
        raise VolumeFormatError(f"{path}: missing NIfTI-1 magic")
    if raw[344:348] == b"ni1\x00":
        raise VolumeFormatError(f"{path}: two-file NIfTI pairs are not supported")
    dim = struct.unpack(endian + "8h", raw[40:56])
    datatype, _bitpix = struct.unpack(endian + "hh", raw[70:74])
    pixdim = struct.unpack(endian + "8f", raw[76:108])
    vox_offset, slope, inter = struct.unpack(endian + "3f", raw[108:120])
    ndim = dim[0]
    if not 3 <= ndim <= 4:
        raise VolumeFormatError(f"{path}: only 3-D/4-D images supported (dim[0]={ndim})")
    if datatype not in _NIFTI_DTYPES:
        raise VolumeFormatError(f"{path}: unsupported NIfTI datatype {datatype}")
    shape = tuple(int(d) for d in dim[1:ndim + 1])
    if ndim == 4 and shape[3] == 1:
        shape = shape[:3]
    dt = np.dtype(endian + _NIFTI_DTYPES[datatype])
    count = int(np.prod(shape))
    off = int(vox_offset)
    if off + count * dt.itemsize > len(raw):
        raise VolumeFormatError(f"{path}: file truncated")
    data = np.frombuffer(raw, dtype=dt, count=count, offset=off).astype(np.float64)
    data = data.reshape(shape, order="F")
    if slope not in (0.0,) and np.isfinite(slope) and (slope != 1.0 or inter != 0.0):
        data = data * slope + inter
    return Volume(data, tuple(float(p) for p in pixdim[1:4]))


def write_nifti(path, data: np.ndarray, voxel_size=(1.0, 1.0, 1.0)) -> None:
    """Write a little-endian f32 NIfTI-1 file.

    Used to build fixtures; real pipelines only need the reader.
    """
    data = np.asarray(data, dtype="<f4")
    hdr = bytearray(352)
    struct.pack_into("<i", hdr, 0, 348)
    dims = [data.ndim] + list(data.shape) + [1] * (7 - data.ndim)
    struct.pack_into("<8h", hdr, 40, *dims)
    struct.pack_into("<hh", hdr, 70, 16, 32)
    struct.pack_into("<8f", hdr, 76, 1.0, *voxel_size, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<3f", hdr, 108, 352.0, 1.0, 0.0)
    hdr[344:348] = b"n+1\x00"
    payload = bytes(hdr) + data.tobytes(order="F")
    path = Path(path)
    if path.name.endswith(".gz"):
        payload = gzip.compress(payload, mtime=0)
    path.write_bytes(payload)


def read_volume(path) -> Volume:
    """Dispatch on extension: ``.nii``/``.nii.gz`` or raw with a JSON sidecar."""
    path = Path(path)
    if not path.exists():
        raise VolumeFormatError(f"{path}: no such file")
    if path.name.endswith((".nii", ".nii.gz")):
        return read_nifti(path)
    return read_raw_volume(path)


# --------------------------------------------------------------------------
# coefficient and peak tables

def coefficient_header(l_max: int) -> list[str]:
    from .sphere import n_coefficients

    return ["voxel_id", "estimator", "l_max"] + [f"c{j}" for j in range(n_coefficients(l_max))]


def write_coefficients_csv(path, rows: Iterable[tuple[int, str, int, np.ndarray]], l_max: int) -> int:
    """Rows ``(voxel_id, estimator, l_max, coefficients)``; returns the count."""
    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(coefficient_header(l_max))
        for vid, est, lm, coef in rows:
            w.writerow([vid, est, lm] + [repr(float(c)) for c in coef])
            n += 1
    return n


def read_coefficients_csv(path) -> list[tuple[int, str, int, np.ndarray]]:
    out = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        for row in r:
            out.append((int(row[0]), row[1], int(row[2]), np.array(row[3:], dtype=np.float64)))
    return out


def write_fodc(path, coefficients: Sequence[np.ndarray], l_max: int) -> None:
    """Binary records: ``b"FODC"``, u16 version, u16 l_max, L little-endian f64.

    One record per voxel in the same order as the CSV rows.
    """
    from .sphere import n_coefficients

    L = n_coefficients(l_max)
    head = FODC_MAGIC + struct.pack("<HH", FODC_VERSION, l_max)
    with open(path, "wb") as fh:
        for c in coefficients:
            c = np.asarray(c, dtype="<f8")
            if c.shape != (L,):
                raise ValueError(f"record has {c.size} coefficients, expected {L}")
            fh.write(head)
            fh.write(c.tobytes())


def iter_fodc(path) -> Iterator[tuple[int, np.ndarray]]:
    from .sphere import n_coefficients

    data = Path(path).read_bytes()
    pos = 0
    while pos < len(data):
        if data[pos:pos + 4] != FODC_MAGIC:
            raise VolumeFormatError(f"{path}: bad FODC magic at byte {pos}")
        version, l_max = struct.unpack_from("<HH", data, pos + 4)
        if version != FODC_VERSION:
            raise VolumeFormatError(f"{path}: unsupported FODC version {version}")
        L = n_coefficients(l_max)
        end = pos + 8 + 8 * L
        if end > len(data):
            raise VolumeFormatError(f"{path}: truncated record at byte {pos}")
        yield l_max, np.frombuffer(data, dtype="<f8", count=L, offset=pos + 8).copy()
        pos = end


def write_peaks_csv(path, rows: Iterable[tuple[int, Sequence]]) -> int:
    """Rows ``(voxel_id, peaks)``; writes one line per peak."""
    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["voxel_id", "rank", "x", "y", "z", "value"])
        for vid, peaks in rows:
            for p in peaks:
                x, y, z = (repr(float(v)) for v in p.direction)
                w.writerow([vid, p.rank, x, y, z, repr(float(p.value))])
                n += 1
    return n


def read_peaks_csv(path) -> dict[int, list[tuple[np.ndarray, float]]]:
    out: dict[int, list] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            d = np.array([float(row["x"]), float(row["y"]), float(row["z"])])
            out.setdefault(int(row["voxel_id"]), []).append((d, float(row["value"])))
    return out


def write_signals_csv(path, signals: np.ndarray, ids: Sequence | None = None) -> None:
    """Signal vectors as CSV rows keyed by replicate id."""
    S = np.atleast_2d(signals)
    ids = range(len(S)) if ids is None else ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["replicate"] + [f"s{j}" for j in range(S.shape[1])])
        for i, row in zip(ids, S):
            w.writerow([i] + [repr(float(v)) for v in row])


def load_config_document(path) -> dict:
    """Parse a TOML or JSON document by extension."""
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # python < 3.11
            import tomli as tomllib
        return tomllib.loads(text)
    return json.loads(text)
