"""CT volume loading, candidate records and world/voxel geometry.

Voxel arrays are stored z-major, ``voxels[z, y, x]``, while spacing and
origin keep the MetaImage header order ``(x, y, z)``.  The conversion
helpers take care of the axis mapping, so callers always pass and receive
``(x, y, z)`` triples.
"""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

NODULE = 1
NON_NODULE = 0

# MetaImage element types we know how to read, mapped to numpy kinds.
_ELEMENT_TYPES = {
    "MET_CHAR": "i1",
    "MET_UCHAR": "u1",
    "MET_SHORT": "i2",
    "MET_USHORT": "u2",
    "MET_INT": "i4",
    "MET_UINT": "u4",
    "MET_LONG": "i8",
    "MET_ULONG": "u8",
    "MET_FLOAT": "f4",
    "MET_DOUBLE": "f8",
}
_NUMPY_TO_MET = {np.dtype(v).newbyteorder("<").str: k for k, v in _ELEMENT_TYPES.items()}


class MetaImageError(ValueError):
    """Raised for a malformed MetaImage header; ``key`` names the field."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class UnsupportedElementType(MetaImageError):
    pass


@dataclass(frozen=True, eq=False)
class Volume:
    """One CT series: HU voxels plus physical geometry."""

    voxels: np.ndarray
    spacing_mm: tuple[float, float, float]
    origin_mm: tuple[float, float, float]
    series_id: str
    slice_thickness_mm: Optional[float] = None

    def __post_init__(self):
        vox = np.asarray(self.voxels)
        if vox.ndim != 3 or min(vox.shape) < 1:
            raise ValueError(f"voxel array must be 3D with every axis >= 1, got {vox.shape}")
        spacing = tuple(float(s) for s in self.spacing_mm)
        origin = tuple(float(o) for o in self.origin_mm)
        if len(spacing) != 3 or len(origin) != 3:
            raise ValueError("spacing_mm and origin_mm need three components (x, y, z)")
        if not all(s > 0 for s in spacing):
            raise ValueError(f"spacing must be positive, got {spacing}")
        vox.setflags(write=False)
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "origin_mm", origin)
        if self.slice_thickness_mm is None:
            object.__setattr__(self, "slice_thickness_mm", spacing[2])
        elif self.slice_thickness_mm <= 0:
            raise ValueError("slice_thickness_mm must be positive")

    @property
    def shape_xyz(self) -> tuple[int, int, int]:
        z, y, x = self.voxels.shape
        return x, y, z


@dataclass(frozen=True)
class Candidate:
    series_id: str
    world_mm: tuple[float, float, float]
    label: Optional[int] = None
    probability: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "world_mm", tuple(float(c) for c in self.world_mm))
        if len(self.world_mm) != 3:
            raise ValueError("world_mm needs three components (x, y, z)")
        if self.label is not None:
            if self.label not in (NODULE, NON_NODULE):
                raise ValueError(f"label must be 0 or 1, got {self.label!r}")
            object.__setattr__(self, "label", int(self.label))
        if self.probability is not None:
            p = float(self.probability)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability must lie in [0, 1], got {p}")
            object.__setattr__(self, "probability", p)

    @property
    def is_nodule(self) -> bool:
        return self.label == NODULE


# --------------------------------------------------------------------------
# MetaImage


def _parse_header(text: str, path: Path) -> dict[str, str]:
    header = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if "=" not in line:
            raise MetaImageError("<line %d>" % lineno, f"expected 'key = value' in {path}")
        key, value = line.split("=", 1)
        header[key.strip()] = value.strip()
        if key.strip() == "ElementDataFile":
            break
    return header


def _floats(header: dict, key: str, n: int) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in header[key].split())
    except ValueError:
        raise MetaImageError(key, f"not numeric: {header[key]!r}") from None
    if len(vals) != n:
        raise MetaImageError(key, f"expected {n} values, got {len(vals)}")
    return vals


def _first_key(header: dict, *keys: str) -> Optional[str]:
    for k in keys:
        if k in header:
            return k
    return None


def load_volume(path: str | os.PathLike, series_id: Optional[str] = None) -> Volume:
    """Read a MetaImage ``.mhd``/``.raw`` pair (or a single ``.mha``).

    ``series_id`` defaults to the file stem, which is how the LUNA16
    distribution names its series.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"MetaImage header not found: {path}")
    blob = path.read_bytes()
    # header is ASCII and terminated by the ElementDataFile line
    marker = blob.find(b"ElementDataFile")
    if marker < 0:
        raise MetaImageError("ElementDataFile", f"missing in {path}")
    line_end = blob.find(b"\n", marker)
    line_end = len(blob) if line_end < 0 else line_end + 1
    try:
        header = _parse_header(blob[:line_end].decode("ascii"), path)
    except UnicodeDecodeError:
        raise MetaImageError("<header>", f"non-ASCII header in {path}") from None

    ndims = int(header.get("NDims", "3"))
    if ndims != 3:
        raise MetaImageError("NDims", f"only 3D volumes are supported, got {ndims}")
    if "DimSize" not in header:
        raise MetaImageError("DimSize", f"missing in {path}")
    dims = tuple(int(d) for d in _floats(header, "DimSize", 3))
    if min(dims) < 1:
        raise MetaImageError("DimSize", f"non-positive dimension {dims}")

    etype = header.get("ElementType")
    if etype is None:
        raise MetaImageError("ElementType", f"missing in {path}")
    if etype not in _ELEMENT_TYPES:
        raise UnsupportedElementType("ElementType", f"unsupported element type {etype!r}")
    if int(header.get("ElementNumberOfChannels", "1")) != 1:
        raise MetaImageError("ElementNumberOfChannels", "multi-channel images are not supported")

    spacing_key = _first_key(header, "ElementSpacing", "ElementSize")
    spacing = _floats(header, spacing_key, 3) if spacing_key else (1.0, 1.0, 1.0)
    if min(spacing) <= 0:
        raise MetaImageError(spacing_key, f"spacing must be positive, got {spacing}")
    origin_key = _first_key(header, "Offset", "Origin", "Position")
    origin = _floats(header, origin_key, 3) if origin_key else (0.0, 0.0, 0.0)

    if "TransformMatrix" in header:
        matrix = np.array(_floats(header, "TransformMatrix", 9)).reshape(3, 3)
        if not np.allclose(matrix, np.eye(3)):
            log.warning("%s: non-identity TransformMatrix ignored; axis-aligned geometry assumed", path)

    order_key = _first_key(header, "BinaryDataByteOrderMSB", "ElementByteOrderMSB")
    msb = False
    if order_key:
        flag = header[order_key].lower()
        if flag not in ("true", "false"):
            raise MetaImageError(order_key, f"expected True/False, got {header[order_key]!r}")
        msb = flag == "true"
    if header.get("CompressedData", "False").lower() == "true":
        raise MetaImageError("CompressedData", "compressed pixel data is not supported")

    dtype = np.dtype(_ELEMENT_TYPES[etype]).newbyteorder(">" if msb else "<")
    data_file = header["ElementDataFile"]
    if data_file == "LOCAL":
        raw = blob[line_end:]
    else:
        raw_path = path.parent / data_file
        if not raw_path.is_file():
            raise FileNotFoundError(f"raw data file named by ElementDataFile not found: {raw_path}")
        raw = raw_path.read_bytes()
    x, y, z = dims
    expected = x * y * z * dtype.itemsize
    if len(raw) < expected:
        raise MetaImageError("DimSize", f"{path}: raw data holds {len(raw)} bytes, header implies {expected}")
    voxels = np.frombuffer(raw, dtype=dtype, count=x * y * z).reshape(z, y, x)
    voxels = voxels.astype(dtype.newbyteorder("="))
    return Volume(
        voxels=voxels,
        spacing_mm=spacing,
        origin_mm=origin,
        series_id=series_id if series_id is not None else path.stem,
        slice_thickness_mm=spacing[2],
    )


def save_volume(volume: Volume, path: str | os.PathLike) -> Path:
    """Write ``volume`` as ``<path>.mhd`` + ``<path>.raw`` (little endian)."""
    path = Path(path).with_suffix(".mhd")
    raw_path = path.with_suffix(".raw")
    vox = np.ascontiguousarray(volume.voxels)
    le = vox.dtype.newbyteorder("<")
    try:
        etype = _NUMPY_TO_MET[le.str]
    except KeyError:
        raise UnsupportedElementType("ElementType", f"cannot write dtype {vox.dtype}") from None
    x, y, z = volume.shape_xyz
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "CompressedData = False",
        "TransformMatrix = 1 0 0 0 1 0 0 0 1",
        "Offset = " + " ".join(repr(float(o)) for o in volume.origin_mm),
        "CenterOfRotation = 0 0 0",
        "AnatomicalOrientation = RAI",
        "ElementSpacing = " + " ".join(repr(float(s)) for s in volume.spacing_mm),
        f"DimSize = {x} {y} {z}",
        f"ElementType = {etype}",
        f"ElementDataFile = {raw_path.name}",
    ]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    raw_path.write_bytes(vox.astype(le, copy=False).tobytes())
    return path


def filter_by_thickness(volumes: Iterable[Volume], max_mm: float = 2.5) -> list[Volume]:
    """Keep volumes whose slice thickness does not exceed ``max_mm``."""
    if max_mm <= 0:
        raise ValueError("max_mm must be positive")
    return [v for v in volumes if v.slice_thickness_mm <= max_mm]


def world_to_voxel(volume: Volume, world_mm: Sequence[float]) -> np.ndarray:
    """Continuous voxel coordinates ``(x, y, z)`` of a world point (mm).

    Index ``voxels[z, y, x]`` with the reversed result to address the array.
    """
    w = np.asarray(world_mm, dtype=np.float64)
    return (w - np.asarray(volume.origin_mm)) / np.asarray(volume.spacing_mm)


def voxel_to_world(volume: Volume, voxel: Sequence[float]) -> np.ndarray:
    v = np.asarray(voxel, dtype=np.float64)
    return v * np.asarray(volume.spacing_mm) + np.asarray(volume.origin_mm)


# --------------------------------------------------------------------------
# candidate CSV

CANDIDATE_FIELDS = ("seriesuid", "coordX", "coordY", "coordZ", "class")


def read_candidates(path: str | os.PathLike) -> list[Candidate]:
    """Read a ``seriesuid,coordX,coordY,coordZ,class`` file."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CANDIDATE_FIELDS[:4]) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            label = row.get("class")
            out.append(
                Candidate(
                    series_id=row["seriesuid"],
                    world_mm=(float(row["coordX"]), float(row["coordY"]), float(row["coordZ"])),
                    label=None if label in (None, "") else int(float(label)),
                )
            )
    return out


def write_candidates(candidates: Iterable[Candidate], path: str | os.PathLike) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CANDIDATE_FIELDS)
        for c in candidates:
            x, y, z = c.world_mm
            writer.writerow([c.series_id, repr(x), repr(y), repr(z), "" if c.label is None else c.label])
    return path


def load_series_dir(directory: str | os.PathLike) -> dict[str, Volume]:
    """Load every ``*.mhd`` under ``directory`` keyed by series id."""
    return {p.stem: load_volume(p) for p in sorted(Path(directory).glob("*.mhd"))}


__all__ = [
    "NODULE",
    "NON_NODULE",
    "Volume",
    "Candidate",
    "MetaImageError",
    "UnsupportedElementType",
    "load_volume",
    "save_volume",
    "filter_by_thickness",
    "world_to_voxel",
    "voxel_to_world",
    "read_candidates",
    "write_candidates",
    "load_series_dir",
]
