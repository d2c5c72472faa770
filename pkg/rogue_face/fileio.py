"""File codecs: morphable basis (RGBM), coefficient vectors (RGCV), PPM/PGM images,
OBJ meshes with per-vertex color, loss-history CSV and JSON documents.

All binary formats are little-endian. Malformed input raises
:class:`~rogue_face.errors.FormatError` naming the byte offset where parsing failed.
"""

import csv
import json
import os
import pathlib
import struct
import typing as ty

import numpy as np

from .errors import FormatError, InvalidArgumentError
from .model import (
    COEFF_DIM,
    EXPRESSION_DIM,
    LANDMARK_COUNT,
    SHAPE_DIM,
    TEXTURE_DIM,
    CoefficientVector,
    MorphableBasis,
)

PathLike = ty.Union[str, os.PathLike]

BASIS_MAGIC = b"RGBM"
BASIS_VERSION = 1
COEFF_MAGIC = b"RGCV"

_BASIS_HEADER = struct.Struct("<4sIII")
_COEFF_HEADER = struct.Struct("<4sI")
_WHITESPACE = b" \t\n\r\x0b\x0c"


def _prepare(path: PathLike) -> pathlib.Path:
    path = pathlib.Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    return path


class _Reader:
    """Sequential reader over a byte buffer that reports offsets in errors."""

    def __init__(self, data: bytes, path: PathLike):
        self.data = data
        self.path = os.fspath(path)
        self.offset = 0

    def fail(self, reason: str, offset: ty.Optional[int] = None) -> FormatError:
        return FormatError(self.path, self.offset if offset is None else offset, reason)

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise self.fail(
                f"truncated {what}: need {size} bytes, {len(self.data) - self.offset} left"
            )
        chunk = self.data[self.offset : end]
        self.offset = end
        return chunk

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        raw = self.take(np.dtype(dtype).itemsize * count, what)
        return np.frombuffer(raw, dtype=dtype, count=count)

    def finish(self) -> None:
        if self.offset != len(self.data):
            raise self.fail(f"{len(self.data) - self.offset} unexpected trailing bytes")


# -- morphable basis ---------------------------------------------------------


def write_basis(basis: MorphableBasis, path: PathLike) -> None:
    """Write ``basis`` as an RGBM file; arrays are stored as float32."""
    path = _prepare(path)
    parts = [
        _BASIS_HEADER.pack(BASIS_MAGIC, BASIS_VERSION, basis.vertex_count, basis.triangle_count),
        basis.mean_geometry.astype("<f4").tobytes(),
        basis.mean_texture.astype("<f4").tobytes(),
    ]
    # column-major: the transpose of a C-ordered matrix
    for matrix in (basis.shape_basis, basis.expression_basis, basis.texture_basis):
        parts.append(np.ascontiguousarray(matrix.T).astype("<f4").tobytes())
    parts.append(basis.triangles.astype("<u4").tobytes())
    parts.append(basis.landmark_indices.astype("<u4").tobytes())
    path.write_bytes(b"".join(parts))


def read_basis(path: PathLike) -> MorphableBasis:
    reader = _Reader(pathlib.Path(path).read_bytes(), path)
    magic, version, vertex_count, triangle_count = _BASIS_HEADER.unpack(
        reader.take(_BASIS_HEADER.size, "header")
    )
    if magic != BASIS_MAGIC:
        raise reader.fail(f"bad magic {magic!r}, expected {BASIS_MAGIC!r}", 0)
    if version != BASIS_VERSION:
        raise reader.fail(f"unsupported basis format version {version}", 4)
    if vertex_count == 0:
        raise reader.fail("vertex_count is zero", 8)
    n3 = 3 * vertex_count

    def columns(count: int, what: str) -> np.ndarray:
        return reader.array("<f4", n3 * count, what).reshape(count, n3).T.astype(np.float64)

    body_start = reader.offset
    mean_geometry = reader.array("<f4", n3, "mean_geometry").astype(np.float64)
    mean_texture = reader.array("<f4", n3, "mean_texture").astype(np.float64)
    shape_basis = columns(SHAPE_DIM, "shape_basis")
    expression_basis = columns(EXPRESSION_DIM, "expression_basis")
    texture_basis = columns(TEXTURE_DIM, "texture_basis")
    triangles = reader.array("<u4", 3 * triangle_count, "triangles").astype(np.int64)
    landmarks_at = reader.offset
    landmarks = reader.array("<u4", LANDMARK_COUNT, "landmark_indices").astype(np.int64)
    reader.finish()
    try:
        return MorphableBasis(
            vertex_count=vertex_count,
            mean_geometry=mean_geometry,
            mean_texture=mean_texture,
            shape_basis=shape_basis,
            expression_basis=expression_basis,
            texture_basis=texture_basis,
            triangles=triangles.reshape(-1, 3),
            landmark_indices=landmarks,
        )
    except InvalidArgumentError as e:
        raise reader.fail(str(e), landmarks_at if "landmark" in str(e) else body_start) from e


# -- coefficient vectors -----------------------------------------------------


def write_coefficients(coeffs: CoefficientVector, path: PathLike) -> None:
    """RGCV: magic, u32 length, then float32 values."""
    values = np.asarray(coeffs, dtype=np.float64)
    path = _prepare(path)
    path.write_bytes(_COEFF_HEADER.pack(COEFF_MAGIC, values.size) + values.astype("<f4").tobytes())


def read_coefficients(path: PathLike) -> CoefficientVector:
    reader = _Reader(pathlib.Path(path).read_bytes(), path)
    magic, length = _COEFF_HEADER.unpack(reader.take(_COEFF_HEADER.size, "header"))
    if magic != COEFF_MAGIC:
        raise reader.fail(f"bad magic {magic!r}, expected {COEFF_MAGIC!r}", 0)
    if length != COEFF_DIM:
        raise reader.fail(f"coefficient length {length}, expected {COEFF_DIM}", 4)
    values = reader.array("<f4", length, "coefficients").astype(np.float64)
    reader.finish()
    if not np.all(np.isfinite(values)):
        raise reader.fail("coefficients contain non-finite values", _COEFF_HEADER.size)
    return CoefficientVector(values)


# -- PPM / PGM ---------------------------------------------------------------


def _quantize(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(image)):
        raise InvalidArgumentError("cannot encode an image with non-finite values")
    return np.clip(np.round(255.0 * image), 0, 255).astype(np.uint8)


def encode_ppm(image) -> bytes:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InvalidArgumentError(f"PPM needs an HxWx3 image, got {image.shape}")
    height, width = image.shape[:2]
    return f"P6\n{width} {height}\n255\n".encode("ascii") + _quantize(image).tobytes()


def encode_pgm(mask) -> bytes:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise InvalidArgumentError(f"PGM needs an HxW mask, got {mask.shape}")
    height, width = mask.shape
    body = np.where(mask, 255, 0).astype(np.uint8).tobytes()
    return f"P5\n{width} {height}\n255\n".encode("ascii") + body


def _netpbm_header(reader: _Reader, magic: bytes) -> ty.Tuple[int, int]:
    found = reader.take(2, "magic")
    if found != magic:
        raise reader.fail(f"bad magic {found!r}, expected {magic!r}", 0)
    fields = []
    while len(fields) < 3:
        start = reader.offset
        byte = reader.take(1, "header")
        if byte in _WHITESPACE:
            continue
        if byte == b"#":
            while reader.take(1, "header comment") not in b"\r\n":
                pass
            continue
        token = byte
        while True:
            if reader.offset >= len(reader.data):
                raise reader.fail("truncated header")
            byte = reader.data[reader.offset : reader.offset + 1]
            if byte in _WHITESPACE or byte == b"#":
                break
            token += reader.take(1, "header")
        if not token.isdigit():
            raise reader.fail(f"expected an unsigned integer, got {token!r}", start)
        fields.append((int(token), start))
    # exactly one whitespace byte separates maxval from the raster
    if reader.take(1, "header terminator") not in _WHITESPACE:
        raise reader.fail("header must end with a single whitespace byte", reader.offset - 1)
    (width, _), (height, _), (maxval, maxval_at) = fields
    if maxval != 255:
        raise reader.fail(f"maxval {maxval} not supported, expected 255", maxval_at)
    if width == 0 or height == 0:
        raise reader.fail("image has zero size", fields[0][1])
    return width, height


def decode_ppm(data: bytes, path: PathLike = "<bytes>") -> np.ndarray:
    reader = _Reader(data, path)
    width, height = _netpbm_header(reader, b"P6")
    raster = reader.array("u1", width * height * 3, "raster")
    reader.finish()
    return raster.reshape(height, width, 3).astype(np.float64) / 255.0


def decode_pgm(data: bytes, path: PathLike = "<bytes>") -> np.ndarray:
    reader = _Reader(data, path)
    width, height = _netpbm_header(reader, b"P5")
    raster = reader.array("u1", width * height, "raster")
    reader.finish()
    return raster.reshape(height, width) >= 128


def write_image(path: PathLike, image) -> None:
    """Write an HxWx3 float image in [0, 1] as binary PPM, quantized by round(255 x)."""
    _prepare(path).write_bytes(encode_ppm(image))


def read_image(path: PathLike) -> np.ndarray:
    return decode_ppm(pathlib.Path(path).read_bytes(), path)


def write_mask(path: PathLike, mask) -> None:
    _prepare(path).write_bytes(encode_pgm(mask))


def read_mask(path: PathLike) -> np.ndarray:
    return decode_pgm(pathlib.Path(path).read_bytes(), path)


# -- OBJ ---------------------------------------------------------------------


def write_obj(geometry, texture, triangles, path: PathLike) -> None:
    """Wavefront OBJ with ``v x y z r g b`` vertex lines and 1-based ``f`` lines."""
    vertices = np.asarray(geometry, dtype=np.float64).reshape(-1, 3)
    colors = None if texture is None else np.asarray(texture, dtype=np.float64).reshape(-1, 3)
    faces = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    if colors is not None and colors.shape != vertices.shape:
        raise InvalidArgumentError("texture must have one RGB triple per vertex")
    if faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
        raise InvalidArgumentError("triangle indices out of range")
    lines = ["# rogue-face mesh"]
    for i, v in enumerate(vertices):
        values = v if colors is None else np.concatenate([v, colors[i]])
        lines.append("v " + " ".join(f"{x:.9g}" for x in values))
    for a, b, c in faces + 1:
        lines.append(f"f {a} {b} {c}")
    _prepare(path).write_text("\n".join(lines) + "\n", encoding="ascii")


class ObjMesh(ty.NamedTuple):
    vertices: np.ndarray
    colors: ty.Optional[np.ndarray]
    triangles: np.ndarray


def read_obj(path: PathLike) -> ObjMesh:
    """Read vertices, optional per-vertex colors and triangular faces.

    Face entries of the form ``i/j/k`` keep only the vertex index.
    """
    vertices, colors, faces = [], [], []
    offset = 0
    with open(path, "rb") as f:
        for raw in f:
            line = raw.decode("ascii", errors="replace").strip()
            parts = line.split()
            try:
                if not parts or parts[0].startswith("#"):
                    pass
                elif parts[0] == "v":
                    values = [float(x) for x in parts[1:]]
                    if len(values) not in (3, 6):
                        raise ValueError(f"vertex needs 3 or 6 values, got {len(values)}")
                    vertices.append(values[:3])
                    colors.append(values[3:])
                elif parts[0] == "f":
                    indices = [int(p.split("/")[0]) for p in parts[1:]]
                    if len(indices) != 3:
                        raise ValueError("only triangular faces are supported")
                    faces.append([i - 1 for i in indices])
            except ValueError as e:
                raise FormatError(path, offset, str(e)) from e
            offset += len(raw)
    has_color = bool(colors) and all(len(c) == 3 for c in colors)
    return ObjMesh(
        vertices=np.asarray(vertices, dtype=np.float64).reshape(-1, 3),
        colors=np.asarray(colors, dtype=np.float64) if has_color else None,
        triangles=np.asarray(faces, dtype=np.int64).reshape(-1, 3),
    )


# -- CSV / JSON --------------------------------------------------------------


def format_number(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return repr(float(value))


def write_csv(path: PathLike, header: ty.Sequence[str], rows: ty.Iterable[ty.Sequence]) -> None:
    """CSV with LF line endings; numbers use shortest round-trip formatting."""
    with open(_prepare(path), "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(
                [cell if isinstance(cell, str) else format_number(cell) for cell in row]
            )


def read_csv(path: PathLike) -> ty.List[ty.Dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def write_history(path: PathLike, records: ty.Iterable) -> None:
    """Loss-history CSV; components a stage did not compute are left empty."""
    from .pipelines import HISTORY_COLUMNS

    write_csv(path, HISTORY_COLUMNS, (record.row() for record in records))


def dump_json(data: ty.Any) -> str:
    return json.dumps(data, sort_keys=True, indent=2) + "\n"


def write_json(path: PathLike, data: ty.Any) -> None:
    _prepare(path).write_text(dump_json(data), encoding="utf-8")


def read_json(path: PathLike) -> ty.Any:
    text = pathlib.Path(path).read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(path, len(text[: e.pos].encode("utf-8")), e.msg) from e
