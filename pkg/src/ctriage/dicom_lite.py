"""Minimal DICOM reader/writer: explicit VR little endian, uncompressed.

Only the handful of tags needed to validate a CT slice, pick axial images
and recover Hounsfield units are understood. Anything the parser cannot
make sense of raises a :class:`CorruptedDicom` subclass; callers treat
such files as excluded rather than crashing.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

PREAMBLE = 128
MAGIC = b"DICM"
EXPLICIT_VR_LE = "1.2.840.10008.1.2.1"
HU_MIN, HU_MAX = -1100.0, 4000.0

TRANSFER_SYNTAX = (0x0002, 0x0010)
MODALITY = (0x0008, 0x0060)
STUDY_UID = (0x0020, 0x000D)
SERIES_UID = (0x0020, 0x000E)
INSTANCE_NUMBER = (0x0020, 0x0013)
ORIENTATION = (0x0020, 0x0037)
ROWS = (0x0028, 0x0010)
COLUMNS = (0x0028, 0x0011)
BITS_ALLOCATED = (0x0028, 0x0100)
RESCALE_INTERCEPT = (0x0028, 0x1052)
RESCALE_SLOPE = (0x0028, 0x1053)
PIXEL_DATA = (0x7FE0, 0x0010)

REQUIRED = (TRANSFER_SYNTAX, MODALITY, STUDY_UID, SERIES_UID, INSTANCE_NUMBER, ORIENTATION,
            ROWS, COLUMNS, BITS_ALLOCATED, RESCALE_INTERCEPT, RESCALE_SLOPE, PIXEL_DATA)

# VRs whose explicit-VR header carries 2 reserved bytes and a 4-byte length
_LONG_VRS = {b"OB", b"OD", b"OF", b"OL", b"OW", b"SQ", b"UC", b"UN", b"UR", b"UT"}
_SHORT_VRS = {b"AE", b"AS", b"AT", b"CS", b"DA", b"DS", b"DT", b"FL", b"FD", b"IS", b"LO",
              b"LT", b"PN", b"SH", b"SL", b"SS", b"ST", b"TM", b"UI", b"UL", b"US"}


class CorruptedDicom(ValueError):
    """Base class for every reason a file is excluded from analysis."""


class MissingMagic(CorruptedDicom):
    pass


class MissingRequiredTag(CorruptedDicom):
    def __init__(self, tag):
        self.tag = tag
        super().__init__(f"missing required tag ({tag[0]:04X},{tag[1]:04X})")


class TruncatedPixelData(CorruptedDicom):
    pass


class UnsupportedTransferSyntax(CorruptedDicom):
    pass


class MalformedHeader(CorruptedDicom):
    """Element framing or value that cannot be decoded, or a header invariant violation."""


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class DicomHeader:
    modality: str
    study_uid: str
    series_uid: str
    instance_number: int
    image_orientation: tuple[float, ...]
    rows: int
    cols: int
    bits_allocated: int = 16
    rescale_slope: float = 1.0
    rescale_intercept: float = -1024.0

    def validate(self) -> None:
        if self.rows <= 0 or self.cols <= 0:
            raise MalformedHeader(f"rows/cols must be positive, got {self.rows}x{self.cols}")
        if self.rows > 0xFFFF or self.cols > 0xFFFF:
            raise MalformedHeader("rows/cols exceed 16 bits")
        if self.bits_allocated not in (8, 16):
            raise MalformedHeader(f"bits_allocated must be 8 or 16, got {self.bits_allocated}")
        if len(self.image_orientation) != 6:
            raise MalformedHeader("image orientation needs 6 direction cosines")
        o = np.asarray(self.image_orientation, dtype=np.float64)
        if not np.all(np.isfinite(o)):
            raise MalformedHeader("non-finite image orientation")
        for v in (o[:3], o[3:]):
            if abs(np.linalg.norm(v) - 1.0) > 1e-3:
                raise MalformedHeader("image orientation vectors must be unit norm")
        if not np.isfinite(self.rescale_slope) or not np.isfinite(self.rescale_intercept):
            raise MalformedHeader("non-finite rescale parameters")
        if self.rescale_slope == 0:
            raise MalformedHeader("rescale slope must be non-zero")

    @property
    def pixel_dtype(self):
        return np.dtype("<u1") if self.bits_allocated == 8 else np.dtype("<u2")


@dataclass
class HuVolume:
    """A study's axial slices in Hounsfield units, ordered by instance number."""

    study_uid: str
    slices: np.ndarray  # (n_slices, rows, cols) float32
    instance_numbers: list[int] = field(default_factory=list)
    excluded: int = 0

    def __post_init__(self):
        self.slices = np.asarray(self.slices, dtype=np.float32)
        if self.slices.ndim != 3:
            raise ValueError("slices must be a (n, rows, cols) stack")

    @property
    def n_slices(self) -> int:
        return self.slices.shape[0]


def _pad_even(raw: bytes, pad: bytes) -> bytes:
    return raw + pad if len(raw) % 2 else raw


def _ds(value: float) -> str:
    return repr(float(value))


def _element(tag, vr: bytes, value: bytes) -> bytes:
    head = struct.pack("<HH", *tag) + vr
    if vr in _LONG_VRS:
        return head + struct.pack("<HI", 0, len(value)) + value
    return head + struct.pack("<H", len(value)) + value


def write_file(header: DicomHeader, pixels) -> bytes:
    """Serialise one slice; ``parse_file`` inverts it exactly."""
    header.validate()
    pixels = np.asarray(pixels)
    if pixels.shape != (header.rows, header.cols):
        raise ValueError(f"pixel matrix {pixels.shape} does not match {header.rows}x{header.cols}")
    dtype = header.pixel_dtype
    info = np.iinfo(dtype)
    if pixels.size and (pixels.min() < info.min or pixels.max() > info.max):
        raise ValueError(f"pixel values outside the {header.bits_allocated}-bit range")
    text = lambda s, pad=b" ": _pad_even(s.encode("ascii"), pad)  # noqa: E731
    elements = [
        _element(TRANSFER_SYNTAX, b"UI", text(EXPLICIT_VR_LE, b"\0")),
        _element(MODALITY, b"CS", text(header.modality)),
        _element(STUDY_UID, b"UI", text(header.study_uid, b"\0")),
        _element(SERIES_UID, b"UI", text(header.series_uid, b"\0")),
        _element(INSTANCE_NUMBER, b"IS", text(str(int(header.instance_number)))),
        _element(ORIENTATION, b"DS", text("\\".join(_ds(v) for v in header.image_orientation))),
        _element(ROWS, b"US", struct.pack("<H", header.rows)),
        _element(COLUMNS, b"US", struct.pack("<H", header.cols)),
        _element(BITS_ALLOCATED, b"US", struct.pack("<H", header.bits_allocated)),
        _element(RESCALE_INTERCEPT, b"DS", text(_ds(header.rescale_intercept))),
        _element(RESCALE_SLOPE, b"DS", text(_ds(header.rescale_slope))),
        _element(PIXEL_DATA, b"OB" if header.bits_allocated == 8 else b"OW",
                 _pad_even(pixels.astype(dtype).tobytes(), b"\0")),
    ]
    return bytes(PREAMBLE) + MAGIC + b"".join(elements)


def _read_elements(buf: bytes) -> dict:
    elements = {}
    pos = PREAMBLE + len(MAGIC)
    end = len(buf)
    while pos < end:
        if end - pos < 8:
            raise MalformedHeader(f"truncated element header at offset {pos}")
        group, elem = struct.unpack_from("<HH", buf, pos)
        vr = buf[pos + 4:pos + 6]
        tag = (group, elem)
        if vr in _LONG_VRS:
            if end - pos < 12:
                raise MalformedHeader(f"truncated element header at offset {pos}")
            (length,) = struct.unpack_from("<I", buf, pos + 8)
            pos += 12
        elif vr in _SHORT_VRS:
            (length,) = struct.unpack_from("<H", buf, pos + 6)
            pos += 8
        else:
            raise MalformedHeader(f"unknown VR {vr!r} for tag ({group:04X},{elem:04X})")
        if length == 0xFFFFFFFF:
            raise MalformedHeader("undefined-length elements (sequences) are not supported")
        if length > end - pos:
            if tag == PIXEL_DATA:
                raise TruncatedPixelData(f"pixel data declares {length} bytes, {end - pos} remain")
            raise MalformedHeader(f"element ({group:04X},{elem:04X}) overruns the buffer")
        elements[tag] = (vr, buf[pos:pos + length])
        pos += length
    return elements


def _text(elements, tag, pad=b" \0") -> str:
    vr, raw = elements[tag]
    try:
        return raw.decode("ascii").strip(pad.decode("ascii"))
    except UnicodeDecodeError:
        raise MalformedHeader(f"non-ASCII value in tag ({tag[0]:04X},{tag[1]:04X})") from None


def _us(elements, tag) -> int:
    vr, raw = elements[tag]
    if vr != b"US" or len(raw) != 2:
        raise MalformedHeader(f"tag ({tag[0]:04X},{tag[1]:04X}) must be a 2-byte US")
    return struct.unpack("<H", raw)[0]


def _number(elements, tag, kind):
    s = _text(elements, tag)
    try:
        return kind(s)
    except ValueError:
        raise MalformedHeader(f"cannot decode {s!r} in tag ({tag[0]:04X},{tag[1]:04X})") from None


def parse_file(data: bytes) -> tuple[DicomHeader, np.ndarray]:
    """Parse bytes into ``(header, raw pixel matrix)`` or raise ``CorruptedDicom``."""
    buf = bytes(data)
    if len(buf) < PREAMBLE + len(MAGIC) or buf[PREAMBLE:PREAMBLE + len(MAGIC)] != MAGIC:
        raise MissingMagic("no DICM marker at offset 128")
    elements = _read_elements(buf)
    for tag in REQUIRED:
        if tag not in elements:
            raise MissingRequiredTag(tag)
    syntax = _text(elements, TRANSFER_SYNTAX)
    if syntax != EXPLICIT_VR_LE:
        raise UnsupportedTransferSyntax(f"transfer syntax {syntax!r} is not explicit VR little endian")
    orientation = _text(elements, ORIENTATION).split("\\")
    try:
        orientation = tuple(float(v) for v in orientation)
    except ValueError:
        raise MalformedHeader("cannot decode image orientation") from None
    header = DicomHeader(
        modality=_text(elements, MODALITY),
        study_uid=_text(elements, STUDY_UID),
        series_uid=_text(elements, SERIES_UID),
        instance_number=_number(elements, INSTANCE_NUMBER, int),
        image_orientation=orientation,
        rows=_us(elements, ROWS),
        cols=_us(elements, COLUMNS),
        bits_allocated=_us(elements, BITS_ALLOCATED),
        rescale_slope=_number(elements, RESCALE_SLOPE, float),
        rescale_intercept=_number(elements, RESCALE_INTERCEPT, float),
    )
    header.validate()
    _, raw = elements[PIXEL_DATA]
    dtype = header.pixel_dtype
    expected = header.rows * header.cols * dtype.itemsize
    if len(raw) < expected:
        raise TruncatedPixelData(f"pixel data has {len(raw)} bytes, expected {expected}")
    if len(raw) > expected + (expected % 2):
        raise TruncatedPixelData(f"pixel data has {len(raw)} bytes, expected {expected}")
    pixels = np.frombuffer(raw[:expected], dtype=dtype).reshape(header.rows, header.cols)
    return header, pixels.astype(dtype.newbyteorder("="))


def is_axial(orientation) -> bool:
    """True when the slice normal lies within ~25 degrees of the patient z-axis."""
    o = np.asarray(orientation, dtype=np.float64)
    if o.shape != (6,):
        raise GeometryError("orientation needs 6 direction cosines")
    row, col = o[:3], o[3:]
    if abs(np.linalg.norm(row) - 1.0) > 1e-3 or abs(np.linalg.norm(col) - 1.0) > 1e-3:
        raise GeometryError("orientation vectors must be unit norm")
    normal = np.cross(row, col)
    return bool(abs(normal[2]) > 0.9)


def to_hounsfield(raw, slope: float, intercept: float) -> np.ndarray:
    if slope == 0:
        raise ValueError("rescale slope must be non-zero")
    hu = np.asarray(raw, dtype=np.float64) * slope + intercept
    return np.clip(hu, HU_MIN, HU_MAX).astype(np.float32)


def assemble_study(files) -> HuVolume:
    """Build a volume from parsed ``(header, pixels)`` slices of one study.

    Non-CT and non-axial slices are dropped and counted in ``excluded``.
    """
    files = list(files)
    if not files:
        raise ValueError("no slices to assemble")
    uids = {h.study_uid for h, _ in files}
    if len(uids) > 1:
        raise ValueError(f"slices from {len(uids)} different studies: {sorted(uids)}")
    kept = [(h, p) for h, p in files if h.modality == "CT" and is_axial(h.image_orientation)]
    excluded = len(files) - len(kept)
    if not kept:
        raise ValueError(f"study {files[0][0].study_uid}: no axial CT slices left after filtering")
    shapes = {p.shape for _, p in kept}
    if len(shapes) > 1:
        raise ValueError(f"slices have different sizes: {sorted(shapes)}")
    kept.sort(key=lambda hp: hp[0].instance_number)
    slices = np.stack([to_hounsfield(p, h.rescale_slope, h.rescale_intercept) for h, p in kept])
    return HuVolume(study_uid=kept[0][0].study_uid, slices=slices,
                    instance_numbers=[h.instance_number for h, _ in kept], excluded=excluded)


def hu_to_raw(hu, intercept: float = -1024.0) -> np.ndarray:
    """Store integer HU as unsigned 16-bit with slope 1."""
    raw = np.rint(np.asarray(hu, dtype=np.float64) - intercept)
    return np.clip(raw, 0, 0xFFFF).astype(np.uint16)
