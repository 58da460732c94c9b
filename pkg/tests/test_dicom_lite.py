import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctriage import dicom_lite as dl
from ctriage.dicom_lite import (CorruptedDicom, DicomHeader, GeometryError, MalformedHeader,
                                MissingMagic, MissingRequiredTag, TruncatedPixelData,
                                UnsupportedTransferSyntax, assemble_study, is_axial, parse_file,
                                to_hounsfield, write_file)

AXIAL = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)
CORONAL = (1.0, 0.0, 0.0, 0.0, 0.0, 1.0)


def header(**kw):
    base = dict(modality="CT", study_uid="1.2.3", series_uid="1.2.3.1", instance_number=1,
                image_orientation=AXIAL, rows=2, cols=2)
    base.update(kw)
    return DicomHeader(**base)


def test_minimal_round_trip():
    h = header()
    px = np.array([[0, 1], [1024, 65535]], dtype=np.uint16)
    h2, px2 = parse_file(write_file(h, px))
    assert h2 == h
    assert px2.dtype == px.dtype and np.array_equal(px2, px)


def test_payload_is_two_bytes_per_pixel():
    h = header(rows=3, cols=5)
    buf = write_file(h, np.zeros((3, 5), np.uint16))
    tag = struct.pack("<HH", *dl.PIXEL_DATA) + b"OW"
    at = buf.index(tag)
    (length,) = struct.unpack_from("<I", buf, at + 8)
    assert length == 2 * 3 * 5


def test_eight_bit_round_trip():
    h = header(rows=3, cols=3, bits_allocated=8, rescale_slope=0.5, rescale_intercept=-10.25)
    px = np.arange(9, dtype=np.uint8).reshape(3, 3)
    h2, px2 = parse_file(write_file(h, px))
    assert h2 == h and np.array_equal(px2, px)


@settings(max_examples=60, deadline=None)
@given(rows=st.integers(1, 9), cols=st.integers(1, 9), inst=st.integers(0, 10 ** 6),
       slope=st.floats(0.01, 10), intercept=st.floats(-4000, 4000), seed=st.integers(0, 2 ** 32 - 1))
def test_round_trip_property(rows, cols, inst, slope, intercept, seed):
    h = header(rows=rows, cols=cols, instance_number=inst, rescale_slope=slope,
               rescale_intercept=intercept, study_uid=f"2.25.{seed}")
    px = np.random.default_rng(seed).integers(0, 65536, size=(rows, cols)).astype(np.uint16)
    h2, px2 = parse_file(write_file(h, px))
    assert h2 == h and np.array_equal(px2, px)


def test_rows_zero_rejected():
    with pytest.raises(MalformedHeader):
        write_file(header(rows=0), np.zeros((0, 2), np.uint16))


def test_missing_magic():
    buf = bytearray(write_file(header(), np.zeros((2, 2), np.uint16)))
    buf[128:132] = b"XXXX"
    with pytest.raises(MissingMagic):
        parse_file(bytes(buf))
    with pytest.raises(MissingMagic):
        parse_file(b"")


def test_truncated_pixels():
    buf = write_file(header(rows=4, cols=4), np.zeros((4, 4), np.uint16))
    with pytest.raises(TruncatedPixelData):
        parse_file(buf[:-6])


def _drop_element(buf, tag):
    """Re-emit the file without one element."""
    pos = dl.PREAMBLE + 4
    out = bytearray(buf[:pos])
    while pos < len(buf):
        g, e = struct.unpack_from("<HH", buf, pos)
        vr = buf[pos + 4:pos + 6]
        if vr in (b"OB", b"OW"):
            (n,) = struct.unpack_from("<I", buf, pos + 8)
            end = pos + 12 + n
        else:
            (n,) = struct.unpack_from("<H", buf, pos + 6)
            end = pos + 8 + n
        if (g, e) != tag:
            out += buf[pos:end]
        pos = end
    return bytes(out)


def test_missing_required_tag():
    buf = write_file(header(), np.zeros((2, 2), np.uint16))
    with pytest.raises(MissingRequiredTag) as info:
        parse_file(_drop_element(buf, dl.MODALITY))
    assert info.value.tag == dl.MODALITY


def test_unsupported_transfer_syntax():
    buf = write_file(header(), np.zeros((2, 2), np.uint16))
    implicit = b"1.2.840.10008.1.2\0"
    explicit = b"1.2.840.10008.1.2.1\0"
    assert len(implicit) == 18 and len(explicit) == 20
    # same length replacement keeps the framing intact
    swapped = buf.replace(explicit, b"1.2.840.10008.1.2.5\0")
    with pytest.raises(UnsupportedTransferSyntax):
        parse_file(swapped)


def test_error_classes_are_corruption():
    for cls in (MissingMagic, TruncatedPixelData, UnsupportedTransferSyntax, MalformedHeader):
        assert issubclass(cls, CorruptedDicom)
    assert issubclass(MissingRequiredTag, CorruptedDicom)


def test_is_axial_examples():
    assert is_axial(AXIAL)
    assert not is_axial(CORONAL)
    t = np.deg2rad(10.0)
    tilted = (1.0, 0.0, 0.0, 0.0, np.cos(t), np.sin(t))
    normal = np.cross(tilted[:3], tilted[3:])
    assert normal[2] == pytest.approx(np.cos(t))
    assert is_axial(tilted)
    with pytest.raises(GeometryError):
        is_axial((2.0, 0, 0, 0, 1, 0))


@settings(max_examples=100, deadline=None)
@given(st.floats(-np.pi, np.pi), st.floats(-np.pi, np.pi))
def test_is_axial_symmetric_under_swap(a, b):
    row = np.array([np.cos(a), np.sin(a), 0.0])
    col = np.array([0.0, np.cos(b), np.sin(b)])
    col /= np.linalg.norm(col)
    o1 = tuple(row) + tuple(col)
    o2 = tuple(col) + tuple(row)
    assert is_axial(o1) == is_axial(o2)


def test_to_hounsfield_examples():
    assert to_hounsfield(np.array([1024]), 1, -1024)[0] == 0
    assert to_hounsfield(np.array([24]), 1, -1024)[0] == -1000
    assert to_hounsfield(np.array([2048]), 0.5, -1000)[0] == 24
    assert to_hounsfield(np.array([0, 65535]), 1, -2000).tolist() == [-1100, 4000]
    with pytest.raises(ValueError):
        to_hounsfield(np.array([1]), 0, 0)


def _slice(inst, orientation=AXIAL, modality="CT", uid="1.2.3"):
    h = header(instance_number=inst, image_orientation=orientation, modality=modality,
               study_uid=uid, rescale_intercept=-1024.0)
    return h, np.full((2, 2), 1024 + inst, np.uint16)


def test_assemble_sorts_by_instance():
    vol = assemble_study([_slice(3), _slice(1), _slice(2)])
    assert vol.instance_numbers == [1, 2, 3]
    assert vol.slices[:, 0, 0].tolist() == [1, 2, 3]
    assert vol.excluded == 0


def test_assemble_filters_non_axial_and_non_ct():
    vol = assemble_study([_slice(1), _slice(2, CORONAL), _slice(3, modality="MR")])
    assert vol.n_slices == 1 and vol.excluded == 2


def test_assemble_errors():
    with pytest.raises(ValueError):
        assemble_study([_slice(1), _slice(2, uid="9.9")])
    with pytest.raises(ValueError):
        assemble_study([_slice(1, CORONAL)])
    with pytest.raises(ValueError):
        assemble_study([])


def test_hu_to_raw_inverts_rescale():
    hu = np.array([[-1000, 0], [37, 1000]], dtype=np.float32)
    raw = dl.hu_to_raw(hu)
    assert np.array_equal(to_hounsfield(raw, 1.0, -1024.0), hu)


def test_fuzzed_files_only_raise_corruption():
    base = write_file(header(rows=4, cols=4), np.arange(16, dtype=np.uint16).reshape(4, 4))
    rng = np.random.default_rng(5)
    for _ in range(500):
        buf = bytearray(base)
        for _ in range(int(rng.integers(1, 6))):
            buf[int(rng.integers(0, len(buf)))] = int(rng.integers(0, 256))
        cut = int(rng.integers(0, len(buf) + 1))
        try:
            parse_file(bytes(buf[:cut]))
        except CorruptedDicom:
            pass
