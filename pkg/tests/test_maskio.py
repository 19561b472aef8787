import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rsvlts.geom import BinaryMask
from rsvlts.maskio import MaskFormatError, decode_pnm, encode_pbm, encode_pgm, read_mask, write_mask


def test_pbm_bytes_exact():
    arr = np.zeros((2, 10), dtype=bool)
    arr[0, 0] = arr[0, 9] = arr[1, 1] = True
    data = encode_pbm(BinaryMask.from_array(arr))
    # 10 columns pad to 2 bytes per row
    assert data == b"P4\n10 2\n" + bytes([0b10000000, 0b01000000, 0b01000000, 0b00000000])


def test_pgm_threshold():
    data = b"P5\n3 1\n255\n" + bytes([127, 128, 255])
    assert decode_pnm(data).bits.tolist() == [[False, True, True]]


def test_pgm_16bit():
    data = b"P5\n2 1\n65535\n" + (100).to_bytes(2, "big") + (60000).to_bytes(2, "big")
    assert decode_pnm(data).bits.tolist() == [[False, True]]


def test_header_comments():
    data = b"P4\n# made by hand\n3 # width\n1\n" + bytes([0b10100000])
    assert decode_pnm(data).bits.tolist() == [[True, False, True]]


def test_bad_magic():
    with pytest.raises(MaskFormatError):
        decode_pnm(b"P6\n1 1\n255\n\x00\x00\x00")
    with pytest.raises(MaskFormatError):
        decode_pnm(b"P4\n3")


@given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_roundtrip(w, h, seed):
    arr = np.random.default_rng(seed).random((h, w)) < 0.4
    m = BinaryMask.from_array(arr)
    assert decode_pnm(encode_pbm(m)) == m
    assert decode_pnm(encode_pgm(m)) == m


def test_file_roundtrip(tmp_path):
    m = BinaryMask.from_array(np.eye(5, dtype=bool))
    for name in ("m.pbm", "m.pgm"):
        write_mask(m, tmp_path / name)
        assert read_mask(tmp_path / name) == m
    assert (tmp_path / "m.pgm").read_bytes().startswith(b"P5")
