import hashlib
import random
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from minilake.errors import CorruptData
from minilake.table import Schema, Table
from minilake.table.codec import decode_table, encode_table

from generators import random_table
from goldens import GOLDEN_DIGESTS, golden_cases
from oracles import reference_encode


@pytest.mark.parametrize("name", sorted(GOLDEN_DIGESTS))
def test_golden_digest(name):
    cols, rows = golden_cases()[name]
    t = Table.from_rows(Schema.from_json({"columns": cols}), rows)
    data = encode_table(t)
    assert data == reference_encode(cols, rows)
    assert hashlib.sha256(data).hexdigest() == GOLDEN_DIGESTS[name]


def test_empty_table_layout():
    t = Table.empty(Schema.of(("x", "INT64")))
    data = encode_table(t)
    header = b'{"columns":[{"name":"x","nullable":true,"type":"INT64"}]}'
    assert data == b"MLT1" + struct.pack("<I", len(header)) + header + struct.pack("<Q", 0)


def test_nan_payloads_canonicalize():
    quiet = struct.unpack("<d", struct.pack("<Q", 0x7FF8000000000000))[0]
    other = struct.unpack("<d", struct.pack("<Q", 0xFFF8000000000123))[0]
    s = Schema.of(("f", "FLOAT64"))
    a, b = encode_table(Table.from_rows(s, [(quiet,)])), encode_table(Table.from_rows(s, [(other,)]))
    assert a == b
    assert a.endswith(bytes.fromhex("000000000000f87f"))
    back = decode_table(a)
    assert back.columns[0][0] != back.columns[0][0]


def test_signed_zero_is_preserved():
    s = Schema.of(("f", "FLOAT64"))
    assert encode_table(Table.from_rows(s, [(0.0,)])) != encode_table(Table.from_rows(s, [(-0.0,)]))


def test_thousand_row_round_trip():
    rng = random.Random(7)
    t = random_table(rng, max_cols=6, max_rows=0)
    rows = [tuple(rng.choice([None, 1, -1, 2**62]) if c.type.value == "INT64" else
                  rng.choice([None, 0.5, float("nan")]) if c.type.value == "FLOAT64" else
                  rng.choice([None, "x", "ü"]) if c.type.value == "STRING" else
                  rng.choice([None, True, False])
                  for c in t.schema.columns) for _ in range(1000)]
    t = Table.from_rows(t.schema, rows)
    data = encode_table(t)
    assert encode_table(decode_table(data)) == data
    assert decode_table(data) == t


@settings(max_examples=150, deadline=None)
@given(st.randoms(use_true_random=False))
def test_round_trip_property(rng):
    t = random_table(rng)
    data = encode_table(t)
    back = decode_table(data)
    assert back == t
    assert encode_table(back) == data
    assert data == reference_encode([c.to_json() for c in t.schema.columns], list(t.rows()))


def _sample():
    s = Schema.of(("i", "INT64", False), ("s", "STRING"), ("b", "BOOL"))
    return encode_table(Table.from_rows(s, [(1, "é", True), (2, None, False)]))


@pytest.mark.parametrize("mutate, match", [
    (lambda d: b"XLT1" + d[4:], "magic"),
    (lambda d: d[:-1], "length"),
    (lambda d: d + b"\x00", "trailing"),
    (lambda d: d[:4] + struct.pack("<I", 10**6) + d[8:], "length"),
])
def test_corrupt_inputs(mutate, match):
    with pytest.raises(CorruptData, match=match):
        decode_table(mutate(_sample()))


def test_invalid_utf8_and_bool_and_null_checks():
    s = Schema.of(("s", "STRING"))
    data = bytearray(encode_table(Table.from_rows(s, [("ab",)])))
    data[-2:] = b"\xff\xfe"
    with pytest.raises(CorruptData, match="UTF-8"):
        decode_table(bytes(data))

    data = bytearray(encode_table(Table.from_rows(Schema.of(("b", "BOOL")), [(True,)])))
    data[-1] = 2
    with pytest.raises(CorruptData, match="BOOL"):
        decode_table(bytes(data))

    nullable = encode_table(Table.from_rows(Schema.of(("i", "INT64")), [(None,)]))
    strict = nullable.replace(b'"nullable":true', b'"nullable":false')
    strict = strict[:4] + struct.pack("<I", len(strict) - 4 - 4 - 8 - 1 - 8) + strict[8:]
    with pytest.raises(CorruptData, match="non-nullable"):
        decode_table(strict)
