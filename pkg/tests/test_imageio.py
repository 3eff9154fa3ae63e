import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from hazecascade.dehaze.models import AODNet
from hazecascade.errors import FormatError
from hazecascade.imageio import (DatasetManifest, DetectionRecord, ImageU8, ManifestRecord, decode_ppm,
                                 decode_tensor, decode_weights, encode_ppm, encode_tensor, encode_weights,
                                 float_to_u8, load_manifest, load_weights, read_detections, read_ppm,
                                 read_tensor, save_manifest, save_weights, u8_to_float, write_detections,
                                 write_ppm, write_tensor)
from hazecascade.tensorcore import Rng

ROUND_TRIPS = settings(max_examples=200)

images = st.tuples(st.integers(1, 12), st.integers(1, 12)).flatmap(
    lambda wh: st.binary(min_size=3 * wh[0] * wh[1], max_size=3 * wh[0] * wh[1]).map(
        lambda data: ImageU8(wh[0], wh[1], data)))

any_f64 = st.floats(allow_nan=False, width=64) | st.sampled_from([np.inf, -np.inf, -0.0, 5e-324])
tensors = hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=4),
                     elements=any_f64)
names = st.text(st.characters(min_codepoint=32, max_codepoint=0x2FF), min_size=1, max_size=12)

score = st.floats(0, 1)
pos = st.floats(-1e4, 1e4, allow_nan=False)
size = st.floats(1e-6, 1e4, allow_nan=False)
detections = st.builds(DetectionRecord, image_id=st.text(max_size=10), class_id=st.integers(0, 1000),
                       score=score, x=pos, y=pos, w=size, h=size)


# ---- PPM ---------------------------------------------------------------------

def test_ppm_single_red_pixel(tmp_path):
    img = ImageU8(1, 1, b"\xff\x00\x00")
    write_ppm(tmp_path / "r.ppm", img)
    raw = (tmp_path / "r.ppm").read_bytes()
    assert raw == b"P6\n1 1\n255\n\xff\x00\x00"
    assert read_ppm(tmp_path / "r.ppm") == img


def test_ppm_random_64(tmp_path):
    data = np.random.default_rng(0).integers(0, 256, 64 * 64 * 3, dtype=np.uint8).tobytes()
    write_ppm(tmp_path / "a.ppm", ImageU8(64, 64, data))
    again = read_ppm(tmp_path / "a.ppm")
    write_ppm(tmp_path / "b.ppm", again)
    assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()


@ROUND_TRIPS
@given(images)
def test_ppm_round_trip(img):
    buf = encode_ppm(img)
    assert decode_ppm(buf) == img
    assert encode_ppm(decode_ppm(buf)) == buf


def test_ppm_header_comments_accepted():
    assert decode_ppm(b"P6 # made elsewhere\n2 1\n# depth\n255\n" + bytes(6)).width == 2


@pytest.mark.parametrize("buf,offset", [
    (b"P3\n1 1\n255\n\x00\x00\x00", 0),
    (b"P6\n1 1\n65535\n" + bytes(6), 7),
    (b"P6\n2 2\n255\n" + bytes(5), 16),
    (b"P6\n1", 4),
    (b"P6\nx 1\n255\n" + bytes(3), 3),
])
def test_ppm_malformed_reports_offset(buf, offset):
    with pytest.raises(FormatError) as e:
        decode_ppm(buf)
    assert e.value.offset == offset


@given(st.binary(max_size=40))
def test_ppm_reader_never_crashes(buf):
    try:
        decode_ppm(b"P6" + buf)
    except FormatError:
        pass


# ---- float conversion --------------------------------------------------------

def test_float_conversion_examples():
    img = ImageU8(1, 1, bytes([255, 0, 128]))
    t = u8_to_float(img)
    assert t[0, 0, 0] == 1.0
    assert float_to_u8(t) == img
    t = np.array([0.5, -0.2, 1.7]).reshape(3, 1, 1)
    assert list(float_to_u8(t).data) == [128, 0, 255]
    # 0.5 * 255 = 127.5 exactly; ties go to the even neighbour 128
    assert list(float_to_u8(np.array([0.5, 0.0, 0.0]).reshape(3, 1, 1)).data) == [128, 0, 0]


@given(hnp.arrays(np.uint8, (3, 4, 5)))
def test_u8_float_u8_identity(arr):
    img = ImageU8.from_array(arr.transpose(1, 2, 0))
    assert float_to_u8(u8_to_float(img)) == img


# ---- PTNS --------------------------------------------------------------------

def test_tensor_scalar_and_3d(tmp_path):
    write_tensor(tmp_path / "s.ptns", np.array(3.25))
    s = read_tensor(tmp_path / "s.ptns")
    assert s.shape == () and s == 3.25
    x = np.random.default_rng(0).normal(size=(3, 4, 5))
    write_tensor(tmp_path / "t.ptns", x)
    assert read_tensor(tmp_path / "t.ptns").tobytes() == x.tobytes()


@ROUND_TRIPS
@given(tensors)
def test_tensor_round_trip(x):
    y = decode_tensor(encode_tensor(x))
    assert y.shape == x.shape
    assert y.astype("<f8").tobytes() == x.astype("<f8").tobytes()


def test_tensor_layout_is_little_endian():
    buf = encode_tensor(np.array([[1.0, 2.0]]))
    assert buf[:4] == b"PTNS"
    assert struct.unpack("<II", buf[4:12]) == (1, 2)
    assert struct.unpack("<QQ", buf[12:28]) == (1, 2)
    assert struct.unpack("<2d", buf[28:]) == (1.0, 2.0)


def test_tensor_errors():
    buf = encode_tensor(np.ones((2, 2)))
    with pytest.raises(FormatError, match="PTNS"):
        decode_tensor(b"XXXX" + buf[4:])
    with pytest.raises(FormatError):
        decode_tensor(buf[:-1])
    with pytest.raises(FormatError):
        decode_tensor(buf[:10])


@given(st.binary(max_size=60))
def test_tensor_reader_never_crashes(buf):
    try:
        decode_tensor(b"PTNS" + buf)
    except FormatError:
        pass


# ---- PPWA --------------------------------------------------------------------

def test_weights_empty_round_trip(tmp_path):
    save_weights(tmp_path / "e.ppwa", {})
    assert load_weights(tmp_path / "e.ppwa") == {}


@ROUND_TRIPS
@given(st.dictionaries(names, tensors, max_size=5))
def test_weights_round_trip(tensors_by_name):
    buf = encode_weights(tensors_by_name)
    out = decode_weights(buf)
    assert list(out) == sorted(tensors_by_name)
    for k, v in tensors_by_name.items():
        assert out[k].shape == v.shape
        assert out[k].tobytes() == v.astype("<f8").tobytes()
    assert encode_weights(out) == buf


def test_weights_aodnet_forward_identical(tmp_path):
    r = Rng(1)
    model = AODNet(r)
    assert len([k for k in model.state_dict() if k.endswith("weight")]) == 5
    save_weights(tmp_path / "a.ppwa", model.state_dict())
    clone = AODNet(Rng(99))
    clone.load_state_dict(load_weights(tmp_path / "a.ppwa"))
    x = r.uniform(0, 1, (3, 16, 16))
    np.testing.assert_array_equal(model.forward(x), clone.forward(x))


def _archive(entries, payload):
    header = json.dumps({"tensors": entries}).encode()
    return b"PPWA" + struct.pack("<II", 1, len(header)) + header + payload


def test_weights_duplicate_and_overlap_rejected():
    with pytest.raises(FormatError, match="duplicate"):
        encode_weights([("a", np.ones(2)), ("a", np.zeros(2))])
    payload = np.ones(4).astype("<f8").tobytes()
    ok = [{"name": "a", "shape": [2], "offset": 0}, {"name": "b", "shape": [2], "offset": 16}]
    assert set(decode_weights(_archive(ok, payload))) == {"a", "b"}
    overlap = [{"name": "a", "shape": [2], "offset": 0}, {"name": "b", "shape": [2], "offset": 8}]
    with pytest.raises(FormatError, match="overlap"):
        decode_weights(_archive(overlap, payload))
    dup = [{"name": "a", "shape": [2], "offset": 0}, {"name": "a", "shape": [2], "offset": 16}]
    with pytest.raises(FormatError, match="duplicate"):
        decode_weights(_archive(dup, payload))
    with pytest.raises(FormatError, match="inconsistent"):
        decode_weights(_archive(ok[:1], payload))


def test_weights_missing_file_names_path(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.ppwa"):
        load_weights(tmp_path / "nope.ppwa")


@given(st.binary(max_size=80))
def test_weights_reader_never_crashes(buf):
    try:
        decode_weights(b"PPWA" + buf)
    except FormatError:
        pass


# ---- detections --------------------------------------------------------------

def test_detections_empty_and_single(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    assert read_detections(tmp_path / "e.jsonl") == []
    rec = DetectionRecord("img", 2, 0.75, 1.5, 2.0, 10.0, 4.0)
    write_detections(tmp_path / "one.jsonl", [rec])
    assert read_detections(tmp_path / "one.jsonl") == [rec]


@ROUND_TRIPS
@given(st.lists(detections, max_size=6))
def test_detections_round_trip(tmp_path_factory, recs):
    path = tmp_path_factory.mktemp("det") / "d.jsonl"
    write_detections(path, recs)
    assert read_detections(path) == recs


def test_external_fixture_loads_with_unknown_keys(tmp_path):
    # shaped like an exported third-party detector dump: extra keys, integer coordinates
    lines = [
        '{"image_id": "frame_0001", "class_id": 0, "score": 0.91, "x": 12, "y": 8, "w": 20, "h": 18, "label": "car"}',
        "",
        '{"image_id": "frame_0001", "class_id": 1, "score": 0.4, "x": 30.5, "y": 2, "w": 6, "h": 9, "model": "v8n"}',
    ]
    (tmp_path / "ext.jsonl").write_text("\n".join(lines) + "\n")
    recs = read_detections(tmp_path / "ext.jsonl")
    assert [r.class_id for r in recs] == [0, 1]
    assert recs[0].box == (12.0, 8.0, 20.0, 18.0)


@pytest.mark.parametrize("line", [
    "{not json", "[1, 2]", '{"image_id": "a", "class_id": 0, "score": 1.5, "x": 0, "y": 0, "w": 1, "h": 1}',
    '{"image_id": "a", "class_id": 0, "score": 0.5, "x": 0, "y": 0, "w": 0, "h": 1}',
    '{"image_id": "a", "class_id": 0.5, "score": 0.5, "x": 0, "y": 0, "w": 1, "h": 1}',
    '{"image_id": "a", "score": 0.5, "x": 0, "y": 0, "w": 1, "h": 1}',
])
def test_detections_malformed_line_number(tmp_path, line):
    good = '{"image_id": "a", "class_id": 0, "score": 0.5, "x": 0, "y": 0, "w": 1, "h": 1}'
    (tmp_path / "bad.jsonl").write_text(good + "\n" + line + "\n")
    with pytest.raises(FormatError) as e:
        read_detections(tmp_path / "bad.jsonl")
    assert e.value.line == 2


# ---- manifest ----------------------------------------------------------------

box = st.tuples(st.integers(0, 2), st.integers(0, 60), st.integers(0, 60), st.integers(1, 24), st.integers(1, 24))
ids = st.lists(st.text("abcdefgh_0123456789", min_size=1, max_size=8), unique=True, max_size=5)


@ROUND_TRIPS
@given(st.sampled_from(["train", "val", "test"]), ids, st.data())
def test_manifest_round_trip(tmp_path_factory, split, record_ids, data):
    root = tmp_path_factory.mktemp("m")
    recs = [ManifestRecord(rid, f"clear/{rid}.ppm", f"foggy/{rid}.ppm", f"depth/{rid}.ptns",
                           data.draw(st.lists(box, max_size=4)), data.draw(st.floats(0, 1)))
            for rid in record_ids]
    m = DatasetManifest(split, ["circle", "square", "triangle"], recs, root)
    save_manifest(root / "manifest.json", m)
    back = load_manifest(root / "manifest.json", check_files=False)
    assert back.split == split and back.class_names == m.class_names
    assert [r.id for r in back.records] == record_ids
    for a, b in zip(back.records, recs):
        assert (a.clear_path, a.foggy_path, a.depth_path, a.beta) == (b.clear_path, b.foggy_path, b.depth_path, b.beta)
        assert [tuple(x) for x in a.boxes] == [tuple(x) for x in b.boxes]
    save_manifest(root / "again.json", back)
    assert (root / "again.json").read_bytes() == (root / "manifest.json").read_bytes()


def test_manifest_missing_file_and_duplicate_id(tmp_path):
    rec = ManifestRecord("a", "clear/a.ppm", "foggy/a.ppm", "depth/a.ptns", [])
    save_manifest(tmp_path / "m.json", DatasetManifest("val", ["c"], [rec], tmp_path))
    with pytest.raises(FormatError, match="missing"):
        load_manifest(tmp_path / "m.json")
    save_manifest(tmp_path / "d.json", DatasetManifest("val", ["c"], [rec, rec], tmp_path))
    with pytest.raises(FormatError, match="duplicate"):
        load_manifest(tmp_path / "d.json", check_files=False)
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(FormatError):
        load_manifest(tmp_path / "bad.json")
