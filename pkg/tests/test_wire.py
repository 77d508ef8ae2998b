import numpy as np
import pytest

from endonav import wire


def roundtrip(blob):
    dec = wire.StreamDecoder()
    dec.feed(blob)
    return list(dec.messages())


def test_frame_roundtrip():
    pixels = np.random.default_rng(0).integers(0, 256, size=(128, 128, 3),
                                               dtype=np.uint8)
    msgs = roundtrip(wire.encode_frame(42, 128, pixels))
    assert len(msgs) == 1
    m = msgs[0]
    assert m["tag"] == "frame"
    assert m["step"] == 42
    assert m["size"] == 128
    assert np.array_equal(m["pixels"], pixels)


def test_status_roundtrip():
    blob = wire.encode_status("autonomous", True, (63.5, 64.25), 0.125,
                              3.875, 1000)
    m = roundtrip(blob)[0]
    assert m["tag"] == "status"
    assert m["mode"] == "autonomous"
    assert m["L"] == 1
    assert m["p_l"] == [63.5, 64.25]
    assert m["ld_norm"] == 0.125
    assert m["step"] == 1000


def test_status_without_lumen():
    m = roundtrip(wire.encode_status("supervision_demanded", False, None,
                                     None, 0.0, 7))[0]
    assert m["L"] == 0
    assert m["p_l"] is None
    assert m["ld_norm"] is None


def test_control_messages_roundtrip():
    for blob, tag in ((wire.encode_override(), "override"),
                      (wire.encode_release(), "release"),
                      (wire.encode_supervision_required(),
                       "supervision_required")):
        assert roundtrip(blob)[0]["tag"] == tag
    m = roundtrip(wire.encode_manual_action(-1, 0, 1, True))[0]
    assert (m["alpha_x"], m["alpha_y"], m["alpha_z"], m["translate"]) \
        == (-1, 0, 1, True)
    m = roundtrip(wire.encode_episode_end("success", 2, 1))[0]
    assert (m["outcome"], m["n_override"], m["n_demanded"]) == ("success", 2, 1)
    m = roundtrip(wire.encode_set_resolution(1024))[0]
    assert m["size"] == 1024


def test_framing_layout():
    blob = wire.encode_override()
    assert blob[:4] == (2).to_bytes(4, "little")    # version + tag
    assert blob[4] == wire.WIRE_VERSION
    assert blob[5] == wire.TAG_OVERRIDE


def test_chunked_stream_decoding():
    pixels = np.zeros((128, 128, 3), dtype=np.uint8)
    stream = (wire.encode_frame(1, 128, pixels) + wire.encode_override()
              + wire.encode_status("autonomous", True, (0, 0), 0.0, 0.0, 1))
    dec = wire.StreamDecoder()
    msgs = []
    for i in range(0, len(stream), 1000):
        dec.feed(stream[i:i + 1000])
        msgs.extend(dec.messages())
    assert [m["tag"] for m in msgs] == ["frame", "override", "status"]


def test_rejects_bad_version():
    blob = bytearray(wire.encode_override())
    blob[4] = 99
    dec = wire.StreamDecoder()
    dec.feed(bytes(blob))
    with pytest.raises(wire.WireError):
        list(dec.messages())


def test_rejects_bad_manual_action_values():
    with pytest.raises(wire.WireError):
        wire.encode_manual_action(2, 0, 0, False)
    import struct
    payload = struct.pack("<bbbB", 3, 0, 0, 0)
    with pytest.raises(wire.WireError):
        wire.decode_payload(wire.TAG_MANUAL_ACTION, payload)


def test_rejects_bad_resolution():
    with pytest.raises(wire.WireError):
        wire.encode_set_resolution(256)


def test_rejects_unknown_tag():
    with pytest.raises(wire.WireError):
        wire.decode_payload(0x7F, b"")
