"""Binary message framing for the supervision service.

Every message: 4-byte little-endian length, 1-byte version, 1-byte tag,
payload. The length counts version + tag + payload. Image payloads are
row-major RGB; structured payloads are UTF-8 JSON.
"""

from __future__ import annotations

import json
import struct

import numpy as np

WIRE_VERSION = 1

# server -> client
TAG_FRAME = 0x01
TAG_STATUS = 0x02
TAG_SUPERVISION_REQUIRED = 0x03
TAG_EPISODE_END = 0x04
# client -> server
TAG_OVERRIDE = 0x10
TAG_RELEASE = 0x11
TAG_MANUAL_ACTION = 0x12
TAG_SET_RESOLUTION = 0x13

_CLIENT_TAGS = {TAG_OVERRIDE, TAG_RELEASE, TAG_MANUAL_ACTION, TAG_SET_RESOLUTION}
_SERVER_TAGS = {TAG_FRAME, TAG_STATUS, TAG_SUPERVISION_REQUIRED, TAG_EPISODE_END}


class WireError(ValueError):
    pass


def _pack(tag: int, payload: bytes = b"") -> bytes:
    return struct.pack("<IBB", len(payload) + 2, WIRE_VERSION, tag) + payload


def encode_frame(step: int, size: int, pixels: np.ndarray) -> bytes:
    data = np.ascontiguousarray(pixels, dtype=np.uint8).tobytes()
    if len(data) != size * size * 3:
        raise WireError("pixel payload does not match size")
    return _pack(TAG_FRAME, struct.pack("<IH", step, size) + data)


def encode_status(mode: str, lumen: bool, p_l, ld_norm, deformation: float,
                  step: int) -> bytes:
    payload = json.dumps({
        "mode": mode, "L": int(lumen),
        "p_l": [round(float(p_l[0]), 3), round(float(p_l[1]), 3)]
        if p_l is not None else None,
        "ld_norm": round(float(ld_norm), 6) if ld_norm is not None else None,
        "deformation": round(float(deformation), 3),
        "step": int(step),
    }).encode()
    return _pack(TAG_STATUS, payload)


def encode_supervision_required() -> bytes:
    return _pack(TAG_SUPERVISION_REQUIRED)


def encode_episode_end(outcome: str, n_override: int, n_demanded: int) -> bytes:
    return _pack(TAG_EPISODE_END, json.dumps({
        "outcome": outcome, "n_override": int(n_override),
        "n_demanded": int(n_demanded)}).encode())


def encode_override() -> bytes:
    return _pack(TAG_OVERRIDE)


def encode_release() -> bytes:
    return _pack(TAG_RELEASE)


def encode_manual_action(alpha_x: int, alpha_y: int, alpha_z: int,
                         translate: bool) -> bytes:
    for a in (alpha_x, alpha_y, alpha_z):
        if a not in (-1, 0, 1):
            raise WireError("manual action components must be in {-1,0,+1}")
    return _pack(TAG_MANUAL_ACTION,
                 struct.pack("<bbbB", alpha_x, alpha_y, alpha_z, int(translate)))


def encode_set_resolution(size: int) -> bytes:
    if size not in (128, 1024):
        raise WireError("resolution must be 128 or 1024")
    return _pack(TAG_SET_RESOLUTION, struct.pack("<H", size))


def decode_payload(tag: int, payload: bytes) -> dict:
    if tag == TAG_FRAME:
        step, size = struct.unpack("<IH", payload[:6])
        pixels = np.frombuffer(payload[6:], dtype=np.uint8)
        if pixels.size != size * size * 3:
            raise WireError("frame payload truncated")
        return {"tag": "frame", "step": step, "size": size,
                "pixels": pixels.reshape(size, size, 3)}
    if tag == TAG_STATUS:
        return {"tag": "status", **json.loads(payload.decode())}
    if tag == TAG_SUPERVISION_REQUIRED:
        return {"tag": "supervision_required"}
    if tag == TAG_EPISODE_END:
        return {"tag": "episode_end", **json.loads(payload.decode())}
    if tag == TAG_OVERRIDE:
        return {"tag": "override"}
    if tag == TAG_RELEASE:
        return {"tag": "release"}
    if tag == TAG_MANUAL_ACTION:
        ax, ay, az, tr = struct.unpack("<bbbB", payload)
        for a in (ax, ay, az):
            if a not in (-1, 0, 1):
                raise WireError("manual action out of range")
        return {"tag": "manual_action", "alpha_x": ax, "alpha_y": ay,
                "alpha_z": az, "translate": bool(tr)}
    if tag == TAG_SET_RESOLUTION:
        (size,) = struct.unpack("<H", payload)
        if size not in (128, 1024):
            raise WireError(f"bad resolution {size}")
        return {"tag": "set_resolution", "size": size}
    raise WireError(f"unknown tag 0x{tag:02x}")


class StreamDecoder:
    """Incremental decoder over a byte stream (socket chunks)."""

    MAX_MESSAGE = 8 + 1024 * 1024 * 3 + 64

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes):
        self._buf.extend(data)

    def messages(self):
        while True:
            if len(self._buf) < 4:
                return
            (length,) = struct.unpack("<I", self._buf[:4])
            if length < 2 or length > self.MAX_MESSAGE:
                raise WireError(f"bad message length {length}")
            if len(self._buf) < 4 + length:
                return
            version = self._buf[4]
            tag = self._buf[5]
            payload = bytes(self._buf[6:4 + length])
            del self._buf[:4 + length]
            if version != WIRE_VERSION:
                raise WireError(f"unsupported wire version {version}")
            yield decode_payload(tag, payload)
