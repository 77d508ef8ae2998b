"""Socket front end for supervision sessions.

The raw TCP listener speaks the length-prefixed wire format directly. The
optional WebSocket listener carries the identical framed bytes, one message
per binary frame, so a browser console can attach without a proxy. One
client per session; a reconnect resumes a safety-paused session.
"""

from __future__ import annotations

import base64
import hashlib
import socket
import struct
import threading

from . import wire
from .supervision import SupervisionSession

_WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"


class SupervisionServer:
    """Serves exactly one session; accept loop tolerates client churn."""

    def __init__(self, session: SupervisionSession, host: str = "127.0.0.1",
                 port: int = 7350, ws_port: int = 0):
        self.session = session
        self.host = host
        self.port = port
        self.ws_port = ws_port
        self._listeners = []
        self._threads = []
        self._done = threading.Event()
        self.log = None

    def start(self):
        tcp = socket.create_server((self.host, self.port))
        tcp.settimeout(0.2)
        self.port = tcp.getsockname()[1]
        self._listeners.append(tcp)
        t = threading.Thread(target=self._accept_loop, args=(tcp, False),
                             daemon=True)
        t.start()
        self._threads.append(t)
        if self.ws_port is not None:
            ws = socket.create_server((self.host, self.ws_port))
            ws.settimeout(0.2)
            self.ws_port = ws.getsockname()[1]
            self._listeners.append(ws)
            t = threading.Thread(target=self._accept_loop, args=(ws, True),
                                 daemon=True)
            t.start()
            self._threads.append(t)

    def run_session(self):
        """Blocks until the episode ends; returns the episode log."""
        try:
            self.log = self.session.run()
        finally:
            self._done.set()
        return self.log

    def serve_forever(self):
        self.start()
        return self.run_session()

    def close(self):
        self._done.set()
        for s in self._listeners:
            try:
                s.close()
            except OSError:
                pass

    # ------------------------------------------------------------------

    def _accept_loop(self, listener: socket.socket, is_ws: bool):
        while not self._done.is_set():
            try:
                conn, _ = listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            try:
                if is_ws and not _ws_handshake(conn):
                    conn.close()
                    continue
                self.session.client_attached = True
                self._serve_client(conn, is_ws)
            finally:
                self.session.client_lost()
                try:
                    conn.close()
                except OSError:
                    pass

    def _serve_client(self, conn: socket.socket, is_ws: bool):
        conn.settimeout(0.1)
        stop = threading.Event()
        writer = threading.Thread(target=self._writer_loop,
                                  args=(conn, is_ws, stop), daemon=True)
        writer.start()
        decoder = wire.StreamDecoder()
        ws_buf = bytearray()
        try:
            while not self._done.is_set() and not stop.is_set():
                try:
                    data = conn.recv(65536)
                except socket.timeout:
                    continue
                except OSError:
                    break
                if not data:
                    break
                if is_ws:
                    ws_buf.extend(data)
                    for payload in _ws_drain_frames(ws_buf):
                        decoder.feed(payload)
                else:
                    decoder.feed(data)
                for msg in decoder.messages():
                    self.session.submit(msg)
        except wire.WireError:
            pass
        finally:
            stop.set()
            writer.join(timeout=1.0)

    def _writer_loop(self, conn: socket.socket, is_ws: bool,
                     stop: threading.Event):
        while not stop.is_set():
            data = self.session.output.pop(timeout=0.1)
            if data is None:
                if self._done.is_set():
                    return
                continue
            try:
                conn.sendall(_ws_binary_frame(data) if is_ws else data)
            except OSError:
                stop.set()
                return


# --- minimal RFC6455 server side (binary frames, no extensions) -----------

def _ws_handshake(conn: socket.socket) -> bool:
    conn.settimeout(2.0)
    data = b""
    while b"\r\n\r\n" not in data:
        chunk = conn.recv(4096)
        if not chunk:
            return False
        data += chunk
        if len(data) > 65536:
            return False
    headers = {}
    for line in data.split(b"\r\n")[1:]:
        if b":" in line:
            k, v = line.split(b":", 1)
            headers[k.strip().lower()] = v.strip()
    key = headers.get(b"sec-websocket-key")
    if key is None:
        return False
    accept = base64.b64encode(
        hashlib.sha1(key + _WS_GUID.encode()).digest()).decode()
    conn.sendall((
        "HTTP/1.1 101 Switching Protocols\r\n"
        "Upgrade: websocket\r\nConnection: Upgrade\r\n"
        f"Sec-WebSocket-Accept: {accept}\r\n\r\n").encode())
    return True


def _ws_binary_frame(payload: bytes) -> bytes:
    n = len(payload)
    if n < 126:
        head = struct.pack("!BB", 0x82, n)
    elif n < 65536:
        head = struct.pack("!BBH", 0x82, 126, n)
    else:
        head = struct.pack("!BBQ", 0x82, 127, n)
    return head + payload


def _ws_drain_frames(buf: bytearray):
    """Yield complete client frame payloads (unmasking); mutates buf."""
    out = []
    while True:
        if len(buf) < 2:
            break
        b0, b1 = buf[0], buf[1]
        opcode = b0 & 0x0F
        masked = bool(b1 & 0x80)
        length = b1 & 0x7F
        offset = 2
        if length == 126:
            if len(buf) < 4:
                break
            length = struct.unpack("!H", bytes(buf[2:4]))[0]
            offset = 4
        elif length == 127:
            if len(buf) < 10:
                break
            length = struct.unpack("!Q", bytes(buf[2:10]))[0]
            offset = 10
        mask_len = 4 if masked else 0
        if len(buf) < offset + mask_len + length:
            break
        mask = bytes(buf[offset:offset + mask_len])
        payload = bytearray(buf[offset + mask_len:offset + mask_len + length])
        del buf[:offset + mask_len + length]
        if masked:
            for i in range(len(payload)):
                payload[i] ^= mask[i % 4]
        if opcode in (0x01, 0x02):      # text/binary carry wire bytes
            out.append(bytes(payload))
        elif opcode == 0x08:            # close
            out.append(b"")
    return [p for p in out if p]
