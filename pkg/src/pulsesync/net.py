"""Two-process operation over TCP.

The sender process simulates the source side and streams TAGS frames; the
receiver process runs :class:`~pulsesync.session.ReceiverEngine` on them.
The sender discloses the symbol sequence once, on request, during
initialization. Afterwards only INIT_DONE and STATUS travel back.
"""
from __future__ import annotations

import logging
import select
import socket
import time
from dataclasses import dataclass, field

from .config import ExperimentConfig
from .session import (InitFailed, ReceiverEngine, TrackingLost, build_simulation,
                      planned_chunks)
from .wire import (Error, ErrorCode, FrameDecoder, InitDone, MsgType, ProtocolViolation,
                   SeqReveal, SeqRequest, SessionProtocol, SessionState, Status,
                   encode_frame, tag_frames)

log = logging.getLogger(__name__)

RECV_BYTES = 1 << 20


class PeerError(RuntimeError):
    def __init__(self, code: int, text: str):
        super().__init__(f"peer error 0x{code:04x}: {text}")
        self.code = code


@dataclass
class SenderReport:
    tags_sent: int = 0
    frames_sent: int = 0
    state: SessionState = SessionState.HANDSHAKE
    trace: list = field(default_factory=list)
    init_done: InitDone | None = None
    last_status: Status | None = None
    peer_error: Error | None = None


class _Link:
    """Socket plus decoder plus the shared protocol validator."""

    def __init__(self, sock: socket.socket, protocol: SessionProtocol):
        self.sock = sock
        self.protocol = protocol
        self.decoder = FrameDecoder()
        self.eof = False

    def send(self, msg, frame: bytes | None = None) -> None:
        self.protocol.observe(msg)
        self.sock.sendall(frame if frame is not None else encode_frame(msg))

    def receive(self, timeout: float | None) -> list:
        """Messages available within ``timeout`` (None blocks, 0 polls)."""
        if self.eof:
            return []
        if timeout is not None:
            ready, _, _ = select.select([self.sock], [], [], timeout)
            if not ready:
                return []
        data = self.sock.recv(RECV_BYTES)
        if not data:
            self.eof = True
            return []
        msgs = self.decoder.feed(data)
        for m in msgs:
            self.protocol.observe(m)
        return msgs

    def fail(self, code: ErrorCode, text: str) -> None:
        try:
            self.sock.sendall(encode_frame(Error(int(code), text)))
        except OSError:
            pass
        self.protocol.state = SessionState.FAILED


def serve_sender(cfg: ExperimentConfig, host: str = "127.0.0.1", port: int = 0,
                 on_listen=None, accept_timeout: float = 60.0,
                 skip_idle: bool = True) -> SenderReport:
    """Listen, serve one receiver session, return what was sent and seen.

    ``on_listen(port)`` is called once the socket listens (useful with
    ``port=0``).
    """
    sim = build_simulation(cfg)
    only = planned_chunks(sim, cfg.session) if skip_idle else None
    report = SenderReport()
    with socket.create_server((host, port)) as srv:
        srv.settimeout(accept_timeout)
        if on_listen is not None:
            on_listen(srv.getsockname()[1])
        conn, peer = srv.accept()
    log.info("receiver connected from %s:%s", *peer[:2])
    proto = SessionProtocol()
    link = _Link(conn, proto)

    def handle(msgs):
        for m in msgs:
            if m.msg_type is MsgType.SEQ_REQUEST:
                link.send(SeqReveal(sim.seq))
            elif m.msg_type is MsgType.INIT_DONE:
                report.init_done = m
            elif m.msg_type is MsgType.STATUS:
                report.last_status = m
            elif m.msg_type is MsgType.ERROR:
                report.peer_error = m
                return False
        return True

    with conn:
        try:
            while proto.state is SessionState.HANDSHAKE and not link.eof:
                link.receive(None)
            link.send(Status())
            alive = True
            for chunk in sim.chunks(only):
                for frame in tag_frames(chunk.tags):
                    proto.observe_kind(MsgType.TAGS)
                    conn.sendall(frame)
                    report.frames_sent += 1
                report.tags_sent += len(chunk)
                alive = handle(link.receive(0))
                if not alive or link.eof:
                    break
            conn.shutdown(socket.SHUT_WR)
            while alive and not link.eof:
                alive = handle(link.receive(None))
        except ProtocolViolation as exc:
            link.fail(exc.code, str(exc))
            raise
        finally:
            report.state = proto.state
            report.trace = list(proto.trace)
    return report


def _connect(host: str, port: int, timeout: float) -> socket.socket:
    deadline = time.monotonic() + timeout
    while True:
        try:
            return socket.create_connection((host, port), timeout=timeout)
        except OSError:
            if time.monotonic() > deadline:
                raise
            time.sleep(0.05)


def serve_receiver(cfg: ExperimentConfig, host: str = "127.0.0.1", port: int = 0,
                   connect_timeout: float = 30.0):
    """Connect to a sender and run a full session; returns (engine, protocol)."""
    engine = ReceiverEngine(cfg.source.clock_rate_hz, cfg.session)
    proto = SessionProtocol()
    sock = _connect(host, port, connect_timeout)
    sock.settimeout(None)
    link = _Link(sock, proto)
    with sock:
        try:
            link.send(Status())
            while not link.eof:
                for m in link.receive(None):
                    if m.msg_type is MsgType.TAGS:
                        engine.feed(m.tags.astype("int64"))
                    elif m.msg_type is MsgType.SEQ_REVEAL:
                        engine.provide_sequence(m.sequence)
                    elif m.msg_type is MsgType.ERROR:
                        raise PeerError(m.code, m.text)
                    for ev in engine.pop_events():
                        _forward(link, ev)
            engine.finish()
        except InitFailed as exc:
            link.fail(ErrorCode.INIT_FAILED, str(exc))
            raise
        except TrackingLost as exc:
            link.fail(ErrorCode.TRACKING_LOST, str(exc))
            raise
        except ProtocolViolation as exc:
            link.fail(exc.code, str(exc))
            raise
    return engine, proto


def _forward(link: _Link, event: tuple) -> None:
    kind = event[0]
    if kind == "sequence_request":
        link.send(SeqRequest())
    elif kind == "init_done":
        link.send(InitDone(int(round(event[1])), float(event[2])))
    elif kind == "status":
        link.send(Status(float(event[1]), float(event[2])))
