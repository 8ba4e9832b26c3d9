import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pulsesync.photon_sim import SymbolSequence
from pulsesync.wire import (HEADER, MAX_PAYLOAD, BadMagic, BadVersion, DecodeError, Error,
                            ErrorCode, FrameDecoder, InitDone, MalformedPayload, MsgType,
                            Oversize, ProtocolViolation, SeqRequest, SeqReveal,
                            SessionProtocol, SessionState, Status, Tags, Truncated,
                            UnknownType, decode_frame, encode_frame, pack_symbols,
                            read_capture, tag_frames, unpack_symbols, write_capture)

tags_st = st.lists(st.integers(0, 2**63 - 1), max_size=40, unique=True).map(
    lambda v: Tags(np.sort(np.array(v, dtype=np.uint64))))
seq_st = st.lists(st.integers(0, 3), min_size=1, max_size=300).map(
    lambda v: SeqReveal(SymbolSequence(v)))
init_st = st.builds(InitDone, st.integers(-2**63, 2**63 - 1),
                    st.floats(allow_nan=False, allow_infinity=True))
status_st = st.builds(Status, st.floats(allow_nan=True), st.floats(allow_nan=True))
error_st = st.builds(Error, st.integers(0, 0xFFFF), st.text(max_size=50))
message_st = st.one_of(tags_st, st.just(SeqRequest()), seq_st, init_st, status_st, error_st)


def test_seq_request_frame_bytes():
    assert encode_frame(SeqRequest()).hex() == "5053594e010200000000"


def test_tags_frame_bytes():
    frame = encode_frame(Tags(np.array([2000])))
    assert frame[:HEADER.size] == b"PSYN\x01\x01" + struct.pack("<I", 16)
    assert frame[HEADER.size:].hex() == "0100000000000000" + "d007000000000000"


@settings(max_examples=10_000, deadline=None)
@given(msg=message_st)
def test_fuzz_round_trip(msg):
    frame = encode_frame(msg)
    back = decode_frame(frame)
    assert back == msg
    assert encode_frame(back) == frame


@settings(max_examples=200, deadline=None)
@given(msgs=st.lists(message_st, max_size=8), cuts=st.lists(st.integers(0, 10_000), max_size=6))
def test_stream_decoder_reassembles_any_split(msgs, cuts):
    blob = b"".join(encode_frame(m) for m in msgs)
    points = sorted({c % (len(blob) + 1) for c in cuts} | {0, len(blob)})
    dec = FrameDecoder()
    out = []
    for a, b in zip(points, points[1:]):
        out += dec.feed(blob[a:b])
    assert out == msgs and dec.pending == 0


@settings(max_examples=300, deadline=None)
@given(data=st.binary(max_size=64))
def test_garbage_only_raises_decode_errors(data):
    try:
        decode_frame(data)
    except DecodeError:
        pass


def test_decode_errors():
    good = encode_frame(Status(0.1, 2.0))
    with pytest.raises(BadMagic):
        decode_frame(b"XSYN" + good[4:])
    with pytest.raises(BadVersion):
        decode_frame(good[:4] + b"\x02" + good[5:])
    with pytest.raises(UnknownType):
        decode_frame(good[:5] + b"\x09" + good[6:])
    with pytest.raises(Truncated):
        decode_frame(good[:-1])
    with pytest.raises(Truncated):
        decode_frame(good[:5])
    with pytest.raises(MalformedPayload):
        decode_frame(good + b"\x00")
    with pytest.raises(Oversize):
        decode_frame(b"PSYN\x01\x01" + struct.pack("<I", MAX_PAYLOAD + 1))
    with pytest.raises(MalformedPayload):
        decode_frame(b"PSYN\x01\x02" + struct.pack("<I", 1) + b"\x00")
    with pytest.raises(MalformedPayload):
        decode_frame(b"PSYN\x01\x01" + struct.pack("<I", 8) + struct.pack("<Q", 3))
    with pytest.raises(MalformedPayload):
        decode_frame(b"PSYN\x01\x7f" + struct.pack("<I", 3) + b"\x01\x00\xff")


def test_tags_must_increase():
    with pytest.raises(MalformedPayload):
        Tags(np.array([5, 5]))
    with pytest.raises(MalformedPayload):
        Tags(np.array([-1]))


def test_symbol_packing_is_lsb_first():
    assert pack_symbols([1, 2, 3, 0, 3]) == bytes([0b00111001, 0b00000011])
    assert unpack_symbols(bytes([0b00111001, 3]), 5).tolist() == [1, 2, 3, 0, 3]


def test_status_defaults_are_nan():
    s = decode_frame(encode_frame(Status()))
    assert math.isnan(s.qber) and math.isnan(s.a_posteriori_jitter_ps)


def test_tag_frames_split_large_batches():
    frames = list(tag_frames(np.arange(10), max_tags=4))
    assert [decode_frame(f).tags.size for f in frames] == [4, 4, 2]


def test_capture_file(tmp_path):
    msgs = [Status(), SeqRequest(), InitDone(5, 1e-6)]
    write_capture(tmp_path / "c.bin", msgs)
    assert read_capture(tmp_path / "c.bin") == msgs
    (tmp_path / "t.bin").write_bytes(encode_frame(Status())[:-2])
    with pytest.raises(Truncated):
        read_capture(tmp_path / "t.bin")


HAPPY = [MsgType.STATUS, MsgType.TAGS, MsgType.SEQ_REQUEST, MsgType.SEQ_REVEAL,
         MsgType.INIT_DONE, MsgType.TAGS, MsgType.STATUS]


def test_happy_path_states():
    p = SessionProtocol()
    seen = [p.observe_kind(k) for k in HAPPY]
    assert seen == [SessionState.SWEEPING, SessionState.SWEEPING, SessionState.OFFSET_SEARCH,
                    SessionState.OFFSET_SEARCH, SessionState.TRACKING, SessionState.TRACKING,
                    SessionState.TRACKING]
    assert p.reveals == 1


def test_second_reveal_fails_the_session():
    p = SessionProtocol()
    for k in HAPPY[:4]:
        p.observe_kind(k)
    with pytest.raises(ProtocolViolation) as exc:
        p.observe_kind(MsgType.SEQ_REVEAL)
    assert exc.value.code == ErrorCode.DISCLOSURE_VIOLATION
    assert p.state is SessionState.FAILED
    assert exc.value.to_message().code == 0x0002


def test_reveal_after_tracking_and_request_after_init():
    p = SessionProtocol()
    for k in HAPPY:
        p.observe_kind(k)
    with pytest.raises(ProtocolViolation) as exc:
        SessionProtocol(**{"state": SessionState.TRACKING, "reveals": 1}).observe_kind(
            MsgType.SEQ_REQUEST)
    assert exc.value.code == ErrorCode.REQUEST_AFTER_INIT
    with pytest.raises(ProtocolViolation) as exc:
        p.observe_kind(MsgType.SEQ_REVEAL)
    assert exc.value.code == ErrorCode.DISCLOSURE_VIOLATION


@pytest.mark.parametrize("kind", [k for k in MsgType if k not in (MsgType.STATUS, MsgType.ERROR)])
def test_anything_but_hello_before_handshake_is_unexpected(kind):
    with pytest.raises(ProtocolViolation) as exc:
        SessionProtocol().observe_kind(kind)
    assert exc.value.code == ErrorCode.UNEXPECTED_MESSAGE


def _exhaustive_model(trace):
    """Reference transition function written from the rule table."""
    state, reveals = "H", 0
    for k in trace:
        if state == "F":
            return "F", 0x0001
        if k is MsgType.ERROR:
            state = "F"
            continue
        if state == "H":
            if k is not MsgType.STATUS:
                return "F", 0x0001
            state = "S"
        elif k in (MsgType.TAGS, MsgType.STATUS):
            continue
        elif k is MsgType.SEQ_REVEAL:
            if state == "O" and reveals == 0:
                reveals = 1
            else:
                return "F", 0x0002
        elif k is MsgType.SEQ_REQUEST:
            if state == "S":
                state = "O"
            elif state == "T":
                return "F", 0x0003
        elif k is MsgType.INIT_DONE:
            if state == "O" and reveals == 1:
                state = "T"
            else:
                return "F", 0x0001
    return state, None


def test_state_machine_exhaustive_to_depth_four():
    import itertools
    names = {"H": SessionState.HANDSHAKE, "S": SessionState.SWEEPING,
             "O": SessionState.OFFSET_SEARCH, "T": SessionState.TRACKING,
             "F": SessionState.FAILED}
    kinds = list(MsgType)
    for depth in range(1, 5):
        for trace in itertools.product(kinds, repeat=depth):
            want_state, want_code = _exhaustive_model(trace)
            p = SessionProtocol()
            code = None
            try:
                for k in trace:
                    p.observe_kind(k)
            except ProtocolViolation as exc:
                code = int(exc.code)
            assert (p.state, code) == (names[want_state], want_code), trace
