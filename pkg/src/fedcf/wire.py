"""Binary message formats exchanged between the server and simulated clients.

Layout rules: little-endian, reals as float64, counts and ids as uint32,
enum tags as one byte, arrays prefixed with their uint32 length (matrices
with rows and cols). Every envelope has a fixed 17-byte header.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .client_stats import ClientPriorMessage, CommEfficientMessage, EnhancedPrivacyMessage, Estimator
from .quantile import QuantileSketch

SERVER_ID = 0xFFFFFFFF

_ENVELOPE = struct.Struct("<BIIII")
ENVELOPE_HEADER_BYTES = _ENVELOPE.size
REAL_BYTES = 8


class WireError(ValueError):
    pass


class Kind(enum.IntEnum):
    PRIOR_REQUEST = 1
    PRIOR_REPLY = 2
    CG_REQUEST = 3
    CG_REPLY = 4
    AUDIT_REQUEST = 5
    AUDIT_REPLY = 6
    PRIOR_BROADCAST = 7
    QUANTILE_REQUEST = 8
    QUANTILE_REPLY = 9


class ProtocolTag(enum.IntEnum):
    COMM_EFFICIENT = 0
    ENHANCED_PRIVACY = 1


_ESTIMATOR_TAGS = {Estimator.INTERVAL: 0, Estimator.MLE: 1, Estimator.WILSON: 2}
_TAG_ESTIMATORS = {v: k for k, v in _ESTIMATOR_TAGS.items()}


@dataclass(frozen=True)
class RoundEnvelope:
    round_id: int
    sender: int
    recipient: int
    kind: Kind
    payload: bytes

    @property
    def byte_count(self) -> int:
        return len(self.payload)

    def to_bytes(self) -> bytes:
        return _ENVELOPE.pack(self.kind, self.round_id, self.sender, self.recipient, len(self.payload)) + self.payload

    @classmethod
    def from_bytes(cls, blob: bytes) -> "RoundEnvelope":
        kind, round_id, sender, recipient, length = _ENVELOPE.unpack_from(blob, 0)
        payload = blob[_ENVELOPE.size :]
        if len(payload) != length:
            raise WireError(f"payload length {len(payload)} does not match header {length}")
        return cls(round_id, sender, recipient, Kind(kind), payload)

    def to_json(self) -> str:
        return json.dumps(
            {
                "round_id": self.round_id,
                "sender": self.sender,
                "recipient": self.recipient,
                "kind": self.kind.name.lower(),
                "byte_count": self.byte_count,
                "payload": self.payload.hex(),
            },
            sort_keys=True,
        )


def account_bytes(envelope: RoundEnvelope) -> int:
    """Bytes on the wire for one envelope, header included."""
    return ENVELOPE_HEADER_BYTES + envelope.byte_count


class _Writer:
    def __init__(self) -> None:
        self.parts: list[bytes] = []

    def u8(self, v: int) -> "_Writer":
        self.parts.append(struct.pack("<B", v))
        return self

    def u32(self, v: int) -> "_Writer":
        self.parts.append(struct.pack("<I", v))
        return self

    def f64(self, v: float) -> "_Writer":
        self.parts.append(struct.pack("<d", v))
        return self

    def reals(self, arr: np.ndarray) -> "_Writer":
        arr = np.ascontiguousarray(arr, dtype="<f8").ravel()
        self.u32(arr.size)
        self.parts.append(arr.tobytes())
        return self

    def matrix(self, arr: np.ndarray) -> "_Writer":
        arr = np.ascontiguousarray(arr, dtype="<f8")
        rows, cols = arr.shape
        self.u32(rows).u32(cols)
        self.parts.append(arr.tobytes())
        return self

    def ints(self, values) -> "_Writer":
        values = list(values)
        self.u32(len(values))
        for v in values:
            self.u32(v)
        return self

    def raw(self, blob: bytes) -> "_Writer":
        self.u32(len(blob))
        self.parts.append(blob)
        return self

    def done(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, blob: bytes) -> None:
        self.blob = blob
        self.pos = 0

    def _take(self, fmt: str):
        (v,) = struct.unpack_from(fmt, self.blob, self.pos)
        self.pos += struct.calcsize(fmt)
        return v

    def u8(self) -> int:
        return self._take("<B")

    def u32(self) -> int:
        return self._take("<I")

    def f64(self) -> float:
        return self._take("<d")

    def reals(self) -> np.ndarray:
        n = self.u32()
        arr = np.frombuffer(self.blob, dtype="<f8", count=n, offset=self.pos).astype(np.float64)
        self.pos += n * REAL_BYTES
        return arr

    def matrix(self) -> np.ndarray:
        rows, cols = self.u32(), self.u32()
        arr = np.frombuffer(self.blob, dtype="<f8", count=rows * cols, offset=self.pos).astype(np.float64)
        self.pos += rows * cols * REAL_BYTES
        return arr.reshape(rows, cols)

    def ints(self) -> tuple[int, ...]:
        return tuple(self.u32() for _ in range(self.u32()))

    def raw(self) -> bytes:
        n = self.u32()
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def finish(self) -> None:
        if self.pos != len(self.blob):
            raise WireError(f"{len(self.blob) - self.pos} trailing bytes")


# -- prior round ---------------------------------------------------------------

def encode_prior_reply(msg: ClientPriorMessage) -> bytes:
    return _Writer().u32(msg.n_k).matrix(msg.lo_ratio).matrix(msg.hi_ratio).matrix(msg.mle_ratio).done()


def decode_prior_reply(blob: bytes) -> ClientPriorMessage:
    r = _Reader(blob)
    msg = ClientPriorMessage(r.u32(), r.matrix(), r.matrix(), r.matrix())
    r.finish()
    return msg


@dataclass(frozen=True)
class PriorColumns:
    """Priors a client needs for one label: L, U and pi per group."""

    groups: tuple[int, ...]
    labels: tuple[int, ...]
    L: np.ndarray
    U: np.ndarray
    pi: np.ndarray


def encode_prior_broadcast(groups, labels, L, U, pi) -> bytes:
    return _Writer().ints(groups).ints(labels).matrix(L).matrix(U).matrix(pi).done()


def decode_prior_broadcast(blob: bytes) -> PriorColumns:
    r = _Reader(blob)
    out = PriorColumns(r.ints(), r.ints(), r.matrix(), r.matrix(), r.matrix())
    r.finish()
    return out


# -- coverage-gap round --------------------------------------------------------

@dataclass(frozen=True)
class CgRequest:
    lam: float
    tilde_y: int
    protocol: ProtocolTag
    estimator: Estimator
    tightened_lower: bool
    active_groups: tuple[int, ...]


def encode_cg_request(req: CgRequest) -> bytes:
    return (
        _Writer()
        .f64(req.lam)
        .u32(req.tilde_y)
        .u8(req.protocol)
        .u8(_ESTIMATOR_TAGS[req.estimator])
        .u8(int(req.tightened_lower))
        .ints(req.active_groups)
        .done()
    )


def decode_cg_request(blob: bytes) -> CgRequest:
    r = _Reader(blob)
    req = CgRequest(r.f64(), r.u32(), ProtocolTag(r.u8()), _TAG_ESTIMATORS[r.u8()], bool(r.u8()), r.ints())
    r.finish()
    return req


def encode_cg_reply(msg: CommEfficientMessage | EnhancedPrivacyMessage) -> bytes:
    w = _Writer()
    if isinstance(msg, CommEfficientMessage):
        has_dp = msg.sigma_u is not None
        w.u8(ProtocolTag.COMM_EFFICIENT).u32(msg.tilde_y).u8(_ESTIMATOR_TAGS[msg.estimator]).u32(msg.n_k)
        w.u8(int(has_dp)).reals(msg.l).reals(msg.u)
        if has_dp:
            w.reals(msg.sigma_l).reals(msg.sigma_u)
        return w.done()
    has_dp = msg.sigma is not None
    w.u8(ProtocolTag.ENHANCED_PRIVACY).u32(msg.tilde_y).u8(_ESTIMATOR_TAGS[msg.estimator]).u32(msg.n_k)
    w.u8(int(has_dp)).matrix(msg.pw)
    if has_dp:
        w.matrix(msg.sigma)
    return w.done()


def decode_cg_reply(blob: bytes) -> CommEfficientMessage | EnhancedPrivacyMessage:
    r = _Reader(blob)
    protocol = ProtocolTag(r.u8())
    tilde_y, estimator, n_k, has_dp = r.u32(), _TAG_ESTIMATORS[r.u8()], r.u32(), bool(r.u8())
    if protocol is ProtocolTag.COMM_EFFICIENT:
        l, u = r.reals(), r.reals()
        sigma_l, sigma_u = (r.reals(), r.reals()) if has_dp else (None, None)
        r.finish()
        return CommEfficientMessage(tilde_y, estimator, l, u, n_k, sigma_l, sigma_u)
    pw = r.matrix()
    sigma = r.matrix() if has_dp else None
    r.finish()
    return EnhancedPrivacyMessage(tilde_y, estimator, pw, n_k, sigma)


def cg_reply_header_bytes(protocol: ProtocolTag) -> int:
    """Fixed (array-size independent) bytes of a noise-free cg reply, envelope included."""
    # tag + label + estimator + n_k + dp flag, then two length prefixes (CE)
    # or rows/cols (EP).
    return ENVELOPE_HEADER_BYTES + 1 + 4 + 1 + 4 + 1 + 8


# -- quantile round ------------------------------------------------------------

class QuantileMode(enum.IntEnum):
    EXACT = 0
    SKETCH = 1


@dataclass(frozen=True)
class QuantileReply:
    n_k: int
    max_candidate_score: float
    scores: np.ndarray | None = None
    sketch: QuantileSketch | None = None


def encode_quantile_request(mode: QuantileMode, compression: int) -> bytes:
    return _Writer().u8(mode).u32(compression).done()


def decode_quantile_request(blob: bytes) -> tuple[QuantileMode, int]:
    r = _Reader(blob)
    out = QuantileMode(r.u8()), r.u32()
    r.finish()
    return out


def encode_quantile_reply(reply: QuantileReply) -> bytes:
    w = _Writer().u32(reply.n_k).f64(reply.max_candidate_score)
    if reply.sketch is not None:
        w.u8(QuantileMode.SKETCH).raw(reply.sketch.to_bytes())
    else:
        w.u8(QuantileMode.EXACT).reals(reply.scores)
    return w.done()


def decode_quantile_reply(blob: bytes) -> QuantileReply:
    r = _Reader(blob)
    n_k, max_score, mode = r.u32(), r.f64(), QuantileMode(r.u8())
    if mode is QuantileMode.SKETCH:
        reply = QuantileReply(n_k, max_score, sketch=QuantileSketch.from_bytes(r.raw()))
    else:
        reply = QuantileReply(n_k, max_score, scores=r.reals())
    r.finish()
    return reply


def read_transcript(path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)
