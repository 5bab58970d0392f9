"""Vendor and user drivers for the three-party flow."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from ..aspe import AspeKey, DimensionError, _rng, encrypt_query_many
from ..cascade import CascadeModel, DetectionOutcome, encrypt_detector
from ..retrieval import (IdentityRegistry, build_query, decrypt_photo, encrypt_query_label,
                         seal_photo)
from ..windows import (DEFAULT_SCALE_FACTOR, DEFAULT_STRIDE, DetectionWindow, GrayImage,
                       pyramid_windows)
from .messages import (Ack, DetectRequest, DetectResponse, ErrorReply, MatchRequest, MatchResponse,
                       RegisterDetector, UploadPhotos, WindowGeometry, decode, encode)

DEFAULT_BATCH = 256
DEFAULT_DETECTOR = "default"


class ProtocolError(RuntimeError):
    def __init__(self, code: int, message: str):
        self.code = code
        self.message = message
        super().__init__(f"server error {code}: {message}")


class Client:
    """Request/reply over any transport with a ``request(frame) -> frame`` method."""

    def __init__(self, transport, first_request_id: int = 1):
        self.transport = transport
        self._next_id = first_request_id

    def next_id(self) -> int:
        rid = self._next_id
        self._next_id += 1
        return rid

    def call(self, msg):
        reply = decode(self.transport.request(encode(msg)))
        if reply.request_id != msg.request_id:
            raise ProtocolError(0, f"reply id {reply.request_id} != request id {msg.request_id}")
        if isinstance(reply, ErrorReply):
            raise ProtocolError(reply.code, reply.message)
        return reply


def vendor_publish(detector_key: AspeKey, model: CascadeModel, client: Client,
                   detector_id: str = DEFAULT_DETECTOR, rng=None) -> Ack:
    """Encrypt the cascade and register it with the cloud. The key itself never leaves this side."""
    if detector_key.dim != model.dim:
        raise DimensionError(f"key dim {detector_key.dim} != window length {model.dim}")
    enc = encrypt_detector(detector_key, model, rng)
    return client.call(RegisterDetector(client.next_id(), detector_id, enc))


def geometry_of(w: DetectionWindow) -> WindowGeometry:
    return WindowGeometry(w.origin_x, w.origin_y, w.scale, int(round(w.vector.size ** 0.5)))


@dataclass
class DetectionResult:
    windows: list[DetectionWindow]
    outcomes: list[DetectionOutcome]
    geometry: list[WindowGeometry]

    @property
    def accepted(self) -> list[WindowGeometry]:
        return [g for g, o in zip(self.geometry, self.outcomes) if o.accepted]


def user_detect_full(photo: GrayImage, sk: AspeKey, client: Client,
                     detector_id: str = DEFAULT_DETECTOR, window_edge: int | None = None,
                     stride: int = DEFAULT_STRIDE, scale_factor: float = DEFAULT_SCALE_FACTOR,
                     min_edge: int | None = None, batch_size: int = DEFAULT_BATCH,
                     rng=None) -> DetectionResult:
    sk.require("detector")
    edge = window_edge or int(round(sk.dim ** 0.5))
    if edge * edge != sk.dim:
        raise DimensionError(f"window edge {edge} does not match key dim {sk.dim}")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = _rng(rng)
    windows = pyramid_windows(photo, edge, stride, scale_factor, min_edge)
    geometry = [geometry_of(w) for w in windows]
    outcomes: list[DetectionOutcome] = []
    for lo in range(0, len(windows), batch_size):
        chunk = windows[lo:lo + batch_size]
        encs = encrypt_query_many(sk, [w.vector for w in chunk], rng)
        reply: DetectResponse = client.call(
            DetectRequest(client.next_id(), detector_id, tuple(encs), tuple(geometry[lo:lo + batch_size])))
        if len(reply.outcomes) != len(chunk):
            raise ProtocolError(0, "detect reply size does not match request")
        outcomes.extend(reply.outcomes)
    return DetectionResult(windows, outcomes, geometry)


def user_detect(photo: GrayImage, sk: AspeKey, client: Client, **kwargs) -> list[WindowGeometry]:
    """Geometries of the windows the cloud accepted."""
    return user_detect_full(photo, sk, client, **kwargs).accepted


def user_upload(photos: Iterable[tuple[str, bytes, Iterable[str]]], reg: IdentityRegistry,
                prk: AspeKey, content_key: bytes, client: Client, rng=None) -> Ack:
    """Seal (photo_id, bytes, members) triples and upload them in one message."""
    if prk.dim != len(reg):
        raise DimensionError(f"matching key dim {prk.dim} != registry size {len(reg)}")
    rng = _rng(rng)
    records = tuple(seal_photo(pid, data, members, reg, prk, content_key, rng)
                    for pid, data, members in photos)
    return client.call(UploadPhotos(client.next_id(), records))


def user_query_raw(targets: Iterable[str], reg: IdentityRegistry, prk: AspeKey,
                   client: Client, rng=None) -> MatchResponse:
    if prk.dim != len(reg):
        raise DimensionError(f"matching key dim {prk.dim} != registry size {len(reg)}")
    q = build_query(reg, targets)
    eq = encrypt_query_label(prk, q, rng)
    return client.call(MatchRequest(client.next_id(), eq, q.lam))


def user_query(targets: Iterable[str], reg: IdentityRegistry, prk: AspeKey, content_key: bytes,
               client: Client, rng=None) -> list[tuple[str, bytes]]:
    """Query by member list; returns decrypted (photo_id, bytes) in store order."""
    reply = user_query_raw(targets, reg, prk, client, rng)
    return [(p.photo_id, decrypt_photo(p.ciphertext, content_key, p.nonce)) for p in reply.photos]

