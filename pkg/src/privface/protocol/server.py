"""The honest-but-curious cloud: holds ciphertexts, runs detection and matching, answers every request once."""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass

from ..aspe import DimensionError
from ..binio import Writer
from ..cascade import EncryptedDetector, eval_cascade_secure_many, write_encrypted_detector
from ..retrieval import (MATCH_TOL, DuplicatePhotoError, NonceReuseError, PhotoStore,
                         index_to_bytes)
from .messages import (Ack, DetectRequest, DetectResponse, ErrorCode, ErrorReply, MatchedPhoto,
                       MatchRequest, MatchResponse, RegisterDetector, UploadPhotos, WireError,
                       decode, encode)

log = logging.getLogger(__name__)

STATE_MAGIC = b"SRVS"


@dataclass(frozen=True)
class LogEntry:
    kind: str
    request_id: int
    outcome: str            # "ok" or an ErrorCode name


class ServerState:
    """Everything the cloud holds. Only ciphertext payloads plus plaintext votes/thresholds/lambda."""

    def __init__(self, match_tol: float = MATCH_TOL):
        self.detectors: dict[str, EncryptedDetector] = {}
        self.store = PhotoStore()
        self.request_log: list[LogEntry] = []
        self.match_tol = match_tol
        self._lock = threading.Lock()

    def register(self, detector_id: str, detector: EncryptedDetector) -> None:
        with self._lock:
            self.detectors[detector_id] = detector

    def detector(self, detector_id: str) -> EncryptedDetector | None:
        with self._lock:
            return self.detectors.get(detector_id)

    def log(self, entry: LogEntry) -> None:
        with self._lock:
            self.request_log.append(entry)

    def to_bytes(self) -> bytes:
        """Serialized view of the whole state, in stable order."""
        with self._lock:
            detectors = sorted(self.detectors.items())
            entries = list(self.request_log)
        w = Writer().raw(STATE_MAGIC).u32(len(detectors))
        for did, det in detectors:
            w.text(did)
            write_encrypted_detector(w, det)
        w.blob(index_to_bytes(self.store))
        w.u32(len(entries))
        for e in entries:
            w.text(e.kind).u32(e.request_id).text(e.outcome)
        return w.getvalue()


class CloudServer:
    def __init__(self, state: ServerState | None = None):
        self.state = state or ServerState()

    def handle_frame(self, frame: bytes) -> bytes:
        try:
            msg = decode(frame)
        except WireError as exc:
            log.warning("rejecting frame: %s", exc)
            rid = int.from_bytes(frame[6:10], "little") if len(frame) >= 10 else 0
            self.state.log(LogEntry("frame", rid, exc.code.name))
            return encode(ErrorReply(rid, exc.code, exc.message))
        return encode(self.handle(msg))

    def handle(self, msg):
        kind = type(msg).__name__
        rid = getattr(msg, "request_id", 0)
        try:
            reply = self._dispatch(msg)
        except WireError as exc:
            reply = ErrorReply(rid, exc.code, exc.message)
        except DimensionError as exc:
            reply = ErrorReply(rid, ErrorCode.BAD_DIMENSION, str(exc))
        except NonceReuseError as exc:
            reply = ErrorReply(rid, ErrorCode.NONCE_REUSE, str(exc))
        except DuplicatePhotoError as exc:
            reply = ErrorReply(rid, ErrorCode.DUPLICATE_PHOTO, str(exc))
        outcome = ErrorCode(reply.code).name if isinstance(reply, ErrorReply) else "ok"
        self.state.log(LogEntry(kind, rid, outcome))
        return reply

    def _dispatch(self, msg):
        st = self.state
        if isinstance(msg, RegisterDetector):
            st.register(msg.detector_id, msg.detector)
            return Ack(msg.request_id, msg.detector.n_weak)
        if isinstance(msg, DetectRequest):
            det = st.detector(msg.detector_id)
            if det is None:
                raise WireError(ErrorCode.DETECTOR_MISSING, f"no detector {msg.detector_id!r}")
            for ew in msg.windows:
                if ew.dim != det.dim:
                    raise DimensionError(f"window dim {ew.dim} != detector dim {det.dim}")
            outcomes = eval_cascade_secure_many(det, msg.windows)
            return DetectResponse(msg.request_id, tuple(outcomes), msg.geometry)
        if isinstance(msg, UploadPhotos):
            st.store.add(msg.records)
            return Ack(msg.request_id, len(msg.records))
        if isinstance(msg, MatchRequest):
            hits = st.store.match(msg.eq, msg.lam, st.match_tol)
            return MatchResponse(msg.request_id,
                                 tuple(MatchedPhoto(r.photo_id, r.ciphertext, r.nonce) for r in hits))
        raise WireError(ErrorCode.UNEXPECTED_MESSAGE, f"{type(msg).__name__} is not a request")
