"""Scripted end-to-end run of the vendor / user / cloud flow, with plaintext oracle checks.

Offline phase: the vendor encrypts and registers its detector and hands the
product key to the user out of band; the user runs secure detection on its
photos, labels them (membership is given, recognition is not modelled),
and uploads encrypted photos with encrypted label vectors. Online phase: the
user queries by photo (detect, then take that photo's members) and by member
list; the cloud matches and returns ciphertexts, which the user decrypts.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .aspe import AspeKey, key_from_bytes, key_to_bytes, keygen
from .cascade import FRONTAL_STAGE_SIZES, CascadeModel, eval_cascade_plain, synth_cascade
from .retrieval import IdentityRegistry, new_content_key
from .windows import DEFAULT_SCALE_FACTOR, DEFAULT_STRIDE, GrayImage, image_to_pgm, load_image
from .protocol.client import Client, user_detect_full, user_query_raw, user_upload, vendor_publish
from .protocol.server import CloudServer
from .protocol.transport import InProcessTransport, SocketTransport, serve
from .retrieval import decrypt_photo

DEFAULT_MEMBERS = ("member-1", "member-2", "member-3", "member-4", "member-5")


@dataclass
class ScenarioConfig:
    seed: int = 7
    members: tuple[str, ...] = DEFAULT_MEMBERS
    n_photos: int = 1000
    presence: float = 0.4
    stage_sizes: tuple[int, ...] = FRONTAL_STAGE_SIZES
    window_edge: int = 24
    photo_edge: int = 32
    stride: int = DEFAULT_STRIDE
    scale_factor: float = DEFAULT_SCALE_FACTOR
    batch_size: int = 256
    detect_photos: int = 4
    list_queries: int = 3
    extra_photos: tuple[tuple[str, bytes, tuple[str, ...]], ...] = ()


@dataclass
class QueryResult:
    label: str
    targets: tuple[str, ...]
    lam: int
    matched: list[str]
    expected: list[str]
    decrypted_ok: bool

    @property
    def ok(self) -> bool:
        return self.decrypted_ok and self.matched == self.expected


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    n_weak: int
    n_stages: int
    detections: list[tuple[str, int, int, bool]] = field(default_factory=list)  # id, windows, accepted, agree
    queries: list[QueryResult] = field(default_factory=list)
    match_payloads: list[bytes] = field(default_factory=list)
    state_bytes: bytes = b""
    transcript: list[tuple[bytes, bytes]] = field(default_factory=list)
    # user/vendor side material, kept for leak checks
    detector_key: AspeKey | None = None
    matching_key: AspeKey | None = None
    window_vectors: list[np.ndarray] = field(default_factory=list)
    photos: dict[str, bytes] = field(default_factory=dict)

    @property
    def detect_ok(self) -> bool:
        return all(agree for *_, agree in self.detections)

    @property
    def match_ok(self) -> bool:
        return all(q.ok for q in self.queries)

    @property
    def ok(self) -> bool:
        return self.detect_ok and self.match_ok


def synth_photo(rng: np.random.Generator, edge: int) -> bytes:
    """A small random grey image as PGM bytes (stand-in for a camera photo)."""
    base = rng.uniform(0.2, 0.8)
    px = np.clip(base + 0.25 * rng.standard_normal((edge, edge)), 0.0, 1.0)
    return image_to_pgm(GrayImage(px))


@contextmanager
def _transport(kind: str, server: CloudServer):
    if kind == "inprocess":
        t = InProcessTransport(server, record=True)
        yield t
    elif kind == "socket":
        srv = serve(server)
        t = SocketTransport(*srv.address)
        t.transcript = []
        try:
            yield t
        finally:
            t.close()
            srv.stop()
    else:
        raise ValueError(f"unknown transport {kind!r}")


def run_scenario(config: ScenarioConfig | None = None, transport: str = "inprocess",
                 server: CloudServer | None = None) -> ScenarioResult:
    cfg = config or ScenarioConfig()
    vendor_ss, user_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    vrng, urng = np.random.default_rng(vendor_ss), np.random.default_rng(user_ss)
    server = server or CloudServer()
    reg = IdentityRegistry(cfg.members)

    # (1) vendor: product key + detector
    sk_vendor = keygen(cfg.window_edge ** 2, vrng, purpose="detector")
    model: CascadeModel = synth_cascade(cfg.stage_sizes, cfg.window_edge, vrng)
    # product key travels out of band, as a key file
    sk = key_from_bytes(key_to_bytes(sk_vendor))

    # user photo collection and memberships (recognition output is given)
    # extra (caller-supplied) photos go first so they are among the detected ones
    photos: list[tuple[str, bytes, tuple[str, ...]]] = list(cfg.extra_photos)
    for i in range(cfg.n_photos):
        present = tuple(m for m in cfg.members if urng.random() < cfg.presence)
        photos.append((f"photo-{i:04d}", synth_photo(urng, cfg.photo_edge), present))
    prk = keygen(len(reg), urng, purpose="matching")
    content_key = new_content_key(urng)

    result = ScenarioResult(cfg, model.n_weak, len(model.stages), detector_key=sk, matching_key=prk,
                            photos={pid: data for pid, data, _ in photos})
    membership = {pid: set(members) for pid, _, members in photos}

    def oracle(targets) -> list[str]:
        return [pid for pid, _, _ in photos if set(targets) <= membership[pid]]

    with _transport(transport, server) as tr:
        client = Client(tr)
        vendor_publish(sk_vendor, model, client, rng=vrng)

        def detect(pid: str, data: bytes):
            det = user_detect_full(load_image(data), sk, client, window_edge=cfg.window_edge,
                                   stride=cfg.stride, scale_factor=cfg.scale_factor,
                                   batch_size=cfg.batch_size, rng=urng)
            agree = all(o.accepted == eval_cascade_plain(model, w.vector).accepted
                        for w, o in zip(det.windows, det.outcomes))
            result.window_vectors.extend(w.vector for w in det.windows)
            result.detections.append((pid, len(det.windows), len(det.accepted), agree))

        # (2)-(4) secure detection on part of the collection, then labelling
        for pid, data, _ in photos[:cfg.detect_photos]:
            detect(pid, data)
        # (5) upload
        user_upload(photos, reg, prk, content_key, client, rng=urng)

        def query(label: str, targets: tuple[str, ...]):
            reply = user_query_raw(targets, reg, prk, client, rng=urng)
            result.match_payloads.append(tr.transcript[-1][1])
            decrypted_ok = all(decrypt_photo(p.ciphertext, content_key, p.nonce) == result.photos[p.photo_id]
                               for p in reply.photos)
            result.queries.append(QueryResult(label, targets, len(set(targets)),
                                              [p.photo_id for p in reply.photos], oracle(targets),
                                              decrypted_ok))

        # (6)-(12) query by photo: detect on the query photo, take its members
        candidates = [p for p in photos if p[2]]
        if candidates:
            qpid, qdata, qmembers = candidates[int(urng.integers(len(candidates)))]
            detect(qpid, qdata)
            query(f"by-photo {qpid}", tuple(qmembers))
        # query by member list
        for _ in range(cfg.list_queries):
            k = int(urng.integers(1, len(reg) + 1))
            targets = tuple(sorted(urng.choice(reg.members, size=k, replace=False).tolist()))
            query("by-members", targets)
        result.transcript = list(tr.transcript)

    result.state_bytes = server.state.to_bytes()
    return result


def format_report(res: ScenarioResult) -> list[str]:
    cfg = res.config
    lines = [
        f"registry: {','.join(cfg.members)} (t={len(cfg.members)})",
        f"detector: {res.n_stages} stages, {res.n_weak} weak classifiers, L={cfg.window_edge ** 2}",
        f"uploaded: {len(res.photos)} photos",
    ]
    for pid, n, acc, agree in res.detections:
        lines.append(f"detect {pid}: {n} windows, {acc} accepted, plaintext agreement: "
                     f"{'OK' if agree else 'MISMATCH'}")
    for q in res.queries:
        lines.append(f"query {q.label} targets={{{','.join(q.targets)}}} lambda={q.lam}: "
                     f"{len(q.matched)} matches")
        lines.append("  matched: " + (" ".join(q.matched) if q.matched else "(none)"))
    lines.append(f"detection oracle: {'OK' if res.detect_ok else 'FAIL'}")
    lines.append(f"oracle match: {'OK' if res.match_ok else 'FAIL'}")
    return lines
