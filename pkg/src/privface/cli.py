"""Command-line entry point: ``privface <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 protocol or verification failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import aspe, cascade, retrieval, windows
from .protocol.client import (DEFAULT_BATCH, DEFAULT_DETECTOR, Client, ProtocolError, user_detect_full,
                              user_query, user_upload, vendor_publish)
from .protocol.messages import WireError
from .protocol.server import CloudServer
from .protocol.transport import InProcessTransport, SocketTransport, TcpServer, parse_address
from .scenario import ScenarioConfig, format_report, run_scenario

log = logging.getLogger("privface")

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class Output:
    def __init__(self, as_json: bool):
        self.as_json = as_json

    def emit(self, text: str, **record):
        if self.as_json:
            print(json.dumps(record, sort_keys=True))
        else:
            print(text)


def _members(text: str) -> list[str]:
    out = [m.strip() for m in text.split(",") if m.strip()]
    if not out:
        raise UsageError("member list is empty")
    return out


def _read_bytes(path: str) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def _write_bytes(path: str, data: bytes) -> None:
    with open(path, "wb") as fh:
        fh.write(data)


def _connect(addr: str) -> SocketTransport:
    return SocketTransport(*parse_address(addr))


# --- subcommands ----------------------------------------------------------------

def cmd_keygen(args, out: Output) -> int:
    rng = np.random.default_rng(args.seed)
    if args.purpose == "content":
        _write_bytes(args.out, retrieval.new_content_key(rng))
        out.emit(f"wrote content key to {args.out}", kind="content", path=args.out)
        return EXIT_OK
    if args.dim is None or args.dim < 1:
        raise UsageError("--dim must be a positive integer")
    key = aspe.keygen(args.dim, rng, purpose=args.purpose)
    aspe.save_key(key, args.out)
    out.emit(f"wrote {args.purpose} key (dim={key.dim}) to {args.out}",
             kind=args.purpose, dim=key.dim, path=args.out)
    return EXIT_OK


def cmd_gen_detector(args, out: Output) -> int:
    try:
        sizes = cascade.parse_stage_sizes(args.stages)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    model = cascade.synth_cascade(sizes, args.window_edge, np.random.default_rng(args.seed))
    cascade.save_model(model, args.out)
    out.emit(f"wrote detector: {len(model.stages)} stages, {model.n_weak} weak classifiers, "
             f"L={model.dim} to {args.out}",
             stages=len(model.stages), weak=model.n_weak, dim=model.dim, path=args.out)
    return EXIT_OK


def cmd_encrypt_detector(args, out: Output) -> int:
    key = aspe.load_key(args.key)
    model = cascade.load_model(args.model)
    if key.dim != model.dim:
        raise UsageError(f"key dim {key.dim} does not match detector window length {model.dim}")
    rng = np.random.default_rng(args.seed)
    if args.connect:
        with _connect(args.connect) as tr:
            ack = vendor_publish(key, model, Client(tr), args.detector_id, rng)
        out.emit(f"registered detector {args.detector_id!r} ({ack.count} encrypted classifiers)",
                 detector_id=args.detector_id, weak=ack.count)
    if args.out:
        enc = cascade.encrypt_detector(key, model, rng)
        cascade.save_encrypted_detector(enc, args.out)
        out.emit(f"wrote encrypted detector ({enc.n_weak} classifiers) to {args.out}",
                 weak=enc.n_weak, path=args.out)
    if not args.connect and not args.out:
        raise UsageError("give --out and/or --connect")
    return EXIT_OK


def _load_server(args) -> CloudServer:
    cloud = CloudServer()
    if getattr(args, "detector", None):
        cloud.state.register(args.detector_id, cascade.load_encrypted_detector(args.detector))
    if getattr(args, "index", None):
        cloud.state.store.add(retrieval.load_index(args.index).records())
    return cloud


def cmd_serve(args, out: Output) -> int:
    cloud = _load_server(args)
    srv = TcpServer(cloud, parse_address(args.listen))
    host, port = srv.address
    out.emit(f"listening on {host}:{port}", host=host, port=port)
    sys.stdout.flush()
    try:
        srv.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        srv.server_close()
        if args.save_index:
            retrieval.save_index(cloud.state.store, args.save_index)
    return EXIT_OK


def cmd_detect(args, out: Output) -> int:
    key = aspe.load_key(args.key)
    img = windows.load_image_file(args.image)
    rng = np.random.default_rng(args.seed)
    if args.connect:
        tr = _connect(args.connect)
    elif args.detector:
        tr = InProcessTransport(_load_server(args))
    else:
        raise UsageError("give --connect or --detector")
    try:
        res = user_detect_full(img, key, Client(tr), args.detector_id, args.window_edge, args.stride,
                               args.scale_factor, args.min_edge, args.batch_size, rng)
    finally:
        tr.close()
    for g in res.accepted:
        x, y, w, h = g.source_box()
        out.emit(f"face window x={x} y={y} w={w} h={h} scale={g.scale:.4f}",
                 x=x, y=y, w=w, h=h, scale=g.scale)
    out.emit(f"{len(res.windows)} windows evaluated, {len(res.accepted)} accepted",
             windows=len(res.windows), accepted=len(res.accepted))
    return EXIT_OK


def _manifest(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        entries = json.load(fh)
    base = os.path.dirname(os.path.abspath(path))
    photos = []
    for e in entries:
        try:
            pid, ppath, members = e["id"], e["path"], list(e.get("members", []))
        except (KeyError, TypeError):
            raise UsageError('manifest entries need "id", "path" and "members"') from None
        photos.append((pid, _read_bytes(os.path.join(base, ppath)), members))
    return photos


def cmd_index(args, out: Output) -> int:
    reg = retrieval.IdentityRegistry(_members(args.members))
    prk = aspe.load_key(args.key)
    content_key = _read_bytes(args.content_key)
    photos = _manifest(args.manifest)
    rng = np.random.default_rng(args.seed)
    if args.connect:
        with _connect(args.connect) as tr:
            ack = user_upload(photos, reg, prk, content_key, Client(tr), rng)
        out.emit(f"uploaded {ack.count} photos", uploaded=ack.count)
    elif args.out:
        store = retrieval.PhotoStore(len(reg))
        store.add(retrieval.seal_photo(pid, data, m, reg, prk, content_key, rng) for pid, data, m in photos)
        retrieval.save_index(store, args.out)
        out.emit(f"wrote index of {len(store)} photos to {args.out}", photos=len(store), path=args.out)
    else:
        raise UsageError("give --connect or --out")
    return EXIT_OK


def cmd_query(args, out: Output) -> int:
    reg = retrieval.IdentityRegistry(_members(args.members))
    prk = aspe.load_key(args.key)
    content_key = _read_bytes(args.content_key)
    targets = _members(args.targets)
    if args.connect:
        tr = _connect(args.connect)
    elif args.index:
        tr = InProcessTransport(_load_server(args))
    else:
        raise UsageError("give --connect or --index")
    try:
        found = user_query(targets, reg, prk, content_key, Client(tr), np.random.default_rng(args.seed))
    finally:
        tr.close()
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
    for pid, data in found:
        if args.out_dir:
            _write_bytes(os.path.join(args.out_dir, pid), data)
        out.emit(pid, photo_id=pid, bytes=len(data))
    out.emit(f"{len(found)} matching photos", matches=len(found))
    return EXIT_OK


def cmd_demo(args, out: Output) -> int:
    cfg = ScenarioConfig(seed=args.seed, n_photos=args.photos, members=tuple(_members(args.members)),
                         stage_sizes=tuple(cascade.parse_stage_sizes(args.stages)),
                         window_edge=args.window_edge, batch_size=args.batch_size,
                         detect_photos=args.detect_photos)
    res = run_scenario(cfg, transport=args.transport)
    if out.as_json:
        for pid, n, acc, agree in res.detections:
            out.emit("", kind="detect", photo_id=pid, windows=n, accepted=acc, oracle_agrees=agree)
        for q in res.queries:
            out.emit("", kind="query", label=q.label, targets=list(q.targets), lam=q.lam,
                     matched=q.matched, oracle_agrees=q.ok)
        out.emit("", kind="verdict", detection_oracle=res.detect_ok, oracle_match=res.match_ok)
    else:
        for line in format_report(res):
            print(line)
    return EXIT_OK if res.ok else EXIT_FAILURE


# --- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="privface", description="Privacy-preserving face retrieval protocol tools.")
    p.add_argument("--json", action="store_true", help="emit one JSON object per result line")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def seed(sp):
        sp.add_argument("--seed", type=int, default=None, help="RNG seed (default: fresh entropy)")

    def window_flags(sp):
        sp.add_argument("--window-edge", type=int, default=None, help="default: sqrt of key dim")
        sp.add_argument("--stride", type=int, default=windows.DEFAULT_STRIDE)
        sp.add_argument("--scale-factor", type=float, default=windows.DEFAULT_SCALE_FACTOR)
        sp.add_argument("--min-edge", type=int, default=None, help="default: window edge")
        sp.add_argument("--batch-size", type=int, default=DEFAULT_BATCH)

    sp = sub.add_parser("keygen", help="generate a detector/matching key or a photo content key")
    sp.add_argument("--purpose", choices=("detector", "matching", "content"), default="detector")
    sp.add_argument("--dim", type=int, default=None, help="vector length (576 for 24x24 windows)")
    sp.add_argument("--out", required=True)
    seed(sp)
    sp.set_defaults(func=cmd_keygen)

    sp = sub.add_parser("gen-detector", help="synthesize a random rejector cascade")
    sp.add_argument("--stages", default="frontal", help='comma-separated stage sizes, or "frontal"')
    sp.add_argument("--window-edge", type=int, default=windows.DEFAULT_WINDOW_EDGE)
    sp.add_argument("--out", required=True)
    seed(sp)
    sp.set_defaults(func=cmd_gen_detector)

    sp = sub.add_parser("encrypt-detector", help="encrypt a detector; write it and/or register it")
    sp.add_argument("--key", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--out")
    sp.add_argument("--connect", metavar="HOST:PORT")
    sp.add_argument("--detector-id", default=DEFAULT_DETECTOR)
    seed(sp)
    sp.set_defaults(func=cmd_encrypt_detector)

    sp = sub.add_parser("serve", help="run the cloud server")
    sp.add_argument("--listen", default="127.0.0.1:7400", metavar="HOST:PORT")
    sp.add_argument("--detector", help="preload an encrypted detector file")
    sp.add_argument("--detector-id", default=DEFAULT_DETECTOR)
    sp.add_argument("--index", help="preload an index file")
    sp.add_argument("--save-index", help="write the photo store here on shutdown")
    sp.set_defaults(func=cmd_serve)

    sp = sub.add_parser("detect", help="secure face detection on a PGM/PPM image")
    sp.add_argument("--key", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--connect", metavar="HOST:PORT")
    sp.add_argument("--detector", help="evaluate against a local encrypted detector file instead")
    sp.add_argument("--detector-id", default=DEFAULT_DETECTOR)
    window_flags(sp)
    seed(sp)
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("index", help="encrypt photos + label vectors; upload or write an index file")
    sp.add_argument("--members", required=True, help="ordered comma-separated registry")
    sp.add_argument("--manifest", required=True, help='JSON list of {"id", "path", "members"}')
    sp.add_argument("--key", required=True, help="matching key")
    sp.add_argument("--content-key", required=True)
    sp.add_argument("--connect", metavar="HOST:PORT")
    sp.add_argument("--out")
    seed(sp)
    sp.set_defaults(func=cmd_index)

    sp = sub.add_parser("query", help="retrieve and decrypt photos containing all target members")
    sp.add_argument("--members", required=True)
    sp.add_argument("--targets", required=True)
    sp.add_argument("--key", required=True)
    sp.add_argument("--content-key", required=True)
    sp.add_argument("--connect", metavar="HOST:PORT")
    sp.add_argument("--index", help="match against a local index file instead")
    sp.add_argument("--out-dir")
    seed(sp)
    sp.set_defaults(func=cmd_query)

    sp = sub.add_parser("demo", help="scripted end-to-end run with oracle verification")
    sp.add_argument("--seed", type=int, default=7)
    sp.add_argument("--photos", type=int, default=1000)
    sp.add_argument("--members", default=",".join(ScenarioConfig().members))
    sp.add_argument("--stages", default="frontal")
    sp.add_argument("--window-edge", type=int, default=windows.DEFAULT_WINDOW_EDGE)
    sp.add_argument("--batch-size", type=int, default=DEFAULT_BATCH)
    sp.add_argument("--detect-photos", type=int, default=4)
    sp.add_argument("--transport", choices=("inprocess", "socket"), default="inprocess")
    sp.set_defaults(func=cmd_demo)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    out = Output(args.json)
    try:
        return args.func(args, out)
    except UsageError as exc:
        print(f"privface: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ProtocolError, WireError, ConnectionError, retrieval.PhotoAuthError) as exc:
        print(f"privface: failure: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (retrieval.UnknownMemberError, OSError, ValueError) as exc:
        # bad inputs: unreadable/malformed files, unknown members, dimension mismatches
        print(f"privface: error: {exc}", file=sys.stderr)
        return EXIT_USAGE

if __name__ == "__main__":
    sys.exit(main())
