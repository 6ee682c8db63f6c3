"""Navigator / prescription feedback loop over a local stream socket.

Frames are ``u32 length | u8 type | payload`` (little-endian), where
``length`` counts the type byte plus the payload.

=====  ============  =====================================================
type   name          payload
=====  ============  =====================================================
1      navigator     u32 k, f64 timestamp, volume file bytes
2      prescription  u32 k, 9 f64 plane R, 3 f64 plane t, 3 f64 FOV shift,
                     9 f64 pose R, 3 f64 pose t, u8 status, f64 compute ms
3      error         u32 k, utf-8 message
4      end           empty
=====  ============  =====================================================
"""
from __future__ import annotations

import json
import math
import socket
import struct
import threading
import time
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import so3, synth, volio
from .errors import FormatError, ProtocolError, ValidationError
from .pose import RigidPose, project_to_rotation

NAVIGATOR, PRESCRIPTION, ERROR, END = 1, 2, 3, 4
STATUS_OK, STATUS_FALLBACK = 0, 1
DEADLINE_S = 1.0
MAX_FRAME = 64 * 1024 * 1024
_LEN = struct.Struct("<IB")
_NAV = struct.Struct("<Id")
_RX = struct.Struct("<I9d3d3d9d3dBd")


# ---------------------------------------------------------------------------
# framing


def encode_frame(kind: int, payload: bytes = b"") -> bytes:
    return _LEN.pack(len(payload) + 1, kind) + payload


def _recv_exact(sock, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError(f"connection closed with {n - len(buf)} bytes outstanding")
        buf += chunk
    return bytes(buf)


def read_frame(sock) -> tuple:
    head = _recv_exact(sock, 4)
    (length,) = struct.unpack("<I", head)
    if length < 1 or length > MAX_FRAME:
        raise ProtocolError(f"bad frame length {length}")
    body = _recv_exact(sock, length)
    return body[0], body[1:]


@dataclass
class NavigatorMessage:
    k: int
    volume: volio.Volume
    timestamp: float = 0.0

    def encode(self) -> bytes:
        return encode_frame(NAVIGATOR, _NAV.pack(self.k, self.timestamp) + volio.encode(self.volume))

    @classmethod
    def decode(cls, payload: bytes) -> "NavigatorMessage":
        if len(payload) < _NAV.size:
            raise FormatError("short navigator payload", offset=len(payload), missing=_NAV.size - len(payload))
        k, ts = _NAV.unpack_from(payload)
        return cls(k, volio.decode(payload[_NAV.size:]), ts)


@dataclass
class PrescriptionMessage:
    k: int
    plane: RigidPose
    fov_shift: np.ndarray
    pose: RigidPose
    status: int = STATUS_OK
    compute_ms: float = 0.0

    def encode(self) -> bytes:
        return encode_frame(PRESCRIPTION, _RX.pack(
            self.k, *self.plane.R.ravel(), *self.plane.t, *np.asarray(self.fov_shift, dtype=float),
            *self.pose.R.ravel(), *self.pose.t, self.status, self.compute_ms))

    @classmethod
    def decode(cls, payload: bytes) -> "PrescriptionMessage":
        if len(payload) != _RX.size:
            raise FormatError("bad prescription payload size", offset=len(payload),
                              missing=max(_RX.size - len(payload), 0))
        v = _RX.unpack(payload)
        k = v[0]
        plane = RigidPose(np.array(v[1:10]).reshape(3, 3), np.array(v[10:13]))
        fov = np.array(v[13:16])
        pose = RigidPose(np.array(v[16:25]).reshape(3, 3), np.array(v[25:28]))
        return cls(k, plane, fov, pose, v[28], v[29])

    def record(self) -> dict:
        return {
            "k": self.k,
            "status": "ok" if self.status == STATUS_OK else "fallback",
            "plane_R": self.plane.R.tolist(),
            "plane_t_mm": self.plane.t.tolist(),
            "fov_shift_mm": np.asarray(self.fov_shift).tolist(),
            "compute_ms": self.compute_ms,
        }


def error_frame(k: int, message: str) -> bytes:
    return encode_frame(ERROR, struct.pack("<I", k) + message.encode())


# ---------------------------------------------------------------------------
# estimators: f(k, Volume) -> RigidPose


class OracleEstimator:
    """Looks up the true pose; stands in for a perfect tracker."""

    name = "oracle"

    def __init__(self, trajectory):
        self.trajectory = trajectory

    def __call__(self, k, vol):
        return self.trajectory.poses[k]


class SleepyEstimator:
    """Wraps an estimator and sleeps ``delay`` seconds on chosen steps (deadline tests)."""

    def __init__(self, inner, delay: float = 2.0, steps=None):
        self.inner = inner
        self.delay = delay
        self.steps = None if steps is None else set(steps)
        self.name = f"sleepy({getattr(inner, 'name', 'estimator')})"

    def __call__(self, k, vol):
        if self.steps is None or k in self.steps:
            time.sleep(self.delay)
        return self.inner(k, vol)


def brain_mask(volume, level: float = 0.3) -> np.ndarray:
    """Largest connected component above ``level`` x max, holes filled."""
    v = np.asarray(volume, dtype=np.float64)
    m = v > level * v.max()
    lab, n = ndimage.label(m)
    if n == 0:
        raise ValidationError("no foreground in navigator")
    sizes = ndimage.sum(m, lab, range(1, n + 1))
    return ndimage.binary_fill_holes(lab == 1 + int(np.argmax(sizes)))


class NetworkEstimator:
    """Rotation from the equivariant regressor, translation from the mask centroid."""

    name = "network"

    def __init__(self, net, params, size: int | None = None, fill: float = 0.6):
        self.net = net
        self.params = np.asarray(params)
        self.size = size or net.spec.input_size
        self.fill = fill

    def __call__(self, k, vol: volio.Volume):
        data = np.asarray(vol.data, dtype=np.float64)
        mask = brain_mask(data)
        vs = vol.voxel_size[0]
        crop, _ = synth.crop_to_brain(data, mask, vs, self.size, self.fill)
        r = project_to_rotation(self.net.forward(crop, self.params))
        idx = np.argwhere(mask).mean(axis=0)
        t = vol.affine[:3, :3] @ idx + vol.affine[:3, 3]
        return RigidPose(r, t)


# ---------------------------------------------------------------------------
# server


def _run_with_deadline(fn, args, deadline):
    box = {}

    def work():
        try:
            box["value"] = fn(*args)
        except BaseException as exc:       # reported as a fallback
            box["error"] = exc

    th = threading.Thread(target=work, daemon=True)
    th.start()
    th.join(deadline)
    if th.is_alive():
        return None, "deadline exceeded"
    if "error" in box:
        return None, repr(box["error"])
    return box["value"], None


class PoseServer:
    """Serial request handler: one navigator in, one prescription out."""

    def __init__(self, estimator, plan, deadline: float = DEADLINE_S):
        self.estimator = estimator
        self.plan = plan
        self.deadline = deadline
        self.previous = RigidPose.identity()
        self.last_reason = None

    def handle(self, msg: NavigatorMessage) -> PrescriptionMessage:
        t0 = time.perf_counter()
        est, reason = _run_with_deadline(self.estimator, (msg.k, msg.volume), self.deadline)
        if est is not None and not isinstance(est, RigidPose):
            est, reason = None, "estimator returned a non-pose"
        status = STATUS_OK
        if est is None:
            est, status = self.previous, STATUS_FALLBACK
        self.last_reason = reason
        self.previous = est
        target = self.plan.planes[msg.k % len(self.plan.planes)]
        ms = (time.perf_counter() - t0) * 1000.0
        return PrescriptionMessage(msg.k, est @ target, est.t.copy(), est, status, ms)

    def serve_connection(self, sock):
        """Process frames until an end frame or a closed connection."""
        while True:
            try:
                kind, payload = read_frame(sock)
            except ProtocolError as exc:
                sock.sendall(error_frame(0, str(exc)))
                return
            if kind == END:
                sock.sendall(encode_frame(END))
                return
            if kind != NAVIGATOR:
                sock.sendall(error_frame(0, f"unexpected frame type {kind}"))
                continue
            try:
                msg = NavigatorMessage.decode(payload)
            except (FormatError, ValidationError) as exc:
                k = struct.unpack_from("<I", payload)[0] if len(payload) >= 4 else 0
                sock.sendall(error_frame(k, f"malformed navigator: {exc}"))
                continue
            sock.sendall(self.handle(msg).encode())


def parse_endpoint(endpoint: str):
    """``host:port`` for TCP or a filesystem path for a unix socket."""
    if ":" in endpoint and not endpoint.startswith("/"):
        host, port = endpoint.rsplit(":", 1)
        return socket.AF_INET, (host or "127.0.0.1", int(port))
    return socket.AF_UNIX, endpoint


def serve(endpoint: str, estimator, plan, deadline: float = DEADLINE_S, ready=None):
    """Bind ``endpoint``, accept one scanner and serve it until the stream ends."""
    family, addr = parse_endpoint(endpoint)
    with socket.socket(family, socket.SOCK_STREAM) as srv:
        if family == socket.AF_INET:
            srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        srv.bind(addr)
        srv.listen(1)
        if ready is not None:
            ready(srv.getsockname())
        conn, _ = srv.accept()
        with conn:
            PoseServer(estimator, plan, deadline).serve_connection(conn)


# ---------------------------------------------------------------------------
# mock scanner


@dataclass(frozen=True)
class ScannerConfig:
    size: int = 32
    voxel_size: float = 6.0
    spin_sigma: float = 3.0
    deadline: float = DEADLINE_S


def render_navigator(shape, pose: RigidPose, fov_shift, prev_plane, cfg: ScannerConfig) -> volio.Volume:
    """Render the head at ``pose`` on a grid centred at ``fov_shift`` with spin history."""
    fov = np.asarray(fov_shift, dtype=np.float64)
    local = RigidPose(pose.R, pose.t - fov)
    vol, _ = synth.render(shape, local, cfg.size, cfg.voxel_size)
    if prev_plane is not None:
        art = synth.ArtifactParams(tuple(prev_plane.t - fov), tuple(prev_plane.R[:, 2]), cfg.spin_sigma)
        vol = synth.spin_history(vol, art, cfg.voxel_size)
    affine = synth.grid_affine(cfg.size, cfg.voxel_size)
    affine[:3, 3] += fov
    return volio.Volume(vol, cfg.voxel_size, affine)


def mock_scan(sock, shape, trajectory, plan, cfg: ScannerConfig = ScannerConfig(), log=None) -> list:
    """Drive a stream over a connected socket; returns per-step records.

    Each record carries the reply plus the true-pose obliqueness (deg) and
    slice offset (mm). ``log`` (a text file) receives the same records as
    JSON lines, flushed per step so a broken stream leaves a partial log.
    """
    sock.settimeout(2.0 * cfg.deadline + 1.0)
    records = []
    fov = np.array(trajectory.poses[0].t, dtype=np.float64)
    prev_plane = None
    try:
        for k, true in enumerate(trajectory.poses):
            vol = render_navigator(shape, true, fov, prev_plane, cfg)
            sock.sendall(NavigatorMessage(k, vol, float(k) * 3.0).encode())
            try:
                kind, payload = read_frame(sock)
            except socket.timeout:
                raise ProtocolError(f"no reply for navigator {k} within {2 * cfg.deadline:.1f} s") from None
            if kind == ERROR:
                rec = {"k": k, "status": "error", "message": payload[4:].decode(errors="replace")}
            elif kind == PRESCRIPTION:
                rx = PrescriptionMessage.decode(payload)
                if rx.k != k:
                    raise ProtocolError(f"reply for {rx.k} while waiting for {k}")
                target = plan.planes[k % len(plan.planes)]
                rec = rx.record()
                rec["obliqueness_deg"] = math.degrees(so3.geodesic_distance(rx.pose.R, true.R))
                rec["offset_mm"] = float(np.linalg.norm(rx.plane.t - (true.R @ target.t + true.t)))
                rec["com_in_fov"] = bool(np.all(np.abs(true.t - fov) <= cfg.size / 2.0 * cfg.voxel_size))
                fov = rx.fov_shift
                prev_plane = rx.plane
            else:
                raise ProtocolError(f"unexpected frame type {kind}")
            records.append(rec)
            if log is not None:
                log.write(json.dumps(rec, sort_keys=True) + "\n")
                log.flush()
        sock.sendall(encode_frame(END))
        read_frame(sock)
    except (ConnectionError, OSError) as exc:
        if log is not None:
            log.flush()
        raise ProtocolError(f"stream aborted after {len(records)} steps: {exc}") from exc
    return records


def run_loopback(estimator, shape, trajectory, plan, cfg: ScannerConfig = ScannerConfig(), log=None) -> list:
    """Server thread and scanner connected through a socket pair."""
    a, b = socket.socketpair()
    server = PoseServer(estimator, plan, cfg.deadline)
    th = threading.Thread(target=lambda: _serve_quietly(server, b), daemon=True)
    th.start()
    try:
        return mock_scan(a, shape, trajectory, plan, cfg, log)
    finally:
        a.close()
        th.join(5.0)
        b.close()


def _serve_quietly(server, sock):
    try:
        server.serve_connection(sock)
    except (ConnectionError, OSError):
        pass


TIMING_KEYS = ("compute_ms",)


def deterministic_view(records) -> str:
    """Records as JSON lines with timing fields removed."""
    return "".join(json.dumps({k: v for k, v in r.items() if k not in TIMING_KEYS}, sort_keys=True) + "\n"
                   for r in records)
