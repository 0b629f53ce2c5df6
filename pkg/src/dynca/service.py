"""Frame-streaming session server.

One TCP connection = one synthesis session: a live engine, a control
snapshot, and a seeded random stream.  The wire protocol is asymmetric:

  client -> server   newline-delimited JSON commands
                     {"cmd": "set_direction", "theta": 1.57, "id": 3}

  server -> client   tagged binary stream
                     0x01  frame:   u16 width, u16 height (LE), then
                           width*height*3 bytes of RGB8
                     0x02  text record: u32 length (LE) + UTF-8 JSON
                           (hello / command acks / errors)
                     0x03  flow overlay frame, same layout as 0x01

Commands are drained and applied at step boundaries only; each gets exactly
one ack or error carrying the step index at which it applied.  Frames are
delivered through a latest-wins slot so a slow client can never stall the
simulation.
"""

from __future__ import annotations

import json
import socket
import struct
import threading
import time
from collections import deque

import numpy as np

from . import controls as C
from .core import DyncaConfig, Engine, UpdateRule, check_grid_size
from .fields import colorize_flow
from .losses import default_flow
from .weights import load_rule

TAG_FRAME = 0x01
TAG_TEXT = 0x02
TAG_FLOW = 0x03

COMMANDS = ("set_direction", "set_speed", "brush", "set_transform",
            "resize", "load_weights", "set_flow_overlay")


def encode_frame(rgb: np.ndarray, tag: int = TAG_FRAME) -> bytes:
    h, w = rgb.shape[:2]
    return struct.pack("<BHH", tag, w, h) + rgb.tobytes()


def encode_text(obj: dict) -> bytes:
    data = json.dumps(obj).encode("utf-8")
    return struct.pack("<BI", TAG_TEXT, len(data)) + data


class CommandError(Exception):
    pass


class Session:
    """Engine + control snapshot + per-session overlay state."""

    def __init__(self, rule: UpdateRule, cfg: DyncaConfig, h: int, w: int, seed: int = 0):
        self.cfg = cfg
        self.rule = rule
        self.seed = seed
        self.engine = Engine(cfg, rule, h, w, seed=seed)
        self.ctrl = C.ControlState(t_live=cfg.frame_interval)
        self.flow_overlay = False
        self._overlay_flow = default_flow(iterations=8, levels=2)
        self._prev_frame_f = None

    @property
    def step_index(self) -> int:
        return self.engine.t

    # -- command application (state untouched unless the whole command is valid)

    def apply(self, msg: dict) -> dict:
        if not isinstance(msg, dict):
            raise CommandError("command must be a JSON object")
        cmd = msg.get("cmd")
        if cmd not in COMMANDS:
            raise CommandError(f"unknown cmd {cmd!r}; expected one of {', '.join(COMMANDS)}")
        handler = getattr(self, f"_cmd_{cmd}")
        return handler(msg)

    @staticmethod
    def _number(msg, key):
        v = msg.get(key)
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            raise CommandError(f"{key} must be a number")
        return float(v)

    def _cmd_set_direction(self, msg):
        theta = self._number(msg, "theta")
        C.set_direction(self.ctrl, theta)
        C.apply_controls(self.engine, self.ctrl)
        return {"theta": theta}

    def _cmd_set_speed(self, msg):
        t = self._number(msg, "t")
        if t < 1 or t != int(t):
            raise CommandError("t must be an integer >= 1")
        C.set_speed(self.ctrl, int(t))
        return {"t": int(t)}

    def _cmd_brush(self, msg):
        x = self._number(msg, "x")
        y = self._number(msg, "y")
        radius = self._number(msg, "radius")
        if radius <= 0:
            raise CommandError("radius must be positive")
        state = C.brush_erase(self.engine.state(), (x, y), radius)
        self.engine.load_state(state)
        return {"x": x, "y": y, "radius": radius}

    def _cmd_set_transform(self, msg):
        kind = msg.get("kind")
        if "map" in msg:
            m = np.asarray(msg["map"], dtype=np.float32)
            if m.shape != (self.engine.h, self.engine.w):
                raise CommandError(
                    f"map shape {m.shape} != grid {(self.engine.h, self.engine.w)}")
            C.set_local_transform(self.ctrl, m)
        else:
            if kind not in ("none", "circular_from_right"):
                raise CommandError(f"unknown transform kind {kind!r}")
            C.set_local_transform(self.ctrl, kind, self.engine.h, self.engine.w)
        C.apply_controls(self.engine, self.ctrl)
        return {"kind": kind if "map" not in msg else "map"}

    def _cmd_resize(self, msg):
        h = self._number(msg, "height")
        w = self._number(msg, "width")
        if h != int(h) or w != int(w):
            raise CommandError("height/width must be integers")
        h, w = int(h), int(w)
        try:
            check_grid_size(self.cfg, h, w)
        except ValueError as e:
            raise CommandError(str(e)) from None
        self.engine = Engine(self.cfg, self.rule, h, w, seed=self.seed)
        self.ctrl.theta_map = None  # stale per-cell map cannot survive a resize
        C.apply_controls(self.engine, self.ctrl)
        self._prev_frame_f = None
        return {"height": h, "width": w}

    def _cmd_load_weights(self, msg):
        path = msg.get("path")
        if not isinstance(path, str):
            raise CommandError("path must be a string")
        try:
            rule, cfg = load_rule(path)
            check_grid_size(cfg, self.engine.h, self.engine.w)
        except Exception as e:
            raise CommandError(str(e)) from None
        self.rule = rule
        self.cfg = cfg
        self.engine = Engine(cfg, rule, self.engine.h, self.engine.w, seed=self.seed)
        self.ctrl = C.ControlState(t_live=cfg.frame_interval)
        self._prev_frame_f = None
        return {"path": path, "frame_interval": cfg.frame_interval}

    def _cmd_set_flow_overlay(self, msg):
        enabled = msg.get("enabled")
        if not isinstance(enabled, bool):
            raise CommandError("enabled must be a boolean")
        self.flow_overlay = enabled
        if not enabled:
            self._prev_frame_f = None
        return {"enabled": enabled}

    # -- frame production -----------------------------------------------------

    def render(self):
        """Current frame bytes plus the optional colorized flow overlay."""
        rgb = self.engine.rgb8()
        out = [encode_frame(rgb)]
        if self.flow_overlay:
            cur = self.engine.s[..., :3].copy()
            if self._prev_frame_f is not None:
                uv = self._overlay_flow.estimate(self._prev_frame_f, cur).value
                out.append(encode_frame(colorize_flow(uv), tag=TAG_FLOW))
            self._prev_frame_f = cur
        return out


class _Sender:
    """Socket writer with ordered text records and a latest-wins frame slot."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.lock = threading.Condition()
        self.texts: deque[bytes] = deque()
        self.frames: list[bytes] | None = None
        self.closed = False
        self.thread = threading.Thread(target=self._run, daemon=True)
        self.thread.start()

    def send_text(self, obj: dict):
        with self.lock:
            self.texts.append(encode_text(obj))
            self.lock.notify()

    def send_frames(self, frames: list[bytes]):
        with self.lock:
            self.frames = frames
            self.lock.notify()

    def close(self):
        with self.lock:
            self.closed = True
            self.lock.notify()

    def _run(self):
        while True:
            with self.lock:
                while not self.texts and self.frames is None and not self.closed:
                    self.lock.wait()
                if self.closed and not self.texts and self.frames is None:
                    return
                chunks = list(self.texts)
                self.texts.clear()
                if self.frames is not None:
                    chunks.extend(self.frames)
                    self.frames = None
            try:
                for c in chunks:
                    self.sock.sendall(c)
            except OSError:
                return


class SessionServer:
    """Single-session-per-connection streaming server."""

    def __init__(self, rule: UpdateRule, cfg: DyncaConfig, host: str = "127.0.0.1",
                 port: int = 0, h: int | None = None, w: int | None = None,
                 seed: int = 0, fps_cap: float = 60.0):
        self.rule = rule
        self.cfg = cfg
        self.h = cfg.seed_h if h is None else h
        self.w = cfg.seed_w if w is None else w
        self.seed = seed
        self.fps_cap = fps_cap
        self._sock = socket.create_server((host, port))
        self.address = self._sock.getsockname()
        self._stop = threading.Event()
        self._thread = None

    def start(self):
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass

    def serve_forever(self):
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            threading.Thread(target=self._handle, args=(conn,), daemon=True).start()

    # -- per-connection loop ---------------------------------------------------

    def _handle(self, conn: socket.socket):
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        session = Session(self.rule, self.cfg, self.h, self.w, seed=self.seed)
        sender = _Sender(conn)
        inbox: deque = deque()
        inbox_lock = threading.Lock()
        eof = threading.Event()

        def reader():
            buf = b""
            while True:
                try:
                    data = conn.recv(65536)
                except OSError:
                    break
                if not data:
                    break
                buf += data
                while b"\n" in buf:
                    line, buf = buf.split(b"\n", 1)
                    if line.strip():
                        with inbox_lock:
                            inbox.append(line)
            eof.set()

        threading.Thread(target=reader, daemon=True).start()
        sender.send_text({"ok": True, "event": "hello", "width": session.engine.w,
                          "height": session.engine.h, "step": session.step_index,
                          "t": session.ctrl.t_live})
        sender.send_frames(session.render())

        frame_budget = None
        try:
            while not eof.is_set() and not self._stop.is_set():
                with inbox_lock:
                    pending = list(inbox)
                    inbox.clear()
                for line in pending:
                    reply = {"step": session.step_index}
                    try:
                        msg = json.loads(line.decode("utf-8"))
                    except (UnicodeDecodeError, json.JSONDecodeError) as e:
                        reply.update(ok=False, error=f"malformed command: {e}")
                        sender.send_text(reply)
                        continue
                    if isinstance(msg, dict) and "id" in msg:
                        reply["id"] = msg["id"]
                    try:
                        detail = session.apply(msg)
                        reply.update(ok=True, cmd=msg.get("cmd"))
                        reply.update(detail)
                    except CommandError as e:
                        reply.update(ok=False, error=str(e))
                    reply["step"] = session.step_index
                    sender.send_text(reply)

                session.engine.step(1)
                if session.step_index % session.ctrl.t_live == 0:
                    sender.send_frames(session.render())
                    if self.fps_cap and self.fps_cap > 0:
                        now = time.perf_counter()
                        if frame_budget is None:
                            frame_budget = now
                        frame_budget += 1.0 / self.fps_cap
                        delay = frame_budget - now
                        if delay > 0:
                            time.sleep(delay)
                        else:
                            frame_budget = now
        finally:
            sender.close()
            try:
                conn.close()
            except OSError:
                pass
