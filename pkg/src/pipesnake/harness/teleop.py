"""Teleoperation endpoint: drive one simulated episode over a socket.

Wire protocol (documented bit-exactly in PROTOCOL.md): every message is
an 8-digit ASCII decimal byte length followed by that many bytes of JSON.
The server streams ``frame`` messages on a fixed clock and applies the
most recently received ``action`` between frames; a client that stops
sending keeps its last action, a client that disconnects pauses the
simulation until someone reconnects.  Fairness mode (default) keeps every
world-frame quantity out of the stream: a frame carries only the step
counter, the proprioceptive vector, the depth image, and the arclength
distance counter, which is exactly what the trained agents observe.

Every served episode is logged as line-delimited JSON next to a pipe
file of the exact layout, so (network file, action log) replays to the
same trajectory and distance.
"""

import base64
import dataclasses
import json
import os
import socket
import threading
import time

import numpy as np

from .. import pipes, robot, sensing
from ..env import PipeEnv

PROTOCOL = "pipesnake-teleop/1"
LEN_DIGITS = 8
MAX_MESSAGE = 10 ** LEN_DIGITS - 1
DEPTH_ENCODING = "f32le-base64"
FRAME_KEYS = ("type", "t", "kinematic", "depth", "distance")


class ProtocolError(ValueError):
    pass


# -- codec ---------------------------------------------------------------------


def encode_message(obj) -> bytes:
    payload = json.dumps(obj, separators=(",", ":"), sort_keys=True,
                         allow_nan=False).encode()
    if len(payload) > MAX_MESSAGE:
        raise ProtocolError(f"message too large: {len(payload)} bytes")
    return b"%0*d" % (LEN_DIGITS, len(payload)) + payload


def _recv_exact(sock, n) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            if buf:
                raise ProtocolError("connection closed mid-message")
            return b""
        buf += chunk
    return buf


def read_message(sock):
    """Next decoded message, or None on clean EOF."""
    head = _recv_exact(sock, LEN_DIGITS)
    if not head:
        return None
    if not head.isdigit():
        raise ProtocolError(f"bad length prefix {head!r}")
    payload = _recv_exact(sock, int(head))
    if len(payload) != int(head):
        raise ProtocolError("connection closed mid-message")
    try:
        return json.loads(payload.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"payload is not JSON: {exc}") from exc


def encode_depth(img) -> str:
    return base64.b64encode(
        np.ascontiguousarray(img, dtype="<f4").tobytes()).decode("ascii")


def decode_depth(text, hw=(sensing.DEPTH_H, sensing.DEPTH_W)):
    flat = np.frombuffer(base64.b64decode(text), dtype="<f4")
    if flat.size != hw[0] * hw[1]:
        raise ProtocolError(f"depth payload has {flat.size} scalars, "
                            f"want {hw[0] * hw[1]}")
    return flat.reshape(hw).astype(float)


def parse_action(msg) -> np.ndarray:
    if msg.get("type") != "action":
        raise ProtocolError(f"unsupported message type {msg.get('type')!r}")
    values = msg.get("values")
    if not isinstance(values, list) or len(values) != robot.ACTION_DIM:
        raise ProtocolError(f"action needs {robot.ACTION_DIM} values")
    arr = np.asarray(values, dtype=float)
    if not np.isfinite(arr).all():
        raise ProtocolError("action values must be finite")
    return np.clip(arr, -1.0, 1.0)


# -- server ---------------------------------------------------------------------


class TeleopServer:
    """One clocked simulation loop, one reader thread per client.

    The loop owns the env; the reader only swaps the shared last-action
    buffer (or queues an error frame for malformed input).  ``rate_hz=0``
    removes the wall-clock wait for tests and batch replays.
    """

    def __init__(self, env: PipeEnv, port=0, host="127.0.0.1", rate_hz=10.0,
                 fairness=True, log_path=None, episode_seed=0):
        self.env = env
        self.rate_hz = rate_hz
        self.fairness = fairness
        self.log_path = log_path
        self.episode_seed = episode_seed
        self._action = np.zeros(robot.ACTION_DIM)
        self._lock = threading.Lock()
        self._send_lock = threading.Lock()
        self._stop = threading.Event()
        self._client = None
        self._client_gone = threading.Event()
        self._listener = socket.create_server((host, port))
        self._listener.settimeout(0.2)
        self.address = self._listener.getsockname()

    # -- frames -----------------------------------------------------------------

    def _hello(self):
        return {
            "type": "hello",
            "protocol": PROTOCOL,
            "rate_hz": self.rate_hz,
            "dt": self.env.params.dt,
            "action_dim": robot.ACTION_DIM,
            "joint_modes": list(robot.DEFAULT_MODES.joint_modes),
            "depth_hw": [sensing.DEPTH_H, sensing.DEPTH_W],
            "depth_encoding": DEPTH_ENCODING,
            "h_max": pipes.RAY_HORIZON,
            "fairness": self.fairness,
        }

    def _frame(self):
        env = self.env
        kin = sensing.kinematic_obs(env.state, env.params)
        img, _ = sensing.depth_image(env.state, env.net)
        frame = {
            "type": "frame",
            "t": env.t,
            "kinematic": [float(v) for v in kin],
            "depth": encode_depth(img),
            "distance": round(env.head_distance(), 9),
        }
        if not self.fairness:
            lines, arcs = env.net.wall_primitives
            frame["world"] = {
                "nodes": [[float(x), float(y)] for x, y in env.state.pos],
                "wall_lines": lines.tolist(),
                "wall_arcs": arcs.tolist(),
            }
        return frame

    def _send(self, sock, obj):
        with self._send_lock:
            sock.sendall(encode_message(obj))

    # -- client handling ----------------------------------------------------------

    def _reader(self, sock):
        while not self._stop.is_set():
            try:
                msg = read_message(sock)
            except ProtocolError as exc:
                try:
                    self._send(sock, {"type": "error", "message": str(exc)})
                except OSError:
                    break
                # a broken length prefix poisons the stream; drop the client
                if "length prefix" in str(exc) or "mid-message" in str(exc):
                    break
                continue
            except OSError:
                break
            if msg is None:
                break
            try:
                action = parse_action(msg)
            except ProtocolError as exc:
                try:
                    self._send(sock, {"type": "error", "message": str(exc)})
                except OSError:
                    break
                continue
            with self._lock:
                self._action = action
        self._client_gone.set()

    def _wait_for_client(self):
        while not self._stop.is_set():
            try:
                sock, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return False        # listener torn down by stop()
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._client = sock
            self._client_gone.clear()
            threading.Thread(target=self._reader, args=(sock,),
                             daemon=True).start()
            self._send(sock, self._hello())
            return True
        return False

    # -- main loop ---------------------------------------------------------------

    def serve_episode(self) -> dict:
        """Run one episode to termination; returns its result record."""
        env = self.env
        env.reset(seed=self.episode_seed)
        log_f = None
        if self.log_path:
            net_path = self.log_path + ".pipenet"
            pipes.save_network(env.net, net_path)
            log_f = open(self.log_path, "w")
            header = {
                "type": "session",
                "format": PROTOCOL,
                "network_file": os.path.basename(net_path),
                "state_set": env.state_set,
                "horizon": env.horizon,
                "fairness": self.fairness,
                "robot": dataclasses.asdict(env.params),
            }
            log_f.write(json.dumps(header, sort_keys=True) + "\n")

        period = 1.0 / self.rate_hz if self.rate_hz > 0 else 0.0
        done = False
        info = {}
        try:
            while not done and not self._stop.is_set():
                if self._client is None or self._client_gone.is_set():
                    if self._client is not None:
                        try:
                            self._client.close()
                        except OSError:
                            pass
                        self._client = None
                    if not self._wait_for_client():
                        break       # stopped while paused
                    deadline = time.monotonic()
                with self._lock:
                    action = self._action.copy()
                _, _, done, info = env.step(action)
                if log_f:
                    log_f.write(json.dumps(
                        {"t": env.t, "action": [float(v) for v in action]}) + "\n")
                try:
                    self._send(self._client, self._frame())
                except OSError:
                    self._client_gone.set()
                    continue
                if period:
                    deadline += period
                    delay = deadline - time.monotonic()
                    if delay > 0:
                        time.sleep(delay)
        finally:
            result = {
                "type": "result",
                "distance": round(env.max_distance, 9),
                "steps": env.t,
                "goal": bool(env.goal_reached),
                "corners": env.corners_passed(),
                "success": bool(info.get("success", False)),
            }
            if log_f:
                log_f.write(json.dumps(result, sort_keys=True) + "\n")
                log_f.close()
            if self._client is not None:
                try:
                    self._send(self._client, result)
                except OSError:
                    pass
        return result

    def serve_in_thread(self):
        t = threading.Thread(target=self.serve_episode, daemon=True)
        t.start()
        return t

    def stop(self):
        self._stop.set()
        try:
            self._listener.close()
        except OSError:
            pass
        if self._client is not None:
            try:
                self._client.close()
            except OSError:
                pass


# -- replay ----------------------------------------------------------------------


def load_session(log_path):
    with open(log_path) as f:
        lines = [json.loads(ln) for ln in f if ln.strip()]
    if not lines or lines[0].get("type") != "session":
        raise ProtocolError(f"not a session log: {log_path}")
    header = lines[0]
    result = lines[-1] if lines[-1].get("type") == "result" else None
    actions = [ln["action"] for ln in lines[1:] if "action" in ln]
    return header, actions, result


def replay(log_path) -> dict:
    """Re-run a logged session from its pipe file; returns a result record."""
    header, actions, _ = load_session(log_path)
    net_path = os.path.join(os.path.dirname(os.path.abspath(log_path)),
                            header["network_file"])
    net = pipes.load_network(net_path)
    params = robot.RobotParams(**{
        k: tuple(tuple(x) if isinstance(x, list) else x for x in v)
        if isinstance(v, list) else v
        for k, v in header["robot"].items()})
    env = PipeEnv(net, state_set=header["state_set"], params=params,
                  horizon=header["horizon"])
    env.reset(seed=0)
    done = False
    for a in actions:
        if done:
            break
        _, _, done, _ = env.step(np.asarray(a, dtype=float))
    return {
        "distance": round(env.max_distance, 9),
        "steps": env.t,
        "goal": bool(env.goal_reached),
        "corners": env.corners_passed(),
    }
