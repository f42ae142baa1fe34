"""Live policy serving over a websocket for teleoperation.

One environment advances in real time (one control step per 40 ms wall
clock, best effort) while a websocket endpoint accepts command frames and
broadcasts state frames at the control rate. Incoming commands land in a
single-slot mailbox (last writer wins) and are applied atomically at the
next control step, so the sim loop never blocks on the network.

Wire protocol (JSON text frames):

    client -> server  {"type": "cmd", "vx": f, "vy": f, "wz": f, "h": f}
    server -> client  {"type": "state", "t": f, "x": f, "y": f, "z": f,
                       "roll": f, "pitch": f, "yaw": f, "vx": f, "vy": f,
                       "wz": f, "cmd": {"vx", "vy", "wz", "h"},
                       "power": f, "cot_running": f}
    server -> client  {"type": "error", "msg": s}

Commands outside the configured ranges are clamped and acknowledged with a
warning frame. When the last client disconnects, the held command ramps
down to the safe standing command (zero velocity, nominal height) within
one second. The same environment construction and policy call drive the
offline scripted rollouts, so a command sequence replayed over the socket
reproduces the offline trajectory exactly.
"""

from __future__ import annotations

import asyncio
import dataclasses
import json
import logging
import math
import time
from collections import deque

import numpy as np

from websockets.asyncio.server import ServerConnection, broadcast
from websockets.asyncio.server import serve as ws_serve

from . import rotation as rot
from .config import CommandConfig, Config
from .env import Command
from .evalkit import make_scripted_env
from .policy import GaussianPolicy

log = logging.getLogger(__name__)

# effectively unbounded episode; the serve loop resets explicitly on done
_SERVE_HORIZON_S = 1e9

_GRAVITY = 9.81

_CMD_FIELDS = ("vx", "vy", "wz", "h")


def safe_command(commands: CommandConfig) -> Command:
    """Zero velocity at the midpoint height: the no-operator fallback."""
    h0 = 0.5 * (commands.h_range[0] + commands.h_range[1])
    return Command(0.0, 0.0, 0.0, h0)


class CommandGate:
    """Single-slot latest-command mailbox with range clamping and decay.

    Network handlers write through `submit`, the sim loop reads one command
    per control step through `next_command`. Submissions overwrite each
    other between steps; out-of-range fields are clamped and reported.
    `begin_decay` (called when the last client leaves) queues a linear ramp
    from the held command to the safe standing command, reaching it exactly
    after ceil(decay_s / dt) steps.
    """

    def __init__(self, commands: CommandConfig, dt: float, decay_s: float = 0.6):
        if not 0.0 < decay_s <= 1.0:
            raise ValueError(f"decay_s must be in (0, 1], got {decay_s}")
        if dt <= 0.0:
            raise ValueError(f"dt must be positive, got {dt}")
        self.commands = commands
        self.dt = float(dt)
        self.decay_s = float(decay_s)
        self.safe = safe_command(commands)
        self._held = self.safe
        self._pending: Command | None = None
        self._ramp: deque[Command] = deque()

    def submit(self, vx: float, vy: float, wz: float, h: float) -> tuple[Command, list[str]]:
        """Clamp and store a command; returns it plus clamp warnings."""
        ranges = {
            "vx": self.commands.vx_range,
            "vy": self.commands.vy_range,
            "wz": self.commands.wz_range,
            "h": self.commands.h_range,
        }
        warnings = []
        out = []
        for name, value in zip(_CMD_FIELDS, (vx, vy, wz, h)):
            lo, hi = ranges[name]
            clamped = min(max(float(value), lo), hi)
            if clamped != value:
                warnings.append(f"{name} {value:.6g} clamped to {clamped:.6g}")
            out.append(clamped)
        cmd = Command(out[0], out[1], out[2], out[3])
        self._pending = cmd
        self._ramp.clear()
        return cmd, warnings

    def begin_decay(self) -> None:
        """Queue the ramp-down to the safe command (safety stop)."""
        base = self._pending if self._pending is not None else self._held
        self._pending = None
        steps = max(1, math.ceil(self.decay_s / self.dt))
        b = base.as_array()
        s = self.safe.as_array()
        self._ramp = deque(
            Command.from_array(b + (s - b) * (i / steps)) for i in range(1, steps + 1)
        )

    def next_command(self) -> Command:
        """The command to apply at the next control step."""
        if self._pending is not None:
            self._held = self._pending
            self._pending = None
        elif self._ramp:
            self._held = self._ramp.popleft()
        return self._held


@dataclasses.dataclass
class ServeOptions:
    host: str = "127.0.0.1"
    port: int = 8765
    seed: int = 0
    noise_level: float = 0.0
    fast: bool = False  # drop wall-clock pacing (automated tests)
    decay_s: float = 0.6
    horizon_s: float = _SERVE_HORIZON_S  # episode length before respawn

    def validate(self) -> None:
        if not 0 <= self.port <= 65535:
            raise ValueError(f"port must be in [0, 65535], got {self.port}")
        if self.horizon_s <= 0.0:
            raise ValueError(f"horizon_s must be positive, got {self.horizon_s}")


class PolicyServer:
    """Owns one environment and a websocket endpoint.

    The sim loop is the only writer of environment state; connection
    handlers communicate with it exclusively through the command gate and
    the broadcast fan-out, so no locks are needed.
    """

    def __init__(
        self,
        policy: GaussianPolicy,
        cfg: Config | None = None,
        options: ServeOptions | None = None,
    ):
        self.opts = options or ServeOptions()
        self.opts.validate()
        self.policy = policy
        self.env = make_scripted_env(
            cfg, self.opts.seed, self.opts.noise_level, self.opts.horizon_s
        )
        self.cfg = self.env.cfg
        self.gate = CommandGate(
            self.cfg.commands, self.env.vec.control_dt, self.opts.decay_s
        )
        self.port: int | None = None  # actual bound port once listening
        self._clients: set[ServerConnection] = set()
        self._stop = asyncio.Event()
        self._ready = asyncio.Event()
        self._mass = 0.0
        self._energy = 0.0
        self._path = 0.0

    # -- lifecycle

    def stop(self) -> None:
        self._stop.set()

    async def wait_ready(self) -> None:
        await self._ready.wait()

    async def run(self) -> None:
        """Serve until `stop` is called; raises OSError if the bind fails."""
        async with ws_serve(self._handler, self.opts.host, self.opts.port) as server:
            self.port = server.sockets[0].getsockname()[1]
            print(f"serving on ws://{self.opts.host}:{self.port}", flush=True)
            self._ready.set()
            try:
                await self._sim_loop()
            finally:
                self._ready.clear()

    async def _sim_loop(self) -> None:
        obs_s, _ = self.env.reset()
        self._mass = float(self.env.vec.batch.mass[0].sum())
        self._energy = 0.0
        self._path = 0.0
        dt = self.env.vec.control_dt
        prev_xy = np.array(self.env.state.base_position[:2])
        deadline = time.monotonic()
        while not self._stop.is_set():
            cmd = self.gate.next_command()
            self.env.set_command(cmd)
            action = self.policy.mean(obs_s[None].astype(self.policy.net.dtype))[0]
            res = self.env.step(action)
            obs_s = res.obs_student

            st = self.env.state
            xy = np.array(st.base_position[:2])
            self._path += float(np.hypot(*(xy - prev_xy)))
            prev_xy = xy
            self._energy += float(res.info["power"]) * dt
            frame = self._state_frame(st, cmd, float(res.info["power"]))
            broadcast(self._clients, json.dumps(frame, separators=(",", ":")))

            if res.done:
                log.info("episode ended (%s); respawning", res.done_reason)
                broadcast(
                    self._clients,
                    _error_frame(f"episode ended ({res.done_reason}); respawning"),
                )
                obs_s, _ = self.env.reset()
                prev_xy = np.array(self.env.state.base_position[:2])

            if self.opts.fast:
                await asyncio.sleep(0)  # let network handlers run
            else:
                deadline += dt
                now = time.monotonic()
                if deadline < now - 1.0:  # badly behind: drop the backlog
                    deadline = now
                await asyncio.sleep(max(0.0, deadline - now))

    def _state_frame(self, st, cmd: Command, power: float) -> dict:
        rpy = rot.euler_from_quat(st.base_orientation)
        v_body = rot.quat_rotate_inverse(st.base_orientation, st.base_linvel)
        cot = self._energy / (self._mass * _GRAVITY * self._path) if self._path > 1e-9 else 0.0
        return {
            "type": "state",
            "t": st.time,
            "x": float(st.base_position[0]),
            "y": float(st.base_position[1]),
            "z": float(st.base_position[2]),
            "roll": float(rpy[0]),
            "pitch": float(rpy[1]),
            "yaw": float(rpy[2]),
            "vx": float(v_body[0]),
            "vy": float(v_body[1]),
            "wz": float(st.base_angvel[2]),
            "cmd": {"vx": cmd.vx, "vy": cmd.vy, "wz": cmd.wz, "h": cmd.h_ref},
            "power": power,
            "cot_running": cot,
        }

    # -- networking

    async def _handler(self, conn: ServerConnection) -> None:
        self._clients.add(conn)
        log.info("client connected (%d active)", len(self._clients))
        try:
            async for message in conn:
                reply = self._on_message(message)
                if reply is not None:
                    await conn.send(reply)
        finally:
            self._clients.discard(conn)
            log.info("client disconnected (%d active)", len(self._clients))
            if not self._clients:
                self.gate.begin_decay()

    def _on_message(self, message: str | bytes) -> str | None:
        """Apply a client frame; returns an error/warning frame or None."""
        try:
            data = json.loads(message)
        except (ValueError, UnicodeDecodeError):
            return _error_frame(f"malformed message: not JSON ({_preview(message)})")
        if not isinstance(data, dict) or data.get("type") != "cmd":
            return _error_frame(f"unsupported frame ({_preview(message)})")
        values = []
        for name in _CMD_FIELDS:
            v = data.get(name)
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                return _error_frame(f"malformed command: field {name!r} must be a finite number")
            values.append(float(v))
        _, warnings = self.gate.submit(*values)
        if warnings:
            return _error_frame("command clamped: " + "; ".join(warnings))
        return None


def _error_frame(msg: str) -> str:
    return json.dumps({"type": "error", "msg": msg}, separators=(",", ":"))


def _preview(message: str | bytes, limit: int = 60) -> str:
    s = message.decode("utf-8", "replace") if isinstance(message, bytes) else message
    return repr(s if len(s) <= limit else s[:limit] + "...")
