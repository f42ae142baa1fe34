"""Websocket policy serving: protocol frames, command gating, safety decay,
pacing, and transport equivalence against offline scripted rollouts."""

import asyncio
import json
import math
import time
from contextlib import asynccontextmanager

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from websockets.asyncio.client import connect

from softquad.config import Config
from softquad.env import Command
from softquad.evalkit import COLUMNS, CommandScript, rollout_scripted
from softquad.serve import CommandGate, PolicyServer, ServeOptions, safe_command
from softquad.trainer import load_student_policy

DT = 0.04
WAIT = 30  # generous await timeout (seconds); everything local


# ------------------------------------------------------------ command gate


@pytest.fixture(scope="module")
def commands():
    return Config().commands


def test_gate_clamps_and_warns(commands):
    gate = CommandGate(commands, DT)
    cmd, warnings = gate.submit(9.9, 0.0, 0.3, 0.2)
    assert cmd.vx == commands.vx_range[1]
    assert cmd.wz == 0.3 and cmd.h_ref == 0.2
    assert len(warnings) == 1 and "vx" in warnings[0]

    cmd, warnings = gate.submit(0.2, -0.1, -0.3, 0.15)
    assert warnings == []
    assert (cmd.vx, cmd.vy, cmd.wz, cmd.h_ref) == (0.2, -0.1, -0.3, 0.15)

    _, warnings = gate.submit(-9.0, 9.0, -9.0, 9.0)
    assert len(warnings) == 4


def test_gate_last_writer_wins(commands):
    gate = CommandGate(commands, DT)
    gate.submit(0.1, 0.0, 0.0, 0.15)
    gate.submit(0.2, 0.0, 0.0, 0.15)
    assert gate.next_command().vx == 0.2
    # held until something new arrives
    assert gate.next_command().vx == 0.2


def test_gate_decay_reaches_safe_within_one_second(commands):
    gate = CommandGate(commands, DT, decay_s=0.6)
    gate.submit(commands.vx_range[1], commands.vy_range[0],
                commands.wz_range[1], commands.h_range[1])
    gate.next_command()
    gate.begin_decay()
    budget = math.ceil(1.0 / DT)
    speeds = []
    for _ in range(budget):
        c = gate.next_command()
        speeds.append(abs(c.vx) + abs(c.vy) + abs(c.wz))
    safe = safe_command(commands)
    assert gate.next_command() == safe
    assert speeds[-1] == 0.0
    assert all(a >= b for a, b in zip(speeds, speeds[1:]))


@settings(max_examples=60, deadline=None)
@given(decay_s=st.floats(0.01, 1.0), dt=st.floats(0.005, 0.1))
def test_gate_decay_budget_property(decay_s, dt):
    commands = Config().commands
    gate = CommandGate(commands, dt, decay_s=decay_s)
    gate.submit(0.3, -0.2, 0.4, 0.1)
    gate.next_command()
    gate.begin_decay()
    steps = math.ceil(decay_s / dt)
    assert steps * dt <= 1.0 + dt  # ramp never outlives the safety budget
    for _ in range(steps):
        last = gate.next_command()
    assert last == safe_command(commands)


def test_gate_submit_cancels_decay(commands):
    gate = CommandGate(commands, DT)
    gate.submit(0.3, 0.0, 0.0, 0.15)
    gate.next_command()
    gate.begin_decay()
    gate.next_command()
    gate.submit(0.25, 0.0, 0.0, 0.15)
    assert gate.next_command().vx == 0.25
    assert gate.next_command().vx == 0.25  # ramp is gone


def test_gate_rejects_bad_decay(commands):
    with pytest.raises(ValueError):
        CommandGate(commands, DT, decay_s=1.5)
    with pytest.raises(ValueError):
        CommandGate(commands, DT, decay_s=0.0)


# ------------------------------------------------------------ socket helpers


@pytest.fixture(scope="module")
def bundle(standing_checkpoint):
    policy, cfg, _ = load_student_policy(standing_checkpoint)
    return policy, cfg


@asynccontextmanager
async def serving(policy, cfg, **opt_kw):
    opts = ServeOptions(port=0, **opt_kw)
    server = PolicyServer(policy, cfg, opts)
    task = asyncio.create_task(server.run())
    try:
        await asyncio.wait_for(server.wait_ready(), WAIT)
        yield server
    finally:
        server.stop()
        await asyncio.wait_for(task, WAIT)


async def recv_frame(conn, want="state"):
    while True:
        frame = json.loads(await asyncio.wait_for(conn.recv(), WAIT))
        if frame["type"] == want:
            return frame


def run(coro):
    return asyncio.run(asyncio.wait_for(coro, 300))


STATE_FIELDS = {"type", "t", "x", "y", "z", "roll", "pitch", "yaw",
                "vx", "vy", "wz", "cmd", "power", "cot_running"}


# ------------------------------------------------------------ protocol


def test_state_frames_and_command_echo(bundle):
    policy, cfg = bundle

    async def scenario():
        async with serving(policy, cfg, fast=True) as server:
            async with connect(f"ws://127.0.0.1:{server.port}", max_queue=None) as conn:
                frame = await recv_frame(conn)
                assert set(frame) == STATE_FIELDS
                assert set(frame["cmd"]) == {"vx", "vy", "wz", "h"}
                sent = {"type": "cmd", "vx": 0.2, "vy": 0.0, "wz": 0.3, "h": 0.2}
                await conn.send(json.dumps(sent))
                for _ in range(50):
                    frame = await recv_frame(conn)
                    if frame["cmd"]["vx"] == 0.2:
                        break
                assert frame["cmd"] == {"vx": 0.2, "vy": 0.0, "wz": 0.3, "h": 0.2}

    run(scenario())


def test_clamped_command_gets_warning_frame(bundle):
    policy, cfg = bundle
    vx_max = cfg.commands.vx_range[1]

    async def scenario():
        async with serving(policy, cfg, fast=True) as server:
            async with connect(f"ws://127.0.0.1:{server.port}", max_queue=None) as conn:
                await recv_frame(conn)
                await conn.send(json.dumps(
                    {"type": "cmd", "vx": 9.9, "vy": 0.0, "wz": 0.0, "h": 0.15}))
                warning = await recv_frame(conn, want="error")
                assert "clamped" in warning["msg"] and "vx" in warning["msg"]
                for _ in range(50):
                    frame = await recv_frame(conn)
                    if frame["cmd"]["vx"] != 0.0:
                        break
                assert frame["cmd"]["vx"] == vx_max

    run(scenario())


def test_malformed_messages_get_error_frames(bundle):
    policy, cfg = bundle

    async def scenario():
        async with serving(policy, cfg, fast=True) as server:
            async with connect(f"ws://127.0.0.1:{server.port}", max_queue=None) as conn:
                await recv_frame(conn)
                cases = [
                    "definitely not json",
                    json.dumps({"type": "zap"}),
                    json.dumps({"type": "cmd", "vx": 0.1}),  # missing fields
                    json.dumps({"type": "cmd", "vx": float("nan"),
                                "vy": 0, "wz": 0, "h": 0.15}),
                    json.dumps({"type": "cmd", "vx": "fast",
                                "vy": 0, "wz": 0, "h": 0.15}),
                ]
                for payload in cases:
                    await conn.send(payload)
                    err = await recv_frame(conn, want="error")
                    assert err["msg"]
                # the connection survives and state keeps flowing
                a = await recv_frame(conn)
                b = await recv_frame(conn)
                assert b["t"] > a["t"]

    run(scenario())


def test_no_client_holds_zero_command_and_stands(bundle):
    policy, cfg = bundle
    safe = safe_command(cfg.commands)

    async def scenario():
        async with serving(policy, cfg, fast=True) as server:
            # let the robot run unattended for a second of sim time
            await asyncio.sleep(0.2)
            async with connect(f"ws://127.0.0.1:{server.port}", max_queue=None) as conn:
                frame = await recv_frame(conn)
                while frame["t"] < 1.0:
                    frame = await recv_frame(conn)
                assert frame["cmd"] == {"vx": 0.0, "vy": 0.0, "wz": 0.0,
                                        "h": safe.h_ref}
                assert frame["z"] > 0.05  # still on its feet
                assert abs(frame["roll"]) < 0.3 and abs(frame["pitch"]) < 0.3

    run(scenario())


def test_disconnect_decays_to_safe_command(bundle):
    policy, cfg = bundle
    safe = safe_command(cfg.commands)

    async def scenario():
        async with serving(policy, cfg, fast=True) as server:
            uri = f"ws://127.0.0.1:{server.port}"
            async with connect(uri, max_queue=None) as conn:
                await recv_frame(conn)
                await conn.send(json.dumps(
                    {"type": "cmd", "vx": 0.3, "vy": 0.0, "wz": 0.2, "h": 0.18}))
                for _ in range(50):
                    frame = await recv_frame(conn)
                    if frame["cmd"]["vx"] == 0.3:
                        break
                assert frame["cmd"]["vx"] == 0.3
                t_leave = frame["t"]
            # sim time races ahead while no one is connected (fast mode)
            await asyncio.sleep(0.3)
            async with connect(uri, max_queue=None) as conn:
                frame = await recv_frame(conn)
                assert frame["t"] > t_leave
                assert frame["cmd"] == {"vx": 0.0, "vy": 0.0, "wz": 0.0,
                                        "h": safe.h_ref}

    run(scenario())


# ------------------------------------------------------------ pacing


def test_fast_mode_outpaces_wall_clock(bundle):
    policy, cfg = bundle

    async def scenario():
        async with serving(policy, cfg, fast=True) as server:
            async with connect(f"ws://127.0.0.1:{server.port}", max_queue=None) as conn:
                first = await recv_frame(conn)
                wall = time.monotonic()
                frame = first
                while frame["t"] < first["t"] + 1.0:
                    frame = await recv_frame(conn)
                return time.monotonic() - wall

    elapsed = run(scenario())
    assert elapsed < 0.9  # 1 s of sim time in well under a second


def test_paced_mode_tracks_wall_clock(bundle):
    policy, cfg = bundle

    async def scenario():
        async with serving(policy, cfg, fast=False) as server:
            async with connect(f"ws://127.0.0.1:{server.port}", max_queue=None) as conn:
                first = await recv_frame(conn)
                wall = time.monotonic()
                frame = first
                while frame["t"] < first["t"] + 0.4:
                    frame = await recv_frame(conn)
                return time.monotonic() - wall

    elapsed = run(scenario())
    assert 0.3 <= elapsed < 3.0


# ------------------------------------------------------------ transport


def test_socket_replay_matches_offline_rollout(bundle):
    """Scripted commands sent over the socket reproduce the offline rollout.

    The client aligns to the serve clock on its first frame, then drives the
    same command schedule an offline rollout would apply. Both paths share
    the environment construction and policy call, so every logged state must
    agree to well below 1e-6.
    """
    policy, cfg = bundle
    seed = 11
    # boundaries sit between control steps so float noise cannot move a
    # command onto a different step on either path
    local = [
        (0.00, Command(0.08, 0.0, 0.0, 0.15)),
        (0.38, Command(0.0, 0.06, 0.05, 0.18)),
        (0.78, Command(-0.08, 0.0, -0.1, 0.12)),
    ]
    duration = 1.2
    script = CommandScript("wire", tuple(local), duration_s=duration + DT)

    # warm the jit path so real-time pacing holds from the first step
    rollout_scripted(policy, script, cfg, seed=seed, duration_s=0.2)

    async def scenario():
        frames = []
        async with serving(policy, cfg, seed=seed, fast=False) as server:
            async with connect(f"ws://127.0.0.1:{server.port}", max_queue=None) as conn:
                frame = await recv_frame(conn)
                k0 = round(frame["t"] / DT)
                while True:
                    k = round(frame["t"] / DT)
                    await conn.send(json.dumps({
                        "type": "cmd",
                        "vx": script.command_at((k - k0) * DT).vx,
                        "vy": script.command_at((k - k0) * DT).vy,
                        "wz": script.command_at((k - k0) * DT).wz,
                        "h": script.command_at((k - k0) * DT).h_ref,
                    }))
                    frame = await recv_frame(conn)
                    if round(frame["t"] / DT) > k0:
                        frames.append(frame)
                    if frame["t"] >= (k0 * DT) + duration:
                        break
        return k0, frames

    k0, frames = run(scenario())
    assert len(frames) >= int(duration / DT)

    safe = safe_command(cfg.commands)
    t0 = k0 * DT
    schedule = [(0.0, safe), ((k0 - 0.5) * DT, local[0][1])]
    schedule += [(t0 + s, c) for s, c in local[1:]]
    composite = CommandScript("composite", tuple(schedule),
                              duration_s=t0 + duration + 1.0)
    log = rollout_scripted(policy, composite, cfg, seed=seed,
                           duration_s=t0 + duration + 2 * DT)

    checked = 0
    col = {name: i for i, name in enumerate(COLUMNS)}
    for frame in frames:
        i = round(frame["t"] / DT) - 1  # row i holds the state after step i+1
        row = log.data[i]
        for field in ("t", "x", "y", "z", "roll", "pitch", "yaw",
                      "vx", "vy", "wz", "power"):
            assert abs(row[col[field]] - frame[field]) <= 1e-6, (
                f"{field} diverged at t={frame['t']}")
        assert frame["cmd"]["vx"] == row[col["cmd_vx"]]
        assert frame["cmd"]["h"] == row[col["cmd_h"]]
        checked += 1
    assert checked >= 30


# ------------------------------------------------------------ respawn


def test_episode_end_respawns_and_notifies(bundle):
    policy, cfg = bundle

    async def scenario():
        # a short horizon forces a timeout termination every 10 steps
        async with serving(policy, cfg, fast=True, horizon_s=0.4) as server:
            async with connect(f"ws://127.0.0.1:{server.port}", max_queue=None) as conn:
                err = await recv_frame(conn, want="error")
                assert "respawn" in err["msg"] and "timeout" in err["msg"]
                frame = await recv_frame(conn)
                assert frame["t"] >= DT  # stepping continued after respawn

    run(scenario())
