"""On-disk formats: FCTL checkpoints, trajectory replay files, CSV exports, VP tables.

All binary numbers are little-endian.

FCTL checkpoint::

    b"FCTL" | u16 version | u16 type tag (0 field, 1 control) | u32 dim
    | u32 n_hidden | u32 width * n_hidden | u64 n_params | f64 * n_params | u32 crc32

Trajectory replay (``FTRJ``)::

    b"FTRJ" | u16 version | u8 mode (0 ode, 1 sde) | i64 seed (-1 if none)
    | u32 n_times | u32 batch (0 if unbatched) | u32 dim
    | f64 times | f64 states | f64 noises
"""
from __future__ import annotations

import csv
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import IntegrityError
from .field import MLP
from .sampler import Trajectory
from .schedules import VpRateTable

CKPT_MAGIC = b"FCTL"
CKPT_VERSION = 1
TRAJ_MAGIC = b"FTRJ"
TRAJ_VERSION = 1


def save_checkpoint(path, net: MLP):
    head = CKPT_MAGIC + struct.pack("<HHII", CKPT_VERSION, net.tag, net.dim, len(net.hidden))
    head += struct.pack(f"<{len(net.hidden)}I", *net.hidden)
    head += struct.pack("<Q", net.n_params)
    body = head + net.theta.astype("<f8").tobytes()
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path, expect_tag=None) -> MLP:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise IntegrityError(f"{path}: not an FCTL checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise IntegrityError(f"{path}: checksum mismatch")
    version, tag, dim, n_hidden = struct.unpack_from("<HHII", data, 4)
    if version != CKPT_VERSION:
        raise IntegrityError(f"{path}: unsupported checkpoint version {version}")
    if expect_tag is not None and tag != expect_tag:
        raise IntegrityError(f"{path}: type tag {tag}, expected {expect_tag}")
    off = 4 + 12
    hidden = struct.unpack_from(f"<{n_hidden}I", data, off)
    off += 4 * n_hidden
    (n_params,) = struct.unpack_from("<Q", data, off)
    off += 8
    theta = np.frombuffer(body, dtype="<f8", count=n_params, offset=off).astype(np.float64)
    net = MLP(dim, hidden, theta, tag=tag)
    if net.n_params != n_params:
        raise IntegrityError(f"{path}: parameter count does not match the architecture")
    return net


def save_trajectory(path, traj: Trajectory):
    states = np.asarray(traj.states, dtype="<f8")
    batch = states.shape[1] if states.ndim == 3 else 0
    dim = states.shape[-1]
    mode = 1 if traj.noises.size else 0
    seed = -1 if traj.seed is None else int(traj.seed)
    head = TRAJ_MAGIC + struct.pack("<HBqIII", TRAJ_VERSION, mode, seed, len(traj.times), batch, dim)
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(np.asarray(traj.times, dtype="<f8").tobytes())
        fh.write(states.tobytes())
        if mode:
            fh.write(np.asarray(traj.noises, dtype="<f8").tobytes())


def load_trajectory(path) -> Trajectory:
    data = Path(path).read_bytes()
    if data[:4] != TRAJ_MAGIC:
        raise IntegrityError(f"{path}: not a trajectory replay file")
    fmt = "<HBqIII"
    version, mode, seed, n_times, batch, dim = struct.unpack_from(fmt, data, 4)
    if version != TRAJ_VERSION:
        raise IntegrityError(f"{path}: unsupported trajectory version {version}")
    off = 4 + struct.calcsize(fmt)
    shape = (batch, dim) if batch else (dim,)
    size = int(np.prod(shape))

    def take(count):
        nonlocal off
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).astype(np.float64)
        off += 8 * count
        return arr

    times = take(n_times)
    states = take(n_times * size).reshape(n_times, *shape)
    noises = take((n_times - 1) * size).reshape(n_times - 1, *shape) if mode else np.empty((0, *shape))
    return Trajectory(times, states, noises, None if seed < 0 else seed)


def write_trajectory_csv(path, traj: Trajectory, index=None):
    """Rows ``t,x_0,...,x_{d-1}``; ``index`` picks one member of a batched trajectory."""
    states = traj.states if index is None else traj.states[:, index]
    dim = states.shape[-1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", *(f"x_{j}" for j in range(dim))])
        for t, x in zip(traj.times, states):
            w.writerow([repr(float(t)), *(repr(float(v)) for v in x)])


def read_trajectory_csv(path):
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return arr[:, 0], arr[:, 1:]


def write_loss_curve(path, losses, smoothed=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"] + (["smoothed"] if smoothed is not None else []))
        for i, v in enumerate(losses):
            row = [i, repr(float(v))]
            if smoothed is not None:
                row.append(repr(float(smoothed[i])))
            w.writerow(row)


def write_vp_table(path, table: VpRateTable):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "beta_k", "alpha_bar_k"])
        w.writerow([0, "", repr(1.0)])
        for k, (b, ab) in enumerate(zip(table.betas, table.alpha_bar[1:]), start=1):
            w.writerow([k, repr(float(b)), repr(float(ab))])


def read_vp_table(path) -> VpRateTable:
    with open(path) as fh:
        rows = list(csv.reader(fh))[2:]
    return VpRateTable(np.array([float(r[1]) for r in rows]))


def write_fm_schedule(path, sched, n=1001):
    """Dense FM schedule samples ``t, alpha, beta, alpha_dot, beta_dot, sigma_mem^2``."""
    t = np.linspace(0.0, 1.0, n)
    alpha, beta, alpha_dot, beta_dot = sched.coeffs(t)
    with np.errstate(divide="ignore", invalid="ignore"):
        sig2 = np.where(t > 0, 2.0 * sched.eta(np.maximum(t, 1e-300)), np.inf)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "alpha", "beta", "alpha_dot", "beta_dot", "sigma_mem_sq"])
        for row in zip(t, alpha, beta, alpha_dot, beta_dot, sig2):
            w.writerow([repr(float(v)) for v in row])
