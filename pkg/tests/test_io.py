import numpy as np
import pytest

from flowctl.errors import IntegrityError
from flowctl.field import MLP
from flowctl.io import (
    load_checkpoint,
    load_trajectory,
    read_trajectory_csv,
    read_vp_table,
    save_checkpoint,
    save_trajectory,
    write_fm_schedule,
    write_trajectory_csv,
    write_vp_table,
)
from flowctl.sampler import SamplerConfig, draw_initial, memoryless_config, sample_ode, sample_sde
from flowctl.schedules import VpRateTable, rectified_flow, vp_to_fm_schedule

RF = rectified_flow()


def test_checkpoint_roundtrip(tmp_path, small_net):
    save_checkpoint(tmp_path / "f.fctl", small_net)
    back = load_checkpoint(tmp_path / "f.fctl", expect_tag=small_net.tag)
    assert back.hidden == small_net.hidden and back.dim == small_net.dim
    np.testing.assert_array_equal(back.theta, small_net.theta)
    assert back.checksum() == small_net.checksum()


def test_checkpoint_corruption_detected(tmp_path, small_net):
    p = tmp_path / "f.fctl"
    save_checkpoint(p, small_net)
    raw = bytearray(p.read_bytes())
    raw[60] ^= 0x01
    p.write_bytes(bytes(raw))
    with pytest.raises(IntegrityError):
        load_checkpoint(p)
    p.write_bytes(b"NOPE" + bytes(raw[4:]))
    with pytest.raises(IntegrityError):
        load_checkpoint(p)


def test_checkpoint_type_tag_checked(tmp_path, small_net):
    save_checkpoint(tmp_path / "f.fctl", small_net)
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "f.fctl", expect_tag=small_net.tag + 1)


@pytest.mark.parametrize("batched", [False, True])
@pytest.mark.parametrize("mode", ["ode", "sde"])
def test_trajectory_roundtrip(tmp_path, small_net, mode, batched):
    x0 = draw_initial(4, 3, 2) if batched else draw_initial(4, 1, 2)[0]
    if mode == "ode":
        traj = sample_ode(small_net, RF, SamplerConfig(steps=7), x0)
    else:
        traj = sample_sde(small_net, RF, memoryless_config(RF, 7), x0, seed=4)
    save_trajectory(tmp_path / "t.ftrj", traj)
    back = load_trajectory(tmp_path / "t.ftrj")
    np.testing.assert_array_equal(back.times, traj.times)
    np.testing.assert_array_equal(back.states, traj.states)
    np.testing.assert_array_equal(back.noises, traj.noises)
    assert back.seed == traj.seed


def test_trajectory_csv(tmp_path, small_net):
    traj = sample_ode(small_net, RF, SamplerConfig(steps=5), draw_initial(0, 2, 2))
    write_trajectory_csv(tmp_path / "t.csv", traj, index=1)
    t, x = read_trajectory_csv(tmp_path / "t.csv")
    np.testing.assert_array_equal(t, traj.times)
    np.testing.assert_array_equal(x, traj.states[:, 1])


def test_vp_table_roundtrip(tmp_path):
    table = VpRateTable.linear(100)
    write_vp_table(tmp_path / "vp.csv", table)
    back = read_vp_table(tmp_path / "vp.csv")
    np.testing.assert_array_equal(back.betas, table.betas)


def test_fm_schedule_export_reloads_exactly(tmp_path):
    sched = vp_to_fm_schedule(VpRateTable.linear(1000))
    write_fm_schedule(tmp_path / "fm.csv", sched, n=201)
    arr = np.loadtxt(tmp_path / "fm.csv", delimiter=",", skiprows=1)
    t = arr[:, 0]
    for col, ref in zip(arr[:, 1:5].T, sched.coeffs(t)):
        np.testing.assert_allclose(col, ref, rtol=1e-12, atol=1e-12)
    assert np.isinf(arr[0, 5])
    np.testing.assert_allclose(arr[1:, 5], 2 * sched.eta(t[1:]), rtol=1e-12)
