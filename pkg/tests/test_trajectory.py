import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dvoslam.geometry import RigidPose, SimTransform, rot_z, se3_exp
from dvoslam.trajectory import (InsufficientDataError, TrajectoryFormatError, TrajectoryRecord, evaluate_ate,
                                format_record, read_trajectory, trajectory_length, write_trajectory)


def random_records(rng, n=100):
    return [TrajectoryRecord.from_pose(0.1 * i + 1e-4, se3_exp(rng.normal(size=6))) for i in range(n)]


def test_identity_line(tmp_path):
    rec = TrajectoryRecord.from_pose(0.0, RigidPose())
    assert format_record(rec) == "0.000000000 0 0 0 0 0 0 1"
    write_trajectory([], tmp_path / "e.txt")
    assert (tmp_path / "e.txt").read_text() == ""


def test_round_trip(tmp_path, rng):
    recs = random_records(rng)
    write_trajectory(recs, tmp_path / "t.txt")
    back = read_trajectory(tmp_path / "t.txt")
    assert len(back) == len(recs)
    for a, b in zip(recs, back):
        assert abs(a.timestamp - b.timestamp) < 1e-9
        assert np.allclose(a.translation, b.translation, atol=1e-9, rtol=1e-9)
        assert np.allclose(a.quaternion, b.quaternion, atol=1e-9)


def test_parse_errors(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("# header\n0 0 0 0 0 0 0 1\n1 2 3\n")
    with pytest.raises(TrajectoryFormatError, match=":3:"):
        read_trajectory(p)
    p.write_text("0 0 0 0 0 0 0 x\n")
    with pytest.raises(TrajectoryFormatError, match=":1:"):
        read_trajectory(p)
    p.write_text("0 0 0 0 0 0 0 2\n")
    with pytest.raises(TrajectoryFormatError):
        read_trajectory(p)
    with pytest.raises(TrajectoryFormatError):
        TrajectoryRecord(0.0, np.zeros(3), np.array([0, 0, 0, 1.1]))


def test_ate_examples(rng):
    gt = random_records(rng)
    assert evaluate_ate(gt, gt).rmse < 1e-12
    G = RigidPose(rot_z(0.7), np.array([1.0, -2.0, 0.5]))
    moved = [TrajectoryRecord.from_pose(r.timestamp, G @ r.pose()) for r in gt]
    assert evaluate_ate(moved, gt).rmse < 1e-9
    S = SimTransform(rot_z(0.3), np.array([0.2, 0.0, 1.0]), 2.5)
    scaled = [TrajectoryRecord(r.timestamp, S.apply(r.translation), r.quaternion) for r in gt]
    assert evaluate_ate(scaled, gt, with_scale=True).rmse < 1e-9
    with pytest.raises(InsufficientDataError):
        evaluate_ate(gt[:2], gt)


def test_ate_noise_statistics():
    rng = np.random.default_rng(7)
    sigma = 0.01
    ratios = []
    for _ in range(20):
        gt = [TrajectoryRecord(i * 0.1, rng.normal(size=3), [0, 0, 0, 1]) for i in range(100)]
        noisy = [TrajectoryRecord(r.timestamp, r.translation + rng.normal(scale=sigma, size=3), r.quaternion)
                 for r in gt]
        ratios.append(evaluate_ate(noisy, gt).rmse / (sigma * np.sqrt(3)))
    assert all(0.8 < r < 1.2 for r in ratios)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=3, max_size=3))
def test_trajectory_length(step):
    recs = [TrajectoryRecord(i, np.array(step) * i, [0, 0, 0, 1]) for i in range(5)]
    assert np.isclose(trajectory_length(recs), 4 * np.linalg.norm(step))
