import numpy as np
import pytest

from dspm.geometry import Camera


def rodrigues(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([
        [0, -axis[2], axis[1]],
        [axis[2], 0, -axis[0]],
        [-axis[1], axis[0], 0],
    ])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def make_camera(f=100.0, cx=40.0, cy=30.0, R=None, center=(0.0, 0.0, 0.0),
                d_min=1.0, d_max=10.0):
    """Camera from a world-space center (t = -R @ C)."""
    R = np.eye(3) if R is None else R
    K = np.array([[f, 0, cx], [0, f, cy], [0, 0, 1.0]])
    t = -R @ np.asarray(center, dtype=np.float64)
    return Camera(K, R, t, d_min, d_max)


@pytest.fixture
def rectified_pair():
    ref = make_camera()
    src = make_camera(center=(0.5, 0.0, 0.0))
    return ref, src
