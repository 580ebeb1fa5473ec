"""Shared helpers for the test suite."""
import numpy as np

from napa.skeleton import NUM_JOINTS, KinematicChain, Pose2D, Pose3D

CHAIN = KinematicChain.default()


def t_pose_coords() -> np.ndarray:
    """Upright pose, arms out, y up; used as the base for derived fixtures."""
    c = np.zeros((NUM_JOINTS, 3))
    j = CHAIN.index
    c[j("pelvis")] = (0, 0, 0)
    c[j("spine")] = (0, 20, 0)
    c[j("thorax")] = (0, 40, 0)
    c[j("neck")] = (0, 50, 0)
    c[j("head")] = (0, 58, 0)
    c[j("head_top")] = (0, 66, 0)
    c[j("r_hip")] = (-10, 0, 0)
    c[j("r_knee")] = (-10, -40, 0)
    c[j("r_ankle")] = (-10, -80, 0)
    c[j("l_hip")] = (10, 0, 0)
    c[j("l_knee")] = (10, -40, 0)
    c[j("l_ankle")] = (10, -80, 0)
    c[j("r_shoulder")] = (-18, 40, 0)
    c[j("r_elbow")] = (-44, 40, 0)
    c[j("r_wrist")] = (-70, 40, 0)
    c[j("l_shoulder")] = (18, 40, 0)
    c[j("l_elbow")] = (44, 40, 0)
    c[j("l_wrist")] = (70, 40, 0)
    return c


def figure_2d(height: int, width: int, jitter: float = 0.0,
              seed: int = 0) -> Pose2D:
    """T-pose mapped into image coordinates (v down), fit with a margin."""
    c = t_pose_coords()[:, :2].copy()
    if jitter:
        rng = np.random.default_rng(seed)
        c = c + rng.uniform(-jitter, jitter, size=c.shape)
    span = 170.0  # generous bound on the figure extent in either axis
    scale = 0.8 * min(height, width) / span
    u = width / 2.0 + c[:, 0] * scale
    v = height / 2.0 - c[:, 1] * scale
    return Pose2D.all_visible(np.stack([u, v], axis=1))


def figure_3d(jitter: float = 0.0, seed: int = 0) -> Pose3D:
    c = t_pose_coords()
    if jitter:
        rng = np.random.default_rng(seed)
        c = c + rng.uniform(-jitter, jitter, size=c.shape)
    return Pose3D(c)
