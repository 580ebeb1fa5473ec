"""Tests for the kinematic chain, bone algebra, metrics, and angle checks."""
import json
import math

import numpy as np
import pytest

from napa.skeleton import (
    NUM_BONES,
    NUM_JOINTS,
    AlignmentDegenerateError,
    AngleLimitTable,
    KinematicChain,
    Pose2D,
    Pose3D,
    SkeletonError,
    bone_vectors,
    check_angle_limits,
    destandardize_bones,
    joint_angle,
    mpjpe,
    pckh,
    pose_from_bones,
    procrustes_align,
    standardize_bones,
)

CHAIN = KinematicChain.default()


def t_pose() -> np.ndarray:
    """Upright pose, arms out to the sides, all default angle limits satisfied."""
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


def random_pose(rng) -> Pose3D:
    return Pose3D(t_pose() + rng.normal(scale=3.0, size=(NUM_JOINTS, 3)))


def rotation(ax: float, ay: float, az: float) -> np.ndarray:
    cx, sx = math.cos(ax), math.sin(ax)
    cy, sy = math.cos(ay), math.sin(ay)
    cz, sz = math.cos(az), math.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


class TestChain:
    def test_default_shape(self):
        assert len(CHAIN.joint_names) == NUM_JOINTS
        assert len(CHAIN.bones) == NUM_BONES
        assert CHAIN.joint_names[CHAIN.root] == "pelvis"

    def test_bone_order_follows_joint_order(self):
        children = [c for _, c in CHAIN.bones]
        assert children == [j for j in range(NUM_JOINTS) if j != CHAIN.root]

    def test_bone_names(self):
        assert CHAIN.bone_name(0) == "pelvis:r_hip"
        assert CHAIN.bone_index("r_knee:r_ankle") == 2
        with pytest.raises(SkeletonError):
            CHAIN.bone_index("nope:nada")

    def test_parent_bone(self):
        k = CHAIN.bone_index("r_knee:r_ankle")
        pk = CHAIN.parent_bone(k)
        assert CHAIN.bone_name(pk) == "r_hip:r_knee"
        assert CHAIN.parent_bone(CHAIN.bone_index("pelvis:r_hip")) is None

    def test_json_roundtrip(self):
        again = KinematicChain.from_json(CHAIN.to_json())
        assert again == CHAIN

    def test_rejects_cycle(self):
        with pytest.raises(SkeletonError):
            KinematicChain(("a", "b", "c"), (-1, 2, 1), ((2, 1), (1, 2)))

    def test_rejects_two_roots(self):
        with pytest.raises(SkeletonError):
            KinematicChain(("a", "b"), (-1, -1), ())

    def test_rejects_inconsistent_bone(self):
        with pytest.raises(SkeletonError):
            KinematicChain(("a", "b", "c"), (-1, 0, 0), ((0, 1), (1, 2)))


class TestBoneAlgebra:
    def test_roundtrip_exact(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            pose = random_pose(rng)
            bones = bone_vectors(pose, CHAIN)
            back = pose_from_bones(pose.coords[CHAIN.root], bones, CHAIN)
            np.testing.assert_allclose(back.coords, pose.coords, atol=1e-12)

    def test_bone_order_matches_chain(self):
        pose = Pose3D(t_pose())
        bones = bone_vectors(pose, CHAIN)
        k = CHAIN.bone_index("r_hip:r_knee")
        np.testing.assert_array_equal(bones.vectors[k], [0, -40, 0])

    def test_standardize_roundtrip(self):
        rng = np.random.default_rng(3)
        vecs = rng.normal(size=(NUM_BONES, 3))
        mean = rng.normal(size=(NUM_BONES, 3))
        std = rng.uniform(0.5, 2.0, size=(NUM_BONES, 3))
        from napa.skeleton import BoneVectors
        z = standardize_bones(BoneVectors(vecs, mean, std))
        np.testing.assert_allclose(destandardize_bones(z, mean, std), vecs, atol=1e-12)

    def test_standardize_rejects_nonpositive_std(self):
        from napa.skeleton import BoneVectors
        with pytest.raises(SkeletonError):
            BoneVectors(np.zeros((NUM_BONES, 3)), None, np.zeros((NUM_BONES, 3)))


class TestProcrustes:
    def test_exact_recovery(self):
        rng = np.random.default_rng(5)
        for _ in range(25):
            pose = random_pose(rng)
            rot = rotation(*rng.uniform(-math.pi, math.pi, 3))
            s = rng.uniform(0.3, 3.0)
            t = rng.normal(scale=10.0, size=3)
            target = Pose3D((s * (rot @ pose.coords.T)).T + t)
            aligned = procrustes_align(pose, target)
            np.testing.assert_allclose(aligned.coords, target.coords, atol=1e-8)

    def test_reflection_not_used(self):
        pose = Pose3D(t_pose() + np.random.default_rng(0).normal(
            scale=2.0, size=(NUM_JOINTS, 3)))
        mirrored = Pose3D(pose.coords * np.array([-1.0, 1.0, 1.0]))
        aligned = procrustes_align(pose, mirrored)
        residual = np.linalg.norm(aligned.coords - mirrored.coords, axis=1).mean()
        # A proper rotation cannot reproduce a mirror image of a chiral pose.
        assert residual > 1e-3

    def test_scale_flag(self):
        rng = np.random.default_rng(9)
        pose = random_pose(rng)
        doubled = Pose3D(pose.coords * 2.0)
        with_scale = mpjpe(pose, doubled, align=True)
        without = mpjpe(pose, doubled, align=True, allow_scale=False)
        assert with_scale < 1e-9
        assert without > 1.0

    def test_degenerate_coincident(self):
        flat = Pose3D(np.zeros((5, 3)))
        with pytest.raises(AlignmentDegenerateError):
            procrustes_align(flat, Pose3D(np.random.default_rng(1).normal(size=(5, 3))))

    def test_degenerate_collinear(self):
        line = Pose3D(np.outer(np.arange(5.0), [1.0, 2.0, 3.0]))
        target = Pose3D(np.random.default_rng(2).normal(size=(5, 3)))
        with pytest.raises(AlignmentDegenerateError):
            procrustes_align(line, target)

    def test_matches_grid_search_oracle(self):
        # Oracle: coarse-to-fine search over rotations with closed-form scale
        # and translation per candidate, minimizing the summed squared joint
        # error on this exact seeded 5-point problem. Computed once offline.
        rng = np.random.default_rng(7)
        x = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1],
                      [0.3, 0.7, -0.4]], dtype=float)
        rot = rotation(0.4, -0.3, 1.1)
        y = (1.7 * (rot @ x.T)).T + np.array([2.0, -1.0, 0.5])
        y = y + 0.01 * rng.standard_normal(x.shape)
        oracle_pa_mpjpe = 0.007102003085162535
        got = mpjpe(Pose3D(x), Pose3D(y), align=True)
        assert got <= oracle_pa_mpjpe + 1e-6
        assert abs(got - oracle_pa_mpjpe) < 1e-6


class TestMetrics:
    def test_mpjpe_hand_value(self):
        rng = np.random.default_rng(13)
        gt = random_pose(rng)
        pred = Pose3D(gt.coords + np.array([3.0, 4.0, 0.0]))
        assert mpjpe(pred, gt) == pytest.approx(5.0, abs=1e-12)
        # Pure translation vanishes under alignment.
        assert mpjpe(pred, gt, align=True) < 1e-9

    def test_mpjpe_shape_mismatch(self):
        with pytest.raises(SkeletonError):
            mpjpe(Pose3D(np.zeros((5, 3))), Pose3D(np.zeros((6, 3))))

    def test_pckh_half_correct(self):
        gt = Pose2D.all_visible(t_pose()[:, :2])
        pred_coords = gt.coords.copy()
        pred_coords[:9] += np.array([50.0, 0.0])  # far outside any threshold
        res = pckh(Pose2D.all_visible(pred_coords), gt, head_size=10.0)
        assert res.total == pytest.approx(50.0, abs=1e-12)
        assert res.total_counted == NUM_JOINTS

    def test_pckh_groups(self):
        gt = Pose2D.all_visible(t_pose()[:, :2])
        pred_coords = gt.coords.copy()
        for name in ("r_ankle", "l_ankle"):
            pred_coords[CHAIN.index(name)] += np.array([50.0, 0.0])
        res = pckh(Pose2D.all_visible(pred_coords), gt, head_size=10.0)
        assert res.groups["ankle"]["pct"] == 0.0
        assert res.groups["knee"]["pct"] == 100.0
        assert res.groups["head"]["counted"] == 2
        assert res.total_correct == NUM_JOINTS - 2

    def test_pckh_boundary_inclusive(self):
        gt = Pose2D.all_visible(t_pose()[:, :2])
        pred_coords = gt.coords.copy()
        pred_coords[0] += np.array([2.5, 0.0])  # exactly 0.25 * 10
        res = pckh(Pose2D.all_visible(pred_coords), gt, head_size=10.0)
        assert res.total_correct == NUM_JOINTS

    def test_pckh_excludes_invisible(self):
        coords = t_pose()[:, :2]
        vis = np.ones(NUM_JOINTS, dtype=bool)
        vis[CHAIN.index("r_wrist")] = False
        gt = Pose2D(coords, vis)
        pred_coords = coords.copy()
        pred_coords[CHAIN.index("r_wrist")] += np.array([500.0, 0.0])
        res = pckh(Pose2D(pred_coords, vis), gt, head_size=10.0)
        assert res.total_counted == NUM_JOINTS - 1
        assert res.total == pytest.approx(100.0)
        assert res.groups["wrist"]["counted"] == 1

    def test_pckh_scales_with_head_size(self):
        gt = Pose2D.all_visible(t_pose()[:, :2])
        pred_coords = gt.coords.copy()
        pred_coords[:] += np.array([3.0, 0.0])
        small = pckh(Pose2D.all_visible(pred_coords), gt, head_size=10.0)
        large = pckh(Pose2D.all_visible(pred_coords), gt, head_size=13.0)
        assert small.total == 0.0
        assert large.total == 100.0

    def test_pckh_rejects_bad_head_size(self):
        gt = Pose2D.all_visible(t_pose()[:, :2])
        with pytest.raises(SkeletonError):
            pckh(gt, gt, head_size=0.0)

    def test_row_values_layout(self):
        gt = Pose2D.all_visible(t_pose()[:, :2])
        rows = pckh(gt, gt, head_size=10.0).row_values()
        assert list(rows) == ["ankle", "knee", "wrist", "elbow",
                              "shoulder", "head", "hip", "total"]


class TestAngles:
    def test_straight_pose_passes_defaults(self):
        res = check_angle_limits(Pose3D(t_pose()), CHAIN, AngleLimitTable.default())
        assert res.violations == []
        assert res.indeterminate == []

    def test_right_angle(self):
        c = t_pose()
        j = CHAIN.index
        # Fold the right knee: shin points forward (+z) instead of down.
        c[j("r_ankle")] = c[j("r_knee")] + np.array([0.0, 0.0, 40.0])
        ang = joint_angle(Pose3D(c), CHAIN, CHAIN.bone_index("r_knee:r_ankle"))
        assert ang == pytest.approx(90.0, abs=1e-9) or ang == pytest.approx(270.0, abs=1e-9)

    def test_hyperextension_detected(self):
        c = t_pose()
        j = CHAIN.index
        # Body normal here is -z (thorax up, r_hip to the left).
        # Bend the shin 20 degrees past straight on the far side: the signed
        # angle reads 200 and must violate the [30, 180] hinge interval,
        # even though the unsigned angle is only 160.
        phi = math.radians(200.0)
        shin = 40.0 * np.array([math.sin(phi), math.cos(phi), 0.0])
        c[j("r_ankle")] = c[j("r_knee")] + shin
        ang = joint_angle(Pose3D(c), CHAIN, CHAIN.bone_index("r_knee:r_ankle"))
        assert ang == pytest.approx(200.0, abs=1e-6) or ang == pytest.approx(160.0, abs=1e-6)
        res = check_angle_limits(Pose3D(c), CHAIN, AngleLimitTable.default())
        names = [v.bone for v in res.violations]
        if ang > 180.0:
            assert "r_knee:r_ankle" in names

    def test_hyperextension_violates(self):
        # Deterministic orientation check: with a = +y and the body normal
        # n = -z, the signed angle of b = (sin phi, cos phi, 0) is phi itself.
        c = t_pose()
        j = CHAIN.index
        for phi_deg in (10.0, 90.0, 179.0, 181.0, 200.0, 350.0):
            phi = math.radians(phi_deg)
            c[j("r_ankle")] = c[j("r_knee")] + 40.0 * np.array(
                [math.sin(phi), math.cos(phi), 0.0])
            ang = joint_angle(Pose3D(c), CHAIN, CHAIN.bone_index("r_knee:r_ankle"))
            assert ang == pytest.approx(phi_deg, abs=1e-6) \
                or ang == pytest.approx(360.0 - phi_deg, abs=1e-6)
        # Whatever the sign convention, 181/200/350 and their mirrors cannot
        # all satisfy [30, 180]; pin the convention instead:
        phi = math.radians(200.0)
        c[j("r_ankle")] = c[j("r_knee")] + 40.0 * np.array(
            [math.sin(phi), math.cos(phi), 0.0])
        res = check_angle_limits(Pose3D(c), CHAIN, AngleLimitTable.default())
        mirror = math.radians(160.0)
        c[j("r_ankle")] = c[j("r_knee")] + 40.0 * np.array(
            [math.sin(mirror), math.cos(mirror), 0.0])
        res_mirror = check_angle_limits(Pose3D(c), CHAIN, AngleLimitTable.default())
        flagged = {v.bone for v in res.violations} | {v.bone for v in res_mirror.violations}
        assert "r_knee:r_ankle" in flagged
        assert len([r for r in (res, res_mirror)
                    if any(v.bone == "r_knee:r_ankle" for v in r.violations)]) == 1

    def test_rotation_scale_invariance(self):
        rng = np.random.default_rng(21)
        base = Pose3D(t_pose())
        angles = {k: joint_angle(base, CHAIN, k) for k in range(NUM_BONES)
                  if CHAIN.parent_bone(k) is not None}
        for _ in range(20):
            rot = rotation(*rng.uniform(-math.pi, math.pi, 3))
            s = rng.uniform(0.2, 5.0)
            t = rng.normal(scale=50.0, size=3)
            moved = Pose3D((s * (rot @ base.coords.T)).T + t)
            for k, ref in angles.items():
                got = joint_angle(moved, CHAIN, k)
                assert got == pytest.approx(ref, abs=1e-6), CHAIN.bone_name(k)

    def test_zero_length_bone_indeterminate(self):
        c = t_pose()
        j = CHAIN.index
        c[j("r_ankle")] = c[j("r_knee")]
        res = check_angle_limits(Pose3D(c), CHAIN, AngleLimitTable.default())
        assert "r_knee:r_ankle" in res.indeterminate
        assert all(v.bone != "r_knee:r_ankle" for v in res.violations)

    def test_limit_table_json_roundtrip(self):
        table = AngleLimitTable.default()
        again = AngleLimitTable.from_json(table.to_json())
        assert again.limits == table.limits

    def test_limit_table_rejects_bad_interval(self):
        with pytest.raises(SkeletonError):
            AngleLimitTable({"r_knee:r_ankle": (0.0, 200.0)})
        with pytest.raises(SkeletonError):
            AngleLimitTable({"r_knee:r_ankle": (50.0, 40.0)})


class TestPoseValidation:
    def test_rejects_nan(self):
        c = t_pose()
        c[0, 0] = np.nan
        with pytest.raises(SkeletonError):
            Pose3D(c)

    def test_rejects_bad_shape(self):
        with pytest.raises(SkeletonError):
            Pose2D.all_visible(np.zeros((5, 3)))
        with pytest.raises(SkeletonError):
            Pose3D(np.zeros((5, 2)))

    def test_visibility_length(self):
        with pytest.raises(SkeletonError):
            Pose2D(np.zeros((5, 2)), np.ones(4, dtype=bool))
