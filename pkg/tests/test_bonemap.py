"""Tests for hard and soft bone-map rendering."""
import math

import numpy as np
import pytest
import torch

from napa.bonemap import (
    BoneMapSpec,
    bone_quadratic,
    bone_region_test,
    colorize,
    loop_point,
    read_png,
    render_hard,
    render_hard_labels,
    render_soft,
    soft_to_uint8,
    spaced_palette,
    write_png,
)
from napa.skeleton import KinematicChain, Pose2D, SkeletonError

from util import CHAIN, figure_2d

SPEC = BoneMapSpec()


def tiny_chain() -> KinematicChain:
    return KinematicChain(("a", "b", "c"), (-1, 0, 1), ((0, 1), (1, 2)))


def oracle_labels(coords: np.ndarray, bones, width: float,
                  height: int, img_width: int) -> np.ndarray:
    """Reference rasterizer: rotate each pixel into the bone frame and apply
    the canonical axis-aligned ellipse test. Written independently of the
    production renderer (trig rotation instead of dot/cross projections)."""
    labels = np.full((height, img_width), -1, dtype=np.int32)
    for k, (p, c) in enumerate(bones):
        x1, y1 = coords[p]
        x2, y2 = coords[c]
        length = math.hypot(x2 - x1, y2 - y1)
        if length * length < 1e-8:
            continue
        theta = math.atan2(y2 - y1, x2 - x1)
        ct, st = math.cos(theta), math.sin(theta)
        mx, my = (x1 + x2) / 2.0, (y1 + y2) / 2.0
        a = length / 2.0
        b = width / 2.0
        for y in range(height):
            for x in range(img_width):
                dx, dy = x - mx, y - my
                xp = ct * dx + st * dy
                yp = -st * dx + ct * dy
                if (xp / a) ** 2 + (yp / b) ** 2 <= 1.0:
                    labels[y, x] = k
    return labels


class TestRegionTest:
    # Vertical bone (0,0)->(0,60) with width 10: semi-axes 30 along, 5 across.
    P1, P2, D = (0.0, 0.0), (0.0, 60.0), 10.0

    def test_hand_values(self):
        q = lambda pt: float(bone_quadratic(self.P1, self.P2, self.D, np.array(pt)))
        assert q((3.0, 30.0)) == pytest.approx(9 / 25, abs=1e-12)
        assert q((4.0, 42.0)) == pytest.approx(0.8, abs=1e-12)
        assert q((6.0, 30.0)) == pytest.approx(36 / 25, abs=1e-12)
        assert q((5.0, 30.0)) == pytest.approx(1.0, abs=1e-12)

    def test_boundary_inclusive(self):
        assert bone_region_test(self.P1, self.P2, self.D, (5.0, 30.0))
        assert not bone_region_test(self.P1, self.P2, self.D, (5.0 + 1e-9, 30.0))

    def test_endpoints_inside(self):
        assert bone_region_test(self.P1, self.P2, self.D, self.P1)
        assert bone_region_test(self.P1, self.P2, self.D, self.P2)
        assert not bone_region_test(self.P1, self.P2, self.D, (0.0, -1.0))
        assert not bone_region_test(self.P1, self.P2, self.D, (0.0, 61.0))

    def test_endpoint_swap_symmetric(self):
        rng = np.random.default_rng(4)
        pts = rng.uniform(-10, 70, size=(200, 2))
        qa = bone_quadratic(self.P1, self.P2, self.D, pts)
        qb = bone_quadratic(self.P2, self.P1, self.D, pts)
        np.testing.assert_array_equal(qa, qb)

    def test_degenerate_bone_empty(self):
        assert not bone_region_test((5.0, 5.0), (5.0, 5.0), self.D, (5.0, 5.0))


class TestHardRender:
    def test_matches_oracle_exactly(self):
        pose = figure_2d(64, 64, jitter=1.7, seed=12)
        got = render_hard_labels(pose, CHAIN, SPEC, 64, 64)
        want = oracle_labels(pose.coords, CHAIN.bones, SPEC.width, 64, 64)
        # Guard: no pixel sits numerically on any bone boundary, so the two
        # formulations cannot disagree by rounding.
        grid = np.stack(np.meshgrid(np.arange(64.0), np.arange(64.0)), axis=-1)
        min_gap = min(
            float(np.abs(bone_quadratic(pose.coords[p], pose.coords[c],
                                        SPEC.width, grid) - 1.0).min())
            for p, c in CHAIN.bones)
        assert min_gap > 1e-9
        assert int((got != want).sum()) == 0

    def test_deterministic(self):
        pose = figure_2d(48, 48)
        a = render_hard(pose, CHAIN, SPEC, 48, 48)
        b = render_hard(pose, CHAIN, SPEC, 48, 48)
        np.testing.assert_array_equal(a, b)

    def test_last_bone_wins(self):
        chain = tiny_chain()
        pose = Pose2D.all_visible([[10.0, 16.0], [30.0, 16.0], [20.0, 16.0]])
        labels = render_hard_labels(pose, chain, SPEC, 32, 48)
        assert labels[16, 25] == 1  # covered by both bones
        assert labels[16, 12] == 0  # covered only by the first
        assert labels[0, 0] == -1

    def test_colors_follow_palette(self):
        chain = tiny_chain()
        pose = Pose2D.all_visible([[10.0, 16.0], [30.0, 16.0], [20.0, 16.0]])
        img = render_hard(pose, chain, SPEC, 32, 48)
        assert tuple(img[16, 12]) == SPEC.palette[0]
        assert tuple(img[16, 25]) == SPEC.palette[1]
        assert tuple(img[0, 0]) == SPEC.background

    def test_degenerate_bone_not_drawn(self):
        chain = tiny_chain()
        pose = Pose2D.all_visible([[10.0, 16.0], [30.0, 16.0], [30.0, 16.0]])
        labels = render_hard_labels(pose, chain, SPEC, 32, 48)
        assert not (labels == 1).any()
        assert (labels == 0).any()

    def test_endpoint_swap_render_identical(self):
        chain = tiny_chain()
        pose = Pose2D.all_visible([[10.0, 10.0], [38.0, 22.0], [20.0, 40.0]])
        swapped_chain = KinematicChain(("a", "b", "c"), (-1, 0, 1), ((0, 1), (1, 2)))
        a = render_hard_labels(pose, chain, SPEC, 48, 48)
        # Same geometry with each bone's endpoints listed in reverse order.
        q0 = bone_quadratic(pose.coords[1], pose.coords[0], SPEC.width,
                            np.stack(np.meshgrid(np.arange(48.0), np.arange(48.0)), axis=-1))
        q1 = bone_quadratic(pose.coords[2], pose.coords[1], SPEC.width,
                            np.stack(np.meshgrid(np.arange(48.0), np.arange(48.0)), axis=-1))
        b = np.full((48, 48), -1, dtype=np.int32)
        b[q0 <= 1.0] = 0
        b[q1 <= 1.0] = 1
        np.testing.assert_array_equal(a, b)
        assert swapped_chain == chain


class TestPalette:
    def test_17_distinct_colors(self):
        pal = spaced_palette()
        assert len(pal) == 17
        assert len(set(pal)) == 17

    def test_spec_json_roundtrip(self):
        spec = BoneMapSpec(width=7.0, soft_sharpness=12.0)
        again = BoneMapSpec.from_json(spec.to_json())
        assert again == spec

    def test_spec_validation(self):
        with pytest.raises(SkeletonError):
            BoneMapSpec(width=0.0)
        with pytest.raises(SkeletonError):
            BoneMapSpec(soft_sharpness=-1.0)


class TestLoop:
    P1, P2, A = np.array([0.0, 0.0]), np.array([0.0, 60.0]), 5.0

    def test_endpoints(self):
        np.testing.assert_allclose(loop_point(self.P1, self.P2, self.A, 0.0), self.P1, atol=1e-12)
        np.testing.assert_allclose(loop_point(self.P1, self.P2, self.A, 1.0), self.P1, atol=1e-12)
        np.testing.assert_allclose(loop_point(self.P1, self.P2, self.A, 0.5), self.P2, atol=1e-12)

    def test_quarter_point(self):
        np.testing.assert_allclose(
            loop_point(self.P1, self.P2, self.A, 0.25, orientation=1),
            [5.0, 30.0], atol=1e-12)
        np.testing.assert_allclose(
            loop_point(self.P1, self.P2, self.A, 0.25, orientation=-1),
            [-5.0, 30.0], atol=1e-12)
        np.testing.assert_allclose(
            loop_point(self.P1, self.P2, self.A, 0.75, orientation=1),
            [-5.0, 30.0], atol=1e-12)

    def test_orientation_mirrors(self):
        for t in np.linspace(0, 1, 41):
            plus = loop_point(self.P1, self.P2, self.A, t, 1)
            minus = loop_point(self.P1, self.P2, self.A, t, -1)
            np.testing.assert_allclose(plus[1], minus[1], atol=1e-12)
            np.testing.assert_allclose(plus[0], -minus[0], atol=1e-12)

    def test_continuous_and_closed(self):
        ts = np.linspace(0, 1, 2001)
        pts = np.array([loop_point(self.P1, self.P2, self.A, t) for t in ts])
        gaps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        # The along-axis offset moves like sqrt(dt) near the quarter marks,
        # so discrete gaps there scale with sqrt of the step size.
        assert gaps.max() < 3.0 * math.sqrt(8 * 0.0005) * 30.0
        np.testing.assert_allclose(pts[0], pts[-1], atol=1e-12)
        # Pointwise continuity across the quarter-schedule seams.
        for tb in (0.25, 0.5, 0.75):
            left = loop_point(self.P1, self.P2, self.A, tb - 1e-12)
            right = loop_point(self.P1, self.P2, self.A, tb + 1e-12)
            # Each side approaches the seam like (L/2) * sqrt(8 * delta).
            assert np.linalg.norm(left - right) < 3.0 * 30.0 * math.sqrt(8e-12)

    def test_loop_lies_on_region_boundary(self):
        # With amplitude = width/2 the loop traces the oval boundary (q = 1).
        width = 2 * self.A
        for t in np.linspace(0, 1, 97):
            pt = loop_point(self.P1, self.P2, self.A, t)
            q = float(bone_quadratic(self.P1, self.P2, width, pt))
            assert q == pytest.approx(1.0, abs=1e-9)

    def test_arbitrary_direction(self):
        p1, p2 = np.array([3.0, 7.0]), np.array([33.0, 47.0])
        for t in np.linspace(0, 1, 17):
            pt = loop_point(p1, p2, 4.0, t)
            q = float(bone_quadratic(p1, p2, 8.0, pt))
            assert q == pytest.approx(1.0, abs=1e-9)

    def test_validation(self):
        with pytest.raises(SkeletonError):
            loop_point(self.P1, self.P2, self.A, 1.5)
        with pytest.raises(SkeletonError):
            loop_point(self.P1, self.P2, -1.0, 0.5)
        with pytest.raises(SkeletonError):
            loop_point(self.P1, self.P1, self.A, 0.5)
        with pytest.raises(SkeletonError):
            loop_point(self.P1, self.P2, self.A, 0.5, orientation=2)


class TestSoftRender:
    def keypoints(self, h=48, w=48, jitter=1.3, seed=3) -> torch.Tensor:
        return torch.tensor(figure_2d(h, w, jitter, seed).coords, dtype=torch.float64)

    def test_output_range_and_shape(self):
        kp = self.keypoints()
        out = render_soft(kp, CHAIN, SPEC, 48, 48)
        assert out.shape == (3, 48, 48)
        assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0

    def test_gradients_flow_to_keypoints(self):
        kp = self.keypoints().requires_grad_(True)
        out = render_soft(kp, CHAIN, SPEC, 48, 48)
        out.sum().backward()
        assert kp.grad is not None
        assert torch.isfinite(kp.grad).all()
        assert float(kp.grad.abs().max()) > 0.0

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(0)
        kp = self.keypoints(32, 32)
        weights = torch.rand(3, 32, 32, dtype=torch.float64)

        def f(k):
            return (render_soft(k, CHAIN, SPEC, 32, 32, sharpness=5.0) * weights).sum()

        kp_g = kp.clone().requires_grad_(True)
        f(kp_g).backward()
        rng = np.random.default_rng(8)
        picks = [(int(j), int(ax)) for j, ax in
                 zip(rng.integers(0, kp.shape[0], 6), rng.integers(0, 2, 6))]
        h = 1e-4
        for j, ax in picks:
            kp_p = kp.clone()
            kp_m = kp.clone()
            kp_p[j, ax] += h
            kp_m[j, ax] -= h
            fd = (f(kp_p) - f(kp_m)).item() / (2 * h)
            an = kp_g.grad[j, ax].item()
            denom = max(abs(fd), abs(an), 1e-8)
            assert abs(fd - an) / denom < 1e-3, (j, ax, fd, an)

    def test_sharp_limit_matches_hard_within_boundary_band(self):
        pose = figure_2d(64, 64, jitter=1.7, seed=12)
        kp = torch.tensor(pose.coords, dtype=torch.float64)
        soft = soft_to_uint8(render_soft(kp, CHAIN, SPEC, 64, 64, sharpness=1e3))
        hard = render_hard(pose, CHAIN, SPEC, 64, 64)
        labels = render_hard_labels(pose, CHAIN, SPEC, 64, 64)
        mismatch = (soft != hard).any(axis=2)
        ys, xs = np.nonzero(mismatch)
        for y, x in zip(ys, xs):
            y0, y1 = max(0, y - 1), min(64, y + 2)
            x0, x1 = max(0, x - 1), min(64, x + 2)
            neighborhood = labels[y0:y1, x0:x1]
            assert len(np.unique(neighborhood)) > 1, (y, x)

    def test_alpha_monotone_in_q(self):
        chain = KinematicChain(("a", "b"), (-1, 0), ((0, 1),))
        kp = torch.tensor([[10.0, 24.0], [38.0, 24.0]], dtype=torch.float64)
        out = render_soft(kp, chain, SPEC, 48, 48, sharpness=4.0)
        # Moving off-axis from the bone center, coverage can only drop.
        center_col = 24
        col = out[:, :, center_col].sum(dim=0)  # brightness per row
        rows = col[24:40]
        assert torch.all(rows[:-1] >= rows[1:] - 1e-9)

    def test_translation_equivariance(self):
        kp = self.keypoints(64, 64)
        a = render_soft(kp, CHAIN, SPEC, 64, 64)
        b = render_soft(kp + torch.tensor([5.0, 3.0]), CHAIN, SPEC, 64, 64)
        np.testing.assert_allclose(
            a[:, 10:44, 10:44].numpy(),
            b[:, 13:47, 15:49].numpy(), atol=1e-9)

    def test_degenerate_bone_invisible(self):
        chain = tiny_chain()
        kp = torch.tensor([[10.0, 16.0], [30.0, 16.0], [30.0, 16.0]],
                          dtype=torch.float64)
        two_joint = KinematicChain(("a", "b"), (-1, 0), ((0, 1),))
        with_dead = render_soft(kp, chain, SPEC, 32, 48)
        without = render_soft(kp[:2], two_joint, SPEC, 32, 48)
        np.testing.assert_allclose(with_dead.numpy(), without.numpy(), atol=1e-12)

    def test_rejects_bad_shape(self):
        with pytest.raises(SkeletonError):
            render_soft(torch.zeros(18, 3), CHAIN, SPEC, 32, 32)


class TestPng:
    def test_roundtrip_exact(self, tmp_path):
        img = render_hard(figure_2d(40, 40), CHAIN, SPEC, 40, 40)
        path = tmp_path / "map.png"
        write_png(path, img)
        np.testing.assert_array_equal(read_png(path), img)

    def test_write_deterministic(self, tmp_path):
        img = render_hard(figure_2d(40, 40), CHAIN, SPEC, 40, 40)
        p1, p2 = tmp_path / "a.png", tmp_path / "b.png"
        write_png(p1, img)
        write_png(p2, img)
        assert p1.read_bytes() == p2.read_bytes()

    def test_rejects_wrong_dtype(self, tmp_path):
        with pytest.raises(SkeletonError):
            write_png(tmp_path / "x.png", np.zeros((4, 4, 3), dtype=np.float32))
