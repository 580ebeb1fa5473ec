"""Kinematic chain, bone-vector algebra, pose metrics, and anthropometric checks.

The 18-joint skeleton is an H36M-style tree rooted at the pelvis with 17
bones. Bones are stored in a fixed traversal order; that order is the
serialization order for bone vectors and the colorization order for bone
maps, so it must never change between writers and readers.

Coordinates are image-space: (u, v) in pixels, z a relative depth in
pixel-equivalent units with the pelvis pinned at z = 0 (weak perspective,
no camera model).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NUM_JOINTS = 18
NUM_BONES = 17

JOINT_NAMES = (
    "pelvis", "r_hip", "r_knee", "r_ankle",
    "l_hip", "l_knee", "l_ankle",
    "spine", "thorax", "neck", "head", "head_top",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
)

# Parent joint per joint; -1 marks the root (pelvis).
JOINT_PARENTS = (
    -1, 0, 1, 2,
    0, 4, 5,
    0, 7, 8, 9, 10,
    8, 12, 13,
    8, 15, 16,
)

# Joint groups used for PCKh table rows (limbs + head only; torso joints
# count toward the total but have no row of their own).
PCKH_GROUPS = {
    "ankle": ("r_ankle", "l_ankle"),
    "knee": ("r_knee", "l_knee"),
    "wrist": ("r_wrist", "l_wrist"),
    "elbow": ("r_elbow", "l_elbow"),
    "shoulder": ("r_shoulder", "l_shoulder"),
    "head": ("head", "head_top"),
    "hip": ("r_hip", "l_hip"),
}


class SkeletonError(ValueError):
    """Invalid chain, pose, or configuration input."""


class AlignmentDegenerateError(SkeletonError):
    """Procrustes alignment is underdetermined (collinear/coincident joints)."""


@dataclass(frozen=True)
class KinematicChain:
    """Joint tree plus the fixed bone ordering.

    Attributes:
        joint_names: 18 joint identifiers.
        parent: parent joint index per joint, -1 for the root.
        bones: 17 (parent_index, child_index) pairs in serialization order.
    """
    joint_names: tuple[str, ...]
    parent: tuple[int, ...]
    bones: tuple[tuple[int, int], ...]

    def __post_init__(self):
        n = len(self.joint_names)
        if len(self.parent) != n:
            raise SkeletonError("parent array length must match joint count")
        roots = [j for j, p in enumerate(self.parent) if p < 0 or p == j]
        if len(roots) != 1:
            raise SkeletonError(f"expected exactly one root, got {roots}")
        # Tree check: walking parents from every joint must reach the root
        # without revisiting a joint.
        root = roots[0]
        for j in range(n):
            seen = set()
            k = j
            while k != root:
                if k in seen:
                    raise SkeletonError(f"parent cycle at joint {j}")
                seen.add(k)
                k = self.parent[k]
                if k < 0 or k >= n:
                    raise SkeletonError(f"joint {j} does not reach the root")
        if len(self.bones) != n - 1:
            raise SkeletonError("bones list must have one entry per non-root joint")
        for p, c in self.bones:
            if self.parent[c] != p:
                raise SkeletonError(f"bone ({p},{c}) disagrees with parent array")

    @property
    def root(self) -> int:
        return next(j for j, p in enumerate(self.parent) if p < 0 or p == j)

    def index(self, name: str) -> int:
        try:
            return self.joint_names.index(name)
        except ValueError:
            raise SkeletonError(f"unknown joint '{name}'") from None

    def bone_name(self, k: int) -> str:
        p, c = self.bones[k]
        return f"{self.joint_names[p]}:{self.joint_names[c]}"

    def bone_index(self, name: str) -> int:
        for k in range(len(self.bones)):
            if self.bone_name(k) == name:
                return k
        raise SkeletonError(f"unknown bone '{name}'")

    def parent_bone(self, k: int) -> int | None:
        """Index of the bone ending at bone k's parent joint, if any."""
        p, _ = self.bones[k]
        for j, (_, c) in enumerate(self.bones):
            if c == p:
                return j
        return None

    def to_json(self) -> str:
        return json.dumps({
            "joint_names": list(self.joint_names),
            "parent": list(self.parent),
            "bones": [list(b) for b in self.bones],
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "KinematicChain":
        d = json.loads(text)
        return cls(
            joint_names=tuple(d["joint_names"]),
            parent=tuple(d["parent"]),
            bones=tuple((int(p), int(c)) for p, c in d["bones"]),
        )

    @classmethod
    def default(cls) -> "KinematicChain":
        bones = tuple(
            (JOINT_PARENTS[j], j) for j in range(NUM_JOINTS) if JOINT_PARENTS[j] >= 0
        )
        return cls(joint_names=JOINT_NAMES, parent=JOINT_PARENTS, bones=bones)


@dataclass
class Pose2D:
    """Per-joint pixel coordinates (u, v) with a visibility flag per joint."""
    coords: np.ndarray  # (J, 2) float
    visibility: np.ndarray  # (J,) bool

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.visibility is None:
            self.visibility = np.ones(self.coords.shape[0], dtype=bool)
        self.visibility = np.asarray(self.visibility, dtype=bool)
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise SkeletonError(f"Pose2D coords must be (J,2), got {self.coords.shape}")
        if self.visibility.shape != (self.coords.shape[0],):
            raise SkeletonError("visibility must have one flag per joint")
        if not np.isfinite(self.coords).all():
            raise SkeletonError("Pose2D coords must be finite")

    @classmethod
    def all_visible(cls, coords) -> "Pose2D":
        coords = np.asarray(coords, dtype=np.float64)
        return cls(coords, np.ones(coords.shape[0], dtype=bool))


@dataclass
class Pose3D:
    """(u, v, z) per joint; z is depth relative to the pelvis (pelvis z = 0)."""
    coords: np.ndarray  # (J, 3) float

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise SkeletonError(f"Pose3D coords must be (J,3), got {self.coords.shape}")
        if not np.isfinite(self.coords).all():
            raise SkeletonError("Pose3D coords must be finite")

    def pose2d(self) -> Pose2D:
        return Pose2D.all_visible(self.coords[:, :2])


@dataclass
class BoneVectors:
    """Per-bone child-minus-parent displacements with standardization stats."""
    vectors: np.ndarray  # (17, 3)
    mean: np.ndarray = None  # (17, 3)
    std: np.ndarray = None  # (17, 3), strictly positive

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.mean is None:
            self.mean = np.zeros_like(self.vectors)
        if self.std is None:
            self.std = np.ones_like(self.vectors)
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if not np.isfinite(self.vectors).all():
            raise SkeletonError("bone vectors must be finite")
        if (self.std <= 0).any():
            raise SkeletonError("bone std entries must be strictly positive")


def bone_vectors(pose: Pose3D, chain: KinematicChain,
                 mean: np.ndarray | None = None,
                 std: np.ndarray | None = None) -> BoneVectors:
    """Child-minus-parent displacement for every bone, in bones-list order."""
    parents = np.array([p for p, _ in chain.bones])
    children = np.array([c for _, c in chain.bones])
    vecs = pose.coords[children] - pose.coords[parents]
    return BoneVectors(vecs, mean, std)


def pose_from_bones(root_position, bones: BoneVectors,
                    chain: KinematicChain) -> Pose3D:
    """Reassemble joint positions by summing bone vectors along root-to-joint paths."""
    root_position = np.asarray(root_position, dtype=np.float64)
    n = len(chain.joint_names)
    coords = np.zeros((n, 3))
    coords[chain.root] = root_position
    # bones-list order is a valid topological order (parents precede children
    # in the default chain); walk until all joints are placed to stay robust
    # to other orderings.
    placed = {chain.root}
    pending = list(range(len(chain.bones)))
    while pending:
        progressed = False
        rest = []
        for k in pending:
            p, c = chain.bones[k]
            if p in placed:
                coords[c] = coords[p] + bones.vectors[k]
                placed.add(c)
                progressed = True
            else:
                rest.append(k)
        pending = rest
        if not progressed:
            raise SkeletonError("bones list does not connect all joints to the root")
    return Pose3D(coords)


def standardize_bones(bones: BoneVectors) -> np.ndarray:
    """(vector - mean) / std elementwise; std must be strictly positive."""
    if (bones.std <= 0).any():
        raise SkeletonError("bone std entries must be strictly positive")
    return (bones.vectors - bones.mean) / bones.std


def destandardize_bones(standardized: np.ndarray, mean: np.ndarray,
                        std: np.ndarray) -> np.ndarray:
    """Inverse of standardize_bones."""
    return np.asarray(standardized) * np.asarray(std) + np.asarray(mean)


def procrustes_align(pred: Pose3D, gt: Pose3D, allow_scale: bool = True) -> Pose3D:
    """Best-fit similarity transform of pred onto gt (least squares, no reflection).

    Returns s*R*pred + t minimizing the summed squared joint distances to gt.
    Scale can be disabled to align with rotation + translation only.
    """
    x = pred.coords
    y = gt.coords
    if x.shape != y.shape:
        raise SkeletonError("poses must have matching joint counts")
    n = x.shape[0]
    mu_x = x.mean(axis=0)
    mu_y = y.mean(axis=0)
    xc = x - mu_x
    yc = y - mu_y
    var_x = (xc ** 2).sum()
    if var_x < 1e-24:
        raise AlignmentDegenerateError("all joints coincident")
    cov = yc.T @ xc / n
    u, s, vt = np.linalg.svd(cov)
    # Collinear point sets leave the rotation about the common axis free.
    if s[1] < 1e-12 * max(s[0], 1e-300):
        raise AlignmentDegenerateError("joints are collinear; rotation underdetermined")
    d = np.sign(np.linalg.det(u @ vt))
    corr = np.diag([1.0, 1.0, d])
    rot = u @ corr @ vt
    if allow_scale:
        scale = (s * np.diag(corr)).sum() * n / var_x
    else:
        scale = 1.0
    t = mu_y - scale * rot @ mu_x
    aligned = (scale * (rot @ x.T)).T + t
    return Pose3D(aligned)


def mpjpe(pred: Pose3D, gt: Pose3D, align: bool = False,
          allow_scale: bool = True) -> float:
    """Mean per-joint euclidean distance, optionally after Procrustes alignment."""
    if pred.coords.shape != gt.coords.shape:
        raise SkeletonError("poses must have matching joint counts")
    p = procrustes_align(pred, gt, allow_scale=allow_scale) if align else pred
    return float(np.linalg.norm(p.coords - gt.coords, axis=1).mean())


@dataclass
class PckhResult:
    """Per-group and total PCKh percentages with the underlying counts."""
    groups: dict  # name -> {"correct": int, "counted": int, "pct": float}
    total_correct: int
    total_counted: int

    @property
    def total(self) -> float:
        if self.total_counted == 0:
            return 0.0
        return 100.0 * self.total_correct / self.total_counted

    def row_values(self) -> dict:
        out = {name: g["pct"] for name, g in self.groups.items()}
        out["total"] = self.total
        return out


def pckh(pred: Pose2D, gt: Pose2D, head_size: float,
         threshold_ratio: float = 0.25,
         chain: KinematicChain | None = None) -> PckhResult:
    """PCKh: fraction of visible joints within threshold_ratio * head_size.

    A joint counts as correct iff its euclidean 2D error is <= the threshold.
    Joints invisible in the ground truth are excluded. Group rows cover the
    limb/head joints; the total covers every visible joint.
    """
    if head_size <= 0:
        raise SkeletonError("head_size must be positive")
    chain = chain or KinematicChain.default()
    if pred.coords.shape != gt.coords.shape:
        raise SkeletonError("poses must have matching joint counts")
    thresh = threshold_ratio * head_size
    dist = np.linalg.norm(pred.coords - gt.coords, axis=1)
    valid = gt.visibility
    correct = (dist <= thresh) & valid

    groups = {}
    for name, joints in PCKH_GROUPS.items():
        idx = [chain.index(j) for j in joints]
        counted = int(valid[idx].sum())
        ok = int(correct[idx].sum())
        pct = 100.0 * ok / counted if counted else 0.0
        groups[name] = {"correct": ok, "counted": counted, "pct": pct}
    return PckhResult(
        groups=groups,
        total_correct=int(correct.sum()),
        total_counted=int(valid.sum()),
    )


@dataclass
class AngleLimitTable:
    """Allowed joint-angle intervals (degrees), keyed by the child bone's name.

    The entry for bone pair (parent bone g->p, child bone p->c) is keyed by
    the child bone name "p:c". Intervals live in [0, 180] and describe the
    permitted flexion range; measured angles beyond 180 indicate a fold past
    straight on the hyperextension side.
    """
    limits: dict = field(default_factory=dict)  # bone name -> (lo, hi)

    def __post_init__(self):
        for name, (lo, hi) in self.limits.items():
            if not (0.0 <= lo <= hi <= 180.0):
                raise SkeletonError(f"interval for '{name}' must lie within [0, 180]")

    @classmethod
    def default(cls, chain: KinematicChain | None = None) -> "AngleLimitTable":
        """Hinge joints only: knee and elbow pairs get [30, 180].

        A straight limb measures exactly 180 and is allowed (boundary
        inclusive); any signed angle past 180 is hyperextension and
        violates. Ball joints and the spine bend on multiple axes, so a
        single planar interval would misfire there; they are unconstrained
        by default and can be added to a custom table.
        """
        chain = chain or KinematicChain.default()
        hinges = ("r_knee:r_ankle", "l_knee:l_ankle",
                  "r_elbow:r_wrist", "l_elbow:l_wrist")
        limits = {}
        for name in hinges:
            chain.bone_index(name)  # validates the pair exists
            limits[name] = (30.0, 180.0)
        return cls(limits)

    def to_json(self) -> str:
        return json.dumps({k: list(v) for k, v in self.limits.items()}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "AngleLimitTable":
        d = json.loads(text)
        return cls({k: (float(lo), float(hi)) for k, (lo, hi) in d.items()})


@dataclass
class AngleViolation:
    bone: str  # child bone name "p:c"
    angle: float  # measured angle, degrees in [0, 360)
    interval: tuple  # allowed (lo, hi)


@dataclass
class AngleCheckResult:
    violations: list
    indeterminate: list  # bone names whose pair had a zero-length bone


def _body_normal(pose: Pose3D, chain: KinematicChain) -> np.ndarray | None:
    """Pose-intrinsic frontal-plane normal; None if degenerate.

    Built from the pelvis-to-right-hip and pelvis-to-thorax directions, so it
    rotates with the pose and keeps signed joint angles invariant under
    global rotation and uniform scaling.
    """
    try:
        pelvis = pose.coords[chain.index("pelvis")]
        thorax = pose.coords[chain.index("thorax")]
        r_hip = pose.coords[chain.index("r_hip")]
    except SkeletonError:
        return None
    n = np.cross(r_hip - pelvis, thorax - pelvis)
    norm = np.linalg.norm(n)
    if norm < 1e-12:
        return None
    return n / norm


def joint_angle(pose: Pose3D, chain: KinematicChain, bone_k: int) -> float | None:
    """Flexion angle at the joint shared by bone_k and its parent bone, degrees.

    The angle is between the segment back to the grandparent joint and the
    segment out to the child joint (a straight limb measures 180). Bends on
    the natural flexion side stay within (0, 180); bends past straight on the
    far side are folded to (180, 360), so hyperextension is distinguishable
    from flexion. The side is resolved about the pose's frontal-plane normal,
    mirrored for left-side limbs so that symmetric poses measure symmetric
    angles. Out-of-plane bends, or any pose whose body normal is degenerate,
    fall back to the unsigned angle. Returns None when either bone has zero
    length.
    """
    pk = chain.parent_bone(bone_k)
    if pk is None:
        return None
    g, p = chain.bones[pk]
    _, c = chain.bones[bone_k]
    a = pose.coords[g] - pose.coords[p]
    b = pose.coords[c] - pose.coords[p]
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return None
    cross = np.cross(a, b)
    theta = math.degrees(math.atan2(np.linalg.norm(cross), float(np.dot(a, b))))
    normal = _body_normal(pose, chain)
    if normal is None:
        return theta
    if chain.joint_names[c].startswith("l_"):
        normal = -normal
    side = float(np.dot(normal, cross))
    # Strictly negative with margin: exactly straight or purely out-of-plane
    # bends keep the unsigned value.
    if side < -1e-9 * na * nb:
        theta = 360.0 - theta
    return theta


def check_angle_limits(pose: Pose3D, chain: KinematicChain,
                       limits: AngleLimitTable) -> AngleCheckResult:
    """List bone pairs whose measured joint angle falls outside its interval.

    Pairs containing a zero-length bone are reported as indeterminate, never
    as violations.
    """
    violations = []
    indeterminate = []
    for k in range(len(chain.bones)):
        name = chain.bone_name(k)
        if name not in limits.limits:
            continue
        ang = joint_angle(pose, chain, k)
        if ang is None:
            indeterminate.append(name)
            continue
        lo, hi = limits.limits[name]
        if not (lo <= ang <= hi):
            violations.append(AngleViolation(name, ang, (lo, hi)))
    return AngleCheckResult(violations, indeterminate)


def load_chain(path) -> KinematicChain:
    return KinematicChain.from_json(Path(path).read_text())


def load_limits(path) -> AngleLimitTable:
    return AngleLimitTable.from_json(Path(path).read_text())
