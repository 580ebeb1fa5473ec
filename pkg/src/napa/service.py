"""HTTP backend for the annotation workflow.

Serves a task queue over annotation records, persists edits through an
append-only JSONL journal (compacted on startup), validates records with
field-path errors, checks joint-angle limits on the implied 3D pose, and can
seed per-joint depths from a trained depth net.

Records store (u, v, z_rel) per joint, so editing depths can never move the
2D projection; that invariant is structural, not checked numerically.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch
from fastapi import Body, FastAPI, HTTPException, Response
from PIL import Image

from .bonemap import BoneMapSpec, render_hard
from .data import load_manifest, scale_keypoints
from .nets import depth_forward
from .skeleton import (NUM_JOINTS, AngleLimitTable, KinematicChain, Pose2D,
                       Pose3D, SkeletonError, check_angle_limits)
from .training import nets_from_checkpoint

STATUSES = ("todo", "in_progress", "done")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


class VersionConflict(Exception):
    """Optimistic-concurrency failure; carries the current stored version."""

    def __init__(self, current: int):
        super().__init__(f"version conflict, current version is {current}")
        self.current = current


class RecordInvalid(Exception):
    """Validation failure; carries [{field, message}, ...]."""

    def __init__(self, errors: list):
        super().__init__("; ".join(f"{e['field']}: {e['message']}" for e in errors))
        self.errors = errors


def _err(field: str, message: str) -> dict:
    return {"field": field, "message": message}


@dataclass
class AnnotationRecord:
    """One image's annotation state plus optimistic-concurrency metadata."""
    image_id: str
    image_path: str
    keypoints_2d: np.ndarray  # (18, 3): u, v, visible
    depth_rel: np.ndarray  # (18,), pelvis entry 0
    head_box: tuple | None = None
    status: str = "todo"
    version: int = 1
    annotator: str | None = None
    created_at: str = ""
    updated_at: str = ""

    def __post_init__(self):
        self.keypoints_2d = np.asarray(self.keypoints_2d, dtype=np.float64)
        self.depth_rel = np.asarray(self.depth_rel, dtype=np.float64)
        if not self.created_at:
            self.created_at = _now()
        if not self.updated_at:
            self.updated_at = self.created_at

    def pose3d(self) -> Pose3D:
        coords = np.concatenate(
            [self.keypoints_2d[:, :2], self.depth_rel[:, None]], axis=1)
        return Pose3D(coords)

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "image_path": self.image_path,
            "keypoints_2d": self.keypoints_2d.tolist(),
            "depth_rel": self.depth_rel.tolist(),
            "head_box": list(self.head_box) if self.head_box else None,
            "status": self.status,
            "version": self.version,
            "annotator": self.annotator,
            "created_at": self.created_at,
            "updated_at": self.updated_at,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnnotationRecord":
        return cls(
            image_id=d["image_id"],
            image_path=d["image_path"],
            keypoints_2d=np.asarray(d["keypoints_2d"], dtype=np.float64),
            depth_rel=np.asarray(d["depth_rel"], dtype=np.float64),
            head_box=tuple(d["head_box"]) if d.get("head_box") else None,
            status=d.get("status", "todo"),
            version=int(d.get("version", 1)),
            annotator=d.get("annotator"),
            created_at=d.get("created_at", ""),
            updated_at=d.get("updated_at", ""),
        )


def _finite_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) \
        and math.isfinite(v)


def validate_structure(d: dict, chain: KinematicChain | None = None) -> list:
    """Field-path errors for shape, finiteness, and enum problems.

    Works on the raw JSON payload so errors can point at exactly the entry
    that is wrong, e.g. keypoints_2d[3][1].
    """
    chain = chain or KinematicChain.default()
    errors = []
    kp = d.get("keypoints_2d")
    if not isinstance(kp, (list, tuple)) or len(kp) != NUM_JOINTS:
        errors.append(_err("keypoints_2d",
                           f"must be a list of {NUM_JOINTS} [u, v, visible] rows"))
    else:
        for j, row in enumerate(kp):
            if not isinstance(row, (list, tuple)) or len(row) != 3:
                errors.append(_err(f"keypoints_2d[{j}]",
                                   "must be [u, v, visible]"))
                continue
            for k, v in enumerate(row):
                if not _finite_number(v):
                    errors.append(_err(f"keypoints_2d[{j}][{k}]",
                                       "must be a finite number"))
            if all(_finite_number(v) for v in row) and row[2] \
                    and (row[0] < 0 or row[1] < 0):
                errors.append(_err(f"keypoints_2d[{j}]",
                                   "visible joint must have nonnegative u, v"))

    depth = d.get("depth_rel")
    if not isinstance(depth, (list, tuple)) or len(depth) != NUM_JOINTS:
        errors.append(_err("depth_rel",
                           f"must be a list of {NUM_JOINTS} depths"))
    else:
        for j, v in enumerate(depth):
            if not _finite_number(v):
                errors.append(_err(f"depth_rel[{j}]",
                                   "must be a finite number"))
        root = chain.root
        if _finite_number(depth[root]) and abs(depth[root]) > 1e-9:
            errors.append(_err(f"depth_rel[{root}]",
                               "pelvis depth must be exactly 0"))

    status = d.get("status", "todo")
    if status not in STATUSES:
        errors.append(_err("status", f"must be one of {list(STATUSES)}"))

    box = d.get("head_box")
    if box is not None:
        if (not isinstance(box, (list, tuple)) or len(box) != 4
                or not all(_finite_number(v) for v in box)):
            errors.append(_err("head_box", "must be [x, y, w, h]"))
        elif box[2] <= 0 or box[3] <= 0:
            errors.append(_err("head_box", "w and h must be positive"))

    annot = d.get("annotator")
    if annot is not None and not isinstance(annot, str):
        errors.append(_err("annotator", "must be a string"))
    return errors


def validate_payload(d: dict, chain: KinematicChain,
                     limits: AngleLimitTable) -> list:
    """Everything validate_structure checks, plus the done-status gate:
    marking a record done requires zero joint-angle violations."""
    errors = validate_structure(d, chain)
    if errors:
        return errors
    if d.get("status") == "done":
        pose = Pose3D(np.concatenate(
            [np.asarray(d["keypoints_2d"], dtype=np.float64)[:, :2],
             np.asarray(d["depth_rel"], dtype=np.float64)[:, None]], axis=1))
        result = check_angle_limits(pose, chain, limits)
        if result.violations:
            detail = ", ".join(
                f"{v.bone} at {v.angle:.1f} deg outside "
                f"[{v.interval[0]:g}, {v.interval[1]:g}]"
                for v in result.violations)
            errors.append(_err(
                "status", f"done requires zero angle violations: {detail}"))
    return errors


def validate_record_pose(d: dict, stored: AnnotationRecord | None,
                         chain: KinematicChain,
                         limits: AngleLimitTable) -> dict:
    """Angle-limit report for an (already structurally valid) record.

    projection_ok is true by construction: depths live alongside (u, v) and
    never move them. When the payload's 2D differs from the stored record,
    changed_2d flags that the projection itself was edited.
    """
    kp = np.asarray(d["keypoints_2d"], dtype=np.float64)
    z = np.asarray(d["depth_rel"], dtype=np.float64)
    pose = Pose3D(np.concatenate([kp[:, :2], z[:, None]], axis=1))
    result = check_angle_limits(pose, chain, limits)
    changed = stored is not None and not np.array_equal(
        kp, stored.keypoints_2d)
    return {
        "projection_ok": True,
        "changed_2d": bool(changed),
        "angle_violations": [
            {"bone": v.bone, "angle": v.angle, "interval": list(v.interval)}
            for v in result.violations],
        "indeterminate": list(result.indeterminate),
    }


@dataclass
class LiftModel:
    """Loaded depth branch used to propose per-joint depths."""
    nets: dict
    bone_mean: np.ndarray
    bone_std: np.ndarray
    spec: BoneMapSpec
    chain: KinematicChain


def load_lift_model(checkpoint, spec: BoneMapSpec | None = None,
                    chain: KinematicChain | None = None) -> LiftModel:
    """Load a checkpoint for depth seeding; reject ones that cannot do it."""
    meta, nets = nets_from_checkpoint(checkpoint)
    if "depth" not in nets:
        raise SkeletonError(
            f"checkpoint {checkpoint} holds no depth net, cannot seed depths")
    if "bone_mean" not in meta or "bone_std" not in meta:
        raise SkeletonError(
            f"checkpoint {checkpoint} lacks bone statistics, cannot seed depths")
    for n in nets.values():
        n.eval()
    return LiftModel(
        nets=nets,
        bone_mean=np.asarray(meta["bone_mean"], dtype=np.float64),
        bone_std=np.asarray(meta["bone_std"], dtype=np.float64),
        spec=spec or BoneMapSpec(),
        chain=chain or KinematicChain.default(),
    )


class AnnotationStore:
    """In-memory record map backed by an append-only JSONL journal.

    The journal holds full record snapshots, one per line; the latest line
    per image_id wins. Startup replays, revalidates every surviving record
    (done-records must still pass the angle gate), and compacts the file.
    Mutations are serialized under one lock; reads are lock-free.
    """

    def __init__(self, journal_path, images_dir, *,
                 chain: KinematicChain | None = None,
                 limits: AngleLimitTable | None = None,
                 lift_model: LiftModel | None = None):
        self.journal_path = Path(journal_path)
        self.images_dir = Path(images_dir)
        self.chain = chain or KinematicChain.default()
        self.limits = limits or AngleLimitTable.default(self.chain)
        self.lift_model = lift_model
        self._lock = threading.Lock()
        self._records: dict = {}
        self._load_and_compact()

    # -- persistence ------------------------------------------------------

    def _load_and_compact(self):
        if self.journal_path.is_file():
            latest = {}
            for lineno, line in enumerate(
                    self.journal_path.read_text().splitlines(), start=1):
                if not line.strip():
                    continue
                try:
                    d = json.loads(line)
                except json.JSONDecodeError as e:
                    raise SkeletonError(
                        f"{self.journal_path}:{lineno}: malformed JSON: {e}"
                    ) from None
                latest[d["image_id"]] = d
            for image_id, d in latest.items():
                errors = validate_payload(d, self.chain, self.limits)
                if errors:
                    raise SkeletonError(
                        f"journal record {image_id} fails validation: "
                        + "; ".join(f"{e['field']}: {e['message']}"
                                    for e in errors))
                self._records[image_id] = AnnotationRecord.from_dict(d)
        self._rewrite()

    def _rewrite(self):
        self.journal_path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.journal_path.with_suffix(".tmp")
        with tmp.open("w") as f:
            for image_id in sorted(self._records):
                f.write(json.dumps(self._records[image_id].to_dict()) + "\n")
        tmp.replace(self.journal_path)

    def _append(self, record: AnnotationRecord):
        with self.journal_path.open("a") as f:
            f.write(json.dumps(record.to_dict()) + "\n")
            f.flush()

    def seed_from_manifest(self, manifest_path) -> int:
        """Create todo records for manifest samples not yet in the store."""
        added = 0
        for rec in load_manifest(manifest_path):
            if rec.image_id in self._records:
                continue
            depth = rec.depth_rel if rec.depth_rel is not None \
                else np.zeros(NUM_JOINTS)
            ann = AnnotationRecord(
                image_id=rec.image_id,
                image_path=rec.image_path,
                keypoints_2d=rec.keypoints_2d,
                depth_rel=depth,
                head_box=rec.head_box,
                status="todo",
                version=1,
            )
            with self._lock:
                self._records[ann.image_id] = ann
                self._append(ann)
            added += 1
        return added

    # -- queries ----------------------------------------------------------

    def list_ids(self, status: str | None = None) -> list:
        return sorted(i for i, r in self._records.items()
                      if status is None or r.status == status)

    def get(self, image_id: str) -> AnnotationRecord:
        return self._records[image_id]

    def next_task(self, status: str | None = None) -> AnnotationRecord | None:
        ids = self.list_ids(status)
        return self._records[ids[0]] if ids else None

    def image_file(self, record: AnnotationRecord) -> Path:
        p = Path(record.image_path)
        return p if p.is_absolute() else self.images_dir / p

    # -- mutation ---------------------------------------------------------

    def save(self, image_id: str, payload: dict, expected_version: int) -> int:
        """Validate and persist one edit; returns the new version.

        Raises KeyError on unknown ids, VersionConflict when expected_version
        is stale, RecordInvalid with field paths on a bad payload.
        """
        with self._lock:
            stored = self._records[image_id]
            if expected_version != stored.version:
                raise VersionConflict(stored.version)
            errors = validate_payload(payload, self.chain, self.limits)
            if errors:
                raise RecordInvalid(errors)
            record = AnnotationRecord(
                image_id=image_id,
                image_path=stored.image_path,
                keypoints_2d=np.asarray(payload["keypoints_2d"],
                                        dtype=np.float64),
                depth_rel=np.asarray(payload["depth_rel"], dtype=np.float64),
                head_box=tuple(payload["head_box"])
                if payload.get("head_box") else stored.head_box,
                status=payload.get("status", stored.status),
                version=stored.version + 1,
                annotator=payload.get("annotator", stored.annotator),
                created_at=stored.created_at,
                updated_at=_now(),
            )
            self._append(record)
            self._records[image_id] = record
            return record.version

    # -- model seeding ----------------------------------------------------

    def lift(self, image_id: str) -> dict:
        """Depth proposal for a record: model output, or zeros without one.

        The proposal never mutates the stored record; the pelvis entry is
        exactly 0 either way.
        """
        record = self.get(image_id)
        if self.lift_model is None:
            return {"image_id": image_id,
                    "depth_rel": [0.0] * NUM_JOINTS,
                    "source": "zeros"}
        m = self.lift_model
        size = m.nets["depth"].config.input_size
        with Image.open(self.image_file(record)) as im:
            orig = im.size
        coords = scale_keypoints(record.keypoints_2d[:, :2], orig,
                                 (size, size))
        bmap = render_hard(Pose2D.all_visible(coords), m.chain, m.spec,
                           size, size)
        bmap = bmap.astype(np.float32).transpose(2, 0, 1) / 255.0
        with torch.no_grad():
            _, pose3d = depth_forward(m.nets["depth"], bmap, coords,
                                      m.bone_mean, m.bone_std, m.chain)
        z = pose3d.coords[:, 2] * (orig[0] / float(size))
        z[m.chain.root] = 0.0
        return {"image_id": image_id,
                "depth_rel": [float(v) for v in z],
                "source": "model"}


MEDIA_TYPES = {".png": "image/png", ".jpg": "image/jpeg",
               ".jpeg": "image/jpeg"}


def create_app(store: AnnotationStore) -> FastAPI:
    """Wire an AnnotationStore into the HTTP surface."""
    app = FastAPI(title="pose annotation backend")
    app.state.store = store

    @app.get("/api/tasks")
    def tasks(status: str | None = None):
        if status is not None and status not in STATUSES:
            raise HTTPException(422, detail=[
                _err("status", f"must be one of {list(STATUSES)}")])
        ids = store.list_ids(status)
        record = store.get(ids[0]) if ids else None
        return {
            "task": record.to_dict() if record else None,
            "image": f"/api/images/{record.image_id}" if record else None,
            "matching": len(ids),
        }

    @app.get("/api/tasks/{image_id}")
    def task(image_id: str):
        try:
            record = store.get(image_id)
        except KeyError:
            raise HTTPException(404, detail=f"no task {image_id}") from None
        return {"record": record.to_dict(),
                "image": f"/api/images/{image_id}"}

    @app.put("/api/tasks/{image_id}")
    def save(image_id: str, payload: dict = Body(...)):
        missing = [k for k in ("record", "expected_version")
                   if k not in payload]
        if missing:
            raise HTTPException(422, detail=[
                _err(k, "required") for k in missing])
        expected = payload["expected_version"]
        if not isinstance(expected, int) or isinstance(expected, bool):
            raise HTTPException(422, detail=[
                _err("expected_version", "must be an integer")])
        try:
            version = store.save(image_id, payload["record"], expected)
        except KeyError:
            raise HTTPException(404, detail=f"no task {image_id}") from None
        except VersionConflict as e:
            raise HTTPException(409, detail={
                "message": "version conflict, refetch before saving",
                "current_version": e.current}) from None
        except RecordInvalid as e:
            raise HTTPException(422, detail=e.errors) from None
        return {"image_id": image_id, "version": version}

    @app.post("/api/validate")
    def validate(payload: dict = Body(...)):
        errors = validate_structure(payload, store.chain)
        if errors:
            raise HTTPException(422, detail=errors)
        stored = None
        image_id = payload.get("image_id")
        if image_id is not None and image_id in store._records:
            stored = store.get(image_id)
        return validate_record_pose(payload, stored, store.chain,
                                    store.limits)

    @app.get("/api/images/{image_id}")
    def image(image_id: str):
        try:
            record = store.get(image_id)
        except KeyError:
            raise HTTPException(404, detail=f"no task {image_id}") from None
        path = store.image_file(record)
        if not path.is_file():
            raise HTTPException(404, detail=f"image file missing: {path.name}")
        media = MEDIA_TYPES.get(path.suffix.lower(), "application/octet-stream")
        return Response(content=path.read_bytes(), media_type=media)

    @app.post("/api/lift/{image_id}")
    def lift(image_id: str):
        try:
            return store.lift(image_id)
        except KeyError:
            raise HTTPException(404, detail=f"no task {image_id}") from None
        except SkeletonError as e:
            raise HTTPException(400, detail=str(e)) from None

    return app


def build_app(manifest, journal_path=None, images_dir=None,
              checkpoint=None, spec: BoneMapSpec | None = None) -> FastAPI:
    """One-call setup: seed a store from a manifest and wrap it in the app.

    journal_path defaults to annotations.jsonl next to the manifest;
    images_dir defaults to the manifest's directory.
    """
    manifest = Path(manifest)
    journal = Path(journal_path) if journal_path \
        else manifest.parent / "annotations.jsonl"
    images = Path(images_dir) if images_dir else manifest.parent
    lift_model = load_lift_model(checkpoint, spec=spec) if checkpoint else None
    store = AnnotationStore(journal, images, lift_model=lift_model)
    store.seed_from_manifest(manifest)
    return create_app(store)
