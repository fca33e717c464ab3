"""Deterministic synthetic scene generator: ground-truth poses and cameras,
multimodal heatmaps with controlled ambiguity, and capsule-silhouette person
masks. Replaces real datasets at desk scale.

Occlusion comes in two flavors: object rectangles (carved out of the mask,
flagged so the mask loss skips them) and a second person rendered in front
(mask stays complete via the union protocol).
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import body, heatmaps, masks
from .body import CROP_SIZE, DEFAULT_TREE, NUM_JOINTS, POSE_DIM, Node
from .condition import CTX_DIM
from .masks import PersonMask

DATASET_MAGIC = b"AFDS"
DATASET_VERSION = 1

# per-joint rotation prior stds (radians); pelvis handled by the global prior
JOINT_ANGLE_STD = np.array([
    0.0, 0.10, 0.10, 0.15,
    0.30, 0.45, 0.25,
    0.30, 0.45, 0.25,
    0.35, 0.50, 0.30,
    0.35, 0.50, 0.30,
])

# capsule radius (meters) of the bone ending at each joint
BONE_RADIUS_M = np.array([
    0.0, 0.13, 0.12, 0.11,
    0.11, 0.07, 0.055,
    0.11, 0.07, 0.055,
    0.07, 0.05, 0.045,
    0.07, 0.05, 0.045,
])


@dataclass(frozen=True)
class AmbiguityConfig:
    occlusion_prob: float = 0.5
    person_occluder_frac: float = 0.55  # of occluded scenes; rest get object rects
    truncation_prob: float = 0.10
    heatmap_noise: float = 0.02
    mask_unavailable_frac: float = 0.20
    extra_person_prob: float = 0.15  # benign second mask for the union protocol

    def __post_init__(self):
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ValueError("occlusion_prob must be in [0, 1]")
        if self.heatmap_noise < 0.0:
            raise ValueError("heatmap_noise must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Scene:
    seed: int
    theta: np.ndarray          # (96,) gt pose offsets
    beta: np.ndarray           # (4,) gt log bone scales
    ctx: np.ndarray            # (16,) synthetic context features
    cam_s: float
    cam_tx: float
    cam_ty: float
    bbox_cx: float
    bbox_cy: float
    bbox_size: float
    focal: float
    img_w: float
    img_h: float
    gt2d: np.ndarray           # (16, 2) crop px
    heatmap: np.ndarray        # (16, 64, 48) f32
    occluders: np.ndarray      # (n, 4) object rects (x0, y0, w, h) crop px
    mask_available: bool
    object_occluded: bool
    person_occluded: bool
    mask: PersonMask | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def camera(self) -> body.CameraModel:
        one = np.ones(1)
        return body.CameraModel(
            s=Node(self.cam_s * one), tx=Node(self.cam_tx * one), ty=Node(self.cam_ty * one),
            bbox_cx=self.bbox_cx * one, bbox_cy=self.bbox_cy * one,
            bbox_size=self.bbox_size * one, focal=self.focal * one,
            img_w=self.img_w, img_h=self.img_h,
        )

    def joints3d(self) -> np.ndarray:
        if "j3d" not in self._cache:
            j = body.forward_kinematics(Node(self.theta[None]), Node(self.beta[None]))
            self._cache["j3d"] = j.data[0]
        return self._cache["j3d"]

    def dense3d(self) -> np.ndarray:
        j = body.forward_kinematics(Node(self.theta[None]), Node(self.beta[None]))
        return body.dense_body_points(j).data[0]

    def joint_status(self) -> heatmaps.JointStatus:
        if "status" not in self._cache:
            self._cache["status"] = heatmaps.classify_joints(self.heatmap, self.gt2d)
        return self._cache["status"]

    def distance_field(self) -> masks.DistanceField:
        if "field" not in self._cache:
            if self.mask is None:
                raise ValueError("scene has no mask")
            self._cache["field"] = masks.distance_transform(self.mask)
        return self._cache["field"]


def _axis_angle_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    k = np.array([
        [0, -axis[2], axis[1]],
        [axis[2], 0, -axis[0]],
        [-axis[1], axis[0], 0],
    ])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def _sample_pose(rng: np.random.Generator) -> np.ndarray:
    """Smooth prior over joint rotations; returns a (96,) pose offset vector."""
    mats = np.zeros((NUM_JOINTS, 3, 3))
    yaw = rng.uniform(-0.7, 0.7)
    pitch = rng.normal() * 0.10
    roll = rng.normal() * 0.08
    ry = _axis_angle_matrix(np.array([0.0, 1.0, 0.0]), yaw)
    rx = _axis_angle_matrix(np.array([1.0, 0.0, 0.0]), pitch)
    rz = _axis_angle_matrix(np.array([0.0, 0.0, 1.0]), roll)
    mats[0] = rz @ ry @ rx
    for j in range(1, NUM_JOINTS):
        axis = rng.normal(size=3)
        angle = rng.normal() * JOINT_ANGLE_STD[j]
        mats[j] = _axis_angle_matrix(axis, angle)
    return body.matrix_to_pose(mats[None])[0]


def _project_np(points3d: np.ndarray, cam: body.CameraModel) -> np.ndarray:
    return body.project(Node(points3d[None]), cam).data[0]


def _silhouette(joints2d: np.ndarray, radius_scale: float) -> np.ndarray:
    tree = DEFAULT_TREE
    segs = np.stack(
        [np.stack([joints2d[tree.parents[j]], joints2d[j]]) for j in range(1, NUM_JOINTS)]
    )
    # +1.5 px so floored-pixel containment holds on the capsule boundary
    radii = BONE_RADIUS_M[1:] * 128.0 * radius_scale + 1.5
    return masks.rasterize_capsules(segs, radii)


def _render_joint_heatmap(grid, center, rng, kind):
    """kind: visible | occluded_bimodal | occluded_diffuse | truncated."""
    if kind == "visible":
        amp = rng.uniform(0.55, 0.72) if rng.random() < 0.15 else rng.uniform(0.85, 0.98)
        heatmaps.render_gaussian(center, 2.0, amp, grid)
    elif kind == "occluded_bimodal":
        sigma = rng.uniform(2.0, 3.5)
        a1 = rng.uniform(0.25, 0.45)
        a2 = rng.uniform(0.25, 0.45)
        direction = rng.normal(size=2)
        direction /= np.linalg.norm(direction)
        alt = np.clip(center + direction * rng.uniform(28.0, 60.0), 10.0, CROP_SIZE - 10.0)
        heatmaps.render_gaussian(center, sigma, a1, grid)
        heatmaps.render_gaussian(alt, sigma, a2, grid)
        # overlapping modes may stack above the intended peak; keep the joint
        # below the visibility threshold
        peak = grid.max()
        cap = max(a1, a2)
        if peak > cap:
            grid *= cap / peak
    elif kind == "occluded_diffuse":
        heatmaps.render_gaussian(center, rng.uniform(4.0, 7.0), rng.uniform(0.15, 0.4), grid)
    elif kind == "truncated":
        pos = np.clip(center, 8.0, CROP_SIZE - 8.0)
        heatmaps.render_gaussian(pos, rng.uniform(5.0, 8.0), rng.uniform(0.08, 0.25), grid)
    else:
        raise ValueError(kind)


def generate_scene(seed: int, config: AmbiguityConfig = AmbiguityConfig()) -> Scene:
    rng = np.random.default_rng(seed)
    tree = DEFAULT_TREE

    beta = np.clip(rng.normal(size=4) * 0.12, -0.3, 0.3)
    theta = _sample_pose(rng)
    joints = body.forward_kinematics(Node(theta[None]), Node(beta[None])).data[0]

    # camera: size the bbox from the 3D extent so the person fills the crop
    focal = rng.uniform(900.0, 1300.0)
    img_w = img_h = 1024.0
    span = max(float(np.ptp(joints[:, 0])), float(np.ptp(joints[:, 1])), 0.8)
    depth = rng.uniform(4.0, 7.0)
    margin = rng.uniform(1.3, 1.6)
    bbox_size = margin * focal * span / depth
    bbox_cx = rng.uniform(362.0, 662.0)
    bbox_cy = rng.uniform(362.0, 662.0)
    cam_s = 2.0 * focal / (bbox_size * depth)

    centroid = joints.mean(axis=0)
    truncated = rng.random() < config.truncation_prob
    jitter_px = rng.uniform(-15.0, 15.0, size=2)
    if truncated:
        jitter_px = rng.choice([-1.0, 1.0], size=2) * rng.uniform(60.0, 110.0, size=2)
    cam_tx = -centroid[0] + jitter_px[0] / (128.0 * cam_s)
    cam_ty = -centroid[1] + jitter_px[1] / (128.0 * cam_s)

    cam = body.CameraModel(
        s=Node(np.array([cam_s])), tx=Node(np.array([cam_tx])), ty=Node(np.array([cam_ty])),
        bbox_cx=np.array([bbox_cx]), bbox_cy=np.array([bbox_cy]),
        bbox_size=np.array([bbox_size]), focal=np.array([focal]),
        img_w=img_w, img_h=img_h,
    )
    gt2d = _project_np(joints, cam)

    # occlusion setup
    occluded = np.zeros(NUM_JOINTS, dtype=bool)
    occluders = np.zeros((0, 4))
    person_sil = None
    mode = "none"
    if rng.random() < config.occlusion_prob:
        mode = "person" if rng.random() < config.person_occluder_frac else "object"
        in_crop = (
            (gt2d[:, 0] >= 0) & (gt2d[:, 0] < CROP_SIZE)
            & (gt2d[:, 1] >= 0) & (gt2d[:, 1] < CROP_SIZE)
        )
        candidates = [j for j in tree.highly_articulated if in_crop[j]]
        if candidates:
            target = int(rng.choice(candidates))
            if mode == "object":
                w, h = rng.uniform(55.0, 110.0, size=2)
                cx, cy = gt2d[target] + rng.uniform(-12.0, 12.0, size=2)
                rect = np.array([cx - w / 2.0, cy - h / 2.0, w, h])
                occluders = rect[None]
                inside_rect = (
                    (gt2d[:, 0] >= rect[0]) & (gt2d[:, 0] <= rect[0] + rect[2])
                    & (gt2d[:, 1] >= rect[1]) & (gt2d[:, 1] <= rect[1] + rect[3])
                )
                occluded = inside_rect & in_crop
            else:
                # second person in front of the target, pelvis near the target joint
                theta2 = _sample_pose(rng)
                beta2 = np.clip(rng.normal(size=4) * 0.12, -0.3, 0.3)
                joints2 = body.forward_kinematics(Node(theta2[None]), Node(beta2[None])).data[0]
                depth2 = depth * rng.uniform(0.75, 0.95)
                s2 = 2.0 * focal / (bbox_size * depth2)
                p_star = gt2d[target] + rng.uniform(-10.0, 10.0, size=2)
                off = 2.0 * np.array([bbox_cx - img_w / 2.0, bbox_cy - img_h / 2.0]) / (s2 * bbox_size)
                t2 = (p_star - 128.0) / (128.0 * s2) - off
                cam2 = body.CameraModel(
                    s=Node(np.array([s2])), tx=Node(np.array([t2[0]])), ty=Node(np.array([t2[1]])),
                    bbox_cx=np.array([bbox_cx]), bbox_cy=np.array([bbox_cy]),
                    bbox_size=np.array([bbox_size]), focal=np.array([focal]),
                    img_w=img_w, img_h=img_h,
                )
                joints2_2d = _project_np(joints2, cam2)
                person_sil = _silhouette(joints2_2d, s2)
                occluded = masks.inside(gt2d, PersonMask(person_sil)) & in_crop

    # heatmaps
    hm = np.zeros((NUM_JOINTS, heatmaps.GRID_H, heatmaps.GRID_W))
    in_crop = (
        (gt2d[:, 0] >= 0) & (gt2d[:, 0] < CROP_SIZE)
        & (gt2d[:, 1] >= 0) & (gt2d[:, 1] < CROP_SIZE)
    )
    for j in range(NUM_JOINTS):
        if not in_crop[j]:
            kind = "truncated"
        elif occluded[j]:
            kind = "occluded_bimodal" if j in tree.highly_articulated else "occluded_diffuse"
        else:
            kind = "visible"
        _render_joint_heatmap(hm[j], gt2d[j], rng, kind)
    if config.heatmap_noise > 0.0:
        hm += rng.random(hm.shape) * config.heatmap_noise
    hm = np.clip(hm, 0.0, 1.0).astype(np.float32)

    # mask assembly: silhouettes union'ed, object occluders carved out
    sil = _silhouette(gt2d, cam_s)
    parts = [PersonMask(sil)]
    if person_sil is not None:
        parts.append(PersonMask(person_sil))
    if rng.random() < config.extra_person_prob:
        shift = rng.choice([-1.0, 1.0]) * rng.uniform(70.0, 130.0)
        extra2d = gt2d + np.array([shift, rng.uniform(-20.0, 20.0)])
        parts.append(PersonMask(_silhouette(extra2d, cam_s * rng.uniform(0.8, 1.1))))
    mask = masks.union_masks(parts) if len(parts) > 1 else parts[0]
    grid = mask.grid.copy()
    for rect in occluders:
        # carve interior pixels only, so points outside the closed rect never
        # land on a carved pixel after flooring
        x0 = max(int(np.ceil(rect[0])), 0)
        y0 = max(int(np.ceil(rect[1])), 0)
        x1 = min(int(np.floor(rect[0] + rect[2])), CROP_SIZE)
        y1 = min(int(np.floor(rect[1] + rect[3])), CROP_SIZE)
        grid[y0:y1, x0:x1] = False
    mask = PersonMask(grid, provenance=mask.provenance)

    dense2d = _project_np(
        body.dense_body_points(body.forward_kinematics(Node(theta[None]), Node(beta[None]))).data[0],
        cam,
    )
    object_occluded = masks.detect_object_occlusion(dense2d, mask) if grid.any() else True
    mask.object_occluded = object_occluded
    mask_available = rng.random() >= config.mask_unavailable_frac

    # context features: what a backbone would plausibly expose about the scene
    ctx = np.zeros(CTX_DIM)
    if len(occluders):
        ctx[0:4] = occluders[0] / CROP_SIZE
        ctx[8] = 1.0
    if person_sil is not None:
        ys, xs = np.nonzero(person_sil)
        if len(xs):
            ctx[4:8] = np.array([xs.min(), ys.min(), np.ptp(xs), np.ptp(ys)]) / CROP_SIZE
        ctx[9] = 1.0
    ctx[10:14] = beta + rng.normal(size=4) * 0.02
    ctx[14:16] = rng.normal(size=2)

    return Scene(
        seed=seed, theta=theta, beta=beta, ctx=ctx,
        cam_s=cam_s, cam_tx=cam_tx, cam_ty=cam_ty,
        bbox_cx=bbox_cx, bbox_cy=bbox_cy, bbox_size=bbox_size, focal=focal,
        img_w=img_w, img_h=img_h,
        gt2d=gt2d, heatmap=hm, occluders=occluders,
        mask_available=mask_available, object_occluded=object_occluded,
        person_occluded=mode == "person",
        mask=mask if mask_available else None,
    )


# -- serialization -------------------------------------------------------------

def _encode_mask_rle(grid: np.ndarray) -> bytes:
    out = bytearray()
    for row in grid:
        edges = np.flatnonzero(np.diff(np.concatenate([[0], row.view(np.int8), [0]])))
        starts = edges[0::2]
        ends = edges[1::2]
        out += struct.pack("<H", len(starts))
        for s, e in zip(starts, ends):
            out += struct.pack("<HH", s, e - s)
    return bytes(out)


def _decode_mask_rle(buf: bytes, off: int) -> tuple[np.ndarray, int]:
    grid = np.zeros((CROP_SIZE, CROP_SIZE), dtype=bool)
    for y in range(CROP_SIZE):
        (n_runs,) = struct.unpack_from("<H", buf, off)
        off += 2
        for _ in range(n_runs):
            s, ln = struct.unpack_from("<HH", buf, off)
            off += 4
            grid[y, s:s + ln] = True
    return grid, off


def _encode_scene(sc: Scene) -> bytes:
    out = bytearray()
    flags = (
        (1 if sc.mask_available else 0)
        | (2 if sc.object_occluded else 0)
        | (4 if sc.person_occluded else 0)
    )
    out += struct.pack("<QBB", sc.seed, flags, len(sc.occluders))
    for arr in (sc.theta, sc.beta, sc.ctx):
        out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    cam = np.array([sc.cam_s, sc.cam_tx, sc.cam_ty, sc.bbox_cx, sc.bbox_cy,
                    sc.bbox_size, sc.focal, sc.img_w, sc.img_h])
    out += cam.astype("<f8").tobytes()
    out += np.ascontiguousarray(sc.gt2d, dtype="<f8").tobytes()
    out += np.ascontiguousarray(sc.occluders, dtype="<f8").tobytes()
    out += np.ascontiguousarray(sc.heatmap, dtype="<f4").tobytes()
    if sc.mask_available:
        out += _encode_mask_rle(sc.mask.grid)
    return bytes(out)


def _decode_scene(buf: bytes, off: int) -> tuple[Scene, int]:
    seed, flags, n_occ = struct.unpack_from("<QBB", buf, off)
    off += 10

    def read_f8(count, shape=None):
        nonlocal off
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=off).astype(np.float64)
        off += 8 * count
        return arr.reshape(shape) if shape else arr

    theta = read_f8(POSE_DIM)
    beta = read_f8(4)
    ctx = read_f8(CTX_DIM)
    cam = read_f8(9)
    gt2d = read_f8(NUM_JOINTS * 2, (NUM_JOINTS, 2))
    occluders = read_f8(n_occ * 4, (n_occ, 4)) if n_occ else np.zeros((0, 4))
    hm_count = NUM_JOINTS * heatmaps.GRID_H * heatmaps.GRID_W
    hm = np.frombuffer(buf, dtype="<f4", count=hm_count, offset=off).astype(np.float32)
    hm = hm.reshape(NUM_JOINTS, heatmaps.GRID_H, heatmaps.GRID_W)
    off += 4 * hm_count
    mask_available = bool(flags & 1)
    mask = None
    if mask_available:
        grid, off = _decode_mask_rle(buf, off)
        mask = PersonMask(grid, provenance="union", object_occluded=bool(flags & 2))
    return Scene(
        seed=seed, theta=theta, beta=beta, ctx=ctx,
        cam_s=cam[0], cam_tx=cam[1], cam_ty=cam[2],
        bbox_cx=cam[3], bbox_cy=cam[4], bbox_size=cam[5], focal=cam[6],
        img_w=cam[7], img_h=cam[8],
        gt2d=gt2d, heatmap=hm, occluders=occluders,
        mask_available=mask_available, object_occluded=bool(flags & 2),
        person_occluded=bool(flags & 4), mask=mask,
    ), off


def build_manifest(n_scenes: int, seed: int, config: AmbiguityConfig) -> dict:
    return {
        "format_version": DATASET_VERSION,
        "n_scenes": n_scenes,
        "base_seed": seed,
        "scene_seeds": f"base_seed + i for i in range({n_scenes})",
        "ambiguity": config.to_dict(),
        "skeleton": DEFAULT_TREE.to_dict(),
        "heatmap": {
            "grid_w": heatmaps.GRID_W,
            "grid_h": heatmaps.GRID_H,
            "dtype": "f4",
            "joint_order": body.JOINT_NAMES,
        },
        "crop_size": CROP_SIZE,
    }


def generate_dataset(n_scenes: int, seed: int, path: str,
                     config: AmbiguityConfig = AmbiguityConfig()) -> str:
    """Write n scenes (seeds seed+i) to a single binary file; returns the
    sha256 content digest."""
    manifest = json.dumps(build_manifest(n_scenes, seed, config), sort_keys=True).encode()
    buf = bytearray()
    buf += DATASET_MAGIC
    buf += struct.pack("<I", DATASET_VERSION)
    buf += struct.pack("<I", len(manifest))
    buf += manifest
    buf += struct.pack("<I", n_scenes)
    for i in range(n_scenes):
        rec = _encode_scene(generate_scene(seed + i, config))
        buf += struct.pack("<I", len(rec))
        buf += rec
    blob = bytes(buf)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
    return hashlib.sha256(blob).hexdigest()


def write_scenes(scenes: list[Scene], manifest: dict, path: str) -> str:
    manifest_b = json.dumps(manifest, sort_keys=True).encode()
    buf = bytearray()
    buf += DATASET_MAGIC
    buf += struct.pack("<I", DATASET_VERSION)
    buf += struct.pack("<I", len(manifest_b))
    buf += manifest_b
    buf += struct.pack("<I", len(scenes))
    for sc in scenes:
        rec = _encode_scene(sc)
        buf += struct.pack("<I", len(rec))
        buf += rec
    blob = bytes(buf)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
    return hashlib.sha256(blob).hexdigest()


def load_dataset(path: str) -> tuple[list[Scene], dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != DATASET_MAGIC:
        raise ValueError(f"not an ambiflow dataset: {path}")
    off = 4
    (version,) = struct.unpack_from("<I", buf, off)
    off += 4
    if version != DATASET_VERSION:
        raise ValueError(f"unsupported dataset version {version}")
    (mlen,) = struct.unpack_from("<I", buf, off)
    off += 4
    manifest = json.loads(buf[off:off + mlen].decode())
    off += mlen
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    scenes = []
    for _ in range(n):
        (rec_len,) = struct.unpack_from("<I", buf, off)
        off += 4
        sc, end = _decode_scene(buf, off)
        if end - off != rec_len:
            raise ValueError("corrupt dataset record")
        off = end
        scenes.append(sc)
    if manifest.get("n_scenes") != len(scenes):
        raise ValueError("manifest scene count does not match records")
    return scenes, manifest
