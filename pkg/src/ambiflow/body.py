"""Simplified 16-joint kinematic body: 6D rotations, forward kinematics,
grouped bone-length scaling, dense surface points, and the weak-perspective
to perspective camera conversion.

All geometry runs through diffcore ops, so the same code path serves plain
evaluation (no tape) and gradient-carrying training passes. Arrays are
batched over a leading row axis R.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Node

CROP_SIZE = 256

JOINT_NAMES = [
    "pelvis", "spine", "neck", "head",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
]

PARENTS = [-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 2, 10, 11, 2, 13, 14]

# elbows, wrists, knees and ankles
HIGHLY_ARTICULATED = (5, 6, 8, 9, 11, 12, 14, 15)

# rest-pose bone offsets in meters, camera convention: x right, y down, z forward
REST_OFFSETS = np.array([
    [0.00, 0.00, 0.00],    # pelvis (root)
    [0.00, -0.25, 0.00],   # spine
    [0.00, -0.25, 0.00],   # neck
    [0.00, -0.15, 0.00],   # head
    [0.10, 0.04, 0.00],    # l_hip
    [0.01, 0.38, 0.00],    # l_knee
    [0.01, 0.40, 0.00],    # l_ankle
    [-0.10, 0.04, 0.00],   # r_hip
    [-0.01, 0.38, 0.00],   # r_knee
    [-0.01, 0.40, 0.00],   # r_ankle
    [0.16, 0.05, 0.00],    # l_shoulder
    [0.27, 0.00, 0.00],    # l_elbow
    [0.25, 0.00, 0.00],    # l_wrist
    [-0.16, 0.05, 0.00],   # r_shoulder
    [-0.27, 0.00, 0.00],   # r_elbow
    [-0.25, 0.00, 0.00],   # r_wrist
])

SHAPE_GROUPS = ("torso", "arms", "legs", "head")
# group index of the bone ending at each joint (root entry unused)
GROUP_OF_JOINT = [0, 0, 0, 3, 0, 2, 2, 0, 2, 2, 1, 1, 1, 1, 1, 1]

NUM_JOINTS = 16
POSE_DIM = NUM_JOINTS * 6
DENSE_FRACTIONS = (0.2, 0.4, 0.6, 0.8)
NUM_DENSE_POINTS = NUM_JOINTS + (NUM_JOINTS - 1) * len(DENSE_FRACTIONS)

# pose parameters are offsets from the identity seed, so an all-zeros pose
# decodes to the rest skeleton
IDENTITY_SEED = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


@dataclass(frozen=True)
class KinematicTree:
    parents: tuple = tuple(PARENTS)
    offsets: np.ndarray = REST_OFFSETS
    groups: tuple = tuple(GROUP_OF_JOINT)
    highly_articulated: tuple = HIGHLY_ARTICULATED

    def __post_init__(self):
        for j, p in enumerate(self.parents):
            if p >= j:
                raise ValueError("parents must be topologically ordered")

    @property
    def num_joints(self) -> int:
        return len(self.parents)

    def rest_lengths(self) -> np.ndarray:
        return np.linalg.norm(self.offsets, axis=1)

    def to_dict(self) -> dict:
        return {
            "joint_names": JOINT_NAMES,
            "parents": list(self.parents),
            "offsets_m": self.offsets.tolist(),
            "shape_groups": list(SHAPE_GROUPS),
            "group_of_joint": list(self.groups),
            "highly_articulated": list(self.highly_articulated),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KinematicTree":
        return cls(
            parents=tuple(d["parents"]),
            offsets=np.asarray(d["offsets_m"], dtype=np.float64),
            groups=tuple(d["group_of_joint"]),
            highly_articulated=tuple(d["highly_articulated"]),
        )


DEFAULT_TREE = KinematicTree()


def _gram_schmidt(a1: Node, a2: Node) -> Node:
    """Orthonormalize two (R, 3) seed stacks into (R, 3, 3) rotation matrices."""
    n1 = np.linalg.norm(a1.data, axis=-1)
    if np.any(n1 < 1e-9):
        bad = int(np.argmin(n1))
        raise ValueError(f"degenerate 6D rotation: first seed vanishes at row {bad}")
    cos = np.abs(np.einsum("...i,...i->...", a1.data, a2.data)) / (
        n1 * np.maximum(np.linalg.norm(a2.data, axis=-1), 1e-300)
    )
    if np.any(cos > 1.0 - 1e-9):
        bad = int(np.argmax(cos))
        raise ValueError(f"degenerate 6D rotation: parallel seeds at row {bad}")
    b1 = dc.div(a1, dc.sqrt(dc.sumsq(a1, axis=-1, keepdims=True)))
    proj = dc.sum_(dc.mul(b1, a2), axis=-1, keepdims=True)
    u2 = dc.sub(a2, dc.mul(proj, b1))
    b2 = dc.div(u2, dc.sqrt(dc.sumsq(u2, axis=-1, keepdims=True)))
    b3 = dc.cross(b1, b2)
    rows = dc.reshape(dc.concat([b1, b2, b3], axis=-1), (-1, 3, 3))
    return dc.transpose_last2(rows)  # basis vectors as columns


def rot6d_to_matrix(r) -> np.ndarray:
    """Decode raw 6D seeds (..., 6) into rotation matrices (..., 3, 3)."""
    r = np.asarray(r, dtype=np.float64)
    flat = r.reshape(-1, 6)
    out = _gram_schmidt(Node(flat[:, :3]), Node(flat[:, 3:])).data
    return out.reshape(r.shape[:-1] + (3, 3))


def pose_to_seeds(theta: Node) -> Node:
    """(R, 96) pose offsets -> (R, 16, 6) raw seeds (offset + identity seed)."""
    seeds = dc.add(theta, np.tile(IDENTITY_SEED, NUM_JOINTS))
    return dc.reshape(seeds, (-1, NUM_JOINTS, 6))


def decode_pose(theta: Node) -> list[Node]:
    """(R, 96) pose offsets -> list of 16 (R, 3, 3) joint rotations."""
    seeds = pose_to_seeds(theta)
    mats = []
    for j in range(NUM_JOINTS):
        sj = dc.gather(seeds, (slice(None), j))
        a1 = dc.gather(sj, (slice(None), slice(0, 3)))
        a2 = dc.gather(sj, (slice(None), slice(3, 6)))
        try:
            mats.append(_gram_schmidt(a1, a2))
        except ValueError as err:
            raise ValueError(f"joint {j} ({JOINT_NAMES[j]}): {err}") from err
    return mats


def matrix_to_pose(rotmats: np.ndarray) -> np.ndarray:
    """(..., 16, 3, 3) rotations -> (..., 96) pose offsets (first two columns)."""
    rotmats = np.asarray(rotmats, dtype=np.float64)
    seeds = np.concatenate([rotmats[..., :, 0], rotmats[..., :, 1]], axis=-1)
    theta = seeds - IDENTITY_SEED
    return theta.reshape(rotmats.shape[:-3] + (POSE_DIM,))


def forward_kinematics(theta: Node, beta: Node, tree: KinematicTree = DEFAULT_TREE) -> Node:
    """Pelvis-rooted joint positions (R, 16, 3) in meters.

    beta holds 4 log-scales for the (torso, arms, legs, head) bone groups;
    each bone offset is rotated by its parent's global rotation.
    """
    locals_ = decode_pose(theta)
    scales = dc.exp(beta)  # (R, 4)
    rows = locals_[0].data.shape[0]
    globs: list[Node] = [locals_[0]]
    pos: list[Node] = [Node(np.zeros((rows, 3)))]
    for j in range(1, tree.num_joints):
        p = tree.parents[j]
        sc = dc.gather(scales, (slice(None), slice(tree.groups[j], tree.groups[j] + 1)))
        off = dc.mul(sc, tree.offsets[j])  # (R, 3)
        moved = dc.matmul(globs[p], dc.reshape(off, (-1, 3, 1)))
        pos.append(dc.add(pos[p], dc.reshape(moved, (-1, 3))))
        globs.append(dc.matmul(globs[p], locals_[j]))
    stacked = dc.concat([dc.reshape(p, (-1, 1, 3)) for p in pos], axis=1)
    return stacked


def dense_body_points(joints: Node, tree: KinematicTree = DEFAULT_TREE) -> Node:
    """Joints plus 4 interpolants per bone: (R, 16, 3) -> (R, 76, 3)."""
    child_idx = np.arange(1, tree.num_joints)
    parent_idx = np.asarray(tree.parents[1:])
    child = dc.gather(joints, (slice(None), child_idx))
    parent = dc.gather(joints, (slice(None), parent_idx))
    blocks = []
    for t in DENSE_FRACTIONS:
        pt = dc.add(dc.mul(parent, 1.0 - t), dc.mul(child, t))
        blocks.append(dc.reshape(pt, (-1, tree.num_joints - 1, 1, 3)))
    interp = dc.reshape(dc.concat(blocks, axis=2), (-1, (tree.num_joints - 1) * 4, 3))
    return dc.concat([joints, interp], axis=1)


@dataclass
class CameraModel:
    """Weak-perspective parameters plus the crop/bbox metadata needed to lift
    them to a perspective camera.

    s/tx/ty may be Nodes (regressed, gradient-carrying) or arrays; bbox and
    focal entries are per-row numpy constants.
    """

    s: Node
    tx: Node
    ty: Node
    bbox_cx: np.ndarray
    bbox_cy: np.ndarray
    bbox_size: np.ndarray
    focal: np.ndarray
    img_w: float = 1024.0
    img_h: float = 1024.0

    def __post_init__(self):
        self.s = dc.as_node(self.s)
        self.tx = dc.as_node(self.tx)
        self.ty = dc.as_node(self.ty)
        self.bbox_cx = np.asarray(self.bbox_cx, dtype=np.float64)
        self.bbox_cy = np.asarray(self.bbox_cy, dtype=np.float64)
        self.bbox_size = np.asarray(self.bbox_size, dtype=np.float64)
        self.focal = np.asarray(self.focal, dtype=np.float64)

    def bbox_feature(self) -> np.ndarray:
        """[c_x, c_y, b] / f, stacked along the last axis."""
        return np.stack(
            [self.bbox_cx / self.focal, self.bbox_cy / self.focal, self.bbox_size / self.focal],
            axis=-1,
        )


def weak_to_perspective(cam: CameraModel) -> tuple[Node, Node, Node]:
    """Perspective translation (tx', ty', tz') in meters from the weak camera."""
    denom = dc.mul(cam.s, cam.bbox_size)
    if np.any(denom.data < 1e-6):
        raise ValueError("degenerate weak-perspective scale: s*b below 1e-6")
    tz = dc.div(2.0 * cam.focal, denom)
    txp = dc.add(cam.tx, dc.div(2.0 * (cam.bbox_cx - cam.img_w / 2.0), denom))
    typ = dc.add(cam.ty, dc.div(2.0 * (cam.bbox_cy - cam.img_h / 2.0), denom))
    return txp, typ, tz


def project(points: Node, cam: CameraModel) -> Node:
    """Pinhole projection into 256x256 crop pixels: (R, P, 3) -> (R, P, 2).

    The crop camera has focal 256*f/b and principal point at the crop
    center; depth comes from the weak->perspective conversion.
    """
    txp, typ, tz = weak_to_perspective(cam)
    x = dc.add(dc.gather(points, (slice(None), slice(None), 0)), dc.reshape(txp, (-1, 1)))
    y = dc.add(dc.gather(points, (slice(None), slice(None), 1)), dc.reshape(typ, (-1, 1)))
    z = dc.add(dc.gather(points, (slice(None), slice(None), 2)), dc.reshape(tz, (-1, 1)))
    if np.any(z.data <= 1e-6):
        bad = np.argwhere(z.data <= 1e-6)[:8].tolist()
        raise ValueError(f"points behind camera at (row, point) indices {bad}")
    f_crop = CROP_SIZE * cam.focal / cam.bbox_size  # (R,) constant
    u = dc.add(dc.mul(dc.div(x, z), f_crop.reshape(-1, 1)), CROP_SIZE / 2.0)
    v = dc.add(dc.mul(dc.div(y, z), f_crop.reshape(-1, 1)), CROP_SIZE / 2.0)
    rows, pts = u.data.shape
    return dc.concat(
        [dc.reshape(u, (rows, pts, 1)), dc.reshape(v, (rows, pts, 1))], axis=2
    )


def normalize_crop(px: Node) -> Node:
    """Crop pixels -> [-1, 1] coordinates."""
    return dc.sub(dc.div(px, CROP_SIZE / 2.0), 1.0)
