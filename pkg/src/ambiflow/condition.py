"""Flow condition assembly c = [c_ctx, c_P, c_B] plus the deterministic
shape/camera regression head.

c_ctx is a 16-dim synthetic scene descriptor standing in for a frozen image
backbone feature (720-dim in the full-scale setting); c_P embeds the
highest-likelihood 2D pose with its confidences (256-dim at full scale);
c_B is the bbox feature [c_x, c_y, b] / f.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Node, ParamStore
from .body import NUM_JOINTS, CROP_SIZE

CTX_DIM = 16
POSE_EMBED_DIM = 32
BBOX_DIM = 3
COND_DIM = CTX_DIM + POSE_EMBED_DIM + BBOX_DIM

POSE_INPUT_DIM = NUM_JOINTS * 3  # (x, y) normalized + confidence per joint

# softplus(raw + bias) == 1 at raw == 0, so the zero-initialized head starts
# at a unit weak-perspective scale
CAMERA_SCALE_BIAS = float(np.log(np.expm1(1.0)))

# scenes where the detector pose disagrees with the ground truth by more
# than this mean per-joint distance (crop px) are dropped from training
DETECTOR_AGREEMENT_PX = 30.0


def pose_embedding_input(kp_px: np.ndarray, conf: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Pack argmax keypoints + confidences into the embed-MLP input layout:
    per joint (x, y) in [-1, 1] and the confidence; invalid joints zeroed."""
    kp = np.asarray(kp_px, dtype=np.float64) / (CROP_SIZE / 2.0) - 1.0
    kp = np.where(valid[:, None], kp, 0.0)
    out = np.concatenate([kp, np.asarray(conf, dtype=np.float64)[:, None]], axis=1)
    return out.reshape(-1)


class ConditionModel:
    """Embedding MLP for the 2D pose plus the shape/camera head, sharing one
    parameter store with the flow."""

    def __init__(self, store: ParamStore, rng: np.random.Generator,
                 hidden: int = 64):
        self.embed_mlp = dc.init_mlp(
            store, "embed", [POSE_INPUT_DIM, hidden, POSE_EMBED_DIM], rng, zero_last=True
        )
        self.head_mlp = dc.init_mlp(
            store, "head", [COND_DIM, hidden, hidden, 7], rng, zero_last=True
        )

    def build_condition(self, ctx: np.ndarray, pose_input: np.ndarray,
                        bbox_feature: np.ndarray,
                        use_pose2d: bool = True, use_bbox: bool = True) -> Node:
        """Deterministic condition (B, 51). The use_* switches zero out the
        corresponding block for the condition-ablation presets."""
        ctx = np.atleast_2d(np.asarray(ctx, dtype=np.float64))
        pose_input = np.atleast_2d(np.asarray(pose_input, dtype=np.float64))
        bbox_feature = np.atleast_2d(np.asarray(bbox_feature, dtype=np.float64))
        if not use_pose2d:
            pose_input = np.zeros_like(pose_input)
        c_p = dc.mlp_forward(Node(pose_input), self.embed_mlp)
        if not use_pose2d:
            c_p = dc.mul(c_p, 0.0)
        if not use_bbox:
            bbox_feature = np.zeros_like(bbox_feature)
        return dc.concat([Node(ctx), c_p, Node(bbox_feature)], axis=1)

    def regress_shape_camera(self, cond: Node) -> tuple[Node, Node, Node, Node]:
        """One differentiable pass: (beta (B, 4), s (B,), tx (B,), ty (B,)),
        with s mapped through a smooth positive transform."""
        out = dc.mlp_forward(cond, self.head_mlp)
        beta = dc.gather(out, (slice(None), slice(0, 4)))
        raw_s = dc.gather(out, (slice(None), 4))
        s = dc.softplus(dc.add(raw_s, CAMERA_SCALE_BIAS))
        tx = dc.gather(out, (slice(None), 5))
        ty = dc.gather(out, (slice(None), 6))
        return beta, s, tx, ty


def detector_agreement_px(gt2d: np.ndarray, kp_px: np.ndarray, valid: np.ndarray) -> float:
    """Mean distance between ground-truth 2D joints and the detector argmax
    pose, over joints with a valid argmax."""
    if not valid.any():
        return float("inf")
    d = np.linalg.norm(np.asarray(gt2d) - np.asarray(kp_px), axis=1)
    return float(d[valid].mean())


@dataclass(frozen=True)
class ConditionLayout:
    """Recorded in checkpoint metadata so loads can validate shapes."""

    ctx: int = CTX_DIM
    pose_embed: int = POSE_EMBED_DIM
    bbox: int = BBOX_DIM

    @property
    def total(self) -> int:
        return self.ctx + self.pose_embed + self.bbox

    def to_dict(self) -> dict:
        return {"ctx": self.ctx, "pose_embed": self.pose_embed, "bbox": self.bbox}
