"""Full pose-distribution model: conditional flow, pose-embedding MLP, and
the shape/camera head sharing one parameter store, plus checkpoint I/O with
topology metadata."""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import diffcore as dc
from . import heatmaps
from .body import POSE_DIM, CameraModel, Node
from .condition import ConditionLayout, ConditionModel, pose_embedding_input
from .diffcore import ParamStore
from .flow import FlowConfig, FlowModel
from .synthdata import Scene


@dataclass(frozen=True)
class ModelConfig:
    flow_layers: int = 8
    flow_hidden: int = 128
    alpha: float = 2.0
    affine: bool = True
    cond_hidden: int = 64
    use_pose2d: bool = True
    use_bbox: bool = True
    init_seed: int = 0

    def flow_config(self) -> FlowConfig:
        return FlowConfig(
            dim=POSE_DIM, cond_dim=ConditionLayout().total,
            n_layers=self.flow_layers, hidden=self.flow_hidden,
            alpha=self.alpha, affine=self.affine,
        )

    def to_dict(self) -> dict:
        return asdict(self)


class PoseDistributionModel:
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        self.cfg = cfg
        self.store = ParamStore()
        rng = np.random.default_rng(cfg.init_seed)
        self.flow = FlowModel(cfg.flow_config(), store=self.store, rng=rng)
        self.condition = ConditionModel(self.store, rng, hidden=cfg.cond_hidden)

    # -- batch assembly ---------------------------------------------------

    def condition_inputs(self, scenes: list[Scene]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stack per-scene condition raw inputs: ctx, embed-MLP input, c_B."""
        ctx = np.stack([sc.ctx for sc in scenes])
        pose_in = []
        bbox = []
        for sc in scenes:
            kps, conf, valid = heatmaps.argmax_pose(sc.heatmap)
            pose_in.append(pose_embedding_input(kps, conf, valid))
            bbox.append(np.array([sc.bbox_cx, sc.bbox_cy, sc.bbox_size]) / sc.focal)
        return ctx, np.stack(pose_in), np.stack(bbox)

    def build_conditions(self, scenes: list[Scene]) -> Node:
        ctx, pose_in, bbox = self.condition_inputs(scenes)
        return self.condition.build_condition(
            ctx, pose_in, bbox,
            use_pose2d=self.cfg.use_pose2d, use_bbox=self.cfg.use_bbox,
        )

    def regress_camera(self, cond: Node, scenes: list[Scene]) -> tuple[Node, CameraModel]:
        """Shape + weak camera from the condition, lifted onto the scenes'
        bbox metadata. Returns (beta, camera)."""
        beta, s, tx, ty = self.condition.regress_shape_camera(cond)
        cam = CameraModel(
            s=s, tx=tx, ty=ty,
            bbox_cx=np.array([sc.bbox_cx for sc in scenes]),
            bbox_cy=np.array([sc.bbox_cy for sc in scenes]),
            bbox_size=np.array([sc.bbox_size for sc in scenes]),
            focal=np.array([sc.focal for sc in scenes]),
            img_w=scenes[0].img_w, img_h=scenes[0].img_h,
        )
        return beta, cam

    def repeat_camera(self, cam: CameraModel, n: int) -> CameraModel:
        """Per-scene camera rows repeated for n hypotheses per scene."""
        return CameraModel(
            s=dc.repeat_rows(cam.s, n), tx=dc.repeat_rows(cam.tx, n), ty=dc.repeat_rows(cam.ty, n),
            bbox_cx=np.repeat(cam.bbox_cx, n), bbox_cy=np.repeat(cam.bbox_cy, n),
            bbox_size=np.repeat(cam.bbox_size, n), focal=np.repeat(cam.focal, n),
            img_w=cam.img_w, img_h=cam.img_h,
        )

    # -- persistence --------------------------------------------------------

    def metadata(self) -> dict:
        return {
            "model": self.cfg.to_dict(),
            "flow": self.flow.cfg.to_dict(),
            "condition_layout": ConditionLayout().to_dict(),
            "store_version": self.store.version,
        }

    def save(self, path: str) -> None:
        dc.save_checkpoint(path, self.store, metadata=self.metadata())

    @classmethod
    def load(cls, path: str) -> "PoseDistributionModel":
        state, meta = dc.load_checkpoint(path)
        if "model" not in meta:
            raise ValueError(f"checkpoint missing model metadata: {path}")
        model = cls(ModelConfig(**meta["model"]))
        layout = meta.get("condition_layout", {})
        if layout and layout != ConditionLayout().to_dict():
            raise ValueError(f"condition layout mismatch in {path}: {layout}")
        model.store.load_state_dict(state)
        model.store.version = int(meta.get("store_version", 0))
        return model
