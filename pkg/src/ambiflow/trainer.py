"""Optimization loop: Adam with decoupled weight decay, deterministic batch
assembly, per-term loss logging, checkpointing, and the named ablation
presets (successive-component lattice plus the supervision variants)."""
from __future__ import annotations

import csv
import json
import logging
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import body, diffcore as dc, heatmaps, losses
from .body import Node
from .condition import DETECTOR_AGREEMENT_PX, detector_agreement_px
from .diffcore import ParamStore
from .losses import LossWeights, TargetSource
from .model import ModelConfig, PoseDistributionModel
from .synthdata import Scene

log = logging.getLogger("ambiflow.trainer")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 64
    iterations: int = 10_000
    n_mmd_samples: int = 25
    use_mmd: bool = True
    use_mask: bool = True
    l2d_variant: str = "mode_only"  # mode_only | all | visible
    l2d_sample_weight: float = 0.0
    seed: int = 0
    checkpoint_every: int = 0  # 0: checkpoint only at the end
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.iterations < 1:
            raise ValueError("learning_rate, batch_size and iterations must be positive")
        if self.l2d_variant not in ("mode_only", "all", "visible"):
            raise ValueError(f"unknown l2d_variant: {self.l2d_variant}")
        if self.use_mmd and self.n_mmd_samples < 2:
            raise ValueError("MMD needs at least 2 samples")

    def to_dict(self) -> dict:
        d = asdict(self)
        return d


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    weights = LossWeights(**d.pop("weights", {}))
    model = ModelConfig(**d.pop("model", {}))
    return TrainConfig(weights=weights, model=model, **d)


# every Table 3 / Table S1 / Table S2 / Fig. S2 row as a named preset,
# relative to the desk-scale defaults
PRESETS: dict[str, dict] = {
    "t3_base": {"model": {"affine": False, "use_bbox": False, "use_pose2d": False},
                "use_mmd": False, "use_mask": False},
    "t3_bbox": {"model": {"affine": False, "use_bbox": True, "use_pose2d": False},
                "use_mmd": False, "use_mask": False},
    "t3_pose2d": {"model": {"affine": False, "use_bbox": True, "use_pose2d": True},
                  "use_mmd": False, "use_mask": False},
    "t3_realnvp": {"use_mmd": False, "use_mask": False},
    "t3_mmd": {"use_mmd": True, "use_mask": False},
    "t3_full": {"use_mmd": True, "use_mask": True},
    "s2_no_supervision": {"use_mmd": False, "use_mask": False},
    "s2_l2d_all_1e-3": {"use_mmd": False, "use_mask": False,
                        "l2d_variant": "all", "l2d_sample_weight": 1e-3},
    "s2_l2d_all_5e-3": {"use_mmd": False, "use_mask": False,
                        "l2d_variant": "all", "l2d_sample_weight": 5e-3},
    "s2_l2d_all_1e-2": {"use_mmd": False, "use_mask": False,
                        "l2d_variant": "all", "l2d_sample_weight": 1e-2},
    "s2_l2d_vis_1e-3": {"use_mmd": False, "use_mask": False,
                        "l2d_variant": "visible", "l2d_sample_weight": 1e-3},
    "s2_l2d_vis_5e-3": {"use_mmd": False, "use_mask": False,
                        "l2d_variant": "visible", "l2d_sample_weight": 5e-3},
    "s2_l2d_vis_1e-2": {"use_mmd": False, "use_mask": False,
                        "l2d_variant": "visible", "l2d_sample_weight": 1e-2},
    "s2_mmd": {"use_mmd": True, "use_mask": False},
    "figs2_n2": {"use_mmd": True, "use_mask": False, "n_mmd_samples": 2},
    "figs2_n25": {"use_mmd": True, "use_mask": False, "n_mmd_samples": 25},
    # full-scale reference values from the original setup; not a desk-scale run
    "paper_scale": {"iterations": 400_000, "batch_size": 64,
                    "model": {"flow_hidden": 1024}},
}

TABLE3_ORDER = ["t3_base", "t3_bbox", "t3_pose2d", "t3_realnvp", "t3_mmd", "t3_full"]


def _deep_update(base: dict, extra: dict) -> dict:
    out = dict(base)
    for key, val in extra.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_update(out[key], val)
        else:
            out[key] = val
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def layered_config(preset: str | None = None, config_file: str | None = None,
                   overrides: list[str] | None = None) -> TrainConfig:
    """Defaults -> preset -> config file (JSON) -> key=value overrides
    (dotted paths, e.g. model.flow_hidden=64)."""
    layers = TrainConfig().to_dict()
    if preset is not None:
        if preset not in PRESETS:
            raise ValueError(f"unknown preset: {preset} (have {sorted(PRESETS)})")
        layers = _deep_update(layers, PRESETS[preset])
    if config_file is not None:
        with open(config_file) as fh:
            layers = _deep_update(layers, json.load(fh))
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override must look like key=value, got {item!r}")
        key, _, raw = item.partition("=")
        node = layers
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = _parse_value(raw)
    return config_from_dict(layers)


# -- Adam -------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_store(cls, store: ParamStore) -> "AdamState":
        return cls(
            m={p.name: np.zeros_like(p.data) for p in store.params()},
            v={p.name: np.zeros_like(p.data) for p in store.params()},
        )


def adam_step(store: ParamStore, state: AdamState, lr: float, wd: float = 0.0) -> AdamState:
    """Decoupled weight decay, then bias-corrected Adam; zeroes gradients and
    bumps the store version."""
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for p in store.params():
        if wd:
            p.data -= lr * wd * p.data
        g = p.grad
        m = state.m[p.name]
        v = state.v[p.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    store.zero_grad()
    store.bump_version()
    return state


# -- batch preparation ---------------------------------------------------------------

@dataclass
class SceneBundle:
    scene: Scene
    plan: losses.SupervisionPlan
    invisible: np.ndarray       # conf < 0.5 or outside crop
    gt2d_norm: np.ndarray
    sample_joints: np.ndarray   # joints that need heatmap draws each iteration
    mask_active: bool


def prepare_bundles(scenes: list[Scene], cfg: TrainConfig) -> list[SceneBundle]:
    """Per-scene static training data; drops scenes whose detector pose
    disagrees with the ground truth beyond the filtering threshold."""
    bundles = []
    dropped = 0
    for sc in scenes:
        kps, conf, valid = heatmaps.argmax_pose(sc.heatmap)
        if detector_agreement_px(sc.gt2d, kps, valid) > DETECTOR_AGREEMENT_PX:
            dropped += 1
            continue
        status = sc.joint_status()
        plan = losses.build_supervision_plan(status)
        invisible = ~(status.visible & status.inside_crop)
        mask_active = bool(cfg.use_mask and sc.mask_available and not sc.object_occluded)
        need = np.zeros(body.NUM_JOINTS, dtype=bool)
        if cfg.use_mmd:
            need |= plan.source == TargetSource.HEATMAP_SAMPLES
        if mask_active:
            need |= invisible
        bundles.append(SceneBundle(
            scene=sc, plan=plan, invisible=invisible,
            gt2d_norm=sc.gt2d / 128.0 - 1.0,
            sample_joints=np.flatnonzero(need),
            mask_active=mask_active,
        ))
    if dropped:
        log.info("dropped %d scenes failing the detector agreement filter", dropped)
    if not bundles:
        raise ValueError("no scenes left after filtering")
    return bundles


def _draw_heatmap_samples(bundle: SceneBundle, n: int, rng) -> dict[int, np.ndarray]:
    out = {}
    for j in bundle.sample_joints:
        try:
            coords, _ = heatmaps.sample_heatmap(bundle.scene.heatmap[j], n, rng)
        except ValueError:
            continue  # degenerate heatmap: joint contributes no samples
        out[int(j)] = coords
    return out


# -- training loop -----------------------------------------------------------------

def train(cfg: TrainConfig, scenes: list[Scene], checkpoint_path: str | None = None,
          log_path: str | None = None) -> tuple[PoseDistributionModel, list[dict]]:
    """Deterministic training run; returns the model and the per-iteration
    log rows (also written as CSV when log_path is given)."""
    model = PoseDistributionModel(cfg.model)
    bundles = prepare_bundles(scenes, cfg)
    ctx, pose_in, bbox = model.condition_inputs([b.scene for b in bundles])
    theta_gt = np.stack([b.scene.theta for b in bundles])
    beta_gt = np.stack([b.scene.beta for b in bundles])
    gt2d = np.stack([b.scene.gt2d for b in bundles])
    visible2d = np.stack([
        b.scene.joint_status().visible & b.scene.joint_status().inside_crop
        for b in bundles
    ])

    rng = np.random.default_rng(cfg.seed)
    state = AdamState.for_store(model.store)
    need_samples = cfg.use_mmd or cfg.use_mask or cfg.l2d_variant != "mode_only"
    n = cfg.n_mmd_samples
    rows: list[dict] = []
    order = np.zeros(0, dtype=int)
    t_start = time.perf_counter()

    for it in range(cfg.iterations):
        if len(order) < cfg.batch_size:
            order = np.concatenate([order, rng.permutation(len(bundles))])
        idx, order = order[:cfg.batch_size], order[cfg.batch_size:]
        batch = [bundles[i] for i in idx]
        b_sz = len(idx)

        with dc.Tape() as tape:
            cond = model.condition.build_condition(
                ctx[idx], pose_in[idx], bbox[idx],
                use_pose2d=cfg.model.use_pose2d, use_bbox=cfg.model.use_bbox,
            )
            beta, cam = model.regress_camera(cond, [b.scene for b in batch])

            terms: dict[str, Node] = {}
            terms["nll"] = losses.loss_nll(model.flow.log_prob(theta_gt[idx], cond))
            terms["beta"] = losses.loss_beta(beta, beta_gt[idx])

            theta_mode = model.flow.mode(cond)
            if need_samples:
                z = rng.standard_normal((b_sz * n, model.flow.cfg.dim))
                cond_rep = dc.repeat_rows(cond, n)
                theta_s, _ = model.flow.forward(Node(z), cond_rep)
                theta_all = dc.concat([theta_mode, theta_s], axis=0)
                beta_all = dc.concat([beta, dc.repeat_rows(beta, n)], axis=0)
                cam_rep = model.repeat_camera(cam, n)
                cam_all = body.CameraModel(
                    s=dc.concat([cam.s, cam_rep.s], axis=0),
                    tx=dc.concat([cam.tx, cam_rep.tx], axis=0),
                    ty=dc.concat([cam.ty, cam_rep.ty], axis=0),
                    bbox_cx=np.concatenate([cam.bbox_cx, cam_rep.bbox_cx]),
                    bbox_cy=np.concatenate([cam.bbox_cy, cam_rep.bbox_cy]),
                    bbox_size=np.concatenate([cam.bbox_size, cam_rep.bbox_size]),
                    focal=np.concatenate([cam.focal, cam_rep.focal]),
                    img_w=cam.img_w, img_h=cam.img_h,
                )
            else:
                theta_all = theta_mode
                beta_all = beta
                cam_all = cam

            joints = body.forward_kinematics(theta_all, beta_all)
            proj_px = body.project(joints, cam_all)
            mode_px = dc.gather(proj_px, (slice(0, b_sz),))
            terms["l2d"] = losses.loss_2d(mode_px, gt2d[idx])
            terms["orth"] = losses.loss_orth(theta_all)

            if need_samples:
                sample_px = dc.reshape(
                    dc.gather(proj_px, (slice(b_sz, b_sz * (n + 1)),)),
                    (b_sz, n, body.NUM_JOINTS, 2),
                )
                sample_norm = body.normalize_crop(sample_px)
                hm_draws = [_draw_heatmap_samples(b, n, rng) for b in batch]

                if cfg.use_mmd:
                    sel_b, sel_k, targets = [], [], []
                    for bi, b in enumerate(batch):
                        for j in range(body.NUM_JOINTS):
                            src = b.plan.source[j]
                            if src == TargetSource.EXCLUDED:
                                continue
                            if src == TargetSource.HEATMAP_SAMPLES:
                                t = hm_draws[bi].get(j)
                                if t is None:
                                    continue
                            else:
                                t = np.tile(b.gt2d_norm[j], (n, 1))
                            sel_b.append(bi)
                            sel_k.append(j)
                            targets.append(t)
                    terms["mmd"] = losses.loss_mmd_batch(
                        sample_norm, np.asarray(sel_b, dtype=int), np.asarray(sel_k, dtype=int),
                        np.stack(targets) if targets else np.zeros((0, n, 2)), b_sz,
                    )

                if cfg.use_mask:
                    pair_b, pair_i, pair_k, pair_t = [], [], [], []
                    for bi, b in enumerate(batch):
                        if not b.mask_active:
                            continue
                        si, ji, tg = losses.mask_loss_pairs(
                            sample_norm.data[bi], b.invisible, hm_draws[bi], b.scene.mask
                        )
                        pair_b.extend([bi] * len(si))
                        pair_i.extend(si.tolist())
                        pair_k.extend(ji.tolist())
                        pair_t.extend(tg)
                    terms["mask"] = losses.loss_mask_batch(
                        sample_norm, np.asarray(pair_b, dtype=int), np.asarray(pair_i, dtype=int),
                        np.asarray(pair_k, dtype=int),
                        np.asarray(pair_t) if pair_t else np.zeros((0, 2)), b_sz,
                    )

                if cfg.l2d_variant != "mode_only":
                    terms["l2d_samples"] = losses.loss_2d_samples(
                        sample_px, gt2d[idx], visible2d[idx],
                        "all" if cfg.l2d_variant == "all" else "visible",
                    )

            total, logged = losses.total_loss(terms, cfg.weights, cfg.l2d_sample_weight)
            if not np.isfinite(total.data):
                raise FloatingPointError(
                    f"non-finite loss at iteration {it}: {logged}"
                )
            tape.backward(total)

        adam_step(model.store, state, cfg.learning_rate, cfg.weight_decay)
        row = {"iter": it, **logged, "total": float(total.data),
               "wall_time": time.perf_counter() - t_start}
        rows.append(row)
        if checkpoint_path and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            _save(model, cfg, checkpoint_path)

    if checkpoint_path:
        _save(model, cfg, checkpoint_path)
    if log_path:
        write_training_log(rows, log_path)
    return model, rows


def _save(model: PoseDistributionModel, cfg: TrainConfig, path: str) -> None:
    meta = model.metadata()
    meta["train_config"] = cfg.to_dict()
    dc.save_checkpoint(path, model.store, metadata=meta)


def write_training_log(rows: list[dict], path: str) -> None:
    cols = ["iter", "beta", "l2d", "nll", "orth", "mmd", "mask", "l2d_samples",
            "total", "wall_time"]
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols, restval="")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in cols})
    os.replace(tmp, path)
