"""Evaluation protocol: distribution accuracy (mode and min-of-N MPJPE /
PA-MPJPE / PVE), input consistency (2D keypoint error), diversity (3D spread
split by visibility), and plausibility (PercIn / MinDist against person
masks), plus the checkpoint evaluation pipeline producing JSON/CSV reports.
"""
from __future__ import annotations

import csv
import json
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import body, diffcore as dc, heatmaps, masks
from .body import Node
from .model import PoseDistributionModel
from .synthdata import Scene

MM_PER_M = 1000.0


# -- core metrics ---------------------------------------------------------------

def mpjpe(pred: np.ndarray, gt: np.ndarray) -> float:
    """Pelvis-aligned mean per-joint position error; unit-preserving."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("joint sets differ in shape")
    p = pred - pred[0]
    g = gt - gt[0]
    return float(np.linalg.norm(p - g, axis=1).mean())


def umeyama_alignment(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Similarity-Procrustes alignment of pred onto gt (rotation, uniform
    scale, translation; reflections excluded). Falls back to translation-only
    with a warning when the cross-covariance is rank deficient."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mu_p = pred.mean(axis=0)
    mu_g = gt.mean(axis=0)
    xp = pred - mu_p
    xg = gt - mu_g
    cov = xg.T @ xp / len(pred)
    if np.linalg.matrix_rank(cov) < 2:
        warnings.warn("rank-deficient cross-covariance; translation-only alignment")
        return pred - mu_p + mu_g
    u, d, vt = np.linalg.svd(cov)
    sign = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[2, 2] = -1.0
    var_p = (xp**2).sum() / len(pred)
    scale = np.trace(np.diag(d) @ sign) / var_p
    rot = u @ sign @ vt
    return scale * xp @ rot.T + mu_g


def pa_mpjpe(pred: np.ndarray, gt: np.ndarray) -> float:
    """MPJPE after similarity Procrustes alignment."""
    if len(pred) < 3:
        raise ValueError("procrustes needs at least 3 points")
    aligned = umeyama_alignment(pred, gt)
    return float(np.linalg.norm(aligned - gt, axis=1).mean())


def pve(pred_dense: np.ndarray, gt_dense: np.ndarray, root_align: bool = True) -> float:
    """Mean dense-body-point error; pelvis (point 0) aligned by default."""
    pred = np.asarray(pred_dense, dtype=np.float64)
    gt = np.asarray(gt_dense, dtype=np.float64)
    if root_align:
        pred = pred - pred[0]
        gt = gt - gt[0]
    return float(np.linalg.norm(pred - gt, axis=1).mean())


def min_of_n(values: np.ndarray, n: int) -> float:
    """Minimum of the first n per-hypothesis metric values."""
    values = np.asarray(values, dtype=np.float64)
    if n < 1 or n > len(values):
        raise ValueError(f"n={n} outside [1, {len(values)}]")
    return float(values[:n].min())


def kp2d_error(sample_proj: np.ndarray, mode_proj: np.ndarray, gt2d: np.ndarray,
               visible: np.ndarray) -> tuple[float, float] | None:
    """(mode error, sample-mean error) in crop px over visible joints; None
    when the scene has no visible joint (excluded from aggregates)."""
    visible = np.asarray(visible, dtype=bool)
    if not visible.any():
        return None
    mode_err = np.linalg.norm(mode_proj[visible] - gt2d[visible], axis=-1).mean()
    sample_err = np.linalg.norm(
        sample_proj[:, visible] - gt2d[None, visible], axis=-1
    ).mean()
    return float(mode_err), float(sample_err)


def kp3d_spread(hyps: np.ndarray) -> np.ndarray:
    """Per-keypoint mean euclidean distance to the hypothesis mean: (N, J, 3)
    -> (J,)."""
    center = hyps.mean(axis=0, keepdims=True)
    return np.linalg.norm(hyps - center, axis=-1).mean(axis=0)


def plausibility(points_px: np.ndarray, mask: masks.PersonMask,
                 dist_field: masks.DistanceField) -> tuple[float, float]:
    """(PercIn %, MinDist px) for invisible-joint hypothesis projections.
    MinDist averages the mask distance over the outside samples only; it is
    0 when every sample lands inside."""
    points_px = np.asarray(points_px, dtype=np.float64).reshape(-1, 2)
    if len(points_px) == 0:
        raise ValueError("no samples given")
    is_in = masks.inside(points_px, mask)
    perc_in = 100.0 * float(is_in.mean())
    if is_in.all():
        return perc_in, 0.0
    dists = masks.mask_distance(points_px[~is_in], dist_field)
    return perc_in, float(dists.mean())


# -- evaluation pipeline ----------------------------------------------------------

@dataclass
class EvalConfig:
    n_hypotheses: int = 100
    seed: int = 0
    n_list: tuple = ()          # extra N values for min-of-N sweeps
    pve_root_align: bool = True  # protocol flag; root alignment is the default
    block_size: int = 16
    spread_reference_samples: int = 100


@dataclass
class SceneResult:
    index: int
    mode_mpjpe: float
    mode_pa_mpjpe: float
    mode_pve: float
    min_mpjpe: dict
    min_pa_mpjpe: dict
    min_pve: dict
    kp2d_mode: float | None
    kp2d_samples: float | None
    spread_visible: float | None
    spread_invisible: float | None
    perc_in: float | None
    min_dist: float | None
    spread_ratios: list = field(default_factory=list)  # (joint, model_px, heatmap_px)


def _scene_latents(eval_seed: int, scene: Scene, n: int, dim: int) -> np.ndarray:
    rng = np.random.default_rng([eval_seed, scene.seed])
    return rng.standard_normal((n, dim))


def _eval_block(model: PoseDistributionModel, scenes: list[Scene], offset: int,
                cfg: EvalConfig) -> list[SceneResult]:
    n = cfg.n_hypotheses
    b = len(scenes)
    cond = model.build_conditions(scenes)
    beta, cam = model.regress_camera(cond, scenes)
    theta_mode = model.flow.mode(cond)
    z = np.concatenate([_scene_latents(cfg.seed, sc, n, model.flow.cfg.dim) for sc in scenes])
    cond_rep = dc.repeat_rows(cond, n)
    theta_s, _ = model.flow.forward(Node(z), cond_rep)

    joints_m = body.forward_kinematics(theta_mode, beta)
    dense_m = body.dense_body_points(joints_m)
    proj_m = body.project(joints_m, cam).data

    beta_rep = dc.repeat_rows(beta, n)
    cam_rep = model.repeat_camera(cam, n)
    joints_s = body.forward_kinematics(theta_s, beta_rep)
    dense_s = body.dense_body_points(joints_s)
    proj_s = body.project(joints_s, cam_rep).data

    n_values = sorted(set([n] + [v for v in cfg.n_list if v <= n]))
    results = []
    for i, sc in enumerate(scenes):
        gt_j = sc.joints3d() * MM_PER_M
        gt_d = sc.dense3d() * MM_PER_M
        jm = joints_m.data[i] * MM_PER_M
        dm = dense_m.data[i] * MM_PER_M
        js = joints_s.data[i * n:(i + 1) * n] * MM_PER_M
        ds = dense_s.data[i * n:(i + 1) * n] * MM_PER_M
        ps = proj_s[i * n:(i + 1) * n]

        hyp_mpjpe = np.array([mpjpe(js[k], gt_j) for k in range(n)])
        hyp_pa = np.array([pa_mpjpe(js[k], gt_j) for k in range(n)])
        hyp_pve = np.array([pve(ds[k], gt_d, cfg.pve_root_align) for k in range(n)])

        status = sc.joint_status()
        vis = status.visible & status.inside_crop
        invis = ~vis
        kp2d = kp2d_error(ps, proj_m[i], sc.gt2d, vis)
        spread = kp3d_spread(js)
        spread_vis = float(spread[vis].mean()) if vis.any() else None
        spread_invis = float(spread[invis].mean()) if invis.any() else None

        perc_in = min_dist = None
        if sc.mask_available and not sc.object_occluded and invis.any():
            pts = ps[:, invis].reshape(-1, 2)
            perc_in, min_dist = plausibility(pts, sc.mask, sc.distance_field())

        ratios = []
        articulated = set(body.DEFAULT_TREE.highly_articulated)
        for j in range(body.NUM_JOINTS):
            if j in articulated and status.uncertain[j] and status.inside_crop[j]:
                model_spread = float(
                    np.linalg.norm(ps[:, j] - ps[:, j].mean(axis=0), axis=1).mean()
                )
                rng = np.random.default_rng([cfg.seed, sc.seed, j])
                try:
                    ref, _ = heatmaps.sample_heatmap(
                        sc.heatmap[j], cfg.spread_reference_samples, rng
                    )
                except ValueError:
                    continue
                ref_px = (ref + 1.0) * 128.0
                ref_spread = float(
                    np.linalg.norm(ref_px - ref_px.mean(axis=0), axis=1).mean()
                )
                ratios.append((j, model_spread, ref_spread))

        results.append(SceneResult(
            index=offset + i,
            mode_mpjpe=mpjpe(jm, gt_j),
            mode_pa_mpjpe=pa_mpjpe(jm, gt_j),
            mode_pve=pve(dm, gt_d, cfg.pve_root_align),
            min_mpjpe={v: min_of_n(hyp_mpjpe, v) for v in n_values},
            min_pa_mpjpe={v: min_of_n(hyp_pa, v) for v in n_values},
            min_pve={v: min_of_n(hyp_pve, v) for v in n_values},
            kp2d_mode=None if kp2d is None else kp2d[0],
            kp2d_samples=None if kp2d is None else kp2d[1],
            spread_visible=spread_vis,
            spread_invisible=spread_invis,
            perc_in=perc_in,
            min_dist=min_dist,
            spread_ratios=ratios,
        ))
    return results


def _mean_of(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def evaluate_model(model: PoseDistributionModel, scenes: list[Scene],
                   cfg: EvalConfig = EvalConfig(), threads: int = 1) -> dict:
    """Full evaluation over a scene list; deterministic given cfg.seed
    regardless of block size or thread count."""
    blocks = [
        (scenes[i:i + cfg.block_size], i)
        for i in range(0, len(scenes), cfg.block_size)
    ]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(_eval_block, model, blk, off, cfg) for blk, off in blocks]
            per_scene = [r for f in futures for r in f.result()]
    else:
        per_scene = [r for blk, off in blocks for r in _eval_block(model, blk, off, cfg)]
    per_scene.sort(key=lambda r: r.index)

    n_values = sorted(set([cfg.n_hypotheses] + [v for v in cfg.n_list if v <= cfg.n_hypotheses]))
    agg = {
        "n_scenes": len(scenes),
        "n_hypotheses": cfg.n_hypotheses,
        "mode_mpjpe": _mean_of(r.mode_mpjpe for r in per_scene),
        "mode_pa_mpjpe": _mean_of(r.mode_pa_mpjpe for r in per_scene),
        "mode_pve": _mean_of(r.mode_pve for r in per_scene),
        "min_mpjpe": {v: _mean_of(r.min_mpjpe[v] for r in per_scene) for v in n_values},
        "min_pa_mpjpe": {v: _mean_of(r.min_pa_mpjpe[v] for r in per_scene) for v in n_values},
        "min_pve": {v: _mean_of(r.min_pve[v] for r in per_scene) for v in n_values},
        "kp2d_mode": _mean_of(r.kp2d_mode for r in per_scene),
        "kp2d_samples": _mean_of(r.kp2d_samples for r in per_scene),
        "spread_visible": _mean_of(r.spread_visible for r in per_scene),
        "spread_invisible": _mean_of(r.spread_invisible for r in per_scene),
        "perc_in": _mean_of(r.perc_in for r in per_scene),
        "min_dist": _mean_of(r.min_dist for r in per_scene),
        "spread_ratio_by_joint": spread_ratio_by_joint(per_scene),
    }
    return {
        "eval": {"seed": cfg.seed, "n_hypotheses": cfg.n_hypotheses,
                 "pve_root_align": cfg.pve_root_align},
        "aggregate": agg,
        "per_scene": [scene_row(r) for r in per_scene],
    }


def spread_ratio_by_joint(per_scene: list[SceneResult]) -> dict:
    """Mean model-vs-heatmap 2D spread ratio per uncertain articulated joint."""
    by_joint: dict[int, list] = {}
    for r in per_scene:
        for j, model_px, ref_px in r.spread_ratios:
            by_joint.setdefault(j, []).append((model_px, ref_px))
    out = {}
    for j, pairs in sorted(by_joint.items()):
        model_mean = float(np.mean([p[0] for p in pairs]))
        ref_mean = float(np.mean([p[1] for p in pairs]))
        out[body.JOINT_NAMES[j]] = {
            "model_px": model_mean,
            "heatmap_px": ref_mean,
            "ratio": model_mean / ref_mean if ref_mean > 0 else None,
            "count": len(pairs),
        }
    return out


def scene_row(r: SceneResult) -> dict:
    return {
        "scene": r.index,
        "mode_mpjpe": r.mode_mpjpe,
        "mode_pa_mpjpe": r.mode_pa_mpjpe,
        "mode_pve": r.mode_pve,
        "min_mpjpe": r.min_mpjpe,
        "min_pa_mpjpe": r.min_pa_mpjpe,
        "min_pve": r.min_pve,
        "kp2d_mode": r.kp2d_mode,
        "kp2d_samples": r.kp2d_samples,
        "spread_visible": r.spread_visible,
        "spread_invisible": r.spread_invisible,
        "perc_in": r.perc_in,
        "min_dist": r.min_dist,
    }


def write_report(report: dict, json_path: str, csv_path: str | None = None) -> None:
    """Nested JSON plus a flat CSV (one row per scene and a final aggregate
    row); written atomically."""
    tmp = f"{json_path}.tmp.{os.getpid()}"
    with open(tmp, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, json_path)
    if csv_path is None:
        return
    n_values = sorted(report["aggregate"]["min_pve"].keys(), key=int)
    cols = ["scene", "mode_mpjpe", "mode_pa_mpjpe", "mode_pve"]
    cols += [f"min_mpjpe@{v}" for v in n_values]
    cols += [f"min_pa_mpjpe@{v}" for v in n_values]
    cols += [f"min_pve@{v}" for v in n_values]
    cols += ["kp2d_mode", "kp2d_samples", "spread_visible", "spread_invisible",
             "perc_in", "min_dist"]

    def flat(row, label):
        out = {"scene": label}
        for c in ("mode_mpjpe", "mode_pa_mpjpe", "mode_pve", "kp2d_mode",
                  "kp2d_samples", "spread_visible", "spread_invisible",
                  "perc_in", "min_dist"):
            out[c] = "" if row[c] is None else f"{row[c]:.6f}"
        for v in n_values:
            for name in ("min_mpjpe", "min_pa_mpjpe", "min_pve"):
                val = row[name][v]
                out[f"{name}@{v}"] = "" if val is None else f"{val:.6f}"
        return out

    tmp = f"{csv_path}.tmp.{os.getpid()}"
    with open(tmp, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in report["per_scene"]:
            writer.writerow(flat(row, str(row["scene"])))
        writer.writerow(flat(report["aggregate"], "aggregate"))
    os.replace(tmp, csv_path)
