"""Training objectives: pose NLL, shape MSE, mode reprojection, 6D seed
orthonormality, joint-wise MMD against heatmap samples, and the mask
plausibility loss, combined into a weighted total.

Sample-based losses operate on [-1, 1]-normalized 2D coordinates; the mode
reprojection loss works in crop pixels.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from . import diffcore as dc
from .diffcore import Node
from .body import CROP_SIZE, IDENTITY_SEED, NUM_JOINTS, KinematicTree, DEFAULT_TREE
from .heatmaps import JointStatus
from .masks import PersonMask, inside


@dataclass(frozen=True)
class LossWeights:
    beta: float = 5e-4
    l2d: float = 1e-2
    nll: float = 1e-1
    orth: float = 1e-1
    mmd: float = 5e-2
    mask: float = 1e-1

    def __post_init__(self):
        for name, val in self.__dict__.items():
            if val < 0:
                raise ValueError(f"negative loss weight {name}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class KernelSpec:
    bandwidths: tuple = (0.05, 0.20, 0.90)

    def __post_init__(self):
        if any(a <= 0 for a in self.bandwidths):
            raise ValueError("bandwidths must be positive")


DEFAULT_KERNEL = KernelSpec()


class TargetSource(IntEnum):
    HEATMAP_SAMPLES = 0
    DUPLICATED_GROUND_TRUTH = 1
    EXCLUDED = 2


@dataclass
class SupervisionPlan:
    """Per-joint MMD target choice with a human-readable reason code."""

    source: np.ndarray  # (K,) of TargetSource
    reasons: list[str]

    def included(self) -> np.ndarray:
        return self.source != TargetSource.EXCLUDED


def build_supervision_plan(status: JointStatus, tree: KinematicTree = DEFAULT_TREE) -> SupervisionPlan:
    """Gating rules: heatmap samples only for highly articulated, uncertain
    joints; ground truth duplicated for the other supervised joints; joints
    are excluded when the gt lies outside the crop or when a non-highly-
    articulated joint is invisible."""
    k = len(status.visible)
    source = np.full(k, TargetSource.DUPLICATED_GROUND_TRUTH, dtype=np.int64)
    reasons = [""] * k
    articulated = set(tree.highly_articulated)
    for j in range(k):
        if not status.inside_crop[j]:
            source[j] = TargetSource.EXCLUDED
            reasons[j] = "gt outside crop"
        elif j in articulated:
            if status.uncertain[j]:
                source[j] = TargetSource.HEATMAP_SAMPLES
                reasons[j] = "highly articulated and uncertain"
            else:
                reasons[j] = "highly articulated, certain"
        elif not status.visible[j]:
            source[j] = TargetSource.EXCLUDED
            reasons[j] = "invisible and not highly articulated"
        else:
            reasons[j] = "visible"
    return SupervisionPlan(source=source, reasons=reasons)


# -- kernels and MMD ------------------------------------------------------------

def imq_kernel(s, s_hat, spec: KernelSpec = DEFAULT_KERNEL):
    """Mixture of inverse multiquadratics: sum_a a^2 / (a^2 + ||s - s_hat||^2)
    over the last axis. Works on Nodes and plain arrays."""
    if isinstance(s, Node) or isinstance(s_hat, Node):
        d2 = dc.sumsq(dc.sub(s, s_hat), axis=-1)
        out = None
        for a in spec.bandwidths:
            term = dc.div(a * a, dc.add(d2, a * a))
            out = term if out is None else dc.add(out, term)
        return out
    d2 = ((np.asarray(s) - np.asarray(s_hat)) ** 2).sum(axis=-1)
    return sum((a * a) / (a * a + d2) for a in spec.bandwidths)


def _imq_of_d2(d2: Node, spec: KernelSpec) -> Node:
    """Fused IMQ mixture applied to squared distances (single tape record)."""
    denoms = [a * a + d2.data for a in spec.bandwidths]
    vals = np.zeros_like(d2.data)
    for a, den in zip(spec.bandwidths, denoms):
        vals += (a * a) / den
    out = Node(vals, d2.requires_grad)

    def bwd(g):
        der = np.zeros_like(d2.data)
        for a, den in zip(spec.bandwidths, denoms):
            der -= (a * a) / (den * den)
        dc._accum(d2, g * der)

    dc._register(out, bwd)
    return out


def _pairwise_imq(a: Node, b: Node, spec: KernelSpec) -> Node:
    """(..., n, 2) x (..., m, 2) -> (..., n, m) kernel matrix."""
    sa = a.data.shape
    sb = b.data.shape
    left = dc.reshape(a, sa[:-2] + (sa[-2], 1, 2))
    right = dc.reshape(b, sb[:-2] + (1, sb[-2], 2))
    d2 = dc.sumsq(dc.sub(left, right), axis=-1)
    return _imq_of_d2(d2, spec)


def mmd(s, s_hat, spec: KernelSpec = DEFAULT_KERNEL) -> Node:
    """Maximum mean discrepancy between equal-size sample sets (..., n, 2).

    Within-set terms drop the diagonal with factor 1/(n(n-1)); the cross
    term keeps the diagonal with factor 2/n^2. The diagonal of a within-set
    kernel matrix is exactly phi(0) per entry, so it is subtracted in closed
    form rather than masked out.
    """
    s = dc.as_node(s)
    s_hat = dc.as_node(s_hat)
    n = s.data.shape[-2]
    m = s_hat.data.shape[-2]
    if n != m:
        raise ValueError(f"sample sets must have equal size, got {n} and {m}")
    if n < 2:
        raise ValueError("mmd needs at least 2 samples per set")
    phi0 = float(len(spec.bandwidths))
    k_ss = dc.sub(dc.sum_(_pairwise_imq(s, s, spec), axis=(-1, -2)), n * phi0)
    k_tt = dc.sub(dc.sum_(_pairwise_imq(s_hat, s_hat, spec), axis=(-1, -2)), n * phi0)
    k_st = dc.sum_(_pairwise_imq(s, s_hat, spec), axis=(-1, -2))
    inv = 1.0 / (n * (n - 1))
    return dc.sub(dc.mul(dc.add(k_ss, k_tt), inv), dc.mul(k_st, 2.0 / (n * n)))


def mmd_point_target(s: Node, target: np.ndarray, spec: KernelSpec = DEFAULT_KERNEL) -> Node:
    """MMD of (..., n, 2) sample sets against n duplicates of a single point
    (..., 2): the target-side term collapses to phi(0) and the cross term to
    a length-n sum. Algebraically identical to mmd() with tiled targets."""
    s = dc.as_node(s)
    n = s.data.shape[-2]
    if n < 2:
        raise ValueError("mmd needs at least 2 samples per set")
    phi0 = float(len(spec.bandwidths))
    k_ss = dc.sub(dc.sum_(_pairwise_imq(s, s, spec), axis=(-1, -2)), n * phi0)
    d2 = dc.sumsq(dc.sub(s, np.asarray(target)[..., None, :]), axis=-1)
    k_cross = dc.sum_(_imq_of_d2(d2, spec), axis=-1)
    return dc.add(
        dc.sub(dc.mul(k_ss, 1.0 / (n * (n - 1))), dc.mul(k_cross, 2.0 / n)),
        phi0,
    )


def loss_mmd(proj_norm: Node, plan: SupervisionPlan, heatmap_samples: dict[int, np.ndarray],
             gt2d_norm: np.ndarray, spec: KernelSpec = DEFAULT_KERNEL) -> Node:
    """Single-example MMD loss: mean over included joints.

    proj_norm: (n, K, 2) projected hypothesis keypoints in [-1, 1].
    heatmap_samples: joint index -> (n, 2) target samples for heatmap-
    supervised joints; ground-truth joints use the duplicated gt position.
    """
    n = proj_norm.data.shape[0]
    targets = []
    b_idx, k_idx = [], []
    for j in range(len(plan.source)):
        if plan.source[j] == TargetSource.EXCLUDED:
            continue
        if plan.source[j] == TargetSource.HEATMAP_SAMPLES:
            t = np.asarray(heatmap_samples[j])
        else:
            t = np.tile(gt2d_norm[j], (n, 1))
        targets.append(t)
        k_idx.append(j)
    if not k_idx:
        return Node(np.zeros(()))
    proj = dc.reshape(proj_norm, (1, n, len(plan.source), 2))
    sel = dc.gather(proj, (np.zeros(len(k_idx), dtype=int)[:, None],
                           np.arange(n)[None, :],
                           np.asarray(k_idx)[:, None]))
    vals = mmd(sel, np.stack(targets), spec)
    return dc.mean(vals)


def loss_mmd_batch(proj_norm: Node, select_b: np.ndarray, select_k: np.ndarray,
                   targets: np.ndarray, batch_size: int,
                   spec: KernelSpec = DEFAULT_KERNEL) -> Node:
    """Vectorized MMD over selected (example, joint) pairs.

    proj_norm: (B, n, K, 2); selection arrays give the M included pairs and
    targets their (M, n, 2) sample sets. Pairs whose target set is n copies
    of one point (duplicated ground truth) take the collapsed point-target
    path. Per example: mean over its included joints; then mean over the
    batch (examples without pairs contribute 0).
    """
    if len(select_b) == 0:
        return Node(np.zeros(()))
    n = proj_norm.data.shape[1]
    sel = dc.gather(proj_norm, (select_b[:, None], np.arange(n)[None, :], select_k[:, None]))
    is_point = np.all(targets == targets[:, :1], axis=(1, 2))
    if is_point.all():
        vals = mmd_point_target(sel, targets[:, 0], spec)
    elif not is_point.any():
        vals = mmd(sel, targets, spec)
    else:
        full_idx = np.flatnonzero(~is_point)
        point_idx = np.flatnonzero(is_point)
        full = mmd(dc.gather(sel, (full_idx,)), targets[full_idx], spec)
        point = mmd_point_target(dc.gather(sel, (point_idx,)), targets[point_idx, 0], spec)
        stacked = dc.concat([full, point], axis=0)
        vals = dc.gather(stacked, (np.argsort(np.concatenate([full_idx, point_idx])),))
    counts = np.bincount(select_b, minlength=batch_size).astype(np.float64)
    weights = np.zeros((batch_size, len(select_b)))
    weights[select_b, np.arange(len(select_b))] = 1.0 / counts[select_b]
    per_example = dc.matmul(weights, dc.reshape(vals, (-1, 1)))
    return dc.mean(per_example)


# -- mask loss --------------------------------------------------------------------

def _norm_to_px(coords: np.ndarray) -> np.ndarray:
    return (np.asarray(coords) + 1.0) * (CROP_SIZE / 2.0)


def mask_loss_pairs(proj_norm_data: np.ndarray, invisible_joints: np.ndarray,
                    heatmap_samples: dict[int, np.ndarray], mask: PersonMask):
    """Pairing stage of the mask loss for one example (pure numpy).

    For each invisible joint: filter that joint's heatmap samples to those
    inside the mask, then pair every outside-mask hypothesis sample with its
    nearest (l1) in-mask heatmap sample.

    Returns (sample_idx, joint_idx, targets) for the contributing samples.
    """
    sample_idx, joint_idx, targets = [], [], []
    for j in np.flatnonzero(invisible_joints):
        hm = heatmap_samples.get(int(j))
        if hm is None or len(hm) == 0:
            continue
        hm_in = hm[inside(_norm_to_px(hm), mask)]
        if len(hm_in) == 0:
            continue
        nf = proj_norm_data[:, j]  # (n, 2)
        outside = ~inside(_norm_to_px(nf), mask)
        if not outside.any():
            continue
        out_idx = np.flatnonzero(outside)
        d = np.abs(nf[out_idx][:, None, :] - hm_in[None, :, :]).sum(axis=2)
        nearest = np.argmin(d, axis=1)
        sample_idx.extend(out_idx.tolist())
        joint_idx.extend([int(j)] * len(out_idx))
        targets.extend(hm_in[nearest])
    if not sample_idx:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int), np.zeros((0, 2))
    return np.asarray(sample_idx), np.asarray(joint_idx), np.asarray(targets)


def loss_mask(proj_norm: Node, invisible_joints: np.ndarray,
              heatmap_samples: dict[int, np.ndarray], mask: PersonMask | None,
              object_occluded: bool) -> Node:
    """Single-example mask loss: mean l1 distance from outside-mask
    hypothesis samples to their nearest in-mask heatmap sample; 0 when the
    example is object-occluded, has no mask, or nothing contributes."""
    if object_occluded or mask is None:
        return Node(np.zeros(()))
    si, ji, targets = mask_loss_pairs(proj_norm.data, invisible_joints, heatmap_samples, mask)
    if len(si) == 0:
        return Node(np.zeros(()))
    sel = dc.gather(proj_norm, (si, ji))
    l1 = dc.sum_(dc.absolute(dc.sub(sel, targets)), axis=1)
    return dc.mean(l1)


def loss_mask_batch(proj_norm: Node, pair_b: np.ndarray, pair_i: np.ndarray,
                    pair_k: np.ndarray, targets: np.ndarray, batch_size: int) -> Node:
    """Vectorized mask loss over contributing (example, sample, joint)
    triples; per-example mean over contributors, then batch mean."""
    if len(pair_b) == 0:
        return Node(np.zeros(()))
    sel = dc.gather(proj_norm, (pair_b, pair_i, pair_k))
    l1 = dc.sum_(dc.absolute(dc.sub(sel, targets)), axis=1)  # (C,)
    counts = np.bincount(pair_b, minlength=batch_size).astype(np.float64)
    weights = np.zeros((batch_size, len(pair_b)))
    weights[pair_b, np.arange(len(pair_b))] = 1.0 / counts[pair_b]
    per_example = dc.matmul(weights, dc.reshape(l1, (-1, 1)))
    return dc.mean(per_example)


# -- dense losses ------------------------------------------------------------------

def loss_nll(log_prob: Node) -> Node:
    """Negative log-likelihood, batch mean."""
    return dc.neg(dc.mean(log_prob))


def loss_beta(beta: Node, beta_gt: np.ndarray) -> Node:
    """Squared l2 shape error, batch mean."""
    return dc.mean(dc.sumsq(dc.sub(beta, beta_gt), axis=-1))


def loss_2d(proj_px: Node, gt2d: np.ndarray) -> Node:
    """Mean per-joint l1 reprojection error in crop pixels: (B, K, 2) vs gt."""
    per_joint = dc.sum_(dc.absolute(dc.sub(proj_px, gt2d)), axis=-1)
    return dc.mean(per_joint)


def loss_2d_samples(proj_px: Node, gt2d: np.ndarray, visible: np.ndarray,
                    variant: str) -> Node:
    """Reprojection loss on random hypotheses (ablation variants).

    proj_px: (B, n, K, 2); gt2d: (B, K, 2); visible: (B, K) bool.
    variant "all" penalizes every joint, "visible" only visible ones.
    """
    if variant not in ("all", "visible"):
        raise ValueError(f"unknown 2d sample variant: {variant}")
    per_joint = dc.sum_(dc.absolute(dc.sub(proj_px, gt2d[:, None, :, :])), axis=-1)
    if variant == "all":
        return dc.mean(per_joint)
    w = np.broadcast_to(visible[:, None, :], per_joint.data.shape).astype(np.float64)
    total = w.sum()
    if total == 0.0:
        return Node(np.zeros(()))
    return dc.div(dc.sum_(dc.mul(per_joint, w)), total)


def loss_orth(theta: Node) -> Node:
    """Orthonormality penalty on raw 6D seeds (pose offsets + identity seed):
    (|a1|^2 - 1)^2 + (|a2|^2 - 1)^2 + (a1 . a2)^2, mean over joints/rows."""
    seeds = dc.reshape(dc.add(theta, np.tile(IDENTITY_SEED, NUM_JOINTS)), (-1, 6))
    a1 = dc.gather(seeds, (slice(None), slice(0, 3)))
    a2 = dc.gather(seeds, (slice(None), slice(3, 6)))
    n1 = dc.sub(dc.sumsq(a1, axis=1), 1.0)
    n2 = dc.sub(dc.sumsq(a2, axis=1), 1.0)
    dot = dc.sum_(dc.mul(a1, a2), axis=1)
    per_joint = dc.add(dc.add(dc.mul(n1, n1), dc.mul(n2, n2)), dc.mul(dot, dot))
    return dc.mean(per_joint)


def total_loss(terms: dict[str, Node], weights: LossWeights,
               l2d_sample_weight: float = 0.0) -> tuple[Node, dict[str, float]]:
    """Weighted sum of the provided terms; also returns the unweighted
    per-term values for logging. l2d_sample_weight applies to the random-
    hypothesis reprojection term used by the supervision-variant ablations."""
    scale = {
        "beta": weights.beta, "l2d": weights.l2d, "nll": weights.nll,
        "orth": weights.orth, "mmd": weights.mmd, "mask": weights.mask,
        "l2d_samples": l2d_sample_weight,
    }
    total = None
    logged = {}
    for name, node in terms.items():
        if name not in scale:
            raise ValueError(f"unknown loss term: {name}")
        logged[name] = float(node.data)
        weighted = dc.mul(node, scale[name])
        total = weighted if total is None else dc.add(total, weighted)
    if total is None:
        total = Node(np.zeros(()))
    return total, logged
