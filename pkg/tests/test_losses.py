import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ambiflow import diffcore as dc
from ambiflow import losses
from ambiflow.body import NUM_JOINTS
from ambiflow.diffcore import Node
from ambiflow.heatmaps import JointStatus
from ambiflow.losses import (
    DEFAULT_KERNEL, KernelSpec, LossWeights, SupervisionPlan, TargetSource,
    build_supervision_plan, imq_kernel, mmd,
)
from ambiflow.masks import PersonMask


def mmd_double_loop(s, t, bandwidths=DEFAULT_KERNEL.bandwidths):
    """Naive O(n^2) oracle, straight from the definition."""
    n = len(s)

    def phi(a, b):
        d2 = float(((a - b) ** 2).sum())
        return sum(bw * bw / (bw * bw + d2) for bw in bandwidths)

    within_s = sum(phi(s[i], s[j]) for i in range(n) for j in range(n) if i != j)
    within_t = sum(phi(t[i], t[j]) for i in range(n) for j in range(n) if i != j)
    cross = sum(phi(s[i], t[j]) for i in range(n) for j in range(n))
    return within_s / (n * (n - 1)) + within_t / (n * (n - 1)) - 2.0 * cross / (n * n)


def make_status(visible, uncertain, inside):
    return JointStatus(
        visible=np.asarray(visible, dtype=bool),
        uncertain=np.asarray(uncertain, dtype=bool),
        inside_crop=np.asarray(inside, dtype=bool),
        max_conf=np.where(visible, 0.9, 0.3),
    )


class TestImqKernel:
    def test_distance_zero(self):
        assert np.isclose(float(imq_kernel(np.zeros(2), np.zeros(2))), 3.0)

    def test_distance_one_hand_value(self):
        v = float(imq_kernel(np.array([0.0, 0.0]), np.array([1.0, 0.0])))
        by_hand = 0.05**2 / 1.0025 + 0.2**2 / 1.04 + 0.9**2 / 1.81
        assert np.isclose(v, by_hand)
        assert np.isclose(v, 0.48847, atol=1e-5)

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a, b = rng.normal(size=2), rng.normal(size=2)
            assert imq_kernel(a, b) == imq_kernel(b, a)


class TestMmd:
    def test_identical_degenerate_sets(self):
        s = np.zeros((2, 2))
        assert np.isclose(float(mmd(s, s).data), 0.0)

    def test_hand_evaluated_degenerate_case(self):
        s = np.zeros((2, 2))
        t = np.tile([1.0, 0.0], (2, 1))
        assert np.isclose(float(mmd(s, t).data), 5.02306, atol=1e-4)

    def test_equals_double_loop_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            n = int(rng.integers(2, 12))
            s = rng.normal(size=(n, 2))
            t = rng.normal(size=(n, 2))
            assert abs(float(mmd(s, t).data) - mmd_double_loop(s, t)) < 1e-12

    def test_identical_point_closed_form(self):
        # n identical points: within terms give phi(0)=3 each; cross gives 3
        for n in (2, 5, 9):
            s = np.tile([0.3, -0.2], (n, 1))
            assert np.isclose(float(mmd(s, s).data), 3.0 + 3.0 - 2.0 * 3.0)

    def test_symmetry_and_permutation_invariance(self):
        rng = np.random.default_rng(2)
        s = rng.normal(size=(6, 2))
        t = rng.normal(size=(6, 2))
        assert np.isclose(float(mmd(s, t).data), float(mmd(t, s).data))
        perm = rng.permutation(6)
        assert np.isclose(float(mmd(s, t).data), float(mmd(s[perm], t).data))

    def test_size_mismatch_rejected(self):
        with pytest.raises(ValueError, match="equal size"):
            mmd(np.zeros((3, 2)), np.zeros((4, 2)))

    def test_single_sample_rejected(self):
        with pytest.raises(ValueError, match="at least 2"):
            mmd(np.zeros((1, 2)), np.zeros((1, 2)))

    def test_batched_matches_per_pair(self):
        rng = np.random.default_rng(3)
        s = rng.normal(size=(4, 7, 2))
        t = rng.normal(size=(4, 7, 2))
        batched = mmd(s, t).data
        for m in range(4):
            assert np.isclose(batched[m], float(mmd(s[m], t[m]).data), atol=1e-14)

    def test_gradient(self):
        rng = np.random.default_rng(4)
        t = rng.normal(size=(5, 2))

        def f(v):
            s = Node(v.reshape(5, 2), requires_grad=True)
            with dc.Tape() as tape:
                out = mmd(s, t)
                tape.backward(out)
            return float(out.data), s.grad.ravel()

        assert dc.grad_check(f, rng.normal(size=10), h=1e-6) < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 10))
def test_mmd_oracle_property(seed, n):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=(n, 2))
    t = rng.normal(size=(n, 2))
    assert abs(float(mmd(s, t).data) - mmd_double_loop(s, t)) < 1e-12


class TestSupervisionPlan:
    def test_uncertain_wrist_gets_heatmap_samples(self):
        visible = np.ones(NUM_JOINTS, bool)
        uncertain = np.zeros(NUM_JOINTS, bool)
        inside = np.ones(NUM_JOINTS, bool)
        visible[12] = False  # l_wrist, conf 0.4
        uncertain[12] = True
        plan = build_supervision_plan(make_status(visible, uncertain, inside))
        assert plan.source[12] == TargetSource.HEATMAP_SAMPLES

    def test_visible_spine_duplicates_ground_truth(self):
        plan = build_supervision_plan(make_status(
            np.ones(NUM_JOINTS, bool), np.zeros(NUM_JOINTS, bool), np.ones(NUM_JOINTS, bool)))
        assert plan.source[1] == TargetSource.DUPLICATED_GROUND_TRUTH

    def test_outside_crop_excluded(self):
        inside = np.ones(NUM_JOINTS, bool)
        inside[9] = False  # r_ankle
        plan = build_supervision_plan(make_status(
            np.ones(NUM_JOINTS, bool), np.zeros(NUM_JOINTS, bool), inside))
        assert plan.source[9] == TargetSource.EXCLUDED

    def test_invisible_head_excluded(self):
        visible = np.ones(NUM_JOINTS, bool)
        visible[3] = False  # head: not highly articulated
        uncertain = ~visible
        plan = build_supervision_plan(make_status(visible, uncertain, np.ones(NUM_JOINTS, bool)))
        assert plan.source[3] == TargetSource.EXCLUDED

    def test_invariants(self):
        rng = np.random.default_rng(5)
        from ambiflow.body import DEFAULT_TREE
        articulated = set(DEFAULT_TREE.highly_articulated)
        for _ in range(50):
            visible = rng.random(NUM_JOINTS) < 0.7
            uncertain = rng.random(NUM_JOINTS) < 0.5
            uncertain |= ~visible  # conf < 0.5 implies conf < 0.7
            inside = rng.random(NUM_JOINTS) < 0.9
            plan = build_supervision_plan(make_status(visible, uncertain, inside))
            for j in range(NUM_JOINTS):
                if plan.source[j] == TargetSource.HEATMAP_SAMPLES:
                    assert j in articulated and uncertain[j] and inside[j]
                expected_excluded = (not inside[j]) or (j not in articulated and not visible[j])
                assert (plan.source[j] == TargetSource.EXCLUDED) == expected_excluded


class TestLossMmd:
    def test_all_excluded_is_zero(self):
        plan = SupervisionPlan(
            source=np.full(NUM_JOINTS, TargetSource.EXCLUDED, dtype=np.int64),
            reasons=[""] * NUM_JOINTS,
        )
        proj = Node(np.random.default_rng(0).normal(size=(4, NUM_JOINTS, 2)))
        out = losses.loss_mmd(proj, plan, {}, np.zeros((NUM_JOINTS, 2)))
        assert float(out.data) == 0.0

    def test_collapsed_to_gt_is_zero(self):
        plan = SupervisionPlan(
            source=np.full(NUM_JOINTS, TargetSource.DUPLICATED_GROUND_TRUTH, dtype=np.int64),
            reasons=[""] * NUM_JOINTS,
        )
        gt = np.random.default_rng(1).normal(size=(NUM_JOINTS, 2)) * 0.5
        proj = Node(np.tile(gt[None], (6, 1, 1)))
        out = losses.loss_mmd(proj, plan, {}, gt)
        assert abs(float(out.data)) < 1e-12

    def test_single_joint_equals_oracle(self):
        rng = np.random.default_rng(2)
        source = np.full(NUM_JOINTS, TargetSource.EXCLUDED, dtype=np.int64)
        source[5] = TargetSource.HEATMAP_SAMPLES
        plan = SupervisionPlan(source=source, reasons=[""] * NUM_JOINTS)
        proj_data = rng.normal(size=(8, NUM_JOINTS, 2))
        samples = {5: rng.normal(size=(8, 2))}
        out = losses.loss_mmd(Node(proj_data), plan, samples, np.zeros((NUM_JOINTS, 2)))
        assert np.isclose(float(out.data), mmd_double_loop(proj_data[:, 5], samples[5]), atol=1e-12)

    def test_batch_path_matches_single(self):
        rng = np.random.default_rng(3)
        n = 6
        proj = rng.normal(size=(3, n, NUM_JOINTS, 2))
        select_b = np.array([0, 0, 2])
        select_k = np.array([5, 12, 9])
        targets = rng.normal(size=(3, n, 2))
        out = losses.loss_mmd_batch(Node(proj), select_b, select_k, targets, batch_size=3)
        ex0 = 0.5 * (mmd_double_loop(proj[0, :, 5], targets[0]) + mmd_double_loop(proj[0, :, 12], targets[1]))
        ex2 = mmd_double_loop(proj[2, :, 9], targets[2])
        assert np.isclose(float(out.data), (ex0 + 0.0 + ex2) / 3.0, atol=1e-12)


def full_mask():
    return PersonMask(np.ones((256, 256), dtype=bool))


def box_mask(x0, y0, x1, y1):
    g = np.zeros((256, 256), dtype=bool)
    g[y0:y1, x0:x1] = True
    return PersonMask(g)


class TestLossMask:
    def test_all_inside_is_zero(self):
        proj = Node(np.zeros((5, NUM_JOINTS, 2)))  # center of crop, inside full mask
        inv = np.ones(NUM_JOINTS, bool)
        samples = {j: np.zeros((5, 2)) for j in range(NUM_JOINTS)}
        out = losses.loss_mask(proj, inv, samples, full_mask(), object_occluded=False)
        assert float(out.data) == 0.0

    def test_arithmetic_single_contributor(self):
        # mask covers the left half; one hypothesis sample outside at (0.5, 0.5)
        mask = box_mask(0, 0, 128, 256)
        proj_data = np.full((1, NUM_JOINTS, 2), -0.5)
        proj_data[0, 4] = [0.5, 0.5]
        inv = np.zeros(NUM_JOINTS, bool)
        inv[4] = True
        samples = {4: np.array([[0.4, 0.45], [-0.9, 0.0]])}
        # nearest in-mask heatmap sample: (0.4, 0.45) is outside (x >= 0), so
        # only (-0.9, 0) survives the filter
        out = losses.loss_mask(Node(proj_data), inv, samples, mask, object_occluded=False)
        assert np.isclose(float(out.data), abs(0.5 + 0.9) + abs(0.5 - 0.0))

    def test_spec_arithmetic_when_both_targets_in_mask(self):
        mask = full_mask()
        grid = mask.grid.copy()
        # carve a hole so the sample at (0.5, 0.5) -> px (192, 192) is outside
        grid[180:220, 180:220] = False
        mask = PersonMask(grid)
        proj_data = np.full((1, NUM_JOINTS, 2), 0.5)
        inv = np.zeros(NUM_JOINTS, bool)
        inv[7] = True
        samples = {7: np.array([[0.4, 0.45]])}
        out = losses.loss_mask(Node(proj_data), inv, samples, mask, object_occluded=False)
        assert np.isclose(float(out.data), 0.15)

    def test_object_occlusion_skips(self):
        proj = Node(np.full((3, NUM_JOINTS, 2), 0.9))
        inv = np.ones(NUM_JOINTS, bool)
        samples = {j: np.zeros((3, 2)) for j in range(NUM_JOINTS)}
        out = losses.loss_mask(proj, inv, samples, box_mask(0, 0, 10, 10), object_occluded=True)
        assert float(out.data) == 0.0

    def test_monotone_under_mask_growth(self):
        rng = np.random.default_rng(6)
        proj = Node(rng.uniform(-1, 1, size=(10, NUM_JOINTS, 2)))
        inv = np.ones(NUM_JOINTS, bool)
        samples = {j: rng.uniform(-0.4, 0.4, size=(10, 2)) for j in range(NUM_JOINTS)}
        small = box_mask(96, 96, 160, 160)
        big = box_mask(64, 64, 224, 224)
        loss_small = float(losses.loss_mask(proj, inv, samples, small, False).data)
        loss_big = float(losses.loss_mask(proj, inv, samples, big, False).data)
        assert loss_big <= loss_small

    def test_no_inmask_heatmap_samples_is_zero(self):
        mask = box_mask(0, 0, 64, 64)
        proj = Node(np.full((2, NUM_JOINTS, 2), 0.9))
        inv = np.ones(NUM_JOINTS, bool)
        samples = {j: np.full((2, 2), 0.9) for j in range(NUM_JOINTS)}  # all outside
        out = losses.loss_mask(proj, inv, samples, mask, object_occluded=False)
        assert float(out.data) == 0.0


class TestDenseLosses:
    def test_nll_identity_flow_value(self):
        from ambiflow.flow import FlowConfig, FlowModel
        model = FlowModel(FlowConfig(dim=96, cond_dim=4, n_layers=2, hidden=8))
        lp = model.log_prob(np.zeros((1, 96)), np.zeros((1, 4)))
        out = losses.loss_nll(lp)
        assert np.isclose(float(out.data), 48.0 * np.log(2.0 * np.pi), atol=1e-9)
        assert np.isclose(float(out.data), 88.218, atol=1e-3)

    def test_beta_zero(self):
        b = np.random.default_rng(0).normal(size=(3, 4))
        assert float(losses.loss_beta(Node(b), b).data) == 0.0

    def test_beta_matches_reevaluation(self):
        rng = np.random.default_rng(1)
        b = rng.normal(size=(5, 4))
        bgt = rng.normal(size=(5, 4))
        expected = np.mean([(np.linalg.norm(b[i] - bgt[i]) ** 2) for i in range(5)])
        assert abs(float(losses.loss_beta(Node(b), bgt).data) - expected) < 1e-12

    def test_l2d_zero_and_offset(self):
        gt = np.random.default_rng(2).uniform(0, 256, size=(2, NUM_JOINTS, 2))
        assert float(losses.loss_2d(Node(gt), gt).data) == 0.0
        off = gt + 2.0
        assert np.isclose(float(losses.loss_2d(Node(off), gt).data), 4.0)

    def test_l2d_samples_variants(self):
        rng = np.random.default_rng(3)
        gt = rng.uniform(0, 256, size=(2, NUM_JOINTS, 2))
        proj = np.tile(gt[:, None], (1, 4, 1, 1)) + 3.0
        visible = np.zeros((2, NUM_JOINTS), dtype=bool)
        assert np.isclose(float(losses.loss_2d_samples(Node(proj), gt, visible, "all").data), 6.0)
        # no visible joints -> 0
        assert float(losses.loss_2d_samples(Node(proj), gt, visible, "visible").data) == 0.0
        visible[0, 3] = True
        assert np.isclose(float(losses.loss_2d_samples(Node(proj), gt, visible, "visible").data), 6.0)

    def test_orth_identity_seeds(self):
        theta = Node(np.zeros((2, NUM_JOINTS * 6)))
        assert float(losses.loss_orth(theta).data) == 0.0

    def test_orth_scaled_seed(self):
        theta = np.zeros((1, NUM_JOINTS * 6))
        theta[0, 0] = 1.0  # a1 of joint 0 becomes (2, 0, 0)
        out = float(losses.loss_orth(Node(theta)).data)
        assert np.isclose(out, 9.0 / NUM_JOINTS)

    def test_orth_gradient(self):
        rng = np.random.default_rng(4)

        def f(v):
            theta = Node(v[None, :], requires_grad=True)
            with dc.Tape() as t:
                out = losses.loss_orth(theta)
                t.backward(out)
            return float(out.data), theta.grad[0]

        assert dc.grad_check(f, rng.normal(size=NUM_JOINTS * 6) * 0.3, h=1e-6) < 1e-6


class TestTotalLoss:
    def unit_terms(self):
        return {name: Node(np.ones(())) for name in ("beta", "l2d", "nll", "orth", "mmd", "mask")}

    def test_all_zero(self):
        terms = {name: Node(np.zeros(())) for name in ("beta", "l2d", "nll", "orth", "mmd", "mask")}
        total, logged = losses.total_loss(terms, LossWeights())
        assert float(total.data) == 0.0

    def test_unit_terms_paper_weights(self):
        total, logged = losses.total_loss(self.unit_terms(), LossWeights())
        # 5e-4 + 1e-2 + 1e-1 + 1e-1 + 5e-2 + 1e-1
        assert np.isclose(float(total.data), 0.3605)
        assert logged == {k: 1.0 for k in logged}

    def test_linearity_in_weights(self):
        w = LossWeights()
        w2 = LossWeights(**{k: 2 * v for k, v in w.to_dict().items()})
        t1, _ = losses.total_loss(self.unit_terms(), w)
        t2, _ = losses.total_loss(self.unit_terms(), w2)
        assert np.isclose(float(t2.data), 2.0 * float(t1.data))

    def test_zeroed_mmd_weight_removes_term(self):
        w = LossWeights(mmd=0.0)
        total, _ = losses.total_loss(self.unit_terms(), w)
        assert np.isclose(float(total.data), 0.3605 - 5e-2)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError, match="negative"):
            LossWeights(nll=-1.0)

    def test_kernel_spec_positive(self):
        with pytest.raises(ValueError, match="positive"):
            KernelSpec(bandwidths=(0.1, -0.2))
