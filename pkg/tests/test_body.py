import numpy as np
import pytest

from ambiflow import body
from ambiflow import diffcore as dc
from ambiflow.body import CameraModel, DEFAULT_TREE, Node


def rotz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rest_positions(tree=DEFAULT_TREE):
    pos = np.zeros((tree.num_joints, 3))
    for j in range(1, tree.num_joints):
        pos[j] = pos[tree.parents[j]] + tree.offsets[j]
    return pos


def random_pose(rng, scale=0.6):
    mats = []
    for _ in range(body.NUM_JOINTS):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = rng.normal() * scale
        k = np.array([
            [0, -axis[2], axis[1]],
            [axis[2], 0, -axis[0]],
            [-axis[1], axis[0], 0],
        ])
        mats.append(np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k))
    return body.matrix_to_pose(np.stack(mats)[None])[0]


def default_camera(rows=1, s=1.0, tx=0.0, ty=0.0, cx=512.0, cy=512.0, b=256.0, f=1000.0):
    ones = np.ones(rows)
    return CameraModel(
        s=Node(s * ones), tx=Node(tx * ones), ty=Node(ty * ones),
        bbox_cx=cx * ones, bbox_cy=cy * ones, bbox_size=b * ones, focal=f * ones,
    )


class TestRot6d:
    def test_identity_seed(self):
        assert np.allclose(body.rot6d_to_matrix([1, 0, 0, 0, 1, 0]), np.eye(3))

    def test_scale_invariance(self):
        assert np.allclose(body.rot6d_to_matrix([2, 0, 0, 0, 3, 0]), np.eye(3))

    def test_random_seeds_are_rotations(self):
        rng = np.random.default_rng(42)
        seeds = rng.normal(size=(10_000, 6))
        mats = body.rot6d_to_matrix(seeds)
        eye = np.eye(3)
        gram = np.einsum("bij,bik->bjk", mats, mats)
        assert np.max(np.abs(gram - eye)) < 1e-12
        assert np.max(np.abs(np.linalg.det(mats) - 1.0)) < 1e-12

    def test_degenerate_first_seed(self):
        with pytest.raises(ValueError, match="first seed"):
            body.rot6d_to_matrix([0, 0, 0, 0, 1, 0])

    def test_parallel_seeds(self):
        with pytest.raises(ValueError, match="parallel"):
            body.rot6d_to_matrix([1, 0, 0, 2, 0, 0])


class TestKinematicTree:
    def test_parent_indices_topological(self):
        assert DEFAULT_TREE.parents == (-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 2, 10, 11, 2, 13, 14)

    def test_highly_articulated_set(self):
        names = {body.JOINT_NAMES[j] for j in DEFAULT_TREE.highly_articulated}
        assert names == {
            "l_knee", "l_ankle", "r_knee", "r_ankle",
            "l_elbow", "l_wrist", "r_elbow", "r_wrist",
        }

    def test_round_trip_via_dict(self):
        d = DEFAULT_TREE.to_dict()
        again = body.KinematicTree.from_dict(d)
        assert again.parents == DEFAULT_TREE.parents
        assert np.array_equal(again.offsets, DEFAULT_TREE.offsets)


class TestForwardKinematics:
    def test_rest_pose_exact(self):
        theta = Node(np.zeros((1, body.POSE_DIM)))
        beta = Node(np.zeros((1, 4)))
        joints = body.forward_kinematics(theta, beta).data[0]
        assert np.array_equal(joints, rest_positions())

    def test_global_rotation_is_rigid(self):
        mats = np.tile(np.eye(3), (body.NUM_JOINTS, 1, 1))
        mats[0] = rotz(np.pi / 2)
        theta = Node(body.matrix_to_pose(mats[None]))
        joints = body.forward_kinematics(theta, Node(np.zeros((1, 4)))).data[0]
        expected = rest_positions() @ rotz(np.pi / 2).T
        assert np.max(np.abs(joints - expected)) < 1e-12

    def test_bone_lengths_invariant(self):
        rng = np.random.default_rng(5)
        tree = DEFAULT_TREE
        beta = rng.normal(size=4) * 0.2
        for _ in range(5):
            theta = Node(random_pose(rng)[None])
            joints = body.forward_kinematics(theta, Node(beta[None])).data[0]
            for j in range(1, tree.num_joints):
                length = np.linalg.norm(joints[j] - joints[tree.parents[j]])
                expected = np.linalg.norm(tree.offsets[j]) * np.exp(beta[tree.groups[j]])
                assert abs(length - expected) < 1e-12

    def test_beta_zero_gives_rest_lengths(self):
        lengths = DEFAULT_TREE.rest_lengths()
        assert lengths[0] == 0.0
        assert np.all(lengths[1:] > 0.0)


class TestDensePoints:
    def test_count_and_collinearity(self):
        theta = Node(np.zeros((1, body.POSE_DIM)))
        joints = body.forward_kinematics(theta, Node(np.zeros((1, 4))))
        pts = body.dense_body_points(joints).data[0]
        assert pts.shape == (body.NUM_DENSE_POINTS, 3)
        tree = DEFAULT_TREE
        for bi, child in enumerate(range(1, tree.num_joints)):
            a = joints.data[0, tree.parents[child]]
            b = joints.data[0, child]
            for k, t in enumerate(body.DENSE_FRACTIONS):
                p = pts[tree.num_joints + 4 * bi + k]
                assert np.linalg.norm(p - ((1 - t) * a + t * b)) < 1e-12

    def test_count_is_pose_invariant(self):
        rng = np.random.default_rng(1)
        theta = Node(random_pose(rng)[None])
        joints = body.forward_kinematics(theta, Node(np.zeros((1, 4))))
        assert body.dense_body_points(joints).data.shape[1] == 76


class TestWeakToPerspective:
    def test_closed_form(self):
        cam = default_camera(s=1.0, tx=0.3, ty=-0.2, b=256.0, f=1000.0)
        txp, typ, tz = body.weak_to_perspective(cam)
        assert np.isclose(tz.data[0], 7.8125)
        assert np.isclose(txp.data[0], 0.3)
        assert np.isclose(typ.data[0], -0.2)

    def test_focal_proportionality(self):
        tz1 = body.weak_to_perspective(default_camera(f=1000.0))[2].data[0]
        tz2 = body.weak_to_perspective(default_camera(f=2000.0))[2].data[0]
        assert np.isclose(tz2, 2.0 * tz1)

    def test_degenerate_scale_rejected(self):
        with pytest.raises(ValueError, match="degenerate"):
            body.weak_to_perspective(default_camera(s=1e-9))

    def test_pelvis_weak_perspective_consistency(self):
        # subject at crop center: perspective projection of the pelvis should
        # match the weak-perspective crop-space mapping
        cam = default_camera(s=1.1, tx=0.05, ty=-0.08)
        pelvis = np.zeros((1, 1, 3))
        px = body.project(Node(pelvis), cam).data[0, 0]
        weak = 128.0 + 128.0 * 1.1 * np.array([0.05, -0.08])
        assert np.max(np.abs(px - weak)) < 0.5


class TestProject:
    def test_optical_axis_hits_crop_center(self):
        cam = default_camera()
        px = body.project(Node(np.zeros((1, 1, 3))), cam).data[0, 0]
        assert np.allclose(px, [128.0, 128.0])

    def test_depth_doubling_halves_offsets(self):
        pts = np.array([[[0.4, -0.3, 0.0]]])
        cam1 = default_camera(s=1.0)
        cam2 = default_camera(s=0.5)  # doubles t_z
        p1 = body.project(Node(pts), cam1).data[0, 0] - 128.0
        p2 = body.project(Node(pts), cam2).data[0, 0] - 128.0
        assert np.allclose(p2, p1 / 2.0, atol=1e-9)

    def test_matches_homogeneous_matrix_oracle(self):
        rng = np.random.default_rng(9)
        cam = default_camera(s=1.3, tx=0.2, ty=0.1, cx=400.0, cy=700.0, b=310.0, f=1450.0)
        pts = rng.normal(size=(1, 12, 3)) * 0.4
        got = body.project(Node(pts), cam).data[0]

        txp, typ, tz = body.weak_to_perspective(cam)
        f_crop = 256.0 * 1450.0 / 310.0
        k = np.array([[f_crop, 0.0, 128.0], [0.0, f_crop, 128.0], [0.0, 0.0, 1.0]])
        rt = np.concatenate([np.eye(3), np.array([[txp.data[0]], [typ.data[0]], [tz.data[0]]])], axis=1)
        p = k @ rt
        homo = np.concatenate([pts[0], np.ones((12, 1))], axis=1)
        proj = (p @ homo.T).T
        expected = proj[:, :2] / proj[:, 2:3]
        assert np.max(np.abs(got - expected)) < 1e-9

    def test_unproject_along_ray_recovers_point(self):
        rng = np.random.default_rng(13)
        cam = default_camera(s=0.9, tx=0.1, ty=0.2)
        pts = rng.normal(size=(1, 5, 3)) * 0.5
        px = body.project(Node(pts), cam).data[0]
        txp, typ, tz = (v.data[0] for v in body.weak_to_perspective(cam))
        f_crop = 256.0 * cam.focal[0] / cam.bbox_size[0]
        z = pts[0, :, 2] + tz
        x = (px[:, 0] - 128.0) * z / f_crop - txp
        y = (px[:, 1] - 128.0) * z / f_crop - typ
        rec = np.stack([x, y, pts[0, :, 2]], axis=1)
        assert np.max(np.abs(rec - pts[0])) < 1e-9

    def test_point_behind_camera_raises(self):
        cam = default_camera()
        pts = np.array([[[0.0, 0.0, -10.0]]])
        with pytest.raises(ValueError, match="behind camera"):
            body.project(Node(pts), cam)

    def test_normalized_variant(self):
        cam = default_camera()
        px = body.project(Node(np.zeros((1, 1, 3))), cam)
        norm = body.normalize_crop(px).data[0, 0]
        assert np.allclose(norm, [0.0, 0.0])


class TestBboxFeature:
    def test_elementwise_division_exact(self):
        cam = default_camera(cx=128.0, cy=128.0, b=256.0, f=1000.0)
        assert np.array_equal(cam.bbox_feature()[0], np.array([128.0, 128.0, 256.0]) / 1000.0)


class TestFkGradients:
    def test_projection_pipeline_gradient(self):
        rng = np.random.default_rng(17)
        theta0 = random_pose(rng, scale=0.3)

        def f(v):
            theta = dc.Node(v[None, :], requires_grad=True)
            cam = default_camera()
            with dc.Tape() as t:
                joints = body.forward_kinematics(theta, Node(np.zeros((1, 4))))
                px = body.project(joints, cam)
                loss = dc.sumsq(px)
                t.backward(loss)
            return float(loss.data), theta.grad[0]

        assert dc.grad_check(f, theta0, h=1e-6) < 1e-4
