"""Mesh model: skinning, keypoint regression, validation, serialization."""

import dataclasses

import numpy as np
import pytest

import quadfit.model as md
import quadfit.tape as tp
import quadfit.toy as toy


def _rotmat(r):
    return tp.rodrigues(np.asarray(r, dtype=np.float64).reshape(1, 3))[0]


def _rotvec_of(R):
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    th = np.arccos(c)
    if th < 1e-12:
        return np.zeros(3)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return w / (2.0 * np.sin(th)) * th


def test_toy_dimensions(model):
    assert model.n_vertices == 240
    assert model.n_joints == 16
    assert model.n_shape == 4
    assert model.n_keypoints == 17


def test_bad_skin_row_rejected(model):
    sw = model.skin_weights.copy()
    sw[11] = sw[11] * 0.9
    bad = dataclasses.replace(model, skin_weights=sw)
    with pytest.raises(ValueError, match="invalid model: skin_weights"):
        md.validate_model(bad)


def test_tree_cycle_rejected(model):
    tree = model.kinematic_tree.copy()
    tree[1] = 2
    tree[2] = 1
    bad = dataclasses.replace(model, kinematic_tree=tree)
    with pytest.raises(ValueError, match="invalid model: kinematic_tree"):
        md.validate_model(bad)


def test_identity_pose_is_template(model):
    J, S = model.n_joints, model.n_shape
    v = md.pose_mesh(model, np.zeros(S), np.zeros(3), np.zeros((J - 1, 3)))
    np.testing.assert_allclose(tp.value(v), model.template, atol=1e-12)


def test_global_rotation_pivots_at_root_rest(model, rng):
    J, S = model.n_joints, model.n_shape
    r = rng.normal(size=3)
    v = tp.value(md.pose_mesh(model, np.zeros(S), r, np.zeros((J - 1, 3))))
    root = tp.value(md.rest_joints(model, model.template))[0]
    expect = (model.template - root) @ _rotmat(r).T + root
    np.testing.assert_allclose(v, expect, atol=1e-9)


def test_single_joint_rotation_hand_computed(model):
    # rotate the left-front mid leg joint (5) by 90 deg about x; the hoof
    # keypoint is skinned entirely to joints 5 and 6, both in its subtree,
    # so it moves rigidly about joint 5's rest position
    J, S = model.n_joints, model.n_shape
    tj = np.zeros((J - 1, 3))
    tj[4] = [np.pi / 2.0, 0.0, 0.0]  # theta_joints[j-1] drives joint j
    v = tp.value(md.pose_mesh(model, np.zeros(S), np.zeros(3), tj))
    kps = tp.value(md.regress_keypoints3d(v, model))

    names = [k.name for k in model.keypoint_defs]
    hoof_rest = (model.keypoint_matrix() @ model.template)[names.index("hoof_lf")]
    j5 = tp.value(md.rest_joints(model, model.template))[5]
    R = _rotmat([np.pi / 2.0, 0.0, 0.0])
    expect = R @ (hoof_rest - j5) + j5
    np.testing.assert_allclose(kps[names.index("hoof_lf")], expect, atol=1e-9)


def test_keypoint_single_vertex_and_midpoint(model):
    defs = (
        md.KeypointDef("one", "torso", np.array([7]), np.array([1.0])),
        md.KeypointDef("mid", "torso", np.array([3, 9]), np.array([0.5, 0.5])),
    )
    m2 = dataclasses.replace(model, keypoint_defs=defs)
    kps = tp.value(md.regress_keypoints3d(model.template, m2))
    np.testing.assert_allclose(kps[0], model.template[7], atol=1e-15)
    np.testing.assert_allclose(
        kps[1], 0.5 * (model.template[3] + model.template[9]), atol=1e-15
    )


def test_nose_keypoint_matches_dense_oracle(model):
    kps = tp.value(md.regress_keypoints3d(model.template, model))
    dense = model.keypoint_matrix() @ model.template
    names = [k.name for k in model.keypoint_defs]
    np.testing.assert_allclose(kps[names.index("nose")], dense[names.index("nose")], atol=1e-12)
    np.testing.assert_allclose(kps, dense, atol=1e-12)


def test_lbs_equivariance_random(model):
    rng = np.random.default_rng(7)
    J, S = model.n_joints, model.n_shape
    for _ in range(100):
        beta = rng.normal(scale=0.5, size=S)
        tg = rng.normal(scale=0.6, size=3)
        tj = rng.normal(scale=0.2, size=(J - 1, 3))
        r_extra = rng.normal(scale=0.6, size=3)

        R = _rotmat(r_extra)
        composed = _rotvec_of(R @ _rotmat(tg))
        v1 = tp.value(md.pose_mesh(model, beta, composed, tj))

        v0 = tp.value(md.pose_mesh(model, beta, tg, tj))
        pivot = tp.value(md.rest_joints(model, md.shaped_vertices(model, beta)))[0]
        v_ref = (v0 - pivot) @ R.T + pivot
        np.testing.assert_allclose(v1, v_ref, atol=1e-6)


def test_shape_linearity_at_zero_pose(model, rng):
    J, S = model.n_joints, model.n_shape
    b1 = rng.normal(size=S)
    b2 = rng.normal(size=S)
    zg, zj = np.zeros(3), np.zeros((J - 1, 3))
    d12 = tp.value(md.pose_mesh(model, b1 + b2, zg, zj)) - model.template
    d1 = tp.value(md.pose_mesh(model, b1, zg, zj)) - model.template
    d2 = tp.value(md.pose_mesh(model, b2, zg, zj)) - model.template
    np.testing.assert_allclose(d12, d1 + d2, atol=1e-9)


def test_keypoints_commute_with_rigid(model, rng):
    v = model.template
    R = _rotmat(rng.normal(size=3))
    t = rng.normal(size=3)
    a = tp.value(md.regress_keypoints3d(v @ R.T + t, model))
    b = tp.value(md.regress_keypoints3d(v, model)) @ R.T + t
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_pose_mesh_gradients(model, rng):
    J, S = model.n_joints, model.n_shape
    probe = rng.normal(size=(model.n_vertices, 3))

    def f(x):
        beta = x[np.arange(S)]
        tg = tp.reshape(x[S + np.arange(3)], (3,))
        tj = tp.reshape(x[S + 3 + np.arange((J - 1) * 3)], (J - 1, 3))
        v = md.pose_mesh(model, beta, tg, tj)
        return tp.sum(tp.multiply(v, probe))

    x0 = rng.normal(scale=0.3, size=S + 3 + (J - 1) * 3)
    rep = tp.check_gradient(f, x0, probes=12)
    assert rep.passed, rep.max_rel_err


def test_pose_sequence_matches_per_frame(model, rng):
    J, S = model.n_joints, model.n_shape
    T = 3
    beta = rng.normal(scale=0.5, size=S)
    tg = rng.normal(scale=0.5, size=(T, 3))
    tj = rng.normal(scale=0.2, size=(T, J - 1, 3))
    seq = tp.value(md.pose_sequence(model, beta, tg, tj))
    for t in range(T):
        frame = tp.value(md.pose_mesh(model, beta, tg[t], tj[t]))
        np.testing.assert_allclose(seq[t], frame, atol=1e-12)


def test_model_roundtrip(model, tmp_path):
    path = tmp_path / "toy.json"
    md.save_model(model, path)
    m2 = md.load_model(path)
    np.testing.assert_allclose(m2.template, model.template, atol=1e-15)
    np.testing.assert_allclose(m2.skin_weights, model.skin_weights, atol=1e-15)
    np.testing.assert_array_equal(m2.kinematic_tree, model.kinematic_tree)
    assert [k.name for k in m2.keypoint_defs] == [k.name for k in model.keypoint_defs]


def test_malformed_model_file(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(ValueError, match="malformed model"):
        md.load_model(path)
    path.write_text('{"format": "something-else"}')
    with pytest.raises(ValueError, match="malformed model"):
        md.load_model(path)


def test_pose_state_validation():
    st = md.PoseState(
        beta=np.zeros(4),
        theta_global=np.array([[4.0, 0.0, 0.0]]),
        theta_joints=np.zeros((1, 15, 3)),
        cam_weak=np.array([[1.0, 0.0, 0.0]]),
    )
    with pytest.raises(ValueError, match="invalid pose: theta_global"):
        st.validate()
    wrapped = st.canonicalize()
    assert np.linalg.norm(wrapped.theta_global[0]) <= np.pi + 1e-9
    # same rotation after wrapping
    np.testing.assert_allclose(
        _rotmat(wrapped.theta_global[0]), _rotmat(st.theta_global[0]), atol=1e-12
    )
    wrapped.validate()

    bad_cam = md.PoseState(
        beta=np.zeros(4),
        theta_global=np.zeros((1, 3)),
        theta_joints=np.zeros((1, 15, 3)),
        cam_weak=np.array([[-0.1, 0.0, 0.0]]),
    )
    with pytest.raises(ValueError, match="invalid pose: cam_weak"):
        bad_cam.validate()


def test_pose_file_roundtrip(tmp_path, rng):
    pose = md.PoseState(
        beta=rng.normal(size=4),
        theta_global=rng.normal(scale=0.5, size=(5, 3)),
        theta_joints=rng.normal(scale=0.2, size=(5, 15, 3)),
        cam_weak=np.abs(rng.normal(size=(5, 3))) + 0.1,
    )
    path = tmp_path / "pose.json"
    md.save_pose(path, pose)
    back = md.load_pose(path)
    np.testing.assert_allclose(back.beta, pose.beta, atol=1e-15)
    np.testing.assert_allclose(back.theta_joints, pose.theta_joints, atol=1e-15)
    np.testing.assert_allclose(back.cam_weak, pose.cam_weak, atol=1e-15)


def test_body_length_is_nose_to_tail(model):
    kps = model.keypoint_matrix() @ model.template
    names = [k.name for k in model.keypoint_defs]
    d = np.linalg.norm(kps[names.index("nose")] - kps[names.index("tail_tip")])
    assert model.body_length() == pytest.approx(d)
    assert model.body_length() > 0
