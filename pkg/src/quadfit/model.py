"""Parametric quadruped mesh: PCA shape space, forward kinematics, linear
blend skinning, and 3D keypoint regression.

The deformation is pure LBS: shape blendshapes displace the template, rest
joints are regressed from the shaped vertices, joint rotations propagate down
the kinematic tree, and skinning weights blend the per-joint rigid
transforms. Pose-dependent corrective blendshapes are intentionally absent;
the model file schema leaves room to add them later.

The global rotation pivots about the root joint's rest position, so a rigid
rotation of the pose equals a rigid rotation of the posed mesh about that
point. Translation is not a model parameter; cameras supply it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tape as tp

MODEL_FORMAT = "quadfit-model/1"


@dataclass(frozen=True)
class KeypointDef:
    """A keypoint as a sparse convex combination of mesh vertices."""

    name: str
    region: str
    vertices: np.ndarray  # (n,) int
    weights: np.ndarray  # (n,) float, sums to 1


@dataclass(frozen=True)
class MeshModel:
    template: np.ndarray  # (V, 3)
    shape_dirs: np.ndarray  # (V, 3, S)
    shape_mean: np.ndarray  # (S,)
    shape_cov: np.ndarray  # (S, S)
    joint_regressor: np.ndarray  # (J, V)
    kinematic_tree: np.ndarray  # (J,) parent indices, root = -1
    skin_weights: np.ndarray  # (V, J) row-stochastic
    keypoint_defs: tuple  # K KeypointDef entries
    pose_prior_mean: np.ndarray  # ((J-1)*3,)
    pose_prior_cov: np.ndarray  # ((J-1)*3, (J-1)*3)
    faces: np.ndarray  # (F, 3) int

    @property
    def n_vertices(self):
        return self.template.shape[0]

    @property
    def n_joints(self):
        return self.kinematic_tree.shape[0]

    @property
    def n_shape(self):
        return self.shape_dirs.shape[2]

    @property
    def n_keypoints(self):
        return len(self.keypoint_defs)

    def keypoint_matrix(self):
        """Dense (K, V) interpolation matrix equivalent to keypoint_defs."""
        W = np.zeros((self.n_keypoints, self.n_vertices))
        for k, kp in enumerate(self.keypoint_defs):
            W[k, kp.vertices] = kp.weights
        return W

    def keypoint_regions(self):
        return tuple(kp.region for kp in self.keypoint_defs)

    def body_length(self):
        """Nose-to-tail-tip distance of the template, used as an error scale."""
        kps = self.keypoint_matrix() @ self.template
        names = [kp.name for kp in self.keypoint_defs]
        return float(np.linalg.norm(kps[names.index("nose")] - kps[names.index("tail_tip")]))


@dataclass
class PoseState:
    """Per-clip pose: shape, global and joint rotations, weak-perspective camera."""

    beta: np.ndarray  # (S,)
    theta_global: np.ndarray  # (T, 3) axis-angle
    theta_joints: np.ndarray  # (T, J-1, 3) axis-angle
    cam_weak: np.ndarray  # (T, 3) scale, px, py

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.theta_global = np.asarray(self.theta_global, dtype=np.float64)
        self.theta_joints = np.asarray(self.theta_joints, dtype=np.float64)
        self.cam_weak = np.asarray(self.cam_weak, dtype=np.float64)

    @property
    def n_frames(self):
        return self.theta_global.shape[0]

    def validate(self):
        lim = np.pi + 1e-6
        if np.linalg.norm(self.theta_global, axis=-1).max(initial=0.0) >= lim:
            raise ValueError("invalid pose: theta_global")
        if self.theta_joints.size and np.linalg.norm(self.theta_joints, axis=-1).max() >= lim:
            raise ValueError("invalid pose: theta_joints")
        if (self.cam_weak[:, 0] <= 0).any():
            raise ValueError("invalid pose: cam_weak")
        return self

    def canonicalize(self):
        """Wrap all rotation vectors to magnitude <= pi (same rotations)."""
        return PoseState(
            beta=self.beta.copy(),
            theta_global=_wrap_rotvec(self.theta_global),
            theta_joints=_wrap_rotvec(self.theta_joints),
            cam_weak=self.cam_weak.copy(),
        )

    def copy(self):
        return PoseState(
            self.beta.copy(),
            self.theta_global.copy(),
            self.theta_joints.copy(),
            self.cam_weak.copy(),
        )


def _wrap_rotvec(r):
    r = np.asarray(r, dtype=np.float64)
    mag = np.linalg.norm(r, axis=-1, keepdims=True)
    wrapped = mag - 2.0 * np.pi * np.round(mag / (2.0 * np.pi))
    scale = np.where(mag > 1e-12, wrapped / np.where(mag > 1e-12, mag, 1.0), 1.0)
    return r * scale


def topo_order(tree):
    """Joint indices ordered parents-first; validates single-root acyclicity."""
    tree = np.asarray(tree)
    roots = np.where(tree == -1)[0]
    if len(roots) != 1:
        raise ValueError("invalid model: kinematic_tree")
    order = [int(roots[0])]
    seen = {int(roots[0])}
    remaining = set(range(len(tree))) - seen
    while remaining:
        progressed = False
        for j in sorted(remaining):
            p = int(tree[j])
            if p in seen:
                order.append(j)
                seen.add(j)
                remaining.discard(j)
                progressed = True
        if not progressed:
            raise ValueError("invalid model: kinematic_tree")
    return order


def validate_model(m: MeshModel) -> MeshModel:
    V, J, S = m.n_vertices, m.n_joints, m.n_shape
    if m.template.shape != (V, 3):
        raise ValueError("invalid model: template")
    if m.shape_dirs.shape != (V, 3, S):
        raise ValueError("invalid model: shape_dirs")
    if m.shape_mean.shape != (S,) or m.shape_cov.shape != (S, S):
        raise ValueError("invalid model: shape_mean_cov")
    if m.joint_regressor.shape != (J, V):
        raise ValueError("invalid model: joint_regressor")
    if m.skin_weights.shape != (V, J):
        raise ValueError("invalid model: skin_weights")
    if (m.skin_weights < -1e-12).any() or np.abs(m.skin_weights.sum(axis=1) - 1.0).max() > 1e-6:
        raise ValueError("invalid model: skin_weights")
    tree = np.asarray(m.kinematic_tree)
    if tree.ndim != 1 or ((tree < -1) | (tree >= J)).any():
        raise ValueError("invalid model: kinematic_tree")
    topo_order(tree)
    for kp in m.keypoint_defs:
        if kp.vertices.shape != kp.weights.shape or kp.vertices.ndim != 1:
            raise ValueError("invalid model: keypoint_defs")
        if ((kp.vertices < 0) | (kp.vertices >= V)).any():
            raise ValueError("invalid model: keypoint_defs")
        if abs(float(kp.weights.sum()) - 1.0) > 1e-6:
            raise ValueError("invalid model: keypoint_defs")
    d = (J - 1) * 3
    if m.pose_prior_mean.shape != (d,) or m.pose_prior_cov.shape != (d, d):
        raise ValueError("invalid model: pose_prior")
    if m.faces.size and (m.faces.ndim != 2 or m.faces.shape[1] != 3 or ((m.faces < 0) | (m.faces >= V)).any()):
        raise ValueError("invalid model: faces")
    return m


def shaped_vertices(model: MeshModel, beta):
    """Template plus shape blendshape displacement, (V, 3)."""
    V, S = model.n_vertices, model.n_shape
    if tp.value(beta).shape != (S,):
        raise ValueError("shape error")
    dirs2d = model.shape_dirs.reshape(V * 3, S)
    disp = tp.reshape(tp.matmul(dirs2d, tp.reshape(beta, (S, 1))), (V, 3))
    return model.template + disp


def rest_joints(model: MeshModel, shaped):
    """Rest joint locations regressed from shaped vertices, (J, 3)."""
    return tp.matmul(model.joint_regressor, shaped)


def pose_sequence(model: MeshModel, beta, theta_global, theta_joints):
    """Pose T frames at once; returns (T, V, 3) vertices.

    beta: (S,), theta_global: (T, 3), theta_joints: (T, J-1, 3).
    """
    J = model.n_joints
    tg = tp.value(theta_global)
    tj = tp.value(theta_joints)
    if tg.ndim != 2 or tg.shape[1] != 3:
        raise ValueError("shape error")
    T = tg.shape[0]
    if tj.shape != (T, J - 1, 3):
        raise ValueError("shape error")

    shaped = shaped_vertices(model, beta)
    joints = rest_joints(model, shaped)

    rots = tp.concatenate([tp.reshape(theta_global, (T, 1, 3)), theta_joints], axis=1)
    R = tp.rodrigues(rots)  # (T, J, 3, 3)

    order = topo_order(model.kinematic_tree)
    Rw = [None] * J
    tw = [None] * J
    for j in order:
        Rj = R[:, j]
        p = int(model.kinematic_tree[j])
        if p < 0:
            Rw[j] = Rj
            tw[j] = tp.reshape(joints[j], (1, 3)) + np.zeros((T, 3))
        else:
            Rw[j] = tp.matmul(Rw[p], Rj)
            off = tp.reshape(joints[j] - joints[p], (3, 1))
            tw[j] = tp.reshape(tp.matmul(Rw[p], off), (T, 3)) + tw[p]

    posed = None
    for j in range(J):
        col = model.skin_weights[:, j]
        if not col.any():
            continue
        rot = tp.matmul(shaped, tp.mT(Rw[j]))  # (T, V, 3)
        pivot = tp.reshape(tp.matmul(Rw[j], tp.reshape(joints[j], (3, 1))), (T, 1, 3))
        trans = tp.reshape(tw[j], (T, 1, 3))
        term = col.reshape(1, -1, 1) * (rot - pivot + trans)
        posed = term if posed is None else posed + term
    return posed


def pose_mesh(model: MeshModel, beta, theta_global, theta_joints):
    """Pose a single frame; returns (V, 3) vertices.

    Differentiable with respect to beta and both rotation blocks.
    """
    if tp.value(theta_global).shape != (3,):
        raise ValueError("shape error")
    if tp.value(theta_joints).shape != (model.n_joints - 1, 3):
        raise ValueError("shape error")
    out = pose_sequence(
        model,
        beta,
        tp.reshape(theta_global, (1, 3)),
        tp.reshape(theta_joints, (1, model.n_joints - 1, 3)),
    )
    return tp.reshape(out, (model.n_vertices, 3))


def regress_keypoints3d(vertices, model: MeshModel):
    """Interpolate 3D keypoints from posed vertices.

    vertices: (V, 3) or (T, V, 3); returns (K, 3) or (T, K, 3).
    """
    v = tp.value(vertices)
    if v.shape[-2:] != (model.n_vertices, 3):
        raise ValueError("shape error")
    return tp.matmul(model.keypoint_matrix(), vertices)


def _arr(obj, key, dtype=np.float64):
    try:
        return np.asarray(obj[key], dtype=dtype)
    except (KeyError, TypeError, ValueError):
        raise ValueError("malformed model") from None


def load_model(path) -> MeshModel:
    """Read a model file; validates the schema and every invariant."""
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError:
            raise ValueError("malformed model") from None
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise ValueError("malformed model")
    for key in (
        "template",
        "shape_dirs",
        "shape_mean",
        "shape_cov",
        "joint_regressor",
        "kinematic_tree",
        "skin_weights",
        "keypoints",
        "pose_prior",
        "faces",
    ):
        if key not in doc:
            raise ValueError("malformed model")
    kps = []
    if not isinstance(doc["keypoints"], list):
        raise ValueError("malformed model")
    for entry in doc["keypoints"]:
        try:
            kps.append(
                KeypointDef(
                    name=str(entry["name"]),
                    region=str(entry["region"]),
                    vertices=np.asarray(entry["vertices"], dtype=np.int64),
                    weights=np.asarray(entry["weights"], dtype=np.float64),
                )
            )
        except (KeyError, TypeError, ValueError):
            raise ValueError("malformed model") from None
    prior = doc["pose_prior"]
    if not isinstance(prior, dict) or "mean" not in prior or "cov" not in prior:
        raise ValueError("malformed model")
    model = MeshModel(
        template=_arr(doc, "template"),
        shape_dirs=_arr(doc, "shape_dirs"),
        shape_mean=_arr(doc, "shape_mean"),
        shape_cov=_arr(doc, "shape_cov"),
        joint_regressor=_arr(doc, "joint_regressor"),
        kinematic_tree=_arr(doc, "kinematic_tree", dtype=np.int64),
        skin_weights=_arr(doc, "skin_weights"),
        keypoint_defs=tuple(kps),
        pose_prior_mean=_arr(prior, "mean"),
        pose_prior_cov=_arr(prior, "cov"),
        faces=_arr(doc, "faces", dtype=np.int64).reshape(-1, 3),
    )
    return validate_model(model)


def save_model(model: MeshModel, path):
    doc = {
        "format": MODEL_FORMAT,
        "template": model.template.tolist(),
        "shape_dirs": model.shape_dirs.tolist(),
        "shape_mean": model.shape_mean.tolist(),
        "shape_cov": model.shape_cov.tolist(),
        "joint_regressor": model.joint_regressor.tolist(),
        "kinematic_tree": model.kinematic_tree.tolist(),
        "skin_weights": model.skin_weights.tolist(),
        "keypoints": [
            {
                "name": kp.name,
                "region": kp.region,
                "vertices": kp.vertices.tolist(),
                "weights": kp.weights.tolist(),
            }
            for kp in model.keypoint_defs
        ],
        "pose_prior": {
            "mean": model.pose_prior_mean.tolist(),
            "cov": model.pose_prior_cov.tolist(),
        },
        "faces": model.faces.tolist(),
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True)


POSE_FORMAT = "quadfit-pose/1"


def save_pose(path, pose: PoseState):
    """Fitted or ground-truth parameters as deterministic JSON."""
    doc = {
        "format": POSE_FORMAT,
        "beta": pose.beta.tolist(),
        "theta_global": pose.theta_global.tolist(),
        "theta_joints": pose.theta_joints.tolist(),
        "cam_weak": pose.cam_weak.tolist(),
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True)


def load_pose(path) -> PoseState:
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError):
        raise ValueError(f"corrupt dataset: {path}") from None
    if not isinstance(doc, dict) or doc.get("format") != POSE_FORMAT:
        raise ValueError(f"corrupt dataset: {path}")
    try:
        pose = PoseState(
            beta=np.asarray(doc["beta"], dtype=np.float64),
            theta_global=np.asarray(doc["theta_global"], dtype=np.float64),
            theta_joints=np.asarray(doc["theta_joints"], dtype=np.float64),
            cam_weak=np.asarray(doc["cam_weak"], dtype=np.float64),
        )
    except (KeyError, TypeError, ValueError):
        raise ValueError(f"corrupt dataset: {path}") from None
    return pose.validate()
