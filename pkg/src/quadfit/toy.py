"""Procedural toy quadruped asset and its gait repertoire.

The bundled model is a box-limb horse built from vertex rings: a tapered
torso tube, neck, head, tail, and four two-segment legs. It is small enough
to fit and render in milliseconds yet exercises every code path a converted
full-scale model would (shape space, tree kinematics, skinning blends,
keypoint interpolation, priors).

Coordinate frame: x points from tail to nose, y points DOWN (toward the
ground), z is lateral. An identity global rotation therefore presents a side
view to a camera looking along +z, with legs toward the image bottom.

The gait repertoire lives here too: closed-form phase-offset sinusoid joint
angles for walk, trot, and canter. The pose prior bundled with the model is
a Gaussian fitted to samples of this repertoire, so the prior reflects the
motion family rather than any particular generated dataset.
"""

from __future__ import annotations

import functools

import numpy as np

from .model import KeypointDef, MeshModel, validate_model

# joint indices
ROOT, NECK, HEAD, TAIL = 0, 1, 2, 3
LF_HIP, LF_KNEE, LF_FOOT = 4, 5, 6
RF_HIP, RF_KNEE, RF_FOOT = 7, 8, 9
LH_HIP, LH_KNEE, LH_FOOT = 10, 11, 12
RH_HIP, RH_KNEE, RH_FOOT = 13, 14, 15

PARENTS = np.array([-1, 0, 1, 0, 0, 4, 5, 0, 7, 8, 0, 10, 11, 0, 13, 14], dtype=np.int64)

# legs in the order LF, RF, LH, RH: (hip, knee, foot, x, z)
LEGS = (
    (LF_HIP, LF_KNEE, LF_FOOT, 0.38, 0.14),
    (RF_HIP, RF_KNEE, RF_FOOT, 0.38, -0.14),
    (LH_HIP, LH_KNEE, LH_FOOT, -0.48, 0.14),
    (RH_HIP, RH_KNEE, RH_FOOT, -0.48, -0.14),
)

GAITS = ("walk", "trot", "canter")

# stride frequency in Hz and sagittal swing amplitude in radians
_GAIT_FREQ = {"walk": 1.2, "trot": 1.8, "canter": 2.4}
_GAIT_AMP = {"walk": 0.25, "trot": 0.35, "canter": 0.45}

# per-leg phase offsets in the order LF, RF, LH, RH; trot locks the
# diagonal pairs together
_GAIT_PHASE = {
    "walk": (np.pi / 2, 3 * np.pi / 2, 0.0, np.pi),
    "trot": (0.0, np.pi, np.pi, 0.0),
    "canter": (2 * np.pi / 3, 4 * np.pi / 3, 0.0, 2 * np.pi / 3),
}


def _ring8(cx, cy, cz, h, w):
    # rounded-box cross section in the (y, z) plane, 8 points
    pts = [(-h, 0), (-h, w), (0, w), (h, w), (h, 0), (h, -w), (0, -w), (-h, -w)]
    return [(cx, cy + dy, cz + dz) for dy, dz in pts]


def _ring4(cx, cy, cz, r):
    pts = [(-r, -r), (-r, r), (r, r), (r, -r)]
    return [(cx, cy + dy, cz + dz) for dy, dz in pts]


def _ring6(cx, cy, cz, r):
    ang = np.linspace(0, 2 * np.pi, 7)[:-1]
    return [(cx, cy + r * np.cos(a) * -1.0, cz + r * np.sin(a)) for a in ang]


def _ring_y(cx, y, cz, r):
    # ring for a vertical (leg) tube, cross section in the (x, z) plane
    pts = [(-r, -r), (-r, r), (r, r), (r, -r)]
    return [(cx + dx, y, cz + dz) for dx, dz in pts]


def _tube_faces(rings, base):
    faces = []
    k = len(rings[0])
    for r in range(len(rings) - 1):
        a = base + r * k
        b = a + k
        for i in range(k):
            j = (i + 1) % k
            faces.append((a + i, b + i, b + j))
            faces.append((a + i, b + j, a + j))
    first = base
    last = base + (len(rings) - 1) * k
    for i in range(1, k - 1):
        faces.append((first, first + i, first + i + 1))
        faces.append((last, last + i, last + i + 1))
    return faces


@functools.lru_cache(maxsize=1)
def toy_model() -> MeshModel:
    """Build the bundled toy quadruped (V=240, J=16, S=4, K=17)."""
    verts = []
    faces = []
    ring_index = {}

    def add_tube(name, rings):
        base = len(verts)
        for i, ring in enumerate(rings):
            start = len(verts)
            ring_index[(name, i)] = (start + np.arange(len(ring))).astype(np.int64)
            verts.extend(ring)
        faces.extend(_tube_faces(rings, base))

    # torso: 7 rings x 8 = 56 vertices, tapered at both ends
    torso_x = np.linspace(-0.65, 0.55, 7)
    torso_rings = []
    for i, x in enumerate(torso_x):
        s = 0.75 if i in (0, 6) else 1.0
        torso_rings.append(_ring8(x, 0.0, 0.0, 0.22 * s, 0.16 * s))
    add_tube("torso", torso_rings)

    # neck: 3 rings x 4 = 12
    neck_pts = np.linspace((0.55, -0.10, 0.0), (0.80, -0.38, 0.0), 3)
    add_tube("neck", [_ring4(*p, 0.09) for p in neck_pts])

    # head: 4 rings x 6 = 24, tapering toward the nose
    head_pts = np.linspace((0.80, -0.38, 0.0), (1.10, -0.30, 0.0), 4)
    head_r = np.linspace(0.085, 0.045, 4)
    add_tube("head", [_ring6(*p, r) for p, r in zip(head_pts, head_r)])

    # tail: 5 rings x 4 = 20
    tail_pts = np.linspace((-0.65, -0.15, 0.0), (-0.95, 0.15, 0.0), 5)
    tail_r = np.linspace(0.035, 0.02, 5)
    add_tube("tail", [_ring4(*p, r) for p, r in zip(tail_pts, tail_r)])

    # legs: per leg two 4-ring tubes (upper hip->knee, lower knee->foot)
    leg_names = ("lf", "rf", "lh", "rh")
    hip_y, knee_y, foot_y = 0.12, 0.45, 0.82
    for (hip, knee, foot, x, z), nm in zip(LEGS, leg_names):
        up_y = np.linspace(hip_y, knee_y, 4)
        lo_y = np.linspace(knee_y, foot_y, 4)
        add_tube(f"{nm}_upper", [_ring_y(x, y, z, 0.055) for y in up_y])
        add_tube(f"{nm}_lower", [_ring_y(x, y, z, 0.04) for y in lo_y])

    template = np.asarray(verts, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    V = template.shape[0]
    J = len(PARENTS)

    # joint regressor: each joint is the centroid of designated rings, so
    # rest joints track the shape space for free
    regressor = np.zeros((J, V))

    def set_joint(j, *ring_keys):
        idx = np.concatenate([ring_index[k] for k in ring_keys])
        regressor[j, idx] = 1.0 / len(idx)

    set_joint(ROOT, ("torso", 3))
    set_joint(NECK, ("neck", 0))
    set_joint(HEAD, ("head", 0))
    set_joint(TAIL, ("tail", 0))
    for (hip, knee, foot, x, z), nm in zip(LEGS, leg_names):
        set_joint(hip, (f"{nm}_upper", 0))
        set_joint(knee, (f"{nm}_upper", 3), (f"{nm}_lower", 0))
        set_joint(foot, (f"{nm}_lower", 3))

    # skinning: one owning joint per ring with 50/50 blends at part borders
    skin = np.zeros((V, J))

    def bind(ring_key, pairs):
        for v in ring_index[ring_key]:
            for j, w in pairs:
                skin[v, j] += w

    for i in range(7):
        bind(("torso", i), [(ROOT, 1.0)])
    bind(("neck", 0), [(ROOT, 0.5), (NECK, 0.5)])
    bind(("neck", 1), [(NECK, 1.0)])
    bind(("neck", 2), [(NECK, 0.5), (HEAD, 0.5)])
    bind(("head", 0), [(NECK, 0.5), (HEAD, 0.5)])
    for i in (1, 2, 3):
        bind(("head", i), [(HEAD, 1.0)])
    bind(("tail", 0), [(ROOT, 0.5), (TAIL, 0.5)])
    for i in (1, 2, 3, 4):
        bind(("tail", i), [(TAIL, 1.0)])
    for (hip, knee, foot, x, z), nm in zip(LEGS, leg_names):
        bind((f"{nm}_upper", 0), [(ROOT, 0.5), (hip, 0.5)])
        bind((f"{nm}_upper", 1), [(hip, 1.0)])
        bind((f"{nm}_upper", 2), [(hip, 1.0)])
        bind((f"{nm}_upper", 3), [(hip, 0.5), (knee, 0.5)])
        bind((f"{nm}_lower", 0), [(hip, 0.5), (knee, 0.5)])
        bind((f"{nm}_lower", 1), [(knee, 1.0)])
        bind((f"{nm}_lower", 2), [(knee, 1.0)])
        bind((f"{nm}_lower", 3), [(knee, 0.5), (foot, 0.5)])

    # shape space: overall size, body length, leg length, torso girth
    S = 4
    dirs = np.zeros((V, 3, S))
    root_rest = regressor[ROOT] @ template
    dirs[:, :, 0] = 0.10 * (template - root_rest)
    dirs[:, 0, 1] = 0.10 * template[:, 0]
    leg_mask = template[:, 1] > hip_y + 1e-9
    ramp = np.clip(template[:, 1] - hip_y, 0.0, None)
    dirs[leg_mask, 1, 2] = 0.12 * ramp[leg_mask]
    torso_mask = np.zeros(V, dtype=bool)
    for i in range(7):
        torso_mask[ring_index[("torso", i)]] = True
    dirs[torso_mask, 1, 3] = 0.08 * template[torso_mask, 1]
    dirs[torso_mask, 2, 3] = 0.08 * template[torso_mask, 2]

    def top_vertex(ring_key):
        idx = ring_index[ring_key]
        return idx[np.argmin(template[idx, 1])]

    def bottom_vertex(ring_key):
        idx = ring_index[ring_key]
        return idx[np.argmax(template[idx, 1])]

    def centroid_def(name, region, *ring_keys):
        idx = np.concatenate([ring_index[k] for k in ring_keys])
        return KeypointDef(name, region, idx, np.full(len(idx), 1.0 / len(idx)))

    def single_def(name, region, v):
        return KeypointDef(name, region, np.array([v], dtype=np.int64), np.array([1.0]))

    kps = [
        centroid_def("nose", "head", ("head", 3)),
        centroid_def("poll", "head", ("head", 0)),
        centroid_def("neck_base", "neck", ("neck", 0)),
        single_def("withers", "torso", top_vertex(("torso", 5))),
        single_def("croup", "torso", top_vertex(("torso", 1))),
        centroid_def("tail_base", "tail", ("tail", 0)),
        centroid_def("tail_tip", "tail", ("tail", 4)),
    ]
    for (hip, knee, foot, x, z), nm in zip(LEGS, leg_names):
        kps.append(centroid_def(f"knee_{nm}", f"leg_{nm}", (f"{nm}_upper", 3), (f"{nm}_lower", 0)))
        kps.append(centroid_def(f"hoof_{nm}", f"leg_{nm}", (f"{nm}_lower", 3)))
    kps.append(single_def("chest", "torso", bottom_vertex(("torso", 6))))
    kps.append(single_def("belly", "torso", bottom_vertex(("torso", 3))))

    mean, cov = _fit_pose_prior()
    model = MeshModel(
        template=template,
        shape_dirs=dirs,
        shape_mean=np.zeros(S),
        shape_cov=np.eye(S),
        joint_regressor=regressor,
        kinematic_tree=PARENTS,
        skin_weights=skin,
        keypoint_defs=tuple(kps),
        pose_prior_mean=mean,
        pose_prior_cov=cov,
        faces=faces,
    )
    return validate_model(model)


def gait_joint_angles(gait, phase, amp_scale=1.0):
    """Joint rotations (J-1, 3) of the motion repertoire at a stride phase.

    phase is in radians (one stride = 2*pi). The neck/head bob carries both a
    stride-frequency component and its second harmonic, so non-leg keypoints
    are informative about leg phase.
    """
    if gait not in GAITS:
        raise ValueError(f"unknown gait: {gait}")
    amp = _GAIT_AMP[gait] * amp_scale
    offs = _GAIT_PHASE[gait]
    th = np.zeros((len(PARENTS) - 1, 3))

    def set_rot(joint, axis, angle):
        th[joint - 1, axis] = angle

    for (hip, knee, foot, x, z), off in zip(LEGS, offs):
        ph = phase + off
        set_rot(hip, 2, amp * np.sin(ph))
        set_rot(knee, 2, 0.9 * amp * (0.5 + 0.5 * np.sin(ph + 1.3)))
        set_rot(foot, 2, 0.3 * amp * np.sin(ph + 2.1))
    bob = 0.12 * amp * (0.6 * np.sin(phase) + 0.4 * np.sin(2.0 * phase + 0.7))
    set_rot(NECK, 2, bob)
    set_rot(HEAD, 2, 0.5 * 0.12 * amp * (0.6 * np.sin(phase + 0.3) + 0.4 * np.sin(2.0 * phase + 1.0)))
    set_rot(TAIL, 1, 0.06 * np.sin(phase + 1.0))
    return th


def gait_frequency(gait):
    if gait not in GAITS:
        raise ValueError(f"unknown gait: {gait}")
    return _GAIT_FREQ[gait]


def _fit_pose_prior(n=1500, seed=12345):
    # Gaussian over vec(theta_joints) sampled from the repertoire itself
    rng = np.random.default_rng(seed)
    samples = np.empty((n, (len(PARENTS) - 1) * 3))
    for i in range(n):
        gait = GAITS[i % len(GAITS)]
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.uniform(0.7, 1.3)
        samples[i] = gait_joint_angles(gait, phase, amp).ravel()
    mean = samples.mean(axis=0)
    cov = np.cov(samples.T) + 1e-4 * np.eye(samples.shape[1])
    return mean, cov
