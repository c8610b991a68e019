"""Procedural articulated hand: template mesh, skeleton, skinning, rendering.

The template is a palm ellipsoid plus five tapered finger tubes sampled to
exactly 778 vertices; the skeleton is a wrist plus four joints per finger
(MCP, PIP, DIP, TIP). Skin weights come from inverse distance to the two
nearest joint influence segments; segments span bone midpoints around each
joint so that the regression matrix maps vertices back onto joints. Every
sample's ground truth is exactly self-consistent: J_3d is defined as
J @ V_3d and J_2d as project(J_3d).

All 3D units are millimeters; images are 224x224 pixels.
"""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .rng import substream

IMAGE_SIZE = 224
HEATMAP_SIGMA = 4.0
NUM_JOINTS = 21
NUM_VERTICES = 778

_PALM_VERTS = 298
_RINGS_PER_FINGER = 8
_VERTS_PER_RING = 12

_WRIST = np.array([0.0, 30.0, 0.0])
_PALM_CENTER = np.array([0.0, 46.0, 0.0])
_PALM_AXES = np.array([44.0, 46.0, 13.0])

# Shepard weighting: sharp enough that tube vertices dominate palm
# stragglers, keeping each joint's regression centroid on the joint
_IDW_POWER = 3.0
_IDW_EPS = 0.5

# per finger: MCP position, axis direction, segment lengths, base/tip radius
_FINGERS = [
    ("thumb", (36.0, 22.0, 0.0), (0.78, 0.63, 0.0), (32.0, 24.0, 20.0), (10.0, 6.5)),
    ("index", (27.0, 86.0, 0.0), (0.10, 1.00, 0.0), (30.0, 20.0, 15.0), (8.5, 5.5)),
    ("middle", (9.0, 90.0, 0.0), (0.00, 1.00, 0.0), (33.0, 22.0, 16.0), (8.5, 5.5)),
    ("ring", (-9.0, 88.0, 0.0), (-0.08, 1.00, 0.0), (30.0, 20.0, 15.0), (8.0, 5.0)),
    ("pinky", (-27.0, 82.0, 0.0), (-0.15, 1.00, 0.0), (24.0, 16.0, 12.0), (7.0, 4.5)),
]

# max rotation-vector angle (radians): wrist, then MCP/PIP/DIP/TIP per finger
_LIMIT_WRIST = 0.9
_LIMIT_MCP = 1.1
_LIMIT_PIP = 1.4
_LIMIT_DIP = 0.9
_ABDUCTION = 0.22


@dataclass
class TemplateMesh:
    vertices: np.ndarray  # (778, 3) mm
    faces: np.ndarray  # (F, 3) int32, provenance only


@dataclass
class Skeleton:
    joints: np.ndarray  # (21, 3) mm
    parents: np.ndarray  # (21,) int, root 0 has parent -1
    limits: np.ndarray  # (21,) max rotation angle in radians
    flex_axes: np.ndarray  # (21, 3) unit flexion axis per joint


@dataclass
class SkinWeights:
    W: np.ndarray  # (778, 21), row-stochastic, <= 4 nonzeros per row


@dataclass
class HandSample:
    input: np.ndarray  # (22, 224, 224)
    V_3d: np.ndarray  # (778, 3) mm, root-relative
    J_3d: np.ndarray  # (21, 3) mm, root-relative
    J_2d: np.ndarray  # (21, 2) px
    camera: np.ndarray  # (3,) scale px/mm, tx px, ty px
    seed: int


@dataclass
class HandAssets:
    template: TemplateMesh
    skeleton: Skeleton
    weights: SkinWeights
    J: np.ndarray  # (21, 778) regression matrix, rows sum to 1


def _fibonacci_sphere(n):
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    theta = np.pi * (1.0 + np.sqrt(5.0)) * i
    return np.stack([r * np.cos(theta), z, r * np.sin(theta)], axis=1)


def _build_skeleton():
    joints = np.zeros((NUM_JOINTS, 3))
    parents = np.full(NUM_JOINTS, -1, dtype=np.int64)
    limits = np.zeros(NUM_JOINTS)
    flex = np.zeros((NUM_JOINTS, 3))
    joints[0] = _WRIST
    limits[0] = _LIMIT_WRIST
    flex[0] = (0.0, 0.0, 1.0)
    z = np.array([0.0, 0.0, 1.0])
    for f, (_, mcp, d, lens, _) in enumerate(_FINGERS):
        base = 1 + 4 * f
        d = np.asarray(d) / np.linalg.norm(d)
        mcp = np.asarray(mcp)
        pts = [mcp, mcp + lens[0] * d, mcp + (lens[0] + lens[1]) * d, mcp + sum(lens) * d]
        axis = np.cross(z, d)
        axis /= np.linalg.norm(axis)
        for k in range(4):
            joints[base + k] = pts[k]
            parents[base + k] = 0 if k == 0 else base + k - 1
            flex[base + k] = axis
        limits[base : base + 4] = (_LIMIT_MCP, _LIMIT_PIP, _LIMIT_DIP, 0.0)
    return Skeleton(joints=joints, parents=parents, limits=limits, flex_axes=flex)


def _build_mesh():
    verts = [_PALM_CENTER + _PALM_AXES * _fibonacci_sphere(_PALM_VERTS)]
    faces = []
    offset = _PALM_VERTS
    for _, mcp, d, lens, (r0, r1) in _FINGERS:
        d = np.asarray(d) / np.linalg.norm(d)
        mcp = np.asarray(mcp)
        length = sum(lens)
        # orthonormal frame around the finger axis
        u = np.cross(d, [0.0, 0.0, 1.0])
        u /= np.linalg.norm(u)
        w = np.cross(d, u)
        ts = np.linspace(0.08, 0.97, _RINGS_PER_FINGER)
        ang = 2 * np.pi * np.arange(_VERTS_PER_RING) / _VERTS_PER_RING
        for t in ts:
            radius = r0 + (r1 - r0) * t
            ring = mcp + t * length * d + radius * (np.outer(np.cos(ang), u) + np.outer(np.sin(ang), w))
            verts.append(ring)
        for r in range(_RINGS_PER_FINGER - 1):
            a = offset + r * _VERTS_PER_RING
            b = a + _VERTS_PER_RING
            for i in range(_VERTS_PER_RING):
                j = (i + 1) % _VERTS_PER_RING
                faces.append((a + i, a + j, b + i))
                faces.append((a + j, b + j, b + i))
        offset += _RINGS_PER_FINGER * _VERTS_PER_RING
    vertices = np.concatenate(verts, axis=0)
    assert vertices.shape == (NUM_VERTICES, 3)
    return TemplateMesh(vertices=vertices, faces=np.asarray(faces, dtype=np.int32))


def _segment_distance(points, a, b):
    ab = b - a
    denom = float(ab @ ab)
    t = np.clip((points - a) @ ab / max(denom, 1e-12), 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.linalg.norm(points - proj, axis=1)


def _influence_segments(skeleton):
    """Per-joint segment lists, split at bone midpoints so each joint owns
    the region surrounding it (keeps the regression matrix on-joint)."""
    joints = skeleton.joints
    segs = [[] for _ in range(NUM_JOINTS)]
    wrist = joints[0]
    for f in range(5):
        base = 1 + 4 * f
        mcp, pip, dip, tip = joints[base], joints[base + 1], joints[base + 2], joints[base + 3]
        segs[0].append((wrist, wrist + 0.5 * (mcp - wrist)))
        # MCP influence starts at the knuckle itself; reaching back into
        # the palm drags its regression centroid off the joint
        segs[base].append((mcp, 0.5 * (mcp + pip)))
        segs[base + 1].append((0.5 * (mcp + pip), 0.5 * (pip + dip)))
        segs[base + 2].append((0.5 * (pip + dip), 0.5 * (dip + tip)))
        segs[base + 3].append((0.5 * (dip + tip), tip + 0.4 * (tip - dip)))
    return segs


def _build_weights(template, skeleton):
    segs = _influence_segments(skeleton)
    dists = np.full((NUM_VERTICES, NUM_JOINTS), np.inf)
    for j, seg_list in enumerate(segs):
        for a, b in seg_list:
            dists[:, j] = np.minimum(dists[:, j], _segment_distance(template.vertices, a, b))
    order = np.argsort(dists, axis=1)[:, :2]
    W = np.zeros((NUM_VERTICES, NUM_JOINTS))
    rows = np.arange(NUM_VERTICES)
    for k in range(2):
        j = order[:, k]
        W[rows, j] = 1.0 / (dists[rows, j] + _IDW_EPS) ** _IDW_POWER
    W /= W.sum(axis=1, keepdims=True)
    return SkinWeights(W=W)


def build_template():
    """Deterministic template construction; bit-identical across calls."""
    skeleton = _build_skeleton()
    template = _build_mesh()
    weights = _build_weights(template, skeleton)
    return template, skeleton, weights


def regression_matrix_from_weights(weights):
    """J = column-normalized transpose of W: each joint becomes a convex
    combination of the vertices it skins; rows sum to 1."""
    W = weights.W if isinstance(weights, SkinWeights) else np.asarray(weights)
    col = W.sum(axis=0)
    if (col <= 0).any():
        bad = np.flatnonzero(col <= 0).tolist()
        raise ValueError(f"joints with zero total skin weight: {bad}")
    return (W / col).T


def build_assets():
    template, skeleton, weights = build_template()
    return HandAssets(template=template, skeleton=skeleton, weights=weights,
                      J=regression_matrix_from_weights(weights))


def _rotvec_to_matrix(rv):
    """Rodrigues formula for a batch of rotation vectors (N, 3)."""
    theta = np.linalg.norm(rv, axis=-1, keepdims=True)
    small = theta[..., 0] < 1e-12
    axis = np.where(small[..., None], 0.0, rv / np.where(theta == 0, 1.0, theta))
    c = np.cos(theta)[..., None]
    s = np.sin(theta)[..., None]
    n = rv.shape[0]
    K = np.zeros((n, 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -axis[:, 2], axis[:, 1]
    K[:, 1, 0], K[:, 1, 2] = axis[:, 2], -axis[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -axis[:, 1], axis[:, 0]
    eye = np.broadcast_to(np.eye(3), (n, 3, 3))
    return eye * c + s * K + (1 - c) * (axis[:, :, None] * axis[:, None, :])


def sample_pose(skeleton, rng):
    """Rotation vectors (21, 3) within the skeleton's angle limits."""
    pose = np.zeros((NUM_JOINTS, 3))
    if skeleton.limits[0] > 0:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        pose[0] = axis * rng.uniform(0.0, skeleton.limits[0])
    for f in range(5):
        base = 1 + 4 * f
        for k in range(3):  # MCP, PIP, DIP flex; TIP stays rigid
            j = base + k
            lim = skeleton.limits[j]
            if lim <= 0:
                continue
            if k == 0:
                flex = rng.uniform(0.0, 0.92 * lim)
                abd = rng.uniform(-_ABDUCTION, _ABDUCTION)
                rv = flex * skeleton.flex_axes[j] + abd * np.array([0.0, 0.0, 1.0])
                norm = np.linalg.norm(rv)
                if norm > lim:
                    rv *= lim / norm
                pose[j] = rv
            else:
                pose[j] = rng.uniform(0.0, lim) * skeleton.flex_axes[j]
    return pose


def forward_kinematics(skeleton, pose):
    """World rigid transform per joint: x -> R[j] @ x + t[j]."""
    R_local = _rotvec_to_matrix(pose)
    R = np.zeros((NUM_JOINTS, 3, 3))
    t = np.zeros((NUM_JOINTS, 3))
    for j in range(NUM_JOINTS):
        p = skeleton.joints[j]
        # local transform rotates about the joint's canonical position
        R_piv = R_local[j]
        t_piv = p - R_piv @ p
        par = skeleton.parents[j]
        if par < 0:
            R[j], t[j] = R_piv, t_piv
        else:
            R[j] = R[par] @ R_piv
            t[j] = R[par] @ t_piv + t[par]
    return R, t


def skin(template, skeleton, weights, pose):
    """Linear blend skinning; output is root-centered (wrist at origin)."""
    R, t = forward_kinematics(skeleton, pose)
    V = np.zeros_like(template.vertices)
    for j in range(NUM_JOINTS):
        w = weights.W[:, j]
        if not w.any():
            continue
        V += w[:, None] * (template.vertices @ R[j].T + t[j])
    root = R[0] @ skeleton.joints[0] + t[0]
    return V - root


def project(points, camera):
    """Weak perspective: (u, v) = scale * (x, y) + translation."""
    s, tx, ty = float(camera[0]), float(camera[1]), float(camera[2])
    if s <= 0:
        raise ValueError(f"camera scale must be positive, got {s}")
    pts = np.asarray(points, dtype=np.float64)
    return s * pts[..., :2] + np.array([tx, ty])


def fit_camera(V, rng, size=IMAGE_SIZE, safe=8.0):
    """Scale/translate so every projected vertex lands inside the image
    with a margin, with bounded random zoom and shift."""
    xy = V[:, :2]
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    span = float(max(hi[0] - lo[0], hi[1] - lo[1], 1e-6))
    s = (size - 2 * 20.0) / span * rng.uniform(0.75, 1.0)
    center = 0.5 * (lo + hi)
    t = size / 2.0 - s * center
    free = (size - 2 * safe) - s * (hi - lo)
    shift = rng.uniform(-0.5, 0.5, size=2) * np.maximum(free, 0.0)
    return np.array([s, t[0] + shift[0], t[1] + shift[1]])


def render_input(J_2d, V_2d, size=IMAGE_SIZE, sigma=HEATMAP_SIGMA):
    """22 channels in [0, 1]: 21 unit-peak Gaussian heatmaps at the 2D
    joints plus one soft silhouette from binned projected vertices."""
    grid = np.arange(size, dtype=np.float64)
    out = np.zeros((NUM_JOINTS + 1, size, size))
    for j in range(NUM_JOINTS):
        u, v = J_2d[j]
        gx = np.exp(-0.5 * ((grid - u) / sigma) ** 2)
        gy = np.exp(-0.5 * ((grid - v) / sigma) ** 2)
        out[j] = gy[:, None] * gx[None, :]
    counts = np.zeros((size, size))
    ix = np.clip(V_2d[:, 0].round().astype(int), 0, size - 1)
    iy = np.clip(V_2d[:, 1].round().astype(int), 0, size - 1)
    np.add.at(counts, (iy, ix), 1.0)
    blur = gaussian_filter(counts, sigma=3.0)
    peak = blur.max()
    if peak > 0:
        out[NUM_JOINTS] = blur / peak
    return out


def generate_sample(assets, seed):
    """One fully self-consistent sample: J_3d := J @ V_3d, J_2d := project(J_3d)."""
    pose = sample_pose(assets.skeleton, substream(seed, "pose"))
    V = skin(assets.template, assets.skeleton, assets.weights, pose)
    J3 = assets.J @ V
    camera = fit_camera(V, substream(seed, "camera"))
    V2 = project(V, camera)
    J2 = project(J3, camera)
    inp = render_input(J2, V2)
    return HandSample(input=inp, V_3d=V, J_3d=J3, J_2d=J2, camera=camera, seed=int(seed))
