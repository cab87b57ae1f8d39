"""Linear parametric head model: blendshapes + linear blend skinning.

The model follows the familiar 3DMM recipe: a template mesh is deformed by
linear shape/expression/pose-corrective bases, joints are regressed from the
rest mesh, and a kinematic chain of per-joint rigid transforms is blended per
vertex by skinning weights. Real model assets are license-gated, so a
deterministic synthetic stand-in (ellipsoidal head, orthonormalized random
bases) is provided for desk-scale runs; real assets in the container format
load through the same path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull

from .gradcore import ASSET_MAGIC, read_container, write_container


@dataclass(frozen=True)
class ModelAssets:
    template: np.ndarray        # n x 3, meters
    shape_basis: np.ndarray     # n x 3 x n_shape
    expr_basis: np.ndarray      # n x 3 x n_expr
    pose_basis: np.ndarray      # n x 3 x 9K
    joint_regressor: np.ndarray  # K x n, rows sum to 1
    skin_weights: np.ndarray    # n x K, rows sum to 1, non-negative
    parents: np.ndarray         # K, parent joint index, -1 = attached to root
    faces: np.ndarray           # F x 3 triangle indices
    frontal_mask: np.ndarray    # n bool
    landmarks: np.ndarray       # distinct vertex ids

    def __post_init__(self):
        n = self.template.shape[0]
        k = self.joint_regressor.shape[0]
        if self.template.shape != (n, 3):
            raise ValueError("template must be n x 3")
        if self.shape_basis.shape[:2] != (n, 3) or self.expr_basis.shape[:2] != (n, 3):
            raise ValueError("basis leading dims must match template")
        if self.pose_basis.shape != (n, 3, 9 * k):
            raise ValueError(f"pose basis must be n x 3 x 9K, got {self.pose_basis.shape}")
        if self.skin_weights.shape != (n, k):
            raise ValueError("skin weights must be n x K")
        if np.any(self.skin_weights < -1e-9):
            raise ValueError("skin weights must be non-negative")
        if not np.allclose(self.skin_weights.sum(axis=1), 1.0, atol=1e-6):
            raise ValueError("skin weight rows must sum to 1")
        if not np.allclose(self.joint_regressor.sum(axis=1), 1.0, atol=1e-6):
            raise ValueError("joint regressor rows must sum to 1")
        if self.parents.shape != (k,):
            raise ValueError("parents must have K entries")
        m = int(self.frontal_mask.sum())
        if self.frontal_mask.shape != (n,) or not (0 < m <= n):
            raise ValueError("frontal mask must select between 1 and n vertices")
        if len(set(self.landmarks.tolist())) != len(self.landmarks) or np.any(self.landmarks >= n):
            raise ValueError("landmark indices must be distinct and < n")

    @property
    def n_vertices(self):
        return self.template.shape[0]

    @property
    def n_shape(self):
        return self.shape_basis.shape[2]

    @property
    def n_expr(self):
        return self.expr_basis.shape[2]

    @property
    def n_joints(self):
        return self.joint_regressor.shape[0]

    @property
    def n_frontal(self):
        return int(self.frontal_mask.sum())

    @property
    def pose_dim(self):
        # axis-angle for the root plus every regressed joint
        return 3 * (self.n_joints + 1)


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray  # n x 3, meters
    faces: np.ndarray     # F x 3

    def __post_init__(self):
        if not np.all(np.isfinite(self.vertices)):
            raise ValueError("mesh has non-finite coordinates")


def _check_coeffs(assets: ModelAssets, beta, theta, psi):
    beta = np.asarray(beta, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    psi = np.asarray(psi, dtype=np.float64)
    if beta.shape != (assets.n_shape,):
        raise ValueError(f"shape coefficients must have dim {assets.n_shape}, got {beta.shape}")
    if psi.shape != (assets.n_expr,):
        raise ValueError(f"expression coefficients must have dim {assets.n_expr}, got {psi.shape}")
    if theta.shape != (assets.pose_dim,):
        raise ValueError(f"pose must have dim {assets.pose_dim}, got {theta.shape}")
    for name, v in (("shape", beta), ("pose", theta), ("expression", psi)):
        if not np.all(np.isfinite(v)):
            raise ValueError(f"non-finite {name} coefficients")
    return beta, theta, psi


def rodrigues(axis_angle):
    """Axis-angle (3,) to rotation matrix; first-order branch below 1e-8 rad."""
    aa = np.asarray(axis_angle, dtype=np.float64)
    angle = np.linalg.norm(aa)
    skew = np.array([
        [0.0, -aa[2], aa[1]],
        [aa[2], 0.0, -aa[0]],
        [-aa[1], aa[0], 0.0],
    ])
    if angle < 1e-8:
        return np.eye(3) + skew
    k = skew / angle
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def _pose_feature(theta, k_joints):
    """Concatenated (R_k - I) for the K regressed joints; zero at rest pose."""
    feats = np.empty(9 * k_joints)
    for j in range(k_joints):
        r = rodrigues(theta[3 * (j + 1) : 3 * (j + 2)])
        feats[9 * j : 9 * (j + 1)] = (r - np.eye(3)).ravel()
    return feats


def blend_shapes(assets: ModelAssets, beta, theta, psi) -> Mesh:
    """Rest-pose deformation: template + shape, pose-corrective, expression offsets."""
    beta, theta, psi = _check_coeffs(assets, beta, theta, psi)
    v = assets.template + assets.shape_basis @ beta + assets.expr_basis @ psi
    v = v + assets.pose_basis @ _pose_feature(theta, assets.n_joints)
    return Mesh(v, assets.faces)


def regress_joints(assets: ModelAssets, rest_vertices) -> np.ndarray:
    rest_vertices = np.asarray(rest_vertices, dtype=np.float64)
    if rest_vertices.shape != (assets.n_vertices, 3):
        raise ValueError("rest vertices must be n x 3")
    return assets.joint_regressor @ rest_vertices


def _rigid_about(rotation, pivot):
    """4x4 rotation about a pivot point."""
    t = np.eye(4)
    t[:3, :3] = rotation
    t[:3, 3] = pivot - rotation @ pivot
    return t


def lbs(assets: ModelAssets, rest_mesh: Mesh, joints, theta) -> Mesh:
    """Pose the rest mesh by weight-blended per-joint rigid transforms.

    theta packs axis-angle rotations for the root followed by the K regressed
    joints. The root rotates about joint 0's rest location; each joint rotates
    about its own rest location, composed along the kinematic chain.
    """
    _, theta, _ = _check_coeffs(assets, np.zeros(assets.n_shape), theta, np.zeros(assets.n_expr))
    joints = np.asarray(joints, dtype=np.float64)
    if not theta.any():
        # exact identity at rest pose; avoids float dust from blended transforms
        return Mesh(rest_mesh.vertices.copy(), assets.faces)
    k = assets.n_joints
    root = _rigid_about(rodrigues(theta[:3]), joints[0])
    globals_ = [None] * k
    for j in range(k):  # parents precede children by construction
        parent = assets.parents[j]
        if parent >= j:
            raise ValueError("joint parents must precede children")
        base = root if parent < 0 else globals_[parent]
        local = _rigid_about(rodrigues(theta[3 * (j + 1) : 3 * (j + 2)]), joints[j])
        globals_[j] = base @ local
    transforms = np.stack(globals_)                          # K x 4 x 4
    blended = np.einsum("nk,kab->nab", assets.skin_weights, transforms)
    hom = np.concatenate([rest_mesh.vertices, np.ones((assets.n_vertices, 1))], axis=1)
    posed = np.einsum("nab,nb->na", blended, hom)[:, :3]
    return Mesh(posed, assets.faces)


def reconstruct(assets: ModelAssets, beta, theta, psi) -> Mesh:
    """Full model: blendshapes -> joint regression -> skinning."""
    rest = blend_shapes(assets, beta, theta, psi)
    joints = regress_joints(assets, rest.vertices)
    return lbs(assets, rest, joints, np.asarray(theta, dtype=np.float64))


def extract_frontal(mesh: Mesh, assets: ModelAssets) -> np.ndarray:
    """Frontal-face vertices in ascending index order, m x 3."""
    if not assets.frontal_mask.any():
        raise ValueError("empty frontal mask")
    return mesh.vertices[assets.frontal_mask]


def vertex_normals(vertices, faces):
    """Area-weighted vertex normals."""
    v = np.asarray(vertices, dtype=np.float64)
    fn = np.cross(v[faces[:, 1]] - v[faces[:, 0]], v[faces[:, 2]] - v[faces[:, 0]])
    normals = np.zeros_like(v)
    for c in range(3):
        np.add.at(normals, faces[:, c], fn)
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return normals / norms


@dataclass(frozen=True)
class SynthAssetConfig:
    n_vertices: int = 402
    n_shape: int = 300
    n_expr: int = 50
    n_joints: int = 4
    seed: int = 0
    radius: float = 0.1          # meters, roughly head-sized
    offset_scale: float = 0.01   # rms per-coordinate offset for unit-normal draws, x radius
    nonzero_pose_basis: bool = False


def _fibonacci_ellipsoid(n, radius):
    """Deterministic quasi-uniform points on an ellipsoid (head-ish axes)."""
    i = np.arange(n, dtype=np.float64)
    phi = np.pi * (3.0 - np.sqrt(5.0))
    z = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    pts = np.stack([r * np.cos(phi * i), r * np.sin(phi * i), z], axis=1)
    return pts * (radius * np.array([0.8, 1.0, 0.9]))


def _orthonormal_basis(rng, n, dim, scale):
    raw = rng.standard_normal((3 * n, dim))
    q, _ = np.linalg.qr(raw)
    # fix column signs so the basis is a pure function of the seed
    q = q * np.sign(q[0] + (q[0] == 0))
    return (q * scale).reshape(n, 3, dim)


def synthesize_assets(config: SynthAssetConfig) -> ModelAssets:
    """Deterministic pseudo-random head-like assets."""
    n, k = config.n_vertices, config.n_joints
    if n < 12:
        raise ValueError("need at least 12 vertices")
    if k < 1:
        raise ValueError("need at least one joint")
    if 3 * n < max(config.n_shape, config.n_expr):
        raise ValueError("basis dimension exceeds vertex degrees of freedom")
    rng = np.random.default_rng(config.seed)
    template = _fibonacci_ellipsoid(n, config.radius)
    faces = ConvexHull(template).simplices.astype(np.int64)
    # orient triangles outward (hull normals may point either way)
    fn = np.cross(template[faces[:, 1]] - template[faces[:, 0]],
                  template[faces[:, 2]] - template[faces[:, 0]])
    centers = template[faces].mean(axis=1)
    flip = np.einsum("fc,fc->f", fn, centers) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]

    scale = config.offset_scale * config.radius
    shape_basis = _orthonormal_basis(rng, n, config.n_shape, scale * np.sqrt(3 * n / config.n_shape))
    expr_basis = _orthonormal_basis(rng, n, config.n_expr, scale * np.sqrt(3 * n / config.n_expr))
    if config.nonzero_pose_basis:
        pose_basis = _orthonormal_basis(rng, n, 9 * k, 0.1 * scale * np.sqrt(3 * n / (9 * k)))
    else:
        pose_basis = np.zeros((n, 3, 9 * k))

    # joints cluster near the vertical axis (neck/jaw/eye-like); simplex rows
    joint_logits = rng.standard_normal((k, n)) - 4.0 * np.abs(template[:, 0])[None, :] / config.radius
    joint_regressor = np.exp(joint_logits)
    joint_regressor /= joint_regressor.sum(axis=1, keepdims=True)
    parents = np.array([-1] + list(range(k - 1)), dtype=np.int64)

    skin_logits = 2.0 * rng.standard_normal((n, k))
    skin_weights = np.exp(skin_logits)
    skin_weights /= skin_weights.sum(axis=1, keepdims=True)

    normals = vertex_normals(template, faces)
    frontal_mask = normals[:, 2] > 0.0
    if not frontal_mask.any():
        frontal_mask = normals[:, 2] >= np.median(normals[:, 2])
    frontal_idx = np.flatnonzero(frontal_mask)
    landmarks = frontal_idx[:: max(1, len(frontal_idx) // 16)][:16]

    return ModelAssets(
        template=template, shape_basis=shape_basis, expr_basis=expr_basis,
        pose_basis=pose_basis, joint_regressor=joint_regressor,
        skin_weights=skin_weights, parents=parents, faces=faces,
        frontal_mask=frontal_mask, landmarks=landmarks,
    )


# -- persistence --------------------------------------------------------------

_ASSET_FIELDS = ("template", "shape_basis", "expr_basis", "pose_basis",
                 "joint_regressor", "skin_weights", "parents", "faces",
                 "frontal_mask", "landmarks")


def save_assets(path, assets: ModelAssets, metadata: dict | None = None):
    arrays = {f: getattr(assets, f) for f in _ASSET_FIELDS}
    write_container(path, ASSET_MAGIC, arrays, metadata or {})


def load_assets(path) -> ModelAssets:
    arrays, _ = read_container(path, ASSET_MAGIC)
    arrays = {f: arrays[f] for f in _ASSET_FIELDS}
    arrays["frontal_mask"] = arrays["frontal_mask"].astype(bool)
    return ModelAssets(**arrays)


def write_obj(path, mesh: Mesh):
    """ASCII OBJ export with 9 significant digits."""
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for tri in mesh.faces:
            f.write(f"f {tri[0] + 1} {tri[1] + 1} {tri[2] + 1}\n")
