"""Occlusion-aware mesh evaluation: rigid/similarity alignment and error stats.

Two protocols are supported. The neutral-benchmark style aligns each
prediction to its ground truth and reports median/mean/std of per-pair mean
vertex errors. The occlusion-masked style computes RMSE over only the
unoccluded vertex set after aligning on unmasked landmarks. Distances are
point-to-point (vertex correspondence is known for registered meshes); model
space is meters, reports are in millimeters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NON_METRICAL = "non_metrical"   # rotation + translation + scale
METRICAL = "metrical"           # rotation + translation

MM_PER_M = 1000.0


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray     # 3x3, det +1
    translation: np.ndarray  # 3
    scale: float = 1.0

    def apply(self, points):
        return self.scale * (np.asarray(points) @ self.rotation.T) + self.translation


def procrustes_align(source, target, mode=NON_METRICAL) -> RigidTransform:
    """Least-squares similarity (or rigid) transform mapping source onto target.

    SVD of the cross-covariance; reflections are disallowed (det +1 enforced).
    """
    src = np.asarray(source, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    if src.shape != tgt.shape or src.ndim != 2 or src.shape[1] != 3 or src.shape[0] < 3:
        raise ValueError("need matching point sets of at least 3 x 3")
    if mode not in (NON_METRICAL, METRICAL):
        raise ValueError(f"unknown alignment mode {mode!r}")
    mu_s, mu_t = src.mean(axis=0), tgt.mean(axis=0)
    a, b = src - mu_s, tgt - mu_t
    cov = b.T @ a
    u, s, vt = np.linalg.svd(cov)
    if s[1] < 1e-12 * max(s[0], 1e-300):
        raise ValueError("degenerate (rank-deficient) point configuration")
    d = np.sign(np.linalg.det(u @ vt))
    fix = np.diag([1.0, 1.0, d])
    rot = u @ fix @ vt
    if mode == NON_METRICAL:
        var_s = (a * a).sum()
        scale = float((s * np.diag(fix)).sum() / var_s)
    else:
        scale = 1.0
    trans = mu_t - scale * rot @ mu_s
    return RigidTransform(rot, trans, scale)


def masked_vertex_rmse(predicted, ground_truth, unoccluded_mask, mode=NON_METRICAL,
                       landmarks=None) -> float:
    """RMSE (mm) over unoccluded vertices after aligning on unmasked landmarks.

    `landmarks` indexes the alignment correspondences (default: every
    unoccluded vertex). Only unoccluded landmarks participate in alignment.
    """
    pred = np.asarray(predicted, dtype=np.float64)
    gt = np.asarray(ground_truth, dtype=np.float64)
    mask = np.asarray(unoccluded_mask, dtype=bool)
    if pred.shape != gt.shape or mask.shape != (pred.shape[0],):
        raise ValueError("prediction, ground truth, and mask sizes must agree")
    if not mask.any():
        raise ValueError("empty unoccluded set")
    if landmarks is None:
        align_idx = np.flatnonzero(mask)
    else:
        lm = np.asarray(landmarks)
        align_idx = lm[mask[lm]]
    if align_idx.size < 3:
        raise ValueError("fewer than 3 unoccluded landmarks for alignment")
    if np.array_equal(pred[mask], gt[mask]):
        return 0.0
    tf = procrustes_align(pred[align_idx], gt[align_idx], mode)
    aligned = tf.apply(pred)
    err = np.linalg.norm(aligned[mask] - gt[mask], axis=1)
    return float(np.sqrt((err * err).mean())) * MM_PER_M


@dataclass
class EvalPair:
    predicted: np.ndarray          # V x 3
    ground_truth: np.ndarray       # V x 3
    unoccluded_mask: np.ndarray    # V bool
    landmarks: np.ndarray | None = None
    label: str = "unoccluded"      # occluded / unoccluded subset tag


@dataclass
class EvalReport:
    protocol: str
    alignment: str
    errors_mm: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    distance_kind: str = "point_to_point"
    std_convention: str = "population"

    @property
    def median(self):
        return float(np.median(self.errors_mm))

    @property
    def mean(self):
        return float(np.mean(self.errors_mm))

    @property
    def std(self):
        return float(np.std(self.errors_mm))  # population std

    def summary(self, subset=None):
        errs = np.array([e for e, l in zip(self.errors_mm, self.labels)
                         if subset is None or l == subset])
        if errs.size == 0:
            return None
        return {"median": float(np.median(errs)), "mean": float(errs.mean()),
                "std": float(errs.std()), "count": int(errs.size)}

    def to_dict(self):
        out = {
            "protocol": self.protocol,
            "alignment": self.alignment,
            "distance_kind": self.distance_kind,
            "std_convention": self.std_convention,
            "overall": self.summary(),
        }
        for subset in sorted(set(self.labels)):
            out[subset] = self.summary(subset)
        return out


def pair_mean_vertex_error(pair: EvalPair, mode) -> float:
    """Aligned mean per-vertex distance for one pair, in mm."""
    mask = np.asarray(pair.unoccluded_mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty unoccluded set")
    if np.array_equal(np.asarray(pair.predicted)[mask], np.asarray(pair.ground_truth)[mask]):
        return 0.0
    tf = procrustes_align(pair.predicted[mask], pair.ground_truth[mask], mode)
    aligned = tf.apply(pair.predicted)
    return float(np.linalg.norm(aligned[mask] - pair.ground_truth[mask], axis=1).mean()) * MM_PER_M


def now_style_stats(pairs, mode=NON_METRICAL) -> EvalReport:
    """Median/mean/std (population) of per-pair mean vertex errors."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no evaluation pairs")
    report = EvalReport(protocol="neutral_benchmark", alignment=mode)
    for pair in pairs:
        report.errors_mm.append(pair_mean_vertex_error(pair, mode))
        report.labels.append(pair.label)
    return report


def co545_style_stats(pairs, mode=METRICAL) -> EvalReport:
    """Masked-RMSE protocol over unoccluded vertices."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no evaluation pairs")
    report = EvalReport(protocol="occlusion_masked_rmse", alignment=mode)
    for pair in pairs:
        rmse = masked_vertex_rmse(pair.predicted, pair.ground_truth,
                                  pair.unoccluded_mask, mode, pair.landmarks)
        report.errors_mm.append(rmse)
        report.labels.append(pair.label)
    return report


# -- protocol construction ----------------------------------------------------


def visible_vertices(vertices, faces, view_direction=(0.0, 0.0, 1.0)):
    """Front-facing vertex predicate for a single orthographic view.

    A vertex is visible when its area-weighted normal faces the camera
    (normal . view > 0 with the camera along +view). Convex-enough frontal
    geometry only; no rasterization.
    """
    from .headmodel import vertex_normals

    normals = vertex_normals(vertices, faces)
    view = np.asarray(view_direction, dtype=np.float64)
    view = view / np.linalg.norm(view)
    return normals @ view > 0.0


def occlusion_mask_from_region(vertices, region) -> np.ndarray:
    """Vertices falling inside a projected rectangular occluder.

    region: (xmin, xmax, ymin, ymax) in model units, frontal orthographic view.
    """
    v = np.asarray(vertices)
    xmin, xmax, ymin, ymax = region
    return (v[:, 0] >= xmin) & (v[:, 0] <= xmax) & (v[:, 1] >= ymin) & (v[:, 1] <= ymax)


def build_masked_protocol(assets, gt_meshes, occlusion_masks, view_direction=(0.0, 0.0, 1.0),
                          predictions=None, labels=None):
    """Assemble EvalPairs: visibility = frontal-facing and not occluded.

    occlusion_masks entries may be None, a boolean vertex mask, a vertex index
    array, or a projected rectangle (xmin, xmax, ymin, ymax). Predictions
    default to the ground truth (self-evaluation) so the protocol can be
    built before reconstructions exist.
    """
    pairs = []
    for i, mesh in enumerate(gt_meshes):
        visible = visible_vertices(mesh.vertices, mesh.faces, view_direction) & assets.frontal_mask
        occ = occlusion_masks[i] if occlusion_masks is not None else None
        if occ is None:
            occluded = np.zeros(len(mesh.vertices), dtype=bool)
        else:
            occ = np.asarray(occ)
            if occ.dtype == bool:
                occluded = occ
            elif occ.ndim == 1 and occ.size == 4 and occ.dtype != np.int64:
                occluded = occlusion_mask_from_region(mesh.vertices, occ)
            else:
                occluded = np.zeros(len(mesh.vertices), dtype=bool)
                occluded[occ.astype(int)] = True
        unocc = visible & ~occluded
        if not unocc.any():
            raise ValueError(f"pair {i}: fully occluded, empty visibility set")
        pred = mesh.vertices if predictions is None else np.asarray(predictions[i])
        label = labels[i] if labels is not None else ("occluded" if occluded.any() else "unoccluded")
        pairs.append(EvalPair(pred, mesh.vertices, unocc, assets.landmarks, label))
    return pairs
