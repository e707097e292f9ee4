"""Gaussian particle cloud: learnable attributes, covariance assembly,
densification and pruning.

Every particle carries a persistent integer id assigned at initialization.
Cloning and splitting hand the parent id to each child, so ids surviving any
sequence of cloud edits always trace back to the initial set (the per-id
embedding of the material field relies on this).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class DegenerateRotationError(ValueError):
    """Quaternion norm fell below 1e-8; no rotation can be recovered."""


def normalize_quaternions(quat: Tensor) -> Tensor:
    norms = np.sqrt(np.sum(quat.data**2, axis=-1))
    if np.any(norms < 1e-8):
        raise DegenerateRotationError(f"quaternion norm {norms.min():.3e} below 1e-8")
    n2 = ad.sum_(ad.mul(quat, quat), axis=-1, keepdims=True)
    return ad.mul(quat, ad.pow_const(n2, -0.5))


def rotation_matrices(quat: Tensor) -> Tensor:
    """Normalized quaternions (N,4) in (w,x,y,z) order -> rotation matrices (N,3,3)."""
    q = normalize_quaternions(quat)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    two = 2.0
    r00 = 1.0 - two * (ad.mul(y, y) + ad.mul(z, z))
    r01 = two * (ad.mul(x, y) - ad.mul(w, z))
    r02 = two * (ad.mul(x, z) + ad.mul(w, y))
    r10 = two * (ad.mul(x, y) + ad.mul(w, z))
    r11 = 1.0 - two * (ad.mul(x, x) + ad.mul(z, z))
    r12 = two * (ad.mul(y, z) - ad.mul(w, x))
    r20 = two * (ad.mul(x, z) - ad.mul(w, y))
    r21 = two * (ad.mul(y, z) + ad.mul(w, x))
    r22 = 1.0 - two * (ad.mul(x, x) + ad.mul(y, y))
    rows = ad.stack(
        [
            ad.stack([r00, r01, r02], axis=1),
            ad.stack([r10, r11, r12], axis=1),
            ad.stack([r20, r21, r22], axis=1),
        ],
        axis=1,
    )
    return rows  # (N, 3, 3)


def covariance(quat: Tensor, log_scale: Tensor) -> Tensor:
    """World-space covariance R diag(exp(s))^2 R^T for each particle, (N,3,3)."""
    rot = rotation_matrices(quat)
    scale = ad.exp(log_scale)  # (N, 3)
    m = ad.mul(rot, ad.reshape(scale, (scale.shape[0], 1, 3)))
    return ad.matmul(m, ad.swapaxes(m, 1, 2))


class GaussianCloud:
    """Learnable particle set. Attribute tensors share row order with ``ids``."""

    def __init__(self, mu, quat, log_scale, sh, opacity_logit, ids, dynamic=None):
        self.mu = mu if isinstance(mu, Tensor) else ad.parameter(mu)
        self.quat = quat if isinstance(quat, Tensor) else ad.parameter(quat)
        self.log_scale = log_scale if isinstance(log_scale, Tensor) else ad.parameter(log_scale)
        self.sh = sh if isinstance(sh, Tensor) else ad.parameter(sh)  # (N, 4, 3): DC + 3 linear
        self.opacity_logit = opacity_logit if isinstance(opacity_logit, Tensor) else ad.parameter(opacity_logit)
        self.ids = np.asarray(ids, dtype=np.int64)
        self.dynamic = np.ones(len(self.ids), dtype=bool) if dynamic is None else np.asarray(dynamic, dtype=bool)

    def __len__(self):
        return len(self.ids)

    @property
    def params(self) -> dict[str, Tensor]:
        return {
            "mu": self.mu,
            "quat": self.quat,
            "log_scale": self.log_scale,
            "sh": self.sh,
            "opacity_logit": self.opacity_logit,
        }

    @classmethod
    def random_init(cls, rng, count, center, radius, base_scale, opacity=0.1, color=0.35):
        """Particles uniform in a ball, axis-aligned, mid-gray, shared opacity."""
        d = rng.normal(size=(count, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        r = radius * rng.uniform(0.0, 1.0, size=count) ** (1.0 / 3.0)
        mu = np.asarray(center) + d * r[:, None]
        quat = np.zeros((count, 4))
        quat[:, 0] = 1.0
        log_scale = np.full((count, 3), np.log(base_scale))
        sh = np.zeros((count, 4, 3))
        sh[:, 0, :] = (color - 0.5) / SH_C0
        logit = np.full(count, _logit(opacity))
        return cls(mu, quat, log_scale, sh, logit, np.arange(count))

    def world_scales(self) -> np.ndarray:
        return np.exp(self.log_scale.data)

    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logit.data))

    def replace_rows(self, arrays: dict[str, np.ndarray], ids, dynamic) -> None:
        for name, arr in arrays.items():
            self.params[name].data = np.ascontiguousarray(arr, dtype=np.float64)
            self.params[name].grad = None
        self.ids = np.asarray(ids, dtype=np.int64)
        self.dynamic = np.asarray(dynamic, dtype=bool)


SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199


def _logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


def prune_mask(cloud: GaussianCloud, scale_threshold: float, scene_extent: float, min_opacity: float = 0.005) -> np.ndarray:
    """Boolean mask of particles to remove: overgrown or effectively invisible.

    A particle is overgrown when its largest world-space scale exceeds
    ``scale_threshold * scene_extent``.
    """
    too_big = self_max_scale(cloud) > scale_threshold * scene_extent
    too_faint = cloud.opacities() < min_opacity
    return too_big | too_faint


def self_max_scale(cloud: GaussianCloud) -> np.ndarray:
    return cloud.world_scales().max(axis=1)


def densify_and_prune(
    cloud: GaussianCloud,
    grad_norms: np.ndarray,
    rng,
    grad_threshold: float,
    scene_extent: float,
    percent_dense: float = 0.01,
    scale_threshold: float = 0.015,
    min_opacity: float = 0.005,
    split_factor: float = 1.6,
):
    """Clone small / split large high-gradient particles, then prune.

    Children take the parent's id. Split children sample their position from
    the parent's own ellipsoid and shrink each scale by ``split_factor``; the
    parent row is retired. Returns (kept_old_rows, n_appended): the surviving
    original rows in order, followed by that many appended child rows, which
    is what an optimizer needs to carry its per-row state across the edit.
    """
    n = len(cloud)
    grad_norms = np.asarray(grad_norms, dtype=np.float64)
    max_scale = self_max_scale(cloud)
    hot = grad_norms >= grad_threshold
    split = hot & (max_scale > percent_dense * scene_extent)
    clone = hot & ~split

    arrays = {k: v.data for k, v in cloud.params.items()}
    remove = prune_mask(cloud, scale_threshold, scene_extent, min_opacity)

    kept = np.nonzero(~(remove | split))[0]
    clone_src = np.nonzero(clone & ~remove)[0]
    split_src = np.nonzero(split & ~remove)[0]

    new_chunks = {k: [arrays[k][kept]] for k in arrays}
    new_ids = [cloud.ids[kept]]
    new_dyn = [cloud.dynamic[kept]]

    if len(clone_src):
        for k in arrays:
            new_chunks[k].append(arrays[k][clone_src].copy())
        new_ids.append(cloud.ids[clone_src])
        new_dyn.append(cloud.dynamic[clone_src])

    if len(split_src):
        reps = np.repeat(split_src, 2)
        mu = arrays["mu"][reps]
        quat = arrays["quat"][reps]
        log_scale = arrays["log_scale"][reps]
        # sample offsets inside the parent ellipsoid: R @ (exp(s) * eps)
        eps = rng.normal(size=(len(reps), 3)) * np.exp(log_scale)
        qn = quat / np.linalg.norm(quat, axis=1, keepdims=True)
        rot = _rotmats_np(qn)
        mu = mu + np.einsum("nij,nj->ni", rot, eps)
        for k in arrays:
            if k == "mu":
                new_chunks[k].append(mu)
            elif k == "log_scale":
                new_chunks[k].append(log_scale - np.log(split_factor))
            else:
                new_chunks[k].append(arrays[k][reps].copy())
        new_ids.append(cloud.ids[reps])
        new_dyn.append(cloud.dynamic[reps])

    merged = {k: np.concatenate(v, axis=0) for k, v in new_chunks.items()}
    ids = np.concatenate(new_ids)
    dyn = np.concatenate(new_dyn)
    n_appended = len(ids) - len(kept)
    cloud.replace_rows(merged, ids, dyn)
    return kept, n_appended


def prune_only(cloud: GaussianCloud, scale_threshold: float, scene_extent: float, min_opacity: float = 0.005):
    """Remove overgrown/faint particles; returns the surviving row indices."""
    keep = np.nonzero(~prune_mask(cloud, scale_threshold, scene_extent, min_opacity))[0]
    arrays = {k: v.data[keep] for k, v in cloud.params.items()}
    cloud.replace_rows(arrays, cloud.ids[keep], cloud.dynamic[keep])
    return keep


def _rotmats_np(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=1),
        ],
        axis=1,
    )


class SceneNormalizer:
    """Maps world coordinates into the unit cube queried by the feature grids.

    Uniform scale: unit = (p - center) / scale + 0.5, clamped into [0, 1].
    ``scale`` should cover the scene with margin so deformed particles stay
    inside. Velocities in unit coordinates convert to world units by
    multiplying with ``scale``.
    """

    def __init__(self, center, scale: float):
        self.center = np.asarray(center, dtype=np.float64).reshape(3)
        self.scale = float(scale)
        if self.scale <= 0:
            raise ValueError("normalizer scale must be positive")

    def unit(self, p: Tensor) -> Tensor:
        q = ad.add(ad.mul(ad.sub(p, ad.constant(self.center)), 1.0 / self.scale), 0.5)
        return ad.clip(q, 0.0, 1.0)

    def unit4(self, p: Tensor, t: float) -> Tensor:
        """(N,3) world positions + one time -> clamped (N,4) unit coordinates."""
        xyz = self.unit(p)
        tcol = ad.constant(np.full((p.shape[0], 1), min(max(float(t), 0.0), 1.0)))
        return ad.concatenate([xyz, tcol], axis=1)

    def unit_np(self, p: np.ndarray) -> np.ndarray:
        return np.clip((np.asarray(p) - self.center) / self.scale + 0.5, 0.0, 1.0)

    def unit4_np(self, p: np.ndarray, t) -> np.ndarray:
        p = np.atleast_2d(p)
        tcol = np.full((p.shape[0], 1), np.clip(t, 0.0, 1.0)) if np.isscalar(t) else np.clip(np.asarray(t), 0.0, 1.0).reshape(-1, 1)
        return np.concatenate([self.unit_np(p), tcol], axis=1)

    def to_dict(self) -> dict:
        return {"center": self.center.tolist(), "scale": self.scale}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneNormalizer":
        return cls(d["center"], d["scale"])


def partition_dynamic(positions_per_frame, masks, cameras, fraction: float = 0.3) -> np.ndarray:
    """Label particles dynamic when their projected center lands in the motion
    mask in at least ``fraction`` of the frames where it is visible.

    ``positions_per_frame`` is (F, N, 3) world positions (deformed per frame).
    Particles never visible default to static.
    """
    positions_per_frame = np.asarray(positions_per_frame, dtype=np.float64)
    n_frames, n_pts = positions_per_frame.shape[:2]
    inside = np.zeros(n_pts)
    visible = np.zeros(n_pts)
    for f in range(n_frames):
        cam = cameras[f]
        mask = np.asarray(masks[f])
        pix, z = cam.project(positions_per_frame[f])
        u = np.round(pix[:, 0]).astype(np.int64)
        v = np.round(pix[:, 1]).astype(np.int64)
        vis = (z > 1e-6) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
        visible += vis
        uu = np.clip(u, 0, cam.width - 1)
        vv = np.clip(v, 0, cam.height - 1)
        inside += vis & (mask[vv, uu] > 0)
    out = np.zeros(n_pts, dtype=bool)
    seen = visible > 0
    out[seen] = inside[seen] / visible[seen] >= fraction
    return out
