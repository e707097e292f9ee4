"""Optical-flow geometry: backward-flow decomposition, warping, and the two
differentiable flow predictions (Gaussian flow and velocity flow).

Conventions: a flow field stores per-pixel displacements (du, dv) in pixels;
invalid pixels carry (0, 0) and are excluded from every loss. Backward flow
lives on frame t+1 and points to frame t (p1 = p4 + flow_b(p4)). The
decomposition splits it against a depth map into a camera-induced part
(p4 - p2) and an object-motion part (p2 - p1), where p2 is pixel p4's 3D
point reprojected into the frame-t camera; the motion part is therefore the
object's forward displacement as seen by a *fixed* camera and can be compared
directly with flow predicted from the particle system.

Gaussian flow transports a pixel with the tracked particles: with the frame-t
eigenbasis U of the 2D covariance (Sigma_t = U Lambda_t U^T, and Lambda_{t+1}
the same-axes quadratic form of Sigma_{t+1}),

    p_hat_i = U Lambda_{t+1}^(1/2) Lambda_t^(-1/2) U^T (p1 - mu_t) + mu_{t+1}

per contributing particle, averaged with the pixel's top-K splat weights
(renormalized over the contributors actually kept). Velocity flow replaces the
endpoint with mu_t + vbar*dt, vbar being the particle's 3D velocity pushed
through the projection Jacobian. The eigenbasis is held constant (detached);
eigenvalues, means and velocities stay differentiable.
"""

from __future__ import annotations

import warnings

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SINGULAR_EIG = 1e-12  # px^2; contributors below this are dropped


class FlowField:
    """Dense H x W displacement field with a validity bit per pixel."""

    def __init__(self, vectors: np.ndarray, valid: np.ndarray):
        vectors = np.asarray(vectors, dtype=np.float64)
        valid = np.asarray(valid, dtype=bool)
        if vectors.ndim != 3 or vectors.shape[2] != 2 or vectors.shape[:2] != valid.shape:
            raise ValueError("flow field needs (H, W, 2) vectors and matching (H, W) validity")
        vectors = vectors.copy()
        vectors[~valid] = 0.0
        self.vectors = vectors
        self.valid = valid

    @property
    def height(self) -> int:
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]

    @classmethod
    def zeros(cls, height: int, width: int, valid: bool = True) -> "FlowField":
        return cls(np.zeros((height, width, 2)), np.full((height, width), valid))

    @classmethod
    def constant(cls, height: int, width: int, du: float, dv: float) -> "FlowField":
        v = np.empty((height, width, 2))
        v[..., 0], v[..., 1] = du, dv
        return cls(v, np.ones((height, width), dtype=bool))

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.vectors[..., 0], self.vectors[..., 1])


def backproject(camera, pixels: np.ndarray, depths: np.ndarray) -> np.ndarray:
    """Pixels (N,2) + positive depths -> camera-space points K^-1 * D * (u,v,1)."""
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    depths = np.atleast_1d(np.asarray(depths, dtype=np.float64))
    if np.any(depths <= 0.0):
        raise ValueError("backprojection needs positive depth")
    x = (pixels[:, 0] - camera.cx) / camera.fx * depths
    y = (pixels[:, 1] - camera.cy) / camera.fy * depths
    return np.stack([x, y, depths], axis=1)


def _pixel_grid(height: int, width: int) -> np.ndarray:
    u, v = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    return np.stack([u, v], axis=-1)  # (H, W, 2) pixel centers


def decompose_backward(flow_b: FlowField, depth, cam_t, cam_t1):
    """Split backward flow at I_{t+1} into (camera flow, motion flow).

    camera flow = p4 - p2, motion flow = p2 - p1 with p1 = p4 + flow_b(p4) and
    p2 the depth-backprojected point of p4 reprojected into cam_t. Validity is
    cleared where the input was invalid, depth is non-positive, or p2 leaves
    the frame-t image.
    """
    depth = np.asarray(depth, dtype=np.float64)
    h, w = flow_b.valid.shape
    if depth.shape != (h, w):
        raise ValueError("depth map size does not match the flow field")
    p4 = _pixel_grid(h, w).reshape(-1, 2)
    d = depth.reshape(-1)
    ok = flow_b.valid.reshape(-1) & (d > 0.0)

    x2 = cam_t1.backproject(p4, np.where(d > 0.0, d, 1.0))  # world points
    p2, z2 = cam_t.project(x2)
    ok &= z2 > 0.0
    ok &= (p2[:, 0] >= 0.0) & (p2[:, 0] <= w - 1.0) & (p2[:, 1] >= 0.0) & (p2[:, 1] <= h - 1.0)

    p1 = p4 + flow_b.vectors.reshape(-1, 2)
    cam_flow = (p4 - p2).reshape(h, w, 2)
    motion = (p2 - p1).reshape(h, w, 2)
    okg = ok.reshape(h, w)
    return FlowField(cam_flow, okg), FlowField(motion, okg)


def bilinear_sample(vectors: np.ndarray, valid: np.ndarray, points: np.ndarray):
    """Sample an (H, W, C) array at float pixel positions with strict validity.

    A sample is valid only when all four surrounding pixels are in bounds and
    valid; returns (values (P, C), ok (P,)).
    """
    h, w = valid.shape
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    u, v = pts[:, 0], pts[:, 1]
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    inb = (u0 >= 0) & (u0 + 1 <= w - 1) & (v0 >= 0) & (v0 + 1 <= h - 1)
    u0c = np.clip(u0, 0, w - 2)
    v0c = np.clip(v0, 0, h - 2)
    fu = u - u0c
    fv = v - v0c
    ok = inb.copy()
    vals = np.zeros((pts.shape[0], vectors.shape[2]))
    for dv_ in (0, 1):
        for du_ in (0, 1):
            wgt = (fu if du_ else 1.0 - fu) * (fv if dv_ else 1.0 - fv)
            ok &= valid[v0c + dv_, u0c + du_]
            vals += wgt[:, None] * vectors[v0c + dv_, u0c + du_]
    vals[~ok] = 0.0
    return vals, ok


def warp_flow_forward(field_t1: FlowField, forward_flow: FlowField) -> FlowField:
    """Express a frame-(t+1) field on the frame-t grid via forward correspondences.

    output(p1) = bilinear sample of the input at p1 + forward_flow(p1);
    invalid where the correspondence exits the frame or hits invalid pixels.
    """
    if field_t1.valid.shape != forward_flow.valid.shape:
        raise ValueError("fields must share dimensions")
    h, w = field_t1.valid.shape
    p1 = _pixel_grid(h, w).reshape(-1, 2)
    target = p1 + forward_flow.vectors.reshape(-1, 2)
    vals, ok = bilinear_sample(field_t1.vectors, field_t1.valid, target)
    ok &= forward_flow.valid.reshape(-1)
    return FlowField(vals.reshape(h, w, 2), ok.reshape(h, w))


def eig2x2(a, b, c):
    """Eigendecomposition of symmetric [[a, b], [b, c]] batches.

    Returns (lam (N, 2) descending, U (N, 2, 2)) with U[:, :, k] the unit
    eigenvector of lam_k and det(U) = +1. Isotropic inputs get the identity
    basis.
    """
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    c = np.atleast_1d(np.asarray(c, dtype=np.float64))
    mid = 0.5 * (a + c)
    half = 0.5 * (a - c)
    disc = np.sqrt(half * half + b * b)
    lam = np.stack([mid + disc, mid - disc], axis=1)
    # the larger of (lam1 - c, b) / (b, lam1 - a) is the numerically safe choice
    vx = np.where(half >= 0.0, disc + half, b)
    vy = np.where(half >= 0.0, b, disc - half)
    n = np.hypot(vx, vy)
    tiny = n < 1e-30
    vx = np.where(tiny, 1.0, vx / np.where(tiny, 1.0, n))
    vy = np.where(tiny, 0.0, vy / np.where(tiny, 1.0, n))
    u = np.empty(a.shape + (2, 2))
    u[:, 0, 0], u[:, 1, 0] = vx, vy
    u[:, 0, 1], u[:, 1, 1] = -vy, vx
    return lam, u


def sqrt2x2(m: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root of a symmetric 2x2 matrix."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (2, 2) or abs(m[0, 1] - m[1, 0]) > 1e-12:
        raise ValueError("expected a symmetric 2x2 matrix")
    lam, u = eig2x2(m[0, 0], m[0, 1], m[1, 1])
    lam, u = lam[0], u[0]
    if lam.min() < -1e-12:
        raise ValueError("matrix is not positive semidefinite")
    s = np.sqrt(np.maximum(lam, 0.0))
    return (u * s) @ u.T


class SparseFlow:
    """Flow predictions on the covered-pixel list of a render (tape tensors)."""

    def __init__(self, shape, pix_v: np.ndarray, pix_u: np.ndarray, vec: Tensor, valid: np.ndarray):
        self.shape = tuple(shape)
        self.pix_v = pix_v
        self.pix_u = pix_u
        self.vec = vec  # Tensor (P, 2)
        self.valid = valid  # np bool (P,)

    def to_field(self) -> FlowField:
        vecs = np.zeros(self.shape + (2,))
        ok = np.zeros(self.shape, dtype=bool)
        vecs[self.pix_v, self.pix_u] = self.vec.data
        ok[self.pix_v, self.pix_u] = self.valid
        return FlowField(vecs, ok)

    @classmethod
    def from_field(cls, field: FlowField) -> "SparseFlow":
        pv, pu = np.nonzero(np.ones_like(field.valid))
        return cls(field.valid.shape, pv, pu, ad.constant(field.vectors[pv, pu]), field.valid[pv, pu])


def _position_lookup(visible_rows: np.ndarray, n_rows: int) -> np.ndarray:
    pos = np.full(n_rows, -1, dtype=np.int64)
    pos[visible_rows] = np.arange(len(visible_rows))
    return pos


class _Transport:
    """Per-contributor scale transform shared by both flow predictions."""

    def __init__(self, out_t, out_t1):
        topk = out_t.topk_rows
        h, w, k = topk.shape
        self.shape = (h, w)
        covered = topk[..., 0] >= 0
        self.pv, self.pu = np.nonzero(covered)
        rows = topk[self.pv, self.pu]  # (P, K) cloud rows, -1 pad
        self.weights = out_t.topk_weights[self.pv, self.pu]

        n_rows = int(max(rows.max(initial=0), out_t.visible_rows.max(initial=0),
                         out_t1.visible_rows.max(initial=0))) + 1
        pos_t = _position_lookup(out_t.visible_rows, n_rows)
        pos_t1 = _position_lookup(out_t1.visible_rows, n_rows)
        safe = np.where(rows >= 0, rows, 0)
        it = pos_t[safe]
        it1 = pos_t1[safe]
        self.keep = (rows >= 0) & (it >= 0) & (it1 >= 0)
        self.it = np.where(self.keep, it, 0)
        self.it1 = np.where(self.keep, it1, 0)

        # frame-t eigenbasis (detached) and same-axes eigenvalues at both times
        cov_t, cov_t1 = out_t.cov2d, out_t1.cov2d
        lam_np, u_np = eig2x2(cov_t.data[:, 0], cov_t.data[:, 1], cov_t.data[:, 2])
        self.u = u_np

        def quad(cov: Tensor, idx, col_u):
            ca = ad.take_rows(cov, idx)
            ux, uy = col_u
            return (
                ad.mul(ca[:, 0], ux * ux)
                + 2.0 * ad.mul(ca[:, 1], ux * uy)
                + ad.mul(ca[:, 2], uy * uy)
            )

        it_f, it1_f = self.it.reshape(-1), self.it1.reshape(-1)
        u1 = (u_np[it_f, 0, 0], u_np[it_f, 1, 0])
        u2 = (u_np[it_f, 0, 1], u_np[it_f, 1, 1])
        lam1_t = quad(cov_t, it_f, u1)
        lam2_t = quad(cov_t, it_f, u2)
        lam1_t1 = quad(cov_t1, it1_f, u1)
        lam2_t1 = quad(cov_t1, it1_f, u2)

        sing = ((lam1_t.data < SINGULAR_EIG) | (lam2_t.data < SINGULAR_EIG)
                | (lam1_t1.data < SINGULAR_EIG) | (lam2_t1.data < SINGULAR_EIG))
        self.keep &= ~sing.reshape(self.keep.shape)

        guard = lambda t: ad.clip(t, SINGULAR_EIG, np.inf)  # dropped rows: keep math finite
        s1 = ad.mul(ad.pow_const(guard(lam1_t1), 0.5), ad.pow_const(guard(lam1_t), -0.5))
        s2 = ad.mul(ad.pow_const(guard(lam2_t1), 0.5), ad.pow_const(guard(lam2_t), -0.5))
        v1x, v1y = u1
        v2x, v2y = u2
        self.a00 = ad.mul(s1, v1x * v1x) + ad.mul(s2, v2x * v2x)
        self.a01 = ad.mul(s1, v1x * v1y) + ad.mul(s2, v2x * v2y)
        self.a11 = ad.mul(s1, v1y * v1y) + ad.mul(s2, v2y * v2y)

        m2d_t = ad.take_rows(out_t.means2d, it_f)
        self.mu_t_x, self.mu_t_y = m2d_t[:, 0], m2d_t[:, 1]
        self.p1x = np.repeat(self.pu.astype(np.float64), self.keep.shape[1])
        self.p1y = np.repeat(self.pv.astype(np.float64), self.keep.shape[1])
        self.dx = ad.sub(ad.constant(self.p1x), self.mu_t_x)
        self.dy = ad.sub(ad.constant(self.p1y), self.mu_t_y)

    def combine(self, end_x: Tensor, end_y: Tensor) -> SparseFlow:
        """Weighted flow (p_hat - p1) with endpoint offsets end_* per contributor."""
        fx = ad.add(ad.mul(self.a00, self.dx), ad.mul(self.a01, self.dy))
        fy = ad.add(ad.mul(self.a01, self.dx), ad.mul(self.a11, self.dy))
        fx = ad.sub(ad.add(fx, end_x), ad.constant(self.p1x))
        fy = ad.sub(ad.add(fy, end_y), ad.constant(self.p1y))
        wn = self.weights * self.keep
        tot = wn.sum(axis=1)
        ok = tot > 0.0
        wn = wn / np.where(ok, tot, 1.0)[:, None]
        n_pix, k = self.keep.shape
        fxw = ad.sum_(ad.mul(ad.reshape(fx, (n_pix, k)), wn), axis=1)
        fyw = ad.sum_(ad.mul(ad.reshape(fy, (n_pix, k)), wn), axis=1)
        return SparseFlow(self.shape, self.pv, self.pu, ad.stack([fxw, fyw], axis=1), ok)


def gaussian_flow(out_t, out_t1) -> SparseFlow:
    """Particle-transport flow from render t to t+1 over the covered pixels."""
    tr = _Transport(out_t, out_t1)
    m2d_t1 = ad.take_rows(out_t1.means2d, tr.it1.reshape(-1))
    return tr.combine(m2d_t1[:, 0], m2d_t1[:, 1])


def project_velocity(camera, means2d: Tensor, depths: Tensor, v_world: Tensor) -> Tensor:
    """World-space velocities -> pixel velocities via the projection Jacobian.

    The Jacobian is evaluated at each particle's current camera-space position
    (recovered from its pixel coordinates and depth); equals the limit of
    finite-difference reprojection.
    """
    vc = ad.matmul(v_world, ad.constant(camera.rot.T))  # camera-frame direction
    inv_z = ad.pow_const(depths, -1.0)
    vx = ad.mul(
        ad.sub(ad.mul(vc[:, 0], camera.fx), ad.mul(ad.sub(means2d[:, 0], camera.cx), vc[:, 2])),
        inv_z,
    )
    vy = ad.mul(
        ad.sub(ad.mul(vc[:, 1], camera.fy), ad.mul(ad.sub(means2d[:, 1], camera.cy), vc[:, 2])),
        inv_z,
    )
    return ad.stack([vx, vy], axis=1)


def velocity_flow(out_t, out_t1, v_world: Tensor, dt: float) -> SparseFlow:
    """Advection flow: particles carried by their predicted velocity for dt.

    ``v_world`` holds world-space velocities (per unit normalized time) for
    the *visible rows* of the frame-t render; dt is the frame interval in
    normalized time. The covariance transport reuses the frame pair's scale
    transform.
    """
    tr = _Transport(out_t, out_t1)
    vbar = project_velocity(out_t.camera, out_t.means2d, out_t.depths, v_world)
    vbar_g = ad.take_rows(vbar, tr.it.reshape(-1))
    end_x = ad.add(tr.mu_t_x, ad.mul(vbar_g[:, 0], float(dt)))
    end_y = ad.add(tr.mu_t_y, ad.mul(vbar_g[:, 1], float(dt)))
    return tr.combine(end_x, end_y)


def lpfm_loss(flow_g: SparseFlow, flow_v: SparseFlow, flow_gt: FlowField, mask: np.ndarray,
              lambda_g: float = 0.5, lambda_v: float = 0.5) -> Tensor:
    """Mean L1 flow-matching loss over valid, motion-masked pixels.

    Both predictions must come from the same render (same covered pixels).
    With no supervised pixel the loss is 0 and a warning is emitted.
    """
    if flow_g.shape != flow_v.shape or len(flow_g.pix_v) != len(flow_v.pix_v):
        raise ValueError("flow predictions cover different pixel sets")
    mask = np.asarray(mask)
    sel = (flow_g.valid & flow_v.valid
           & flow_gt.valid[flow_g.pix_v, flow_g.pix_u]
           & (mask[flow_g.pix_v, flow_g.pix_u] > 0))
    idx = np.nonzero(sel)[0]
    if idx.size == 0:
        warnings.warn("flow-matching loss saw zero supervised pixels", stacklevel=2)
        return ad.constant(0.0)
    gt = ad.constant(flow_gt.vectors[flow_g.pix_v[idx], flow_g.pix_u[idx]])
    err_g = ad.sum_(ad.abs_(ad.sub(ad.take_rows(flow_g.vec, idx), gt)), axis=1)
    err_v = ad.sum_(ad.abs_(ad.sub(ad.take_rows(flow_v.vec, idx), gt)), axis=1)
    return ad.add(ad.mul(ad.mean(err_g), lambda_g), ad.mul(ad.mean(err_v), lambda_v))
