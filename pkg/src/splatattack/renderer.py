"""Deterministic Gaussian rasterizer with an exact reverse-mode pass.

Splats are depth sorted once per view (camera-space z of the mean, ties by
splat index) rather than per tile, and composited front to back::

    C = sum_i c_i a_i prod_{j<i} (1 - a_j) + bg prod_j (1 - a_j)
    a_i = sigmoid(opacity_logit_i) * exp(-0.5 d^T conic_i d)

Colors come from SH evaluated once per splat along the camera-to-center
direction. The image is processed in fixed blocks of pixel rows; every block
owns its gradient buffer and buffers are reduced in block order, so results
are bit-identical for any thread count. The backward pass recomputes each
block's forward state instead of storing per-pixel splat lists.

Constants below diverge from the reference CUDA rasterizer in places (no
alpha clamp at 0.99, no early termination, exact Mahalanobis 3-sigma test
instead of a square radius); they are collected here on purpose.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import core_math as cm
from .errors import ContractError
from .scene import Camera, Scene

ALPHA_MIN = 1.0 / 255.0  # contributions below this are skipped
SIGMA_CUTOFF = 3.0  # Mahalanobis radius of the splat footprint
ROWS_PER_BLOCK = 8  # fixed, independent of the worker count

GROUPS = ("position", "sh", "log_scales", "rotation", "opacity_logit")


@dataclass(frozen=True)
class RenderOptions:
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    sh_degree: int | None = None  # None: all stored bands (degree 3)
    near: float = cm.NEAR_PLANE
    threads: int = 1


@dataclass
class RenderStats:
    culled: int = 0
    skipped_singular: int = 0
    transparent: int = 0


@dataclass
class SceneGradients:
    d_position: np.ndarray
    d_sh: np.ndarray
    d_log_scales: np.ndarray
    d_rotation: np.ndarray
    d_opacity_logit: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "SceneGradients":
        return cls(np.zeros((n, 3)), np.zeros((n, cm.SH_BASIS_COUNT, 3)), np.zeros((n, 3)),
                   np.zeros((n, 4)), np.zeros(n))

    def group(self, name: str) -> np.ndarray:
        return getattr(self, "d_" + name)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {g: self.group(g) for g in GROUPS}

    def scaled_add(self, other: "SceneGradients", weight: float = 1.0) -> None:
        for g in GROUPS:
            self.group(g)[...] += weight * other.group(g)


@dataclass
class RenderResult:
    image: np.ndarray
    grads: SceneGradients | None = None
    stats: RenderStats = field(default_factory=RenderStats)


@dataclass
class _Prepared:
    """Per-view splat state, restricted to splats that can contribute, in depth order."""

    index: np.ndarray
    t: np.ndarray
    u: np.ndarray
    v: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    det: np.ndarray
    conic: tuple[np.ndarray, np.ndarray, np.ndarray]
    ry: np.ndarray
    opacity: np.ndarray
    colors: np.ndarray
    raw_colors: np.ndarray
    basis: np.ndarray
    dirs: np.ndarray
    dist: np.ndarray
    jw: np.ndarray
    cov3: np.ndarray
    mscale: np.ndarray
    rot: np.ndarray
    qunit: np.ndarray
    scales: np.ndarray
    degree: int
    stats: RenderStats


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _prepare(scene: Scene, cam: Camera, opts: RenderOptions) -> _Prepared:
    degree = cm.MAX_SH_DEGREE if opts.sh_degree is None else int(opts.sh_degree)
    cm.sh_basis_count(degree)
    stats = RenderStats()
    rw, tw = cam.rotation, cam.translation
    t_all = np.einsum("ij,nj->ni", rw, scene.positions) + tw
    keep = t_all[:, 2] > opts.near
    stats.culled = int(np.count_nonzero(~keep))
    opacity_all = _sigmoid(scene.opacity_logits)
    transparent = keep & (opacity_all < ALPHA_MIN)
    stats.transparent = int(np.count_nonzero(transparent))
    keep &= ~transparent
    idx = np.flatnonzero(keep)
    t = t_all[idx]
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]

    qunit = cm.normalize_quaternion(scene.rotations[idx]) if len(idx) else np.zeros((0, 4))
    rot = cm.quaternion_to_matrix(qunit)
    scales = np.exp(scene.log_scales[idx])
    mscale = rot * scales[:, None, :]
    cov3 = np.einsum("nik,njk->nij", mscale, mscale)
    jac = cm.projection_jacobian(t, cam.fx, cam.fy)
    jw = np.einsum("nij,jk->nik", jac, rw)
    sj0 = np.einsum("nij,nj->ni", cov3, jw[:, 0])
    sj1 = np.einsum("nij,nj->ni", cov3, jw[:, 1])
    a = np.einsum("ni,ni->n", jw[:, 0], sj0) + cm.LOW_PASS
    b = np.einsum("ni,ni->n", jw[:, 0], sj1)
    c = np.einsum("ni,ni->n", jw[:, 1], sj1) + cm.LOW_PASS
    det = a * c - b * b
    ok = np.isfinite(det) & (det > 0.0)
    stats.skipped_singular = int(np.count_nonzero(~ok))

    u = cam.fx * tx / tz + cam.cx
    v = cam.fy * ty / tz + cam.cy
    with np.errstate(invalid="ignore"):
        rx = SIGMA_CUTOFF * np.sqrt(a)
        ry = SIGMA_CUTOFF * np.sqrt(c)
    onscreen = (u + rx >= 0.5) & (u - rx <= cam.width - 0.5) & (v + ry >= 0.5) & (v - ry <= cam.height - 0.5)
    sel = ok & onscreen
    order = np.flatnonzero(sel)
    order = order[np.argsort(tz[order], kind="stable")]  # stable: ties keep index order

    def pick(arr):
        return arr[order]

    index = idx[order]
    det_s = pick(det)
    a_s, b_s, c_s = pick(a), pick(b), pick(c)
    conic = (c_s / det_s, -b_s / det_s, a_s / det_s)
    offset = scene.positions[index] - cam.center
    dist = np.sqrt(np.sum(offset * offset, axis=1))
    dirs = offset / dist[:, None]
    colors, raw, basis = cm.eval_sh_batch(scene.sh[index], dirs, degree)
    return _Prepared(
        index=index, t=pick(t), u=pick(u), v=pick(v), a=a_s, b=b_s, c=c_s, det=det_s,
        conic=conic, ry=pick(ry), opacity=opacity_all[index], colors=colors, raw_colors=raw,
        basis=basis, dirs=dirs, dist=dist, jw=pick(jw), cov3=pick(cov3), mscale=pick(mscale),
        rot=pick(rot), qunit=pick(qunit), scales=pick(scales), degree=degree, stats=stats,
    )


@dataclass
class _BlockOut:
    rows: tuple[int, int]
    color: np.ndarray
    cand: np.ndarray | None = None
    d_color: np.ndarray | None = None
    d_opacity: np.ndarray | None = None
    d_u: np.ndarray | None = None
    d_v: np.ndarray | None = None
    d_conic: tuple | None = None
    active: np.ndarray | None = None


def _block(prep: _Prepared, width: int, r0: int, r1: int, bg: np.ndarray,
           adj: np.ndarray | None, want_active: bool = False) -> _BlockOut:
    ys = np.arange(r0, r1, dtype=np.float64) + 0.5
    xs = np.arange(width, dtype=np.float64) + 0.5
    px = np.tile(xs, r1 - r0)
    py = np.repeat(ys, width)
    cand = np.flatnonzero((prep.v + prep.ry >= ys[0]) & (prep.v - prep.ry <= ys[-1]))
    npix = px.size
    if cand.size == 0:
        color = np.broadcast_to(bg, (npix, 3)).copy()
        out = _BlockOut((r0, r1), color, cand)
        if adj is not None:
            z = np.zeros(0)
            out.d_color, out.d_opacity, out.d_u, out.d_v = np.zeros((0, 3)), z, z, z
            out.d_conic = (z, z, z)
        if want_active:
            out.active = np.zeros((0, npix), dtype=bool)
        return out

    ca, cb, cc = (k[cand] for k in prep.conic)
    dx = px[None, :] - prep.u[cand, None]
    dy = py[None, :] - prep.v[cand, None]
    q = ca[:, None] * dx * dx + 2.0 * cb[:, None] * dx * dy + cc[:, None] * dy * dy
    gauss = np.exp(-0.5 * q)
    opac = prep.opacity[cand]
    alpha = opac[:, None] * gauss
    active = (q <= SIGMA_CUTOFF * SIGMA_CUTOFF) & (alpha >= ALPHA_MIN)
    alpha = np.where(active, alpha, 0.0)
    one_minus = 1.0 - alpha
    t_incl = np.cumprod(one_minus, axis=0)
    trans = np.empty_like(t_incl)
    trans[0] = 1.0
    trans[1:] = t_incl[:-1]
    weight = alpha * trans
    cols = prep.colors[cand]
    color = np.einsum("np,nc->pc", weight, cols) + t_incl[-1][:, None] * bg[None, :]
    out = _BlockOut((r0, r1), color, cand)
    if want_active:
        out.active = active
    if adj is None:
        return out

    g = np.einsum("pc,nc->np", adj, cols)
    out.d_color = np.einsum("np,pc->nc", weight, adj)
    # behind[i]: adjoint-weighted color composited behind splat i (incl. background)
    behind = np.empty_like(alpha)
    behind[-1] = adj @ bg
    for i in range(len(cand) - 2, -1, -1):
        behind[i] = alpha[i + 1] * g[i + 1] + one_minus[i + 1] * behind[i + 1]
    d_alpha = np.where(active, trans * (g - behind), 0.0)
    out.d_opacity = np.sum(d_alpha * gauss, axis=1)
    d_pow = d_alpha * alpha
    out.d_u = np.sum(d_pow * (ca[:, None] * dx + cb[:, None] * dy), axis=1)
    out.d_v = np.sum(d_pow * (cb[:, None] * dx + cc[:, None] * dy), axis=1)
    out.d_conic = (
        -0.5 * np.sum(d_pow * dx * dx, axis=1),
        -np.sum(d_pow * dx * dy, axis=1),
        -0.5 * np.sum(d_pow * dy * dy, axis=1),
    )
    return out


def _row_blocks(height: int) -> list[tuple[int, int]]:
    return [(r, min(r + ROWS_PER_BLOCK, height)) for r in range(0, height, ROWS_PER_BLOCK)]


def _run_blocks(prep, cam, bg, adj, threads, want_active=False) -> list[_BlockOut]:
    blocks = _row_blocks(cam.height)

    def work(rows):
        r0, r1 = rows
        a = None if adj is None else adj[r0:r1].reshape(-1, 3)
        return _block(prep, cam.width, r0, r1, bg, a, want_active)

    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(work, blocks))  # map preserves block order
    return [work(rows) for rows in blocks]


def _assemble(outs: list[_BlockOut], cam: Camera) -> np.ndarray:
    image = np.empty((cam.height, cam.width, 3))
    for out in outs:
        r0, r1 = out.rows
        image[r0:r1] = out.color.reshape(r1 - r0, cam.width, 3)
    return image


def _options(options: RenderOptions | None, kw) -> RenderOptions:
    options = options or RenderOptions()
    if kw:
        options = RenderOptions(**{**options.__dict__, **kw})
    return options


def rasterize(scene: Scene, camera: Camera, options: RenderOptions | None = None, **kw) -> RenderResult:
    opts = _options(options, kw)
    prep = _prepare(scene, camera, opts)
    bg = np.asarray(opts.background, dtype=np.float64)
    outs = _run_blocks(prep, camera, bg, None, opts.threads)
    return RenderResult(_assemble(outs, camera), None, prep.stats)


def render(scene: Scene, camera: Camera, options: RenderOptions | None = None, **kw) -> np.ndarray:
    """Forward render to an ``(height, width, 3)`` float image."""
    return rasterize(scene, camera, options, **kw).image


def footprint(scene: Scene, camera: Camera, options: RenderOptions | None = None, **kw):
    """Discrete state of a render: active (splat, pixel) pairs, clamp states and depth order.

    Two parameter settings with equal footprints lie in the same smooth piece
    of the render function, which is what finite-difference checks need.
    """
    opts = _options(options, kw)
    prep = _prepare(scene, camera, opts)
    bg = np.asarray(opts.background, dtype=np.float64)
    outs = _run_blocks(prep, camera, bg, None, 1, want_active=True)
    n = len(scene)
    active = np.zeros((n, camera.height * camera.width), dtype=bool)
    for out in outs:
        r0, r1 = out.rows
        if out.cand.size:
            active[prep.index[out.cand], r0 * camera.width:r1 * camera.width] = out.active
    inrange = np.zeros((n, 3), dtype=bool)
    inrange[prep.index] = (prep.raw_colors >= 0.0) & (prep.raw_colors <= 1.0)
    return active, inrange, prep.index.copy()


def _resolve_mask(mask, n: int) -> np.ndarray:
    keep = np.zeros(n, dtype=bool)
    if mask is None:
        keep[:] = True
        return keep
    idx = np.asarray(list(mask) if not isinstance(mask, np.ndarray) else mask, dtype=np.int64).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ContractError(f"mask index out of range for {n} splats")
    keep[idx] = True
    return keep


def _resolve_groups(groups) -> set[str]:
    if groups is None:
        return set(GROUPS)
    chosen = set(groups)
    unknown = chosen - set(GROUPS)
    if unknown:
        raise ContractError(f"unknown parameter groups {sorted(unknown)}")
    return chosen


def render_with_gradients(scene: Scene, camera: Camera, adjoint: np.ndarray, mask=None,
                          groups=None, options: RenderOptions | None = None, **kw) -> RenderResult:
    """Render and pull ``adjoint`` (dL/dpixel) back onto raw splat parameters.

    Splats outside ``mask`` (default: all splats) and groups not listed in
    ``groups`` (default: all) get exactly-zero gradients. The clamp on SH
    color has zero derivative outside [0, 1].
    """
    opts = _options(options, kw)
    adjoint = np.asarray(adjoint, dtype=np.float64)
    if adjoint.shape != (camera.height, camera.width, 3):
        raise ContractError(f"adjoint shape {adjoint.shape} != {(camera.height, camera.width, 3)}")
    n = len(scene)
    keep = _resolve_mask(mask, n)
    active_groups = _resolve_groups(groups)
    prep = _prepare(scene, camera, opts)
    bg = np.asarray(opts.background, dtype=np.float64)
    outs = _run_blocks(prep, camera, bg, adjoint, opts.threads)
    image = _assemble(outs, camera)

    m = len(prep.index)
    d_color = np.zeros((m, 3))
    d_opacity = np.zeros(m)
    d_u = np.zeros(m)
    d_v = np.zeros(m)
    d_ca, d_cb, d_cc = np.zeros(m), np.zeros(m), np.zeros(m)
    for out in outs:  # fixed block order
        k = out.cand
        d_color[k] += out.d_color
        d_opacity[k] += out.d_opacity
        d_u[k] += out.d_u
        d_v[k] += out.d_v
        d_ca[k] += out.d_conic[0]
        d_cb[k] += out.d_conic[1]
        d_cc[k] += out.d_conic[2]

    grads = SceneGradients.zeros(n)
    if m:
        _chain_to_params(scene, camera, prep, grads, d_color, d_opacity, d_u, d_v, (d_ca, d_cb, d_cc))
    for g in GROUPS:
        arr = grads.group(g)
        if g not in active_groups:
            arr[...] = 0.0
        else:
            arr[~keep] = 0.0
    return RenderResult(image, grads, prep.stats)


def _chain_to_params(scene, cam, prep: _Prepared, grads: SceneGradients,
                     d_color, d_opacity, d_u, d_v, d_conic) -> None:
    idx = prep.index
    o = prep.opacity
    grads.d_opacity_logit[idx] = d_opacity * o * (1.0 - o)

    # color: clamp -> SH polynomial -> normalized view direction
    d_raw = np.where((prep.raw_colors >= 0.0) & (prep.raw_colors <= 1.0), d_color, 0.0)
    nb = cm.sh_basis_count(prep.degree)
    grads.d_sh[idx, :nb, :] = prep.basis[:, :, None] * d_raw[:, None, :]
    d_pos = np.zeros((len(idx), 3))
    if prep.degree > 0:
        dbasis = cm.sh_basis_jacobian(prep.dirs, prep.degree)  # (m, nb, 3)
        d_basis = np.einsum("nkc,nc->nk", scene.sh[idx, :nb, :], d_raw)
        d_dir = np.einsum("nk,nki->ni", d_basis, dbasis)
        radial = np.sum(d_dir * prep.dirs, axis=1, keepdims=True)
        d_pos += (d_dir - prep.dirs * radial) / prep.dist[:, None]

    # conic = inverse(cov2d)
    a, b, c, det = prep.a, prep.b, prep.c, prep.det
    gA, gB, gC = d_conic
    det2 = det * det
    d_a = (-gA * c * c + gB * b * c - gC * b * b) / det2
    d_b = (2.0 * gA * b * c - gB * (a * c + b * b) + 2.0 * gC * a * b) / det2
    d_c = (-gA * b * b + gB * a * b - gC * a * a) / det2

    # cov2d = JW cov3 JW^T
    jw0, jw1 = prep.jw[:, 0], prep.jw[:, 1]
    g_cov = (
        d_a[:, None, None] * jw0[:, :, None] * jw0[:, None, :]
        + d_b[:, None, None] * jw0[:, :, None] * jw1[:, None, :]
        + d_c[:, None, None] * jw1[:, :, None] * jw1[:, None, :]
    )
    g_cov = 0.5 * (g_cov + np.swapaxes(g_cov, 1, 2))
    s0 = np.einsum("nij,nj->ni", prep.cov3, jw0)
    s1 = np.einsum("nij,nj->ni", prep.cov3, jw1)
    d_jw = np.stack([2.0 * d_a[:, None] * s0 + d_b[:, None] * s1,
                     d_b[:, None] * s0 + 2.0 * d_c[:, None] * s1], axis=1)

    # cov3 = M M^T, M = R(q) diag(exp(s))
    d_m = 2.0 * np.einsum("nij,njk->nik", g_cov, prep.mscale)
    d_scale = np.sum(d_m * prep.rot, axis=1)
    grads.d_log_scales[idx] = d_scale * prep.scales
    d_rot = d_m * prep.scales[:, None, :]
    d_qunit = cm.quaternion_matrix_vjp(prep.qunit, d_rot)
    grads.d_rotation[idx] = cm.normalize_vjp(scene.rotations[idx], d_qunit)

    # JW = J(t) R_w ; mean2d = pinhole(t)
    d_j = np.einsum("nik,jk->nij", d_jw, cam.rotation)
    tx, ty, tz = prep.t[:, 0], prep.t[:, 1], prep.t[:, 2]
    fx, fy = cam.fx, cam.fy
    tz2 = tz * tz
    tz3 = tz2 * tz
    d_t = np.zeros((len(idx), 3))
    d_t[:, 0] = -fx / tz2 * d_j[:, 0, 2] + fx / tz * d_u
    d_t[:, 1] = -fy / tz2 * d_j[:, 1, 2] + fy / tz * d_v
    d_t[:, 2] = (
        -fx / tz2 * d_j[:, 0, 0] + 2.0 * fx * tx / tz3 * d_j[:, 0, 2]
        - fy / tz2 * d_j[:, 1, 1] + 2.0 * fy * ty / tz3 * d_j[:, 1, 2]
        - fx * tx / tz2 * d_u - fy * ty / tz2 * d_v
    )
    d_pos += np.einsum("ni,ij->nj", d_t, cam.rotation)
    grads.d_position[idx] = d_pos
