"""Single-threaded numba kernels: per-pixel splat compositing and SSIM windows.

Everything here is deterministic: fixed iteration order, no parallelism, so
repeated calls with identical inputs are bit-identical.
"""

import numpy as np
from numba import njit

ALPHA_CLAMP = 0.99          # per-splat alpha ceiling
ALPHA_SKIP = 1.0 / 255.0    # splats dimmer than this are skipped
T_CUTOFF = 1e-4             # stop compositing once transmittance drops below this
# exp(power) < ALPHA_SKIP whenever power < ln(1/255); test power first to skip exp()
POWER_SKIP = -5.55


@njit(cache=True)
def composite_forward(mean2d, conic, color, opacity, depth, bbox, height, width,
                      background, bg_depth):
    """Front-to-back alpha compositing of depth-sorted splats.

    bbox rows are inclusive pixel index bounds (x0, x1, y0, y1) per splat.
    Returns (image, transmittance, stop_index, depth_map) where stop_index[i, j]
    is the sorted-splat index at which the pixel saturated (n_splats if never),
    and depth_map is the compositing-weighted expected depth.
    """
    n = mean2d.shape[0]
    img = np.zeros((height, width, 3))
    trans = np.ones((height, width))
    stop = np.full((height, width), n, dtype=np.int64)
    depth_acc = np.zeros((height, width))

    for s in range(n):
        a, b, c = conic[s, 0], conic[s, 1], conic[s, 2]
        for i in range(bbox[s, 2], bbox[s, 3] + 1):
            for j in range(bbox[s, 0], bbox[s, 1] + 1):
                t_cur = trans[i, j]
                if t_cur < T_CUTOFF:
                    continue
                dx = (j + 0.5) - mean2d[s, 0]
                dy = (i + 0.5) - mean2d[s, 1]
                power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)
                if power > 0.0 or power < POWER_SKIP:
                    continue
                alpha = opacity[s] * np.exp(power)
                if alpha > ALPHA_CLAMP:
                    alpha = ALPHA_CLAMP
                if alpha < ALPHA_SKIP:
                    continue
                w = alpha * t_cur
                img[i, j, 0] += color[s, 0] * w
                img[i, j, 1] += color[s, 1] * w
                img[i, j, 2] += color[s, 2] * w
                depth_acc[i, j] += depth[s] * w
                t_new = t_cur * (1.0 - alpha)
                trans[i, j] = t_new
                if t_new < T_CUTOFF:
                    stop[i, j] = s + 1

    for i in range(height):
        for j in range(width):
            t = trans[i, j]
            img[i, j, 0] += t * background[0]
            img[i, j, 1] += t * background[1]
            img[i, j, 2] += t * background[2]
            depth_acc[i, j] += t * bg_depth
    return img, trans, stop, depth_acc


@njit(cache=True)
def composite_backward(mean2d, conic, color, opacity, bbox, height, width,
                       background, final_trans, stop, upstream):
    """Adjoint of composite_forward w.r.t. per-splat 2D quantities.

    Walks splats back-to-front, reconstructing the transmittance each splat saw
    by dividing the stored final transmittance back out (alpha <= 0.99 keeps the
    division bounded). Returns per-splat gradients
    (d_mean2d, d_conic, d_color, d_opacity).
    """
    n = mean2d.shape[0]
    d_mean2d = np.zeros((n, 2))
    d_conic = np.zeros((n, 3))
    d_color = np.zeros((n, 3))
    d_opacity = np.zeros(n)

    # suffix color: contributions of splats behind the current one + background
    suffix = np.empty((height, width, 3))
    t_after = np.empty((height, width))
    for i in range(height):
        for j in range(width):
            t = final_trans[i, j]
            t_after[i, j] = t
            suffix[i, j, 0] = t * background[0]
            suffix[i, j, 1] = t * background[1]
            suffix[i, j, 2] = t * background[2]

    for s in range(n - 1, -1, -1):
        a, b, c = conic[s, 0], conic[s, 1], conic[s, 2]
        for i in range(bbox[s, 2], bbox[s, 3] + 1):
            for j in range(bbox[s, 0], bbox[s, 1] + 1):
                if s >= stop[i, j]:
                    continue
                dx = (j + 0.5) - mean2d[s, 0]
                dy = (i + 0.5) - mean2d[s, 1]
                power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)
                if power > 0.0 or power < POWER_SKIP:
                    continue
                g = np.exp(power)
                alpha = opacity[s] * g
                clamped = alpha > ALPHA_CLAMP
                if clamped:
                    alpha = ALPHA_CLAMP
                if alpha < ALPHA_SKIP:
                    continue
                one_m = 1.0 - alpha
                t_before = t_after[i, j] / one_m
                w = alpha * t_before

                d_alpha = 0.0
                for ch in range(3):
                    up = upstream[i, j, ch]
                    d_color[s, ch] += up * w
                    d_alpha += up * (color[s, ch] * t_before - suffix[i, j, ch] / one_m)

                if not clamped:
                    d_opacity[s] += d_alpha * g
                    d_power = d_alpha * opacity[s] * g
                    # d power / d mean2d = +conic . d  (d = pixel - mean)
                    d_mean2d[s, 0] += d_power * (a * dx + b * dy)
                    d_mean2d[s, 1] += d_power * (b * dx + c * dy)
                    d_conic[s, 0] += d_power * (-0.5 * dx * dx)
                    d_conic[s, 1] += d_power * (-dx * dy)
                    d_conic[s, 2] += d_power * (-0.5 * dy * dy)

                # roll pixel state back to before this splat
                suffix[i, j, 0] += color[s, 0] * w
                suffix[i, j, 1] += color[s, 1] * w
                suffix[i, j, 2] += color[s, 2] * w
                t_after[i, j] = t_before

    return d_mean2d, d_conic, d_color, d_opacity


@njit(cache=True)
def project_geometry(q_unit, s_phys, t_cam, rot_w, fx, fy, dilation):
    """Per-splat 2D covariance and conic from unit quaternion, physical scale,
    and camera-space position. rot_w is the world-to-camera rotation."""
    n = q_unit.shape[0]
    cov2d = np.empty((n, 3))
    conic = np.empty((n, 3))
    rot = np.empty((n, 3, 3))
    proj = np.empty((n, 2, 3))
    for k in range(n):
        w, x, y, z = q_unit[k, 0], q_unit[k, 1], q_unit[k, 2], q_unit[k, 3]
        r = rot[k]
        r[0, 0] = 1.0 - 2.0 * (y * y + z * z)
        r[0, 1] = 2.0 * (x * y - w * z)
        r[0, 2] = 2.0 * (x * z + w * y)
        r[1, 0] = 2.0 * (x * y + w * z)
        r[1, 1] = 1.0 - 2.0 * (x * x + z * z)
        r[1, 2] = 2.0 * (y * z - w * x)
        r[2, 0] = 2.0 * (x * z - w * y)
        r[2, 1] = 2.0 * (y * z + w * x)
        r[2, 2] = 1.0 - 2.0 * (x * x + y * y)

        tx, ty, tz = t_cam[k, 0], t_cam[k, 1], t_cam[k, 2]
        inv_z = 1.0 / tz
        j00 = fx * inv_z
        j02 = -fx * tx * inv_z * inv_z
        j11 = fy * inv_z
        j12 = -fy * ty * inv_z * inv_z
        # M = J @ W, rows of J are (j00, 0, j02) and (0, j11, j12)
        m = proj[k]
        for col in range(3):
            m[0, col] = j00 * rot_w[0, col] + j02 * rot_w[2, col]
            m[1, col] = j11 * rot_w[1, col] + j12 * rot_w[2, col]

        # V = M Sigma M^T with Sigma = R diag(s^2) R^T: rows of (M R) scaled
        a = 0.0
        b = 0.0
        c = 0.0
        for i in range(3):
            s2 = s_phys[k, i] * s_phys[k, i]
            mr0 = m[0, 0] * r[0, i] + m[0, 1] * r[1, i] + m[0, 2] * r[2, i]
            mr1 = m[1, 0] * r[0, i] + m[1, 1] * r[1, i] + m[1, 2] * r[2, i]
            a += s2 * mr0 * mr0
            b += s2 * mr0 * mr1
            c += s2 * mr1 * mr1
        a += dilation
        c += dilation
        cov2d[k, 0] = a
        cov2d[k, 1] = b
        cov2d[k, 2] = c
        det = a * c - b * b
        conic[k, 0] = c / det
        conic[k, 1] = -b / det
        conic[k, 2] = a / det
    return rot, proj, cov2d, conic


@njit(cache=True)
def project_geometry_backward(q_unit, s_phys, t_cam, rot, proj, cov2d,
                              rot_w, fx, fy, d_conic, d_mean2d):
    """Adjoint of project_geometry + the pixel-mean projection.

    Returns gradients w.r.t. the camera-space position, physical scales, and
    the unit quaternion.
    """
    n = q_unit.shape[0]
    d_t = np.zeros((n, 3))
    d_s = np.zeros((n, 3))
    d_q = np.zeros((n, 4))
    gs = np.empty((3, 3))
    gr = np.empty((3, 3))
    d_rot = np.empty((3, 3))
    for k in range(n):
        a, b, c = cov2d[k, 0], cov2d[k, 1], cov2d[k, 2]
        det = a * c - b * b
        inv_det2 = 1.0 / (det * det)
        da_, db_, dc_ = d_conic[k, 0], d_conic[k, 1], d_conic[k, 2]
        # packed Jacobian of the 2x2 inverse
        dca = (-c * c * da_ + b * c * db_ - b * b * dc_) * inv_det2
        dcb = (2.0 * b * c * da_ - (a * c + b * b) * db_ + 2.0 * a * b * dc_) * inv_det2
        dcc = (-b * b * da_ + a * b * db_ - a * a * dc_) * inv_det2
        # full-matrix gradient of cov2d: [[dca, dcb/2], [dcb/2, dcc]]
        g00, g01, g11 = dca, 0.5 * dcb, dcc

        m = proj[k]
        r = rot[k]
        # g_sigma = M^T Gc M (symmetric 3x3)
        for i in range(3):
            gm0 = m[0, i] * g00 + m[1, i] * g01
            gm1 = m[0, i] * g01 + m[1, i] * g11
            for jcol in range(3):
                gs[i, jcol] = gm0 * m[0, jcol] + gm1 * m[1, jcol]

        # Sigma = R diag(s^2) R^T for d_proj
        # d_proj = 2 Gc M Sigma; first form (M Sigma)
        dms = np.zeros((2, 3))
        for i in range(3):
            s2 = s_phys[k, i] * s_phys[k, i]
            mr0 = m[0, 0] * r[0, i] + m[0, 1] * r[1, i] + m[0, 2] * r[2, i]
            mr1 = m[1, 0] * r[0, i] + m[1, 1] * r[1, i] + m[1, 2] * r[2, i]
            for jcol in range(3):
                dms[0, jcol] += s2 * mr0 * r[jcol, i]
                dms[1, jcol] += s2 * mr1 * r[jcol, i]
        dp00 = 2.0 * (g00 * dms[0, 0] + g01 * dms[1, 0])
        dp01 = 2.0 * (g00 * dms[0, 1] + g01 * dms[1, 1])
        dp02 = 2.0 * (g00 * dms[0, 2] + g01 * dms[1, 2])
        dp10 = 2.0 * (g01 * dms[0, 0] + g11 * dms[1, 0])
        dp11 = 2.0 * (g01 * dms[0, 1] + g11 * dms[1, 1])
        dp12 = 2.0 * (g01 * dms[0, 2] + g11 * dms[1, 2])

        # d_jac = d_proj @ W^T (only the four J entries matter)
        dj00 = dp00 * rot_w[0, 0] + dp01 * rot_w[0, 1] + dp02 * rot_w[0, 2]
        dj02 = dp00 * rot_w[2, 0] + dp01 * rot_w[2, 1] + dp02 * rot_w[2, 2]
        dj11 = dp10 * rot_w[1, 0] + dp11 * rot_w[1, 1] + dp12 * rot_w[1, 2]
        dj12 = dp10 * rot_w[2, 0] + dp11 * rot_w[2, 1] + dp12 * rot_w[2, 2]

        tx, ty, tz = t_cam[k, 0], t_cam[k, 1], t_cam[k, 2]
        inv_z = 1.0 / tz
        inv_z2 = inv_z * inv_z
        du, dv = d_mean2d[k, 0], d_mean2d[k, 1]
        d_t[k, 0] = du * fx * inv_z - dj02 * fx * inv_z2
        d_t[k, 1] = dv * fy * inv_z - dj12 * fy * inv_z2
        d_t[k, 2] = (-du * fx * tx * inv_z2 - dv * fy * ty * inv_z2
                     - dj00 * fx * inv_z2 + dj02 * 2.0 * fx * tx * inv_z2 * inv_z
                     - dj11 * fy * inv_z2 + dj12 * 2.0 * fy * ty * inv_z2 * inv_z)

        # gr = Gs R; d_rot = 2 gr diag(s^2); d_s = 2 s col-sums(R * gr)
        for i in range(3):
            for jcol in range(3):
                gr[i, jcol] = (gs[i, 0] * r[0, jcol] + gs[i, 1] * r[1, jcol]
                               + gs[i, 2] * r[2, jcol])
        for i in range(3):
            s2col = 2.0 * s_phys[k, i]
            d_s[k, i] = s2col * (r[0, i] * gr[0, i] + r[1, i] * gr[1, i]
                                 + r[2, i] * gr[2, i])
            for row in range(3):
                d_rot[row, i] = 2.0 * gr[row, i] * s_phys[k, i] * s_phys[k, i]

        w, x, y, z = q_unit[k, 0], q_unit[k, 1], q_unit[k, 2], q_unit[k, 3]
        g = d_rot
        d_q[k, 0] = 2.0 * (-z * g[0, 1] + y * g[0, 2] + z * g[1, 0]
                           - x * g[1, 2] - y * g[2, 0] + x * g[2, 1])
        d_q[k, 1] = 2.0 * (y * g[0, 1] + z * g[0, 2] + y * g[1, 0]
                           - 2.0 * x * g[1, 1] - w * g[1, 2] + z * g[2, 0]
                           + w * g[2, 1] - 2.0 * x * g[2, 2])
        d_q[k, 2] = 2.0 * (-2.0 * y * g[0, 0] + x * g[0, 1] + w * g[0, 2]
                           + x * g[1, 0] + z * g[1, 2] - w * g[2, 0]
                           + z * g[2, 1] - 2.0 * y * g[2, 2])
        d_q[k, 3] = 2.0 * (-2.0 * z * g[0, 0] - w * g[0, 1] + x * g[0, 2]
                           + w * g[1, 0] - 2.0 * z * g[1, 1] + y * g[1, 2]
                           + x * g[2, 0] + y * g[2, 1])
    return d_t, d_s, d_q


@njit(cache=True)
def ssim_image(x3, y3, w, c1, c2, upstream):
    """Three-channel SSIM with valid 11x11 windows, plus the scaled gradient.

    Windowed statistics use valid cropping (no padding). Returns
    (sum of per-window SSIM over all channels, window count over all channels,
    upstream * d(mean SSIM)/d x3). The separable window passes are fused so
    one call does all fields and channels with a handful of buffers.
    """
    h, wd, _ = x3.shape
    k = w.shape[0]
    hv = h - k + 1
    wv = wd - k + 1
    t = np.empty((5, h, wv))      # horizontal pass: x, y, xx, yy, xy
    mu = np.empty((5, hv, wv))    # after vertical pass
    p = np.empty((3, hv, wv))     # partials w.r.t. (mu_x, m_xx, m_xy)
    t2 = np.empty((3, h, wv))     # scatter, vertical stage
    sc = np.empty((3, h, wd))     # scatter, horizontal stage
    grad = np.empty((h, wd, 3))
    total = 0.0
    scale = upstream / (3.0 * hv * wv)

    for ch in range(3):
        for i in range(h):
            for j in range(wv):
                a0 = 0.0; a1 = 0.0; a2 = 0.0; a3 = 0.0; a4 = 0.0
                for q in range(k):
                    xv = x3[i, j + q, ch]
                    yv = y3[i, j + q, ch]
                    wk = w[q]
                    a0 += wk * xv
                    a1 += wk * yv
                    a2 += wk * xv * xv
                    a3 += wk * yv * yv
                    a4 += wk * xv * yv
                t[0, i, j] = a0; t[1, i, j] = a1; t[2, i, j] = a2
                t[3, i, j] = a3; t[4, i, j] = a4
        for f in range(5):
            for i in range(hv):
                for j in range(wv):
                    acc = 0.0
                    for q in range(k):
                        acc += w[q] * t[f, i + q, j]
                    mu[f, i, j] = acc

        for i in range(hv):
            for j in range(wv):
                mx = mu[0, i, j]
                my = mu[1, i, j]
                sx = mu[2, i, j] - mx * mx
                sy = mu[3, i, j] - my * my
                sxy = mu[4, i, j] - mx * my
                n1 = 2.0 * mx * my + c1
                n2 = 2.0 * sxy + c2
                d1 = mx * mx + my * my + c1
                d2 = sx + sy + c2
                s = (n1 * n2) / (d1 * d2)
                total += s
                ds_dsx = -s / d2
                ds_dsxy = 2.0 * n1 / (d1 * d2)
                ds_dmux = 2.0 * my * n2 / (d1 * d2) - 2.0 * s * mx / d1
                p[0, i, j] = ds_dmux - 2.0 * mx * ds_dsx - my * ds_dsxy
                p[1, i, j] = ds_dsx
                p[2, i, j] = ds_dsxy

        # adjoint of the valid windowing: spread partials back over pixels
        for f in range(3):
            for i in range(h):
                for j in range(wv):
                    t2[f, i, j] = 0.0
            for i in range(hv):
                for j in range(wv):
                    v = p[f, i, j]
                    for q in range(k):
                        t2[f, i + q, j] += w[q] * v
            for i in range(h):
                for j in range(wd):
                    sc[f, i, j] = 0.0
            for i in range(h):
                for j in range(wv):
                    v = t2[f, i, j]
                    for q in range(k):
                        sc[f, i, j + q] += w[q] * v

        for i in range(h):
            for j in range(wd):
                grad[i, j, ch] = scale * (sc[0, i, j]
                                          + 2.0 * x3[i, j, ch] * sc[1, i, j]
                                          + y3[i, j, ch] * sc[2, i, j])

    return total, 3 * hv * wv, grad
