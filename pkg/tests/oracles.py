"""Slow, independent reference implementations used only by the tests."""

import numpy as np
from scipy.spatial import cKDTree


def naive_dft(points):
    """Direct O(L^2) one-sided unitary DFT of an (L, 3) strand."""
    L = points.shape[0]
    k = L // 2 + 1
    out = np.zeros((k, 3), dtype=complex)
    for m in range(k):
        for j in range(L):
            out[m] += points[j] * np.exp(-2j * np.pi * j * m / L)
    return out / np.sqrt(L)


def naive_idft(freq, L):
    """Inverse of :func:`naive_dft` via explicit Hermitian-symmetric summation."""
    k = freq.shape[0]
    full = np.zeros((L, 3), dtype=complex)
    full[:k] = freq
    for m in range(k, L):
        full[m] = np.conj(freq[L - m])
    out = np.zeros((L, 3))
    for j in range(L):
        acc = np.zeros(3, dtype=complex)
        for m in range(L):
            acc += full[m] * np.exp(2j * np.pi * j * m / L)
        out[j] = acc.real
    return out / np.sqrt(L)


def flatten_loop(freq):
    out = []
    for band in range(freq.shape[0]):
        for axis in range(3):
            out.append(freq[band, axis].real)
            out.append(freq[band, axis].imag)
    return np.array(out)


def eig_pca(vectors, m):
    """Full-batch PCA by eigendecomposition of the sample covariance."""
    mean = vectors.mean(axis=0)
    X = vectors - mean
    cov = X.T @ X / (len(X) - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:m]
    return mean, vecs[:, order].T, vals[order]


def matvec_loop(A, x):
    out = np.zeros(A.shape[0])
    for i in range(A.shape[0]):
        s = 0.0
        for j in range(A.shape[1]):
            s += A[i, j] * x[j]
        out[i] = s
    return out


def ellipsoid_mesh_vertices(head, n_theta=320, n_phi=320):
    theta = np.linspace(0.0, np.pi, n_theta)
    phi = np.linspace(0.0, 2 * np.pi, n_phi, endpoint=False)
    T, P = np.meshgrid(theta, phi, indexing="ij")
    unit = np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)], axis=-1).reshape(-1, 3)
    return np.asarray(head.center) + np.asarray(head.radii) * unit


def mesh_sdf(head, verts, points):
    """Signed distance to the nearest tessellation vertex; sign from the implicit equation."""
    dist, _ = cKDTree(verts).query(points)
    q = (points - np.asarray(head.center)) / np.asarray(head.radii)
    inside = np.sum(q * q, axis=-1) < 1.0
    return np.where(inside, -dist, dist)


def point_loss_loop(pred, gt, lam_dir, lam_curv, weights=None):
    """Per-strand scalar loop: position L2, segment-difference L1, curvature difference L1."""
    L = pred.shape[0]
    w = np.ones(L) if weights is None else weights
    total = 0.0

    def unit(v):
        n = np.linalg.norm(v)
        return v / n

    for j in range(L):
        term = np.linalg.norm(pred[j] - gt[j])
        if j < L - 1:
            vp = pred[j + 1] - pred[j]
            vg = gt[j + 1] - gt[j]
            term += lam_dir * np.sum(np.abs(vp - vg))
        if 0 < j < L - 1:
            gp = np.linalg.norm(np.cross(unit(pred[j] - pred[j - 1]), unit(pred[j + 1] - pred[j])))
            gg = np.linalg.norm(np.cross(unit(gt[j] - gt[j - 1]), unit(gt[j + 1] - gt[j])))
            term += lam_curv * abs(gp - gg)
        total += w[j] * term
    return total


def brute_chamfer(pa, ta, pb, tb):
    def one_way(p, t, q, s):
        dsum = 0.0
        asum = 0.0
        for i in range(len(p)):
            best = None
            bj = 0
            for j in range(len(q)):
                d = float(np.sum((p[i] - q[j]) ** 2))
                if best is None or d < best:
                    best, bj = d, j
            dsum += best
            asum += 1.0 - abs(float(np.dot(t[i], s[bj])))
        return dsum / len(p), asum / len(p)

    d1, a1 = one_way(pa, ta, pb, tb)
    d2, a2 = one_way(pb, tb, pa, ta)
    return 0.5 * (d1 + d2), 0.5 * (a1 + a2)


def central_diff(f, x, h):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def exact_quantile(values, q):
    s = np.sort(np.asarray(values, dtype=np.float64).ravel())
    h = (s.size - 1) * q
    lo = int(np.floor(h))
    hi = min(lo + 1, s.size - 1)
    return s[lo] + (h - lo) * (s[hi] - s[lo])


def random_strands(rng, n, L, spread=0.25, step=0.06):
    roots = rng.uniform(-spread, spread, size=(n, 1, 3))
    steps = rng.normal(scale=step, size=(n, L - 1, 3))
    return np.concatenate([roots, roots + np.cumsum(steps, axis=1)], axis=1)


def splat_alpha_at(cam, config, mean, cov, pixel):
    """Opacity of one 3D Gaussian splat at a pixel, by explicit EWA projection."""
    pc = cam.R @ mean + cam.t
    x, y, z = pc
    J = np.array([[cam.fx / z, 0.0, -cam.fx * x / z**2], [0.0, cam.fy / z, -cam.fy * y / z**2]])
    c2 = J @ cam.R @ cov @ cam.R.T @ J.T + config.blur * np.eye(2)
    m = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
    d = np.asarray(pixel, dtype=np.float64) - m
    m2 = d @ np.linalg.solve(c2, d)
    if m2 > config.cutoff**2:
        return 0.0, z
    return config.opacity * np.exp(-0.5 * m2), z


def raymarch_visibility(strands, cam, config, min_transmittance=0.5):
    """Point is visible when the opacity of all splats in front of it (at its pixel) leaves T >= threshold.

    Splats of the point's own two adjacent segments are excluded; the point's
    depth decides which splats count as "in front".
    """
    from hairsplat.render import build_splats

    splats = build_splats(strands, config)
    n, L, _ = strands.shape
    vis = np.zeros((n, L), dtype=bool)
    for i in range(n):
        for j in range(L):
            p = cam.R @ strands[i, j] + cam.t
            if p[2] <= cam.near:
                continue
            px = int(np.rint(cam.fx * p[0] / p[2] + cam.cx))
            py = int(np.rint(cam.fy * p[1] / p[2] + cam.cy))
            if not (0 <= px < cam.width and 0 <= py < cam.height):
                continue
            T = 1.0
            for k in range(len(splats)):
                si, sj = splats.source[k]
                if si == i and sj in (j - 1, j):
                    continue
                a, z = splat_alpha_at(cam, config, splats.means[k], splats.covariances[k], (px, py))
                if z < p[2]:
                    T *= 1.0 - a
            vis[i, j] = T >= min_transmittance
    return vis
