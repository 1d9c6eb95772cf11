"""Independent straight-line implementations used as oracles by the tests.

Everything here is deliberately written with plain loops and no shared code
with the package, so agreement is evidence of correctness rather than an
identity.
"""

import numpy as np

EPANECHNIKOV_BANDWIDTH = 0.25


def brute_densities(points, r):
    """Per-point Epanechnikov KDE, bandwidth 0.25*r, by double loop."""
    points = np.asarray(points, dtype=np.float64)
    h = EPANECHNIKOV_BANDWIDTH * r
    n = len(points)
    out = np.zeros(n)
    for j in range(n):
        acc = 0.0
        for k in range(n):
            d = np.linalg.norm(points[j] - points[k])
            if d < h:
                t = d / h
                acc += 1.0 - t * t
        out[j] = acc
    return out


def mlp_eval(offset, weights, biases, slope):
    """Kernel MLP on one offset, plain loops."""
    h = np.asarray(offset, dtype=np.float64)
    for li in range(len(weights)):
        w = weights[li]
        b = biases[li]
        out = np.zeros(w.shape[1])
        for q in range(w.shape[1]):
            acc = b[q]
            for p in range(w.shape[0]):
                acc += h[p] * w[p, q]
            out[q] = acc
        if li != len(weights) - 1:
            for q in range(len(out)):
                if out[q] < 0:
                    out[q] = slope * out[q]
        h = out
    return h


def reference_mc_convolve(layer, in_points, in_features, out_points, densities,
                          out_extra=None):
    """Direct evaluation of the density-compensated neighborhood average."""
    in_points = np.asarray(in_points, dtype=np.float64)
    out_points = np.asarray(out_points, dtype=np.float64)
    in_features = np.asarray(in_features, dtype=np.float64)
    densities = np.asarray(densities, dtype=np.float64)
    weights = [w.values.astype(np.float64) for w in layer.mlp.weights]
    biases = [b.values.astype(np.float64) for b in layer.mlp.biases]
    bias = layer.bias.values.astype(np.float64)
    r = layer.radius
    cout = layer.out_channels
    result = np.zeros((len(out_points), cout))
    for i in range(len(out_points)):
        neighbors = [
            j for j in range(len(in_points))
            if np.linalg.norm(out_points[i] - in_points[j]) < r
        ]
        if not neighbors:
            continue
        acc = np.zeros(cout)
        for j in neighbors:
            g = mlp_eval((out_points[i] - in_points[j]) / r, weights, biases, layer.mlp.slope)
            f = in_features[j]
            if out_extra is not None:
                f = np.concatenate([f, np.asarray(out_extra, dtype=np.float64)[i]])
            for ci in range(len(f)):
                for co in range(cout):
                    acc[co] += f[ci] * g[ci * cout + co] / densities[j]
        result[i] = acc / len(neighbors) + bias
    return result


def brute_nearest_hit(mesh, origin, direction, tmin=1e-7):
    """Nearest ray-triangle hit by scanning every triangle (Moller-Trumbore)."""
    best_t, best_i = np.inf, -1
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    for i, (ia, ib, ic) in enumerate(mesh.triangles):
        a = mesh.vertices[ia]
        e1 = mesh.vertices[ib] - a
        e2 = mesh.vertices[ic] - a
        p = np.cross(d, e2)
        det = e1 @ p
        if abs(det) < 1e-12:
            continue
        inv = 1.0 / det
        tv = o - a
        u = (tv @ p) * inv
        if u < -1e-9 or u > 1 + 1e-9:
            continue
        q = np.cross(tv, e1)
        v = (d @ q) * inv
        if v < -1e-9 or u + v > 1 + 1e-9:
            continue
        t = (e2 @ q) * inv
        if tmin < t < best_t:
            best_t, best_i = t, i
    return best_t, best_i


def point_triangle_distance(p, a, b, c):
    """Exact distance from a point to a triangle."""
    p, a, b, c = (np.asarray(x, dtype=np.float64) for x in (p, a, b, c))
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = ab @ ap, ac @ ap
    if d1 <= 0 and d2 <= 0:
        return np.linalg.norm(ap)
    bp = p - b
    d3, d4 = ab @ bp, ac @ bp
    if d3 >= 0 and d4 <= d3:
        return np.linalg.norm(bp)
    vc = d1 * d4 - d3 * d2
    if vc <= 0 and d1 >= 0 and d3 <= 0:
        v = d1 / (d1 - d3)
        return np.linalg.norm(ap - v * ab)
    cp = p - c
    d5, d6 = ab @ cp, ac @ cp
    if d6 >= 0 and d5 <= d6:
        return np.linalg.norm(cp)
    vb = d5 * d2 - d1 * d6
    if vb <= 0 and d2 >= 0 and d6 <= 0:
        w = d2 / (d2 - d6)
        return np.linalg.norm(ap - w * ac)
    va = d3 * d6 - d5 * d4
    if va <= 0 and (d4 - d3) >= 0 and (d5 - d6) >= 0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return np.linalg.norm(p - (b + w * (c - b)))
    n = np.cross(ab, ac)
    return abs(ap @ n) / np.linalg.norm(n)


def point_mesh_distance(p, mesh):
    return min(
        point_triangle_distance(p, mesh.vertices[ia], mesh.vertices[ib], mesh.vertices[ic])
        for ia, ib, ic in mesh.triangles
    )
