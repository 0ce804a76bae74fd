"""Independent reference implementations used as test oracles.

Everything here is deliberately naive: explicit loops, Python sets and
textbook formulas, sharing no code with the package beyond plain data types.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import sph_harm_y


def real_sh_row(l_max: int, direction) -> np.ndarray:
    """Real even-order SH from scipy's complex harmonics (Condon-Shortley removed)."""
    x, y, z = np.asarray(direction, float) / np.linalg.norm(direction)
    theta = math.acos(max(-1.0, min(1.0, z)))
    phi = math.atan2(y, x)
    row = []
    for l in range(0, l_max + 1, 2):
        for m in range(-l, l + 1):
            am = abs(m)
            ylm = sph_harm_y(l, am, theta, phi) * (-1) ** am  # undo the CS phase
            if m < 0:
                row.append(math.sqrt(2) * ylm.imag)
            elif m == 0:
                row.append(ylm.real)
            else:
                row.append(math.sqrt(2) * ylm.real)
    return np.array(row)


def point_voxel(point, voxel_size, origin=(0.0, 0.0, 0.0)):
    """Voxel containing a world point: the cube ``[c - 0.5, c + 0.5)`` in index units."""
    return tuple(int(math.floor((p - o) / v + 0.5)) for p, o, v in zip(point, origin, voxel_size))


def walk_points(vertices, step):
    """Arc-length samples every ``step`` plus the final vertex, by explicit segment walking."""
    v = [np.asarray(p, float) for p in vertices]
    if len(v) < 2:
        return list(v)
    pts = []
    seg_start = 0.0
    s = 0.0
    total = sum(float(np.linalg.norm(v[i + 1] - v[i])) for i in range(len(v) - 1))
    i = 0
    while s < total:
        seg_len = float(np.linalg.norm(v[i + 1] - v[i]))
        while i < len(v) - 2 and s >= seg_start + seg_len:
            seg_start += seg_len
            i += 1
            seg_len = float(np.linalg.norm(v[i + 1] - v[i]))
        t = (s - seg_start) / seg_len if seg_len > 0 else 0.0
        pts.append(v[i] + t * (v[i + 1] - v[i]))
        s += step
    pts.append(v[-1])
    return pts


def brute_voxel_set(streamlines, dims, voxel_size, step):
    out = set()
    for verts in streamlines:
        for p in walk_points(verts, step):
            idx = point_voxel(p, voxel_size)
            if all(0 <= idx[a] < dims[a] for a in range(3)):
                out.add(idx)
    return out


def brute_coverage(rec: set, gt: set):
    inter = len(rec & gt)
    return 200.0 * inter / (len(rec) + len(gt)), 100.0 * inter / len(gt), 100.0 * len(rec - gt) / len(gt)


def brute_classify(streamlines, rois, dims, voxel_size):
    """``rois`` is a list of voxel sets ordered ``[b0 start, b0 end, b1 start, ...]``."""
    kinds, invalid = [], set()
    valid_bundles = set()
    for verts in streamlines:
        ends = [point_voxel(verts[0], voxel_size), point_voxel(verts[-1], voxel_size)]
        if not all(all(0 <= e[a] < dims[a] for a in range(3)) for e in ends):
            kinds.append("nc")
            continue
        r0 = [k for k, roi in enumerate(rois) if ends[0] in roi]
        r1 = [k for k, roi in enumerate(rois) if ends[1] in roi]
        bundle = None
        for b in range(len(rois) // 2):
            if (2 * b in r0 and 2 * b + 1 in r1) or (2 * b + 1 in r0 and 2 * b in r1):
                bundle = b
                break
        if bundle is not None:
            kinds.append("vc")
            valid_bundles.add(bundle)
            continue
        pairs = sorted({(min(a, b), max(a, b)) for a in r0 for b in r1 if a != b})
        if pairs:
            kinds.append("ic")
            invalid.add(pairs[0])
        else:
            kinds.append("nc")
    return kinds, len(valid_bundles), len(invalid)


def toy_attention(q, k, v):
    """Masked softmax attention for a single head, written row by row."""
    T = len(q)
    d = len(q[0])
    out, weights = [], []
    for i in range(T):
        logits = [sum(q[i][a] * k[j][a] for a in range(d)) / math.sqrt(d) for j in range(i + 1)]
        mx = max(logits)
        e = [math.exp(x - mx) for x in logits]
        z = sum(e)
        w = [x / z for x in e] + [0.0] * (T - i - 1)
        weights.append(w)
        out.append([sum(w[j] * v[j][a] for j in range(T)) for a in range(len(v[0]))])
    return np.array(out), np.array(weights)


def central_difference(f, x: np.ndarray, eps: float) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` by central differences (``x`` modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(a, b, floor: float = 1e-6) -> float:
    """Largest elementwise ``|a - b| / max(|a|, |b|, floor)``."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor), initial=0.0))
