"""Independent oracles shared by the unit and acceptance suites."""
import math
from collections import deque
from itertools import product

import numpy as np


def numeric_grad(f, x, h=1e-6):
    """Central finite differences of scalar ``f`` at float64 array ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = f(x)
        x[idx] = orig - h
        fm = f(x)
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def rel_error(analytic, numeric):
    """Max absolute deviation scaled by the largest numeric gradient entry."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def check_op(forward, backward, arrays, wrt, dtype, seed=0):
    """Compare ``backward`` (run at ``dtype``) with float64 finite differences.

    ``forward(*arrays) -> (out, cache)``; ``backward(grad, cache)`` returns a
    tuple; ``wrt`` maps tuple position to the index in ``arrays``.
    """
    rng = np.random.default_rng(seed)
    out, cache = forward(*[a.astype(dtype) for a in arrays])
    proj = rng.normal(size=out.shape)
    grads = backward(proj.astype(dtype), cache)
    worst = 0.0
    for pos, k in wrt.items():
        def f(v, k=k):
            args = [a.copy() for a in arrays]
            args[k] = v
            return float((forward(*args)[0] * proj).sum())
        worst = max(worst, rel_error(grads[pos], numeric_grad(f, arrays[k])))
    return worst


def bfs_components(binary, connectivity):
    """Brute-force flood fill; returns the partition as a set of frozensets of voxel tuples."""
    binary = np.asarray(binary, dtype=bool)
    if connectivity == 6:
        offsets = [o for o in product((-1, 0, 1), repeat=3) if sum(map(abs, o)) == 1]
    else:
        offsets = [o for o in product((-1, 0, 1), repeat=3) if any(o)]
    seen = np.zeros_like(binary)
    parts = set()
    for start in zip(*np.nonzero(binary)):
        if seen[start]:
            continue
        seen[start] = True
        queue, comp = deque([start]), []
        while queue:
            v = queue.popleft()
            comp.append(v)
            for o in offsets:
                w = (v[0] + o[0], v[1] + o[1], v[2] + o[2])
                if all(0 <= w[i] < binary.shape[i] for i in range(3)) and binary[w] and not seen[w]:
                    seen[w] = True
                    queue.append(w)
        parts.add(frozenset(comp))
    return parts


def partition_of(labels):
    """Convert a component-id array into the same frozenset partition form."""
    groups = {}
    for v in zip(*np.nonzero(labels)):
        groups.setdefault(int(labels[v]), []).append(tuple(int(i) for i in v))
    return {frozenset(g) for g in groups.values()}


def naive_first_order(values, voxel_volume=1.0, bin_width=25.0):
    """Loop-based recomputation of the 19 first-order features (dict by name)."""
    x = sorted(float(v) for v in values)
    n = len(x)

    def pct(q):
        pos = (n - 1) * q / 100.0
        lo = int(pos)
        hi = min(lo + 1, n - 1)
        return x[lo] + (x[hi] - x[lo]) * (pos - lo)

    mean = sum(x) / n
    m2 = sum((v - mean) ** 2 for v in x) / n
    m3 = sum((v - mean) ** 3 for v in x) / n
    m4 = sum((v - mean) ** 4 for v in x) / n
    counts = {}
    for v in x:
        b = math.floor((v - x[0]) / bin_width)
        counts[b] = counts.get(b, 0) + 1
    probs = [c / n for c in counts.values()]
    p10, p90 = pct(10), pct(90)
    robust = [v for v in x if p10 <= v <= p90]
    rmean = sum(robust) / len(robust) if robust else 0.0
    return {
        "volume_mm3": n * voxel_volume,
        "total_energy": voxel_volume * sum(v * v for v in x),
        "entropy": -sum(p * math.log2(p) for p in probs),
        "minimum": x[0],
        "p10": p10,
        "p90": p90,
        "maximum": x[-1],
        "mean": mean,
        "median": pct(50),
        "iqr": pct(75) - pct(25),
        "range": x[-1] - x[0],
        "mad": sum(abs(v - mean) for v in x) / n,
        "robust_mad": sum(abs(v - rmean) for v in robust) / len(robust) if robust else 0.0,
        "rms": (sum(v * v for v in x) / n) ** 0.5,
        "std": m2 ** 0.5,
        "skewness": m3 / m2 ** 1.5 if m2 > 0 else 0.0,
        "kurtosis": m4 / m2 ** 2 if m2 > 0 else 0.0,
        "variance": m2,
        "uniformity": sum(p * p for p in probs),
    }


def naive_surface_area(mask, spacing=(1.0, 1.0, 1.0)):
    """Sum the area of every voxel face whose neighbour is background or outside."""
    sx, sy, sz = spacing
    face = (sy * sz, sx * sz, sx * sy)
    area = 0.0
    for v in zip(*np.nonzero(mask)):
        for axis in range(3):
            for step in (-1, 1):
                w = list(v)
                w[axis] += step
                if not 0 <= w[axis] < mask.shape[axis] or not mask[tuple(w)]:
                    area += face[axis]
    return area


def naive_max_diameter(mask, spacing=(1.0, 1.0, 1.0)):
    pts = np.argwhere(mask) * np.asarray(spacing, dtype=float)
    best = 0.0
    for i in range(len(pts)):
        d = np.sqrt(((pts[i] - pts) ** 2).sum(axis=1)).max()
        best = max(best, float(d))
    return best
