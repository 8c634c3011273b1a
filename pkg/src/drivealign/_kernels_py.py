"""Pure-numpy implementations of the hot numeric kernels.

This is the reference backend; ``drivealign._speedups`` provides a compiled
drop-in replacement built from the same contracts. Keep the two in sync —
``tests/test_kernels.py`` cross-checks them.

Kernel surface:
  * dense MLP forward/backward over a flat parameter vector
  * nearest-point projection onto a polyline
  * oriented-rectangle (SAT) collision grid over a state tensor
"""

import numpy as np

BACKEND_NAME = "numpy"

# activation codes shared with the compiled backend
ACT_LINEAR = 0
ACT_TANH = 1
ACT_RELU = 2


def mlp_forward(params, widths, act_codes, x, keep_cache=False):
    """Run a dense network over a batch.

    params: flat float64 vector laid out per layer as W (in*out, row-major)
    followed by b (out). Returns (y, cache) where cache is the list of
    post-activation layer outputs (inputs first) or None.
    """
    h = np.ascontiguousarray(x, dtype=np.float64)
    cache = [h] if keep_cache else None
    off = 0
    for li in range(len(widths) - 1):
        nin, nout = widths[li], widths[li + 1]
        w = params[off:off + nin * nout].reshape(nin, nout)
        off += nin * nout
        b = params[off:off + nout]
        off += nout
        h = h @ w + b
        code = act_codes[li]
        if code == ACT_TANH:
            h = np.tanh(h)
        elif code == ACT_RELU:
            h = np.maximum(h, 0.0)
        if keep_cache:
            cache.append(h)
    return h, cache


def mlp_backward(params, widths, act_codes, cache, dy):
    """Reverse-mode gradient for :func:`mlp_forward`.

    cache must come from a forward pass with keep_cache=True over the same
    params. Returns (dparams, dx) for upstream gradient dy on the output.
    """
    n_layers = len(widths) - 1
    dparams = np.zeros_like(params)
    offsets = []
    off = 0
    for li in range(n_layers):
        offsets.append(off)
        off += widths[li] * widths[li + 1] + widths[li + 1]
    dh = np.ascontiguousarray(dy, dtype=np.float64)
    for li in range(n_layers - 1, -1, -1):
        nin, nout = widths[li], widths[li + 1]
        h_out = cache[li + 1]
        code = act_codes[li]
        if code == ACT_TANH:
            dpre = dh * (1.0 - h_out * h_out)
        elif code == ACT_RELU:
            dpre = dh * (h_out > 0.0)
        else:
            dpre = dh
        h_in = cache[li]
        o = offsets[li]
        w = params[o:o + nin * nout].reshape(nin, nout)
        dparams[o:o + nin * nout] = (h_in.T @ dpre).ravel()
        dparams[o + nin * nout:o + nin * nout + nout] = dpre.sum(axis=0)
        dh = dpre @ w.T
    return dparams, dh


def polyline_project(xs, ys, px, py):
    """Project point (px, py) onto the polyline given by xs, ys.

    Returns (distance, arclength at the foot point, tangent heading of the
    containing segment). All segments are scanned (vectorized).
    """
    xs = np.asarray(xs)
    ys = np.asarray(ys)
    ax, ay = xs[:-1], ys[:-1]
    ex, ey = np.diff(xs), np.diff(ys)
    seg_len2 = ex * ex + ey * ey
    safe = np.where(seg_len2 > 0.0, seg_len2, 1.0)
    t = np.clip(((px - ax) * ex + (py - ay) * ey) / safe, 0.0, 1.0)
    t = np.where(seg_len2 > 0.0, t, 0.0)
    cx, cy = ax + t * ex, ay + t * ey
    d2 = (px - cx) ** 2 + (py - cy) ** 2
    d2 = np.where(seg_len2 > 0.0, d2, np.inf)
    seg_len = np.sqrt(seg_len2)
    i = int(np.argmin(d2))
    cumlen = np.concatenate([[0.0], np.cumsum(seg_len)])
    return (float(np.sqrt(d2[i])), float(cumlen[i] + t[i] * seg_len[i]),
            float(np.arctan2(ey[i], ex[i])))


def _rect_axes_corners(cx, cy, theta, length, width):
    c, s = np.cos(theta), np.sin(theta)
    ux, uy = c, s            # long axis
    vx, vy = -s, c           # lateral axis
    hl, hw = 0.5 * length, 0.5 * width
    corners = np.array([
        [cx + ux * hl + vx * hw, cy + uy * hl + vy * hw],
        [cx + ux * hl - vx * hw, cy + uy * hl - vy * hw],
        [cx - ux * hl + vx * hw, cy - uy * hl + vy * hw],
        [cx - ux * hl - vx * hw, cy - uy * hl - vy * hw],
    ])
    return np.array([[ux, uy], [vx, vy]]), corners


def obb_overlap(cx1, cy1, th1, l1, w1, cx2, cy2, th2, l2, w2):
    """Separating-axis test for two oriented rectangles (closed overlap)."""
    r1 = 0.5 * np.hypot(l1, w1)
    r2 = 0.5 * np.hypot(l2, w2)
    if (cx2 - cx1) ** 2 + (cy2 - cy1) ** 2 > (r1 + r2) ** 2:
        return False
    axes1, corners1 = _rect_axes_corners(cx1, cy1, th1, l1, w1)
    axes2, corners2 = _rect_axes_corners(cx2, cy2, th2, l2, w2)
    for ax, ay in np.vstack([axes1, axes2]):
        p1 = corners1[:, 0] * ax + corners1[:, 1] * ay
        p2 = corners2[:, 0] * ax + corners2[:, 1] * ay
        if p1.max() < p2.min() or p2.max() < p1.min():
            return False
    return True


def _corners_t(x, y, th, length, width):
    """(T, 4, 2) rectangle corners over a pose sequence."""
    c, s = np.cos(th), np.sin(th)
    hl, hw = 0.5 * length, 0.5 * width
    ux = np.stack([c, s], axis=1)
    vx = np.stack([-s, c], axis=1)
    center = np.stack([x, y], axis=1)
    return np.stack([
        center + ux * hl + vx * hw,
        center + ux * hl - vx * hw,
        center - ux * hl + vx * hw,
        center - ux * hl - vx * hw,
    ], axis=1)


def collision_grid(states, lengths, widths):
    """Pairwise SAT collisions over a state tensor.

    states: (M, T, 4) rows (x, y, v, theta). Returns (M, T) uint8 flags where
    agent i is flagged at step t iff its rectangle overlaps any other agent's.
    """
    m, t, _ = states.shape
    flags = np.zeros((m, t), dtype=np.uint8)
    radii = 0.5 * np.hypot(lengths, widths)
    for i in range(m):
        ci = _corners_t(states[i, :, 0], states[i, :, 1], states[i, :, 3],
                        lengths[i], widths[i])
        thi = states[i, :, 3]
        axes_i = np.stack([np.stack([np.cos(thi), np.sin(thi)], axis=1),
                           np.stack([-np.sin(thi), np.cos(thi)], axis=1)],
                          axis=1)   # (T, 2, 2)
        for j in range(i + 1, m):
            near = ((states[i, :, 0] - states[j, :, 0]) ** 2
                    + (states[i, :, 1] - states[j, :, 1]) ** 2
                    <= (radii[i] + radii[j]) ** 2)
            if not near.any():
                continue
            cj = _corners_t(states[j, :, 0], states[j, :, 1],
                            states[j, :, 3], lengths[j], widths[j])
            thj = states[j, :, 3]
            axes_j = np.stack([np.stack([np.cos(thj), np.sin(thj)], axis=1),
                               np.stack([-np.sin(thj), np.cos(thj)], axis=1)],
                              axis=1)
            axes = np.concatenate([axes_i, axes_j], axis=1)  # (T, 4, 2)
            pi = np.einsum("tka,tca->tkc", axes, ci)   # (T, 4 axes, 4 corners)
            pj = np.einsum("tka,tca->tkc", axes, cj)
            sep = ((pi.max(axis=2) < pj.min(axis=2))
                   | (pj.max(axis=2) < pi.min(axis=2))).any(axis=1)
            hit = near & ~sep
            flags[i] |= hit
            flags[j] |= hit
    return flags


def unicycle_steps(states, actions, dt):
    """Advance (M, 4) agent states one step under (M, 2) controls.

    Position uses pre-step speed and heading; speed clamps at zero; heading
    wraps to (-pi, pi].
    """
    x, y, v, th = states[:, 0], states[:, 1], states[:, 2], states[:, 3]
    out = np.empty_like(states)
    out[:, 0] = x + v * np.cos(th) * dt
    out[:, 1] = y + v * np.sin(th) * dt
    out[:, 2] = np.maximum(0.0, v + actions[:, 0] * dt)
    nth = th + actions[:, 1] * dt
    nth = np.mod(nth + np.pi, 2.0 * np.pi) - np.pi
    out[:, 3] = np.where(nth == -np.pi, np.pi, nth)
    return out
