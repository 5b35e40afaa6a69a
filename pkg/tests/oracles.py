"""Independent reference implementations written with plain loops.

Nothing here imports the package under test.
"""

import math

import numpy as np


def conv2d_loops(x, w, bias=None, dilation=1):
    """Zero-padded 'same' cross-correlation. x: (H, W, Cin), w: (kh, kw, Cin, Cout)."""
    H, W, Cin = x.shape
    kh, kw, _, Cout = w.shape
    out = np.zeros((H, W, Cout))
    for i in range(H):
        for j in range(W):
            for o in range(Cout):
                acc = 0.0 if bias is None else float(bias[o])
                for a in range(kh):
                    for b in range(kw):
                        r = i + (a - kh // 2) * dilation
                        c = j + (b - kw // 2) * dilation
                        if 0 <= r < H and 0 <= c < W:
                            for k in range(Cin):
                                acc += x[r, c, k] * w[a, b, k, o]
                out[i, j, o] = acc
    return out


def sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


def mu_equations(h, W1, W2, W3, W4, b1, b2, b3, b4, dilation=1):
    g1 = sigmoid(conv2d_loops(h, W1, b1, dilation))
    g2 = sigmoid(conv2d_loops(h, W2, b2, dilation))
    g3 = sigmoid(conv2d_loops(h, W3, b3, dilation))
    u = np.tanh(conv2d_loops(h, W4, b4, dilation))
    return g1 * np.tanh(g2 * h + g3 * u)


def rmb_equations(h, P_in, b_in, mu_a, mu_b, P_out, b_out, dilation=1):
    h1 = conv2d_loops(h, P_in, b_in)
    h2 = mu_equations(h1, *mu_a, dilation=dilation)
    h3 = mu_equations(h2, *mu_b, dilation=dilation)
    return h + conv2d_loops(h3, P_out, b_out)


def convlstm_equations(x, hidden, cell, W, b):
    """Gates i, f, o, g in that order along the output channels."""
    ch = hidden.shape[-1]
    pre = conv2d_loops(np.concatenate([x, hidden], axis=-1), W, b)
    i = sigmoid(pre[..., :ch])
    f = sigmoid(pre[..., ch:2 * ch])
    o = sigmoid(pre[..., 2 * ch:3 * ch])
    g = np.tanh(pre[..., 3 * ch:])
    c2 = f * cell + i * g
    return o * np.tanh(c2), c2


def bounce_1d(p, v, limit, steps):
    """Scalar bouncing: positions for ``steps`` frames by unfolding a triangle wave.

    Motion on [0, limit] with reflection is the straight line p + v t folded
    with period 2*limit, so no step-by-step simulation is needed.
    """
    out = []
    period = 2 * limit
    for t in range(steps):
        if limit == 0:
            out.append(0)
            continue
        q = (p + v * t) % period
        out.append(q if q <= limit else period - q)
    return out


def push_1d(pusher, obj, deltas, canvas, psize, osize):
    """Scalar pushing along one axis when the other axis is aligned."""
    trace = [(pusher, obj)]
    for d in deltas:
        new_p = min(max(pusher + d, 0), canvas - psize)
        moved = new_p - pusher
        if new_p < obj + osize and obj < new_p + psize:
            obj = min(max(obj + moved, 0), canvas - osize)
        pusher = new_p
        trace.append((pusher, obj))
    return trace


def lattice_disc(size, radius):
    c = (size - 1) / 2.0
    return {(i, j) for i in range(size) for j in range(size)
            if math.hypot(i - c, j - c) <= radius}


def mask_ones(kind, kh, kw, groups_in, groups_out):
    """Count of mask ones by enumerating every kernel position and channel pair."""
    ci, cj = kh // 2, kw // 2
    n = 0
    for a in range(kh):
        for b in range(kw):
            for gi in groups_in:
                for go in groups_out:
                    if a < ci or (a == ci and b < cj):
                        n += 1
                    elif a == ci and b == cj:
                        n += (gi < go) if kind == "A" else (gi <= go)
    return n


def reach_1d(dilations, kernel=3, convs_per_block=2):
    """Every 1-D offset reachable by picking one tap from each stacked convolution."""
    import itertools
    taps = [[d * (k - kernel // 2) for k in range(kernel)]
            for d in dilations for _ in range(convs_per_block)]
    return {sum(pick) for pick in itertools.product(*taps)}
