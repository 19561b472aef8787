"""Pure-Python geometry kernels.

Reference twin of the compiled ``_kernels`` extension. Both modules expose
the same functions and must agree bit-for-bit; the test suite runs every
kernel test against each available backend.
"""

import math


def signed_area(xs, ys):
    n = len(xs)
    acc = 0.0
    k = n - 1
    for i in range(n):
        acc += xs[k] * ys[i] - xs[i] * ys[k]
        k = i
    return acc * 0.5


def clip_convex(sx, sy, cx, cy):
    """Sutherland-Hodgman clip of a subject ring against a convex clipper ring.

    Either winding is accepted for the clipper. Points on a clipper edge are
    kept. Returns ``(xs, ys)`` lists, empty when nothing survives.
    """
    n_clip = len(cx)
    orient = 1.0 if signed_area(cx, cy) >= 0.0 else -1.0
    out_x = list(sx)
    out_y = list(sy)
    k = n_clip - 1
    for c in range(n_clip):
        if not out_x:
            break
        ax, ay = cx[k], cy[k]
        bx, by = cx[c], cy[c]
        ex, ey = bx - ax, by - ay
        in_x, in_y = out_x, out_y
        out_x, out_y = [], []
        n_in = len(in_x)
        px, py = in_x[n_in - 1], in_y[n_in - 1]
        p_side = orient * (ex * (py - ay) - ey * (px - ax))
        for i in range(n_in):
            qx, qy = in_x[i], in_y[i]
            q_side = orient * (ex * (qy - ay) - ey * (qx - ax))
            if q_side >= 0.0:
                if p_side < 0.0:
                    t = p_side / (p_side - q_side)
                    out_x.append(px + t * (qx - px))
                    out_y.append(py + t * (qy - py))
                out_x.append(qx)
                out_y.append(qy)
            elif p_side >= 0.0:
                t = p_side / (p_side - q_side)
                out_x.append(px + t * (qx - px))
                out_y.append(py + t * (qy - py))
            px, py, p_side = qx, qy, q_side
        k = c
    return out_x, out_y


def intersection_area(ax, ay, bx, by):
    xs, ys = clip_convex(ax, ay, bx, by)
    if len(xs) < 3:
        return 0.0
    return abs(signed_area(xs, ys))


def _span(a, width):
    # first column whose center i + 0.5 is >= a, clamped to [0, width]
    if a <= -1.0:
        return 0
    if a >= width + 1.0:
        return width
    i = math.ceil(a - 0.5)
    while i + 0.5 < a:
        i += 1
    while i - 0.5 >= a:
        i -= 1
    return min(max(i, 0), width)


def rasterize(xs, ys, width, height):
    """Even-odd scanline fill sampled at pixel centers.

    Returns a ``bytearray`` of ``width * height`` bytes in row-major order,
    1 where the pixel center is inside. The crossing arithmetic matches the
    point-in-polygon test in ``rsvlts.geom`` exactly.
    """
    out = bytearray(width * height)
    n = len(xs)
    if n < 3 or width <= 0 or height <= 0:
        return out
    y_lo = min(ys)
    y_hi = max(ys)
    if y_hi <= 0.0 or y_lo >= height:
        return out
    j0 = max(0, int(math.floor(y_lo)) - 1)
    j1 = min(height - 1, int(math.ceil(y_hi)) + 1)
    for j in range(j0, j1 + 1):
        py = j + 0.5
        nodes = []
        k = n - 1
        for i in range(n):
            y0 = ys[k]
            y1 = ys[i]
            if (y0 > py) != (y1 > py):
                x0 = xs[k]
                nodes.append(x0 + (py - y0) * (xs[i] - x0) / (y1 - y0))
            k = i
        if not nodes:
            continue
        nodes.sort()
        row = j * width
        for m in range(0, len(nodes) - 1, 2):
            start = _span(nodes[m], width)
            stop = _span(nodes[m + 1], width)
            if stop > start:
                out[row + start:row + stop] = b"\x01" * (stop - start)
    return out
