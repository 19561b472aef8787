# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled geometry kernels; see ``_kernels_py`` for the reference twin."""

from libc.math cimport ceil, floor
from libc.stdlib cimport free, malloc


cdef double _signed_area(double* xs, double* ys, Py_ssize_t n) nogil:
    cdef double acc = 0.0
    cdef Py_ssize_t i, k = n - 1
    for i in range(n):
        acc += xs[k] * ys[i] - xs[i] * ys[k]
        k = i
    return acc * 0.5


cdef double* _to_buffer(seq) except NULL:
    cdef Py_ssize_t n = len(seq), i
    cdef double* buf = <double*> malloc((n if n > 0 else 1) * sizeof(double))
    if buf == NULL:
        raise MemoryError()
    for i in range(n):
        buf[i] = seq[i]
    return buf


def signed_area(xs, ys):
    cdef Py_ssize_t n = len(xs)
    cdef double* bx = _to_buffer(xs)
    cdef double* by = _to_buffer(ys)
    cdef double r = _signed_area(bx, by, n)
    free(bx)
    free(by)
    return r


cdef Py_ssize_t _clip(double* sx, double* sy, Py_ssize_t ns,
                      double* cx, double* cy, Py_ssize_t nc,
                      double** rx, double** ry) except -1:
    # Result buffers are malloc'd into rx/ry; caller frees them.
    cdef double orient = 1.0 if _signed_area(cx, cy, nc) >= 0.0 else -1.0
    cdef Py_ssize_t cap = 2 * ns + 8
    cdef double* ox = <double*> malloc(cap * sizeof(double))
    cdef double* oy = <double*> malloc(cap * sizeof(double))
    cdef double* ix
    cdef double* iy
    cdef Py_ssize_t n_out = ns, n_in, i, c, k
    cdef double ax, ay, ex, ey, px, py, qx, qy, p_side, q_side, t
    if ox == NULL or oy == NULL:
        free(ox)
        free(oy)
        raise MemoryError()
    for i in range(ns):
        ox[i] = sx[i]
        oy[i] = sy[i]
    k = nc - 1
    for c in range(nc):
        if n_out == 0:
            break
        ax = cx[k]
        ay = cy[k]
        ex = cx[c] - ax
        ey = cy[c] - ay
        n_in = n_out
        ix = ox
        iy = oy
        cap = 2 * n_in + 8
        ox = <double*> malloc(cap * sizeof(double))
        oy = <double*> malloc(cap * sizeof(double))
        if ox == NULL or oy == NULL:
            free(ox)
            free(oy)
            free(ix)
            free(iy)
            raise MemoryError()
        n_out = 0
        px = ix[n_in - 1]
        py = iy[n_in - 1]
        p_side = orient * (ex * (py - ay) - ey * (px - ax))
        for i in range(n_in):
            qx = ix[i]
            qy = iy[i]
            q_side = orient * (ex * (qy - ay) - ey * (qx - ax))
            if q_side >= 0.0:
                if p_side < 0.0:
                    t = p_side / (p_side - q_side)
                    ox[n_out] = px + t * (qx - px)
                    oy[n_out] = py + t * (qy - py)
                    n_out += 1
                ox[n_out] = qx
                oy[n_out] = qy
                n_out += 1
            elif p_side >= 0.0:
                t = p_side / (p_side - q_side)
                ox[n_out] = px + t * (qx - px)
                oy[n_out] = py + t * (qy - py)
                n_out += 1
            px = qx
            py = qy
            p_side = q_side
        free(ix)
        free(iy)
        k = c
    rx[0] = ox
    ry[0] = oy
    return n_out


def clip_convex(sx, sy, cx, cy):
    cdef Py_ssize_t ns = len(sx), nc = len(cx), n, i
    cdef double* bsx = _to_buffer(sx)
    cdef double* bsy = _to_buffer(sy)
    cdef double* bcx = _to_buffer(cx)
    cdef double* bcy = _to_buffer(cy)
    cdef double* rx = NULL
    cdef double* ry = NULL
    try:
        n = _clip(bsx, bsy, ns, bcx, bcy, nc, &rx, &ry)
        return [rx[i] for i in range(n)], [ry[i] for i in range(n)]
    finally:
        free(bsx)
        free(bsy)
        free(bcx)
        free(bcy)
        free(rx)
        free(ry)


def intersection_area(ax, ay, bx, by):
    cdef Py_ssize_t na = len(ax), nb = len(bx), n
    cdef double* bax = _to_buffer(ax)
    cdef double* bay = _to_buffer(ay)
    cdef double* bbx = _to_buffer(bx)
    cdef double* bby = _to_buffer(by)
    cdef double* rx = NULL
    cdef double* ry = NULL
    cdef double area = 0.0
    try:
        n = _clip(bax, bay, na, bbx, bby, nb, &rx, &ry)
        if n >= 3:
            area = abs(_signed_area(rx, ry, n))
        return area
    finally:
        free(bax)
        free(bay)
        free(bbx)
        free(bby)
        free(rx)
        free(ry)


cdef inline Py_ssize_t _span(double a, Py_ssize_t width) nogil:
    cdef Py_ssize_t i
    if a <= -1.0:
        return 0
    if a >= width + 1.0:
        return width
    i = <Py_ssize_t> ceil(a - 0.5)
    while i + 0.5 < a:
        i += 1
    while i - 0.5 >= a:
        i -= 1
    if i < 0:
        return 0
    if i > width:
        return width
    return i


def rasterize(xs, ys, Py_ssize_t width, Py_ssize_t height):
    cdef Py_ssize_t n = len(xs)
    out = bytearray(width * height if width > 0 and height > 0 else 0)
    if n < 3 or width <= 0 or height <= 0:
        return out
    cdef unsigned char* buf = out
    cdef double* bx = _to_buffer(xs)
    cdef double* by = _to_buffer(ys)
    cdef double* nodes = <double*> malloc(n * sizeof(double))
    cdef double y_lo = by[0], y_hi = by[0], py, x0, y0, y1, key
    cdef Py_ssize_t i, j, k, m, cnt, start, stop, j0, j1, col
    if nodes == NULL:
        free(bx)
        free(by)
        raise MemoryError()
    with nogil:
        for i in range(1, n):
            if by[i] < y_lo:
                y_lo = by[i]
            if by[i] > y_hi:
                y_hi = by[i]
        if y_hi > 0.0 and y_lo < height:
            j0 = 0
            if y_lo > 1.0:
                j0 = <Py_ssize_t> floor(y_lo) - 1
            j1 = height - 1
            if y_hi < height:
                j1 = <Py_ssize_t> ceil(y_hi) + 1
                if j1 > height - 1:
                    j1 = height - 1
            for j in range(j0, j1 + 1):
                py = j + 0.5
                cnt = 0
                k = n - 1
                for i in range(n):
                    y0 = by[k]
                    y1 = by[i]
                    if (y0 > py) != (y1 > py):
                        x0 = bx[k]
                        nodes[cnt] = x0 + (py - y0) * (bx[i] - x0) / (y1 - y0)
                        cnt += 1
                    k = i
                # insertion sort; crossing counts per row are small
                for i in range(1, cnt):
                    key = nodes[i]
                    m = i - 1
                    while m >= 0 and nodes[m] > key:
                        nodes[m + 1] = nodes[m]
                        m -= 1
                    nodes[m + 1] = key
                m = 0
                while m + 1 < cnt:
                    start = _span(nodes[m], width)
                    stop = _span(nodes[m + 1], width)
                    for col in range(start, stop):
                        buf[j * width + col] = 1
                    m += 2
    free(bx)
    free(by)
    free(nodes)
    return out
