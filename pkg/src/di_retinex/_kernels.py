"""3x3, stride 1, zero-pad 1 convolution kernels on H x W x C float64 arrays.

Two forward paths with identical semantics:

* ``_direct``: a numba loop nest that register-blocks four output channels
  and vectorizes along image rows. Wins when Cin * Cout is small
  (the small enhancer, first/last layers).
* ``_gemm``: nine BLAS products over shifted contiguous views of the
  flattened, zero-padded image (no im2col buffer). Wins for wide layers.

Inference without a tape uses :func:`conv_stack`, which streams image rows
through all three layers with planar row buffers and a fused ReLU.

Weights are laid out (Cout, Cin, 3, 3); taps are correlation-ordered.
"""

import numba
import numpy as np

# Above this Cin * Cout the BLAS path is faster on AVX2/AVX-512 hosts.
DIRECT_MAX_WORK = 512
# fastmath without the no-NaN/no-Inf assumptions, so NaN still propagates
FAST = {"contract", "reassoc", "arcp", "nsz", "afn"}


@numba.njit(cache=True, fastmath=FAST, nogil=True, boundscheck=False)
def _direct(x, w, b, out):
    H, W, cin = x.shape
    cout = w.shape[0]
    nblk = (cout + 3) // 4
    wk = np.zeros((nblk * 4, cin, 9))
    for co in range(cout):
        for ci in range(cin):
            for dy in range(3):
                for dx in range(3):
                    wk[co, ci, dy * 3 + dx] = w[co, ci, dy, dx]
    bk = np.zeros(nblk * 4)
    for co in range(cout):
        bk[co] = b[co]
    rows = np.zeros((3, cin, W + 2))
    a0 = np.empty(W)
    a1 = np.empty(W)
    a2 = np.empty(W)
    a3 = np.empty(W)
    for y in range(H):
        # planar copy of rows y-1..y+1; border columns stay zero
        for r in range(3):
            yy = y + r - 1
            if yy < 0 or yy >= H:
                for ci in range(cin):
                    for xx in range(W + 2):
                        rows[r, ci, xx] = 0.0
            else:
                for xx in range(W):
                    for ci in range(cin):
                        rows[r, ci, xx + 1] = x[yy, xx, ci]
        for blk in range(nblk):
            c0 = blk * 4
            for xx in range(W):
                a0[xx] = bk[c0]
                a1[xx] = bk[c0 + 1]
                a2[xx] = bk[c0 + 2]
                a3[xx] = bk[c0 + 3]
            for ci in range(cin):
                r0 = rows[0, ci]
                r1 = rows[1, ci]
                r2 = rows[2, ci]
                k0 = wk[c0, ci]
                k1 = wk[c0 + 1, ci]
                k2 = wk[c0 + 2, ci]
                k3 = wk[c0 + 3, ci]
                for xx in range(W):
                    p0 = r0[xx]
                    p1 = r0[xx + 1]
                    p2 = r0[xx + 2]
                    p3 = r1[xx]
                    p4 = r1[xx + 1]
                    p5 = r1[xx + 2]
                    p6 = r2[xx]
                    p7 = r2[xx + 1]
                    p8 = r2[xx + 2]
                    a0[xx] += (k0[0] * p0 + k0[1] * p1 + k0[2] * p2 + k0[3] * p3 + k0[4] * p4
                               + k0[5] * p5 + k0[6] * p6 + k0[7] * p7 + k0[8] * p8)
                    a1[xx] += (k1[0] * p0 + k1[1] * p1 + k1[2] * p2 + k1[3] * p3 + k1[4] * p4
                               + k1[5] * p5 + k1[6] * p6 + k1[7] * p7 + k1[8] * p8)
                    a2[xx] += (k2[0] * p0 + k2[1] * p1 + k2[2] * p2 + k2[3] * p3 + k2[4] * p4
                               + k2[5] * p5 + k2[6] * p6 + k2[7] * p7 + k2[8] * p8)
                    a3[xx] += (k3[0] * p0 + k3[1] * p1 + k3[2] * p2 + k3[3] * p3 + k3[4] * p4
                               + k3[5] * p5 + k3[6] * p6 + k3[7] * p7 + k3[8] * p8)
            n = min(4, cout - c0)
            for xx in range(W):
                out[y, xx, c0] = a0[xx]
                if n > 1:
                    out[y, xx, c0 + 1] = a1[xx]
                if n > 2:
                    out[y, xx, c0 + 2] = a2[xx]
                if n > 3:
                    out[y, xx, c0 + 3] = a3[xx]
    return out


def _flat_padded(x: np.ndarray) -> tuple[np.ndarray, int, int]:
    """Zero-padded image flattened to ((H+2)(W+2) + 2, C).

    Output pixel p = y (W+2) + x reads tap (dy, dx) at p + dy (W+2) + dx, so each
    tap is one contiguous slice; columns W, W+1 of every output row are junk.
    """
    H, W, cin = x.shape
    wp = W + 2
    flat = np.zeros(((H + 2) * wp + 2, cin))
    flat[:(H + 2) * wp].reshape(H + 2, wp, cin)[1:-1, 1:-1] = x
    return flat, wp, H * wp


def _taps(w: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(w.transpose(2, 3, 1, 0))  # 3, 3, Cin, Cout


def _gemm(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    H, W, _ = x.shape
    cout = w.shape[0]
    flat, wp, n = _flat_padded(x)
    taps = _taps(w)
    acc = flat[:n] @ taps[0, 0]
    for dy in range(3):
        for dx in range(3):
            if dy or dx:
                off = dy * wp + dx
                acc += flat[off:off + n] @ taps[dy, dx]
    out = acc.reshape(H, wp, cout)[:, :W]
    return out + b


def _grad_ext(g: np.ndarray) -> np.ndarray:
    H, W, cout = g.shape
    ext = np.zeros((H, W + 2, cout))
    ext[:, :W] = g
    return ext.reshape(-1, cout)


def conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    cin, cout = x.shape[2], w.shape[0]
    if cin * cout <= DIRECT_MAX_WORK:
        out = np.empty(x.shape[:2] + (cout,))
        return _direct(np.ascontiguousarray(x), np.ascontiguousarray(w), np.ascontiguousarray(b), out)
    return _gemm(x, w, b)


def conv3x3_weight_grad(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """d(loss)/d(weights) for upstream gradient ``g`` of shape H x W x Cout."""
    H, W, cin = x.shape
    cout = g.shape[2]
    if cin < 16:
        # narrow input: one im2col product is cheaper than nine thin ones
        xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(0, 1)).transpose(0, 1, 3, 4, 2)
        gw = win.reshape(-1, 9 * cin).T @ g.reshape(-1, cout)
        return gw.reshape(3, 3, cin, cout).transpose(3, 2, 0, 1).copy()
    flat, wp, n = _flat_padded(x)
    ge = _grad_ext(g)
    gw = np.empty((3, 3, cin, cout))
    for dy in range(3):
        for dx in range(3):
            off = dy * wp + dx
            gw[dy, dx] = flat[off:off + n].T @ ge
    return gw.transpose(3, 2, 0, 1).copy()


def conv3x3_input_grad(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    """d(loss)/d(input): a correlation with channel-swapped, flipped taps."""
    cout, cin = w.shape[:2]
    if cin * cout <= DIRECT_MAX_WORK:
        wt = np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
        return conv3x3(g, wt, np.zeros(cin))
    H, W, _ = g.shape
    wp = W + 2
    n = H * wp
    ge = _grad_ext(g)
    taps = _taps(w)
    gflat = np.zeros(((H + 2) * wp + 2, cin))
    for dy in range(3):
        for dx in range(3):
            off = dy * wp + dx
            gflat[off:off + n] += ge @ taps[dy, dx].T
    return np.ascontiguousarray(gflat[:(H + 2) * wp].reshape(H + 2, wp, cin)[1:-1, 1:-1])


@numba.njit(cache=True, fastmath=FAST, nogil=True, boundscheck=False, inline="always")
def _conv_row(up, mid, down, w, b, acc):
    # one output row from three planar input rows (Cin x W+2, zero border);
    # output channels go in pairs so each input load feeds two accumulators
    cout, cin = w.shape[0], w.shape[1]
    W = acc.shape[1]
    for co in range(cout):
        a = acc[co]
        bv = b[co]
        for xx in range(W):
            a[xx] = bv
    for c0 in range(0, cout - 1, 2):
        a = acc[c0]
        e = acc[c0 + 1]
        for ci in range(cin):
            r0 = up[ci]
            r1 = mid[ci]
            r2 = down[ci]
            k = w[c0, ci]
            q = w[c0 + 1, ci]
            k00, k01, k02, k10, k11, k12, k20, k21, k22 = (k[0, 0], k[0, 1], k[0, 2], k[1, 0], k[1, 1],
                                                           k[1, 2], k[2, 0], k[2, 1], k[2, 2])
            q00, q01, q02, q10, q11, q12, q20, q21, q22 = (q[0, 0], q[0, 1], q[0, 2], q[1, 0], q[1, 1],
                                                           q[1, 2], q[2, 0], q[2, 1], q[2, 2])
            for xx in range(W):
                p0, p1, p2 = r0[xx], r0[xx + 1], r0[xx + 2]
                p3, p4, p5 = r1[xx], r1[xx + 1], r1[xx + 2]
                p6, p7, p8 = r2[xx], r2[xx + 1], r2[xx + 2]
                a[xx] += (k00 * p0 + k01 * p1 + k02 * p2 + k10 * p3 + k11 * p4
                          + k12 * p5 + k20 * p6 + k21 * p7 + k22 * p8)
                e[xx] += (q00 * p0 + q01 * p1 + q02 * p2 + q10 * p3 + q11 * p4
                          + q12 * p5 + q20 * p6 + q21 * p7 + q22 * p8)
    if cout % 2:
        co = cout - 1
        a = acc[co]
        for ci in range(cin):
            r0 = up[ci]
            r1 = mid[ci]
            r2 = down[ci]
            k = w[co, ci]
            k00, k01, k02, k10, k11, k12, k20, k21, k22 = (k[0, 0], k[0, 1], k[0, 2], k[1, 0], k[1, 1],
                                                           k[1, 2], k[2, 0], k[2, 1], k[2, 2])
            for xx in range(W):
                a[xx] += (k00 * r0[xx] + k01 * r0[xx + 1] + k02 * r0[xx + 2]
                          + k10 * r1[xx] + k11 * r1[xx + 1] + k12 * r1[xx + 2]
                          + k20 * r2[xx] + k21 * r2[xx + 1] + k22 * r2[xx + 2])


@numba.njit(cache=True, fastmath=FAST, nogil=True, boundscheck=False, inline="always")
def _relu_into(acc, ring, slot):
    cout, W = acc.shape
    for co in range(cout):
        dst = ring[slot, co]
        src = acc[co]
        for xx in range(W):
            v = src[xx]
            dst[xx + 1] = 0.0 if v < 0.0 else v  # NaN fails the test and is kept


@numba.njit(cache=True, fastmath=FAST, nogil=True, boundscheck=False)
def _stream3(x, w1, b1, w2, b2, w3, b3, out):
    # rows flow through all three layers via 3-row rings; ring row j sits in
    # slot j % 3, and rows outside the image read the zero row instead
    H, W, c0 = x.shape
    c1, c2, c3 = w1.shape[0], w2.shape[0], w3.shape[0]
    wide = max(c0, c1, c2)
    zero = np.zeros((wide, W + 2))
    ring0 = np.zeros((3, c0, W + 2))
    ring1 = np.zeros((3, c1, W + 2))
    ring2 = np.zeros((3, c2, W + 2))
    acc1 = np.empty((c1, W))
    acc2 = np.empty((c2, W))
    acc3 = np.empty((c3, W))
    for s in range(H + 3):
        if s < H:
            for xx in range(W):
                for ci in range(c0):
                    ring0[s % 3, ci, xx + 1] = x[s, xx, ci]
        t = s - 1
        if 0 <= t < H:
            up = ring0[(t - 1) % 3] if t > 0 else zero[:c0]
            dn = ring0[(t + 1) % 3] if t + 1 < H else zero[:c0]
            _conv_row(up, ring0[t % 3], dn, w1, b1, acc1)
            _relu_into(acc1, ring1, t % 3)
        t = s - 2
        if 0 <= t < H:
            up = ring1[(t - 1) % 3] if t > 0 else zero[:c1]
            dn = ring1[(t + 1) % 3] if t + 1 < H else zero[:c1]
            _conv_row(up, ring1[t % 3], dn, w2, b2, acc2)
            _relu_into(acc2, ring2, t % 3)
        t = s - 3
        if 0 <= t < H:
            up = ring2[(t - 1) % 3] if t > 0 else zero[:c2]
            dn = ring2[(t + 1) % 3] if t + 1 < H else zero[:c2]
            _conv_row(up, ring2[t % 3], dn, w3, b3, acc3)
            for co in range(c3):
                for xx in range(W):
                    out[co, t, xx] = acc3[co, xx]
    return out


def conv_stack(x: np.ndarray, weights, biases) -> np.ndarray:
    """Three 3x3 convolutions with ReLU between them, none after the last.

    Streams rows through all layers, so memory traffic is just the input and
    the pre-activation. That is stored planar and returned as an H x W x Cout
    view, so each output channel slice stays contiguous.
    """
    if len(weights) != 3:
        raise ValueError(f"conv_stack expects 3 layers, got {len(weights)}")
    c = [np.ascontiguousarray(a, dtype=np.float64) for pair in zip(weights, biases) for a in pair]
    out = np.empty((weights[-1].shape[0],) + x.shape[:2])
    _stream3(np.ascontiguousarray(x, dtype=np.float64), *c, out)
    return out.transpose(1, 2, 0)


@numba.njit(cache=True, nogil=True, boundscheck=False)
def _adjust(img, a, b, k, clamp, out):
    # f = I + (a - 1)(I - (k/2)(1 - b)) + k b; a and b carry 1 or C channels
    H, W, C = img.shape
    one = a.shape[2] == 1
    for y in range(H):
        for x in range(W):
            for ch in range(C):
                j = 0 if one else ch
                av = a[y, x, j]
                bv = b[y, x, j]
                i = img[y, x, ch]
                v = i + (av - 1.0) * (i - (k / 2.0) * (1.0 - bv)) + k * bv
                if clamp:
                    v = min(max(v, 0.0), k)
                out[y, x, ch] = v
    return out


def adjust_fused(img: np.ndarray, a: np.ndarray, b: np.ndarray, k: float, clamp: bool) -> np.ndarray:
    """The enhancement formula in one pass, optionally clamped to [0, k]."""
    out = np.empty(img.shape)
    return _adjust(np.ascontiguousarray(img, dtype=np.float64), np.ascontiguousarray(a),
                   np.ascontiguousarray(b), k, clamp, out)
