"""Complex tensors stored as paired real arrays, plus the raw array operations.

A complex array z = u + jv is kept as two same-shaped float64 arrays (re, im).
Everything downstream (linear maps, convolutions, the DFT front end) is wired
through real arithmetic on these pairs, so no numpy complex dtype appears in
any compute path.  Broadcasting is deliberately restricted: two shapes are
compatible only when they are equal, one of them is a scalar, or one is a
trailing suffix of the other.  Anything fancier raises ShapeError.
"""

import numpy as np


class ShapeError(ValueError):
    """Operand shapes outside the supported broadcasting rules."""

    def __init__(self, op, shape_a, shape_b):
        super().__init__(f"{op}: incompatible shapes {tuple(shape_a)} and {tuple(shape_b)}")
        self.shapes = (tuple(shape_a), tuple(shape_b))


def _as_f64(x):
    return np.asarray(x, dtype=np.float64)


class CTensor:
    """A complex tensor as two same-shaped real float64 arrays.

    Parameters
    ----------
    re, im : array_like
        Real and imaginary parts.  `im` defaults to zeros.
    """

    __slots__ = ("re", "im")

    def __init__(self, re, im=None):
        re = _as_f64(re)
        im = np.zeros_like(re) if im is None else _as_f64(im)
        if re.shape != im.shape:
            raise ShapeError("CTensor", re.shape, im.shape)
        self.re = re
        self.im = im

    @property
    def shape(self):
        return self.re.shape

    @property
    def ndim(self):
        return self.re.ndim

    @property
    def size(self):
        return self.re.size

    @classmethod
    def zeros(cls, shape):
        return cls(np.zeros(shape), np.zeros(shape))

    @classmethod
    def from_complex(cls, z):
        z = np.asarray(z, dtype=np.complex128)
        return cls(z.real.copy(), z.imag.copy())

    def to_complex(self):
        return self.re + 1j * self.im

    def copy(self):
        return CTensor(self.re.copy(), self.im.copy())

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return CTensor(self.re.reshape(shape), self.im.reshape(shape))

    def __repr__(self):
        return f"CTensor(shape={self.shape})"


class RTensor:
    """A real float64 tensor.  Thin wrapper so real and complex values share
    one calling convention across the library."""

    __slots__ = ("data",)

    def __init__(self, data):
        self.data = _as_f64(data)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @classmethod
    def zeros(cls, shape):
        return cls(np.zeros(shape))

    def copy(self):
        return RTensor(self.data.copy())

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return RTensor(self.data.reshape(shape))

    def __repr__(self):
        return f"RTensor(shape={self.shape})"


def _fits_into(small, big):
    pad = (1,) * (len(big) - len(small)) + small
    return all(p == q or p == 1 for p, q in zip(pad, big))


def check_broadcast(op, shape_a, shape_b):
    """Allow equal shapes, scalars, or one shape broadcasting into the other
    along trailing axes.  Mutual (outer-product style) broadcasting errors."""
    sa, sb = tuple(shape_a), tuple(shape_b)
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) <= len(sb) and _fits_into(sa, sb):
        return
    if len(sb) <= len(sa) and _fits_into(sb, sa):
        return
    raise ShapeError(op, sa, sb)


def unbroadcast(g, shape):
    """Reduce a gradient array back to `shape` under the broadcast rule."""
    g = np.asarray(g)
    shape = tuple(shape)
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    ones = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if ones:
        g = g.sum(axis=ones, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise algebra
# ---------------------------------------------------------------------------

def cadd(a: CTensor, b: CTensor) -> CTensor:
    check_broadcast("cadd", a.shape, b.shape)
    return CTensor(a.re + b.re, a.im + b.im)


def csub(a: CTensor, b: CTensor) -> CTensor:
    check_broadcast("csub", a.shape, b.shape)
    return CTensor(a.re - b.re, a.im - b.im)


def cmul(a: CTensor, b: CTensor) -> CTensor:
    """Elementwise complex product on (re, im) pairs."""
    check_broadcast("cmul", a.shape, b.shape)
    return CTensor(a.re * b.re - a.im * b.im, a.re * b.im + a.im * b.re)


def cneg(a: CTensor) -> CTensor:
    return CTensor(-a.re, -a.im)


def conj(a: CTensor) -> CTensor:
    return CTensor(a.re.copy(), -a.im)


def abs2(a: CTensor) -> RTensor:
    """Squared modulus |z|^2 = re^2 + im^2, a real tensor."""
    return RTensor(a.re * a.re + a.im * a.im)


def crelu(a: CTensor) -> CTensor:
    """ReLU applied independently to the real and imaginary parts."""
    return CTensor(np.maximum(a.re, 0.0), np.maximum(a.im, 0.0))


# ---------------------------------------------------------------------------
# linear maps
# ---------------------------------------------------------------------------

def cmatmul(w: CTensor, x: CTensor) -> CTensor:
    """Complex matrix product y = W x for W [n, m] and x [..., m].

    Wired through four real matmuls: with W = P + jQ and x = u + jv,
    y.re = u P^T - v Q^T and y.im = u Q^T + v P^T.  Leading axes of x are
    treated as batch dimensions.
    """
    if w.ndim != 2:
        raise ShapeError("cmatmul", w.shape, x.shape)
    if x.ndim == 0 or x.shape[-1] != w.shape[1]:
        raise ShapeError("cmatmul", w.shape, x.shape)
    pt, qt = w.re.T, w.im.T
    return CTensor(x.re @ pt - x.im @ qt, x.re @ qt + x.im @ pt)


def block_matrix(w: CTensor) -> np.ndarray:
    """The real 2n x 2m block form [[P, -Q], [Q, P]] of W = P + jQ."""
    if w.ndim != 2:
        raise ShapeError("block_matrix", w.shape, w.shape)
    p, q = w.re, w.im
    return np.block([[p, -q], [q, p]])


# ---------------------------------------------------------------------------
# padding, convolution, pooling
# ---------------------------------------------------------------------------

def pad2d_r(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    width = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    return np.pad(x, width)


def pad2d(x: CTensor, pad: int) -> CTensor:
    """Zero-pad the two trailing spatial axes by `pad` on every side."""
    if pad < 0:
        raise ValueError(f"pad2d: negative pad {pad}")
    return CTensor(pad2d_r(x.re, pad), pad2d_r(x.im, pad))


def _conv_out_hw(h, w, k, stride):
    if h < k or w < k:
        raise ShapeError("conv2d", (h, w), (k, k))
    return (h - k) // stride + 1, (w - k) // stride + 1


def im2col(x: np.ndarray, k: int, stride: int):
    """Patch matrix for a valid convolution.

    x : [B, c, H, W] -> cols [B, Ho*Wo, c*k*k], plus (Ho, Wo).
    """
    b, c, h, w = x.shape
    ho, wo = _conv_out_hw(h, w, k, stride)
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]              # [B, c, Ho, Wo, k, k]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho * wo, c * k * k)
    return np.ascontiguousarray(cols), (ho, wo)


def col2im(cols: np.ndarray, x_shape, k: int, stride: int) -> np.ndarray:
    """Scatter-add the inverse of im2col; used by convolution backward."""
    b, c, h, w = x_shape
    ho, wo = _conv_out_hw(h, w, k, stride)
    patches = cols.reshape(b, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    out = np.zeros(x_shape)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += patches[..., i, j]
    return out


def rconv2d(kernel: np.ndarray, x: np.ndarray, stride: int = 1) -> np.ndarray:
    """Valid real cross-correlation: kernel [o, c, k, k], x [B, c, H, W]."""
    o, c, k, _ = kernel.shape
    if x.shape[1] != c:
        raise ShapeError("rconv2d", kernel.shape, x.shape)
    cols, (ho, wo) = im2col(x, k, stride)
    out = cols @ kernel.reshape(o, c * k * k).T      # [B, L, o]
    return out.transpose(0, 2, 1).reshape(x.shape[0], o, ho, wo)


def cconv2d(kernel: CTensor, x: CTensor, stride: int = 1) -> CTensor:
    """Valid complex convolution via the cmatmul wiring on patch matrices.

    kernel [o, c, k, k], x [c, H, W] or [B, c, H, W].
    """
    squeeze = x.ndim == 3
    xr = x.re[None] if squeeze else x.re
    xi = x.im[None] if squeeze else x.im
    o, c, k, _ = kernel.shape
    if xr.shape[1] != c:
        raise ShapeError("cconv2d", kernel.shape, x.shape)
    cols_r, (ho, wo) = im2col(xr, k, stride)
    cols_i, _ = im2col(xi, k, stride)
    pt = kernel.re.reshape(o, -1).T
    qt = kernel.im.reshape(o, -1).T
    yr = cols_r @ pt - cols_i @ qt
    yi = cols_r @ qt + cols_i @ pt
    b = xr.shape[0]
    yr = yr.transpose(0, 2, 1).reshape(b, o, ho, wo)
    yi = yi.transpose(0, 2, 1).reshape(b, o, ho, wo)
    if squeeze:
        yr, yi = yr[0], yi[0]
    return CTensor(yr, yi)


def avg_pool2d_r(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    b_c = x.shape[:-2]
    h, w = x.shape[-2:]
    ho, wo = _conv_out_hw(h, w, k, stride)
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(-2, -1))
    win = win[..., ::stride, ::stride, :, :]
    return win.mean(axis=(-2, -1)).reshape(*b_c, ho, wo)


def avg_pool2d(x: CTensor, k: int, stride: int) -> CTensor:
    """Average pooling applied to re and im independently."""
    return CTensor(avg_pool2d_r(x.re, k, stride), avg_pool2d_r(x.im, k, stride))


def avg_pool2d_backward_r(g: np.ndarray, x_shape, k: int, stride: int) -> np.ndarray:
    """Adjoint of avg_pool2d_r: spread g/(k*k) back over each window."""
    h, w = x_shape[-2:]
    ho, wo = _conv_out_hw(h, w, k, stride)
    out = np.zeros(x_shape)
    gk = g / float(k * k)
    for i in range(k):
        for j in range(k):
            out[..., i:i + stride * ho:stride, j:j + stride * wo:stride] += gk
    return out


# ---------------------------------------------------------------------------
# centered 2D DFT
# ---------------------------------------------------------------------------

_dft_table_cache = {}


def dft_tables(n: int):
    """Cosine and sine twiddle tables C[k, m] = cos(2 pi k m / n), likewise sin."""
    if n not in _dft_table_cache:
        km = np.outer(np.arange(n), np.arange(n)) * (2.0 * np.pi / n)
        _dft_table_cache[n] = (np.cos(km), np.sin(km))
    return _dft_table_cache[n]


def dft2d_centered(x, normalize: bool = False) -> CTensor:
    """Centered 2D DFT of a real image by direct summation.

    X[k, l] = sum_{m,n} x[m, n] exp(-2 pi j (k m / H + l n / W)), then the
    result is rolled so frequency (0, 0) sits at pixel (H//2, W//2).  Accepts
    [H, W] or batched [..., H, W] input.  With normalize=True the output is
    scaled by 1/sqrt(H*W), which makes the map unitary; default is the plain
    sum, for which sum|X|^2 = H*W * sum|x|^2.
    """
    arr = x.data if isinstance(x, RTensor) else _as_f64(x)
    if arr.ndim < 2:
        raise ShapeError("dft2d_centered", arr.shape, arr.shape)
    h, w = arr.shape[-2:]
    ch, sh = dft_tables(h)
    cw, sw = dft_tables(w)
    t1 = ch @ arr        # broadcasts over leading axes
    t2 = sh @ arr
    re = t1 @ cw - t2 @ sw
    im = -(t1 @ sw + t2 @ cw)
    if normalize:
        scale = 1.0 / np.sqrt(h * w)
        re = re * scale
        im = im * scale
    re = np.roll(re, (h // 2, w // 2), axis=(-2, -1))
    im = np.roll(im, (h // 2, w // 2), axis=(-2, -1))
    return CTensor(re, im)
