"""Reverse-mode automatic differentiation over CTensor/RTensor values.

The graph is dynamic: every operation returns a Var holding its value, its
parent Vars, and one vector-Jacobian closure per parent.  backward() walks
the graph in reverse topological order and accumulates cotangents.

All backward rules are written directly on the (re, im) real pairs.  For a
complex-valued node the cotangent is the pair (dL/d re, dL/d im), which when
packed as re + j im is the conjugate (Wirtinger) gradient dL/d z-bar of the
real loss L.  Steepest descent on the real pairs and on the packed complex
gradient therefore coincide.
"""

import numpy as np

from . import ctensor as ct
from .ctensor import CTensor, RTensor, ShapeError, check_broadcast, unbroadcast


class Var:
    """A node in the computation graph."""

    __slots__ = ("value", "parents", "vjps", "requires_grad", "name")

    def __init__(self, value, parents=(), vjps=(), requires_grad=None, name=""):
        if isinstance(value, np.ndarray) or np.isscalar(value):
            value = RTensor(value)
        if not isinstance(value, (CTensor, RTensor)):
            raise TypeError(f"Var: unsupported value type {type(value)!r}")
        self.value = value
        self.parents = tuple(parents)
        self.vjps = tuple(vjps)
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def is_complex(self):
        return isinstance(self.value, CTensor)

    @property
    def shape(self):
        return self.value.shape

    def backward(self):
        backward(self)

    def __repr__(self):
        kind = "C" if self.is_complex else "R"
        return f"Var[{kind}]{self.value.shape}"

    # convenience arithmetic for real-valued nodes
    def __add__(self, other):
        return radd(self, _coerce(other))

    def __radd__(self, other):
        return radd(_coerce(other), self)

    def __sub__(self, other):
        return rsub(self, _coerce(other))

    def __rsub__(self, other):
        return rsub(_coerce(other), self)

    def __mul__(self, other):
        return rmul(self, _coerce(other))

    def __rmul__(self, other):
        return rmul(_coerce(other), self)

    def __neg__(self):
        return rneg(self)


class Parameter(Var):
    """A trainable leaf.  After backward(), .grad holds the accumulated
    cotangent (a CTensor for complex parameters: grad.re + j grad.im is the
    conjugate gradient)."""

    __slots__ = ("grad",)

    def __init__(self, value, name="", requires_grad=True):
        super().__init__(value, requires_grad=requires_grad, name=name)
        self.grad = None

    def zero_grad(self):
        self.grad = None


def const(value, name=""):
    """Lift a value into the graph as a non-differentiable constant."""
    return Var(value, requires_grad=False, name=name)


def _coerce(x):
    if isinstance(x, Var):
        return x
    return const(np.asarray(x, dtype=np.float64))


def zero_grads(params):
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# backward engine
# ---------------------------------------------------------------------------

def _acc(a, b):
    if a is None:
        return b
    if isinstance(a, CTensor):
        return CTensor(a.re + b.re, a.im + b.im)
    return RTensor(a.data + b.data)


def backward(loss: Var):
    """Accumulate gradients of a real scalar loss into every reachable
    Parameter.  Gradients add up across calls; zero them between steps."""
    if loss.is_complex:
        raise TypeError("backward: loss must be real-valued")
    if loss.value.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: no trainable parameters reachable from the loss")

    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    cot = {id(loss): RTensor(np.ones(loss.value.shape))}
    for node in reversed(topo):
        g = cot.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad = _acc(node.grad, g)
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            if parent.requires_grad and vjp is not None:
                cot[id(parent)] = _acc(cot.get(id(parent)), vjp(g))


# ---------------------------------------------------------------------------
# real elementwise ops
# ---------------------------------------------------------------------------

def _rval(x: Var) -> np.ndarray:
    if x.is_complex:
        raise TypeError("expected a real-valued node")
    return x.value.data


def radd(a, b):
    va, vb = _rval(a), _rval(b)
    check_broadcast("radd", va.shape, vb.shape)
    return Var(RTensor(va + vb), (a, b),
               (lambda g: RTensor(unbroadcast(g.data, va.shape)),
                lambda g: RTensor(unbroadcast(g.data, vb.shape))))


def rsub(a, b):
    va, vb = _rval(a), _rval(b)
    check_broadcast("rsub", va.shape, vb.shape)
    return Var(RTensor(va - vb), (a, b),
               (lambda g: RTensor(unbroadcast(g.data, va.shape)),
                lambda g: RTensor(unbroadcast(-g.data, vb.shape))))


def rmul(a, b):
    va, vb = _rval(a), _rval(b)
    check_broadcast("rmul", va.shape, vb.shape)
    return Var(RTensor(va * vb), (a, b),
               (lambda g: RTensor(unbroadcast(g.data * vb, va.shape)),
                lambda g: RTensor(unbroadcast(g.data * va, vb.shape))))


def rdiv(a, b):
    va, vb = _rval(a), _rval(b)
    check_broadcast("rdiv", va.shape, vb.shape)
    out = va / vb
    return Var(RTensor(out), (a, b),
               (lambda g: RTensor(unbroadcast(g.data / vb, va.shape)),
                lambda g: RTensor(unbroadcast(-g.data * out / vb, vb.shape))))


def rneg(a):
    return Var(RTensor(-_rval(a)), (a,), (lambda g: RTensor(-g.data),))


def rexp(a):
    out = np.exp(_rval(a))
    return Var(RTensor(out), (a,), (lambda g: RTensor(g.data * out),))


def rlog(a):
    va = _rval(a)
    return Var(RTensor(np.log(va)), (a,), (lambda g: RTensor(g.data / va),))


def rsqrt(a):
    out = np.sqrt(_rval(a))
    return Var(RTensor(out), (a,), (lambda g: RTensor(g.data * 0.5 / out),))


def rmax_const(a, c: float):
    va = _rval(a)
    keep = va > c
    return Var(RTensor(np.maximum(va, c)), (a,),
               (lambda g: RTensor(g.data * keep),))


def rrelu(a):
    return rmax_const(a, 0.0)


def rscale(a, c: float):
    c = float(c)
    return Var(RTensor(_rval(a) * c), (a,), (lambda g: RTensor(g.data * c),))


def radd_const(a, c: float):
    c = float(c)
    return Var(RTensor(_rval(a) + c), (a,), (lambda g: g,))


def rsum(a):
    va = _rval(a)
    return Var(RTensor(np.asarray(va.sum())), (a,),
               (lambda g: RTensor(np.broadcast_to(g.data, va.shape).copy()),))


def rmean(a):
    va = _rval(a)
    n = va.size
    return Var(RTensor(np.asarray(va.mean())), (a,),
               (lambda g: RTensor(np.broadcast_to(g.data / n, va.shape).copy()),))


def elementwise(a, fn, dfn):
    """Custom differentiable elementwise map with an analytic derivative.

    fn and dfn map ndarrays to ndarrays; the vjp is g * dfn(x).  This is the
    hook the divergence penalties use to register exact gradients without
    differentiating through their forward evaluation.
    """
    va = _rval(a)
    return Var(RTensor(np.asarray(fn(va))), (a,),
               (lambda g: RTensor(g.data * dfn(va)),))


# ---------------------------------------------------------------------------
# real linear algebra / stencils
# ---------------------------------------------------------------------------

def rtranspose(a):
    va = _rval(a)
    if va.ndim != 2:
        raise ShapeError("rtranspose", va.shape, va.shape)
    return Var(RTensor(va.T), (a,), (lambda g: RTensor(g.data.T),))


def rmatmul(a, b):
    """Real product a[..., m] @ b[m, k] with leading batch axes on a."""
    va, vb = _rval(a), _rval(b)
    if vb.ndim != 2 or va.ndim == 0 or va.shape[-1] != vb.shape[0]:
        raise ShapeError("rmatmul", va.shape, vb.shape)

    def vjp_a(g):
        return RTensor(g.data @ vb.T)

    def vjp_b(g):
        gf = g.data.reshape(-1, vb.shape[1])
        af = va.reshape(-1, vb.shape[0])
        return RTensor(af.T @ gf)

    return Var(RTensor(va @ vb), (a, b), (vjp_a, vjp_b))


def rreshape(a, shape):
    va = _rval(a)
    return Var(RTensor(va.reshape(shape)), (a,),
               (lambda g: RTensor(g.data.reshape(va.shape)),))


def rflatten(a):
    va = _rval(a)
    return rreshape(a, (va.shape[0], -1))


def rconv2d(kernel, x, stride: int = 1):
    """Valid real convolution, kernel [o, c, k, k] against x [B, c, H, W]."""
    vk, vx = _rval(kernel), _rval(x)
    o, c, k, _ = vk.shape
    cols, (ho, wo) = ct.im2col(vx, k, stride)
    kflat = vk.reshape(o, -1)
    out = cols @ kflat.T
    b = vx.shape[0]

    def vjp_kernel(g):
        g2 = g.data.reshape(b, o, ho * wo).transpose(0, 2, 1)
        return RTensor(np.einsum("blo,blp->op", g2, cols).reshape(vk.shape))

    def vjp_x(g):
        g2 = g.data.reshape(b, o, ho * wo).transpose(0, 2, 1)
        gcols = g2 @ kflat
        return RTensor(ct.col2im(gcols, vx.shape, k, stride))

    val = out.transpose(0, 2, 1).reshape(b, o, ho, wo)
    return Var(RTensor(val), (kernel, x), (vjp_kernel, vjp_x))


def ravg_pool2d(x, k: int, stride: int):
    vx = _rval(x)
    out = ct.avg_pool2d_r(vx, k, stride)
    return Var(RTensor(out), (x,),
               (lambda g: RTensor(ct.avg_pool2d_backward_r(g.data, vx.shape, k, stride)),))


def softmax_cross_entropy(logits, labels):
    """Mean cross entropy of integer labels under softmax(logits[B, K])."""
    z = _rval(logits)
    if z.ndim != 2:
        raise ShapeError("softmax_cross_entropy", z.shape, z.shape)
    y = np.asarray(labels)
    b = z.shape[0]
    if y.shape != (b,):
        raise ShapeError("softmax_cross_entropy", z.shape, y.shape)
    zs = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=1))
    loss = (lse - zs[np.arange(b), y]).mean()
    sm = np.exp(zs - lse[:, None])

    def vjp(g):
        gg = sm.copy()
        gg[np.arange(b), y] -= 1.0
        return RTensor(gg * (g.data / b))

    return Var(RTensor(np.asarray(loss)), (logits,), (vjp,))


# ---------------------------------------------------------------------------
# complex ops
# ---------------------------------------------------------------------------

def _cval(x: Var) -> CTensor:
    if not x.is_complex:
        raise TypeError("expected a complex-valued node")
    return x.value


def cadd(a, b):
    va, vb = _cval(a), _cval(b)
    out = ct.cadd(va, vb)
    return Var(out, (a, b),
               (lambda g: CTensor(unbroadcast(g.re, va.shape), unbroadcast(g.im, va.shape)),
                lambda g: CTensor(unbroadcast(g.re, vb.shape), unbroadcast(g.im, vb.shape))))


def csub(a, b):
    va, vb = _cval(a), _cval(b)
    out = ct.csub(va, vb)
    return Var(out, (a, b),
               (lambda g: CTensor(unbroadcast(g.re, va.shape), unbroadcast(g.im, va.shape)),
                lambda g: CTensor(unbroadcast(-g.re, vb.shape), unbroadcast(-g.im, vb.shape))))


def cneg(a):
    va = _cval(a)
    return Var(ct.cneg(va), (a,), (lambda g: CTensor(-g.re, -g.im),))


def cmul(a, b):
    va, vb = _cval(a), _cval(b)
    out = ct.cmul(va, vb)

    def vjp_a(g):
        return CTensor(unbroadcast(g.re * vb.re + g.im * vb.im, va.shape),
                       unbroadcast(-g.re * vb.im + g.im * vb.re, va.shape))

    def vjp_b(g):
        return CTensor(unbroadcast(g.re * va.re + g.im * va.im, vb.shape),
                       unbroadcast(-g.re * va.im + g.im * va.re, vb.shape))

    return Var(out, (a, b), (vjp_a, vjp_b))


def cconj(a):
    va = _cval(a)
    return Var(ct.conj(va), (a,), (lambda g: CTensor(g.re.copy(), -g.im),))


def cabs2(a):
    va = _cval(a)
    return Var(ct.abs2(va), (a,),
               (lambda g: CTensor(g.data * 2.0 * va.re, g.data * 2.0 * va.im),))


def creal(a):
    va = _cval(a)
    return Var(RTensor(va.re.copy()), (a,),
               (lambda g: CTensor(g.data.copy(), np.zeros_like(g.data)),))


def cimag(a):
    va = _cval(a)
    return Var(RTensor(va.im.copy()), (a,),
               (lambda g: CTensor(np.zeros_like(g.data), g.data.copy()),))


def ccomplex(re, im):
    """Assemble a complex node from two real nodes."""
    vr, vi = _rval(re), _rval(im)
    return Var(CTensor(vr.copy(), vi.copy()), (re, im),
               (lambda g: RTensor(g.re.copy()),
                lambda g: RTensor(g.im.copy())))


def rcmul(r, z):
    """Product of a real node with a complex node (scaling / masking)."""
    vr, vz = _rval(r), _cval(z)
    check_broadcast("rcmul", vr.shape, vz.shape)
    out = CTensor(vr * vz.re, vr * vz.im)

    def vjp_r(g):
        return RTensor(unbroadcast(g.re * vz.re + g.im * vz.im, vr.shape))

    def vjp_z(g):
        return CTensor(unbroadcast(g.re * vr, vz.shape),
                       unbroadcast(g.im * vr, vz.shape))

    return Var(out, (r, z), (vjp_r, vjp_z))


def crelu(a):
    va = _cval(a)
    kr, ki = va.re > 0, va.im > 0
    return Var(ct.crelu(va), (a,),
               (lambda g: CTensor(g.re * kr, g.im * ki),))


def creshape(a, shape):
    va = _cval(a)
    return Var(va.reshape(shape), (a,),
               (lambda g: CTensor(g.re.reshape(va.shape), g.im.reshape(va.shape)),))


def cflatten(a):
    va = _cval(a)
    return creshape(a, (va.shape[0], -1))


def cmatmul(w, x):
    """Complex y = W x with W [n, m], x [..., m]; the four-matmul wiring."""
    vw, vx = _cval(w), _cval(x)
    out = ct.cmatmul(vw, vx)
    p, q = vw.re, vw.im

    def vjp_w(g):
        gr = g.re.reshape(-1, out.shape[-1]).T
        gi = g.im.reshape(-1, out.shape[-1]).T
        xr = vx.re.reshape(-1, vw.shape[1])
        xi = vx.im.reshape(-1, vw.shape[1])
        return CTensor(gr @ xr + gi @ xi, gi @ xr - gr @ xi)

    def vjp_x(g):
        return CTensor(g.re @ p + g.im @ q, g.im @ p - g.re @ q)

    return Var(out, (w, x), (vjp_w, vjp_x))


def cconv2d(kernel, x, stride: int = 1):
    """Valid complex convolution, kernel [o, c, k, k] against x [B, c, H, W]."""
    vk, vx = _cval(kernel), _cval(x)
    o, c, k, _ = vk.shape
    if vx.ndim != 4 or vx.shape[1] != c:
        raise ShapeError("cconv2d", vk.shape, vx.shape)
    cols_r, (ho, wo) = ct.im2col(vx.re, k, stride)
    cols_i, _ = ct.im2col(vx.im, k, stride)
    pf = vk.re.reshape(o, -1)
    qf = vk.im.reshape(o, -1)
    yr = cols_r @ pf.T - cols_i @ qf.T
    yi = cols_r @ qf.T + cols_i @ pf.T
    b = vx.shape[0]
    out = CTensor(yr.transpose(0, 2, 1).reshape(b, o, ho, wo),
                  yi.transpose(0, 2, 1).reshape(b, o, ho, wo))

    def _g2(g):
        gr = g.re.reshape(b, o, ho * wo).transpose(0, 2, 1)
        gi = g.im.reshape(b, o, ho * wo).transpose(0, 2, 1)
        return gr, gi

    def vjp_kernel(g):
        gr, gi = _g2(g)
        kre = np.einsum("blo,blp->op", gr, cols_r) + np.einsum("blo,blp->op", gi, cols_i)
        kim = np.einsum("blo,blp->op", gi, cols_r) - np.einsum("blo,blp->op", gr, cols_i)
        return CTensor(kre.reshape(vk.shape), kim.reshape(vk.shape))

    def vjp_x(g):
        gr, gi = _g2(g)
        gcr = gr @ pf + gi @ qf
        gci = gi @ pf - gr @ qf
        return CTensor(ct.col2im(gcr, vx.re.shape, k, stride),
                       ct.col2im(gci, vx.re.shape, k, stride))

    return Var(out, (kernel, x), (vjp_kernel, vjp_x))


def cavg_pool2d(x, k: int, stride: int):
    vx = _cval(x)
    out = ct.avg_pool2d(vx, k, stride)
    return Var(out, (x,),
               (lambda g: CTensor(ct.avg_pool2d_backward_r(g.re, vx.re.shape, k, stride),
                                  ct.avg_pool2d_backward_r(g.im, vx.re.shape, k, stride)),))


def cpad2d(x, pad: int):
    vx = _cval(x)
    out = ct.pad2d(vx, pad)
    sl = (Ellipsis, slice(pad, pad + vx.shape[-2]), slice(pad, pad + vx.shape[-1]))
    return Var(out, (x,), (lambda g: CTensor(g.re[sl].copy(), g.im[sl].copy()),))


def dft2d_centered(x, normalize: bool = False):
    """Differentiable centered 2D DFT of a real node; returns a complex node."""
    vx = _rval(x)
    out = ct.dft2d_centered(vx, normalize=normalize)
    h, w = vx.shape[-2:]
    ch, sh = ct.dft_tables(h)
    cw, sw = ct.dft_tables(w)
    scale = 1.0 / np.sqrt(h * w) if normalize else 1.0

    def vjp(g):
        gr = np.roll(g.re, (-(h // 2), -(w // 2)), axis=(-2, -1))
        gi = np.roll(g.im, (-(h // 2), -(w // 2)), axis=(-2, -1))
        gx = (ch.T @ gr @ cw.T - sh.T @ gr @ sw.T
              - ch.T @ gi @ sw.T - sh.T @ gi @ cw.T)
        return RTensor(gx * scale)

    return Var(out, (x,), (vjp,))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def _param_arrays(p: Parameter):
    if p.is_complex:
        return (("re", p.value.re), ("im", p.value.im))
    return (("data", p.value.data),)


def _grad_arrays(g):
    if isinstance(g, CTensor):
        return {"re": g.re, "im": g.im}
    return {"data": g.data}


def gradcheck(build, params, eps: float = 1e-5, tol: float = 1e-5):
    """Compare analytic gradients of build() against central differences.

    build is a zero-argument closure that reconstructs the scalar loss graph
    from the current parameter values.  Each re/im (or real) component of
    every parameter is perturbed independently.  Returns a per-parameter
    report {name: {"max_rel_err": float, "ok": bool}} plus an "ok" aggregate;
    the relative error denominator is floored at 1e-2 so near-zero gradient
    entries are judged on absolute error.
    """
    if not 1e-8 < eps < 1e-2:
        raise ValueError(f"gradcheck: eps {eps} outside (1e-8, 1e-2)")
    zero_grads(params)
    loss = build()
    backward(loss)
    analytic = {p.name: _grad_arrays(p.grad) for p in params if p.requires_grad}

    report = {}
    overall = True
    for p in params:
        if not p.requires_grad:
            continue
        worst = 0.0
        for part, arr in _param_arrays(p):
            ga = analytic[p.name][part]
            flat = arr.reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + eps
                f_plus = float(build().value.data)
                flat[i] = keep - eps
                f_minus = float(build().value.data)
                flat[i] = keep
                num = (f_plus - f_minus) / (2.0 * eps)
                ana = ga.reshape(-1)[i]
                rel = abs(ana - num) / max(abs(ana), abs(num), 1e-2)
                worst = max(worst, rel)
        ok = worst < tol
        overall &= ok
        report[p.name] = {"max_rel_err": worst, "ok": ok}
    report["ok"] = overall
    return report
