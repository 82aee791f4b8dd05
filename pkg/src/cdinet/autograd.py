"""Minimal reverse-mode differentiation engine.

Provides exactly the layer set the paired encoder-decoder networks need:
3x3 same-padded convolution, 2x2 max pooling, 2x nearest-neighbor
upsampling, relu/sigmoid activations and per-pixel binary cross-entropy,
plus the Adam optimizer and a finite-difference gradient checker.

Array layout: spatial tensors are ``[C, B, H, W]`` (channel outermost so
the im2col matrices feed BLAS without transposition); unbatched ``[C, H, W]``
inputs are accepted and returned symmetrically. Kernels run in whatever
float dtype the inputs carry - float32 for training throughput, float64
for gradient checks.

A graph instance must stay on one thread; the shared scratch buffers below
are not locked.
"""

import numpy as np

# scratch buffers for im2col/col2im, reused across calls (fresh multi-hundred
# MB allocations per batch cost more in page faults than the GEMMs themselves)
_SCRATCH: dict[tuple, np.ndarray] = {}


def _scratch(tag: str, shape: tuple, dtype) -> np.ndarray:
    key = (tag, shape, np.dtype(dtype).str)
    buf = _SCRATCH.get(key)
    if buf is None:
        buf = np.empty(shape, dtype=dtype)
        _SCRATCH[key] = buf
    return buf


# ---------------------------------------------------------------------------
# raw kernels (shared by the autograd ops and the inference fast path)
# ---------------------------------------------------------------------------

def _fill_padded(xp: np.ndarray, x: np.ndarray, p: int) -> None:
    h, w = x.shape[2], x.shape[3]
    xp[:, :, :p, :] = 0
    xp[:, :, p + h:, :] = 0
    xp[:, :, p:p + h, :p] = 0
    xp[:, :, p:p + h, p + w:] = 0
    xp[:, :, p:p + h, p:p + w] = x


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """[C,B,H,W] -> [C*k*k, B*H*W] patch matrix, zero padded."""
    c, b, h, w = x.shape
    p = k // 2
    xp = _scratch("pad", (c, b, h + 2 * p, w + 2 * p), x.dtype)
    _fill_padded(xp, x, p)
    cols = _scratch("cols", (c, k, k, b, h, w), x.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, ki, kj] = xp[:, :, ki:ki + h, kj:kj + w]
    return cols.reshape(c * k * k, b * h * w)


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same-padded stride-1 convolution. x [Cin,B,H,W], w [Cout,Cin,k,k]."""
    cin, nb, h, wd = x.shape
    cout, cw, k, k2 = w.shape
    if cw != cin:
        raise ValueError(f"channel mismatch: input has {cin}, weights expect {cw}")
    if k != k2 or k % 2 == 0:
        raise ValueError(f"kernel must be square with odd side, got {k}x{k2}")
    cols = _im2col(x, k)
    out = w.reshape(cout, -1) @ cols
    out += b[:, None]
    return out.reshape(cout, nb, h, wd)


def conv2d_backward(dout: np.ndarray, x: np.ndarray, w: np.ndarray,
                    need_dx: bool = True):
    """Gradients of conv2d_forward w.r.t. (x, w, b); cols are recomputed
    from ``x`` rather than kept alive between passes."""
    cin, nb, h, wd = x.shape
    cout = w.shape[0]
    k = w.shape[2]
    p = k // 2
    cols = _im2col(x, k)
    d2 = dout.reshape(cout, -1)
    dw = (d2 @ cols.T).reshape(w.shape)
    db = d2.sum(axis=1)
    dx = None
    if need_dx:
        dcols = _scratch("dcols", (cin, k, k, nb, h, wd), x.dtype)
        np.matmul(w.reshape(cout, -1).T, d2, out=dcols.reshape(cin * k * k, -1))
        dxp = _scratch("dpad", (cin, nb, h + 2 * p, wd + 2 * p), x.dtype)
        dxp.fill(0)
        for ki in range(k):
            for kj in range(k):
                dxp[:, :, ki:ki + h, kj:kj + wd] += dcols[:, ki, kj]
        dx = dxp[:, :, p:p + h, p:p + wd].copy()
    return dx, dw, db


def maxpool2_forward(x: np.ndarray, with_arg: bool = False):
    c, b, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"spatial dims must be even for 2x2 pooling, got {h}x{w}")
    win = x.reshape(c, b, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = np.ascontiguousarray(win).reshape(c, b, h // 2, w // 2, 4)
    out = win.max(axis=-1)
    if not with_arg:
        return out
    # argmax returns the first maximum, i.e. scan order within the window
    return out, win.argmax(axis=-1).astype(np.uint8)


def maxpool2_backward(dout: np.ndarray, arg: np.ndarray) -> np.ndarray:
    c, b, h2, w2 = dout.shape
    dwin = np.zeros((c, b, h2, w2, 4), dtype=dout.dtype)
    np.put_along_axis(dwin, arg[..., None].astype(np.intp), dout[..., None], axis=-1)
    dwin = dwin.reshape(c, b, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(dwin).reshape(c, b, h2 * 2, w2 * 2)


def upsample2_forward(x: np.ndarray) -> np.ndarray:
    c, b, h, w = x.shape
    out = np.broadcast_to(x[:, :, :, None, :, None], (c, b, h, 2, w, 2))
    return out.reshape(c, b, 2 * h, 2 * w)


def upsample2_backward(dout: np.ndarray) -> np.ndarray:
    c, b, h2, w2 = dout.shape
    return dout.reshape(c, b, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def sigmoid_forward(x: np.ndarray) -> np.ndarray:
    """1/(1+exp(-x)) via the branch that never overflows."""
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


BCE_EPS = 1e-7


def bce_value(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean binary cross-entropy with predictions clamped to
    [BCE_EPS, 1-BCE_EPS]; reduction in float64."""
    p = np.clip(pred, BCE_EPS, 1.0 - BCE_EPS).astype(np.float64, copy=False)
    t = np.asarray(target, dtype=np.float64)
    return float(-np.mean(t * np.log(p) + (1.0 - t) * np.log1p(-p)))


# ---------------------------------------------------------------------------
# graph
# ---------------------------------------------------------------------------

class Tensor:
    """N-d array plus a gradient slot and a place in the computation graph.

    Backward closures always hand freshly-allocated arrays to their
    parents, so accumulation can take ownership on first touch.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = True):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


def _make(data, parents, backward_fn, requires_grad) -> Tensor:
    t = Tensor(data, requires_grad=requires_grad)
    if requires_grad:
        t._parents = tuple(parents)
        t._backward = backward_fn
    return t


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad += g


def _as4d(a: np.ndarray):
    if a.ndim == 4:
        return a, False
    if a.ndim == 3:
        return a[:, None], True
    raise ValueError(f"expected [C,H,W] or [C,B,H,W], got shape {a.shape}")


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Same-padded 3x3-style convolution node; gradients flow to input,
    weights and bias."""
    x4, was3d = _as4d(x.data)
    out4 = conv2d_forward(x4, w.data, b.data)
    out = out4[:, 0] if was3d else out4
    req = x.requires_grad or w.requires_grad or b.requires_grad

    def back(t=None):
        g = t.grad[:, None] if was3d else t.grad
        dx, dw, db = conv2d_backward(g, x4, w.data, need_dx=x.requires_grad)
        if dx is not None:
            _accum(x, dx[:, 0] if was3d else dx)
        _accum(w, dw)
        _accum(b, db)

    node = _make(out, (x, w, b), None, req)
    node._backward = (lambda: back(node)) if req else None
    return node


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; backward routes to the first maximum in
    scan order within each window."""
    x4, was3d = _as4d(x.data)
    out4, arg = maxpool2_forward(x4, with_arg=True)
    out = out4[:, 0] if was3d else out4

    def back(t=None):
        g = t.grad[:, None] if was3d else t.grad
        dx = maxpool2_backward(g, arg)
        _accum(x, dx[:, 0] if was3d else dx)

    node = _make(out, (x,), None, x.requires_grad)
    node._backward = (lambda: back(node)) if x.requires_grad else None
    return node


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling; backward sums the four fan-out
    gradients per source pixel."""
    x4, was3d = _as4d(x.data)
    out4 = upsample2_forward(x4)
    out = out4[:, 0] if was3d else out4

    def back(t=None):
        g = t.grad[:, None] if was3d else t.grad
        dx = upsample2_backward(g)
        _accum(x, dx[:, 0] if was3d else dx)

    node = _make(out, (x,), None, x.requires_grad)
    node._backward = (lambda: back(node)) if x.requires_grad else None
    return node


def relu(x: Tensor) -> Tensor:
    out = relu_forward(x.data)

    def back(t=None):
        _accum(x, t.grad * (x.data > 0))

    node = _make(out, (x,), None, x.requires_grad)
    node._backward = (lambda: back(node)) if x.requires_grad else None
    return node


def sigmoid(x: Tensor) -> Tensor:
    out = sigmoid_forward(x.data)

    def back(t=None):
        _accum(x, t.grad * out * (1.0 - out))

    node = _make(out, (x,), None, x.requires_grad)
    node._backward = (lambda: back(node)) if x.requires_grad else None
    return node


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def bce_loss(pred: Tensor, target) -> Tensor:
    """Scalar mean cross-entropy; differentiated w.r.t. ``pred`` only."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if t.shape != pred.data.shape:
        raise ValueError(f"pred/target shapes differ: {pred.data.shape} vs {t.shape}")
    out = np.float64(bce_value(pred.data, t))

    def back(node=None):
        p = np.clip(pred.data.astype(np.float64, copy=False), BCE_EPS, 1.0 - BCE_EPS)
        g = (p - t) / (p * (1.0 - p)) / p.size
        # the clamp has zero slope where it binds
        g[(pred.data < BCE_EPS) | (pred.data > 1.0 - BCE_EPS)] = 0.0
        _accum(pred, (float(node.grad) * g).astype(pred.data.dtype, copy=False))

    node = _make(np.asarray(out), (pred,), None, pred.requires_grad)
    node._backward = (lambda: back(node)) if pred.requires_grad else None
    return node


def tensor_sum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum())

    def back(node=None):
        _accum(x, np.full_like(x.data, float(node.grad)))

    node = _make(out, (x,), None, x.requires_grad)
    node._backward = (lambda: back(node)) if x.requires_grad else None
    return node


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch in add: {a.data.shape} vs {b.data.shape}")
    out = a.data + b.data
    req = a.requires_grad or b.requires_grad

    def back(node=None):
        _accum(a, np.array(node.grad))
        _accum(b, np.array(node.grad))

    node = _make(out, (a, b), None, req)
    node._backward = (lambda: back(node)) if req else None
    return node


def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar loss; gradients accumulate additively
    across fan-out. Tensors not reachable from ``loss`` are untouched."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adaptive moment estimation over a parameter list.

    Stock update: m and v track the first/second gradient moments with
    exponential decay, bias-corrected by 1-beta^t, and parameters move by
    lr * m_hat / (sqrt(v_hat) + eps). A parameter with grad=None is treated
    as having zero gradient (its moments still decay).
    """

    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def adam_step(params: list[Tensor], opt: Adam) -> None:
    """Single optimizer step; thin alias kept for symmetry with the rest of
    the op vocabulary."""
    assert opt.params is params or opt.params == list(params)
    opt.step()


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def grad_check(make_loss, params: list[Tensor], h: float = 1e-5,
               n_coords: int = 64, seed: int = 0) -> float:
    """Max relative error between analytic gradients and central
    differences on a random coordinate subset.

    ``make_loss`` rebuilds the graph from the current parameter data and
    returns the scalar loss tensor. Parameters should be float64; at least
    ``n_coords`` coordinates are probed overall, stratified so every
    tensor is touched.
    """
    if not (1e-6 <= h <= 1e-4):
        raise ValueError(f"h must lie in [1e-6, 1e-4], got {h}")
    loss = make_loss()
    backward(loss)
    analytic = []
    for p in params:
        analytic.append(p.grad.copy() if p.grad is not None
                        else np.zeros_like(p.data))
        p.grad = None

    rng = np.random.default_rng(seed)
    sizes = [p.data.size for p in params]
    total = sum(sizes)
    want = min(max(n_coords, 64), total)
    per = max(1, want // len(params))
    chosen: list[tuple[int, int]] = []
    seen = set()
    for i, sz in enumerate(sizes):
        for j in rng.choice(sz, size=min(per, sz), replace=False):
            chosen.append((i, int(j)))
            seen.add((i, int(j)))
    while len(chosen) < want:
        i = int(rng.integers(len(params)))
        j = int(rng.integers(sizes[i]))
        if (i, j) not in seen:
            seen.add((i, j))
            chosen.append((i, j))

    worst = 0.0
    for i, j in chosen:
        d = params[i].data
        orig = d.flat[j]
        d.flat[j] = orig + h
        fp = float(make_loss().data)
        d.flat[j] = orig - h
        fm = float(make_loss().data)
        d.flat[j] = orig
        numeric = (fp - fm) / (2.0 * h)
        exact = float(analytic[i].flat[j])
        denom = max(abs(numeric), abs(exact), 1e-8)
        worst = max(worst, abs(numeric - exact) / denom)
    return worst
