"""Dense tensors with reverse-mode automatic differentiation.

Small numpy-backed engine: each operation returns a new Tensor holding the
forward result and a closure that pushes adjoints back into its parents.
``Tensor.backward()`` replays those closures in reverse topological order,
visiting every recorded operation exactly once; a tensor feeding several
consumers receives the sum of all incoming adjoints.

Precision policy: gradient checking only makes sense in float64, so
``gradcheck`` rejects float32 inputs. Training code uses float32 throughout.

Broadcasting is deliberately limited to scalar-vs-tensor; anything wider is
rejected so shape bugs surface early.

Graphs are built and consumed on one thread; a recorded graph is not
shareable across threads. Finished parameter tensors may be read concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Subgradient conventions at non-differentiable points, shared by relu and
# the hinge losses built on it: max(0, x) contributes zero gradient at x == 0.
# sqrt gets the same treatment at 0 (arises for the L2 distance of
# coincident points).

BCE_CLAMP = 1e-7          # probability clamp for log-domain safety
NORM_REJECT = 1e-8        # inputs with smaller L2 norm are degenerate
NORM_FLOOR = 1e-12        # denominator floor inside l2_normalize


class Tensor:
    """N-dimensional real array plus an optional gradient record."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse-mode sweep seeded with d(out)/d(out) = 1.

        Only scalar (size-1) outputs may start a sweep. Each node in the
        recorded graph is visited exactly once, in reverse execution order;
        adjoints accumulate additively where a tensor has several consumers.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar output, got shape {self.data.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)


def _accumulate(t: Tensor, g: np.ndarray):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def make_op(data: np.ndarray, parents, backward) -> Tensor:
    """Wrap a forward result as a graph node.

    ``backward(g)`` must push adjoints into ``parents`` via ``accumulate``.
    The node is recorded only if some parent needs gradients.
    """
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


accumulate = _accumulate


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar_shape(shape) -> bool:
    return int(np.prod(shape, dtype=np.int64)) == 1


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    """Collapse an adjoint onto a scalar-shaped parent."""
    if g.shape == tuple(shape):
        return g
    return np.asarray(g.sum()).reshape(shape)


def _check_elementwise_shapes(name, a, b):
    if a.shape != b.shape and not _is_scalar_shape(a.shape) and not _is_scalar_shape(b.shape):
        raise ValueError(f"{name}: incompatible shapes {a.shape} vs {b.shape} "
                         "(only scalar-vs-tensor broadcasting is supported)")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise_shapes("add", a, b)

    def backward(g):
        _accumulate(a, _reduce_to(g, a.shape))
        _accumulate(b, _reduce_to(g, b.shape))

    return make_op(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise_shapes("sub", a, b)

    def backward(g):
        _accumulate(a, _reduce_to(g, a.shape))
        _accumulate(b, _reduce_to(-g, b.shape))

    return make_op(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise_shapes("mul", a, b)

    def backward(g):
        _accumulate(a, _reduce_to(g * b.data, a.shape))
        _accumulate(b, _reduce_to(g * a.data, b.shape))

    return make_op(a.data * b.data, (a, b), backward)


def scale(a, s: float) -> Tensor:
    """Multiply by a python scalar constant."""
    a = as_tensor(a)
    s = float(s)

    def backward(g):
        _accumulate(a, g * s)

    return make_op(a.data * s, (a,), backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0)

    def backward(g):
        _accumulate(x, g * (x.data > 0.0))

    return make_op(out, (x,), backward)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        _accumulate(x, g * out * (1.0 - out))

    return make_op(out, (x,), backward)


def sqrt(x) -> Tensor:
    """Elementwise square root; adjoint at exactly 0 is taken as 0."""
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise ValueError("sqrt: negative input")
    out = np.sqrt(x.data)

    def backward(g):
        gx = np.zeros_like(x.data)
        nz = out > 0
        gx[nz] = g[nz] * 0.5 / out[nz]
        _accumulate(x, gx)

    return make_op(out, (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra and structure


def matmul(a, b, fixed_order=False) -> Tensor:
    """2-D matrix product.

    With ``fixed_order=True`` the forward contraction runs in a fixed
    per-element reduction order (no BLAS), so each output row is bit-identical
    no matter how many rows are computed together. The pair-discriminator
    forward relies on this for slot independence.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions disagree: {a.shape} vs {b.shape}")
    if fixed_order:
        out = np.einsum("ik,kj->ij", a.data, b.data, optimize=False)
    else:
        out = a.data @ b.data

    def backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return make_op(out, (a, b), backward)


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ValueError(f"transpose: expected 2-D, got {x.shape}")

    def backward(g):
        _accumulate(x, g.T)

    return make_op(x.data.T.copy(), (x,), backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def backward(g):
        _accumulate(x, g.reshape(x.data.shape))

    return make_op(out.copy(), (x,), backward)


def add_bias(x, b) -> Tensor:
    """Add a bias vector to every row of a 2-D activation matrix."""
    x, b = as_tensor(x), as_tensor(b)
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ValueError(f"add_bias: shapes {x.shape} and {b.shape} do not align")

    def backward(g):
        _accumulate(x, g)
        _accumulate(b, g.sum(axis=0))

    return make_op(x.data + b.data[None, :], (x, b), backward)


def sum_all(x) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        _accumulate(x, np.full_like(x.data, g.item()))

    return make_op(np.asarray(x.data.sum()), (x,), backward)


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size

    def backward(g):
        _accumulate(x, np.full_like(x.data, g.item() / n))

    return make_op(np.asarray(x.data.mean()), (x,), backward)


def gather2d(m, rows, cols) -> Tensor:
    """Pick entries m[rows[i], cols[i]] into a 1-D tensor."""
    m = as_tensor(m)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if m.data.ndim != 2:
        raise ValueError(f"gather2d: expected 2-D source, got {m.shape}")
    out = m.data[rows, cols]

    def backward(g):
        gm = np.zeros_like(m.data)
        np.add.at(gm, (rows, cols), g)
        _accumulate(m, gm)

    return make_op(out, (m,), backward)


def pairwise_sqdist(a, b) -> Tensor:
    """All-pairs squared L2 distances between row sets: out[i,j] = ||a_i - b_j||^2.

    Computed from explicit differences so results are exactly non-negative.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"pairwise_sqdist: shapes {a.shape} and {b.shape} do not align")
    diff = a.data[:, None, :] - b.data[None, :, :]
    out = np.einsum("ijk,ijk->ij", diff, diff)

    def backward(g):
        gd = 2.0 * g[:, :, None] * diff
        _accumulate(a, gd.sum(axis=1))
        _accumulate(b, -gd.sum(axis=0))

    return make_op(out, (a, b), backward)


def l2_normalize(v) -> Tensor:
    """Scale a vector (or each row of a matrix) to unit L2 norm.

    Inputs with norm below NORM_REJECT are degenerate and rejected; the
    denominator additionally carries a NORM_FLOOR floor.
    """
    v = as_tensor(v)
    vec_in = v.data.ndim == 1
    x = v.data[None, :] if vec_in else v.data
    if x.ndim != 2:
        raise ValueError(f"l2_normalize: expected 1-D or 2-D input, got {v.shape}")
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    if np.any(norms < NORM_REJECT):
        raise ValueError(f"l2_normalize: degenerate input, norm below {NORM_REJECT:g}")
    denom = np.maximum(norms, NORM_FLOOR)
    out = x / denom[:, None]

    def backward(g):
        g2 = g[None, :] if vec_in else g
        proj = np.einsum("ij,ij->i", g2, x) / denom**3
        gx = g2 / denom[:, None] - x * proj[:, None]
        _accumulate(v, gx[0] if vec_in else gx)

    return make_op(out[0] if vec_in else out, (v,), backward)


# ---------------------------------------------------------------------------
# losses over raw scores


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], max-stabilized."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ValueError(f"softmax_cross_entropy: expected 2-D logits, got {logits.shape}")
    b, c = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"softmax_cross_entropy: labels shape {labels.shape} != ({b},)")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"softmax_cross_entropy: label out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    loss = -logp[np.arange(b), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(b), labels] -= 1.0
        _accumulate(logits, p * (g.item() / b))

    return make_op(np.asarray(loss), (logits,), backward)


def binary_cross_entropy(p, y, mask=None) -> Tensor:
    """Mean of -[y ln p + (1-y) ln(1-p)] over included entries.

    Probabilities are clamped to [BCE_CLAMP, 1-BCE_CLAMP]; the adjoint is zero
    wherever the clamp was active. ``mask`` restricts the mean to a subset
    (nonzero entries); an empty mask is rejected.
    """
    p = as_tensor(p)
    yd = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=p.data.dtype)
    if yd.shape != p.data.shape:
        raise ValueError(f"binary_cross_entropy: shapes {p.shape} vs {yd.shape} disagree")
    if not np.all((yd == 0.0) | (yd == 1.0)):
        raise ValueError("binary_cross_entropy: targets must be 0 or 1")
    lo, hi = BCE_CLAMP, 1.0 - BCE_CLAMP
    pc = np.clip(p.data, lo, hi)
    elem = -(yd * np.log(pc) + (1.0 - yd) * np.log1p(-pc))
    if mask is None:
        count = elem.size
        loss = elem.mean()
        w = None
    else:
        w = np.asarray(mask, dtype=bool)
        if w.shape != p.data.shape:
            raise ValueError(f"binary_cross_entropy: mask shape {w.shape} != {p.shape}")
        count = int(w.sum())
        if count == 0:
            raise ValueError("binary_cross_entropy: empty mask")
        loss = elem[w].sum() / count

    def backward(g):
        gp = (pc - yd) / (pc * (1.0 - pc)) * (g.item() / count)
        inside = (p.data >= lo) & (p.data <= hi)
        gp = gp * inside
        if w is not None:
            gp = gp * w
        _accumulate(p, gp)

    return make_op(np.asarray(loss), (p,), backward)


# ---------------------------------------------------------------------------
# convolution path (image-mode backbone)


def conv2d(x, w, b) -> Tensor:
    """Valid-padding stride-1 convolution on b x H x W x C inputs.

    Weights are kh x kw x Cin x Cout; bias is per output channel.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"conv2d: expected 4-D input/weights, got {x.shape} and {w.shape}")
    n, h, wd, cin = x.shape
    kh, kw, wcin, cout = w.shape
    if wcin != cin or b.shape != (cout,):
        raise ValueError(f"conv2d: shapes {x.shape}, {w.shape}, {b.shape} do not align")
    ho, wo = h - kh + 1, wd - kw + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{wd}")
    out = np.broadcast_to(b.data, (n, ho, wo, cout)).copy()
    for di in range(kh):
        for dj in range(kw):
            patch = x.data[:, di:di + ho, dj:dj + wo, :]
            out += np.tensordot(patch, w.data[di, dj], axes=([3], [0]))

    def backward(g):
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(w.data)
        for di in range(kh):
            for dj in range(kw):
                patch = x.data[:, di:di + ho, dj:dj + wo, :]
                gx[:, di:di + ho, dj:dj + wo, :] += np.tensordot(g, w.data[di, dj].T, axes=([3], [0]))
                gw[di, dj] = np.tensordot(patch, g, axes=([0, 1, 2], [0, 1, 2]))
        _accumulate(x, gx)
        _accumulate(w, gw)
        _accumulate(b, g.sum(axis=(0, 1, 2)))

    return make_op(out, (x, w, b), backward)


def avg_pool2d(x, k: int) -> Tensor:
    """Non-overlapping k x k mean pooling; spatial dims must divide by k."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError(f"avg_pool2d: expected 4-D input, got {x.shape}")
    n, h, w, c = x.shape
    if h % k or w % k:
        raise ValueError(f"avg_pool2d: spatial dims {h}x{w} not divisible by {k}")
    blocks = x.data.reshape(n, h // k, k, w // k, k, c)
    out = blocks.mean(axis=(2, 4))

    def backward(g):
        gx = np.repeat(np.repeat(g, k, axis=1), k, axis=2) / (k * k)
        _accumulate(x, gx)

    return make_op(out, (x,), backward)


def mean_spatial(x) -> Tensor:
    """Global average over spatial dims: b x H x W x C -> b x C."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError(f"mean_spatial: expected 4-D input, got {x.shape}")
    n, h, w, c = x.shape

    def backward(g):
        _accumulate(x, np.broadcast_to(g[:, None, None, :] / (h * w), x.data.shape).copy())

    return make_op(x.data.mean(axis=(1, 2)), (x,), backward)


def scale_channels(x, s) -> Tensor:
    """Multiply each channel of b x H x W x C by a per-sample gate from b x C."""
    x, s = as_tensor(x), as_tensor(s)
    if x.data.ndim != 4 or s.data.ndim != 2 or x.shape[0] != s.shape[0] or x.shape[3] != s.shape[1]:
        raise ValueError(f"scale_channels: shapes {x.shape} and {s.shape} do not align")
    gates = s.data[:, None, None, :]

    def backward(g):
        _accumulate(x, g * gates)
        _accumulate(s, (g * x.data).sum(axis=(1, 2)))

    return make_op(x.data * gates, (x, s), backward)


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class GradcheckResult:
    passed: bool
    max_rel_err: float
    tol: float

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return f"{status} (rel err {self.max_rel_err:.3e}, tol {self.tol:g})"


def gradcheck(f, x: np.ndarray, tol: float = 1e-4, h: float = 1e-5) -> GradcheckResult:
    """Compare the analytic gradient of a scalar function against central differences.

    ``f`` maps a Tensor to a scalar Tensor; ``x`` must be float64 (the check
    is meaningless in float32). The error is the relative L2 deviation between
    the analytic gradient and the stencil (f(x+h) - f(x-h)) / 2h.
    """
    x = np.asarray(x)
    if x.dtype != np.float64:
        raise ValueError("gradcheck: input must be float64")
    xt = Tensor(x.copy(), requires_grad=True)
    out = f(xt)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ValueError("gradcheck: function must return a scalar Tensor")
    out.backward()
    analytic = xt.grad.copy() if xt.grad is not None else np.zeros_like(x)

    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(x.copy())).data.item()
        flat[i] = orig - h
        fm = f(Tensor(x.copy())).data.item()
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * h)

    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    rel = float(np.linalg.norm(analytic - numeric) / denom)
    return GradcheckResult(passed=rel < tol, max_rel_err=rel, tol=tol)
