"""Small reverse-mode differentiation engine over dense numpy arrays.

Every primitive accepts either :class:`Tensor` objects or plain numpy arrays.
When no argument is a tensor that requires gradients the primitive simply
computes on the raw arrays, so the same model code serves both fast
non-differentiable simulation and recorded training passes.

Tensor-tensor operands must agree in shape exactly. Constant operands
(arrays and Python scalars) may broadcast against a tensor as long as the
result keeps the tensor's shape.

Leading axes beyond the ones an op works on are treated as batch axes.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TapeNode",
    "ShapeError",
    "TapeError",
    "NonDeterministicError",
    "backward",
    "custom_primitive",
    "value_and_grad",
    "gradient_check",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "tanh",
    "sum",
    "mean",
    "concat",
    "reshape",
    "roll",
    "take",
    "matvec",
    "channel_combine",
    "spectral_combine",
    "conv1d_circular",
    "conv_transpose1d_circular",
    "conv2d_circular",
    "conv_transpose2d_circular",
]


class ShapeError(ValueError):
    """Raised when a primitive receives operands of incompatible extents."""

    def __init__(self, op, message, shapes=()):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        detail = ", ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: {message}" + (f" (got {detail})" if detail else ""))


class TapeError(RuntimeError):
    pass


class NonDeterministicError(RuntimeError):
    pass


class Tensor:
    """A dense array that may take part in gradient recording."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)


class TapeNode:
    """One recorded primitive application."""

    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op, inputs, output, vjp):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


_ACTIVE = []


class Tape:
    """Records primitive applications while used as a context manager.

    A tape is rebuilt for every forward pass. Nodes are appended in execution
    order, which is a topological order of the computation graph.
    """

    def __init__(self):
        self.nodes = []
        self.cleared = False
        self._produced = set()

    def __enter__(self):
        if self.cleared:
            raise TapeError("cannot record on a cleared tape")
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, node):
        self.nodes.append(node)
        self._produced.add(id(node.output))

    def produced(self, tensor):
        return id(tensor) in self._produced

    def clear(self):
        self.nodes = []
        self._produced = set()
        self.cleared = True


def _tracked(x):
    return isinstance(x, Tensor) and x.requires_grad


def _raw(x):
    return x.data if isinstance(x, Tensor) else x


def _finish(op, out, inputs, vjp):
    """Wrap ``out`` and record it if any input carries gradients.

    ``vjp`` maps the output cotangent to one cotangent per input (``None``
    for inputs that need none). Also the hook for fused model-specific
    primitives, exported as :func:`custom_primitive`.
    """
    if not any(_tracked(x) for x in inputs):
        if any(isinstance(x, Tensor) for x in inputs):
            return Tensor(out)
        return out
    result = Tensor(out, requires_grad=True)
    if _ACTIVE:
        _ACTIVE[-1].record(TapeNode(op, tuple(inputs), result, vjp))
    return result


custom_primitive = _finish


def _check_same(op, a, b):
    sa, sb = np.shape(_raw(a)), np.shape(_raw(b))
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if sa != sb:
            raise ShapeError(op, "operand extents differ", (sa, sb))
        return
    tensor_shape = sa if isinstance(a, Tensor) else sb
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        try:
            out = np.broadcast_shapes(sa, sb)
        except ValueError:
            raise ShapeError(op, "operands do not broadcast", (sa, sb)) from None
        if out != tensor_shape:
            raise ShapeError(op, "constant operand would grow the tensor", (sa, sb))


# ---------------------------------------------------------------- elementwise


def add(a, b):
    _check_same("add", a, b)
    out = _raw(a) + _raw(b)
    return _finish("add", out, (a, b), lambda g: (g, g))


def sub(a, b):
    _check_same("sub", a, b)
    out = _raw(a) - _raw(b)
    return _finish("sub", out, (a, b), lambda g: (g, -g))


def mul(a, b):
    _check_same("elementwise_mul", a, b)
    da, db = _raw(a), _raw(b)
    out = da * db
    return _finish("elementwise_mul", out, (a, b), lambda g: (g * db, g * da))


def scale(x, alpha):
    out = _raw(x) * alpha
    return _finish("scale", out, (x,), lambda g: (g * alpha,))


def neg(x):
    return scale(x, -1.0)


def tanh(x):
    out = np.tanh(_raw(x))
    return _finish("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


# ---------------------------------------------------------------- reductions


def sum(x):
    d = _raw(x)
    out = np.sum(d)
    return _finish("sum", np.asarray(out), (x,), lambda g: (np.full(d.shape, g, dtype=d.dtype),))


def mean(x):
    d = _raw(x)
    out = np.mean(d)
    n = d.size
    return _finish(
        "mean", np.asarray(out), (x,), lambda g: (np.full(d.shape, g / n, dtype=d.dtype),)
    )


# ---------------------------------------------------------------- structural


def concat(xs, axis=-1):
    datas = [_raw(x) for x in xs]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError:
        raise ShapeError("concat", "operands cannot be joined", [d.shape for d in datas]) from None
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _finish("concat", out, tuple(xs), vjp)


def reshape(x, shape):
    d = _raw(x)
    try:
        out = d.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape to {tuple(shape)}", (d.shape,)) from None
    return _finish("reshape", out, (x,), lambda g: (g.reshape(d.shape),))


def roll(x, shift, axis=-1):
    """Cyclic shift, ``out[..., j] = x[..., j - shift]``."""
    out = np.roll(_raw(x), shift, axis=axis)
    return _finish("roll", out, (x,), lambda g: (np.roll(g, -shift, axis=axis),))


def take(x, index):
    """Gather ``x[..., index]`` for an index array without repeats."""
    d = _raw(x)
    index = np.asarray(index)
    if index.size and (index.min() < 0 or index.max() >= d.shape[-1]):
        raise ShapeError("take", "index out of range", (d.shape, index.shape))
    out = d[..., index]

    def vjp(g):
        full = np.zeros(d.shape, dtype=g.dtype)
        full[..., index] = g
        return (full,)

    return _finish("take", out, (x,), vjp)


# ---------------------------------------------------------------- linear maps


def matvec(W, x, b=None):
    """Affine map ``W @ x + b`` applied over the last axis of ``x``."""
    dW, dx = _raw(W), _raw(x)
    if dW.ndim != 2 or dx.ndim < 1 or dW.shape[1] != dx.shape[-1]:
        raise ShapeError("matvec", "inner extents differ", (dW.shape, dx.shape))
    if b is not None and np.shape(_raw(b)) != (dW.shape[0],):
        raise ShapeError("matvec", "bias length must equal output rows", (dW.shape, np.shape(_raw(b))))
    out = dx @ dW.T
    if b is not None:
        out = out + _raw(b)

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = dx.reshape(-1, dx.shape[-1])
        grads = [g2.T @ x2, g @ dW]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    inputs = (W, x) if b is None else (W, x, b)
    return _finish("matvec", out, inputs, vjp)


def channel_combine(coeffs, basis):
    """Contract ``sum_c coeffs[..., c] * basis[..., c, *spatial]``."""
    dc, db = _raw(coeffs), _raw(basis)
    lead = dc.shape[:-1]
    if db.ndim < dc.ndim + 1 or db.shape[: dc.ndim] != dc.shape:
        raise ShapeError("channel_combine", "basis must be (..., C, *spatial)", (dc.shape, db.shape))
    spatial = db.shape[dc.ndim:]
    flat_b = db.reshape(lead + (dc.shape[-1], -1))
    out = np.matmul(dc[..., None, :], flat_b)[..., 0, :].reshape(lead + spatial)

    def vjp(g):
        gf = g.reshape(lead + (1, -1))
        g_coeff = np.matmul(flat_b, np.swapaxes(gf, -1, -2))[..., 0]
        g_basis = (dc[..., :, None] * gf).reshape(db.shape)
        return (g_coeff, g_basis)

    return _finish("channel_combine", out, (coeffs, basis), vjp)


def _spectral_axes(symbol):
    return (-1,) if np.ndim(symbol) == 1 else (-2, -1)


def spectral_combine(xs, symbols):
    """Real translation-invariant linear combination of periodic fields.

    ``out = irfft(sum_j symbols[j] * rfft(xs[j]))`` over the last one or two
    axes. Each symbol lives on the half-spectrum grid returned by ``rfft`` /
    ``rfft2`` and must be Hermitian-consistent so the operator is real. The
    adjoint of each term uses the conjugate symbol.
    """
    if len(xs) != len(symbols) or not xs:
        raise ShapeError("spectral_combine", "need one symbol per operand")
    axes = _spectral_axes(symbols[0])
    datas = [_raw(x) for x in xs]
    spatial = datas[0].shape[len(datas[0].shape) - len(axes):]
    half = spatial[:-1] + (spatial[-1] // 2 + 1,)
    for d, s in zip(datas, symbols):
        if d.shape[len(d.shape) - len(axes):] != spatial or np.shape(s) != half:
            raise ShapeError("spectral_combine", "field/symbol extents disagree",
                             (d.shape, np.shape(s)))
    dtype = datas[0].dtype
    cdtype = np.complex64 if dtype == np.float32 else np.complex128
    syms = [np.asarray(s).astype(cdtype, copy=False) for s in symbols]
    acc = None
    for d, s in zip(datas, syms):
        term = np.fft.rfftn(d, axes=axes) * s
        acc = term if acc is None else acc + term
    out = np.fft.irfftn(acc, s=spatial, axes=axes).astype(dtype, copy=False)

    def vjp(g):
        gh = np.fft.rfftn(g, axes=axes)
        grads = []
        for d, s in zip(datas, syms):
            gi = np.fft.irfftn(gh * np.conj(s), s=spatial, axes=axes).astype(dtype, copy=False)
            if gi.shape != d.shape:
                gi = _unbroadcast(gi, d.shape)
            grads.append(gi)
        return tuple(grads)

    return _finish("spectral_combine", out, tuple(xs), vjp)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- convolutions
#
# Kernels have odd width and are centred: tap k touches offset k - width // 2.
# Biases are per output channel and per spatial position.


def _flat_lead(a, keep):
    """Collapse every axis before the last ``keep`` into one."""
    return a.reshape((-1,) + a.shape[a.ndim - keep:])


def _check_conv(op, X, W, b, ndim, channel_axis_in):
    if W.ndim != 2 + ndim:
        raise ShapeError(op, f"kernel must have rank {2 + ndim}", (W.shape,))
    if any(k % 2 == 0 for k in W.shape[2:]):
        raise ShapeError(op, "kernel width must be odd", (W.shape,))
    if X.ndim < 1 + ndim or X.shape[-1 - ndim] != W.shape[channel_axis_in]:
        raise ShapeError(op, "input channels do not match kernel", (X.shape, W.shape))


def _kernel_offsets(taps, spatial, shifts_sign):
    """Grid index of every tap: offset ``sign * (k - centre)`` modulo the extent."""
    return tuple((shifts_sign * (np.arange(t) - t // 2)) % n for t, n in zip(taps, spatial))


def _conv_core_fft(X, W, shifts_sign, ndim):
    # circular correlation is a pointwise product with the conjugate kernel spectrum
    spatial = X.shape[2:]
    axes = tuple(range(-ndim, 0))
    dtype = np.result_type(X, W)
    grid = np.zeros(W.shape[:2] + spatial, dtype=dtype)
    grid[np.ix_(range(W.shape[0]), range(W.shape[1]), *_kernel_offsets(W.shape[2:], spatial, shifts_sign))] = W
    Kh = np.conj(np.fft.rfftn(grid, axes=axes))
    Xh = np.fft.rfftn(X, axes=axes)
    # batched (B, C_in) @ (C_in, C_out) per frequency bin
    Xm = np.moveaxis(Xh.reshape(Xh.shape[:2] + (-1,)), -1, 0)
    Km = np.moveaxis(Kh.reshape(Kh.shape[:2] + (-1,)), -1, 0).transpose(0, 2, 1)
    Oh = np.moveaxis(np.matmul(Xm, Km), 0, -1).reshape((X.shape[0], W.shape[0]) + Xh.shape[2:])
    return np.fft.irfftn(Oh, s=spatial, axes=axes).astype(dtype, copy=False)


def _conv_weight_grad_fft(X, G, taps, shifts_sign, ndim):
    spatial = X.shape[2:]
    axes = tuple(range(-ndim, 0))
    Xh = np.fft.rfftn(X, axes=axes)
    Gh = np.fft.rfftn(G, axes=axes)
    Xm = np.moveaxis(Xh.reshape(Xh.shape[:2] + (-1,)), -1, 0)
    Gm = np.moveaxis(Gh.reshape(Gh.shape[:2] + (-1,)), -1, 0)
    # C[o, i, m] = sum_b sum_j G[b, o, j] X[b, i, j + m]
    Ch = np.matmul(np.conj(Gm).transpose(0, 2, 1), Xm)
    Ch = np.moveaxis(Ch, 0, -1).reshape(Ch.shape[1:] + Xh.shape[2:])
    C = np.fft.irfftn(Ch, s=spatial, axes=axes)
    dW = C[np.ix_(range(C.shape[0]), range(C.shape[1]), *_kernel_offsets(taps, spatial, shifts_sign))]
    return dW.astype(np.result_type(X, G), copy=False)


def _conv_core(X, W, shifts_sign, ndim):
    """Stride-1 circular correlation ``sum_k W[:, :, k] @ X[..., j + sign*(k-c)]``.

    ``W`` is (C_out, C_in, *taps); ``X`` is (B, C_in, *spatial).
    """
    if ndim == 2:
        return _conv_core_fft(X, W, shifts_sign, ndim)
    taps = W.shape[2:]
    centre = [t // 2 for t in taps]
    axes = tuple(range(-ndim, 0))
    B, cin = X.shape[0], X.shape[1]
    spatial = X.shape[2:]
    Xf = X.reshape(B, cin, -1)
    out = np.zeros((B, W.shape[0], Xf.shape[-1]), dtype=np.result_type(X, W))
    for idx in np.ndindex(*taps):
        shift = tuple(-shifts_sign * (i - c) for i, c in zip(idx, centre))
        xs = np.roll(X, shift, axis=axes).reshape(B, cin, -1) if any(shift) else Xf
        out += np.matmul(W[(slice(None), slice(None)) + idx], xs)
    return out.reshape((B, W.shape[0]) + spatial)


def _conv_weight_grad(X, G, taps, shifts_sign, ndim):
    """Gradient of ``_conv_core`` with respect to its kernel."""
    if ndim == 2:
        return _conv_weight_grad_fft(X, G, taps, shifts_sign, ndim)
    centre = [t // 2 for t in taps]
    axes = tuple(range(-ndim, 0))
    B, cin = X.shape[0], X.shape[1]
    cout = G.shape[1]
    Gf = np.swapaxes(G.reshape(B, cout, -1), 0, 1).reshape(cout, -1)
    dW = np.zeros((cout, cin) + tuple(taps), dtype=np.result_type(X, G))
    for idx in np.ndindex(*taps):
        shift = tuple(-shifts_sign * (i - c) for i, c in zip(idx, centre))
        xs = np.roll(X, shift, axis=axes) if any(shift) else X
        xs = np.swapaxes(xs.reshape(B, cin, -1), 0, 1).reshape(cin, -1)
        dW[(slice(None), slice(None)) + idx] = Gf @ xs.T
    return dW


def _conv_nd(op, X, W, b, stride, ndim):
    dX, dW = _raw(X), _raw(W)
    _check_conv(op, dX, dW, b, ndim, 1)
    spatial = dX.shape[dX.ndim - ndim:]
    if any(n % stride for n in spatial):
        raise ShapeError(op, f"extent not divisible by stride {stride}", (dX.shape,))
    lead = dX.shape[: dX.ndim - ndim - 1]
    X3 = _flat_lead(dX, ndim + 1)
    full = _conv_core(X3, dW, 1, ndim)
    sl = (slice(None), slice(None)) + (slice(None, None, stride),) * ndim
    out = full[sl]
    out_spatial = out.shape[2:]
    if b is not None:
        if np.shape(_raw(b)) != (dW.shape[0],) + out_spatial:
            raise ShapeError(op, "bias must be (C_out, *spatial_out)", (np.shape(_raw(b)), out.shape))
        out = out + _raw(b)
    out = out.reshape(lead + out.shape[1:])

    def vjp(g):
        g3 = _flat_lead(g, ndim + 1)
        gfull = np.zeros(full.shape, dtype=g.dtype)
        gfull[sl] = g3
        # adjoint of correlation is correlation with reversed offsets and transposed channels
        gX = _conv_core(gfull, np.swapaxes(dW, 0, 1), -1, ndim).reshape(dX.shape)
        gW = _conv_weight_grad(X3, gfull, dW.shape[2:], 1, ndim)
        grads = [gX, gW]
        if b is not None:
            grads.append(g3.sum(axis=0))
        return tuple(grads)

    inputs = (X, W) if b is None else (X, W, b)
    return _finish(op, out, inputs, vjp)


def _upsample(Y, stride, ndim):
    if stride == 1:
        return Y
    spatial = Y.shape[Y.ndim - ndim:]
    U = np.zeros(Y.shape[: Y.ndim - ndim] + tuple(n * stride for n in spatial), dtype=Y.dtype)
    U[(Ellipsis,) + (slice(None, None, stride),) * ndim] = Y
    return U


def _conv_transpose_nd(op, Y, W, b, stride, ndim):
    """Adjoint of the strided circular correlation with kernel ``W``.

    ``W`` is (C_in, C_out, *taps), the same layout the forward correlation
    from C_out to C_in channels would use.
    """
    dY, dW = _raw(Y), _raw(W)
    _check_conv(op, dY, dW, b, ndim, 0)
    lead = dY.shape[: dY.ndim - ndim - 1]
    Y3 = _flat_lead(dY, ndim + 1)
    U = _upsample(Y3, stride, ndim)
    WT = np.swapaxes(dW, 0, 1)
    out = _conv_core(U, WT, -1, ndim)
    if b is not None:
        if np.shape(_raw(b)) != out.shape[1:]:
            raise ShapeError(op, "bias must be (C_out, *spatial_out)", (np.shape(_raw(b)), out.shape))
        out = out + _raw(b)
    out = out.reshape(lead + out.shape[1:])
    sl = (Ellipsis,) + (slice(None, None, stride),) * ndim

    def vjp(g):
        g3 = _flat_lead(g, ndim + 1)
        gU = _conv_core(g3, dW, 1, ndim)
        gY = gU[sl].reshape(dY.shape)
        # out = corr(U, WT, -1); kernel grad mirrors _conv_weight_grad with reversed offsets
        gWT = _conv_weight_grad(U, g3, dW.shape[2:], -1, ndim)
        grads = [gY, np.swapaxes(gWT, 0, 1)]
        if b is not None:
            grads.append(g3.sum(axis=0))
        return tuple(grads)

    inputs = (Y, W) if b is None else (Y, W, b)
    return _finish(op, out, inputs, vjp)


def conv1d_circular(X, W, b=None, stride=1):
    """Circular 'same' correlation: X (..., C_in, N), W (C_out, C_in, k)."""
    return _conv_nd("conv1d_circular", X, W, b, stride, 1)


def conv2d_circular(X, W, b=None, stride=1):
    """Circular 'same' correlation: X (..., C_in, H, W), W (C_out, C_in, k, k)."""
    return _conv_nd("conv2d_circular", X, W, b, stride, 2)


def conv_transpose1d_circular(Y, W, b=None, stride=1):
    """Transposed circular convolution: Y (..., C_in, O) -> (..., C_out, O*stride)."""
    return _conv_transpose_nd("conv_transpose1d_circular", Y, W, b, stride, 1)


def conv_transpose2d_circular(Y, W, b=None, stride=1):
    """Transposed circular convolution over two periodic axes."""
    return _conv_transpose_nd("conv_transpose2d_circular", Y, W, b, stride, 2)


# ---------------------------------------------------------------- reverse pass


def backward(tape, output, params=None):
    """Reverse sweep from a scalar ``output`` recorded on ``tape``.

    Returns a dict mapping each entry of ``params`` (name -> Tensor) to the
    gradient array. Parameters the output does not depend on get zeros.
    """
    if tape.cleared:
        raise TapeError("backward on a cleared tape")
    if not isinstance(output, Tensor):
        raise TapeError("output is not a tensor")
    if output.data.size != 1:
        raise TapeError(f"backward needs a scalar output, got shape {output.shape}")
    if output.requires_grad and not tape.produced(output):
        raise TapeError("output was not recorded on this tape")

    grads = {id(output): np.ones(output.shape, dtype=output.dtype)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if not _tracked(inp) or gi is None:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    if params is None:
        return grads
    result = {}
    for name, p in params.items():
        g = grads.get(id(p))
        result[name] = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.dtype).reshape(p.shape)
    return result


def value_and_grad(fn, params):
    """Evaluate ``fn(params)`` on a fresh tape; return (value, gradients)."""
    leaves = {k: Tensor(v.data if isinstance(v, Tensor) else v, requires_grad=True, name=k)
              for k, v in params.items()}
    tape = Tape()
    with tape:
        out = fn(leaves)
    grads = backward(tape, out, leaves)
    tape.clear()
    return float(_raw(out)), grads


def gradient_check(fn, params, fd_step=1e-6, tolerance=1e-5, max_entries=None, seed=0):
    """Compare reverse-mode gradients with central finite differences.

    ``fn`` maps a dict of tensors to a scalar. Returns a dict of
    ``{name: (max_relative_error, passed)}`` plus an ``"all_passed"`` flag.
    The relative error of a parameter is the largest absolute discrepancy
    divided by the largest finite-difference magnitude of that parameter.
    ``max_entries`` caps the probed coordinates per parameter (picked with a
    fixed seed) for large parameter sets.
    """
    base = {k: np.array(v.data if isinstance(v, Tensor) else v, dtype=np.float64) for k, v in params.items()}
    first, grads = value_and_grad(fn, base)
    again = float(_raw(fn({k: Tensor(v) for k, v in base.items()})))
    if first != again:
        raise NonDeterministicError(f"function returned {first!r} then {again!r}")

    def evaluate(name, flat_index, delta):
        probe = dict(base)
        arr = base[name].copy()
        arr.flat[flat_index] += delta
        probe[name] = arr
        return float(_raw(fn({k: Tensor(v) for k, v in probe.items()})))

    rng = np.random.default_rng(seed)
    report = {}
    ok = True
    for name, arr in base.items():
        n = arr.size
        idx = np.arange(n)
        if max_entries is not None and n > max_entries:
            idx = np.sort(rng.choice(n, size=max_entries, replace=False))
        fd = np.empty(idx.size)
        for j, i in enumerate(idx):
            fd[j] = (evaluate(name, i, fd_step) - evaluate(name, i, -fd_step)) / (2 * fd_step)
        ad = grads[name].ravel()[idx]
        denom = max(np.max(np.abs(fd)) if fd.size else 0.0, 1e-12)
        err = float(np.max(np.abs(ad - fd)) / denom) if fd.size else 0.0
        passed = err < tolerance
        ok &= passed
        report[name] = (err, passed)
    report["all_passed"] = ok
    return report
