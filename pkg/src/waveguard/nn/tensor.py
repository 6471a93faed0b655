"""Minimal reverse-mode autodiff over numpy arrays.

Only the operator set the rest of the package needs: elementwise arithmetic
with broadcasting, matmul (2-D and batched), reductions with float64
accumulation, conv2d / conv_transpose2d / pooling via the kernel backend,
softmax, and a couple of signal-specific ops (fixed-kernel 1-D convolution,
frame extraction). Storage defaults to float32; gradient-check tests switch
the default dtype to float64.
"""
from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

from ..kernels import col2im, im2col


class NumericError(ArithmeticError):
    """A forward op produced NaN/Inf."""


class ShapeError(ValueError):
    """Operand shapes incompatible with the op."""


class ContractError(ValueError):
    """An op was called outside its contract (e.g. non-scalar loss)."""


_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_FINITE_CHECKS = True


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError("dtype must be float32 or float64")
    _DEFAULT_DTYPE = dtype


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by op '{op}'")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "_op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _op: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self._backward = None
        self._parents = _parents if self.requires_grad else ()
        self._op = _op

    # ------------------------------------------------------------------ infra
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self._op!r}, grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=self.data.dtype)
        if self.grad is None:
            self.grad = g.copy() if g.base is not None or g is self.data else g
        else:
            self.grad = self.grad + g

    @staticmethod
    def _make(data, parents: Iterable["Tensor"], op: str, backward) -> "Tensor":
        parents = tuple(parents)
        req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        _check_finite(data, op)
        out = Tensor(data, requires_grad=req, _parents=parents if req else (), _op=op)
        if req:
            out._backward = backward
        return out

    def backward(self) -> None:
        if self.data.size != 1:
            raise ContractError("backward() requires a scalar loss")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # ----------------------------------------------------------- arithmetic
    @staticmethod
    def _coerce(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=_DEFAULT_DTYPE))

    def __add__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def bwd(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))

        return self._make(a.data + b.data, (a, b), "add", bwd)

    __radd__ = __add__

    def __neg__(self):
        a = self

        def bwd(g):
            a._accumulate(-g)

        return self._make(-a.data, (a,), "neg", bwd)

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __mul__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def bwd(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))

        return self._make(a.data * b.data, (a, b), "mul", bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def bwd(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return self._make(a.data / b.data, (a, b), "div", bwd)

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __pow__(self, p: float):
        a = self
        pf = float(p)

        def bwd(g):
            a._accumulate(g * pf * np.power(a.data, pf - 1.0))

        return self._make(np.power(a.data, pf), (a,), "pow", bwd)

    def square(self):
        a = self

        def bwd(g):
            a._accumulate(g * 2.0 * a.data)

        return self._make(a.data * a.data, (a,), "square", bwd)

    def sqrt(self):
        a = self
        out_data = np.sqrt(a.data)

        def bwd(g):
            a._accumulate(g * 0.5 / np.maximum(out_data, 1e-30))

        return self._make(out_data, (a,), "sqrt", bwd)

    def exp(self):
        a = self
        out_data = np.exp(a.data)

        def bwd(g):
            a._accumulate(g * out_data)

        return self._make(out_data, (a,), "exp", bwd)

    def log(self):
        a = self

        def bwd(g):
            a._accumulate(g / a.data)

        return self._make(np.log(a.data), (a,), "log", bwd)

    def abs(self):
        a = self

        def bwd(g):
            a._accumulate(g * np.sign(a.data))

        return self._make(np.abs(a.data), (a,), "abs", bwd)

    def tanh(self):
        a = self
        out_data = np.tanh(a.data)

        def bwd(g):
            a._accumulate(g * (1.0 - out_data * out_data))

        return self._make(out_data, (a,), "tanh", bwd)

    def relu(self):
        a = self
        mask = a.data > 0

        def bwd(g):
            a._accumulate(g * mask)

        return self._make(np.where(mask, a.data, 0.0), (a,), "relu", bwd)

    def leaky_relu(self, slope: float = 0.2):
        a = self
        mask = a.data > 0

        def bwd(g):
            a._accumulate(g * np.where(mask, 1.0, slope))

        return self._make(np.where(mask, a.data, slope * a.data), (a,), "leaky_relu", bwd)

    # ----------------------------------------------------------- reductions
    def sum(self, axis=None, keepdims: bool = False):
        a = self
        out_data = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)

        def bwd(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            a._accumulate(np.broadcast_to(gg, a.shape))

        return self._make(out_data, (a,), "sum", bwd)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.data.size
        else:
            axes = (axis,) if np.isscalar(axis) else tuple(axis)
            n = int(np.prod([self.data.shape[ax] for ax in axes]))
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    def _extreme(self, op: str, axis=None, keepdims: bool = False):
        a = self
        fn = np.max if op == "max" else np.min
        out_data = fn(a.data, axis=axis, keepdims=keepdims)

        def bwd(g):
            gg = g
            od = out_data
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
                od = np.expand_dims(od, axis)
            hit = a.data == od
            # ties share the gradient equally; a.e. there is a single hit
            scale = hit.sum(axis=axis, keepdims=True) if axis is not None else hit.sum()
            a._accumulate(gg * hit / np.maximum(scale, 1))

        return self._make(out_data, (a,), op, bwd)

    def max(self, axis=None, keepdims: bool = False):
        return self._extreme("max", axis, keepdims)

    def min(self, axis=None, keepdims: bool = False):
        return self._extreme("min", axis, keepdims)

    # -------------------------------------------------------------- shapes
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        orig = a.shape

        def bwd(g):
            a._accumulate(g.reshape(orig))

        return self._make(a.data.reshape(shape), (a,), "reshape", bwd)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        a = self
        inv = np.argsort(axes)

        def bwd(g):
            a._accumulate(g.transpose(inv))

        return self._make(a.data.transpose(axes), (a,), "transpose", bwd)

    def broadcast_to(self, shape):
        a = self

        def bwd(g):
            a._accumulate(_unbroadcast(g, a.shape))

        return self._make(np.broadcast_to(a.data, shape).copy(), (a,), "broadcast_to", bwd)

    def __getitem__(self, key):
        a = self

        def bwd(g):
            full = np.zeros_like(a.data)
            full[key] = g
            a._accumulate(full)

        return self._make(a.data[key], (a,), "slice", bwd)

    @staticmethod
    def concat(tensors: Sequence["Tensor"], axis: int = 0) -> "Tensor":
        parts = [Tensor._coerce(t) for t in tensors]
        sizes = [p.shape[axis] for p in parts]
        offs = np.cumsum([0] + sizes)

        def bwd(g):
            for p, lo, hi in zip(parts, offs[:-1], offs[1:]):
                if p.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(lo, hi)
                    p._accumulate(g[tuple(idx)])

        return Tensor._make(
            np.concatenate([p.data for p in parts], axis=axis), parts, "concat", bwd
        )

    # -------------------------------------------------------------- linear
    def matmul(self, other):
        other = self._coerce(other)
        a, b = self, other
        if a.data.ndim < 2 or b.data.ndim < 2:
            raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")

        def bwd(g):
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                a._accumulate(_unbroadcast(ga, a.shape))
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                b._accumulate(_unbroadcast(gb, b.shape))

        return self._make(np.matmul(a.data, b.data), (a, b), "matmul", bwd)

    __matmul__ = matmul

    def softmax(self, axis: int = -1):
        a = self
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=axis, keepdims=True)

        def bwd(g):
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            a._accumulate(out_data * (g - dot))

        return self._make(out_data, (a,), "softmax", bwd)

    # ------------------------------------------------------------- conv/pool
    def conv2d(self, weight: "Tensor", bias: "Tensor | None" = None, stride=1, padding=0):
        a, w = self, weight
        if a.data.ndim != 4 or w.data.ndim != 4:
            raise ShapeError(f"conv2d expects [B,C,H,W] x [O,C,kh,kw], got {a.shape} x {w.shape}")
        if a.shape[1] != w.shape[1]:
            raise ShapeError(f"conv2d channel mismatch: input {a.shape} vs weight {w.shape}")
        sh, sw = (stride, stride) if np.isscalar(stride) else stride
        ph, pw = (padding, padding) if np.isscalar(padding) else padding
        bsz, cin, h, wid = a.shape
        cout, _, kh, kw = w.shape
        oh = (h + 2 * ph - kh) // sh + 1
        ow = (wid + 2 * pw - kw) // sw + 1
        if oh <= 0 or ow <= 0:
            raise ShapeError(f"conv2d output empty for input {a.shape}, kernel {w.shape}")
        cols = im2col(a.data, kh, kw, sh, sw, ph, pw)  # [B, Cin*k2, L]
        w2 = w.data.reshape(cout, -1)
        out_data = np.matmul(w2, cols).reshape(bsz, cout, oh, ow)
        if bias is not None:
            out_data = out_data + bias.data.reshape(1, cout, 1, 1)
        parents = (a, w) if bias is None else (a, w, bias)

        def bwd(g):
            g2 = g.reshape(bsz, cout, -1)
            if bias is not None and bias.requires_grad:
                bias._accumulate(g2.sum(axis=(0, 2)))
            if w.requires_grad:
                gw = np.einsum("bol,bkl->ok", g2, cols, optimize=True)
                w._accumulate(gw.reshape(w.shape))
            if a.requires_grad:
                gcols = np.matmul(w2.T, g2)
                a._accumulate(col2im(np.ascontiguousarray(gcols), h, wid, kh, kw, sh, sw, ph, pw))

        return self._make(out_data, parents, "conv2d", bwd)

    def conv_transpose2d(
        self,
        weight: "Tensor",
        bias: "Tensor | None" = None,
        stride=1,
        padding=0,
        output_padding=0,
    ):
        # weight layout [Cin, Cout, kh, kw]; forward is the adjoint of conv2d
        a, w = self, weight
        if a.data.ndim != 4 or w.data.ndim != 4:
            raise ShapeError(f"conv_transpose2d expects 4-D operands, got {a.shape} x {w.shape}")
        if a.shape[1] != w.shape[0]:
            raise ShapeError(f"conv_transpose2d channel mismatch: {a.shape} vs {w.shape}")
        sh, sw = (stride, stride) if np.isscalar(stride) else stride
        ph, pw = (padding, padding) if np.isscalar(padding) else padding
        oph, opw = (output_padding, output_padding) if np.isscalar(output_padding) else output_padding
        bsz, cin, h, wid = a.shape
        _, cout, kh, kw = w.shape
        if oph >= sh or opw >= sw:
            raise ShapeError("output_padding must be < stride")
        oh = (h - 1) * sh - 2 * ph + kh + oph
        ow = (wid - 1) * sw - 2 * pw + kw + opw
        w2 = w.data.reshape(cin, -1)  # [Cin, Cout*k2]
        cols = np.matmul(w2.T, a.data.reshape(bsz, cin, -1))
        out_data = col2im(np.ascontiguousarray(cols), oh, ow, kh, kw, sh, sw, ph, pw)
        if bias is not None:
            out_data = out_data + bias.data.reshape(1, cout, 1, 1)
        parents = (a, w) if bias is None else (a, w, bias)

        def bwd(g):
            gcols = im2col(g, kh, kw, sh, sw, ph, pw)  # [B, Cout*k2, h*wid]
            if bias is not None and bias.requires_grad:
                bias._accumulate(g.sum(axis=(0, 2, 3)))
            if w.requires_grad:
                gw = np.einsum("bcl,bkl->ck", a.data.reshape(bsz, cin, -1), gcols, optimize=True)
                w._accumulate(gw.reshape(w.shape))
            if a.requires_grad:
                ga = np.matmul(w2, gcols)
                a._accumulate(ga.reshape(a.shape))

        return self._make(out_data, parents, "conv_transpose2d", bwd)

    def _pool_cols(self, k, stride, padding):
        kh, kw = (k, k) if np.isscalar(k) else k
        sh, sw = (stride, stride) if np.isscalar(stride) else stride
        ph, pw = (padding, padding) if np.isscalar(padding) else padding
        bsz, c, h, w = self.shape
        oh = (h + 2 * ph - kh) // sh + 1
        ow = (w + 2 * pw - kw) // sw + 1
        flat = self.data.reshape(bsz * c, 1, h, w)
        cols = im2col(flat, kh, kw, sh, sw, ph, pw)  # [B*C, k2, OH*OW]
        return cols, (bsz, c, h, w, kh, kw, sh, sw, ph, pw, oh, ow)

    def avg_pool2d(self, k, stride=None, padding=0):
        stride = k if stride is None else stride
        a = self
        cols, (bsz, c, h, w, kh, kw, sh, sw, ph, pw, oh, ow) = self._pool_cols(k, stride, padding)
        out_data = cols.mean(axis=1).reshape(bsz, c, oh, ow)

        def bwd(g):
            gcols = np.repeat(
                g.reshape(bsz * c, 1, oh * ow) / (kh * kw), kh * kw, axis=1
            )
            ga = col2im(np.ascontiguousarray(gcols), h, w, kh, kw, sh, sw, ph, pw)
            a._accumulate(ga.reshape(a.shape))

        return self._make(out_data, (a,), "avg_pool2d", bwd)

    def max_pool2d(self, k, stride=None, padding=0):
        stride = k if stride is None else stride
        a = self
        cols, (bsz, c, h, w, kh, kw, sh, sw, ph, pw, oh, ow) = self._pool_cols(k, stride, padding)
        arg = cols.argmax(axis=1)
        out_data = np.take_along_axis(cols, arg[:, None, :], axis=1)[:, 0, :].reshape(
            bsz, c, oh, ow
        )

        def bwd(g):
            gcols = np.zeros_like(cols)
            np.put_along_axis(gcols, arg[:, None, :], g.reshape(bsz * c, 1, oh * ow), axis=1)
            ga = col2im(gcols, h, w, kh, kw, sh, sw, ph, pw)
            a._accumulate(ga.reshape(a.shape))

        return self._make(out_data, (a,), "max_pool2d", bwd)

    # ------------------------------------------------------------- signal ops
    def conv1d_fixed(self, kernel: np.ndarray, mode: str = "full_trunc"):
        """Convolve a 1-D signal with a constant kernel.

        mode 'full_trunc': full convolution truncated to the input length.
        mode 'same': centered output (linear-phase FIR application).
        Gradients flow to the signal only.
        """
        a = self
        if a.data.ndim != 1:
            raise ShapeError(f"conv1d_fixed expects a 1-D signal, got {a.shape}")
        kernel = np.asarray(kernel, dtype=a.data.dtype)
        n, m = a.data.size, kernel.size
        full = np.convolve(a.data, kernel, mode="full")
        if mode == "full_trunc":
            start = 0
        elif mode == "same":
            start = (m - 1) // 2
        else:
            raise ValueError(f"unknown mode {mode!r}")
        out_data = full[start : start + n]

        def bwd(g):
            # adjoint: correlate the padded upstream gradient with the kernel
            gfull = np.zeros(n + m - 1, dtype=g.dtype)
            gfull[start : start + n] = g
            ga = np.correlate(gfull, kernel, mode="valid")
            a._accumulate(ga)

        return self._make(out_data, (a,), "conv1d_fixed", bwd)

    def frames1d(self, frame: int, hop: int, n_frames: int):
        """Slice a 1-D signal into [n_frames, frame] rows (zero-padded tail)."""
        a = self
        if a.data.ndim != 1:
            raise ShapeError(f"frames1d expects a 1-D signal, got {a.shape}")
        n = a.data.size
        need = (n_frames - 1) * hop + frame
        padded = np.zeros(need, dtype=a.data.dtype)
        padded[:n] = a.data
        idx = np.arange(frame)[None, :] + hop * np.arange(n_frames)[:, None]
        out_data = padded[idx]

        def bwd(g):
            gp = np.zeros(need, dtype=g.dtype)
            np.add.at(gp, idx.ravel(), g.ravel())
            a._accumulate(gp[:n])

        return self._make(out_data, (a,), "frames1d", bwd)


def as_tensor(x, requires_grad: bool = False) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=requires_grad)
