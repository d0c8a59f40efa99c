"""Dense float64 tensors with taped reverse-mode differentiation.

Every operation is a method on Graph, which records the calls it executes so
that Graph.backward can replay them in reverse order and accumulate gradients.
All arithmetic is 64-bit and deterministic: identical inputs give bitwise
identical outputs and gradients.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Tensor", "Graph", "ShapeError"]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class Tensor:
    """A dense float64 array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def clear_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        self.grad = np.array(g, dtype=np.float64) if self.grad is None else self.grad + g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


def _as_batch(a: np.ndarray) -> tuple[np.ndarray, bool]:
    """View a (C,H,W) or (T,C,H,W) array as 4-d, reporting whether it was batched."""
    if a.ndim == 3:
        return a[None], False
    if a.ndim == 4:
        return a, True
    raise ShapeError(f"expected a 3-d or 4-d operand, got shape {a.shape}")


class Graph:
    """Tape of executed operations.

    A Graph and the tensors flowing through it form one forward pass. Calling
    backward(root) walks the tape once in reverse execution order and adds
    d(root)/d(leaf) into the grad buffer of every leaf tensor reachable from
    the root. Repeated backward calls keep accumulating. Construct with
    record=False to run the same operations without keeping a tape (useful
    for feature extraction, where no gradients are needed).
    """

    def __init__(self, record: bool = True):
        self.record = record
        self._tape: list[_Node] = []

    def __len__(self) -> int:
        return len(self._tape)

    def _push(self, out: Tensor, inputs: tuple, vjp) -> Tensor:
        if self.record:
            self._tape.append(_Node(out, inputs, vjp))
        return out

    def backward(self, root: Tensor) -> None:
        """Accumulate gradients of a scalar root into every reachable leaf."""
        if root.data.shape != ():
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        pending: dict[int, tuple[Tensor, np.ndarray]] = {
            id(root): (root, np.ones((), dtype=np.float64))
        }
        for node in reversed(self._tape):
            entry = pending.pop(id(node.out), None)
            if entry is None:
                continue
            for t, g in zip(node.inputs, node.vjp(entry[1])):
                if g is None:
                    continue
                key = id(t)
                if key in pending:
                    pending[key] = (t, pending[key][1] + g)
                else:
                    pending[key] = (t, g)
        # whatever was never popped belongs to leaves (tensors no op produced)
        for t, g in pending.values():
            t.accumulate_grad(g)

    # ---- linear algebra ----

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.ndim != 2 or b.data.ndim != 2:
            raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: inner extents differ, {a.shape} vs {b.shape}")
        ad, bd = a.data, b.data
        out = Tensor(ad @ bd)

        def vjp(g):
            return g @ bd.T, ad.T @ g

        return self._push(out, (a, b), vjp)

    def matvec(self, a: Tensor, x: Tensor) -> Tensor:
        if a.data.ndim != 2 or x.data.ndim != 1:
            raise ShapeError(f"matvec needs a matrix and a vector, got {a.shape} and {x.shape}")
        if a.shape[1] != x.shape[0]:
            raise ShapeError(f"matvec: inner extents differ, {a.shape} vs {x.shape}")
        ad, xd = a.data, x.data
        out = Tensor(ad @ xd)

        def vjp(g):
            return np.outer(g, xd), ad.T @ g

        return self._push(out, (a, x), vjp)

    def transpose(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2:
            raise ShapeError(f"transpose needs a 2-d operand, got {x.shape}")
        out = Tensor(x.data.T)

        def vjp(g):
            return (g.T,)

        return self._push(out, (x,), vjp)

    # ---- convolution and pooling ----

    def conv2d(self, x: Tensor, kernel: Tensor, bias: Tensor, pad: int, stride: int) -> Tensor:
        """Cross-correlate x with kernel under zero padding.

        x is (Cin,H,W) or batched (T,Cin,H,W); kernel is (Cout,Cin,kh,kw) and
        bias is (Cout,). Output spatial extents follow the floor rule
        (H + 2*pad - kh)//stride + 1.
        """
        if kernel.data.ndim != 4:
            raise ShapeError(f"conv2d kernel must be 4-d, got {kernel.shape}")
        if bias.data.ndim != 1 or bias.shape[0] != kernel.shape[0]:
            raise ShapeError(f"conv2d bias shape {bias.shape} does not match kernel {kernel.shape}")
        if pad < 0 or stride < 1:
            raise ShapeError(f"conv2d needs pad >= 0 and stride >= 1, got pad={pad} stride={stride}")
        xb, batched = _as_batch(x.data)
        t_n, cin, h, w = xb.shape
        cout, kcin, kh, kw = kernel.shape
        if kcin != cin:
            raise ShapeError(f"conv2d: input has {cin} channels but kernel expects {kcin}")
        hp, wp = h + 2 * pad, w + 2 * pad
        if kh > hp or kw > wp:
            raise ShapeError(
                f"conv2d: kernel {kh}x{kw} does not fit input {h}x{w} padded by {pad}"
            )
        ho = (hp - kh) // stride + 1
        wo = (wp - kw) // stride + 1

        xp = np.zeros((t_n, cin, hp, wp))
        xp[:, :, pad:pad + h, pad:pad + w] = xb
        cols = np.empty((t_n, cin, kh, kw, ho, wo))
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j] = xp[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride]
        cols2 = cols.reshape(t_n, cin * kh * kw, ho * wo)
        k2 = kernel.data.reshape(cout, -1)
        out_d = np.matmul(k2, cols2) + bias.data[:, None]
        out_d = out_d.reshape(t_n, cout, ho, wo)
        out = Tensor(out_d if batched else out_d[0])
        kshape = kernel.shape
        xp_shape = xp.shape

        def vjp(g):
            g4 = g if batched else g[None]
            g2 = g4.reshape(t_n, cout, ho * wo)
            dbias = g2.sum(axis=(0, 2))
            dkernel = np.matmul(g2, cols2.transpose(0, 2, 1)).sum(axis=0).reshape(kshape)
            dcols2 = np.matmul(k2.T, g2)
            dcols = dcols2.reshape(t_n, cin, kh, kw, ho, wo)
            dxp = np.zeros(xp_shape)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += dcols[:, :, i, j]
            dx = dxp[:, :, pad:pad + h, pad:pad + w]
            return dx if batched else dx[0], dkernel, dbias

        return self._push(out, (x, kernel, bias), vjp)

    def maxpool2d(self, x: Tensor, window: tuple[int, int], stride: tuple[int, int]) -> Tensor:
        """Max over sliding windows; ties go to the first cell in row-major scan."""
        wh, ww = window
        sh, sw = stride
        if min(wh, ww) < 1 or min(sh, sw) < 1:
            raise ShapeError(f"maxpool2d needs positive window and stride, got {window}, {stride}")
        xb, batched = _as_batch(x.data)
        t_n, c, h, w = xb.shape
        if wh > h or ww > w:
            raise ShapeError(f"maxpool2d window {window} larger than input {h}x{w}")
        ho = (h - wh) // sh + 1
        wo = (w - ww) // sw + 1
        rows = np.arange(ho) * sh
        cols = np.arange(wo) * sw
        best = np.full((t_n, c, ho, wo), -np.inf)
        best_pos = np.zeros((t_n, c, ho, wo), dtype=np.int64)
        for i in range(wh):
            for j in range(ww):
                cand = xb[:, :, i:i + ho * sh:sh, j:j + wo * sw:sw]
                pos = (rows[:, None] + i) * w + (cols[None, :] + j)
                better = cand > best
                best = np.where(better, cand, best)
                best_pos = np.where(better, pos[None, None], best_pos)
        out = Tensor(best if batched else best[0])

        def vjp(g):
            g4 = g if batched else g[None]
            dx = np.zeros((t_n * c, h * w))
            rows_idx = np.arange(t_n * c)[:, None]
            np.add.at(dx, (rows_idx, best_pos.reshape(t_n * c, -1)), g4.reshape(t_n * c, -1))
            dx = dx.reshape(t_n, c, h, w)
            return (dx if batched else dx[0],)

        return self._push(out, (x,), vjp)

    def region_maxpool(self, x: Tensor, regions: list[tuple[int, int, int, int]]) -> Tensor:
        """Max over explicit rectangular regions (r0, r1, c0, c1), half-open.

        For (C,H,W) input the output is a vector of length C*len(regions)
        laid out channel-major: all regions of channel 0, then channel 1, and
        so on. Batched (T,C,H,W) input yields a (T, C*len(regions)) matrix.
        """
        xb, batched = _as_batch(x.data)
        t_n, c, h, w = xb.shape
        n_r = len(regions)
        if n_r == 0:
            raise ShapeError("region_maxpool needs at least one region")
        vals = np.empty((t_n, c, n_r))
        pos = np.empty((t_n, c, n_r), dtype=np.int64)
        for r, (r0, r1, c0, c1) in enumerate(regions):
            if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
                raise ShapeError(f"region {(r0, r1, c0, c1)} out of bounds for {h}x{w} input")
            block = xb[:, :, r0:r1, c0:c1].reshape(t_n, c, -1)
            am = block.argmax(axis=2)
            vals[:, :, r] = np.take_along_axis(block, am[:, :, None], axis=2)[:, :, 0]
            pos[:, :, r] = (am // (c1 - c0) + r0) * w + (am % (c1 - c0) + c0)
        out_d = vals.reshape(t_n, c * n_r)
        out = Tensor(out_d if batched else out_d[0])

        def vjp(g):
            g2 = (g if batched else g[None]).reshape(t_n * c, n_r)
            dx = np.zeros((t_n * c, h * w))
            rows_idx = np.arange(t_n * c)[:, None]
            np.add.at(dx, (rows_idx, pos.reshape(t_n * c, n_r)), g2)
            dx = dx.reshape(t_n, c, h, w)
            return (dx if batched else dx[0],)

        return self._push(out, (x,), vjp)

    # ---- elementwise ----

    def tanh(self, x: Tensor) -> Tensor:
        out = Tensor(np.tanh(x.data))
        od = out.data

        def vjp(g):
            return (g * (1.0 - od * od),)

        return self._push(out, (x,), vjp)

    def relu(self, x: Tensor) -> Tensor:
        """max(0, x); the subgradient at exactly 0 is taken as 0."""
        xd = x.data
        out = Tensor(np.maximum(xd, 0.0))

        def vjp(g):
            return (g * (xd > 0.0),)

        return self._push(out, (x,), vjp)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeError(f"add: shapes differ, {a.shape} vs {b.shape}")
        out = Tensor(a.data + b.data)

        def vjp(g):
            return g, g

        return self._push(out, (a, b), vjp)

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeError(f"sub: shapes differ, {a.shape} vs {b.shape}")
        out = Tensor(a.data - b.data)

        def vjp(g):
            return g, -g

        return self._push(out, (a, b), vjp)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeError(f"mul: shapes differ, {a.shape} vs {b.shape}")
        ad, bd = a.data, b.data
        out = Tensor(ad * bd)

        def vjp(g):
            return g * bd, g * ad

        return self._push(out, (a, b), vjp)

    def scale(self, x: Tensor, c: float) -> Tensor:
        c = float(c)
        out = Tensor(x.data * c)

        def vjp(g):
            return (g * c,)

        return self._push(out, (x,), vjp)

    # ---- shape plumbing ----

    def reshape(self, x: Tensor, shape) -> Tensor:
        old = x.data.shape
        out = Tensor(x.data.reshape(shape))

        def vjp(g):
            return (g.reshape(old),)

        return self._push(out, (x,), vjp)

    def concat(self, xs: list[Tensor], axis: int = 0) -> Tensor:
        if not xs:
            raise ShapeError("concat needs at least one tensor")
        out = Tensor(np.concatenate([x.data for x in xs], axis=axis))
        sizes = [x.data.shape[axis] for x in xs]
        splits = np.cumsum(sizes)[:-1]

        def vjp(g):
            return tuple(np.split(g, splits, axis=axis))

        return self._push(out, tuple(xs), vjp)

    def stack(self, xs: list[Tensor]) -> Tensor:
        """Stack equal-length vectors into a matrix, one vector per row."""
        if not xs:
            raise ShapeError("stack needs at least one tensor")
        for x in xs:
            if x.data.ndim != 1 or x.shape != xs[0].shape:
                raise ShapeError(f"stack needs matching vectors, got {[x.shape for x in xs]}")
        out = Tensor(np.stack([x.data for x in xs]))

        def vjp(g):
            return tuple(g[i] for i in range(len(xs)))

        return self._push(out, tuple(xs), vjp)

    def take_row(self, x: Tensor, i: int) -> Tensor:
        if x.data.ndim != 2:
            raise ShapeError(f"take_row needs a matrix, got {x.shape}")
        if not 0 <= i < x.shape[0]:
            raise ShapeError(f"row {i} out of range for shape {x.shape}")
        xshape = x.data.shape
        out = Tensor(x.data[i])

        def vjp(g):
            dx = np.zeros(xshape)
            dx[i] = g
            return (dx,)

        return self._push(out, (x,), vjp)

    # ---- reductions ----

    def max_along(self, x: Tensor, axis: int) -> Tensor:
        """Max over one axis of a matrix; ties keep the first occurrence."""
        if x.data.ndim != 2:
            raise ShapeError(f"max_along needs a matrix, got {x.shape}")
        if axis not in (0, 1):
            raise ShapeError(f"max_along: axis must be 0 or 1, got {axis}")
        xd = x.data
        am = xd.argmax(axis=axis)
        out = Tensor(np.take_along_axis(xd, np.expand_dims(am, axis), axis).squeeze(axis))
        xshape = xd.shape

        def vjp(g):
            dx = np.zeros(xshape)
            np.put_along_axis(dx, np.expand_dims(am, axis), np.expand_dims(g, axis), axis)
            return (dx,)

        return self._push(out, (x,), vjp)

    def sum_along(self, x: Tensor, axis: int) -> Tensor:
        if x.data.ndim != 2:
            raise ShapeError(f"sum_along needs a matrix, got {x.shape}")
        if axis not in (0, 1):
            raise ShapeError(f"sum_along: axis must be 0 or 1, got {axis}")
        out = Tensor(x.data.sum(axis=axis))
        n = x.data.shape[axis]

        def vjp(g):
            return (np.repeat(np.expand_dims(g, axis), n, axis=axis),)

        return self._push(out, (x,), vjp)

    def sum_all(self, x: Tensor) -> Tensor:
        out = Tensor(x.data.sum())
        xshape = x.data.shape

        def vjp(g):
            return (np.full(xshape, g),)

        return self._push(out, (x,), vjp)

    # ---- probability ----

    def softmax(self, x: Tensor) -> Tensor:
        """Softmax of a vector, computed with the max subtracted for stability."""
        if x.data.ndim != 1 or x.size < 1:
            raise ShapeError(f"softmax needs a non-empty vector, got shape {x.shape}")
        z = np.exp(x.data - x.data.max())
        y = z / z.sum()
        out = Tensor(y)

        def vjp(g):
            return (y * (g - np.dot(g, y)),)

        return self._push(out, (x,), vjp)

    def cross_entropy(self, logits: Tensor, label: int) -> Tensor:
        """Negative log softmax probability of the labelled class."""
        if logits.data.ndim != 1 or logits.size < 1:
            raise ShapeError(f"cross_entropy needs a non-empty vector, got {logits.shape}")
        if not 0 <= label < logits.size:
            raise ValueError(f"label {label} out of range for {logits.size} classes")
        xd = logits.data
        m = xd.max()
        lse = m + np.log(np.exp(xd - m).sum())
        out = Tensor(np.asarray(lse - xd[label]))
        probs = np.exp(xd - lse)

        def vjp(g):
            d = probs.copy()
            d[label] -= 1.0
            return (g * d,)

        return self._push(out, (logits,), vjp)
