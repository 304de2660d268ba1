"""Dense float64 tensors with taped reverse-mode differentiation.

Forward evaluation optionally records onto a :class:`Tape`; replaying the
tape in reverse accumulates gradients into :class:`Parameter` buffers.
Running an operation whose inputs carry no tape performs a plain numpy
forward pass with zero recording overhead, which is how evaluation-mode
prediction works.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible with a primitive's contract."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where the contract requires finite ones."""


def _as_f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


class Parameter:
    """Named trainable (or frozen) tensor with a persistent gradient buffer.

    ``frozen_rows`` marks rows (e.g. a PAD embedding) that optimizers must
    never update; gradients still accumulate there so finite-difference
    checks stay honest.
    """

    def __init__(self, name: str, value, trainable: bool = True,
                 frozen_rows: Sequence[int] = ()):
        self.name = name
        self.value = _as_f64(value)
        self.gradient = np.zeros_like(self.value)
        self.trainable = trainable
        self.frozen_rows = tuple(frozen_rows)

    def zero_grad(self) -> None:
        self.gradient[...] = 0.0

    def __repr__(self) -> str:  # pragma: no cover
        return f"Parameter({self.name!r}, shape={self.value.shape}, trainable={self.trainable})"


class Tensor:
    """Value node. ``tape`` is None for constants (no gradient tracking)."""

    __slots__ = ("data", "tape")

    def __init__(self, data, tape: "Tape | None" = None):
        self.data = _as_f64(data)
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.data.shape}, taped={self.tape is not None})"


class Tape:
    """Ordered record of primitive applications from one forward evaluation."""

    def __init__(self) -> None:
        # entry: (outputs tuple, vjp(gradients tuple, accumulate fn))
        self._entries: list[tuple[tuple[Tensor, ...], Callable]] = []
        self._leaves: list[tuple[Tensor, Parameter]] = []
        self._leaf_cache: dict[int, Tensor] = {}

    def param(self, p: Parameter) -> Tensor:
        """Leaf tensor bound to ``p``; backward flushes into ``p.gradient``."""
        leaf = self._leaf_cache.get(id(p))
        if leaf is None:
            leaf = Tensor(p.value, tape=self)
            self._leaf_cache[id(p)] = leaf
            self._leaves.append((leaf, p))
        return leaf

    def input(self, data) -> Tensor:
        """Leaf tensor for a non-parameter input whose gradient is wanted."""
        return Tensor(data, tape=self)

    def _record(self, outputs: tuple[Tensor, ...], vjp: Callable) -> None:
        self._entries.append((outputs, vjp))

    def __len__(self) -> int:
        return len(self._entries)


def constant(data) -> Tensor:
    return Tensor(data, tape=None)


def use_param(tape: Tape | None, p: Parameter) -> Tensor:
    """Parameter as a taped leaf, or as a constant when evaluating untaped."""
    return tape.param(p) if tape is not None else Tensor(p.value, tape=None)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, tape=None)


def _join_tape(name: str, *tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError(f"{name}: operands recorded on different tapes")
    return tape


def evaluate(fn: Callable[["Tape"], Tensor]) -> tuple[Tensor, Tape]:
    """Run ``fn`` under a fresh tape and return (output, tape)."""
    tape = Tape()
    out = fn(tape)
    return out, tape


def backward(tape: Tape, output: Tensor, output_gradient=None) -> dict[Tensor, np.ndarray]:
    """Replay ``tape`` in reverse, accumulating into Parameter gradients.

    Returns the per-tensor gradient map (inputs included). Each call adds
    its contribution to Parameter buffers, so replaying twice doubles them.
    """
    if output.tape is not tape:
        raise ValueError("backward: output was not produced on this tape")
    if output_gradient is None:
        if output.data.ndim != 0:
            raise ValueError("backward: non-scalar output needs an explicit output_gradient")
        seed = np.ones((), dtype=np.float64)
    else:
        seed = _as_f64(output_gradient)
        if seed.shape != output.data.shape:
            raise ShapeError(f"backward: output_gradient shape {seed.shape} "
                             f"!= output shape {output.data.shape}")

    grads: dict[Tensor, np.ndarray] = {output: seed.copy()}

    def acc(t: Tensor, g: np.ndarray) -> None:
        if t.tape is None:
            return
        cur = grads.get(t)
        if cur is None:
            grads[t] = np.array(g, dtype=np.float64, copy=True)
        else:
            cur += g

    for outputs, vjp in reversed(tape._entries):
        gs = tuple(grads.get(o) for o in outputs)
        if all(g is None for g in gs):
            continue
        vjp(gs, acc)

    for leaf, p in tape._leaves:
        g = grads.get(leaf)
        if g is not None:
            p.gradient += g
    return grads


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def _unary(name: str, x: Tensor, out_data: np.ndarray,
           vjp_in: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    tape = _join_tape(name, x)
    out = Tensor(out_data, tape)
    if tape is not None:
        def vjp(gs, acc):
            acc(x, vjp_in(gs[0]))
        tape._record((out,), vjp)
    return out


def add(a, b) -> Tensor:
    """Elementwise add; the one allowed broadcast is a 1-d bias onto 2-d rows."""
    a, b = _wrap(a), _wrap(b)
    bias = False
    if a.data.shape != b.data.shape:
        if a.data.ndim == 2 and b.data.ndim == 1 and a.data.shape[1] == b.data.shape[0]:
            bias = True
        else:
            raise ShapeError(f"add: {a.data.shape} vs {b.data.shape}")
    tape = _join_tape("add", a, b)
    out = Tensor(a.data + b.data, tape)
    if tape is not None:
        def vjp(gs, acc):
            g = gs[0]
            acc(a, g)
            acc(b, g.sum(axis=0) if bias else g)
        tape._record((out,), vjp)
    return out


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub: {a.data.shape} vs {b.data.shape}")
    tape = _join_tape("sub", a, b)
    out = Tensor(a.data - b.data, tape)
    if tape is not None:
        def vjp(gs, acc):
            acc(a, gs[0])
            acc(b, -gs[0])
        tape._record((out,), vjp)
    return out


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: {a.data.shape} vs {b.data.shape}")
    tape = _join_tape("mul", a, b)
    out = Tensor(a.data * b.data, tape)
    if tape is not None:
        def vjp(gs, acc):
            acc(a, gs[0] * b.data)
            acc(b, gs[0] * a.data)
        tape._record((out,), vjp)
    return out


def scale(x, c: float) -> Tensor:
    x = _wrap(x)
    c = float(c)
    return _unary("scale", x, x.data * c, lambda g: g * c)


def scalar_mul(x, s) -> Tensor:
    """Multiply tensor ``x`` by a scalar (0-d) tensor ``s``."""
    x, s = _wrap(x), _wrap(s)
    if s.data.ndim != 0:
        raise ShapeError(f"scalar_mul: scalar must be 0-d, got {s.data.shape}")
    tape = _join_tape("scalar_mul", x, s)
    out = Tensor(x.data * s.data, tape)
    if tape is not None:
        def vjp(gs, acc):
            acc(x, gs[0] * s.data)
            acc(s, np.asarray((gs[0] * x.data).sum()))
        tape._record((out,), vjp)
    return out


def linear(x, w, b=None) -> Tensor:
    """Affine map ``x @ w + b`` with x (n×d), w (d×m), b (m,)."""
    x, w = _wrap(x), _wrap(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"linear: x {x.data.shape} @ w {w.data.shape}")
    if b is None:
        tape = _join_tape("linear", x, w)
        out = Tensor(x.data @ w.data, tape)
        if tape is not None:
            def vjp(gs, acc):
                g = gs[0]
                acc(x, g @ w.data.T)
                acc(w, x.data.T @ g)
            tape._record((out,), vjp)
        return out
    bt = _wrap(b)
    if bt.data.ndim != 1 or bt.data.shape[0] != w.data.shape[1]:
        raise ShapeError(f"linear: bias {bt.data.shape} vs w {w.data.shape}")
    tape = _join_tape("linear", x, w, bt)
    out = Tensor(x.data @ w.data + bt.data, tape)
    if tape is not None:
        def vjp(gs, acc):
            g = gs[0]
            acc(x, g @ w.data.T)
            acc(w, x.data.T @ g)
            acc(bt, g.sum(axis=0))
        tape._record((out,), vjp)
    return out


def embedding(table, ids) -> Tensor:
    """Row gather: table (V×d), ids int sequence (n,) → (n×d)."""
    table = _wrap(table)
    idx = np.asarray(ids, dtype=np.intp)
    if table.data.ndim != 2 or idx.ndim != 1:
        raise ShapeError(f"embedding: table {table.data.shape}, ids {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise IndexError("embedding: id out of range")
    tape = _join_tape("embedding", table)
    out = Tensor(table.data[idx], tape)
    if tape is not None:
        def vjp(gs, acc):
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx, gs[0])
            acc(table, gt)
        tape._record((out,), vjp)
    return out


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [_wrap(p) for p in parts]
    if not parts:
        raise ShapeError("concat: no operands")
    try:
        out_data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    tape = _join_tape("concat", *parts)
    out = Tensor(out_data, tape)
    if tape is not None:
        sizes = [p.data.shape[axis] for p in parts]
        def vjp(gs, acc):
            offset = 0
            for p, size in zip(parts, sizes):
                sl = [slice(None)] * gs[0].ndim
                sl[axis] = slice(offset, offset + size)
                acc(p, gs[0][tuple(sl)])
                offset += size
        tape._record((out,), vjp)
    return out


def slice_rows(x, start: int, stop: int) -> Tensor:
    x = _wrap(x)
    if x.data.ndim < 1 or not (0 <= start < stop <= x.data.shape[0]):
        raise ShapeError(f"slice_rows: [{start}:{stop}] of {x.data.shape}")
    tape = _join_tape("slice_rows", x)
    out = Tensor(x.data[start:stop].copy(), tape)
    if tape is not None:
        def vjp(gs, acc):
            gx = np.zeros_like(x.data)
            gx[start:stop] = gs[0]
            acc(x, gx)
        tape._record((out,), vjp)
    return out


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _wrap(x)
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != x.data.size:
        raise ShapeError(f"reshape: {x.data.shape} -> {shape}")
    tape = _join_tape("reshape", x)
    out = Tensor(x.data.reshape(shape).copy(), tape)
    if tape is not None:
        def vjp(gs, acc):
            acc(x, gs[0].reshape(x.data.shape))
        tape._record((out,), vjp)
    return out


def index1d(x, i: int) -> Tensor:
    """x (n,) → scalar x[i]."""
    x = _wrap(x)
    if x.data.ndim != 1 or not (0 <= i < x.data.shape[0]):
        raise ShapeError(f"index1d: index {i} of {x.data.shape}")
    tape = _join_tape("index1d", x)
    out = Tensor(x.data[i], tape)
    if tape is not None:
        def vjp(gs, acc):
            gx = np.zeros_like(x.data)
            gx[i] = gs[0]
            acc(x, gx)
        tape._record((out,), vjp)
    return out


def broadcast_col(x, n: int) -> Tensor:
    """x (k,) → (k×n) by repeating as columns."""
    x = _wrap(x)
    if x.data.ndim != 1:
        raise ShapeError(f"broadcast_col: need 1-d, got {x.data.shape}")
    tape = _join_tape("broadcast_col", x)
    out = Tensor(np.repeat(x.data[:, None], n, axis=1), tape)
    if tape is not None:
        def vjp(gs, acc):
            acc(x, gs[0].sum(axis=1))
        tape._record((out,), vjp)
    return out


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def tanh(x) -> Tensor:
    x = _wrap(x)
    t = np.tanh(x.data)
    return _unary("tanh", x, t, lambda g: g * (1.0 - t * t))


def sigmoid(x) -> Tensor:
    x = _wrap(x)
    s = _stable_sigmoid(x.data)
    return _unary("sigmoid", x, s, lambda g: g * s * (1.0 - s))


def softmax(x, axis: int = -1) -> Tensor:
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    def vjp_in(g):
        return s * (g - (g * s).sum(axis=axis, keepdims=True))
    return _unary("softmax", x, s, vjp_in)


def logsumexp(x, axis: int | None = None) -> Tensor:
    """Overflow-safe log-sum-exp over one axis, or over everything (axis=None)."""
    x = _wrap(x)
    if axis is None:
        m = x.data.max()
        out_data = np.asarray(m + np.log(np.exp(x.data - m).sum()))
        sm = np.exp(x.data - out_data)
        return _unary("logsumexp", x, out_data, lambda g: g * sm)
    m = x.data.max(axis=axis, keepdims=True)
    out_data = (m + np.log(np.exp(x.data - m).sum(axis=axis, keepdims=True))).squeeze(axis)
    sm = np.exp(x.data - np.expand_dims(out_data, axis))
    return _unary("logsumexp", x, out_data,
                  lambda g: np.expand_dims(g, axis) * sm)


def sum_all(x) -> Tensor:
    x = _wrap(x)
    return _unary("sum_all", x, np.asarray(x.data.sum()),
                  lambda g: np.full_like(x.data, g))


def mean_all(x) -> Tensor:
    x = _wrap(x)
    n = x.data.size
    return _unary("mean_all", x, np.asarray(x.data.mean()),
                  lambda g: np.full_like(x.data, g / n))


def sum_axis(x, axis: int) -> Tensor:
    x = _wrap(x)
    out_data = x.data.sum(axis=axis)
    def vjp_in(g):
        return np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy()
    return _unary("sum_axis", x, out_data, vjp_in)


def masked_sum(x, mask) -> Tensor:
    """Sum of entries where the 0/1 ``mask`` (plain array) is set."""
    x = _wrap(x)
    m = _as_f64(mask)
    if m.shape != x.data.shape:
        raise ShapeError(f"masked_sum: mask {m.shape} vs x {x.data.shape}")
    return _unary("masked_sum", x, np.asarray((x.data * m).sum()),
                  lambda g: g * m)


def masked_mean(x, mask) -> Tensor:
    x = _wrap(x)
    m = _as_f64(mask)
    if m.shape != x.data.shape:
        raise ShapeError(f"masked_mean: mask {m.shape} vs x {x.data.shape}")
    n = m.sum()
    if n == 0:
        raise NumericError("masked_mean: empty mask")
    return _unary("masked_mean", x, np.asarray((x.data * m).sum() / n),
                  lambda g: g * m / n)


def dropout(x, mask, rate: float) -> Tensor:
    """Inverted dropout with a caller-supplied 0/1 keep mask."""
    x = _wrap(x)
    m = _as_f64(mask)
    if m.shape != x.data.shape:
        raise ShapeError(f"dropout: mask {m.shape} vs x {x.data.shape}")
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate {rate} outside [0, 1)")
    keep = m / (1.0 - rate)
    return _unary("dropout", x, x.data * keep, lambda g: g * keep)


def conv1d(x, filters, bias) -> Tensor:
    """Valid 1-d convolution over time: x (T×C), filters (K×W×C) → (T−W+1 × K)."""
    x, filters, bias = _wrap(x), _wrap(filters), _wrap(bias)
    if x.data.ndim != 2 or filters.data.ndim != 3:
        raise ShapeError(f"conv1d: x {x.data.shape}, filters {filters.data.shape}")
    T, C = x.data.shape
    K, W, Cf = filters.data.shape
    if C != Cf or bias.data.shape != (K,):
        raise ShapeError(f"conv1d: channels {C} vs {Cf}, bias {bias.data.shape}")
    if T < W:
        raise ShapeError(f"conv1d: sequence length {T} shorter than filter width {W}")
    windows = np.lib.stride_tricks.sliding_window_view(x.data, W, axis=0)  # (T', C, W)
    out_data = np.einsum("tcw,kwc->tk", windows, filters.data) + bias.data
    tape = _join_tape("conv1d", x, filters, bias)
    out = Tensor(out_data, tape)
    if tape is not None:
        def vjp(gs, acc):
            g = gs[0]  # (T', K)
            gx = np.zeros_like(x.data)
            for w in range(W):
                gx[w:w + g.shape[0]] += g @ filters.data[:, w, :]
            acc(x, gx)
            acc(filters, np.einsum("tcw,tk->kwc", windows, g))
            acc(bias, g.sum(axis=0))
        tape._record((out,), vjp)
    return out


def max_over_time(x) -> Tensor:
    """Column-wise max of x (T×K) → (K,); ties take the earliest row."""
    x = _wrap(x)
    if x.data.ndim != 2:
        raise ShapeError(f"max_over_time: need 2-d, got {x.data.shape}")
    idx = np.argmax(x.data, axis=0)
    cols = np.arange(x.data.shape[1])
    out_data = x.data[idx, cols]
    def vjp_in(g):
        gx = np.zeros_like(x.data)
        gx[idx, cols] = g
        return gx
    return _unary("max_over_time", x, out_data, vjp_in)


def lstm_step(x, h, c, wx, wh, b) -> tuple[Tensor, Tensor]:
    """One LSTM cell step with the standard i,f,g,o gating.

    x (1×D), h (1×H), c (1×H); wx (D×4H), wh (H×4H), b (4H,) with gate
    blocks ordered input, forget, cell, output. Returns (h', c').
    """
    x, h, c, wx, wh, b = map(_wrap, (x, h, c, wx, wh, b))
    D = x.data.shape[1] if x.data.ndim == 2 else -1
    H = h.data.shape[1] if h.data.ndim == 2 else -1
    if (x.data.ndim != 2 or h.data.shape != (1, H) or c.data.shape != (1, H)
            or wx.data.shape != (D, 4 * H) or wh.data.shape != (H, 4 * H)
            or b.data.shape != (4 * H,)):
        raise ShapeError(f"lstm_step: x {x.data.shape}, h {h.data.shape}, c {c.data.shape}, "
                         f"wx {wx.data.shape}, wh {wh.data.shape}, b {b.data.shape}")
    z = x.data @ wx.data + h.data @ wh.data + b.data
    zi, zf, zg, zo = z[:, :H], z[:, H:2 * H], z[:, 2 * H:3 * H], z[:, 3 * H:]
    gi = _stable_sigmoid(zi)
    gf = _stable_sigmoid(zf)
    gg = np.tanh(zg)
    go = _stable_sigmoid(zo)
    c_new = gf * c.data + gi * gg
    tc = np.tanh(c_new)
    h_new = go * tc

    tape = _join_tape("lstm_step", x, h, c, wx, wh, b)
    h_out = Tensor(h_new, tape)
    c_out = Tensor(c_new, tape)
    if tape is not None:
        def vjp(gs, acc):
            gh = gs[0] if gs[0] is not None else np.zeros_like(h_new)
            gc = gs[1] if gs[1] is not None else np.zeros_like(c_new)
            dc_total = gc + gh * go * (1.0 - tc * tc)
            dz = np.concatenate([
                dc_total * gg * gi * (1.0 - gi),
                dc_total * c.data * gf * (1.0 - gf),
                dc_total * gi * (1.0 - gg * gg),
                gh * tc * go * (1.0 - go),
            ], axis=1)
            acc(x, dz @ wx.data.T)
            acc(h, dz @ wh.data.T)
            acc(c, dc_total * gf)
            acc(wx, x.data.T @ dz)
            acc(wh, h.data.T @ dz)
            acc(b, dz[0])
        tape._record((h_out, c_out), vjp)
    return h_out, c_out


def lstm_scan(xs, wx, wh, b, reverse: bool = False) -> Tensor:
    """Run an LSTM over the rows of xs (T×D); returns hidden states (T×H).

    Initial h and c are zeros. With ``reverse`` the rows are processed last
    to first and the output is re-aligned to input positions.
    """
    xs, wx, wh, b = map(_wrap, (xs, wx, wh, b))
    if xs.data.ndim != 2:
        raise ShapeError(f"lstm_scan: need 2-d input, got {xs.data.shape}")
    T = xs.data.shape[0]
    H = wh.data.shape[0]
    tape = _join_tape("lstm_scan", xs, wx, wh, b)
    h = Tensor(np.zeros((1, H)), tape)
    c = Tensor(np.zeros((1, H)), tape)
    order = range(T - 1, -1, -1) if reverse else range(T)
    outs: list[Tensor | None] = [None] * T
    for t in order:
        x_t = slice_rows(xs, t, t + 1)
        h, c = lstm_step(x_t, h, c, wx, wh, b)
        outs[t] = h
    return concat([o for o in outs], axis=0)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def grad_check(fn: Callable[[Tape], Tensor], params: Iterable[Parameter],
               epsilon: float = 1e-5) -> float:
    """Max relative error between taped gradients and central differences.

    ``fn`` must build a deterministic scalar loss from the current parameter
    values (any dropout masks fixed). Relative error per coordinate is
    |a − n| / max(|a|, |n|, 1e-12); the maximum over all coordinates of all
    ``params`` is returned.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    out, tape = evaluate(fn)
    if out.data.ndim != 0:
        raise ValueError("grad_check: fn must return a scalar")
    if not np.isfinite(out.data):
        raise NumericError("grad_check: non-finite loss")
    backward(tape, out)
    analytic = {id(p): p.gradient.copy() for p in params}

    max_rel = 0.0
    for p in params:
        flat = p.value.reshape(-1)
        a_flat = analytic[id(p)].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = float(evaluate(fn)[0].data)
            flat[i] = orig - epsilon
            f_minus = float(evaluate(fn)[0].data)
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(f"grad_check: non-finite value perturbing {p.name}[{i}]")
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            a = a_flat[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            if rel > max_rel:
                max_rel = rel
    return max_rel
