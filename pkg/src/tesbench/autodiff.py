"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything the classifiers, the perturbation generator, and the attack
losses need lives here: affine / conv2d / relu / tanh / softmax layers,
cross-entropy, KL divergence, the two margin losses, and an exact
infinity-ball clip. Forward results are plain computations on numpy
arrays; when a Tape is active, every op whose inputs require gradients
records a backward rule, and ``Tape.backward`` replays the records in
reverse execution order.

Gradients accumulate into ``Tensor.grad`` until reset; training loops in
this package always reset between steps.
"""

import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


class Tensor:
    """A float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


_ACTIVE_TAPE = None


class Tape:
    """Ordered record of differentiable ops, replayed in reverse by backward().

    Use as a context manager around the forward pass. Calling backward twice
    without resetting gradients accumulates them (documented behaviour; all
    callers here reset).
    """

    def __init__(self):
        self._records = []  # (out, inputs, backward_fn)

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("nested tapes are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def backward(self, loss):
        """Populate grads of every requires_grad leaf reachable from loss."""
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            raise ValueError("backward expects a scalar Tensor loss")
        loss.grad = np.ones_like(loss.data)
        produced = set()
        for out, _, _ in self._records:
            produced.add(id(out))
        for out, inputs, backward_fn in reversed(self._records):
            if out.grad is None:
                continue
            grads = backward_fn(out.grad)
            for inp, g in zip(inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                # rules never mutate grad buffers, so rebinding is safe
                inp.grad = g if inp.grad is None else inp.grad + g
        # leaves that never influenced the loss still get a (zero) grad
        for _, inputs, _ in self._records:
            for inp in inputs:
                if inp.requires_grad and inp.grad is None and id(inp) not in produced:
                    inp.grad = np.zeros_like(inp.data)


def backward(loss):
    """Run backward on the currently active tape."""
    if _ACTIVE_TAPE is None:
        raise RuntimeError("backward() outside of an active Tape")
    _ACTIVE_TAPE.backward(loss)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out, inputs, backward_fn):
    if _ACTIVE_TAPE is not None and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        _ACTIVE_TAPE._records.append((out, inputs, backward_fn))
    return out


def _unbroadcast(grad, shape):
    """Sum grad down to shape (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / linear ops


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)
    return _record(
        out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))
    )


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)
    return _record(
        out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape))
    )


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)),
    )


def scale(a, c):
    """a * c for a python scalar c."""
    a = _as_tensor(a)
    c = float(c)
    out = Tensor(a.data * c)
    return _record(out, (a,), lambda g: (g * c,))


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes do not conform: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    return _record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def affine(x, weight, bias):
    """x[batch,in] @ weight[in,out] + bias[out]."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"affine input {x.shape} does not conform with weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"affine bias {bias.shape} does not match weight {weight.shape}")
    out = Tensor(x.data @ weight.data + bias.data)
    return _record(
        out, (x, weight, bias), lambda g: (g @ weight.data.T, x.data.T @ g, g.sum(axis=0))
    )


def conv2d(x, kernel, bias, stride=1, padding=0):
    """Cross-correlation of x[B,Cin,H,W] with kernel[Cout,Cin,kh,kw] plus bias."""
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv2d input {x.shape} does not conform with kernel {kernel.shape}")
    if bias.shape != (kernel.shape[0],):
        raise ShapeError(f"conv2d bias {bias.shape} does not match kernel {kernel.shape}")
    kernels.conv_output_hw(x.shape, kernel.shape, stride, padding)
    raw = kernels.conv2d_forward(x.data, kernel.data, stride, padding)
    out = Tensor(raw + bias.data[None, :, None, None])

    def bwd(g):
        return (
            kernels.conv2d_backward_input(g, kernel.data, x.shape, stride, padding),
            kernels.conv2d_backward_kernel(g, x.data, kernel.shape, stride, padding),
            g.sum(axis=(0, 2, 3)),
        )

    return _record(out, (x, kernel, bias), bwd)


def relu(x):
    x = _as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0))
    mask = x.data > 0.0  # subgradient at 0 is 0
    return _record(out, (x,), lambda g: (g * mask,))


def tanh_op(x):
    x = _as_tensor(x)
    t = np.tanh(x.data)
    out = Tensor(t)
    return _record(out, (x,), lambda g: (g * (1.0 - t * t),))


def reshape(x, shape):
    x = _as_tensor(x)
    out = Tensor(x.data.reshape(shape))
    return _record(out, (x,), lambda g: (g.reshape(x.data.shape),))


def upsample2x(x):
    """Nearest-neighbour 2x upsampling of x[B,C,H,W]."""
    x = _as_tensor(x)
    out = Tensor(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3))

    def bwd(g):
        b, c, h2, w2 = g.shape
        return (g.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)),)

    return _record(out, (x,), bwd)


def sum_all(x):
    x = _as_tensor(x)
    out = Tensor(x.data.sum())
    return _record(out, (x,), lambda g: (np.broadcast_to(g, x.data.shape),))


def mean_all(x):
    x = _as_tensor(x)
    n = x.data.size
    out = Tensor(x.data.mean())
    return _record(out, (x,), lambda g: (np.broadcast_to(g / n, x.data.shape),))


# ---------------------------------------------------------------------------
# softmax and losses


def softmax(x):
    """Row softmax over the last axis; rows sum to 1 within 1e-12."""
    x = _as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise ValueError("softmax input must be finite")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s)

    def bwd(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _record(out, (x,), bwd)


def cross_entropy(logits, labels):
    """Mean over the batch of -log softmax(logits)[label]."""
    logits = _as_tensor(logits)
    data = logits.data if logits.ndim == 2 else logits.data[None, :]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    batch, k = data.shape
    if labels.shape != (batch,):
        raise ShapeError(f"expected {batch} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0,{k}): {labels}")
    shifted = data - data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logprob = shifted - logsumexp
    rows = np.arange(batch)
    out = Tensor(-logprob[rows, labels].mean())

    def bwd(g):
        grad = np.exp(logprob)
        grad[rows, labels] -= 1.0
        grad *= float(g) / batch
        return (grad.reshape(logits.data.shape) if logits.ndim == 1 else grad,)

    return _record(out, (logits,), bwd)


# number of times a predicted probability had to be clamped away from 0
KL_CLAMP_EVENTS = 0
_KL_CLAMP = 1e-12


def kl_clamp_events():
    return KL_CLAMP_EVENTS


def kl_divergence(target_dist, predicted_dist):
    """KL(target || predicted) = sum_j t_j (log t_j - log p_j), with 0 log 0 = 0.

    Accepts single distributions [k] or batches [B,k]; a batch reduces to the
    mean of the per-row divergences. Predicted entries below 1e-12 are clamped
    (counted in KL_CLAMP_EVENTS) and pass no gradient.
    """
    global KL_CLAMP_EVENTS
    target_dist, predicted_dist = _as_tensor(target_dist), _as_tensor(predicted_dist)
    t = np.atleast_2d(target_dist.data)
    p = np.atleast_2d(predicted_dist.data)
    if t.shape != p.shape:
        raise ShapeError(f"distribution shapes differ: {t.shape} vs {p.shape}")
    if np.any(t < 0) or np.any(p < 0):
        raise ValueError("distributions must be non-negative")
    sums = np.concatenate([t.sum(axis=1), p.sum(axis=1)])
    if np.any(np.abs(sums - 1.0) > 1e-9):
        raise ValueError("distribution rows must sum to 1 within 1e-9")
    clamped = p < _KL_CLAMP
    needs_clamp = clamped & (t > 0)
    if needs_clamp.any():
        KL_CLAMP_EVENTS += int(needs_clamp.sum())
    p_safe = np.maximum(p, _KL_CLAMP)
    t_safe = np.maximum(t, _KL_CLAMP)
    terms = np.where(t > 0, t * (np.log(t_safe) - np.log(p_safe)), 0.0)
    batch = t.shape[0]
    out = Tensor(terms.sum() / batch)

    def bwd(g):
        gscale = float(g) / batch
        gt = np.where(t > 0, np.log(t_safe) - np.log(p_safe) + 1.0, 0.0) * gscale
        gp = np.where(clamped, 0.0, -t / p_safe) * gscale
        return (gt.reshape(target_dist.shape), gp.reshape(predicted_dist.shape))

    return _record(out, (target_dist, predicted_dist), bwd)


def _cw_margins(data, labels, targeted):
    batch, k = data.shape
    rows = np.arange(batch)
    masked = data.copy()
    masked[rows, labels] = -np.inf
    runner_up = masked.argmax(axis=1)  # ties -> lowest index
    if targeted:
        margin = masked[rows, runner_up] - data[rows, labels]
    else:
        margin = data[rows, labels] - masked[rows, runner_up]
    return margin, runner_up, rows


def _cw_loss(logits, labels, delta, targeted):
    logits = _as_tensor(logits)
    single = logits.ndim == 1
    data = logits.data[None, :] if single else logits.data
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    batch, k = data.shape
    if k < 2:
        raise ShapeError("margin loss needs at least 2 classes")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"class index out of range [0,{k})")
    delta = float(delta)
    margin, runner_up, rows = _cw_margins(data, labels, targeted)
    value = np.maximum(margin, -delta)
    out = Tensor(value[0] if single else value)

    def bwd(g):
        g = np.atleast_1d(g)
        active = (margin > -delta) * g
        grad = np.zeros_like(data)
        sign = -1.0 if targeted else 1.0
        grad[rows, labels] += sign * active
        grad[rows, runner_up] -= sign * active
        return (grad[0] if single else grad,)

    return _record(out, (logits,), bwd)


def cw_loss_untargeted(logits, y, delta):
    """max(F_y - max_{j!=y} F_j, -delta); minimizing drives the input off class y."""
    return _cw_loss(logits, y, delta, targeted=False)


def cw_loss_targeted(logits, y_t, delta):
    """max(max_{j!=y_t} F_j - F_{y_t}, -delta); minimizing drives toward class y_t."""
    return _cw_loss(logits, y_t, delta, targeted=True)


# ---------------------------------------------------------------------------
# exact infinity-ball projection


def clip_to_ball(x, candidate, eps):
    """Project candidate onto {v : |v - x|_inf <= eps} intersected with [0,1].

    Plain float64 clipping can land one ulp outside the ball when x + eps
    rounds up; offending pixels are nudged back toward x so the returned
    array satisfies max|out - x| <= eps exactly.
    """
    x = np.asarray(x, dtype=np.float64)
    eps = float(eps)
    lo = np.maximum(0.0, x - eps)
    hi = np.minimum(1.0, x + eps)
    out = np.clip(np.asarray(candidate, dtype=np.float64), lo, hi)
    for _ in range(3):
        over = np.abs(out - x) > eps
        if not over.any():
            return out
        out = np.where(over, np.nextafter(out, x), out)
    raise FloatingPointError("ball projection failed to converge")


def ball_clip(x, perturbation, eps):
    """Differentiable x + perturbation, exactly clipped to the eps-ball and [0,1].

    x is a constant array; gradient flows to the perturbation wherever the
    candidate was not clipped.
    """
    perturbation = _as_tensor(perturbation)
    x = np.asarray(x, dtype=np.float64)
    raw = x + perturbation.data
    lo = np.maximum(0.0, x - float(eps))
    hi = np.minimum(1.0, x + float(eps))
    mask = (raw >= lo) & (raw <= hi)
    out = Tensor(clip_to_ball(x, raw, eps))
    return _record(out, (perturbation,), lambda g: (g * mask,))
