"""Dense float64 tensor primitives with hand-written backward passes.

Arrays are plain C-contiguous ``numpy.float64`` ndarrays. Every forward
helper that participates in training has a matching ``*_backward`` that
consumes the cache returned by the forward call; there is no tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Row count at or below which matmul uses the exact k-ordered accumulation
# path. Small operands therefore reproduce a naive triple loop bit-for-bit
# (needed by the bitwise oracle tests); larger operands go through BLAS,
# which is deterministic per platform but reorders the summation.
EXACT_ROW_LIMIT = 32

NORM_FLOOR = 1e-12


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Validate and convert input data to a float64 C-order array.

    Rejects NaN/Inf at the boundary so interior code can assume finiteness.
    """
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


class SeededRng:
    """Deterministic random stream (PCG64) with a serializable state.

    Identical seeds produce identical streams on every platform; the full
    generator state round-trips through ``state``/``set_state`` so training
    can resume bit-identically from a checkpoint.
    """

    algorithm = "pcg64"

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def random(self, shape=None) -> np.ndarray:
        return self._gen.random(shape)

    def normal(self, shape=None, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, shape)

    def uniform(self, low: float, high: float, shape=None) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=None):
        return self._gen.integers(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    @property
    def state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a documented accumulation order.

    For ``a`` with at most ``EXACT_ROW_LIMIT`` rows the sum over the inner
    dimension runs in index order with one rounding per multiply and add,
    exactly like the textbook triple loop, and each output row depends only
    on its own input row (bitwise stable under row permutation). Larger
    products delegate to BLAS.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    if a.shape[0] <= EXACT_ROW_LIMIT:
        out = np.zeros((a.shape[0], b.shape[1]))
        for k in range(a.shape[1]):
            out += a[:, k, None] * b[k, :]
        return out
    return a @ b


def linear(x: np.ndarray, w: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """x (N,din) @ w.T (din,dout) + bias."""
    out = matmul(x, w.T)
    if bias is not None:
        out = out + bias
    return out


def linear_backward(d_out: np.ndarray, x: np.ndarray, w: np.ndarray, with_bias: bool = True):
    dx = matmul(d_out, w)
    dw = matmul(d_out.T, x)
    db = d_out.sum(axis=0) if with_bias else None
    return dx, dw, db


def leaky_relu(x: np.ndarray, slope: float = 0.01) -> np.ndarray:
    """x where x >= 0, slope * x elsewhere; slope 0 is ReLU, slope 1 identity."""
    if not 0.0 <= slope <= 1.0:
        raise ValueError(f"slope must be in [0, 1], got {slope}")
    return np.where(x >= 0.0, x, slope * x)


def leaky_relu_backward(d_out: np.ndarray, x: np.ndarray, slope: float = 0.01) -> np.ndarray:
    return d_out * np.where(x >= 0.0, 1.0, slope)


def layer_norm(x: np.ndarray, gain: np.ndarray, shift: np.ndarray, eps: float = 1e-5):
    """Per-row standardization followed by the learned affine.

    Returns ``(out, cache)``; variance is the population variance of the row.
    """
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    x = np.atleast_2d(x)
    if x.shape[-1] == 0:
        raise ShapeError("layer_norm on zero-length rows")
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = gain * xhat + shift
    return out, (xhat, inv, gain)


def layer_norm_backward(d_out: np.ndarray, cache):
    xhat, inv, gain = cache
    d_gain = (d_out * xhat).sum(axis=0)
    d_shift = d_out.sum(axis=0)
    g = d_out * gain
    # population-variance backward: remove the components of g along the
    # constant direction and along xhat
    dx = inv * (g - g.mean(axis=-1, keepdims=True)
                - xhat * (g * xhat).mean(axis=-1, keepdims=True))
    return dx, d_gain, d_shift


def dropout_mask(shape, p: float, rng: SeededRng, training: bool) -> np.ndarray:
    """Inverted-dropout mask: Bernoulli(1-p) scaled by 1/(1-p) in training.

    Inference returns all-ones so serving never touches the RNG.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout p must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= p
    return keep.astype(np.float64) / (1.0 - p)


def pool_bins(n: int, target: int) -> list[tuple[int, int]]:
    """Adaptive pooling bin ranges: bin i covers [floor(i*n/t), ceil((i+1)*n/t))."""
    return [(int(np.floor(i * n / target)), int(np.ceil((i + 1) * n / target)))
            for i in range(target)]


def adaptive_max_pool(x: np.ndarray, target: int):
    """Max-pool N tokens down (or up) to ``target`` tokens.

    Values take the per-feature max inside each bin. Provenance records,
    per bin, the input index whose token has the largest L2 norm (first on
    ties); attribution uses it to route pooled-token attention back to a
    single concrete input token.

    Returns ``(pooled (target, F), provenance (target,), cache)``.
    """
    x = np.atleast_2d(x)
    n, f = x.shape
    if n < 1:
        raise ShapeError("adaptive_max_pool on empty input")
    if target < 1:
        raise ValueError("target must be >= 1")
    bins = pool_bins(n, target)
    starts = np.array([b[0] for b in bins], dtype=np.int64)
    widths = np.array([b[1] - b[0] for b in bins], dtype=np.int64)
    pooled = np.empty((target, f))
    argmax = np.empty((target, f), dtype=np.int64)
    provenance = np.empty(target, dtype=np.int64)
    norms = np.linalg.norm(x, axis=1)
    # bins of equal width are pooled as one vectorized batch (widths take at
    # most a few distinct values for any N, T)
    for w in np.unique(widths):
        rows = np.nonzero(widths == w)[0]
        gather = starts[rows, None] + np.arange(w)
        windows = x[gather]                                  # (G, w, F)
        local = np.argmax(windows, axis=1)
        pooled[rows] = np.take_along_axis(windows, local[:, None, :], axis=1)[:, 0, :]
        argmax[rows] = starts[rows, None] + local
        provenance[rows] = starts[rows] + np.argmax(norms[gather], axis=1)
    return pooled, provenance, (n, f, argmax)


def adaptive_max_pool_backward(d_pooled: np.ndarray, cache) -> np.ndarray:
    n, f, argmax = cache
    flat = argmax * f + np.arange(f)
    acc = np.bincount(flat.ravel(), weights=d_pooled.ravel(), minlength=n * f)
    return acc.reshape(n, f)


def adaptive_max_pool_compressed(x: np.ndarray, target: int):
    """Adaptive max pooling with duplicate bins collapsed.

    When ``target`` exceeds N, many bins cover the same index range and
    yield byte-identical tokens; this variant returns each distinct bin
    once plus its multiplicity, so downstream work scales with the input
    size instead of the (possibly much larger) target.

    Returns ``(pooled_unique (U, F), counts (U,), slot_map (target,),
    provenance (target,), cache)``; ``pooled_unique[slot_map]`` equals the
    plain ``adaptive_max_pool`` output exactly.
    """
    x = np.atleast_2d(x)
    n = x.shape[0]
    if n < 1:
        raise ShapeError("adaptive_max_pool on empty input")
    bins = pool_bins(n, target)
    uniq_index: dict[tuple[int, int], int] = {}
    slot_map = np.empty(target, dtype=np.int64)
    for i, b in enumerate(bins):
        if b not in uniq_index:
            uniq_index[b] = len(uniq_index)
        slot_map[i] = uniq_index[b]
    counts = np.bincount(slot_map, minlength=len(uniq_index)).astype(np.float64)
    first = np.unique(slot_map, return_index=True)[1]      # id order == first-seen order

    pooled_all, provenance, cache_all = adaptive_max_pool(x, target)
    nn, f, argmax_all = cache_all
    return pooled_all[first], counts, slot_map, provenance, (nn, f, argmax_all[first])


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - np.max(x)
    e = np.exp(z)
    return e / e.sum()


def softmax_backward(d_out: np.ndarray, probs: np.ndarray) -> np.ndarray:
    return probs * (d_out - np.dot(probs, d_out))


def l2_normalize_rows(x: np.ndarray, floor: float = NORM_FLOOR):
    """Normalize the last axis to unit L2 norm with a zero-norm guard.

    Rows whose norm falls below ``floor`` are divided by ``floor`` instead,
    keeping the map differentiable everywhere. Returns ``(normed, cache)``.
    """
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    clamped = norms < floor
    denom = np.where(clamped, floor, norms)
    out = x / denom
    return out, (out, denom, clamped)


def l2_normalize_rows_backward(d_out: np.ndarray, cache) -> np.ndarray:
    normed, denom, clamped = cache
    proj = (normed * d_out).sum(axis=-1, keepdims=True)
    dx = (d_out - normed * proj) / denom
    # clamped rows are a plain division by the floor constant
    dx_clamped = d_out / denom
    return np.where(clamped, dx_clamped, dx)


def global_norm(arrays) -> float:
    total = 0.0
    for a in arrays:
        total += float(np.sum(a * a))
    return float(np.sqrt(total))


@dataclass
class GradCheckReport:
    """Outcome of a finite-difference check for one parameter tensor."""

    name: str
    max_rel_error: float
    passed: bool

    def __str__(self):
        status = "ok" if self.passed else "FAIL"
        return f"{self.name}: max_rel_err={self.max_rel_error:.3e} [{status}]"


def grad_check(loss_and_grad, params: dict, tol: float, h: float = 1e-5,
               max_coords: int = 64, seed: int = 0) -> list[GradCheckReport]:
    """Central finite differences against an analytic gradient.

    ``loss_and_grad(params) -> (loss, grads)`` must be deterministic
    (dropout disabled). At most ``max_coords`` coordinates per tensor are
    probed (all of them for small tensors). Relative error uses
    ``|a - f| / max(|a|, |f|)``; when both magnitudes sit below 1e-7 the
    coordinate counts as zero-gradient and contributes error 0.
    """
    base = {k: v.copy() for k, v in params.items()}
    loss0, grads = loss_and_grad(base)
    if not np.isfinite(loss0):
        raise ValueError(f"loss is not finite: {loss0}")
    pick = SeededRng(seed)
    reports = []
    for name in sorted(base):
        tensor = base[name]
        size = tensor.size
        if size <= max_coords:
            coords = np.arange(size)
        else:
            coords = np.sort(pick.choice(size, max_coords, replace=False))
        flat = tensor.reshape(-1)
        analytic = grads[name].reshape(-1)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            lp, _ = loss_and_grad(base)
            flat[c] = orig - h
            lm, _ = loss_and_grad(base)
            flat[c] = orig
            fd = (lp - lm) / (2.0 * h)
            a = analytic[c]
            scale = max(abs(a), abs(fd))
            err = 0.0 if scale < 1e-7 else abs(a - fd) / scale
            worst = max(worst, err)
        reports.append(GradCheckReport(name=name, max_rel_error=worst, passed=worst < tol))
    return reports
