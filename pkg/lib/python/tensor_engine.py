"""
Tensor Engine

Dense NCHW tensors with reverse-mode differentiation for the operation set the
reconstruction VAE and its SSIM loss need: convolution, transposed
convolution, leaky ReLU, sigmoid, elementwise algebra, fixed-window local
means and scalar reductions. Also holds the finite-difference gradient check.

Operations record onto the active GradTape (entered with a ``with`` block).
Outside a tape nothing is recorded, which is how inference runs.

Example:
    with GradTape() as tape:
        y = conv2d(x, w, b, spec)
        loss = reduce_mean(square(y))
    grads = tape.backward(loss)
    dw = grads[id(w)]
"""

import contextvars
import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from mra_errors import NonFiniteError, ShapeMismatchError

logger = logging.getLogger(__name__)

PRECISIONS = {"single": np.float32, "double": np.float64}

_ACTIVE_TAPE: contextvars.ContextVar = contextvars.ContextVar("active_tape", default=None)

Scalar = Union[int, float]


class Tensor:
    """
    Immutable wrapper around a float32/float64 numpy array.

    Leaves created with requires_grad=True receive gradients from the tape.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data: Any, requires_grad: bool = False, precision: Optional[str] = None):
        if precision is not None:
            arr = np.asarray(data, dtype=PRECISIONS[precision])
        else:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)


@dataclass
class TapeRecord:
    """One recorded operation"""
    function: "Function"
    inputs: Tuple[Tensor, ...]
    output: Tensor


class GradTape:
    """
    Ordered record of differentiable operations.

    Records are appended in execution order, so walking them backwards is a
    reverse topological traversal. Gradients are keyed by tensor identity;
    tensors that did not take part have no entry.
    """

    def __init__(self):
        self.records: List[TapeRecord] = []
        self.grads: Dict[int, np.ndarray] = {}
        self._token = None

    def __enter__(self) -> "GradTape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def record(self, function: "Function", inputs: Tuple[Tensor, ...], output: Tensor) -> None:
        self.records.append(TapeRecord(function, inputs, output))

    def backward(self, output: Tensor) -> Dict[int, np.ndarray]:
        """
        Propagate d(output)/d(.) back through the recorded operations

        Args:
            output: Scalar tensor produced under this tape

        Returns:
            Mapping id(tensor) -> gradient array
        """
        if output.data.size != 1:
            raise ShapeMismatchError("backward needs a scalar output", shape=output.shape)
        grads: Dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        for rec in reversed(self.records):
            upstream = grads.get(id(rec.output))
            if upstream is None:
                continue
            input_grads = rec.function.backward(upstream)
            for tensor, grad in zip(rec.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                # multiple uses of one tensor sum their contributions
                if key in grads:
                    grads[key] = grads[key] + grad
                else:
                    grads[key] = grad
        self.grads = grads
        return grads

    def gradient(self, tensor: Tensor) -> Optional[np.ndarray]:
        return self.grads.get(id(tensor))


class Function:
    """
    Base class for differentiable operations.

    Subclasses implement ``forward`` on raw arrays and ``backward`` returning
    one gradient (or None) per tensor input.
    """

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *tensors: Tensor, **kwargs: Any) -> Tensor:
        fn = cls()
        out = fn.forward(*(t.data for t in tensors), **kwargs)
        tape = _ACTIVE_TAPE.get()
        requires_grad = tape is not None and any(t.requires_grad for t in tensors)
        result = Tensor(out, requires_grad=requires_grad)
        if requires_grad:
            tape.record(fn, tensors, result)
        return result


# ---------------------------------------------------------------------------
# Shape helpers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one convolution layer"""
    kernel: Tuple[int, int]
    stride: Tuple[int, int]
    padding: Tuple[int, int]
    in_channels: int
    out_channels: int

    @classmethod
    def square(cls, in_channels: int, out_channels: int, kernel: int, stride: int = 1,
               padding: int = 0) -> "ConvSpec":
        return cls((kernel, kernel), (stride, stride), (padding, padding), in_channels, out_channels)

    def output_size(self, h: int, w: int) -> Tuple[int, int]:
        """floor((h + 2p - k) / s) + 1 per axis"""
        (kh, kw), (sh, sw), (ph, pw) = self.kernel, self.stride, self.padding
        ho = (h + 2 * ph - kh) // sh + 1
        wo = (w + 2 * pw - kw) // sw + 1
        if ho < 1 or wo < 1:
            raise ShapeMismatchError("convolution output would be empty",
                                     input_hw=(h, w), kernel=self.kernel, padding=self.padding)
        return ho, wo

    def transposed_output_size(self, h: int, w: int) -> Tuple[int, int]:
        """(h - 1) * s - 2p + k per axis"""
        (kh, kw), (sh, sw), (ph, pw) = self.kernel, self.stride, self.padding
        ho = (h - 1) * sh - 2 * ph + kh
        wo = (w - 1) * sw - 2 * pw + kw
        if ho < 1 or wo < 1:
            raise ShapeMismatchError("transposed convolution output would be empty",
                                     input_hw=(h, w), kernel=self.kernel, padding=self.padding)
        return ho, wo


def _require_rank4(name: str, arr: np.ndarray) -> None:
    if arr.ndim != 4 or min(arr.shape) < 1:
        raise ShapeMismatchError(f"{name} must be a non-empty rank-4 [N,C,H,W] array", shape=arr.shape)


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    """Padded (N,C,H,W) -> (N, C*kh*kw, ho*wo) sliding-window columns"""
    n, c = xp.shape[:2]
    s_n, s_c, s_h, s_w = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(s_n, s_c, s_h, s_w, sh * s_h, sw * s_w),
        writeable=False,
    )
    return patches.reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, padded_shape: Tuple[int, int, int, int], kh: int, kw: int,
            sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    """Scatter-add columns back onto a zeroed padded image (adjoint of _im2col)"""
    n, c, hp, wp = padded_shape
    out = np.zeros(padded_shape, dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += cols[:, :, i, j]
    return out


def _to_matrix(cols: np.ndarray) -> np.ndarray:
    """(N, K, L) -> (K, N*L)"""
    n, k, l = cols.shape
    return cols.transpose(1, 0, 2).reshape(k, n * l)


def _from_matrix(mat: np.ndarray, n: int) -> np.ndarray:
    """(K, N*L) -> (N, K, L)"""
    k = mat.shape[0]
    return mat.reshape(k, n, -1).transpose(1, 0, 2)


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------

class Conv2d(Function):
    """Cross-correlation with zero padding; weight (out_c, in_c, kh, kw)"""

    def forward(self, x, weight, bias, spec: ConvSpec):
        _require_rank4("conv2d input", x)
        (kh, kw), (sh, sw), (ph, pw) = spec.kernel, spec.stride, spec.padding
        expected = (spec.out_channels, spec.in_channels, kh, kw)
        if weight.shape != expected:
            raise ShapeMismatchError("conv2d weight shape", expected=expected, got=weight.shape)
        if x.shape[1] != spec.in_channels:
            raise ShapeMismatchError("conv2d input channels", expected=spec.in_channels, got=x.shape[1])
        if bias.shape != (spec.out_channels,):
            raise ShapeMismatchError("conv2d bias shape", expected=(spec.out_channels,), got=bias.shape)
        n, _, h, w = x.shape
        ho, wo = spec.output_size(h, w)

        xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        self.cols = _to_matrix(_im2col(xp, kh, kw, sh, sw, ho, wo))
        self.weight = weight
        self.geometry = (x.shape, xp.shape, kh, kw, sh, sw, ph, pw, ho, wo)

        wm = weight.reshape(spec.out_channels, -1)
        out = (wm @ self.cols).reshape(spec.out_channels, n, ho, wo).transpose(1, 0, 2, 3)
        return np.ascontiguousarray(out + bias[None, :, None, None])

    def backward(self, grad):
        x_shape, xp_shape, kh, kw, sh, sw, ph, pw, ho, wo = self.geometry
        n, _, h, w = x_shape
        out_c = grad.shape[1]
        g = grad.transpose(1, 0, 2, 3).reshape(out_c, -1)
        wm = self.weight.reshape(out_c, -1)

        d_weight = (g @ self.cols.T).reshape(self.weight.shape)
        d_bias = grad.sum(axis=(0, 2, 3))
        d_cols = _from_matrix(wm.T @ g, n)
        d_xp = _col2im(d_cols, xp_shape, kh, kw, sh, sw, ho, wo)
        d_x = d_xp[:, :, ph:ph + h, pw:pw + w]
        return np.ascontiguousarray(d_x), d_weight, d_bias


class ConvTranspose2d(Function):
    """Gradient-of-convolution operator; weight (in_c, out_c, kh, kw)"""

    def forward(self, x, weight, bias, spec: ConvSpec):
        _require_rank4("conv_transpose2d input", x)
        (kh, kw), (sh, sw), (ph, pw) = spec.kernel, spec.stride, spec.padding
        expected = (spec.in_channels, spec.out_channels, kh, kw)
        if weight.shape != expected:
            raise ShapeMismatchError("conv_transpose2d weight shape", expected=expected, got=weight.shape)
        if x.shape[1] != spec.in_channels:
            raise ShapeMismatchError("conv_transpose2d input channels",
                                     expected=spec.in_channels, got=x.shape[1])
        if bias.shape != (spec.out_channels,):
            raise ShapeMismatchError("conv_transpose2d bias shape",
                                     expected=(spec.out_channels,), got=bias.shape)
        n, _, h, w = x.shape
        ho, wo = spec.transposed_output_size(h, w)
        padded_shape = (n, spec.out_channels, ho + 2 * ph, wo + 2 * pw)

        self.x_mat = x.transpose(1, 0, 2, 3).reshape(spec.in_channels, -1)
        self.weight = weight
        self.geometry = (x.shape, padded_shape, kh, kw, sh, sw, ph, pw, ho, wo)

        wm = weight.reshape(spec.in_channels, -1)
        cols = _from_matrix(wm.T @ self.x_mat, n)
        out_p = _col2im(cols, padded_shape, kh, kw, sh, sw, h, w)
        out = out_p[:, :, ph:ph + ho, pw:pw + wo]
        return np.ascontiguousarray(out + bias[None, :, None, None])

    def backward(self, grad):
        x_shape, padded_shape, kh, kw, sh, sw, ph, pw, ho, wo = self.geometry
        n, in_c, h, w = x_shape
        gp = np.pad(grad, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        g_cols = _to_matrix(_im2col(gp, kh, kw, sh, sw, h, w))
        wm = self.weight.reshape(in_c, -1)

        d_x = (wm @ g_cols).reshape(in_c, n, h, w).transpose(1, 0, 2, 3)
        d_weight = (self.x_mat @ g_cols.T).reshape(self.weight.shape)
        d_bias = grad.sum(axis=(0, 2, 3))
        return np.ascontiguousarray(d_x), d_weight, d_bias


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, spec: ConvSpec) -> Tensor:
    return Conv2d.apply(x, weight, bias, spec=spec)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor, spec: ConvSpec) -> Tensor:
    return ConvTranspose2d.apply(x, weight, bias, spec=spec)


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

class LeakyReLU(Function):
    def forward(self, x, slope: float):
        if not 0.0 <= slope < 1.0:
            raise ValueError(f"leaky_relu slope must lie in [0, 1), got {slope}")
        self.positive = x > 0
        self.slope = slope
        return np.where(self.positive, x, x * x.dtype.type(slope))

    def backward(self, grad):
        # the subgradient at exactly 0 takes the negative branch
        local = np.where(self.positive, 1.0, self.slope).astype(grad.dtype)
        return (grad * local,)


class Sigmoid(Function):
    def forward(self, x):
        out = expit(x)
        # strictly below 1
        self.out = np.minimum(out, np.nextafter(x.dtype.type(1), x.dtype.type(0)))
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1 - self.out),)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    return LeakyReLU.apply(x, slope=slope)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


# ---------------------------------------------------------------------------
# Elementwise algebra
# ---------------------------------------------------------------------------

def _as_tensor(value: Union[Tensor, Scalar], like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(value, dtype=dtype))


def _check_operands(name: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.dtype != b.dtype:
        raise ShapeMismatchError(f"{name}: operand precisions differ", left=str(a.dtype), right=str(b.dtype))
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeMismatchError(f"{name}: operand shapes differ", left=a.shape, right=b.shape)


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Undo scalar-with-tensor expansion"""
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum(), dtype=grad.dtype)


class Add(Function):
    def forward(self, a, b):
        _check_operands("add", a, b)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return _reduce_to(grad, self.shapes[0]), _reduce_to(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        _check_operands("sub", a, b)
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return _reduce_to(grad, self.shapes[0]), _reduce_to(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        _check_operands("mul", a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return _reduce_to(grad * self.b, self.a.shape), _reduce_to(grad * self.a, self.b.shape)


class Div(Function):
    def forward(self, a, b):
        _check_operands("div", a, b)
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        d_a = grad / self.b
        d_b = -grad * self.a / (self.b * self.b)
        return _reduce_to(d_a, self.a.shape), _reduce_to(d_b, self.b.shape)


class Exp(Function):
    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Square(Function):
    def forward(self, x):
        self.x = x
        return x * x

    def backward(self, grad):
        return (2 * grad * self.x,)


class Clamp(Function):
    """Clip to [low, high]; no gradient flows through clipped entries"""

    def forward(self, x, low: Optional[float], high: Optional[float]):
        self.inside = np.ones(x.shape, dtype=bool)
        out = x
        if low is not None:
            self.inside &= x >= low
            out = np.maximum(out, x.dtype.type(low))
        if high is not None:
            self.inside &= x <= high
            out = np.minimum(out, x.dtype.type(high))
        return out

    def backward(self, grad):
        return (np.where(self.inside, grad, 0).astype(grad.dtype),)


def add(a, b) -> Tensor:
    like = a if isinstance(a, Tensor) else b
    return Add.apply(_as_tensor(a, like), _as_tensor(b, like))


def sub(a, b) -> Tensor:
    like = a if isinstance(a, Tensor) else b
    return Sub.apply(_as_tensor(a, like), _as_tensor(b, like))


def mul(a, b) -> Tensor:
    like = a if isinstance(a, Tensor) else b
    return Mul.apply(_as_tensor(a, like), _as_tensor(b, like))


def div(a, b) -> Tensor:
    like = a if isinstance(a, Tensor) else b
    return Div.apply(_as_tensor(a, like), _as_tensor(b, like))


def exp(x: Tensor) -> Tensor:
    return Exp.apply(x)


def square(x: Tensor) -> Tensor:
    return Square.apply(x)


def clamp(x: Tensor, low: Optional[float] = None, high: Optional[float] = None) -> Tensor:
    return Clamp.apply(x, low=low, high=high)


# ---------------------------------------------------------------------------
# Windows and reductions
# ---------------------------------------------------------------------------

class FixedWindowMean(Function):
    """Per-channel weighted local mean over the valid region only"""

    def forward(self, x, window: np.ndarray):
        _require_rank4("fixed_window_mean input", x)
        window = np.asarray(window)
        if window.ndim != 2:
            raise ShapeMismatchError("window must be 2D", shape=window.shape)
        kh, kw = window.shape
        h, w = x.shape[2:]
        if kh > h or kw > w:
            raise ShapeMismatchError("window larger than input", window=window.shape, input_hw=(h, w))
        if np.any(window < 0):
            raise ValueError("window weights must be nonnegative")
        self.window = window.astype(x.dtype)
        self.input_shape = x.shape
        ho, wo = h - kh + 1, w - kw + 1
        out = np.zeros(x.shape[:2] + (ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                out += self.window[i, j] * x[:, :, i:i + ho, j:j + wo]
        return out

    def backward(self, grad):
        kh, kw = self.window.shape
        ho, wo = grad.shape[2:]
        d_x = np.zeros(self.input_shape, dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                d_x[:, :, i:i + ho, j:j + wo] += self.window[i, j] * grad
        return (d_x,)


class Sum(Function):
    def forward(self, x):
        self.shape = x.shape
        return np.asarray(x.sum(), dtype=x.dtype)

    def backward(self, grad):
        return (np.full(self.shape, grad, dtype=grad.dtype),)


class Mean(Function):
    def forward(self, x):
        self.shape = x.shape
        return np.asarray(x.mean(), dtype=x.dtype)

    def backward(self, grad):
        count = int(np.prod(self.shape)) if self.shape else 1
        return (np.full(self.shape, grad / count, dtype=grad.dtype),)


def fixed_window_mean(x: Tensor, window: np.ndarray) -> Tensor:
    return FixedWindowMean.apply(x, window=window)


def reduce_sum(x: Tensor) -> Tensor:
    return Sum.apply(x)


def reduce_mean(x: Tensor) -> Tensor:
    return Mean.apply(x)


# ---------------------------------------------------------------------------
# Finite-difference gradient check
# ---------------------------------------------------------------------------

def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    step: float = 1e-5,
    max_coords: Optional[int] = None,
    random_coords: int = 0,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """
    Compare reverse-mode gradients of a scalar function against central differences

    Args:
        fn: Maps Tensors (one per input) to a scalar Tensor
        inputs: Arrays at which to check; evaluated in double precision
        step: Finite-difference step h
        max_coords: When set, only the max_coords coordinates of each input with
            the largest analytic gradient are checked (for large parameter sets)
        random_coords: With max_coords, also check this many coordinates drawn
            at random from the rest whose gradient is at least a tenth of the largest
        rng: Draws the random coordinates; seeded with 0 when omitted

    Returns:
        Maximum over checked coordinates of |a - n| / max(|a|, |n|, 1e-8)
    """
    base = [np.array(x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(x, requires_grad=True) for x in base]
    with GradTape() as tape:
        out = fn(*leaves)
    if out.data.size != 1:
        raise ShapeMismatchError("grad_check needs a scalar-valued function", shape=out.shape)
    if not np.isfinite(out.data).all():
        raise NonFiniteError("non-finite forward value in grad_check")
    grads = tape.backward(out)

    def evaluate(arrays: List[np.ndarray]) -> float:
        value = float(fn(*[Tensor(a) for a in arrays]).data)
        if not np.isfinite(value):
            raise NonFiniteError("non-finite forward value in grad_check")
        return value

    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for k, leaf in enumerate(leaves):
        analytic = grads.get(id(leaf))
        if analytic is None:
            analytic = np.zeros_like(base[k])
        flat = analytic.ravel()
        if max_coords is not None and max_coords < flat.size:
            order = np.argsort(-np.abs(flat), kind="stable")
            coords = order[:max_coords]
            rest = order[max_coords:]
            # tiny gradients drown in finite-difference roundoff
            rest = rest[np.abs(flat[rest]) >= 0.1 * np.abs(flat[coords[0]])]
            if random_coords > 0 and rest.size:
                picked = rng.choice(rest, size=min(random_coords, rest.size), replace=False)
                coords = np.concatenate([coords, np.sort(picked)])
        else:
            coords = np.arange(flat.size)
        for idx in coords:
            plus = [a.copy() for a in base]
            minus = [a.copy() for a in base]
            plus[k].flat[idx] += step
            minus[k].flat[idx] -= step
            numeric = (evaluate(plus) - evaluate(minus)) / (2 * step)
            a = float(flat[idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
    logger.debug("grad_check: %d inputs, max relative error %.3e", len(inputs), worst)
    return worst
