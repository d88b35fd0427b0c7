"""
Dense Tensor Numerics
Minimal numpy-backed tensors with reverse-mode differentiation, enough to
train and run the streaming Conformer at desk scale.

Every primitive records a backward closure on its output; Tensor.backward()
walks the graph in reverse topological order and accumulates gradients.
Inside no_grad() nothing is recorded, which is how inference runs.
"""

import json
import logging
import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from exceptions import ContractError, DatasetError, DimensionError, StreamStateError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1

# Large negative stand-in for masked scores; outputs are zeroed explicitly.
MASK_FILL = -1e30

_GRAD_STATE = threading.local()
_DEFAULT_DTYPE = np.float64


def grad_enabled() -> bool:
    """Whether ops on the calling thread record a graph."""
    return getattr(_GRAD_STATE, "depth", 0) == 0


@contextmanager
def no_grad():
    """Disable graph recording on the calling thread inside the block.

    Nesting is counted per thread, so blocks that exit out of order still
    leave recording on once every block has exited.
    """
    _GRAD_STATE.depth = getattr(_GRAD_STATE, "depth", 0) + 1
    try:
        yield
    finally:
        _GRAD_STATE.depth -= 1


def set_default_dtype(dtype) -> None:
    """Set the dtype used when a Tensor is built from non-float data."""
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type


def dtype_for(precision: str):
    return np.float32 if precision == "float32" else np.float64


class Tensor:
    """
    A dense array with an optional gradient accumulator.

    Attributes:
        data: numpy array holding the values (float32 or float64)
        grad: same-shape gradient accumulator, None until backward reaches it
        requires_grad: whether gradients are tracked for this tensor
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype.kind == "f" else _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[], None]] = None
        self._op = ""

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, grad: np.ndarray):
        grad = _unbroadcast(grad, self.data.shape).astype(self.data.dtype, copy=False)
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad = self.grad + grad

    def backward(self, grad: Optional[np.ndarray] = None, release_graph: bool = True):
        """
        Back-propagate from this tensor.

        Args:
            grad: Upstream gradient (defaults to ones, i.e. d(sum)/d(self))
            release_graph: Drop parent links afterwards so activations can be freed
        """
        if not self.requires_grad:
            raise ContractError("backward() called on a tensor that does not require grad")
        order: List[Tensor] = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward()
        if release_graph:
            for node in order:
                if node._parents:
                    node._parents = ()
                    node._backward = None

    # Operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def _as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype or _DEFAULT_DTYPE))


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str, backward: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap an op result, recording the backward closure when needed."""
    track = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track, dtype=data.dtype)
    if track:
        out._parents = tuple(parents)
        out._op = op
        out._backward = lambda: backward(out.grad)
    return out


# ---------------------------------------------------------------------------
# Elementwise and linear algebra
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _result(a.data + b.data, (a, b), "add", backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _result(a.data * b.data, (a, b), "mul", backward)


def scale(x: Tensor, factor: float) -> Tensor:
    x = _as_tensor(x)
    factor = x.data.dtype.type(factor)

    def backward(g):
        x._accumulate(g * factor)

    return _result(x.data * factor, (x,), "scale", backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes (leading axes broadcast).

    Raises:
        DimensionError: if the inner dimensions differ
    """
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul needs >= 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _result(a.data @ b.data, (a, b), "matmul", backward)


def sigmoid(x: Tensor) -> Tensor:
    y = np.empty_like(x.data)
    pos = x.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    y[~pos] = ex / (1.0 + ex)

    def backward(g):
        x._accumulate(g * y * (1.0 - y))

    return _result(y, (x,), "sigmoid", backward)


def swish(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = sigmoid(Tensor(x.data)).data
    y = x.data * s

    def backward(g):
        x._accumulate(g * (s + x.data * s * (1.0 - s)))

    return _result(y, (x,), "swish", backward)


def glu(x: Tensor) -> Tensor:
    """Gated linear unit over the last axis: first half * sigmoid(second half)."""
    width = x.shape[-1]
    if width % 2:
        raise DimensionError(f"glu needs an even last dimension, got {width}")
    half = width // 2
    return mul(slice_tensor(x, 0, half, axis=-1), sigmoid(slice_tensor(x, half, width, axis=-1)))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the affine gamma/beta."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    n = x.shape[-1]

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).reshape(-1, n).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            x._accumulate(
                inv / n * (n * gx - gx.sum(axis=-1, keepdims=True)
                           - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
            )

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), "layer_norm", backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        x._accumulate(g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    return _result(y, (x,), "log_softmax", backward)


def softmax_masked(scores: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Softmax over the last axis restricted to allowed positions.

    Masked positions get exactly zero probability; allowed entries of every
    row sum to one.

    Args:
        scores: Score tensor (..., keys)
        mask: Boolean array broadcastable to scores, True = may attend

    Raises:
        ContractError: if some row has no allowed position
    """
    if mask is None:
        mask = np.ones(scores.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
    if not mask.any(axis=-1).all():
        raise ContractError("softmax_masked: a row has every position masked")
    filled = np.where(mask, scores.data, MASK_FILL)
    shifted = filled - filled.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    p = (e / e.sum(axis=-1, keepdims=True)).astype(scores.dtype, copy=False)

    def backward(g):
        scores._accumulate(p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _result(p, (scores,), "softmax_masked", backward)


def dropout(x: Tensor, rate: float, rng: Optional["Rng"], training: bool) -> Tensor:
    """Inverted dropout; identity unless training with a positive rate."""
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an Rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)

    def backward(g):
        x._accumulate(g * keep)

    return _result(x.data * keep, (x,), "dropout", backward)


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------

def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(reversed(range(x.data.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        x._accumulate(np.transpose(g, inverse))

    return _result(np.transpose(x.data, axes), (x,), "transpose", backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    original = x.shape

    def backward(g):
        x._accumulate(g.reshape(original))

    return _result(x.data.reshape(shape), (x,), "reshape", backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [t for t in tensors]
    if len(tensors) == 1:
        return tensors[0]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, part in zip(tensors, np.split(g, bounds, axis=axis)):
            if t.requires_grad:
                t._accumulate(part)

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _result(data, tensors, "concat", backward)


def slice_tensor(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    """Contiguous slice [start, stop) along one axis."""
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        x._accumulate(full)

    return _result(x.data[index], (x,), "slice", backward)


def repeat_rows(x: Tensor, times: int) -> Tensor:
    """Repeat every row `times` consecutive times (repetition upsampling)."""
    if times == 1:
        return x
    rows = x.shape[0]

    def backward(g):
        x._accumulate(g.reshape((rows, times) + x.shape[1:]).sum(axis=1))

    return _result(np.repeat(x.data, times, axis=0), (x,), "repeat_rows", backward)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of `table` for integer `ids` of any shape."""
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        table._accumulate(full)

    return _result(table.data[ids], (table,), "embedding", backward)


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a 0-d tensor."""

    def backward(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), "sum", backward)


def mean(x: Tensor) -> Tensor:
    return scale(total(x), 1.0 / max(1, x.data.size))


# ---------------------------------------------------------------------------
# Causal depthwise convolution
# ---------------------------------------------------------------------------

def causal_conv1d(x: Tensor, kernel: Tensor, history: Optional[np.ndarray] = None) -> Tuple[Tensor, np.ndarray]:
    """
    Depthwise causal convolution over frames.

    Output frame t is sum_i kernel[i] * padded[t + i] where padded is the
    history followed by the input, so kernel[-1] weighs the current frame and
    frame t never sees input frames after t.

    Args:
        x: Input (frames, channels)
        kernel: Per-channel taps (kernel_size, channels)
        history: The kernel_size - 1 frames preceding x (zeros at stream start)

    Returns:
        (output tensor, new history of the last kernel_size - 1 frames)

    Raises:
        StreamStateError: if history does not hold exactly kernel_size - 1 frames
    """
    k, channels = kernel.shape
    frames = x.shape[0]
    if x.shape[1] != channels:
        raise DimensionError(f"conv channels differ: input {x.shape}, kernel {kernel.shape}")
    if history is None:
        history = np.zeros((k - 1, channels), dtype=x.dtype)
    if history.shape != (k - 1, channels):
        raise StreamStateError(
            f"conv history must hold {k - 1} frames of {channels} channels, got {history.shape}"
        )
    padded = np.concatenate([history.astype(x.dtype, copy=False), x.data], axis=0)
    if frames == 0:
        windows = np.zeros((0, channels, k), dtype=padded.dtype)
    else:
        windows = np.lib.stride_tricks.sliding_window_view(padded, k, axis=0)  # (frames, channels, k)
    y = np.einsum("fck,kc->fc", windows, kernel.data)
    new_history = padded[padded.shape[0] - (k - 1):].copy()

    def backward(g):
        if kernel.requires_grad:
            kernel._accumulate(np.einsum("fck,fc->kc", windows, g))
        if x.requires_grad:
            gpad = np.zeros_like(padded)
            for i in range(k):
                gpad[i:i + frames] += kernel.data[i] * g
            x._accumulate(gpad[k - 1:])

    return _result(y, (x, kernel), "causal_conv1d", backward), new_history


# ---------------------------------------------------------------------------
# Random numbers
# ---------------------------------------------------------------------------

class Rng:
    """
    Deterministic random generator.

    PCG64 seeded through numpy's SeedSequence. Each purpose ('init',
    'dropout', 'data') and each integer key (e.g. a sentence index) yields an
    independent child stream, so draws never depend on the order in which
    other streams were consumed.
    """

    PURPOSES = ("init", "dropout", "data")

    def __init__(self, seed: int, spawn_key: Tuple[int, ...] = ()):
        self.seed = int(seed)
        self.spawn_key = tuple(spawn_key)
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=self.spawn_key)
        self._gen = np.random.Generator(np.random.PCG64(sequence))

    def stream(self, purpose: Union[str, int]) -> "Rng":
        """Independent child generator for a purpose name or integer key."""
        if isinstance(purpose, str):
            if purpose not in self.PURPOSES:
                raise ValueError(f"Unknown RNG purpose '{purpose}'")
            key = self.PURPOSES.index(purpose)
        else:
            key = len(self.PURPOSES) + int(purpose)
        return Rng(self.seed, self.spawn_key + (key,))

    @property
    def state(self) -> Dict:
        return self._gen.bit_generator.state

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def random(self, shape=None) -> np.ndarray:
        return self._gen.random(shape)

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, std, size=shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, values, size=None, p=None):
        return self._gen.choice(values, size=size, p=p)


# ---------------------------------------------------------------------------
# Finite-difference checks
# ---------------------------------------------------------------------------

def numerical_gradient(fn: Callable[[List[np.ndarray]], float], arrays: List[np.ndarray],
                       index: int, eps: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar fn w.r.t. arrays[index]."""
    target = arrays[index]
    grad = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    while not it.finished:
        pos = it.multi_index
        original = target[pos]
        target[pos] = original + eps
        up = fn(arrays)
        target[pos] = original - eps
        down = fn(arrays)
        target[pos] = original
        grad[pos] = (up - down) / (2 * eps)
        it.iternext()
    return grad


def gradient_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / (||a|| + ||n||), zero when both vanish."""
    denom = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, params: Dict[str, Tensor], metadata: Optional[Dict] = None) -> None:
    """
    Write parameters to an .npz container.

    Layout: one array per parameter under 'param/<name>', the format version
    under '__format_version__' and JSON metadata under '__metadata__'.
    """
    arrays = {f"param/{name}": t.data for name, t in sorted(params.items())}
    arrays["__format_version__"] = np.asarray(CHECKPOINT_FORMAT_VERSION)
    arrays["__metadata__"] = np.asarray(json.dumps(metadata or {}, sort_keys=True))
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    logger.info(f"checkpoint_saved path={path} params={len(params)}")


def load_checkpoint(path: str) -> Tuple[Dict[str, np.ndarray], Dict]:
    """
    Read a checkpoint written by save_checkpoint.

    Returns:
        (name -> array mapping, metadata dictionary)

    Raises:
        DatasetError: if the file is missing, malformed or has another version
    """
    try:
        with np.load(path, allow_pickle=False) as archive:
            version = int(archive["__format_version__"])
            if version != CHECKPOINT_FORMAT_VERSION:
                raise DatasetError(f"Unsupported checkpoint version {version} in {path}")
            metadata = json.loads(str(archive["__metadata__"]))
            params = {
                key[len("param/"):]: archive[key]
                for key in archive.files if key.startswith("param/")
            }
    except (OSError, KeyError, ValueError) as e:
        if isinstance(e, DatasetError):
            raise
        raise DatasetError(f"Cannot read checkpoint {path}: {e}")
    return params, metadata


def global_norm(tensors: Iterable[Tensor]) -> float:
    return float(np.sqrt(sum(float((t.grad ** 2).sum()) for t in tensors if t.grad is not None)))
