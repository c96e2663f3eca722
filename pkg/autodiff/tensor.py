"""
Différentiation automatique en mode inverse sur des tenseurs denses (float64)
Chaque opération différentiable enregistre sa valeur et sa règle de rétropropagation sur une bande
"""

import threading
from contextlib import contextmanager
from functools import lru_cache
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

DTYPE = np.float64

Operand = Union['Tensor', float, int, np.ndarray]


class ShapeError(ValueError):
    """Dimensions incompatibles pour une opération"""

    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind


class TapeError(RuntimeError):
    """Mauvaise utilisation de la bande (perte non scalaire, backward répété...)"""


_state = threading.local()


def _tapes() -> List['Tape']:
    if not hasattr(_state, 'tapes'):
        _state.tapes = []
        _state.recording = True
    return _state.tapes


def active_tape() -> Optional['Tape']:
    """Bande active du thread courant (None hors contexte ou sous no_grad)"""
    tapes = _tapes()
    if not tapes or not _state.recording:
        return None
    return tapes[-1]


@contextmanager
def no_grad():
    """Désactive l'enregistrement des opérations (évaluation)"""
    _tapes()
    previous = _state.recording
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = previous


class Tensor:
    __slots__ = ('data', 'requires_grad', 'grad', 'node', 'name')

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        array = np.asarray(data, dtype=DTYPE)
        if not array.flags.c_contiguous:
            array = array.copy(order='C')
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional['Node'] = None
        self.name = name

    def __repr__(self):
        label = f" '{self.name}'" if self.name else ''
        return f"<Tensor{label} shape={self.shape} requires_grad={self.requires_grad}>"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> 'Tensor':
        return Tensor(self.data.copy())

    def __add__(self, other: Operand) -> 'Tensor':
        return add(self, other)

    def __radd__(self, other: Operand) -> 'Tensor':
        return add(other, self)

    def __sub__(self, other: Operand) -> 'Tensor':
        return sub(self, other)

    def __rsub__(self, other: Operand) -> 'Tensor':
        return sub(other, self)

    def __mul__(self, other: Operand) -> 'Tensor':
        return mul(self, other)

    def __rmul__(self, other: Operand) -> 'Tensor':
        return mul(other, self)

    def __truediv__(self, other: Operand) -> 'Tensor':
        return div(self, other)

    def __rtruediv__(self, other: Operand) -> 'Tensor':
        return div(other, self)

    def __neg__(self) -> 'Tensor':
        return neg(self)

    def __pow__(self, exponent: float) -> 'Tensor':
        return power(self, exponent)

    def __matmul__(self, other: Operand) -> 'Tensor':
        return matmul(self, other)

    def __getitem__(self, key) -> 'Tensor':
        return slice_(self, key)

    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return max_(self, axis, keepdims)

    def exp(self) -> 'Tensor':
        return exp(self)

    def log(self) -> 'Tensor':
        return log(self)

    def abs(self) -> 'Tensor':
        return abs_(self)

    def sqrt(self) -> 'Tensor':
        return sqrt(self)

    def relu(self) -> 'Tensor':
        return relu(self)

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> 'Tensor':
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def broadcast_to(self, shape) -> 'Tensor':
        return broadcast_to(self, shape)


def parameter(data, name: Optional[str] = None) -> Tensor:
    """Feuille entraînable"""
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def zero_grad(tensors: Sequence[Tensor]):
    """Remet à zéro les accumulateurs de gradient des feuilles"""
    for tensor in tensors:
        tensor.grad = None


class Node:
    __slots__ = ('id', 'kind', 'parents', 'output', 'backward_fn', 'grad', 'tape')

    def __init__(self, node_id: int, kind: str, parents: Tuple[Tensor, ...], output: Tensor,
                 backward_fn: Callable, tape: 'Tape'):
        self.id = node_id
        self.kind = kind
        self.parents = parents
        self.output = output
        self.backward_fn = backward_fn
        self.grad: Optional[np.ndarray] = None
        self.tape = tape


class Tape:
    """Bande dynamique: les noeuds sont stockés dans l'ordre topologique de création"""

    def __init__(self):
        self.nodes: List[Node] = []
        self._consumed = False

    def __enter__(self) -> 'Tape':
        _tapes().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tapes().remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, kind: str, parents: Tuple[Tensor, ...], output: Tensor,
               backward_fn: Callable) -> Node:
        node = Node(len(self.nodes), kind, parents, output, backward_fn, self)
        self.nodes.append(node)
        output.node = node
        return node

    def backward(self, loss: Tensor) -> Dict[Tensor, np.ndarray]:
        """Propage d(perte)/d(.) en ordre topologique inverse; retourne les gradients des feuilles"""
        if loss.size != 1:
            raise TapeError(f"La perte doit être scalaire, reçu la forme {loss.shape}")
        if loss.node is None or loss.node.tape is not self:
            raise TapeError("La perte n'a pas été calculée sur cette bande")
        if self._consumed:
            raise TapeError("backward() déjà appelé sur cette bande; appeler reset() d'abord")
        self._consumed = True

        loss.node.grad = np.ones_like(loss.data)
        leaves: Dict[Tensor, np.ndarray] = {}

        for node in reversed(self.nodes[:loss.node.id + 1]):
            if node.grad is None:
                continue
            parent_grads = node.backward_fn(node.grad)
            for parent, grad in zip(node.parents, parent_grads):
                if grad is None or not parent.requires_grad:
                    continue
                if grad.shape != parent.shape:
                    raise ShapeError(node.kind, f"gradient de forme {grad.shape} pour une "
                                                f"entrée de forme {parent.shape}")
                if parent.node is None:
                    leaves[parent] = grad if parent not in leaves else leaves[parent] + grad
                elif parent.node.tape is self:
                    previous = parent.node.grad
                    parent.node.grad = grad if previous is None else previous + grad

        # Accumulation par sommation sur les feuilles
        for leaf, grad in leaves.items():
            leaf.grad = grad.copy() if leaf.grad is None else leaf.grad + grad
        return leaves

    def reset(self):
        """Efface les gradients des noeuds et autorise un nouveau backward()"""
        for node in self.nodes:
            node.grad = None
        self._consumed = False


def backward(loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """Rétropropagation depuis une perte scalaire sur sa bande d'origine"""
    if loss.size != 1:
        raise TapeError(f"La perte doit être scalaire, reçu la forme {loss.shape}")
    if loss.node is None:
        raise TapeError("La perte n'est reliée à aucune bande (calcul hors contexte Tape ?)")
    return loss.node.tape.backward(loss)


def _as_tensor(value: Operand) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(kind: str, value: np.ndarray, parents: Tuple[Tensor, ...],
            backward_fn: Callable) -> Tensor:
    out = Tensor(value)
    tape = active_tape()
    if tape is not None and any(parent.requires_grad for parent in parents):
        out.requires_grad = True
        tape.record(kind, parents, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(kind: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(kind, f"dimensions incompatibles {a.shape} et {b.shape}") from None


def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


# --- Opérations élément par élément ---------------------------------------------------------

def add(a: Operand, b: Operand) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast('add', a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result('add', a.data + b.data, (a, b), grad_fn)


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast('sub', a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result('sub', a.data - b.data, (a, b), grad_fn)


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast('mul', a, b)

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result('mul', a.data * b.data, (a, b), grad_fn)


def div(a: Operand, b: Operand) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast('div', a, b)

    def grad_fn(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result('div', a.data / b.data, (a, b), grad_fn)


def neg(a: Operand) -> Tensor:
    a = _as_tensor(a)
    return _result('neg', -a.data, (a,), lambda g: (-g,))


def exp(a: Operand) -> Tensor:
    a = _as_tensor(a)
    value = np.exp(a.data)
    return _result('exp', value, (a,), lambda g: (g * value,))


def log(a: Operand) -> Tensor:
    a = _as_tensor(a)
    return _result('log', np.log(a.data), (a,), lambda g: (g / a.data,))


def abs_(a: Operand) -> Tensor:
    a = _as_tensor(a)
    return _result('abs', np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sqrt(a: Operand) -> Tensor:
    a = _as_tensor(a)
    value = np.sqrt(a.data)
    return _result('sqrt', value, (a,), lambda g: (g * 0.5 / value,))


def power(a: Operand, exponent: float) -> Tensor:
    a = _as_tensor(a)
    exponent = float(exponent)

    def grad_fn(g):
        return (g * exponent * np.power(a.data, exponent - 1.0),)

    return _result('power', np.power(a.data, exponent), (a,), grad_fn)


def relu(a: Operand) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _result('relu', np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


# --- Algèbre et réductions ------------------------------------------------------------------

def matmul(a: Operand, b: Operand) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError('matmul', f"produit matriciel impossible entre {a.shape} et {b.shape}")

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _result('matmul', a.data @ b.data, (a, b), grad_fn)


def sum_(a: Operand, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def grad_fn(g):
        return (np.broadcast_to(g.reshape(kept_shape), a.shape).copy(),)

    return _result('sum', a.data.sum(axis=axes, keepdims=keepdims), (a,), grad_fn)


def mean(a: Operand, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return sum_(a, axis, keepdims) * (1.0 / count)


def max_(a: Operand, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum sur des axes; le gradient va à la première occurrence du maximum"""
    a = _as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    kept = [i for i in range(a.ndim) if i not in axes]
    perm = kept + list(axes)
    kept_shape = tuple(a.shape[i] for i in kept)
    moved = a.data.transpose(perm).reshape(kept_shape + (-1,))
    index = moved.argmax(axis=-1)[..., None]
    value = np.take_along_axis(moved, index, axis=-1)[..., 0]
    if keepdims:
        value = value.reshape(tuple(1 if i in axes else n for i, n in enumerate(a.shape)))
    transposed_shape = tuple(a.shape[i] for i in perm)
    inverse = np.argsort(perm)

    def grad_fn(g):
        spread = np.zeros_like(moved)
        np.put_along_axis(spread, index, g.reshape(kept_shape + (1,)), axis=-1)
        return (spread.reshape(transposed_shape).transpose(inverse),)

    return _result('max', value, (a,), grad_fn)


# --- Manipulations de forme -----------------------------------------------------------------

def reshape(a: Operand, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    try:
        value = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError('reshape', f"impossible de passer de {a.shape} à {tuple(shape)}") from None
    return _result('reshape', value, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Operand, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError('transpose', f"permutation {axes} invalide pour {a.ndim} dimensions")
    inverse = tuple(np.argsort(axes))
    return _result('transpose', a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def broadcast_to(a: Operand, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        value = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError('broadcast', f"impossible de diffuser {a.shape} vers {shape}") from None
    return _result('broadcast', value, (a,), lambda g: (_unbroadcast(g, a.shape),))


def concat(tensors: Sequence[Operand], axis: int = 1) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError('concat', "aucune entrée")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        same = t.ndim == ndim and all(
            t.shape[i] == tensors[0].shape[i] for i in range(ndim) if i != axis)
        if not same:
            raise ShapeError('concat', f"dimensions incompatibles {tensors[0].shape} et {t.shape} "
                                       f"hors de l'axe {axis}")
    offsets = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _result('concat', np.concatenate([t.data for t in tensors], axis=axis), tensors,
                   grad_fn)


def slice_(a: Operand, key) -> Tensor:
    a = _as_tensor(a)
    try:
        value = np.array(a.data[key])
    except IndexError as e:
        raise ShapeError('slice', f"index {key!r} invalide pour {a.shape} ({e})") from None

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _result('slice', value, (a,), grad_fn)


# --- Opérations spatiales (N, C, Y, X) ------------------------------------------------------

def _padding_for(kind: str, padding, kernel: int) -> int:
    if padding == 'same':
        if kernel % 2 == 0:
            raise ShapeError(kind, f"noyau pair {kernel} incompatible avec le padding 'same'")
        return kernel // 2
    if padding == 'valid':
        return 0
    return int(padding)


def conv2d(x: Operand, weight: Operand, bias: Optional[Operand] = None, stride: int = 1,
           padding='same') -> Tensor:
    """Convolution 2D (corrélation croisée), bord complété par des zéros"""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError('conv2d', f"entrée {x.shape} et noyau {weight.shape} doivent être 4-D")
    n, c, h, w = x.shape
    out_c, in_c, k, k2 = weight.shape
    if k != k2:
        raise ShapeError('conv2d', f"noyau non carré {weight.shape}")
    if c != in_c:
        raise ShapeError('conv2d', f"canaux d'entrée {c} != canaux du noyau {in_c}")
    pad = _padding_for('conv2d', padding, k)
    parents = (x, weight)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (out_c,):
            raise ShapeError('conv2d', f"biais {bias.shape} attendu ({out_c},)")
        parents = (x, weight, bias)

    padded = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    if padded.shape[2] < k or padded.shape[3] < k:
        raise ShapeError('conv2d', f"entrée {x.shape} plus petite que le noyau {k}x{k}")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    value = np.einsum('nchwij,ocij->nohw', windows, weight.data, optimize=True)
    if bias is not None:
        value = value + bias.data[None, :, None, None]
    out_h, out_w = value.shape[2], value.shape[3]

    def grad_fn(g):
        grad_w = np.einsum('nohw,nchwij->ocij', g, windows, optimize=True)
        grad_padded = np.zeros_like(padded)
        for i in range(k):
            for j in range(k):
                grad_padded[:, :, i:i + stride * (out_h - 1) + 1:stride,
                            j:j + stride * (out_w - 1) + 1:stride] += np.einsum(
                    'nohw,oc->nchw', g, weight.data[:, :, i, j], optimize=True)
        grad_x = grad_padded[:, :, pad:pad + h, pad:pad + w]
        grads = [np.ascontiguousarray(grad_x), grad_w]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _result('conv2d', value, parents, grad_fn)


def max_pool2(x: Operand) -> Tensor:
    """Max pooling 2x2, pas de 2"""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError('max_pool2', f"entrée 4-D attendue, reçu {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError('max_pool2', f"dimensions spatiales impaires {h}x{w}")
    blocks = (x.data.reshape(n, c, h // 2, 2, w // 2, 2)
              .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4))
    index = blocks.argmax(axis=-1)[..., None]
    value = np.take_along_axis(blocks, index, axis=-1)[..., 0]

    def grad_fn(g):
        spread = np.zeros_like(blocks)
        np.put_along_axis(spread, index, g[..., None], axis=-1)
        return (spread.reshape(n, c, h // 2, w // 2, 2, 2)
                .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _result('max_pool2', value, (x,), grad_fn)


@lru_cache(maxsize=None)
def bilinear_matrix(size: int) -> np.ndarray:
    """Matrice (2n, n) d'interpolation bilinéaire x2, convention align_corners=False"""
    matrix = np.zeros((2 * size, size), dtype=DTYPE)
    for out in range(2 * size):
        source = max((out + 0.5) / 2.0 - 0.5, 0.0)
        low = min(int(np.floor(source)), size - 1)
        high = min(low + 1, size - 1)
        frac = source - low
        matrix[out, low] += 1.0 - frac
        matrix[out, high] += frac
    matrix.setflags(write=False)
    return matrix


def upsample_bilinear2(x: Operand) -> Tensor:
    """Suréchantillonnage bilinéaire x2 (séparable, align_corners=False)"""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError('upsample_bilinear2', f"entrée 4-D attendue, reçu {x.shape}")
    rows = bilinear_matrix(x.shape[2])
    cols = bilinear_matrix(x.shape[3])
    value = np.einsum('ph,nchw,qw->ncpq', rows, x.data, cols, optimize=True)

    def grad_fn(g):
        return (np.einsum('ph,ncpq,qw->nchw', rows, g, cols, optimize=True),)

    return _result('upsample_bilinear2', value, (x,), grad_fn)


# Registre des opérations par nom
OPS: Dict[str, Callable[..., Tensor]] = {
    'add': add,
    'sub': sub,
    'mul': mul,
    'div': div,
    'neg': neg,
    'exp': exp,
    'log': log,
    'abs': abs_,
    'sqrt': sqrt,
    'power': power,
    'relu': relu,
    'matmul': matmul,
    'sum': sum_,
    'mean': mean,
    'max': max_,
    'reshape': reshape,
    'transpose': transpose,
    'broadcast': broadcast_to,
    'concat': concat,
    'slice': slice_,
    'conv2d': conv2d,
    'max_pool2': max_pool2,
    'upsample_bilinear2': upsample_bilinear2,
}


def forward_op(kind: str, *inputs: Operand, **params) -> Tensor:
    """Applique une opération enregistrée par son nom"""
    if kind not in OPS:
        raise ValueError(f"Opération non supportée: {kind}")
    if kind == 'concat':
        return concat(inputs, **params)
    return OPS[kind](*inputs, **params)
