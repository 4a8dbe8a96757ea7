"""反向模式自动微分（稠密 float64 张量）

Tape 按创建顺序记录每个原语及其局部偏导（vector-Jacobian 闭包），
节点编号天然是拓扑序；backward 逆序各访问一次。参数通过 ParameterSet
命名管理，Tape 创建时对参数值做快照。
"""

import logging

import numpy as np
from scipy.special import logsumexp as _logsumexp, softmax as _softmax

from ..errors import (
    DivisionByZero,
    LogOfNonPositive,
    NoExit,
    NonScalarRoot,
    ShapeMismatch,
)

logger = logging.getLogger("voronoi-flows.autodiff")


class ParameterSet:
    """命名参数表

    数组对象只会被整体替换（优化器、梯度检查都赋新数组），
    因此浅拷贝即可作为 Tape 的参数快照。
    """

    def __init__(self):
        self._values = {}
        self._frozen = set()

    def add(self, name, value, trainable=True):
        if name in self._values:
            raise ValueError(f"参数重复注册: {name}")
        self._values[name] = np.array(value, dtype=np.float64)
        if not trainable:
            self._frozen.add(name)
        return self._values[name]

    def __getitem__(self, name):
        return self._values[name]

    def __setitem__(self, name, value):
        value = np.array(value, dtype=np.float64)
        if name in self._values and value.shape != self._values[name].shape:
            raise ShapeMismatch(f"参数 {name} 形状不符: {value.shape} != {self._values[name].shape}")
        self._values[name] = value

    def __contains__(self, name):
        return name in self._values

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def items(self):
        return self._values.items()

    def names(self):
        return list(self._values)

    def trainable_names(self):
        return [name for name in self._values if name not in self._frozen]

    def is_trainable(self, name):
        return name not in self._frozen

    def freeze(self, name):
        self._frozen.add(name)

    def unfreeze(self, name):
        self._frozen.discard(name)

    def snapshot(self):
        return dict(self._values)

    def copy(self):
        other = ParameterSet()
        other._values = {name: value.copy() for name, value in self._values.items()}
        other._frozen = set(self._frozen)
        return other

    def assign(self, other):
        for name, value in other.items():
            self[name] = value

    def num_values(self):
        return int(np.sum([value.size for value in self._values.values()]))


class Var:
    """Tape 上的一个张量值；index < 0 表示常量（不参与反向传播）"""

    __slots__ = ("tape", "value", "index")
    __array_priority__ = 100

    def __init__(self, tape, value, index):
        self.tape = tape
        self.value = value
        self.index = index

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def numpy(self):
        return self.value

    def __repr__(self):
        return f"Var(shape={self.value.shape}, index={self.index})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return slice_(self, key)


class Tape:
    """记录一次前向计算的计算图

    参数:
        params: ParameterSet，可为 None（仅使用 param(name, value) 临时叶子）
        record: False 时只做数值计算，不保存局部偏导
    """

    def __init__(self, params=None, record=True):
        self.params = params
        self.record = record
        self._snapshot = params.snapshot() if params is not None else {}
        self._parents = []
        self._vjps = []
        self._leaves = {}

    def __len__(self):
        return len(self._vjps)

    def _node(self, value, parents, vjp):
        if not self.record or all(p.index < 0 for p in parents):
            return Var(self, value, -1)
        index = len(self._vjps)
        self._parents.append(tuple(p.index for p in parents))
        self._vjps.append(vjp)
        return Var(self, value, index)

    def constant(self, value):
        return Var(self, np.asarray(value, dtype=np.float64), -1)

    def lift(self, value):
        if isinstance(value, Var):
            if value.tape is not self:
                raise ValueError("不能混用不同 Tape 上的 Var")
            return value
        return self.constant(value)

    def param(self, name, value=None):
        """取参数叶子节点；同一个 Tape 上同名参数只建一次"""
        if name in self._leaves:
            return self._leaves[name]
        if value is None:
            value = self._snapshot[name]
        value = np.asarray(value, dtype=np.float64)
        trainable = self.params is None or name not in self.params or self.params.is_trainable(name)
        if self.record and trainable:
            leaf = Var(self, value, len(self._vjps))
            self._parents.append(())
            self._vjps.append(None)
        else:
            leaf = Var(self, value, -1)
        self._leaves[name] = leaf
        return leaf

    def backward(self, root):
        """从标量根节点反向传播，返回 {参数名: 梯度}

        未被使用的参数梯度为同形状的零张量。
        """
        if np.ndim(root.value) != 0:
            raise NonScalarRoot(f"反向传播的根节点必须是标量, 实际形状 {np.shape(root.value)}")
        grads = [None] * len(self._vjps)
        if root.index >= 0:
            grads[root.index] = np.ones_like(root.value)
        for i in range(root.index, -1, -1):
            g = grads[i]
            vjp = self._vjps[i]
            if g is None or vjp is None:
                continue
            for parent, pg in zip(self._parents[i], vjp(g)):
                if parent < 0 or pg is None:
                    continue
                grads[parent] = pg if grads[parent] is None else grads[parent] + pg

        result = {}
        if self.params is not None:
            for name, value in self.params.items():
                result[name] = np.zeros_like(value)
        for name, leaf in self._leaves.items():
            g = grads[leaf.index] if leaf.index >= 0 else None
            result[name] = np.zeros_like(leaf.value) if g is None else np.array(g, dtype=np.float64)
        return result


def backward(tape, scalar):
    return tape.backward(scalar)


# ============= 原语 =============

def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("原语至少需要一个 Var 操作数")


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary(a, b):
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeMismatch(f"形状不兼容: {a.shape} 与 {b.shape}") from e
    return tape, a, b


def add(a, b):
    tape, a, b = _binary(a, b)
    sa, sb = a.shape, b.shape
    return tape._node(a.value + b.value, (a, b),
                      lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    tape, a, b = _binary(a, b)
    sa, sb = a.shape, b.shape
    return tape._node(a.value - b.value, (a, b),
                      lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    tape, a, b = _binary(a, b)
    av, bv = a.value, b.value
    return tape._node(av * bv, (a, b),
                      lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b):
    tape, a, b = _binary(a, b)
    av, bv = a.value, b.value
    if np.any(bv == 0):
        raise DivisionByZero("除数包含 0")
    out = av / bv
    return tape._node(out, (a, b),
                      lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)))


def neg(x):
    return x.tape._node(-x.value, (x,), lambda g: (-g,))


def square(x):
    xv = x.value
    return x.tape._node(xv * xv, (x,), lambda g: (2.0 * g * xv,))


def sum(x, axis=None, keepdims=False):  # noqa: A001 - 与 numpy 同名
    shape = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return x.tape._node(np.sum(x.value, axis=axis, keepdims=keepdims), (x,), vjp)


def dot(a, b):
    """最后一维上的内积（支持批量）"""
    tape, a, b = _binary(a, b)
    av, bv = a.value, b.value
    return tape._node(np.sum(av * bv, axis=-1), (a, b),
                      lambda g: (_unbroadcast(g[..., None] * bv, av.shape),
                                 _unbroadcast(g[..., None] * av, bv.shape)))


def matmul(a, b):
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeMismatch(f"matmul 形状不兼容: {av.shape} @ {bv.shape}")
    return tape._node(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(x):
    if x.ndim != 2:
        raise ShapeMismatch(f"transpose 只支持矩阵, 实际形状 {x.shape}")
    return x.tape._node(x.value.T, (x,), lambda g: (g.T,))


def matvec(m, v):
    tape = _tape_of(m, v)
    m, v = tape.lift(m), tape.lift(v)
    mv, vv = m.value, v.value
    if mv.ndim != 2 or vv.ndim != 1 or mv.shape[1] != vv.shape[0]:
        raise ShapeMismatch(f"matvec 形状不兼容: {mv.shape} @ {vv.shape}")
    return tape._node(mv @ vv, (m, v), lambda g: (np.outer(g, vv), mv.T @ g))


def exp(x):
    out = np.exp(x.value)
    return x.tape._node(out, (x,), lambda g: (g * out,))


def log(x):
    xv = x.value
    if np.any(xv <= 0):
        raise LogOfNonPositive(f"log 的输入包含非正数 (min={np.min(xv):.3e})")
    return x.tape._node(np.log(xv), (x,), lambda g: (g / xv,))


def sqrt(x):
    out = np.sqrt(x.value)
    return x.tape._node(out, (x,), lambda g: (g / (2.0 * out),))


def tanh(x):
    out = np.tanh(x.value)
    return x.tape._node(out, (x,), lambda g: (g * (1.0 - out * out),))


def sinh(x):
    xv = x.value
    return x.tape._node(np.sinh(xv), (x,), lambda g: (g * np.cosh(xv),))


def asinh(x):
    xv = x.value
    return x.tape._node(np.arcsinh(xv), (x,), lambda g: (g / np.sqrt(1.0 + xv * xv),))


def logcosh(x):
    """log cosh(x) = |x| + log1p(exp(-2|x|)) - log 2，大输入不溢出"""
    xv = x.value
    ax = np.abs(xv)
    out = ax + np.log1p(np.exp(-2.0 * ax)) - np.log(2.0)
    return x.tape._node(out, (x,), lambda g: (g * np.tanh(xv),))


def abs(x):  # noqa: A001
    xv = x.value
    return x.tape._node(np.abs(xv), (x,), lambda g: (g * np.sign(xv),))


def sigmoid(x):
    out = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return x.tape._node(out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x):
    xv = x.value
    s = 0.5 * (1.0 + np.tanh(0.5 * xv))
    return x.tape._node(np.logaddexp(0.0, xv), (x,), lambda g: (g * s,))


def relu(x):
    xv = x.value
    return x.tape._node(np.maximum(xv, 0.0), (x,), lambda g: (g * (xv > 0),))


def logsumexp(x, axis=-1):
    xv = x.value
    weights = _softmax(xv, axis=axis)
    return x.tape._node(_logsumexp(xv, axis=axis), (x,),
                        lambda g: (np.expand_dims(g, axis) * weights,))


def reshape(x, shape):
    old = x.shape
    return x.tape._node(np.reshape(x.value, shape), (x,), lambda g: (np.reshape(g, old),))


def broadcast_to(x, shape):
    old = x.shape
    try:
        out = np.broadcast_to(x.value, shape)
    except ValueError as e:
        raise ShapeMismatch(f"无法把 {old} 广播到 {shape}") from e
    return x.tape._node(out, (x,), lambda g: (_unbroadcast(g, old),))


def slice_(x, key):
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)

    return x.tape._node(x.value[key], (x,), vjp)


def take(x, indices, axis=0):
    """按第 0 维取行（可重复）"""
    if axis != 0:
        raise ValueError("take 只支持 axis=0")
    indices = np.asarray(indices, dtype=np.int64)
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, indices, g)
        return (out,)

    return x.tape._node(x.value[indices], (x,), vjp)


def pick(x, indices):
    """每行取一个元素: out[n] = x[n, indices[n]]"""
    indices = np.asarray(indices, dtype=np.int64)
    rows = np.arange(x.shape[0])
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        out[rows, indices] = g
        return (out,)

    return x.tape._node(x.value[rows, indices], (x,), vjp)


def concat(xs, axis=0):
    tape = _tape_of(*xs)
    xs = [tape.lift(x) for x in xs]
    try:
        out = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError as e:
        raise ShapeMismatch(f"concat 形状不兼容: {[x.shape for x in xs]}") from e
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tape._node(out, tuple(xs), lambda g: tuple(np.split(g, splits, axis=axis)))


def where(mask, a, b):
    tape, a, b = _binary(a, b)
    mask = np.asarray(mask, dtype=bool)
    sa, sb = a.shape, b.shape
    return tape._node(np.where(mask, a.value, b.value), (a, b),
                      lambda g: (_unbroadcast(np.where(mask, g, 0.0), sa),
                                 _unbroadcast(np.where(mask, 0.0, g), sb)))


def select_min_positive(x, mask=None):
    """沿最后一维选取最小的正数元素

    返回 (最小值 Var, 下标数组)；并列时取最小下标，梯度只流向被选中的元素。
    """
    xv = x.value
    candidates = xv > 0
    if mask is not None:
        candidates &= np.asarray(mask, dtype=bool)
    if not np.all(np.any(candidates, axis=-1)):
        raise NoExit("没有正的候选值")
    scores = np.where(candidates, xv, np.inf)
    index = np.argmin(scores, axis=-1)
    if xv.ndim == 1:
        shape = xv.shape

        def vjp_1d(g):
            out = np.zeros(shape)
            out[index] = g
            return (out,)

        return x.tape._node(xv[index], (x,), vjp_1d), int(index)
    return pick(x, index), index


def swish(x):
    return x * sigmoid(x)


def gelu(x):
    # tanh 近似
    inner = 0.7978845608028654 * (x + 0.044715 * x * square(x))
    return 0.5 * x * (1.0 + tanh(inner))


def grad_check(f, params, step=1e-5, names=None, max_coords=None, rng=None, atol=1e-6):
    """用中心差分检查 f 对参数的梯度

    参数:
        f: 以 Tape 为参数、返回标量 Var 的函数
        params: ParameterSet
        step: 差分步长
        names: 需要检查的参数名，默认全部可训练参数
        max_coords: 每个参数最多抽查的坐标数
        atol: 相对误差分母的下限

    返回:
        worst: 所有被检查坐标上最大的相对误差
    """
    tape = Tape(params)
    grads = tape.backward(f(tape))
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for name in names or params.trainable_names():
        original = params[name]
        coords = np.arange(original.size)
        if max_coords is not None and original.size > max_coords:
            coords = rng.choice(original.size, size=max_coords, replace=False)
        for i in coords:
            values = []
            for sign in (1.0, -1.0):
                perturbed = original.copy()
                perturbed.flat[i] += sign * step
                params[name] = perturbed
                values.append(float(f(Tape(params, record=False)).value))
            params[name] = original
            numeric = (values[0] - values[1]) / (2.0 * step)
            analytic = float(grads[name].flat[i])
            scale = max(np.abs(analytic), np.abs(numeric), atol)
            err = np.abs(analytic - numeric) / scale
            if err > worst:
                worst = err
                logger.debug(f"grad_check {name}[{i}]: 解析={analytic:.6e}, 差分={numeric:.6e}, 相对误差={err:.3e}")
    return float(worst)
