"""Dense tensors, the gradient tape and seeded random streams."""
import contextlib
import hashlib
import threading

import numpy as np

from .errors import ContractError

_PRECISIONS = {"single": np.float32, "double": np.float64}
_default_dtype = np.float32


def set_precision(name):
    global _default_dtype
    if name not in _PRECISIONS:
        raise ContractError(f"precision must be one of {sorted(_PRECISIONS)}, got {name!r}")
    _default_dtype = _PRECISIONS[name]


def get_dtype():
    return _default_dtype


def precision_name(dtype=None):
    dtype = np.dtype(dtype or _default_dtype)
    return "double" if dtype == np.float64 else "single"


@contextlib.contextmanager
def precision(name):
    old = _default_dtype
    set_precision(name)
    try:
        yield
    finally:
        set_precision(precision_name(old))


class Tensor:
    """Row-major real array with optional gradient tracking.

    ``grad`` is filled in by :meth:`GradientTape.backward` for leaf tensors
    (tensors not produced by a recorded op).
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _default_dtype)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def copy(self, requires_grad=None):
        rg = self.requires_grad if requires_grad is None else requires_grad
        return Tensor(self.data.copy(), requires_grad=rg, name=self.name, dtype=self.data.dtype)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={list(self.shape)}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


_local = threading.local()


def active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class GradientTape:
    """Ordered record of differentiable ops.

    Ops executed inside ``with GradientTape() as tape:`` on the current
    thread are appended in execution order, so replaying the list backwards
    is a reverse topological traversal.  Each thread has its own stack of
    active tapes.
    """

    def __init__(self):
        self.nodes = []
        self.kinks = []

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def record(self, op, inputs, output, backward):
        self.nodes.append(_Node(op, inputs, output, backward))

    def note_kink(self, op, pattern):
        """Remember the branch pattern of a piecewise op (relu mask, pool argmax, clamp mask)."""
        self.kinks.append((op, np.packbits(np.asarray(pattern).astype(np.uint8).ravel()).tobytes()))

    def kink_signature(self):
        h = hashlib.sha256()
        for op, pattern in self.kinks:
            h.update(op.encode())
            h.update(pattern)
        return h.hexdigest()

    def clear(self):
        self.nodes.clear()
        self.kinks.clear()

    def backward(self, loss, params=None):
        """Propagate d(loss)/d(.) through the tape.

        Leaf tensors reached get ``.grad`` assigned (replacing any previous
        value).  When ``params`` is given, returns their gradients in order,
        with zeros for parameters the loss does not depend on.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
        grads = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
                leaves[key] = t
        produced = {id(n.output) for n in self.nodes}
        for key, t in leaves.items():
            if key not in produced:
                t.grad = grads[key]
        if id(loss) not in produced and loss.requires_grad:
            loss.grad = grads.get(id(loss))
        if params is None:
            return None
        out = []
        for p in params:
            g = grads.get(id(p)) if id(p) not in produced else None
            if g is None:
                g = np.zeros_like(p.data)
                p.grad = g
            out.append(g)
        return out


class RngStream:
    """Counter-based random stream keyed by a 64-bit seed plus integer keys.

    Backed by numpy's Philox bit generator, so a given (seed, key, position)
    produces the same draws on every platform.
    """

    def __init__(self, seed, *key):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.key = tuple(int(k) for k in key)
        seq = np.random.SeedSequence([self.seed, *self.key])
        self._bitgen = np.random.Philox(seq)
        self.generator = np.random.Generator(self._bitgen)

    def child(self, *key):
        return RngStream(self.seed, *self.key, *key)

    @property
    def position(self):
        st = self._bitgen.state["state"]
        return int(st["counter"][0]) | (int(st["counter"][1]) << 64)

    def advance(self, n):
        self._bitgen.advance(n)
        return self

    # thin pass-throughs used across the package
    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self.generator.choice(a, size=size, replace=replace)

    def dirichlet(self, alpha, size=None):
        return self.generator.dirichlet(alpha, size)
