"""Tensor type and the reverse-mode tape."""
import itertools

import numpy as np


class NonFiniteError(ValueError):
    """A NaN or Inf appeared in a forward value or gradient."""


_ids = itertools.count()


def check_finite(arr, what):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return arr


class Node:
    """One recorded operator application.

    ``backward`` maps the output gradient to a tuple with one entry per
    input (``None`` for inputs that do not need a gradient).
    """

    __slots__ = ("id", "kind", "inputs", "backward")

    def __init__(self, kind, inputs, backward):
        self.id = next(_ids)
        self.kind = kind
        self.inputs = inputs
        self.backward = backward


class Tensor:
    """An n-d float64 array with an optional gradient slot.

    Leaf tensors created with ``requires_grad=True`` are parameters; their
    ``grad`` starts at zero and accumulates across ``backward`` calls until
    :meth:`zero_grad`.
    """

    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        check_finite(arr, name or "tensor data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node = None
        self.name = name
        self.grad = np.zeros_like(arr) if requires_grad else None

    @classmethod
    def _from_op(cls, data, kind, inputs, backward):
        """Build an op output, recording a node only if some input needs grad."""
        out = cls.__new__(cls)
        out.data = check_finite(np.asarray(data, dtype=np.float64), kind)
        out.grad = None
        out.name = None
        out.requires_grad = any(t.requires_grad for t in inputs)
        out.node = Node(kind, inputs, backward) if out.requires_grad else None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self.node is None

    def item(self):
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def zero_grad(self):
        if self.requires_grad and self.is_leaf:
            self.grad = np.zeros_like(self.data)

    def backward(self):
        ComputeGraph.from_root(self).backward(self)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # arithmetic sugar; definitions live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def sum(self):
        from . import ops
        return ops.sum(self)

    def mean(self):
        from . import ops
        return ops.mean(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class ComputeGraph:
    """Nodes reachable from a root, in construction order.

    Node ids come from a global counter, so sorting by id recovers the order
    in which operators ran; every input's node precedes its consumer.
    """

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root):
        seen = set()
        nodes = []
        stack = [root]
        while stack:
            t = stack.pop()
            node = t.node
            if node is None or node.id in seen:
                continue
            seen.add(node.id)
            nodes.append(node)
            stack.extend(node.inputs)
        nodes.sort(key=lambda n: n.id)
        return cls(nodes)

    def __len__(self):
        return len(self.nodes)

    def backward(self, root):
        if root.data.size != 1:
            raise ValueError(f"backward root must be a scalar, got shape {root.shape}")
        if not root.requires_grad:
            return
        if root.is_leaf:
            root.grad = root.grad + 1.0
            return
        grads = {root.node.id: np.ones_like(root.data)}
        for node in reversed(self.nodes):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                check_finite(gi, f"gradient of {node.kind}")
                if t.node is None:
                    t.grad = t.grad + gi
                elif t.node.id in grads:
                    grads[t.node.id] = grads[t.node.id] + gi
                else:
                    grads[t.node.id] = gi
