"""Reverse-mode autodiff on a linear tape.

Every op appends one node, so the tape order is already topological and the
backward sweep is a single reversed pass with deterministic accumulation
order. Gradients stay attached to their tensors until ``zero_grads``, so
intermediate activations can be inspected after a backward pass; Grad-CAM
reads the gradient at an internal feature map this way.

``backward`` optionally takes ``targets``: a set of tensors whose gradients
are wanted. Nodes that cannot reach a target are skipped entirely, which
turns, for example, a logit-to-feature-map pull into a pass over just the
classifier head instead of the whole network.
"""

import numpy as np

from gradcamo.errors import ValidationError

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A value on a tape plus its accumulated gradient.

    Do not construct directly; use ``Tape.var`` for leaves and the ops in
    ``gradcamo.engine.ops`` for everything else. ``data`` is treated as
    immutable once recorded.
    """

    __slots__ = ("data", "grad", "op", "nid", "tape", "parents", "_bwd")

    def __init__(self, data, op, nid, tape, parents, bwd):
        self.data = data
        self.grad = None
        self.op = op
        self.nid = nid
        self.tape = tape
        self.parents = parents
        self._bwd = bwd

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def grad_array(self):
        """The gradient, or zeros when no gradient has reached this node."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, nid={self.nid})"


class Tape:
    """Records tensors in creation order and replays them in reverse.

    The recorded graph is a web of reference cycles (tape -> node -> tape),
    so a dropped tape waits for the cycle collector while holding every
    intermediate activation. Loops that build a tape per batch should use
    the tape as a context manager, which calls ``release`` on exit.
    """

    def __init__(self):
        self._nodes = []
        self._released = False

    def __len__(self):
        return len(self._nodes)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.release()
        return False

    def release(self):
        """Break the graph's reference cycles and free the closures.

        Tensors keep their data and any already-accumulated gradients, but
        the tape can no longer record or replay.
        """
        for node in self._nodes:
            node._bwd = None
            node.parents = ()
        self._nodes.clear()
        self._released = True

    def var(self, data, op="leaf"):
        """Record an independent variable (a parameter or traced input)."""
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            raise ValidationError(
                f"tape variables must be float32 or float64, got {arr.dtype}")
        return self._record(np.ascontiguousarray(arr), op, (), None)

    def _record(self, data, op, parents, bwd):
        if self._released:
            raise ValidationError("cannot record on a released tape")
        node = Tensor(data, op, len(self._nodes), self, parents, bwd)
        self._nodes.append(node)
        return node

    def zero_grads(self):
        for node in self._nodes:
            node.grad = None

    def backward(self, loss, targets=None):
        """Accumulate d(loss)/d(node) into ``node.grad`` for reachable nodes.

        ``loss`` must be a scalar tensor on this tape. When ``targets`` is
        given, only nodes with a target somewhere below them participate;
        gradients elsewhere are neither computed nor stored.
        """
        if self._released:
            raise ValidationError("cannot replay a released tape")
        if loss.tape is not self:
            raise ValidationError("loss tensor lives on a different tape")
        if loss.data.shape != ():
            raise ValidationError(
                f"backward needs a scalar loss, got shape {loss.data.shape}")

        wanted = None
        if targets is not None:
            targets = list(targets)
            for t in targets:
                if t.tape is not self:
                    raise ValidationError("target tensor lives on a different tape")
            wanted = np.zeros(len(self._nodes), dtype=bool)
            for t in targets:
                wanted[t.nid] = True
            # A node participates iff some parent chain below it reaches a
            # target. Parents always precede children on the tape, so one
            # forward scan settles every node.
            first = min(t.nid for t in targets)
            for child in self._nodes[first + 1:]:
                if wanted[child.nid]:
                    continue
                for p in child.parents:
                    if wanted[p.nid]:
                        wanted[child.nid] = True
                        break

        if loss.grad is None:
            loss.grad = np.ones((), dtype=loss.data.dtype)
        else:
            loss.grad = loss.grad + np.ones((), dtype=loss.data.dtype)

        for node in reversed(self._nodes[: loss.nid + 1]):
            if node.grad is None or node._bwd is None:
                continue
            if wanted is not None and not wanted[node.nid]:
                continue
            grads = node._bwd(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None:
                    continue
                if wanted is not None and not wanted[parent.nid]:
                    continue
                if parent.grad is None:
                    parent.grad = g
                elif parent.grad.flags.writeable:
                    # Every bwd closure returns freshly allocated arrays, so
                    # the existing buffer is safe to update in place.
                    np.add(parent.grad, g, out=parent.grad)
                else:
                    parent.grad = parent.grad + g
