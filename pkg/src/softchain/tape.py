"""Scalar tape for proof scores.

A proof score is a min over RBF kernel evaluations, a query score is a max
over proof scores, and training adds a log loss on top.  The tape records
exactly those ops in creation order, which is already topological.

Min and Max remember the child they selected (lowest position on exact
ties) and route the whole adjoint to it.
"""

from __future__ import annotations

import math
from collections import defaultdict

import numpy as np

CONST, KERNEL, MIN, MAX, LOSS = range(5)
LOSS_EPS = 1e-8

_NAMES = {CONST: "Const", KERNEL: "KernelEval", MIN: "Min", MAX: "Max", LOSS: "Loss"}


class Tape:
    __slots__ = ("ops", "args", "values")

    def __init__(self) -> None:
        self.ops: list[int] = []
        self.args: list = []
        self.values: list[float] = []

    def __len__(self) -> int:
        return len(self.ops)

    def _push(self, op: int, args, value: float) -> int:
        self.ops.append(op)
        self.args.append(args)
        self.values.append(value)
        return len(self.ops) - 1

    def const(self, value: float) -> int:
        return self._push(CONST, None, float(value))

    def kernel(self, a: int, b: int, value: float) -> int:
        """Record ``k(theta_a, theta_b)``; the caller supplies the forward value."""
        return self._push(KERNEL, (a, b), float(value))

    def min(self, children) -> int:
        vals = self.values
        best = 0
        bv = vals[children[0]]
        for i in range(1, len(children)):
            v = vals[children[i]]
            if v < bv:
                best, bv = i, v
        return self._push(MIN, (tuple(children), best), bv)

    def max(self, children) -> int:
        vals = self.values
        best = 0
        bv = vals[children[0]]
        for i in range(1, len(children)):
            v = vals[children[i]]
            if v > bv:
                best, bv = i, v
        return self._push(MAX, (tuple(children), best), bv)

    def loss(self, child: int, label: int) -> int:
        """Negative log-likelihood of ``label`` under score ``child``."""
        s = self.values[child]
        value = -math.log(s) if label else -math.log(1.0 - s + LOSS_EPS)
        return self._push(LOSS, (child, int(label)), value)

    def value(self, node: int) -> float:
        return self.values[node]

    def selected(self, node: int) -> int:
        """Child node picked by a Min/Max node."""
        children, pos = self.args[node]
        return children[pos]

    def margin(self, node: int) -> float:
        """Gap between the selected child and the runner-up of a Min/Max node."""
        children, pos = self.args[node]
        if len(children) < 2:
            return math.inf
        v = self.values[children[pos]]
        return min(abs(self.values[c] - v) for i, c in enumerate(children) if i != pos)

    def active(self, root: int) -> list[int]:
        """Nodes reachable from ``root`` through selected children only."""
        out, stack = [], [root]
        while stack:
            n = stack.pop()
            out.append(n)
            op = self.ops[n]
            if op in (MIN, MAX):
                stack.append(self.selected(n))
            elif op == LOSS:
                stack.append(self.args[n][0])
        return out

    def describe(self, node: int) -> str:
        return f"{_NAMES[self.ops[node]]}#{node}={self.values[node]:.6g}"


def backward(tape: Tape, root: int, vectors: np.ndarray, mu: float) -> dict[int, np.ndarray]:
    """Reverse accumulation from ``root``; returns ``{symbol id: gradient}``.

    ``vectors`` must be the embedding matrix the forward pass used.
    """
    adj = defaultdict(float)
    adj[root] = 1.0
    grads: dict[int, np.ndarray] = {}
    inv_mu2 = 1.0 / (mu * mu)
    ops, args, values = tape.ops, tape.args, tape.values
    for n in range(root, -1, -1):
        g = adj.get(n)
        if not g:
            continue
        op = ops[n]
        if op == KERNEL:
            a, b = args[n]
            if a == b:
                continue
            step = (g * values[n] * inv_mu2) * (vectors[b] - vectors[a])
            if a in grads:
                grads[a] += step
            else:
                grads[a] = step.copy()
            if b in grads:
                grads[b] -= step
            else:
                grads[b] = -step
        elif op == MIN or op == MAX:
            children, pos = args[n]
            adj[children[pos]] += g
        elif op == LOSS:
            child, label = args[n]
            s = values[child]
            d = -1.0 / s if label else 1.0 / (1.0 - s + LOSS_EPS)
            adj[child] += g * d
    return grads
