"""Randomised small graphs and a finite-difference oracle for autodiff tests."""

import numpy as np

from vqa_attrib import tensor as T
from vqa_attrib.tensor import ReluMode, Tape

FD_STEP = 1e-3
RTOL = 1e-2
ATOL = 1e-5
MAX_PARAMS = 200


class RandomGraph:
    """A small network drawn at random, with <= 200 parameters in total.

    ``build(tape, leaves)`` records the graph on ``tape`` and returns the
    scalar output; ``leaves`` maps names to arrays.
    """

    def __init__(self, rng: np.random.Generator, allow_relu: bool = True):
        self.rng = rng
        self.allow_relu = allow_relu
        self.kind = rng.choice(["mlp", "conv", "bag"])
        self.acts = [self._act() for _ in range(3)]
        self.seed_kind = rng.choice(["prob", "xent", "sum"])
        self.leaves = self._init_leaves()
        n = sum(v.size for v in self.leaves.values())
        assert n <= MAX_PARAMS, (self.kind, n)

    def _act(self):
        choices = ["relu", "tanh", "none"] if self.allow_relu else ["tanh", "none"]
        return self.rng.choice(choices)

    def _init_leaves(self):
        r = self.rng
        u = lambda *s: r.uniform(-1, 1, size=s)  # noqa: E731
        if self.kind == "mlp":
            d0, d1, d2, k = r.integers(2, 6), r.integers(2, 7), r.integers(2, 7), r.integers(2, 5)
            return {"x": u(1, d0), "w1": u(d1, d0), "b1": u(d1), "w2": u(d2, d1), "b2": u(d2),
                    "w3": u(k, d2), "b3": u(k)}
        if self.kind == "conv":
            c, o, k = r.integers(1, 3), r.integers(1, 3), r.integers(2, 4)
            return {"x": u(1, c, 4, 4), "cw": u(o, c, 3, 3), "cb": u(o),
                    "w1": u(3, o * 4), "b1": u(3), "w2": u(k, 3), "b2": u(k)}
        v, d, k = r.integers(3, 6), r.integers(2, 5), r.integers(2, 5)
        toks = r.integers(0, v, size=r.integers(1, 4))
        self.tokens = [int(t) for t in toks]
        return {"emb": u(v, d), "x": u(1, d), "w1": u(d, d), "b1": u(d), "w2": u(k, d), "b2": u(k)}

    def _activate(self, name, h):
        if name == "relu":
            return T.relu(h)
        if name == "tanh":
            return T.tanh(h)
        return h

    def build(self, tape: Tape, leaves=None):
        leaves = self.leaves if leaves is None else leaves
        L = {k: tape.leaf(v, name=k) for k, v in leaves.items()}
        if self.kind == "mlp":
            h = self._activate(self.acts[0], T.linear(L["x"], L["w1"], L["b1"]))
            h = self._activate(self.acts[1], T.linear(h, L["w2"], L["b2"]))
            out = T.linear(h, L["w3"], L["b3"])
        elif self.kind == "conv":
            h = self._activate(self.acts[0], T.conv2d(L["x"], L["cw"], L["cb"], padding=1))
            h = T.avg_pool2x2(h)
            h = T.reshape(h, (1, -1))
            h = self._activate(self.acts[1], T.linear(h, L["w1"], L["b1"]))
            out = T.linear(h, L["w2"], L["b2"])
        else:
            bag = T.sum_over_axis(T.embedding_lookup(L["emb"], self.tokens), 0, keepdims=True)
            h = T.multiply(T.tanh(bag), L["x"])
            h = self._activate(self.acts[0], T.linear(h, L["w1"], L["b1"]))
            out = T.linear(h, L["w2"], L["b2"])
        if self.seed_kind == "sum":
            return T.sum_over_axis(T.sum_over_axis(self._activate(self.acts[2], out), 1), 0)
        probs = T.softmax(out)
        if self.seed_kind == "prob":
            return T.select(probs, (0, 0))
        return T.cross_entropy(probs, [out.shape[1] - 1])

    def evaluate(self, leaves):
        tape = Tape(dtype=np.float64)
        y = self.build(tape, leaves)
        pattern = tuple((tape.values[n.inputs[0]].data > 0).tobytes() for n in tape.nodes if n.op == "relu")
        return float(y.data), pattern


def finite_difference(graph: RandomGraph, step: float = FD_STEP):
    """Central differences for every leaf coordinate.

    Returns None when some perturbation moves a ReLU input across zero,
    since the derivative is then not defined by the difference quotient.
    """
    _, base_pattern = graph.evaluate(graph.leaves)
    grads = {}
    for name, value in graph.leaves.items():
        g = np.zeros_like(value)
        for i in np.ndindex(value.shape):
            vals = []
            for sign in (1, -1):
                leaves = {k: v.copy() for k, v in graph.leaves.items()}
                leaves[name][i] += sign * step
                y, pattern = graph.evaluate(leaves)
                if pattern != base_pattern:
                    return None
                vals.append(y)
            g[i] = (vals[0] - vals[1]) / (2 * step)
        grads[name] = g
    return grads


def draw_checkable_graph(rng: np.random.Generator, allow_relu: bool = True, max_tries: int = 50):
    """A random graph whose ReLU kinks sit outside the finite-difference stencil."""
    for _ in range(max_tries):
        g = RandomGraph(rng, allow_relu)
        fd = finite_difference(g)
        if fd is not None:
            return g, fd
    raise RuntimeError("could not draw a kink-free graph")


def relu_inputs_single_use(tape: Tape) -> bool:
    consumers = {}
    for n in tape.nodes:
        for i in n.inputs:
            consumers[i] = consumers.get(i, 0) + 1
    return all(consumers[n.inputs[0]] == 1 for n in tape.nodes if n.op == "relu")


def gradients_match(analytic, numeric) -> bool:
    return bool(np.all(np.abs(analytic - numeric) <= np.maximum(RTOL * np.abs(numeric), ATOL)))


def run_modes(graph: RandomGraph, dtype=np.float32):
    """Forward once per mode; returns {mode: (tape, output, gradients)}."""
    res = {}
    for mode in ReluMode:
        tape = Tape(mode, dtype)
        y = graph.build(tape)
        res[mode] = (tape, y, T.backward(tape, y))
    return res
