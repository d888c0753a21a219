"""Finite-difference checks over every primitive, layer, loss and the
fusion head. Used by ``portionmtl gradcheck`` and the test suite."""

import time
from dataclasses import dataclass

import numpy as np

from portionmtl.autodiff import OPS, Graph, Tensor, grad_check
from portionmtl.layers import Backbone, BackboneSpec, NormLayer
from portionmtl.multitask import (
    FusionHead, ModelSpec, TwinModel, cdfa_forward, classification_loss, regression_loss,
    soft_sharing_penalty,
)

TOLERANCE = 1e-4
PROBE = 1e-4


@dataclass
class ComponentResult:
    name: str
    max_rel_error: float
    n_checked: int
    n_flagged: int
    seconds: float

    @property
    def passed(self):
        return self.max_rel_error <= TOLERANCE and self.n_checked > 0

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.name:<28} max_rel_err={self.max_rel_error:.3e}  "
                f"checked={self.n_checked} flagged={self.n_flagged} ({self.seconds:.2f}s)")


def _reduce(g, out, rng):
    """Scalar loss sum(out * r) with fixed random weights r, so every
    output entry contributes a distinct sensitivity."""
    r = g.const(rng.standard_normal(g.value(out).shape))
    return g.sum(g.mul(out, r))


def _leaf(g, values):
    return g.leaf(Tensor(values, requires_grad=True))


# each builder: (graph, rng) -> (loss_id, [leaf ids to check])

def _unary(kind, lo=None):
    def build(g, rng):
        v = rng.standard_normal((3, 4))
        if lo is not None:
            v = lo + np.abs(v)
        x = _leaf(g, v)
        return _reduce(g, g.op(kind, x), rng), [x]
    return build


def _binary(kind):
    def build(g, rng):
        a = _leaf(g, rng.standard_normal((3, 4)))
        bv = rng.standard_normal((3, 4))
        if kind == "div":
            bv = np.sign(bv) * (0.5 + np.abs(bv))
        b = _leaf(g, bv)
        s = _leaf(g, rng.standard_normal(()))
        out = g.add(g.op(kind, a, b), g.op(kind, a, s))  # also the scalar-broadcast path
        return _reduce(g, out, rng), [a, b, s]
    return build


def _reduction(kind):
    def build(g, rng):
        x = _leaf(g, rng.standard_normal((3, 5)))
        outs = [g.op(kind, x, axis=ax, keepdims=kd) for ax, kd in ((None, False), (0, True), (1, False))]
        loss = _reduce(g, outs[0], rng)
        for o in outs[1:]:
            loss = g.add(loss, _reduce(g, o, rng))
        return loss, [x]
    return build


def _matmul(g, rng):
    a, b = _leaf(g, rng.standard_normal((3, 4))), _leaf(g, rng.standard_normal((4, 2)))
    return _reduce(g, g.matmul(a, b), rng), [a, b]


def _scale(g, rng):
    x = _leaf(g, rng.standard_normal((4,)))
    return _reduce(g, g.add_const(g.scale(x, -2.5), 0.7), rng), [x]


def _concat_slice(g, rng):
    a, b = _leaf(g, rng.standard_normal((2, 3))), _leaf(g, rng.standard_normal((2, 5)))
    c = g.concat([a, b], axis=1)
    out = g.add(g.slice(c, 1, 4, axis=1), g.slice(c, 4, 7, axis=1))
    return g.add(_reduce(g, c, rng), _reduce(g, out, rng)), [a, b]


def _expand_reshape(g, rng):
    a = _leaf(g, rng.standard_normal((3, 1)))
    b = _leaf(g, rng.standard_normal((4,)))
    out = g.add(g.expand(a, (3, 4)), g.expand(b, (3, 4)))
    return _reduce(g, g.reshape(out, (2, 6)), rng), [a, b]


def _conv(g, rng):
    x = _leaf(g, rng.standard_normal((2, 2, 5, 5)))
    w = _leaf(g, rng.standard_normal((3, 2, 3, 3)))
    b = _leaf(g, rng.standard_normal((3,)))
    out = g.add(g.conv2d(x, w, b, padding=1), g.conv2d(x, w, b, padding=1))
    o2 = g.conv2d(x, w, stride=2)
    return g.add(_reduce(g, out, rng), _reduce(g, o2, rng)), [x, w, b]


def _maxpool(g, rng):
    x = _leaf(g, rng.standard_normal((2, 2, 4, 6)))
    return _reduce(g, g.maxpool2d(x, 2), rng), [x]


def _norm(mode, training=True):
    def build(g, rng):
        layer = NormLayer(8, mode, epsilon=1e-5)
        layer.gamma.values[:] = rng.standard_normal(8)
        layer.beta.values[:] = rng.standard_normal(8)
        if mode == "batch":
            layer.running_mean[:] = rng.standard_normal(8)
            layer.running_var[:] = 0.5 + rng.random(8)
        x = _leaf(g, 2.0 * rng.standard_normal((6, 8)) + 0.5)
        out = layer.forward(g, x, training)
        return _reduce(g, out, rng), [x, g.leaf(layer.gamma), g.leaf(layer.beta)]
    return build


def _ce(g, rng):
    logits = _leaf(g, 3.0 * rng.standard_normal((5, 7)))
    return classification_loss(g, logits, rng.integers(0, 7, 5)), [logits]


def _l1(g, rng):
    pred = _leaf(g, 100.0 * rng.standard_normal((6, 1)))
    return regression_loss(g, pred, 100.0 * rng.standard_normal(6)), [pred]


_SMALL = BackboneSpec(input_size=8, channels=(2, 3), feature_dim=4)


def _penalty(g, rng):
    model = TwinModel(ModelSpec("sps", 3, _SMALL), seed=int(rng.integers(1 << 30)))
    loss = soft_sharing_penalty(g, model, 1.0)
    leaves = [g.leaf(p) for p in model.backbone_c.parameters()[:2] + model.backbone_r.parameters()[-2:]]
    return loss, leaves


def _backbone(g, rng):
    bb = Backbone(_SMALL, rng)
    x = _leaf(g, rng.random((2, 3, 8, 8)))
    out = bb.forward(g, x)
    return _reduce(g, out, rng), [x, g.leaf(bb.convs[0].weight), g.leaf(bb.fc.weight)]


def _cdfa(use_ln, use_bn, placement="pre_concat", bn_position="after_ln"):
    def build(g, rng):
        head = FusionHead(6, use_ln, use_bn, rng, ln_placement=placement, bn_position=bn_position)
        for p in head.parameters():
            if p.values.ndim == 1:
                p.values[:] += 0.3 * rng.standard_normal(p.size)
        x_p = _leaf(g, 3.0 * rng.standard_normal((5, 6)) + 2.0)
        x_c = _leaf(g, 0.5 * rng.standard_normal((5, 6)) - 1.0)
        pred = cdfa_forward(g, x_p, x_c, head, training=True)
        loss = regression_loss(g, pred, 10.0 * rng.standard_normal(5))
        loss = g.add(loss, _reduce(g, pred, rng))
        return loss, [x_p, x_c, g.leaf(head.fc.weight)] + [g.leaf(p) for p in head.parameters()[:2]]
    return build


def components():
    comps = {}
    for kind in ("relu", "abs", "exp", "square", "neg"):
        comps[f"op:{kind}"] = _unary(kind)
    comps["op:log"] = _unary("log", lo=0.2)
    comps["op:sqrt"] = _unary("sqrt", lo=0.2)
    for kind in ("add", "sub", "mul", "div"):
        comps[f"op:{kind}"] = _binary(kind)
    for kind in ("sum", "mean", "var", "logsumexp"):
        comps[f"op:{kind}"] = _reduction(kind) if kind != "logsumexp" else _logsumexp
    comps["op:matmul"] = _matmul
    comps["op:scale+add_const"] = _scale
    comps["op:concat+slice"] = _concat_slice
    comps["op:expand+reshape"] = _expand_reshape
    comps["op:conv2d"] = _conv
    comps["op:maxpool2d"] = _maxpool
    comps["layer_norm"] = _norm("layer")
    comps["batch_norm(train)"] = _norm("batch", True)
    comps["batch_norm(infer)"] = _norm("batch", False)
    comps["loss:cross_entropy"] = _ce
    comps["loss:l1"] = _l1
    comps["loss:soft_sharing"] = _penalty
    comps["backbone"] = _backbone
    comps["cdfa"] = _cdfa(False, False)
    comps["cdfa+bn"] = _cdfa(False, True)
    comps["cdfa+ln"] = _cdfa(True, False)
    comps["cdfa+ln+bn"] = _cdfa(True, True)
    comps["cdfa+ln+bn(post_concat)"] = _cdfa(True, True, "post_concat")
    comps["cdfa+bn+ln(bn_first)"] = _cdfa(True, True, "pre_concat", "before_ln")
    return comps


def _logsumexp(g, rng):
    x = _leaf(g, 2.0 * rng.standard_normal((3, 5)))
    loss = g.add(_reduce(g, g.logsumexp(x, axis=1), rng),
                 _reduce(g, g.logsumexp(x, axis=0, keepdims=True), rng))
    return loss, [x]


# primitives whose gradient is covered by the named component
COVERAGE = {
    "leaf": None, "detach": None,
    "scale": "op:scale+add_const", "add_const": "op:scale+add_const",
    "concat": "op:concat+slice", "slice": "op:concat+slice",
    "expand": "op:expand+reshape", "reshape": "op:expand+reshape",
}


def check_component(name, build, trials=3, seed=0, corrupt=False):
    """Worst error over ``trials`` random draws. ``corrupt`` perturbs the
    analytic gradient (negative control)."""
    t0 = time.perf_counter()
    worst, checked, flagged = 0.0, 0, 0
    for t in range(trials):
        rng = np.random.default_rng([seed, t, sum(map(ord, name))])
        g = Graph()
        loss, leaves = build(g, rng)
        grads = g.backward(loss)
        for leaf in leaves:
            analytic = grads.get(leaf, np.zeros_like(g.value(leaf)))
            if corrupt:
                analytic = analytic + 0.01 * (1.0 + np.abs(analytic))
            res = grad_check(g, loss, leaf, PROBE, analytic=analytic)
            worst = max(worst, res.max_rel_error)
            checked += res.n_checked
            flagged += len(res.flagged)
    return ComponentResult(name, worst, checked, flagged, time.perf_counter() - t0)


def run_suite(trials=3, seed=0, corrupt=(), only=None):
    comps = components()
    names = [n for n in comps if only is None or n in only]
    return [check_component(n, comps[n], trials, seed, corrupt=n in corrupt) for n in names]


def uncovered_ops():
    """Registered primitives that no component exercises."""
    comps = components()
    missing = []
    for kind in OPS:
        if kind in COVERAGE:
            continue
        if f"op:{kind}" not in comps:
            missing.append(kind)
    return missing
