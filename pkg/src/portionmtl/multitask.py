"""Joint classification + portion regression.

Model variants (``MODES``):

* ``classification_only`` / ``portion_only``: one backbone, one head.
* ``hps``: one backbone feeding both heads (hard parameter sharing).
* ``sps``: two backbones of identical architecture, tied by a squared-L2
  penalty on their lower-layer parameters (soft parameter sharing).
* ``sps_cdfa[_bn|_ln|_ln_bn]``: SPS plus a fusion head that concatenates the
  portion features with the classifier features, optionally normalized.
"""

import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from portionmtl.autodiff import Graph, ShapeError
from portionmtl.layers import Backbone, BackboneSpec, Linear, Module, NormLayer, flatten_params

MODES = (
    "classification_only",
    "portion_only",
    "hps",
    "sps",
    "sps_cdfa",
    "sps_cdfa_bn",
    "sps_cdfa_ln",
    "sps_cdfa_ln_bn",
)

# Independent RNG streams per component. A component gets the same initial
# weights in every mode that contains it, for a given seed.
STREAMS = {"backbone_c": 1, "backbone_r": 2, "cls_head": 3, "reg_head": 4, "fusion": 5, "shuffle": 6}


def stream(seed, name):
    return np.random.default_rng([seed, STREAMS[name]])


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, step, breakdown):
        self.epoch, self.step, self.breakdown = epoch, step, breakdown
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}: {breakdown}")


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    mode: str
    n_classes: int
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    norm_epsilon: float = 1e-5
    bn_momentum: float = 0.1
    ln_placement: str = "pre_concat"  # LN on x_p and x_c separately, or "post_concat"
    bn_position: str = "after_ln"  # or "before_ln"
    detach_classifier_features: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; valid modes: {', '.join(MODES)}")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.ln_placement not in ("pre_concat", "post_concat"):
            raise ValueError(f"ln_placement must be pre_concat or post_concat, got {self.ln_placement!r}")
        if self.bn_position not in ("after_ln", "before_ln"):
            raise ValueError(f"bn_position must be after_ln or before_ln, got {self.bn_position!r}")
        if isinstance(self.backbone, dict):
            object.__setattr__(self, "backbone", BackboneSpec.from_dict(self.backbone))

    @property
    def sharing(self):
        if self.mode == "hps":
            return "hard_sharing"
        if self.mode.startswith("sps"):
            return "soft_sharing"
        return "separate"

    @property
    def has_classifier(self):
        return self.mode != "portion_only"

    @property
    def has_regressor(self):
        return self.mode != "classification_only"

    @property
    def cdfa(self):
        return self.mode.startswith("sps_cdfa")

    @property
    def use_ln(self):
        return self.mode in ("sps_cdfa_ln", "sps_cdfa_ln_bn")

    @property
    def use_bn(self):
        return self.mode in ("sps_cdfa_bn", "sps_cdfa_ln_bn")

    def to_dict(self):
        d = asdict(self)
        d["backbone"] = self.backbone.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    base_lr: float = 1e-3
    lr_drop_epochs: tuple = (20, 40)
    lr_drop_factor: float = 0.1
    weight_decay: float = 1e-4
    batch_size: int = 32
    lambda_c: float = 1.0
    lambda_r: float = 1.0
    lambda_ps: float = 1.0
    shared_layer_fraction: float = 1.0
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "lr_drop_epochs", tuple(int(e) for e in self.lr_drop_epochs))
        if self.epochs <= 0:
            raise ValueError("epochs must be > 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if any(b <= a for a, b in zip(self.lr_drop_epochs, self.lr_drop_epochs[1:])):
            raise ValueError("lr_drop_epochs must be strictly increasing")
        if min(self.lambda_c, self.lambda_r, self.lambda_ps) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 < self.shared_layer_fraction <= 1:
            raise ValueError("shared_layer_fraction must be in (0, 1]")
        if self.base_lr <= 0 or self.weight_decay < 0:
            raise ValueError("base_lr must be > 0 and weight_decay >= 0")

    @property
    def weights(self):
        return (self.lambda_c, self.lambda_r, self.lambda_ps)

    def lr_at(self, epoch):
        """Learning rate for 0-based ``epoch``: one drop per boundary passed."""
        drops = sum(1 for d in self.lr_drop_epochs if epoch >= d)
        return self.base_lr * self.lr_drop_factor ** drops

    def to_dict(self):
        d = asdict(self)
        d["lr_drop_epochs"] = list(self.lr_drop_epochs)
        return d


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class FusionHead(Module):
    """Concatenate (x_p, x_c), optionally normalize, map to one value."""

    def __init__(self, feature_dim, use_ln, use_bn, rng, epsilon=1e-5, momentum=0.1,
                 ln_placement="pre_concat", bn_position="after_ln", detach_classifier_features=False):
        self.feature_dim = feature_dim
        self.ln_placement = ln_placement
        self.bn_position = bn_position
        self.detach_classifier_features = detach_classifier_features
        f2 = 2 * feature_dim
        self.ln_c = self.ln_r = self.ln = self.bn = None
        if use_ln and ln_placement == "pre_concat":
            self.ln_c = NormLayer(feature_dim, "layer", epsilon)
            self.ln_r = NormLayer(feature_dim, "layer", epsilon)
        elif use_ln:
            self.ln = NormLayer(f2, "layer", epsilon)
        if use_bn:
            self.bn = NormLayer(f2, "batch", epsilon, momentum)
        self.fc = Linear(f2, 1, rng)

    def _children(self):
        named = [("ln_c", self.ln_c), ("ln_r", self.ln_r), ("ln", self.ln), ("bn", self.bn), ("fc", self.fc)]
        return [(n, m) for n, m in named if m is not None]


def cdfa_forward(g, x_p, x_c, head, training):
    """Portion prediction (B, 1) from regression features ``x_p`` and
    classifier features ``x_c``."""
    sp, sc = g.value(x_p).shape, g.value(x_c).shape
    f = head.feature_dim
    if len(sp) != 2 or sp != sc or sp[1] != f:
        raise ShapeError("cdfa", sp, sc, detail=f"both must be (B, {f})")
    if head.detach_classifier_features:
        x_c = g.detach(x_c)

    def bn(h):
        return head.bn.forward(g, h, training) if head.bn is not None else h

    if head.ln_c is not None:  # LN per domain before concatenation
        if head.bn_position == "before_ln" and head.bn is not None:
            h = bn(g.concat([x_p, x_c], axis=1))
            a = head.ln_r.forward(g, g.slice(h, 0, f, axis=1))
            b = head.ln_c.forward(g, g.slice(h, f, 2 * f, axis=1))
            h = g.concat([a, b], axis=1)
        else:
            h = g.concat([head.ln_r.forward(g, x_p), head.ln_c.forward(g, x_c)], axis=1)
            h = bn(h)
    else:
        h = g.concat([x_p, x_c], axis=1)
        ln = (lambda t: head.ln.forward(g, t)) if head.ln is not None else (lambda t: t)
        h = ln(bn(h)) if head.bn_position == "before_ln" else bn(ln(h))
    return head.fc.forward(g, h)


class TwinModel(Module):
    def __init__(self, spec, seed=0):
        self.spec = spec
        s = spec
        f = s.backbone.feature_dim
        self.backbone_c = self.backbone_r = None
        self.cls_head = self.reg_head = self.fusion = None
        if s.mode != "portion_only":
            self.backbone_c = Backbone(s.backbone, stream(seed, "backbone_c"))
        if s.mode == "hps":
            self.backbone_r = self.backbone_c
        elif s.mode != "classification_only":
            self.backbone_r = Backbone(s.backbone, stream(seed, "backbone_r"))
        if s.has_classifier:
            self.cls_head = Linear(f, s.n_classes, stream(seed, "cls_head"))
        if s.cdfa:
            self.fusion = FusionHead(
                f, s.use_ln, s.use_bn, stream(seed, "fusion"), s.norm_epsilon, s.bn_momentum,
                s.ln_placement, s.bn_position, s.detach_classifier_features,
            )
        elif s.has_regressor:
            self.reg_head = Linear(f, 1, stream(seed, "reg_head"))

    @property
    def mode(self):
        return self.spec.mode

    def _children(self):
        named = [("backbone_c", self.backbone_c), ("backbone_r", self.backbone_r),
                 ("cls_head", self.cls_head), ("reg_head", self.reg_head), ("fusion", self.fusion)]
        out, seen = [], set()
        for n, m in named:
            if m is not None and id(m) not in seen:
                seen.add(id(m))
                out.append((n, m))
        return out

    def forward(self, g, x, training):
        """Returns ``(logits_id, prediction_id)``; either may be None."""
        s = self.spec
        logits = pred = None
        if s.sharing == "hard_sharing":
            return hard_sharing_forward(g, x, self, training)
        x_c = self.backbone_c.forward(g, x) if self.backbone_c is not None else None
        if x_c is not None:
            logits = self.cls_head.forward(g, x_c)
        if self.backbone_r is not None:
            x_p = self.backbone_r.forward(g, x)
            if self.fusion is not None:
                pred = cdfa_forward(g, x_p, x_c, self.fusion, training)
            else:
                pred = self.reg_head.forward(g, x_p)
        return logits, pred


def hard_sharing_forward(g, x, model, training=True):
    """One backbone pass feeding both heads."""
    if model.spec.sharing != "hard_sharing":
        raise ValueError(f"hard_sharing_forward needs mode 'hps', model is {model.mode!r}")
    feats = model.backbone_c.forward(g, x)
    return model.cls_head.forward(g, feats), model.reg_head.forward(g, feats)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def classification_loss(g, logits, labels):
    """Mean cross-entropy of softmax(logits) against integer labels."""
    b, n = g.value(logits).shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (b,):
        raise ShapeError("classification_loss", (b, n), labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ValueError(f"labels must be in [0, {n}), got range [{labels.min()}, {labels.max()}]")
    onehot = np.zeros((b, n))
    onehot[np.arange(b), labels] = 1.0
    lse = g.logsumexp(logits, axis=1, keepdims=True)
    logp = g.sub(logits, g.expand(lse, (b, n)))
    return g.scale(g.sum(g.mul(g.const(onehot), logp)), -1.0 / b)


def regression_loss(g, prediction, z):
    """Mean absolute error |z - prediction| in kcal."""
    shape = g.value(prediction).shape
    z = np.asarray(z, dtype=np.float64)
    if z.size != int(np.prod(shape)):
        raise ShapeError("regression_loss", shape, z.shape)
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite portion targets")
    return g.mean(g.abs(g.sub(g.const(z.reshape(shape)), prediction)))


def shared_layer_count(backbone, fraction):
    return math.ceil(fraction * len(backbone.layers))


def _shared_pairs(model, fraction):
    if model.spec.sharing != "soft_sharing":
        raise ValueError(f"soft sharing penalty needs an sps mode, model is {model.mode!r}")
    k = shared_layer_count(model.backbone_c, fraction)
    pc = [p for layer in model.backbone_c.layers[:k] for p in layer.parameters()]
    pr = [p for layer in model.backbone_r.layers[:k] for p in layer.parameters()]
    if len(pc) != len(pr) or any(a.shape != b.shape for a, b in zip(pc, pr)):
        raise ShapeError("soft_sharing_penalty",
                         (flatten_params(model.backbone_c, k).size,),
                         (flatten_params(model.backbone_r, k).size,),
                         detail="backbone architectures differ")
    return pc, pr


def soft_sharing_penalty(g, model, shared_layer_fraction=1.0):
    """Graph node for sum((p_c - p_r)^2) over the lower backbone layers."""
    pc, pr = _shared_pairs(model, shared_layer_fraction)
    total = None
    for a, b in zip(pc, pr):
        term = g.sum(g.square(g.sub(g.leaf(a), g.leaf(b))))
        total = term if total is None else g.add(total, term)
    return total


def soft_sharing_penalty_value(model, shared_layer_fraction=1.0):
    pc, pr = _shared_pairs(model, shared_layer_fraction)
    return float(sum(np.sum((a.values - b.values) ** 2) for a, b in zip(pc, pr)))


@dataclass(frozen=True)
class LossBreakdown:
    l_c: float
    l_r: float
    l_ps: float
    overall: float


def overall_loss(l_c, l_r, l_ps, weights=(1.0, 1.0, 1.0)):
    if min(weights) < 0:
        raise ValueError(f"loss weights must be non-negative, got {weights}")
    if min(l_c, l_r, l_ps) < 0:
        raise ValueError("loss terms must be non-negative")
    wc, wr, wp = weights
    return LossBreakdown(l_c, l_r, l_ps, wc * l_c + wr * l_r + wp * l_ps)


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

class Adam:
    """Adam with weight decay folded into the gradient (classical L2)."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]
        self.t = 0

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            grad = p.grad if p.grad is not None else np.zeros_like(p.values)
            if self.weight_decay:
                grad = grad + self.weight_decay * p.values
            m *= b1
            m += (1 - b1) * grad
            v *= b2
            v += (1 - b2) * grad * grad
            p.values -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


@dataclass
class EpochRecord:
    epoch: int
    l_c: float
    l_r: float
    l_ps: float
    overall: float
    lr: float

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    model: TwinModel
    history: list
    steps: int


def _batches(order, batch_size):
    # a trailing batch of one is merged into the previous one (BN needs m >= 2)
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        last = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], last])
    return chunks


def training_step(model, xb, yb, zb, config, training=True):
    """Build the graph for one batch, backprop, return the loss breakdown."""
    s = model.spec
    g = Graph()
    logits, pred = model.forward(g, g.const(xb), training)
    wc, wr, wp = config.weights
    terms, parts = [], {"l_c": 0.0, "l_r": 0.0, "l_ps": 0.0}
    if logits is not None:
        lc = classification_loss(g, logits, yb)
        parts["l_c"] = float(g.value(lc))
        if wc:
            terms.append(g.scale(lc, wc))
    if pred is not None:
        lr_ = regression_loss(g, pred, zb)
        parts["l_r"] = float(g.value(lr_))
        if wr:
            terms.append(g.scale(lr_, wr))
    if s.sharing == "soft_sharing":
        if wp:
            lps = soft_sharing_penalty(g, model, config.shared_layer_fraction)
            parts["l_ps"] = float(g.value(lps))
            terms.append(g.scale(lps, wp))
        else:
            parts["l_ps"] = soft_sharing_penalty_value(model, config.shared_layer_fraction)
    if not terms:
        raise ValueError("every active loss term has zero weight")
    total = terms[0]
    for t in terms[1:]:
        total = g.add(total, t)
    breakdown = overall_loss(parts["l_c"], parts["l_r"], parts["l_ps"], config.weights)
    if not math.isfinite(float(g.value(total))):
        return breakdown, False
    g.backward(total)
    return breakdown, True


def train(model, data, config, on_epoch=None, max_steps=None):
    """Train ``model`` in place with Adam over all of its parameters.

    ``data`` is a :class:`~portionmtl.data.Dataset` or an ``(x, y, z)`` tuple
    of NCHW images, labels and kcal values. ``max_steps`` stops early (used
    for step-level equivalence checks).
    """
    x, y, z = data.arrays() if hasattr(data, "arrays") else data
    if len(x) == 0:
        raise ValueError("empty training set")
    opt = Adam(model.parameters(), config.adam_beta1, config.adam_beta2, config.adam_eps,
               config.weight_decay)
    shuffle = stream(config.seed, "shuffle")
    history, steps = [], 0
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        sums = np.zeros(4)
        nb = 0
        for step, idx in enumerate(_batches(shuffle.permutation(len(x)), config.batch_size)):
            opt.zero_grad()
            bd, finite = training_step(model, x[idx], y[idx], z[idx], config)
            if not finite or not math.isfinite(bd.overall):
                raise TrainingDiverged(epoch + 1, step + 1, bd)
            opt.step(lr)
            sums += (bd.l_c, bd.l_r, bd.l_ps, bd.overall)
            nb += 1
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        rec = EpochRecord(epoch + 1, *(float(v) for v in sums / nb), lr=float(lr))
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        if max_steps is not None and steps >= max_steps:
            break
    return TrainResult(model, history, steps)


def predict(model, x, batch_size=256):
    """Inference: ``(classes, portions)`` arrays; an entry is None when the
    model lacks that head. BN layers use their running statistics."""
    classes, portions = [], []
    for i in range(0, len(x), batch_size):
        g = Graph()
        logits, pred = model.forward(g, g.const(x[i:i + batch_size]), training=False)
        if logits is not None:
            classes.append(np.argmax(g.value(logits), axis=1))
        if pred is not None:
            portions.append(g.value(pred)[:, 0].copy())
    return (np.concatenate(classes) if classes else None,
            np.concatenate(portions) if portions else None)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"PMTLCKPT"
CKPT_VERSION = 1


def _pack_array(name, arr):
    nb = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return b"".join([
        struct.pack("<H", len(nb)), nb, struct.pack("<B", arr.ndim),
        struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes(),
    ])


def checkpoint_bytes(model):
    spec = json.dumps(model.spec.to_dict(), sort_keys=True).encode("utf-8")
    params = model.named_parameters()
    buffers = model.named_buffers()
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<I", len(spec)), spec,
             struct.pack("<I", len(params))]
    parts += [_pack_array(n, p.values) for n, p in params]
    parts.append(struct.pack("<I", len(buffers)))
    parts += [_pack_array(n, b) for n, b in buffers]
    return b"".join(parts)


def save_checkpoint(model, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


class _Reader:
    def __init__(self, data):
        self.data, self.off = data, 0

    def take(self, n):
        if self.off + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self):
        (ln,) = self.unpack("<H")
        name = self.take(ln).decode("utf-8")
        (ndim,) = self.unpack("<B")
        shape = self.unpack(f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(self.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
        return name, arr


def load_checkpoint(path):
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(8) != CKPT_MAGIC:
        raise CheckpointError("not a portionmtl checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint version {version} != supported {CKPT_VERSION}")
    (ln,) = r.unpack("<I")
    spec = ModelSpec.from_dict(json.loads(r.take(ln).decode("utf-8")))
    model = TwinModel(spec)
    for section in (model.named_parameters(), model.named_buffers()):
        (count,) = r.unpack("<I")
        if count != len(section):
            raise CheckpointError(f"checkpoint has {count} tensors, architecture expects {len(section)}")
        for exp_name, target in section:
            name, arr = r.array()
            tgt = target.values if hasattr(target, "values") else target
            if name != exp_name or arr.shape != tgt.shape:
                raise CheckpointError(f"tensor {name} {arr.shape} does not match {exp_name} {tgt.shape}")
            tgt[...] = arr
    if r.off != len(r.data):
        raise CheckpointError("trailing bytes in checkpoint")
    return model
