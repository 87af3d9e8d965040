"""Compact residual CNN with three learning-rate groups.

Architecture: 3x3 stride-2 stem conv + BN + ReLU + 2x2 max pool, then
stages of basic residual blocks (first stage stride 1, later stages stride
2 with a 1x1 projection shortcut), global average pooling and a linear
head.

Groups: 0 = stem + first stage, 1 = remaining stages, 2 = head.
"""

from __future__ import annotations

import copy
import enum
import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import InvalidConfig, ShapeMismatch
from . import layers as L

N_GROUPS = 3
HEAD_GROUP = 2
BODY_GROUPS = (0, 1)


class Mode(enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


TrainMode = Mode.TRAIN
EvalMode = Mode.EVAL

ARCHS = {
    "mini-10": ([1, 1, 1], [16, 32, 64]),
    "mini-18": ([2, 2, 2], [16, 32, 64]),
    "mini-34": ([3, 4, 6], [16, 32, 64]),
}


@dataclass
class ModelConfig:
    stage_blocks: list = field(default_factory=lambda: [2, 2, 2])
    stage_channels: list = field(default_factory=lambda: [16, 32, 64])
    num_classes: int = 2
    input_size: int = 224
    arch_tag: str = "mini-18"
    in_channels: int = 3

    def validate(self):
        if len(self.stage_blocks) != len(self.stage_channels) or not self.stage_blocks:
            raise InvalidConfig("stage_blocks and stage_channels must be non-empty and equal length")
        if any(b < 1 for b in self.stage_blocks) or any(c < 1 for c in self.stage_channels):
            raise InvalidConfig("stage sizes must be positive")
        if self.num_classes < 2:
            raise InvalidConfig("num_classes must be >= 2")
        if self.input_size < 4 * 2 ** (len(self.stage_blocks) - 1):
            raise InvalidConfig(f"input_size {self.input_size} too small for {len(self.stage_blocks)} stages")

    @classmethod
    def from_arch(cls, arch: str, **kw) -> "ModelConfig":
        if arch not in ARCHS:
            raise InvalidConfig(f"unknown arch {arch!r}; choose from {sorted(ARCHS)}")
        blocks, channels = ARCHS[arch]
        return cls(list(blocks), list(channels), arch_tag=arch, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ParamGroup:
    index: int
    frozen: bool = False
    lr_scale: float = 1.0


# -- structural units --------------------------------------------------------


class _ConvBN:
    def __init__(self, prefix, c_in, c_out, k, stride):
        self.prefix = prefix
        self.k, self.stride, self.pad = k, stride, k // 2
        self.shape = (c_out, c_in, k, k)
        self.w = f"{prefix}.conv.weight"
        self.gamma = f"{prefix}.bn.weight"
        self.beta = f"{prefix}.bn.bias"
        self.rmean = f"{prefix}.bn.running_mean"
        self.rvar = f"{prefix}.bn.running_var"

    def init(self, model, rng):
        c_out, c_in, k, _ = self.shape
        std = np.sqrt(2.0 / (c_in * k * k))
        model.params[self.w] = (rng.standard_normal(self.shape) * std).astype(model.dtype)
        model.params[self.gamma] = np.ones(c_out, model.dtype)
        model.params[self.beta] = np.zeros(c_out, model.dtype)
        model.buffers[self.rmean] = np.zeros(c_out, model.dtype)
        model.buffers[self.rvar] = np.ones(c_out, model.dtype)
        return [self.w, self.gamma, self.beta], [self.rmean, self.rvar]

    def forward(self, model, x, batch_stats):
        p = model.params
        y, c_conv = L.conv2d_forward(x, p[self.w], self.stride, self.pad)
        y, c_bn = L.batchnorm_forward(
            y, p[self.gamma], p[self.beta],
            model.buffers[self.rmean], model.buffers[self.rvar],
            batch_stats, batch_stats,
        )
        return y, (c_conv, c_bn)

    def backward(self, dout, cache, grads, need_dx):
        c_conv, c_bn = cache
        dy, dg, db = L.batchnorm_backward(dout, c_bn, need_dx=True)
        dx, dw = L.conv2d_backward(dy, c_conv, need_dx)
        if grads is not None:
            grads[self.w], grads[self.gamma], grads[self.beta] = dw, dg, db
        return dx


class _Stem:
    def __init__(self, c_in, c_out, group):
        self.group = group
        self.cbn = _ConvBN("stem", c_in, c_out, 3, 2)

    def init(self, model, rng):
        return self.cbn.init(model, rng)

    def forward(self, model, x, batch_stats):
        y, c1 = self.cbn.forward(model, x, batch_stats)
        y, mask = L.relu_forward(y)
        y, c_pool = L.maxpool2_forward(y)
        return y, (c1, mask, c_pool)

    def backward(self, model, dout, cache, grads, need_dx):
        c1, mask, c_pool = cache
        d = L.maxpool2_backward(dout, c_pool)
        d = L.relu_backward(d, mask)
        return self.cbn.backward(d, c1, grads, need_dx)


class _Block:
    def __init__(self, prefix, c_in, c_out, stride, group):
        self.group = group
        self.conv1 = _ConvBN(f"{prefix}.1", c_in, c_out, 3, stride)
        self.conv2 = _ConvBN(f"{prefix}.2", c_out, c_out, 3, 1)
        self.proj = None
        if stride != 1 or c_in != c_out:
            self.proj = _ConvBN(f"{prefix}.proj", c_in, c_out, 1, stride)

    def init(self, model, rng):
        names, bufs = [], []
        for unit in (self.conv1, self.conv2, self.proj):
            if unit is not None:
                n, b = unit.init(model, rng)
                names += n
                bufs += b
        return names, bufs

    def forward(self, model, x, batch_stats):
        y, c1 = self.conv1.forward(model, x, batch_stats)
        y, m1 = L.relu_forward(y)
        y, c2 = self.conv2.forward(model, y, batch_stats)
        if self.proj is not None:
            short, cp = self.proj.forward(model, x, batch_stats)
        else:
            short, cp = x, None
        out, m2 = L.relu_forward(y + short)
        return out, (c1, m1, c2, cp, m2)

    def backward(self, model, dout, cache, grads, need_dx):
        c1, m1, c2, cp, m2 = cache
        d = L.relu_backward(dout, m2)
        dy = self.conv2.backward(d, c2, grads, True)
        dy = L.relu_backward(dy, m1)
        dx = self.conv1.backward(dy, c1, grads, need_dx)
        if self.proj is not None:
            ds = self.proj.backward(d, cp, grads, need_dx)
        else:
            ds = d
        return dx + ds if need_dx else None


class _Head:
    def __init__(self, c_in, num_classes, group):
        self.group = group
        self.c_in, self.num_classes = c_in, num_classes

    def init(self, model, rng):
        std = np.sqrt(1.0 / self.c_in)
        model.params["head.weight"] = (
            rng.standard_normal((self.num_classes, self.c_in)) * std
        ).astype(model.dtype)
        model.params["head.bias"] = np.zeros(self.num_classes, model.dtype)
        return ["head.weight", "head.bias"], []

    def logits(self, model, feats):
        return L.linear_forward(feats, model.params["head.weight"], model.params["head.bias"])

    def backward_linear(self, model, dlogits, cache, grads, need_dx):
        dx, dw, db = L.linear_backward(dlogits, cache, model.params["head.weight"], need_dx)
        if grads is not None:
            grads["head.weight"], grads["head.bias"] = dw, db
        return dx


# -- model -------------------------------------------------------------------


class Model:
    """Parameters, running statistics, group flags and momentum buffers.

    ``forward`` in eval mode does not mutate the model; a training forward
    (``loss_and_grads``) updates running statistics of unfrozen groups.
    Frozen groups always normalize with their running statistics, so a
    frozen body computes the same features in train and eval mode.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.param_group: dict[str, int] = {}
        self.buffer_group: dict[str, int] = {}
        self.groups = [ParamGroup(i) for i in range(N_GROUPS)]
        self.velocity: dict[str, np.ndarray] = {}
        self.mode = Mode.EVAL

        chans = config.stage_channels
        self.stem = _Stem(config.in_channels, chans[0], 0)
        self.blocks = []
        c_prev = chans[0]
        for s, (nb, c) in enumerate(zip(config.stage_blocks, chans)):
            group = 0 if s == 0 else 1
            for b in range(nb):
                stride = 2 if (b == 0 and s > 0) else 1
                self.blocks.append(_Block(f"stage{s + 1}.{b}", c_prev, c, stride, group))
                c_prev = c
        self.head = _Head(c_prev, config.num_classes, HEAD_GROUP)

        rng = np.random.default_rng(seed)
        for unit in [self.stem, *self.blocks, self.head]:
            names, bufs = unit.init(self, rng)
            for n in names:
                self.param_group[n] = unit.group
            for n in bufs:
                self.buffer_group[n] = unit.group

    # -- introspection

    @property
    def body_units(self):
        return [self.stem, *self.blocks]

    def group_params(self, index: int) -> list[str]:
        return [n for n, g in self.param_group.items() if g == index]

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def frozen_groups(self) -> set[int]:
        return {g.index for g in self.groups if g.frozen}

    def set_frozen(self, groups, frozen: bool = True) -> None:
        for i in groups:
            if i not in range(N_GROUPS):
                raise ValueError(f"no parameter group {i}")
            self.groups[i].frozen = bool(frozen)

    def set_lr_scales(self, scales) -> None:
        for g, s in zip(self.groups, scales):
            if s <= 0:
                raise ValueError("lr_scale must be positive")
            g.lr_scale = float(s)

    def body_hash(self) -> str:
        h = hashlib.sha256()
        for store, owner in ((self.params, self.param_group), (self.buffers, self.buffer_group)):
            for name in sorted(store):
                if owner[name] in BODY_GROUPS:
                    h.update(name.encode())
                    h.update(np.ascontiguousarray(store[name]).tobytes())
        return h.hexdigest()

    def digest(self) -> str:
        h = hashlib.sha256()
        for store in (self.params, self.buffers):
            for name in sorted(store):
                h.update(name.encode())
                h.update(np.ascontiguousarray(store[name]).tobytes())
        return h.hexdigest()

    # -- state

    def snapshot(self) -> dict:
        return {
            "params": {k: v.copy() for k, v in self.params.items()},
            "buffers": {k: v.copy() for k, v in self.buffers.items()},
            "velocity": {k: v.copy() for k, v in self.velocity.items()},
            "groups": copy.deepcopy(self.groups),
        }

    def restore(self, state: dict) -> None:
        for k, v in state["params"].items():
            self.params[k][...] = v
        for k, v in state["buffers"].items():
            self.buffers[k][...] = v
        self.velocity = {k: v.copy() for k, v in state["velocity"].items()}
        self.groups = copy.deepcopy(state["groups"])

    def reset_momentum(self) -> None:
        self.velocity = {}

    def clone(self) -> "Model":
        return copy.deepcopy(self)

    def replace_head(self, num_classes: int, seed: int = 0) -> None:
        """Swap in a freshly initialized linear head with ``num_classes`` outputs."""
        if num_classes < 2:
            raise InvalidConfig("num_classes must be >= 2")
        self.config.num_classes = num_classes
        self.head = _Head(self.head.c_in, num_classes, HEAD_GROUP)
        self.head.init(self, np.random.default_rng(seed))
        for name in ("head.weight", "head.bias"):
            self.velocity.pop(name, None)

    # -- computation

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(x)
        s = self.config.input_size
        if x.ndim != 4 or x.shape[1] != self.config.in_channels or x.shape[2:] != (s, s):
            raise ShapeMismatch(
                f"expected batch of shape (B, {self.config.in_channels}, {s}, {s}), got {x.shape}"
            )
        return np.ascontiguousarray(x.transpose(1, 0, 2, 3), dtype=self.dtype)

    def _run_body(self, x, train: bool):
        caches = []
        for unit in self.body_units:
            batch_stats = train and not self.groups[unit.group].frozen
            x, c = unit.forward(self, x, batch_stats)
            caches.append(c)
        feats, gap_shape = L.global_avgpool_forward(x)
        return feats, caches, gap_shape

    def features(self, x) -> np.ndarray:
        """Pooled body features in eval mode, shape (B, C_last)."""
        feats, _, _ = self._run_body(self._check_input(x), train=False)
        return feats

    def forward(self, x, mode: Mode = Mode.EVAL) -> np.ndarray:
        if mode == Mode.TRAIN:
            logits, _ = self._forward_train(self._check_input(x))
            return logits
        feats = self.features(x)
        logits, _ = self.head.logits(self, feats)
        return logits

    def _forward_train(self, xc):
        feats, caches, gap_shape = self._run_body(xc, train=True)
        logits, head_cache = self.head.logits(self, feats)
        return logits, (caches, gap_shape, head_cache)

    def loss_and_grads(self, x, labels):
        """Mean cross-entropy and gradients for every unfrozen parameter."""
        labels = np.asarray(labels)
        if labels.shape != (np.asarray(x).shape[0],):
            raise ShapeMismatch("labels must be a vector matching the batch size")
        if labels.min() < 0 or labels.max() >= self.config.num_classes:
            raise ValueError("labels outside [0, num_classes)")
        logits, (caches, gap_shape, head_cache) = self._forward_train(self._check_input(x))
        loss, dlogits = L.cross_entropy(logits, labels)
        dlogits = dlogits.astype(self.dtype)
        grads: dict[str, np.ndarray] = {}

        units = self.body_units
        trainable = [not self.groups[u.group].frozen for u in units]
        # dx is needed at unit i only if some earlier unit is trainable
        needs_dx = [any(trainable[:i]) for i in range(len(units))]
        head_trainable = not self.groups[HEAD_GROUP].frozen

        dfeats = self.head.backward_linear(
            self, dlogits, head_cache, grads if head_trainable else None, any(trainable)
        )
        if any(trainable):
            d = L.global_avgpool_backward(dfeats, gap_shape)
            for i in range(len(units) - 1, -1, -1):
                if not trainable[i] and not needs_dx[i]:
                    break
                d = units[i].backward(
                    self, d, caches[i], grads if trainable[i] else None, needs_dx[i]
                )
        return loss, grads

    def sgd_step(self, grads, base_lr, group_lrs=None, momentum=0.9) -> None:
        """Momentum SGD: ``v = m*v + g``, ``w -= lr_g * v``; frozen groups skipped."""
        scales = group_lrs if group_lrs is not None else [g.lr_scale for g in self.groups]
        for name, g in grads.items():
            grp = self.param_group[name]
            if self.groups[grp].frozen:
                continue
            lr = base_lr * scales[grp]
            v = self.velocity.get(name)
            if v is None or momentum == 0:
                v = g.astype(self.dtype, copy=True)
            else:
                v *= momentum
                v += g
            self.velocity[name] = v
            self.params[name] -= self.dtype.type(lr) * v


class HeadView:
    """The model's linear head trained directly on pooled features.

    Shares parameter and momentum storage with the model, so updates made
    here are updates to the model's head.
    """

    def __init__(self, model: Model):
        self.model = model

    def loss_and_grads(self, feats, labels):
        m = self.model
        logits, cache = m.head.logits(m, np.asarray(feats, dtype=m.dtype))
        loss, dlogits = L.cross_entropy(logits, labels)
        grads = {}
        m.head.backward_linear(m, dlogits.astype(m.dtype), cache, grads, False)
        return loss, grads

    def sgd_step(self, grads, base_lr, group_lrs=None, momentum=0.9):
        self.model.sgd_step(grads, base_lr, group_lrs, momentum)

    def snapshot(self):
        return self.model.snapshot()

    def restore(self, state):
        self.model.restore(state)

    def reset_momentum(self):
        self.model.reset_momentum()


# -- functional surface ------------------------------------------------------


def build_model(config: ModelConfig | None = None, seed: int = 0, dtype=np.float32) -> Model:
    return Model(config or ModelConfig(), seed, dtype)


def forward(model: Model, batch, mode: Mode = Mode.EVAL) -> np.ndarray:
    return model.forward(batch, mode)


def loss_and_grads(model: Model, batch, labels):
    return model.loss_and_grads(batch, labels)


def sgd_step(model: Model, gradients, base_lr, group_lrs=None, momentum=0.9) -> None:
    model.sgd_step(gradients, base_lr, group_lrs, momentum)


def set_frozen(model: Model, groups, frozen: bool) -> None:
    model.set_frozen(groups, frozen)
