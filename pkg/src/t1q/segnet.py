"""3D U-Net segmenter, sparse-label Dice loss, Adam and the training protocol.

Network layout for ``depth`` levels and ``base`` channels (``b_l = base * 2**l``)::

    enc_l  (l < depth): [conv3 -> instance norm -> leaky relu] x 2, dropout, 2x max-pool
    enc_depth:          same block without pooling (bottleneck)
    dec_l  (l < depth): transposed conv (k=2, s=2) b_{l+1} -> b_l, concat [up, skip],
                        block 2*b_l -> b_l, dropout
    head:               conv1 b_0 -> num_classes, softmax over classes

Dropout sits after every level listed in ``dropout_placement`` (all levels by
default) and is active in TRAIN and MC_DROPOUT modes.
"""
import csv
import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from . import rng as rng_mod
from .autodiff import RULES, Graph, Mode, OpKind, backward, forward
from .checkpoint import load_tensors, save_tensors
from .volume import NUM_CLASSES, UNLABELED, SparseLabelVolume

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class UNetConfig:
    in_channels: int
    num_classes: int = NUM_CLASSES
    depth: int = 2
    base_channels: int = 4
    dropout_p: float = 0.1
    dropout_placement: tuple = None  # level names; None = every level

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1 or self.in_channels < 1:
            raise ValueError("depth, base_channels and in_channels must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.dropout_placement is None:
            self.dropout_placement = self.level_names()
        self.dropout_placement = tuple(self.dropout_placement)
        unknown = set(self.dropout_placement) - set(self.level_names())
        if unknown:
            raise ValueError(f"unknown dropout levels {sorted(unknown)}")

    def level_names(self):
        return tuple(f"enc{l}" for l in range(self.depth + 1)) + tuple(f"dec{l}" for l in range(self.depth))

    def check_dims(self, dims):
        m = 2 ** self.depth
        bad = [d for d in dims if d % m]
        if bad:
            raise ValueError(f"input dims {tuple(dims)} must be divisible by 2**depth = {m}")


@dataclass
class SegModel:
    config: UNetConfig
    graph: Graph
    input_name: str = "image"
    output_name: str = "probs"

    @property
    def params(self):
        return self.graph.params

    def checksum(self):
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()


def _kaiming(gen, shape, fan_in):
    return gen.normal(0.0, math.sqrt(2.0 / fan_in), shape)


def build_unet(cfg, seed=0):
    """Fresh U-Net; every weight tensor is drawn from its own keyed stream."""
    g = Graph()
    x = g.input("image", (None, cfg.in_channels, None, None, None))

    def weight(name, shape, fan_in):
        return g.param(name, _kaiming(rng_mod.stream(seed, "init", name), shape, fan_in))

    def block(h, cin, cout, tag):
        for j in (1, 2):
            w = weight(f"{tag}.conv{j}.w", (cout, cin, 3, 3, 3), cin * 27)
            b = g.param(f"{tag}.conv{j}.b", np.zeros(cout))
            h = g.add(OpKind.CONV3D, [h], (w, b))
            gamma = g.param(f"{tag}.norm{j}.gamma", np.ones(cout))
            beta = g.param(f"{tag}.norm{j}.beta", np.zeros(cout))
            h = g.add(OpKind.INSTANCE_NORM, [h], (gamma, beta))
            h = g.add(OpKind.LEAKY_RELU, [h])
            cin = cout
        if tag in cfg.dropout_placement:
            h = g.add(OpKind.DROPOUT, [h], p=cfg.dropout_p)
        return h

    b = cfg.base_channels
    skips = []
    h, c = x, cfg.in_channels
    for l in range(cfg.depth):
        h = block(h, c, b * 2 ** l, f"enc{l}")
        skips.append(h)
        h = g.add(OpKind.MAX_POOL3D, [h])
        c = b * 2 ** l
    h = block(h, c, b * 2 ** cfg.depth, f"enc{cfg.depth}")
    c = b * 2 ** cfg.depth
    for l in reversed(range(cfg.depth)):
        cout = b * 2 ** l
        w = weight(f"up{l}.w", (c, cout, 2, 2, 2), c)
        bias = g.param(f"up{l}.b", np.zeros(cout))
        up = g.add(OpKind.TRANSPOSED_CONV3D, [h], (w, bias))
        h = g.add(OpKind.CONCAT, [up, skips[l]])
        h = block(h, 2 * cout, cout, f"dec{l}")
        c = cout
    w = weight("head.w", (cfg.num_classes, c, 1, 1, 1), c)
    bias = g.param("head.b", np.zeros(cfg.num_classes))
    logits = g.add(OpKind.CONV3D, [h], (w, bias))
    g.output("probs", g.add(OpKind.SOFTMAX, [logits]))
    return SegModel(cfg, g)


def save_model(model, path, metadata=None):
    meta = {"unet": asdict(model.config), **(metadata or {})}
    save_tensors(path, model.params, meta)


def load_model(path):
    """Returns ``(model, metadata)``."""
    tensors, meta = load_tensors(path)
    cfg = UNetConfig(**meta["unet"])
    model = build_unet(cfg, seed=0)
    missing = set(model.params) ^ set(tensors)
    if missing:
        raise ValueError(f"checkpoint parameters do not match the architecture: {sorted(missing)[:5]}")
    for name, arr in tensors.items():
        model.params[name] = np.array(arr, dtype=np.float64)
    return model, meta


# ---------------------------------------------------------------- loss


def _label_array(labels):
    return labels.labels if isinstance(labels, SparseLabelVolume) else np.asarray(labels)


def one_hot(labels, num_classes):
    """``(1, C, *spatial)`` one-hot target and ``(1, 1, *spatial)`` labeled-voxel weight."""
    lab = _label_array(labels)
    labeled = lab != UNLABELED
    if np.any(lab[labeled] >= num_classes):
        raise ValueError(f"label values exceed num_classes={num_classes}")
    safe = np.where(labeled, lab, 0).astype(np.intp)
    g = (np.arange(num_classes).reshape((-1,) + (1,) * lab.ndim) == safe[None]).astype(np.float64)
    g *= labeled[None]
    return g[None], labeled[None, None].astype(np.float64)


def dice_loss(probs, labels):
    """Soft Dice loss over labeled voxels; returns ``(loss, d loss / d probs)``.

    ``loss = 1 - mean_c dice_c`` over classes that occur among labeled voxels,
    ``dice_c = (2 sum p g + eps) / (sum p + sum g + eps)``; UNLABELED voxels are
    left out of every sum. ``labels`` carries spatial axes only; ``probs`` is
    ``(C, *spatial)`` or ``(1, C, *spatial)``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    squeeze = probs.ndim == _label_array(labels).ndim + 1
    p = probs[None] if squeeze else probs
    g, w = one_hot(labels, p.shape[1])
    if p.shape[2:] != g.shape[2:]:
        raise ValueError(f"probability grid {p.shape[2:]} differs from label grid {g.shape[2:]}")
    if not w.any():
        raise ValueError("no labeled voxels")
    rule = RULES[OpKind.DICE_TERMS]
    ctx = {}
    d = rule.forward([p, g, w], [], {}, ctx)
    present = (g.sum(axis=(0,) + tuple(range(2, g.ndim))) > 0).astype(np.float64)
    n = present.sum()
    loss = 1.0 - float((present * d).sum() / n)
    grad = rule.backward(-present / n, ctx, {}, [])[0][0]
    return loss, (grad[0] if squeeze else grad)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr, weight_decay=0.0, betas=ADAM_BETAS, eps=ADAM_EPS):
    """One Adam update in place; weight decay enters as an L2 term on the gradient."""
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {theta.shape}")
        if weight_decay:
            g = g + weight_decay * theta
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        theta -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


# ---------------------------------------------------------------- data


@dataclass
class Sample:
    image: np.ndarray  # (C, H, W, L)
    labels: np.ndarray  # (H, W, L) uint8 with UNLABELED

    @classmethod
    def from_stack(cls, stack, labels):
        lab = _label_array(labels)
        if lab.shape != stack.dims:
            raise ValueError(f"labels {lab.shape} and channels {stack.dims} disagree")
        return cls(stack.array(), np.asarray(lab, dtype=np.uint8))


@dataclass
class AugmentParams:
    flip: bool = False
    scale: float = 1.0
    rotation: tuple = (0.0, 0.0, 0.0)  # degrees about x, y, z
    translation: tuple = (0.0, 0.0, 0.0)  # voxels
    crop_origin: tuple = (0, 0, 0)

    def is_identity_affine(self):
        return self.scale == 1.0 and not any(self.rotation) and not any(self.translation)


@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    scale_range: tuple = (0.9, 1.1)
    max_rotation: float = 10.0
    max_translation: float = 5.0


def draw_augment(gen, dims, crop_size, cfg=AugmentConfig()):
    if any(c > d for c, d in zip(crop_size, dims)):
        raise ValueError(f"crop {tuple(crop_size)} larger than volume {tuple(dims)}")
    flip = bool(gen.random() < cfg.flip_prob)
    scale = float(gen.uniform(*cfg.scale_range))
    rotation = tuple(float(a) for a in gen.uniform(-cfg.max_rotation, cfg.max_rotation, 3))
    translation = tuple(float(t) for t in gen.uniform(-cfg.max_translation, cfg.max_translation, 3))
    origin = tuple(int(gen.integers(0, d - c + 1)) for d, c in zip(dims, crop_size))
    return AugmentParams(flip, scale, rotation, translation, origin)


def _rotation_matrix(angles_deg):
    ax, ay, az = np.deg2rad(angles_deg)
    rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


def apply_augment(sample, params, crop_size):
    """Flip, affine-resample (trilinear images, nearest labels) about the centre, then crop."""
    image, labels = sample.image, sample.labels
    if params.flip:
        image = image[:, ::-1]
        labels = labels[::-1]
    if not params.is_identity_affine():
        fwd = _rotation_matrix(params.rotation) * params.scale
        inv = np.linalg.inv(fwd)
        centre = (np.array(labels.shape) - 1) / 2.0
        offset = centre - inv @ (centre + np.asarray(params.translation))
        image = np.stack([
            ndimage.affine_transform(ch, inv, offset, order=1, mode="constant", cval=0.0) for ch in image
        ])
        labels = ndimage.affine_transform(labels, inv, offset, order=0, mode="constant", cval=UNLABELED,
                                          prefilter=False)
    o = params.crop_origin
    sl = tuple(slice(a, a + c) for a, c in zip(o, crop_size))
    return Sample(np.ascontiguousarray(image[(slice(None),) + sl]), np.ascontiguousarray(labels[sl]))


def augment(sample, gen, crop_size, cfg=AugmentConfig()):
    return apply_augment(sample, draw_augment(gen, sample.labels.shape, crop_size, cfg), crop_size)


def center_crop_sample(sample, crop_size):
    dims = sample.labels.shape
    if crop_size is None:
        return sample
    origin = tuple((d - c) // 2 for d, c in zip(dims, crop_size))
    return apply_augment(sample, AugmentParams(crop_origin=origin), crop_size)


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    lr_decay_factor: float = 0.9
    lr_patience: int = 5
    early_stop_patience: int = 15
    crop_size: tuple = (32, 32, 32)
    max_epochs: int = 100
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if not 0 < self.lr_decay_factor < 1:
            raise ValueError("lr_decay_factor must lie in (0, 1)")
        if self.lr_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be positive")
        if self.crop_size is not None:
            self.crop_size = tuple(int(c) for c in self.crop_size)


class PlateauSchedule:
    """Reduce-on-plateau learning rate with early stopping.

    A validation loss strictly below the best so far is an improvement. The
    lr counter resets on improvement and after every decay; the early-stop
    counter only resets on improvement.
    """

    def __init__(self, lr, factor=0.9, patience=5, stop_patience=15):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.stop_patience = stop_patience
        self.best = math.inf
        self.best_epoch = None
        self.stagnant = 0
        self.since_best = 0
        self.drops = []

    def step(self, epoch, val_loss):
        """Record the loss of ``epoch``; returns True when training should stop."""
        if val_loss < self.best:
            self.best, self.best_epoch = val_loss, epoch
            self.stagnant = self.since_best = 0
            return False
        self.stagnant += 1
        self.since_best += 1
        if self.stagnant >= self.patience:
            self.lr *= self.factor
            self.stagnant = 0
            self.drops.append(epoch)
        return self.since_best >= self.stop_patience


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainReport:
    epochs: list
    best_epoch: int
    stop_reason: str  # EARLY_STOP | MAX_EPOCHS
    initial_val_loss: float
    lr_drops: list

    @property
    def best_val_loss(self):
        return min(r.val_loss for r in self.epochs)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "lr"])
            for r in self.epochs:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.lr)])


def _forward_probs(model, image, mode, gen):
    model.config.check_dims(image.shape[1:])
    out = forward(model.graph, {model.input_name: image[None]}, mode, gen)
    return out[model.output_name]


def evaluate_loss(model, samples, crop_size):
    losses = []
    for s in samples:
        s = center_crop_sample(s, crop_size)
        probs = _forward_probs(model, s.image, Mode.EVAL, None)
        losses.append(dice_loss(probs, s.labels)[0])
    return float(np.mean(losses))


def train(model, dataset, fold, cfg=TrainConfig(), log=None):
    """Train in place; the model ends with the best-validation parameters.

    ``dataset`` maps subject id -> :class:`Sample`; ``fold`` has ``train`` and
    ``val`` id lists.
    """
    train_ids, val_ids = list(fold.train), list(fold.val)
    if not train_ids or not val_ids:
        raise ValueError("fold needs non-empty train and validation sets")
    missing = [s for s in train_ids + val_ids if s not in dataset]
    if missing:
        raise KeyError(f"dataset lacks subjects {missing}")
    crop = cfg.crop_size
    for s in train_ids + val_ids:
        dims = dataset[s].labels.shape
        if crop is not None and any(c > d for c, d in zip(crop, dims)):
            raise ValueError(f"crop {crop} larger than subject {s} volume {dims}")
    val_samples = [dataset[s] for s in val_ids]

    sched = PlateauSchedule(cfg.lr, cfg.lr_decay_factor, cfg.lr_patience, cfg.early_stop_patience)
    state = AdamState()
    initial = evaluate_loss(model, val_samples, crop)
    best_params = {k: v.copy() for k, v in model.params.items()}
    records = []
    stop = "MAX_EPOCHS"
    for epoch in range(1, cfg.max_epochs + 1):
        lr = sched.lr
        order = rng_mod.stream(cfg.seed, "order", epoch).permutation(len(train_ids))
        losses = []
        for step, i in enumerate(order):
            sid = train_ids[i]
            sample = dataset[sid]
            aug_rng = rng_mod.stream(cfg.seed, "augment", epoch, step)
            if cfg.augment:
                sample = augment(sample, aug_rng, crop or sample.labels.shape)
            else:
                sample = center_crop_sample(sample, crop)
            probs = _forward_probs(model, sample.image, Mode.TRAIN, rng_mod.stream(cfg.seed, "dropout", epoch, step))
            loss, dprobs = dice_loss(probs, sample.labels)
            grads = backward(model.graph, {model.output_name: dprobs})
            adam_step(model.params, grads.params, state, lr, cfg.weight_decay)
            losses.append(loss)
        model.graph.clear()
        val = evaluate_loss(model, val_samples, crop)
        records.append(EpochRecord(epoch, float(np.mean(losses)), val, lr))
        if log:
            log(f"epoch {epoch}: train {records[-1].train_loss:.4f} val {val:.4f} lr {lr:.3g}")
        improved = val < sched.best
        done = sched.step(epoch, val)
        if improved:
            best_params = {k: v.copy() for k, v in model.params.items()}
        if done:
            stop = "EARLY_STOP"
            break
    for k, v in best_params.items():
        model.params[k][...] = v
    model.graph.clear()
    return TrainReport(records, sched.best_epoch, stop, initial, sched.drops)


# ---------------------------------------------------------------- inference


def predict(model, image, mode=Mode.EVAL, gen=None):
    """Class probabilities ``(C, H, W, L)`` and the argmax label map.

    ``image`` is a ChannelStack or a ``(C, H, W, L)`` array. Ties in the argmax
    go to the lower class index.
    """
    arr = image.array() if hasattr(image, "array") else np.asarray(image, dtype=np.float64)
    if arr.shape[0] != model.config.in_channels:
        raise ValueError(f"model expects {model.config.in_channels} channels, got {arr.shape[0]}")
    probs = _forward_probs(model, arr, Mode(mode), gen)[0]
    model.graph.clear()
    return probs, np.argmax(probs, axis=0).astype(np.uint8)


# ---------------------------------------------------------------- folds


@dataclass(frozen=True)
class Fold:
    train: tuple
    val: tuple
    test: tuple


def make_folds(subject_ids, k=8, seed=0, n_val=2):
    """Cross-validation plan.

    Subjects are shuffled by ``seed`` and cut into ``k`` equal test groups.
    Fold ``f`` tests group ``f``; its validation set is the first ``n_val``
    subjects of the following groups in rotation (group ``f+1`` first);
    everything else trains. With 24 subjects, k=8 and n_val=2 this gives 19/2/3.
    """
    ids = list(subject_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("subject ids must be unique")
    if k < 2 or len(ids) % k:
        raise ValueError(f"{len(ids)} subjects cannot be split into {k} equal test groups")
    size = len(ids) // k
    if n_val < 1 or n_val > len(ids) - size - 1:
        raise ValueError(f"n_val={n_val} leaves no training subjects")
    perm = rng_mod.stream(seed, "folds").permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    groups = [shuffled[g * size:(g + 1) * size] for g in range(k)]
    plan = []
    for f in range(k):
        test = groups[f]
        rest = [s for j in range(1, k) for s in groups[(f + j) % k]]
        val = rest[:n_val]
        train_ = rest[n_val:]
        plan.append(Fold(tuple(train_), tuple(val), tuple(test)))
    return plan
