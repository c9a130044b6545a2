"""Monte-Carlo-dropout gradient saliency per input channel (Overall Importance Score).

For subject ``s``, MC run ``m`` and class ``c`` the network is run once with a
fresh dropout realisation, and ``sum_v p[c, v]`` is back-propagated to the
input. The absolute input gradient is summed over voxels per channel. The
score of channel ``i`` is the total over classes, subjects and runs divided
by ``S * M``.
"""
import copy
import csv
import json
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import rng as rng_mod
from .autodiff import Mode, OpKind, backward, forward


@dataclass
class OISConfig:
    mc_runs: int = 100
    dropout_p: float = 0.1
    classes: tuple = None  # None = every output class
    seed: int = 0
    keep_raw: bool = False
    threads: int = 1

    def __post_init__(self):
        if self.mc_runs < 1:
            raise ValueError("mc_runs must be >= 1")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must lie in [0, 1)")


@contextmanager
def dropout_rate(model, p):
    """Temporarily set every dropout node of ``model`` to rate ``p``."""
    nodes = [n for n in model.graph.nodes if n.kind is OpKind.DROPOUT]
    old = [n.attrs["p"] for n in nodes]
    for n in nodes:
        n.attrs["p"] = p
    try:
        yield model
    finally:
        for n, q in zip(nodes, old):
            n.attrs["p"] = q


def _as_array(image):
    return image.array() if hasattr(image, "array") else np.asarray(image, dtype=np.float64)


def class_gradients(model, image, classes, mode=Mode.MC_DROPOUT, gen=None):
    """Input gradients of ``sum_v p[c, v]`` for each class in ``classes``.

    One forward pass (one dropout realisation) and one backward pass per class.
    Returns an array ``(len(classes), C_in, H, W, L)``.
    """
    arr = _as_array(image)
    model.config.check_dims(arr.shape[1:])
    probs = forward(model.graph, {model.input_name: arr[None]}, mode, gen)[model.output_name]
    n_cls = probs.shape[1]
    out = np.empty((len(classes),) + arr.shape)
    for j, c in enumerate(classes):
        if not 0 <= c < n_cls:
            raise IndexError(f"class index {c} outside [0, {n_cls})")
        ct = np.zeros_like(probs)
        ct[:, c] = 1.0
        out[j] = backward(model.graph, {model.output_name: ct}).inputs[model.input_name][0]
    model.graph.clear()
    return out


def class_sum_gradient(model, image, c, mode=Mode.MC_DROPOUT, gen=None):
    """Per-channel gradient volumes ``(C_in, H, W, L)`` of ``sum_v p[c, v]``."""
    return class_gradients(model, image, [c], mode, gen)[0]


def channel_score(grad):
    """L1 aggregation of a gradient volume."""
    g = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise ValueError("gradient contains non-finite values")
    return float(np.abs(g).sum())


@dataclass
class OISReport:
    scores: np.ndarray
    ranks: np.ndarray  # 1 = most important
    channels: list  # dicts: index, name, kind, ti
    meta: dict
    raw: np.ndarray = field(default=None, repr=False)  # (S, M, classes, channels)

    @property
    def order(self):
        """Channel indices from most to least important."""
        return [int(i) for i in np.argsort(self.ranks, kind="stable")]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["channel_index", "kind", "ti_ms", "score", "rank"])
            for ch, s, r in zip(self.channels, self.scores, self.ranks):
                ti = "" if ch.get("ti") is None else f"{ch['ti']:g}"
                w.writerow([ch["index"], ch["kind"], ti, repr(float(s)), int(r)])

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.meta, fh, indent=2, sort_keys=True)


def rank_scores(scores):
    """Ranks 1..n by descending score; ties go to the lower channel index."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    ranks = np.empty(len(scores), dtype=np.int64)
    ranks[order] = np.arange(1, len(scores) + 1)
    return ranks


def _channel_info(image, n):
    meta = getattr(image, "meta", None)
    if meta is None:
        return [{"index": i, "name": f"ch{i}", "kind": "UNKNOWN", "ti": None} for i in range(n)]
    return [{"index": i, "name": m.name, "kind": m.kind, "ti": m.ti} for i, m in enumerate(meta)]


def _subject_scores(model, image, sid, cfg, classes):
    """``(M, len(classes), C_in)`` L1 scores for one subject."""
    out = []
    with dropout_rate(model, cfg.dropout_p):
        for m in range(cfg.mc_runs):
            gen = rng_mod.stream(cfg.seed, "ois", str(sid), m)
            grads = class_gradients(model, image, classes, Mode.MC_DROPOUT, gen)
            out.append(np.abs(grads).sum(axis=(2, 3, 4)))
    return np.array(out)


def compute_ois(models, dataset, cfg=OISConfig()):
    """Overall Importance Score for every input channel.

    ``dataset`` maps subject id -> ChannelStack or ``(C, H, W, L)`` array.
    ``models`` is one SegModel for all subjects or a dict subject id -> model
    (the fold model for which that subject was held out).
    """
    if not dataset:
        raise ValueError("no subjects to score")
    ids = list(dataset)
    model_of = models if isinstance(models, dict) else {sid: models for sid in ids}
    missing = [s for s in ids if s not in model_of]
    if missing:
        raise KeyError(f"no model assigned to subjects {missing}")

    first = dataset[ids[0]]
    n_ch = _as_array(first).shape[0]
    info = _channel_info(first, n_ch)
    for sid in ids[1:]:
        other = _channel_info(dataset[sid], _as_array(dataset[sid]).shape[0])
        if [(c["name"], c["kind"], c["ti"]) for c in other] != [(c["name"], c["kind"], c["ti"]) for c in info]:
            raise ValueError(f"channel order of subject {sid!r} differs from subject {ids[0]!r}")

    n_cls = model_of[ids[0]].config.num_classes
    classes = list(range(n_cls)) if cfg.classes is None else list(cfg.classes)

    def work(sid):
        model = model_of[sid]
        if cfg.threads > 1:
            model = copy.deepcopy(model)
        return sid, _subject_scores(model, dataset[sid], sid, cfg, classes)

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            per_subject = dict(pool.map(work, ids))
    else:
        per_subject = dict(work(sid) for sid in ids)

    # fixed reduction order: subjects sorted by id, then runs, then classes
    total = np.zeros(n_ch)
    for sid in sorted(per_subject, key=str):
        total += per_subject[sid].sum(axis=(0, 1))
    scores = total / (len(ids) * cfg.mc_runs)

    checksums = sorted({m.checksum() for m in {id(v): v for v in model_of.values()}.values()})
    meta = {
        "seed": cfg.seed, "mc_runs": cfg.mc_runs, "dropout_p": cfg.dropout_p,
        "subjects": len(ids), "subject_ids": [str(s) for s in ids], "classes": len(classes),
        "model_checksums": checksums, "aggregation": "L1_SUM",
    }
    raw = np.stack([per_subject[s] for s in ids]) if cfg.keep_raw else None
    return OISReport(scores, rank_scores(scores), info, meta, raw)


def select_topk(report, k):
    """Indices of the ``k`` best channels, best first."""
    n = len(report.scores)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    return report.order[:k]
