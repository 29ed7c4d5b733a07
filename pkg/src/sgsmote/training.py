"""Minibatch training, inference, evaluation and piece-level splits."""

from __future__ import annotations

import logging
import re
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import model as M
from .features import manifest_hash
from .graph import ScoreGraph, disjoint_union
from .metrics import aggregate, f1_report
from .sampling import sample_neighbors

log = logging.getLogger(__name__)

LEVELS = ("note", "onset", "beat")


@dataclass
class TrainConfig:
    hidden_dim: int = 256
    layers: int = 2
    fanouts: list = field(default_factory=lambda: [10, 25])
    lr: float = 0.007
    weight_decay: float = 0.007
    batch_size: int = 1024
    smote_k: int = 3
    gamma: float = 0.5
    tau: float = 0.5
    epochs: int = 50
    seed: int = 0
    scheme: str = "binary:PAC"
    feature_set: str = "all"
    clf_graph: bool = True  # classifier aggregates over batch adjacency

    def __post_init__(self):
        self.fanouts = [int(f) for f in self.fanouts]
        if len(self.fanouts) != self.layers:
            raise ValueError(f"need {self.layers} fanouts, got {len(self.fanouts)}")
        if any(f < 0 for f in self.fanouts):
            raise ValueError("fanouts must be >= 0")
        if self.hidden_dim <= 0 or self.batch_size <= 0 or self.smote_k <= 0 or self.epochs < 0:
            raise ValueError("hidden_dim, batch_size, smote_k must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class TrainResult:
    params: dict
    log: list
    best_epoch: int


class ManifestMismatch(ValueError):
    pass


class Adam:
    """Adam with decoupled weight decay."""

    def __init__(self, params, lr, weight_decay, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.wd, self.b1, self.b2, self.eps = lr, weight_decay, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, w in params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            w -= self.lr * self.wd * w
            w -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def num_classes(graphs: Sequence[ScoreGraph]) -> int:
    return len(graphs[0].classes)


def train(graphs: Sequence[ScoreGraph], cfg: TrainConfig, val_graphs: Sequence[ScoreGraph] = (),
          init: dict | None = None, on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train on the disjoint union of ``graphs``.

    With ``val_graphs`` the returned parameters are those of the epoch with
    the best validation note-level macro-F1; otherwise the final epoch's.
    """
    g, _ = disjoint_union(list(graphs))
    x = g.features.astype(np.float64)
    n_cls = num_classes(graphs)
    init_rng = np.random.default_rng([cfg.seed, 0])
    rng = np.random.default_rng([cfg.seed, 1])
    if init is None:
        params = M.init_params(g.d, cfg.hidden_dim, cfg.layers, n_cls, init_rng)
    else:
        expected = M.param_shapes(g.d, cfg.hidden_dim, cfg.layers, n_cls)
        if {k: v.shape for k, v in init.items()} != expected:
            raise ValueError("initial parameters do not match the model shape")
        params = {k: np.array(v, dtype=np.float64) for k, v in init.items()}
    opt = Adam(params, cfg.lr, cfg.weight_decay)
    history = []
    best = (-1.0, -1, {k: v.copy() for k, v in params.items()})
    train_nodes = np.arange(g.n)
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(train_nodes)
        tot = ce = bce = 0.0
        nb = 0
        for start in range(0, len(perm), cfg.batch_size):
            seeds = perm[start:start + cfg.batch_size]
            blocks = sample_neighbors(g, seeds, cfg.fanouts, rng, features=x)
            try:
                res, grads = M.gradients(params, blocks, k=cfg.smote_k, gamma=cfg.gamma,
                                         tau=cfg.tau, rng=rng, clf_graph=cfg.clf_graph)
            except M.NumericError as exc:
                raise M.NumericError(f"epoch {epoch}, batch {nb}: {exc}") from exc
            opt.step(params, grads)
            tot += float(res.loss.value)
            ce += res.ce
            bce += res.bce
            nb += 1
        rec = {"epoch": epoch, "loss_total": tot / nb, "loss_ce": ce / nb, "loss_bce": bce / nb,
               "val_macro_f1": None}
        if val_graphs:
            rep = evaluate(params, val_graphs, cfg, levels=("note",))
            rec["val_macro_f1"] = rep["note"]["macro_f1"]
            if rec["val_macro_f1"] > best[0]:
                best = (rec["val_macro_f1"], epoch, {k: v.copy() for k, v in params.items()})
        history.append(rec)
        log.info("epoch %d loss %.4f ce %.4f bce %.4f val %s", epoch, rec["loss_total"],
                 rec["loss_ce"], rec["loss_bce"], rec["val_macro_f1"])
        if on_epoch is not None:
            on_epoch(rec)
    if val_graphs and best[1] > 0:
        return TrainResult(best[2], history, best[1])
    return TrainResult(params, history, cfg.epochs)


def inference_fanouts(cfg: TrainConfig) -> list:
    # full neighborhoods, except hops disabled during training stay disabled
    return [0 if f == 0 else None for f in cfg.fanouts]


def predict(params: dict, graph: ScoreGraph, cfg: TrainConfig, expected_hash: str | None = None,
            batch_size: int | None = None) -> np.ndarray:
    """Per-node class probabilities, batching every node once in id order."""
    if expected_hash is not None and manifest_hash(graph.feature_manifest) != expected_hash:
        raise ManifestMismatch(f"{graph.piece_id}: feature manifest does not match the checkpoint")
    pv = M.as_vars(params)
    x = graph.features.astype(np.float64)
    bs = batch_size or cfg.batch_size
    fan = inference_fanouts(cfg)
    out = []
    for start in range(0, graph.n, bs):
        seeds = np.arange(start, min(start + bs, graph.n))
        blocks = sample_neighbors(graph, seeds, fan, None, features=x)
        out.append(M.forward_infer(pv, blocks, clf_graph=cfg.clf_graph))
    if not out:
        return np.zeros((0, len(graph.classes)))
    return np.concatenate(out)


def level_arrays(graph: ScoreGraph, probs: np.ndarray, level: str):
    preds = probs.argmax(axis=1)
    if level == "note":
        return preds, graph.labels
    groups = {"onset": graph.onset_group, "beat": graph.beat_group}[level]
    return aggregate(preds, graph.labels, groups, probs)


def evaluate(params, graphs: Sequence[ScoreGraph], cfg: TrainConfig, levels=LEVELS,
             expected_hash: str | None = None, probs_out: dict | None = None) -> dict:
    """Metrics per granularity over all ``graphs`` (groups never span pieces)."""
    acc = {lv: ([], []) for lv in levels}
    for g in graphs:
        probs = predict(params, g, cfg, expected_hash)
        if probs_out is not None:
            probs_out[g.piece_id] = probs
        for lv in levels:
            p, l = level_arrays(g, probs, lv)
            acc[lv][0].append(p)
            acc[lv][1].append(l)
    classes = graphs[0].classes if graphs else ("none", "PAC")
    return {lv: f1_report(np.concatenate(p) if p else np.zeros(0, int),
                          np.concatenate(l) if l else np.zeros(0, int), len(classes), classes)
            for lv, (p, l) in acc.items()}


# -- splits ------------------------------------------------------------------

@dataclass
class Split:
    train: list
    val: list
    test: list

    def check(self, corpus):
        parts = [set(self.train), set(self.val), set(self.test)]
        if parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2]:
            raise ValueError("split parts overlap")
        if set().union(*parts) != set(corpus):
            raise ValueError("split does not cover the corpus")
        return True


def natural_key(s: str):
    return [int(t) if t.isdigit() else t for t in re.split(r"(\d+)", s)]


def make_splits(pieces: Sequence[str], mode: str = "random-half", seed: int = 0, folds: int = 5,
                train_list: Sequence[str] | None = None) -> list[Split]:
    """Piece-level partitions.

    * ``fixed-list``: ``train_list`` (default: first half in natural order)
      trains, the rest tests.
    * ``random-half``: seeded shuffle, half train / half test.
    * ``kfold``: ``folds`` rotations; each test fold is 1/folds of the
      pieces, validation takes 10% of the corpus from the remainder.
    """
    pieces = list(pieces)
    if len(pieces) < 2:
        raise ValueError("need at least 2 pieces to split")
    if len(set(pieces)) != len(pieces):
        raise ValueError("duplicate piece ids")
    if mode == "fixed-list":
        ordered = sorted(pieces, key=natural_key)
        train_set = list(train_list) if train_list is not None else ordered[:len(ordered) // 2]
        missing = set(train_set) - set(pieces)
        if missing:
            raise ValueError(f"unknown pieces in train list: {sorted(missing)}")
        test = [p for p in ordered if p not in set(train_set)]
        return [Split(sorted(train_set, key=natural_key), [], test)]
    rng = np.random.default_rng(seed)
    shuffled = [pieces[i] for i in rng.permutation(len(pieces))]
    if mode == "random-half":
        h = len(shuffled) // 2
        return [Split(shuffled[:h], [], shuffled[h:])]
    if mode == "kfold":
        if len(pieces) < folds:
            raise ValueError(f"need at least {folds} pieces for {folds}-fold splits")
        chunks = np.array_split(np.arange(len(shuffled)), folds)
        n_val = max(1, round(0.1 * len(pieces)))
        out = []
        for i in range(folds):
            test = [shuffled[j] for j in chunks[i]]
            rest = [shuffled[j] for c in chunks[i + 1:] + chunks[:i] for j in c]
            out.append(Split(rest[n_val:], rest[:n_val], test))
        return out
    raise ValueError(f"unknown split mode {mode!r}")
