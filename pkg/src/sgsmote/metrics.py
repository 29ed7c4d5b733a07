"""Group aggregation and precision/recall/F1 reporting."""

from __future__ import annotations

import numpy as np


def aggregate(node_preds, node_labels, groups, node_probs=None):
    """Collapse node predictions and labels to groups (onsets or beats).

    A group is predicted as a cadence class if any member is; when members
    disagree between nonzero classes the class with the largest summed
    probability wins (lowest class id without probabilities).  Group labels
    follow the same any-member rule.
    """
    preds = np.asarray(node_preds)
    labels = np.asarray(node_labels)
    groups = np.asarray(groups)
    uniq, inv = np.unique(groups, return_inverse=True)
    g = len(uniq)
    n_cls = int(max(preds.max(initial=0), labels.max(initial=0))) + 1
    if node_probs is not None:
        n_cls = max(n_cls, node_probs.shape[1])
    hit = np.zeros((g, n_cls), dtype=bool)
    hit[inv, preds] = True
    score = np.zeros((g, n_cls))
    if node_probs is not None:
        np.add.at(score, inv, node_probs)
    gp = np.zeros(g, dtype=np.int64)
    for k in range(g):
        cand = np.nonzero(hit[k, 1:])[0] + 1
        if len(cand) == 1:
            gp[k] = cand[0]
        elif len(cand) > 1:
            gp[k] = cand[np.argmax(score[k, cand])]  # argmax takes the first on ties
    lab = np.zeros((g, n_cls), dtype=bool)
    lab[inv, labels] = True
    gl = np.zeros(g, dtype=np.int64)
    for k in range(g):
        cand = np.nonzero(lab[k, 1:])[0]
        if len(cand):
            gl[k] = cand[0] + 1
    return gp, gl


def _prf(tp, fp, fn):
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def f1_report(preds, labels, num_classes: int = 2, class_names=None) -> dict:
    """Per-class precision/recall/F1, macro-F1 over all classes, confusion
    counts.  ``f1`` is the positive-class F1 for two classes, else macro."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError("preds and labels differ in length")
    names = list(class_names) if class_names is not None else [str(c) for c in range(num_classes)]
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (labels, preds), 1)
    per_class = {}
    f1s = []
    for c in range(num_classes):
        tp = int(conf[c, c])
        fp = int(conf[:, c].sum() - tp)
        fn = int(conf[c, :].sum() - tp)
        p, r, f = _prf(tp, fp, fn)
        per_class[names[c]] = {"precision": p, "recall": r, "f1": f, "tp": tp, "fp": fp, "fn": fn,
                               "support": int(conf[c, :].sum())}
        f1s.append(f)
    macro = float(np.mean(f1s)) if f1s else 0.0
    report = {
        "n": int(len(labels)),
        "per_class": per_class,
        "macro_f1": macro,
        "confusion": conf.tolist(),
    }
    if num_classes == 2:
        pos = per_class[names[1]]
        report.update(precision=pos["precision"], recall=pos["recall"], f1=pos["f1"])
    else:
        report["f1"] = macro
    return report
