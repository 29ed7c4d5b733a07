"""Command line: ingest, build, train, eval, predict (plus synth for demos).

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import model as M
from .features import build_score_graph, manifest_hash
from .graph import GraphFormatError, load_graph, save_graph
from .kern import parse_kern
from .score import (CadenceAnnotation, Score, ScoreError, assign_labels, format_rational,
                    parse_note_table, parse_rational, serialize_note_table)
from .synthetic import planted_corpus
from .training import (LEVELS, ManifestMismatch, Split, TrainConfig, evaluate, make_splits, predict,
                       train)

log = logging.getLogger("sgsmote")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("SGSM_THREADS", "1")))
    except ValueError:
        return 1


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- score input ---------------------------------------------------------------

def read_score(path: Path) -> Score:
    """Load a .krn, Note-Table .tsv (with ``<stem>.meta.json``) or .json score."""
    meta_path = path.with_name(path.stem + ".meta.json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else None
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".krn":
        # kern carries no cadence labels; they come from the sidecar
        anns = [CadenceAnnotation(parse_rational(c["onset"]), str(c["type"]))
                for c in (meta or {}).get("cadences", [])]
        return parse_kern(text, piece_id=path.stem, annotations=anns)
    if path.suffix in (".tsv", ".json"):
        return parse_note_table(text, meta, piece_id=path.stem)
    raise ScoreError(f"{path}: unsupported file type")


def _is_sidecar(p: Path) -> bool:
    return p.name.endswith(".meta.json")


def _score_inputs(paths) -> list[Path]:
    """Score files named directly or found in directories; ``.meta.json``
    sidecars are read alongside their score, never on their own."""
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out += sorted(q for q in p.iterdir()
                          if q.suffix in (".krn", ".tsv", ".json") and not _is_sidecar(q))
        elif not _is_sidecar(p):
            out.append(p)
    return out


def write_score(score: Score, out: Path) -> None:
    tsv, meta = serialize_note_table(score)
    (out / f"{score.piece_id}.tsv").write_text(tsv)
    _dump(out / f"{score.piece_id}.meta.json", meta)


def cmd_ingest(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    failed, notes, positives, pieces = [], 0, 0, 0
    for path in _score_inputs(args.paths):
        try:
            score = read_score(path)
        except (ScoreError, OSError, ValueError, json.JSONDecodeError) as exc:
            failed.append((path, exc))
            print(f"error: {path}: {exc}", file=sys.stderr)
            continue
        write_score(score, out)
        pieces += 1
        notes += len(score)
        positives += int((assign_labels(score, "multiclass") > 0).sum())
    rate = positives / notes if notes else 0.0
    print(f"pieces: {pieces}  notes: {notes}  cadence label rate: {100 * rate:.2f}%")
    if rate >= 0.02:
        print("warning: cadence label rate is not < 2% of nodes; check annotation alignment")
    if failed:
        print(f"{len(failed)} file(s) failed: " + ", ".join(str(p) for p, _ in failed), file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def _build_one(job):
    path, out, scheme, feature_set = job
    score = read_score(Path(path))
    g = build_score_graph(score, scheme, feature_set)
    save_graph(g, Path(out) / f"{score.piece_id}.sggr")
    _dump(Path(out) / f"{score.piece_id}.manifest.json",
          {"feature_set": feature_set, "d": g.d, "hash": manifest_hash(g.feature_manifest),
           "features": g.feature_manifest, "classes": list(g.classes)})
    return score.piece_id, g.n, g.num_edges, g.d


def cmd_build(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(str(p), str(out), args.scheme, args.feature_set) for p in _score_inputs(args.paths)]
    if not jobs:
        raise DataError("no score files found")
    w = _workers()
    if w > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=w) as pool:
            results = list(pool.map(_build_one, jobs))
    else:
        results = [_build_one(j) for j in jobs]
    nodes = sum(r[1] for r in results)
    edges = sum(r[2] for r in results)
    print(f"graphs: {len(results)}  nodes: {nodes}  edges: {edges}  width: {results[0][3]}")
    return EXIT_OK


# -- graphs, configs, checkpoints ------------------------------------------------

def load_graph_dir(path) -> dict:
    p = Path(path)
    files = sorted(p.glob("*.sggr")) if p.is_dir() else [p]
    if not files:
        raise DataError(f"{path}: no .sggr graph files")
    graphs = {}
    for f in files:
        g = load_graph(f)
        graphs[g.piece_id] = g
    hashes = {manifest_hash(g.feature_manifest) for g in graphs.values()}
    if len(hashes) > 1:
        raise DataError("graphs were built with different feature manifests")
    return graphs


def resolve_config(args) -> TrainConfig:
    base = {}
    if getattr(args, "config", None):
        base = json.loads(Path(args.config).read_text())
        base = base.get("train", base)
    flags = {
        "hidden_dim": args.hidden_dim, "layers": args.layers, "fanouts": args.fanouts,
        "lr": args.lr, "weight_decay": args.weight_decay, "batch_size": args.batch_size,
        "smote_k": args.smote_k, "gamma": args.gamma, "tau": args.tau, "epochs": args.epochs,
        "seed": args.seed, "clf_graph": args.clf_graph,
    }
    merged = {**base, **{k: v for k, v in flags.items() if v is not None}}
    if "layers" in merged and "fanouts" not in merged:
        merged["fanouts"] = ([10, 25] + [25] * 8)[:merged["layers"]]
    return TrainConfig.from_dict(merged)


def _split_from_args(args, pieces) -> Split:
    if args.split_file:
        s = json.loads(Path(args.split_file).read_text())
        return Split(s["train"], s.get("val", []), s["test"])
    if args.split == "none":
        return Split(sorted(pieces), [], [])
    splits = make_splits(sorted(pieces), args.split, seed=args.split_seed, folds=5,
                         train_list=args.train_pieces.split(",") if args.train_pieces else None)
    return splits[args.fold if args.split == "kfold" else 0]


def scheme_of(classes) -> str:
    if len(classes) == 2:
        return f"binary:{classes[1]}"
    return "multiclass:" + ",".join(classes[1:])


def feature_set_of(manifest) -> str:
    return "all" if any(m["category"] == "CADENCE_LOCAL" for m in manifest) else "general"


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    graphs = load_graph_dir(args.graphs)
    split = _split_from_args(args, graphs)
    missing = [p for p in split.train + split.val + split.test if p not in graphs]
    if missing:
        raise DataError(f"split names unknown pieces: {missing}")
    first = next(iter(graphs.values()))
    cfg.scheme = scheme_of(first.classes)
    cfg.feature_set = feature_set_of(first.feature_manifest)
    mhash = manifest_hash(first.feature_manifest)
    init = None
    if args.pretrained:
        ck = M.load_checkpoint(args.pretrained)
        if ck.header.get("manifest_hash") != mhash:
            raise ManifestMismatch("pretrained checkpoint was trained on a different feature manifest")
        init = ck.params
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / "config.json", {"train": cfg.to_dict(), "graphs": str(args.graphs),
                                "pretrained": args.pretrained})
    _dump(out / "split.json", {"train": split.train, "val": split.val, "test": split.test})
    train_graphs = [graphs[p] for p in split.train]
    val_graphs = [graphs[p] for p in split.val]
    with open(out / "train_log.jsonl", "w") as fh:
        def on_epoch(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()
        result = train(train_graphs, cfg, val_graphs, init=init, on_epoch=on_epoch)
    header = {
        "in_dim": first.d, "hidden_dim": cfg.hidden_dim, "layers": cfg.layers,
        "num_classes": len(first.classes), "classes": list(first.classes),
        "manifest_hash": mhash, "config": cfg.to_dict(), "best_epoch": result.best_epoch,
    }
    M.save_checkpoint(out / "model.sgsm", result.params, header)
    print(f"trained {cfg.epochs} epochs on {len(train_graphs)} pieces; best epoch {result.best_epoch}; "
          f"checkpoint {out / 'model.sgsm'}")
    return EXIT_OK


def _load_for_inference(ckpt_path):
    ck = M.load_checkpoint(ckpt_path)
    cfg = TrainConfig.from_dict(ck.header["config"])
    return ck, cfg


def cmd_eval(args) -> int:
    ck, cfg = _load_for_inference(args.checkpoint)
    graphs = load_graph_dir(args.graphs)
    if args.split_file:
        s = json.loads(Path(args.split_file).read_text())
        names = s[args.part]
    else:
        names = sorted(graphs)
    missing = [p for p in names if p not in graphs]
    if missing:
        raise DataError(f"pieces not found among graphs: {missing}")
    levels = tuple(lv.strip() for lv in args.levels.split(",") if lv.strip())
    bad = [lv for lv in levels if lv not in LEVELS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown levels {bad}")
    report = evaluate(ck.params, [graphs[p] for p in names], cfg, levels,
                      expected_hash=ck.header["manifest_hash"])
    report = {"pieces": names, "classes": ck.header["classes"], "levels": report}
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    for lv in levels:
        r = report["levels"][lv]
        print(f"{lv:>5}: F1 {r['f1']:.3f}  macro-F1 {r['macro_f1']:.3f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    ck, cfg = _load_for_inference(args.checkpoint)
    graphs = {}
    for p in args.graphs:
        graphs.update(load_graph_dir(p))
    lines = ["node_id\tpiece\tonset\tclass\tprobability"]
    for name in sorted(graphs):
        g = graphs[name]
        probs = predict(ck.params, g, cfg, expected_hash=ck.header["manifest_hash"])
        pred = probs.argmax(axis=1)
        for i in range(g.n):
            onset = format_rational(g.onsets[i]) if g.onsets else ""
            lines.append(f"{i}\t{name}\t{onset}\t{g.classes[pred[i]]}\t{probs[i, pred[i]]:.6f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scores = planted_corpus(args.pieces, seed=args.seed, corpus=args.corpus)
    for s in scores:
        write_score(s, out)
    print(f"wrote {len(scores)} synthetic pieces to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sgsmote", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", help="parse .krn / Note-Table files into canonical Note-Tables")
    s.add_argument("paths", nargs="+")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("build", help="build graph files from Note-Tables or kern")
    s.add_argument("paths", nargs="+")
    s.add_argument("--out", required=True)
    s.add_argument("--feature-set", choices=("all", "general"), default="all")
    s.add_argument("--scheme", default="binary:PAC",
                   help="binary:PAC | binary:rIAC | binary:HC | multiclass[:PAC,HC]")
    s.set_defaults(func=cmd_build)

    s = sub.add_parser("train", help="train a model on a graph directory")
    s.add_argument("graphs")
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="JSON config; flags override its values")
    s.add_argument("--hidden-dim", type=int)
    s.add_argument("--layers", type=int)
    s.add_argument("--fanouts", type=lambda t: [int(x) for x in t.split(",")])
    s.add_argument("--lr", type=float)
    s.add_argument("--weight-decay", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--smote-k", type=int)
    s.add_argument("--gamma", type=float)
    s.add_argument("--tau", type=float)
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--no-clf-graph", dest="clf_graph", action="store_false", default=None)
    s.add_argument("--split", choices=("none", "fixed-list", "random-half", "kfold"), default="none")
    s.add_argument("--split-file")
    s.add_argument("--split-seed", type=int, default=0)
    s.add_argument("--fold", type=int, default=0)
    s.add_argument("--train-pieces", help="comma-separated train pieces for fixed-list")
    s.add_argument("--pretrained", help="checkpoint to fine-tune from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("graphs")
    s.add_argument("--split-file")
    s.add_argument("--part", choices=("train", "val", "test"), default="test")
    s.add_argument("--levels", default="note,onset,beat")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="dump per-node predictions as TSV")
    s.add_argument("checkpoint")
    s.add_argument("graphs", nargs="+")
    s.add_argument("--out")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("synth", help="write a synthetic planted-cadence corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--pieces", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--corpus", choices=("local", "context"), default="local")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except argparse.ArgumentTypeError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (M.NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ScoreError, GraphFormatError, ManifestMismatch, OSError, KeyError,
            ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
