"""Command-line entry point: ``genrec <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Dict, List, Optional

from . import pipeline
from .corpus import CorpusError
from .decode import DecodeError, TrieError
from .embed import TrainingError as EmbedTrainingError
from .indexer import IndexingError
from .model import TrainingError as ModelTrainingError
from .spectral import EigensolverError

EXIT_CODES = {
    "usage": 2,
    "config": 3,
    "data": 4,
    "missing": 5,
    "mismatch": 6,
    "training": 7,
    "decode": 8,
    "internal": 1,
}


def _categorize(exc: BaseException) -> str:
    if isinstance(exc, pipeline.PipelineError):
        return exc.category
    if isinstance(exc, IndexingError):
        return "config"
    if isinstance(exc, CorpusError):
        return "data"
    if isinstance(exc, FileNotFoundError):
        return "missing"
    if isinstance(exc, (EmbedTrainingError, ModelTrainingError, EigensolverError)):
        return "training"
    if isinstance(exc, (DecodeError, TrieError)):
        return "decode"
    return "internal"


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; flags override its values")
    p.add_argument("--workdir", help=f"working directory (env {pipeline.WORKDIR_ENV} also works)")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="torch CPU threads (default 1, deterministic)")
    p.add_argument("-v", "--verbose", action="store_true")


def _index_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("indexing")
    g.add_argument("--method", type=str.lower, choices=["sci", "gci"])
    g.add_argument("--target", type=str.lower, choices=["u", "i", "ui", "coui"])
    g.add_argument("--n", dest="N", type=int, help="clusters per level")
    g.add_argument("--m", dest="M", type=int, help="max entities per leaf cluster")
    g.add_argument("--k", dest="K", type=int, help="max ID levels")
    g.add_argument("--e", dest="E", type=int, help="embedding size (GCI)")
    g.add_argument("--normalized-laplacian", action="store_true", default=None)


def _model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--d", type=int)
    g.add_argument("--w", type=int)
    g.add_argument("--layers", type=int, help="encoder and decoder depth")
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--optimizer", choices=["adam", "sgd"])


def _decode_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("decoding")
    g.add_argument("--beam", type=int, help="beam width B")
    g.add_argument("--topk", type=int)
    g.add_argument("--no-filter-train", action="store_true", help="keep already-seen items")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="genrec", description="Generative recommendation with collaborative IDs.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="load interactions and write the leave-one-out split")
    _common(p)
    p.add_argument("--data", help="interaction file: user item [timestamp] per line")
    p.add_argument("--format", choices=["tsv", "csv"])
    p.add_argument("--synthetic", action="store_true", help="generate and ingest the planted-block fixture")

    p = sub.add_parser("graphs", help="dump user, item and user-item graphs")
    _common(p)
    _index_flags(p)

    p = sub.add_parser("index", help="build user and item collaborative IDs")
    _common(p)
    _index_flags(p)

    p = sub.add_parser("train", help="train the sequence-to-sequence model")
    _common(p)
    _index_flags(p)
    _model_flags(p)

    p = sub.add_parser("recommend", help="top-k items for users")
    _common(p)
    _index_flags(p)
    _model_flags(p)
    _decode_flags(p)
    p.add_argument("--user", action="append", help="user handle (repeatable; default all users)")

    p = sub.add_parser("evaluate", help="HR@K / NDCG@K on the held-out items")
    _common(p)
    _index_flags(p)
    _model_flags(p)
    _decode_flags(p)

    p = sub.add_parser("run", help="ingest, index, train and evaluate in one go")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--format", choices=["tsv", "csv"])
    p.add_argument("--synthetic", action="store_true")
    _index_flags(p)
    _model_flags(p)
    _decode_flags(p)

    p = sub.add_parser("sweep", help="rerun the pipeline over values of w, N or E")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--format", choices=["tsv", "csv"])
    p.add_argument("--synthetic", action="store_true")
    _index_flags(p)
    _model_flags(p)
    _decode_flags(p)
    p.add_argument("--axis", required=True, choices=sorted(pipeline.SWEEP_AXES))
    p.add_argument("--values", required=True, help="comma-separated integers")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, object]:
    a = vars(args)
    mapping = {
        "workdir": "workdir",
        "seed": "seed",
        "threads": "threads",
        "data": "data",
        "format": "format",
        "method": "index.method",
        "target": "index.target",
        "N": "index.N",
        "M": "index.M",
        "K": "index.K",
        "E": "index.E",
        "normalized_laplacian": "index.normalized_laplacian",
        "d": "model.d",
        "w": "model.w",
        "epochs": "train.epochs",
        "lr": "train.lr",
        "batch_size": "train.batch_size",
        "optimizer": "train.optimizer",
        "beam": "decode.beam_width",
        "topk": "decode.topk",
    }
    out = {dotted: a[flag] for flag, dotted in mapping.items() if a.get(flag) is not None}
    if a.get("layers") is not None:
        out["model.enc_layers"] = out["model.dec_layers"] = a["layers"]
    if a.get("no_filter_train"):
        out["decode.filter_train"] = False
    return out


def _run(args: argparse.Namespace) -> int:
    overrides = _overrides(args)
    if getattr(args, "synthetic", False):
        if args.data:
            raise pipeline.ConfigError("--synthetic and --data are mutually exclusive")
        probe = pipeline.load_config(args.config, overrides)
        path = pipeline.write_synthetic_fixture(pipeline.Workdir(probe.workdir).path("data", "planted_blocks.tsv"))
        overrides["data"] = str(path)
        overrides["format"] = "tsv"
    cfg = pipeline.load_config(args.config, overrides)
    pipeline.set_threads(cfg.threads)
    cmd = args.command

    if cmd == "ingest":
        stats = pipeline.cmd_ingest(cfg)
        print(stats.to_json())
    elif cmd == "graphs":
        for name, count in pipeline.cmd_graphs(cfg).items():
            print(f"{name}\t{count} edges")
    elif cmd == "index":
        users, items = pipeline.cmd_index(cfg)
        print(f"users\t{len(users)}\t{users.meta['scheme']}")
        print(f"items\t{len(items)}\t{items.meta['scheme']}")
    elif cmd == "train":
        run = pipeline.cmd_train(cfg)
        for epoch, loss in enumerate(run.loss_curve, start=1):
            print(f"epoch {epoch}\tloss {loss:.4f}")
        print(f"params\t{run.param_count}")
    elif cmd == "recommend":
        for user, rank, item, lp in pipeline.cmd_recommend(cfg, args.user):
            print(f"{user}\t{rank}\t{item}\t{lp:.6f}")
    elif cmd in ("evaluate", "run"):
        if cmd == "run":
            pipeline.cmd_ingest(cfg)
            pipeline.cmd_index(cfg)
            pipeline.cmd_train(cfg)
        report, eff = pipeline.cmd_evaluate(cfg)
        print(pipeline.Workdir(cfg.workdir).path("reports", "report.txt").read_text(), end="")
    elif cmd == "sweep":
        try:
            values = [int(v) for v in args.values.split(",") if v.strip()]
        except ValueError as exc:
            raise pipeline.ConfigError(f"--values: {exc}") from exc
        for row in pipeline.cmd_sweep(cfg, args.axis, values):
            print(row)
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _run(args)
    except Exception as exc:
        category = _categorize(exc)
        print(f"genrec: error[{category}]: {exc}", file=sys.stderr)
        if category == "internal":
            logging.getLogger("genrec").debug("traceback", exc_info=True)
        return EXIT_CODES[category]


if __name__ == "__main__":
    sys.exit(main())
