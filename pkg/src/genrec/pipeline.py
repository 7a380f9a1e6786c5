"""Run configuration, workdir layout and the stage functions behind the CLI.

Every stage writes a ``manifest.json`` next to its outputs carrying a hash of
the configuration that produced it (including upstream stages). A stage that
consumes an artifact recomputes the expected hash from the current config and
refuses inputs stamped with a different one.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import torch

from . import corpus, graph as graphs, indexer, model as lm
from .decode import Recommender, build_trie
from .evaluation import CSV_HEADER, MetricsReport, RunLog, csv_row, efficiency_report, evaluate
from .synthetic import planted_blocks

log = logging.getLogger(__name__)

WORKDIR_ENV = "GENREC_WORKDIR"
SUBDIRS = ("data", "graphs", "index", "model", "recs", "reports")


class PipelineError(RuntimeError):
    category = "pipeline"


class ConfigError(PipelineError):
    category = "config"


class MissingArtifact(PipelineError):
    category = "missing"


class HashMismatch(PipelineError):
    category = "mismatch"


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------


@dataclass
class ModelSection:
    d: int = 64
    w: int = 16
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 8
    max_len: int = 24
    dropout: float = 0.1


@dataclass
class TrainSection:
    lr: float = 3e-3
    batch_size: int = 64
    epochs: int = 8
    optimizer: str = "adam"


@dataclass
class DecodeSection:
    beam_width: int = 20
    topk: int = 10
    filter_train: bool = True
    length_penalty: float = 0.0


@dataclass
class RunConfig:
    data: str = ""
    format: str = "tsv"
    workdir: str = "work"
    seed: int = 0
    threads: int = 1
    index: indexer.IndexConfig = field(default_factory=indexer.IndexConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    decode: DecodeSection = field(default_factory=DecodeSection)
    ks: Tuple[int, ...] = (5, 10)

    def __post_init__(self) -> None:
        self.index.seed = self.seed
        self.ks = tuple(sorted(int(k) for k in self.ks))
        if self.decode.topk < max(self.ks):
            raise ConfigError(f"decode.topk={self.decode.topk} is smaller than the largest K {max(self.ks)}")

    def to_dict(self) -> Dict[str, object]:
        d = asdict(self)
        d["ks"] = list(self.ks)
        return d


_SECTIONS = {"index": indexer.IndexConfig, "model": ModelSection, "train": TrainSection, "decode": DecodeSection}


def config_from_dict(raw: Dict[str, object]) -> RunConfig:
    raw = copy.deepcopy(raw)
    top = {f.name for f in fields(RunConfig)}
    unknown = set(raw) - top
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    kwargs: Dict[str, object] = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            cls = _SECTIONS[key]
            allowed = {f.name for f in fields(cls)}
            bad = set(value) - allowed
            if bad:
                raise ConfigError(f"unknown keys in [{key}]: {', '.join(sorted(bad))}")
            try:
                kwargs[key] = cls(**value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{key}]: {exc}") from exc
        else:
            kwargs[key] = value
    return RunConfig(**kwargs)


def load_config(path: Optional[str], overrides: Dict[str, object]) -> RunConfig:
    """File values, then ``$GENREC_WORKDIR``, then flag ``overrides``.

    ``overrides`` uses dotted keys such as ``"index.N"``.
    """
    raw: Dict[str, object] = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise MissingArtifact(f"config file {p} does not exist")
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from exc
    if os.environ.get(WORKDIR_ENV):
        raw["workdir"] = os.environ[WORKDIR_ENV]
    for key, value in overrides.items():
        if value is None:
            continue
        section, _, name = key.rpartition(".")
        target = raw.setdefault(section, {}) if section else raw
        target[name] = value
    return config_from_dict(raw)


def _digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def stage_hashes(cfg: RunConfig, data_digest: str) -> Dict[str, str]:
    """Hash of each stage's inputs; later stages fold in earlier ones."""
    ingest = _digest({"data": data_digest, "format": cfg.format})
    index = _digest({"up": ingest, "index": asdict(cfg.index)})
    model = _digest({"up": index, "model": asdict(cfg.model), "train": asdict(cfg.train), "seed": cfg.seed})
    decode = _digest({"up": model, "decode": asdict(cfg.decode), "ks": list(cfg.ks)})
    graph = _digest({"up": ingest, "co_interaction": cfg.index.co_interaction})
    return {"ingest": ingest, "graphs": graph, "index": index, "model": model, "decode": decode}


# --------------------------------------------------------------------------
# Workdir
# --------------------------------------------------------------------------


class Workdir:
    def __init__(self, root) -> None:
        self.root = Path(root)

    def path(self, sub: str, name: str = "") -> Path:
        return self.root / sub / name if name else self.root / sub

    def ensure(self) -> None:
        for sub in SUBDIRS:
            self.path(sub).mkdir(parents=True, exist_ok=True)

    def require(self, sub: str, name: str, hint: str) -> Path:
        p = self.path(sub, name)
        if not p.exists():
            raise MissingArtifact(f"missing {p}; run `genrec {hint}` first")
        return p

    def write_manifest(self, sub: str, stage: str, config_hash: str, payload: Dict[str, object]) -> None:
        body = {"stage": stage, "config_hash": config_hash, **payload}
        self.path(sub, "manifest.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")

    def check_manifest(self, sub: str, stage: str, expected: str) -> Dict[str, object]:
        p = self.require(sub, "manifest.json", stage)
        body = json.loads(p.read_text())
        if body.get("config_hash") != expected:
            raise HashMismatch(
                f"{p} was produced with config hash {body.get('config_hash')}, "
                f"the current config expects {expected}; rerun `genrec {stage}`"
            )
        return body


def _data_digest(wd: Workdir) -> str:
    return _file_digest(wd.require("data", "interactions.tsv", "ingest"))


def _hashes(cfg: RunConfig, wd: Workdir) -> Dict[str, str]:
    return stage_hashes(cfg, _data_digest(wd))


def _load_corpus(wd: Workdir, cfg: RunConfig) -> Tuple[corpus.InteractionLog, corpus.SplitDataset]:
    wd.check_manifest("data", "ingest", _hashes(cfg, wd)["ingest"])
    log_ = corpus.load_interactions(wd.path("data", "interactions.tsv"))
    return log_, corpus.read_split(log_, wd.path("data"))


# --------------------------------------------------------------------------
# Stages
# --------------------------------------------------------------------------


def write_synthetic_fixture(path) -> Path:
    """The planted four-block log used for the end-to-end check."""
    log_, _, _ = planted_blocks(num_users=200, num_items=100, blocks=4, per_user=16, in_block=0.95, seed=0)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    corpus.save_interactions(log_, path)
    return path


def cmd_ingest(cfg: RunConfig) -> corpus.CorpusStats:
    if not cfg.data:
        raise ConfigError("no input data given (set `data` or pass --data)")
    src = Path(cfg.data)
    if not src.exists():
        raise MissingArtifact(f"data file {src} does not exist")
    log_ = corpus.load_interactions(src, cfg.format)
    wd = Workdir(cfg.workdir)
    wd.ensure()
    corpus.save_interactions(log_, wd.path("data", "interactions.tsv"))
    split = corpus.leave_one_out_split(log_)
    corpus.write_split(split, log_, wd.path("data"))
    stats = corpus.corpus_stats(log_)
    wd.path("reports", "stats.json").write_text(stats.to_json() + "\n")
    h = _hashes(cfg, wd)["ingest"]
    wd.write_manifest("data", "ingest", h, {"source": str(src), "stats": asdict(stats)})
    return stats


def cmd_graphs(cfg: RunConfig) -> Dict[str, int]:
    wd = Workdir(cfg.workdir)
    log_, split = _load_corpus(wd, cfg)
    names = {graphs.USER: log_.users, graphs.ITEM: log_.items}
    built = {
        "user": graphs.build_user_graph(split, cfg.index.co_interaction),
        "item": graphs.build_item_graph(split),
        "user_item": graphs.build_user_item_graph(split, cfg.index.co_interaction),
    }
    wd.path("graphs").mkdir(parents=True, exist_ok=True)
    counts = {}
    for name, g in built.items():
        graphs.write_graph(g, wd.path("graphs", f"{name}.tsv"), names)
        counts[name] = len(g.edges())
    wd.write_manifest("graphs", "graphs", _hashes(cfg, wd)["graphs"], {"edges": counts})
    return counts


def cmd_index(cfg: RunConfig) -> Tuple[indexer.IndexDictionary, indexer.IndexDictionary]:
    wd = Workdir(cfg.workdir)
    log_, split = _load_corpus(wd, cfg)
    users, items = indexer.build_index(log_, split, cfg.index)
    h = _hashes(cfg, wd)["index"]
    wd.path("index").mkdir(parents=True, exist_ok=True)
    indexer.write_index(users, log_.users, wd.path("index", "users.tsv"), {"config_hash": h})
    indexer.write_index(items, log_.items, wd.path("index", "items.tsv"), {"config_hash": h})
    wd.write_manifest("index", "index", h, {"index": indexer.config_dict(cfg.index)})
    return users, items


def _load_index(wd: Workdir, cfg: RunConfig, log_: corpus.InteractionLog):
    wd.check_manifest("index", "index", _hashes(cfg, wd)["index"])
    users = indexer.read_index(wd.require("index", "users.tsv", "index"), log_.users, "user")
    items = indexer.read_index(wd.require("index", "items.tsv", "index"), log_.items, "item")
    return users, items


def model_config(cfg: RunConfig, vocab: lm.Vocabulary) -> lm.ModelConfig:
    m = cfg.model
    return lm.ModelConfig(
        d=m.d,
        w=m.w,
        enc_layers=m.enc_layers,
        dec_layers=m.dec_layers,
        heads=m.heads,
        vocab_size=len(vocab),
        max_len=m.max_len,
        dropout=m.dropout,
        seed=cfg.seed,
    )


def training_pairs(split: corpus.SplitDataset, users, items, vocab) -> List[Tuple[List[int], List[int]]]:
    """One (prompt, target) pair per training record, users in index order."""
    pairs = []
    for u in sorted(split.train):
        prompt = lm.make_prompt(users[u], vocab)
        for i in split.train[u]:
            pairs.append((prompt, lm.make_target(items[i], vocab)))
    return pairs


def cmd_train(cfg: RunConfig) -> RunLog:
    wd = Workdir(cfg.workdir)
    log_, split = _load_corpus(wd, cfg)
    users, items = _load_index(wd, cfg, log_)
    vocab = lm.Vocabulary()
    mcfg = model_config(cfg, vocab)
    pairs = training_pairs(split, users, items, vocab)
    longest = max((max(len(p), len(t)) for p, t in pairs), default=0)
    if longest > mcfg.max_len:
        raise ConfigError(f"a prompt or target has {longest} tokens, above model.max_len={mcfg.max_len}")
    net = lm.Seq2SeqModel(mcfg)
    tcfg = lm.TrainConfig(
        lr=cfg.train.lr,
        batch_size=cfg.train.batch_size,
        epochs=cfg.train.epochs,
        optimizer=cfg.train.optimizer,
        seed=cfg.seed,
    )
    start = time.perf_counter()
    curve = lm.train(net, pairs, tcfg)
    seconds = time.perf_counter() - start
    h = _hashes(cfg, wd)["model"]
    wd.path("model").mkdir(parents=True, exist_ok=True)
    params = lm.param_count(mcfg)
    lm.save_checkpoint(wd.path("model", "model.pt"), net, vocab, {"config_hash": h})
    with wd.path("model", "loss.csv").open("w", encoding="utf-8") as fh:
        fh.write("epoch,loss\n")
        for epoch, loss in enumerate(curve, start=1):
            fh.write(f"{epoch},{loss!r}\n")
    wd.write_manifest(
        "model",
        "train",
        h,
        {
            "params": params,
            "params_t5_compatible": lm.param_count(mcfg, "t5_compatible"),
            "epochs": len(curve),
            "pairs": len(pairs),
            "train_seconds": round(seconds, 3),
        },
    )
    return RunLog(epochs=len(curve), train_seconds=seconds, eval_seconds=0.0, param_count=params, loss_curve=curve)


def _recommender(wd: Workdir, cfg: RunConfig):
    log_, split = _load_corpus(wd, cfg)
    users, items = _load_index(wd, cfg, log_)
    expected = _hashes(cfg, wd)["model"]
    manifest = wd.check_manifest("model", "train", expected)
    net, vocab, extra = lm.load_checkpoint(wd.require("model", "model.pt", "train"))
    if extra.get("config_hash") != expected:
        raise HashMismatch(f"model checkpoint hash {extra.get('config_hash')} != expected {expected}")
    rec = Recommender(
        net, vocab, users, build_trie(items), beam_width=cfg.decode.beam_width, length_penalty=cfg.decode.length_penalty
    )
    return log_, split, rec, manifest


def cmd_recommend(cfg: RunConfig, user_handles: Optional[Sequence[str]] = None, topk: Optional[int] = None):
    """Ranked ``(user, rank, item, logprob)`` rows; also written to recs/."""
    wd = Workdir(cfg.workdir)
    log_, split, rec, _ = _recommender(wd, cfg)
    lookup = {h: k for k, h in enumerate(log_.users)}
    if user_handles:
        unknown = [h for h in user_handles if h not in lookup]
        if unknown:
            raise corpus.CorpusError(f"unknown user(s): {', '.join(unknown)}")
        targets = [lookup[h] for h in user_handles]
    else:
        targets = list(range(log_.num_users))
    k = topk or cfg.decode.topk
    rows = []
    for u in targets:
        exclude = split.train.get(u, ()) if cfg.decode.filter_train else ()
        for rank, (item, lp) in enumerate(rec.recommend(u, k, exclude), start=1):
            rows.append((log_.users[u], rank, log_.items[item], lp))
    h = _hashes(cfg, wd)["decode"]
    wd.path("recs").mkdir(parents=True, exist_ok=True)
    with wd.path("recs", "recommendations.tsv").open("w", encoding="utf-8") as fh:
        fh.write(f"# config_hash={h}\n")
        for user, rank, item, lp in rows:
            fh.write(f"{user}\t{rank}\t{item}\t{lp:.6f}\n")
    return rows


def cmd_evaluate(cfg: RunConfig) -> Tuple[MetricsReport, Dict[str, object]]:
    wd = Workdir(cfg.workdir)
    _, split, rec, manifest = _recommender(wd, cfg)
    report = evaluate(rec, split, ks=cfg.ks, filter_train=cfg.decode.filter_train)
    report.epochs = int(manifest["epochs"])
    report.param_count = int(manifest["params"])
    report.check()
    run = RunLog(
        epochs=report.epochs,
        train_seconds=float(manifest["train_seconds"]),
        eval_seconds=report.wall_time,
        param_count=report.param_count,
    )
    eff = efficiency_report(run)
    eff["params_t5_compatible"] = manifest["params_t5_compatible"]
    eff["tokens_scored"] = rec.stats.tokens_scored
    eff["full_vocab_tokens"] = rec.stats.full_vocab_tokens
    eff["max_scored_per_beam"] = rec.stats.max_scored_per_beam
    eff["max_trie_branching"] = rec.trie.max_branching()
    h = _hashes(cfg, wd)["decode"]
    wd.path("reports").mkdir(parents=True, exist_ok=True)
    wd.path("reports", "metrics.json").write_text(report.metrics_json() + "\n")
    lines = [f"config_hash={h}", f"users_evaluated={report.users_evaluated}"]
    lines += [f"HR@{k}={report.hr[k]:.4f}" for k in cfg.ks]
    lines += [f"NDCG@{k}={report.ndcg[k]:.4f}" for k in cfg.ks]
    lines += [f"{key}={value}" for key, value in eff.items()]
    wd.path("reports", "report.txt").write_text("\n".join(lines) + "\n")
    row = csv_row(
        report, cfg.index.method, cfg.index.target, cfg.index.N, cfg.index.M, cfg.index.E, cfg.model.w,
        report.param_count, report.epochs, run.train_seconds + run.eval_seconds,
    )
    wd.path("reports", "metrics.csv").write_text(CSV_HEADER + "\n" + row + "\n")
    return report, eff


def run_pipeline(cfg: RunConfig) -> Tuple[MetricsReport, Dict[str, object]]:
    cmd_ingest(cfg)
    cmd_index(cfg)
    cmd_train(cfg)
    return cmd_evaluate(cfg)


SWEEP_AXES = {"w": "model.w", "N": "index.N", "E": "index.E"}


def with_override(cfg: RunConfig, dotted: str, value) -> RunConfig:
    raw = cfg.to_dict()
    section, _, name = dotted.rpartition(".")
    (raw[section] if section else raw)[name] = value
    return config_from_dict(raw)


def cmd_sweep(cfg: RunConfig, axis: str, values: Sequence[int]) -> List[str]:
    """Run the whole pipeline once per value; failures become NA rows."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {sorted(SWEEP_AXES)}, got {axis!r}")
    root = Workdir(cfg.workdir)
    rows = [CSV_HEADER]
    for value in values:
        sub = with_override(cfg, SWEEP_AXES[axis], value)
        sub.workdir = str(root.path("sweep", f"{axis}={value}"))
        try:
            report, eff = run_pipeline(sub)
            rows.append(
                csv_row(
                    report, sub.index.method, sub.index.target, sub.index.N, sub.index.M, sub.index.E, sub.model.w,
                    eff["param_count"], eff["epochs"], eff["wall_time"],
                )
            )
        except Exception as exc:  # one bad value must not end the sweep
            log.error("sweep %s=%s failed: %s", axis, value, exc)
            rows.append(
                csv_row(None, sub.index.method, sub.index.target, sub.index.N, sub.index.M, sub.index.E, sub.model.w,
                        None, None, None)
            )
    root.path("reports").mkdir(parents=True, exist_ok=True)
    root.path("reports", f"sweep_{axis}.csv").write_text("\n".join(rows) + "\n")
    return rows


def set_threads(n: int) -> None:
    torch.set_num_threads(max(1, int(n)))
