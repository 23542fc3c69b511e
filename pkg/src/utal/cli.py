"""Command-line entry point: ``utal {gen,train,eval,merge} --config run.ini``.

The config is an INI file with four sections::

    [gen]    GenConfig fields (seed is required for gen)
    [train]  TrainConfig fields; the loss weight is spelled ``lambda``
    [eval]   eval_every, threshold, merge_k, max_rank, dump_affinity
    [io]     out_dir, corpus, checkpoint_every, dump_pairs, figures

Relative paths resolve against the config file's directory, and the corpus
path against ``out_dir``.  Exit codes: 1 config, 2 I/O, 3 numeric.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from io import StringIO
from pathlib import Path

import numpy as np

from utal import plotting
from utal.ccta import pair_lines
from utal.datagen import GenConfig, generate_corpus, load_corpus, save_corpus
from utal.embedding import load_checkpoint
from utal.errors import ConfigError, CorpusFormatError, NumericError
from utal.evaluation import cmc_map, evaluate_model, merge_and_score, tracklet_features
from utal.pctd import sparse_triples
from utal.trainer import TrainConfig, ccta_start_epoch, train

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 1, 2, 3

# TrainConfig fields that live in other sections of the file
_MOVED = {"eval_every": "eval", "checkpoint_every": "io"}
_RENAMED = {"lambda": "lam"}


@dataclass
class EvalOptions:
    eval_every: int = 10
    threshold: float = 0.5
    merge_k: int | None = None
    max_rank: int = 20
    dump_affinity: bool = False


@dataclass
class IOOptions:
    out_dir: str = "run"
    corpus: str = "corpus.jsonl"
    checkpoint_every: int = 25
    dump_pairs: bool = False
    figures: bool = True


@dataclass
class RunConfig:
    gen: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)
    io: IOOptions = field(default_factory=IOOptions)
    base: Path = Path(".")

    @property
    def out_dir(self) -> Path:
        p = Path(self.io.out_dir)
        return (p if p.is_absolute() else self.base / p).resolve()

    @property
    def corpus_path(self) -> Path:
        p = Path(self.io.corpus)
        return p if p.is_absolute() else self.out_dir / p

    def gen_config(self) -> GenConfig:
        if "seed" not in self.gen:
            raise ConfigError("gen.seed", "required")
        return GenConfig(**self.gen)


def _convert(section, key, raw, annotation):
    text = raw.strip()
    try:
        if annotation.startswith("tuple"):
            parts = [int(p) for p in text.replace("(", "").replace(")", "").split(",") if p.strip()]
            if len(parts) != 2:
                raise ValueError("expected two comma-separated integers")
            return tuple(parts)
        if annotation.startswith("bool"):
            return configparser.ConfigParser.BOOLEAN_STATES[text.lower()]
        if annotation.startswith("int"):
            if text.lower() in ("", "none") and "None" in annotation:
                return None
            return int(text)
        if annotation.startswith("float"):
            return float(text)
        return text
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{section}.{key}", f"cannot parse {raw!r} as {annotation} ({exc})") from None


def _section_types(cls, exclude=()):
    return {f.name: f.type for f in fields(cls) if f.name not in exclude}


def _parse_section(parser, section, types, renames=None):
    renames = renames or {}
    out = {}
    if not parser.has_section(section):
        return out
    for key, raw in parser.items(section):
        name = renames.get(key, key)
        if name not in types or key in renames.values():
            raise ConfigError(f"{section}.{key}", "unknown key")
        out[name] = _convert(section, key, raw, types[name])
    return out


def load_run_config(path) -> RunConfig:
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError("config", f"malformed INI: {exc}") from None
    unknown = set(parser.sections()) - {"gen", "train", "eval", "io"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown section")

    gen = _parse_section(parser, "gen", _section_types(GenConfig))
    train_kw = _parse_section(parser, "train", _section_types(TrainConfig, _MOVED), _RENAMED)
    ev = EvalOptions(**_parse_section(parser, "eval", _section_types(EvalOptions)))
    io = IOOptions(**_parse_section(parser, "io", _section_types(IOOptions)))
    tcfg = TrainConfig(**train_kw, eval_every=ev.eval_every, checkpoint_every=io.checkpoint_every)
    return RunConfig(gen, tcfg, ev, io, path.resolve().parent)


def resolved_ini(cfg: RunConfig) -> str:
    """The fully-resolved config, in a form ``load_run_config`` accepts."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str

    def put(section, items):
        parser.add_section(section)
        for k, v in items:
            if v is None:
                continue
            if isinstance(v, tuple):
                v = ", ".join(str(x) for x in v)
            parser.set(section, k, str(v))

    gen = asdict(GenConfig(**cfg.gen)) if "seed" in cfg.gen else dict(cfg.gen)
    put("gen", gen.items())
    train_items = [
        ("lambda" if k == "lam" else k, v) for k, v in asdict(cfg.train).items() if k not in _MOVED
    ]
    put("train", train_items)
    put("eval", asdict(cfg.eval).items())
    io = asdict(cfg.io)
    io["out_dir"] = str(cfg.out_dir)
    put("io", io.items())
    buf = StringIO()
    parser.write(buf)
    return buf.getvalue()


def _guard(paths, force):
    for p in paths:
        if Path(p).exists() and not force:
            raise FileExistsError(f"{p} exists; pass --force to overwrite")


def _inside(path: Path, root: Path):
    try:
        path.resolve().relative_to(root.resolve())
    except ValueError:
        raise ConfigError("io.corpus", f"{path} lies outside out_dir {root}") from None


def _write_resolved(cfg, name):
    out = cfg.out_dir / f"resolved_{name}.ini"
    out.write_text(resolved_ini(cfg), encoding="utf-8")
    return out


def cmd_gen(cfg: RunConfig, args) -> int:
    gcfg = cfg.gen_config()
    target = cfg.corpus_path
    _inside(target, cfg.out_dir)
    _guard([target], args.force)
    corpus = generate_corpus(gcfg)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    save_corpus(corpus, target)
    _write_resolved(cfg, "gen")
    for t, m in enumerate(corpus.tracklets_per_camera):
        print(f"camera {t}: tracklets={m}")
    print(f"cameras={corpus.num_cameras} tracklets={corpus.num_tracklets}")
    return 0


def _workers():
    raw = os.environ.get("UTAL_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError("UTAL_THREADS", f"expected an integer, got {raw!r}") from None


def cmd_train(cfg: RunConfig, args) -> int:
    out = cfg.out_dir
    log_path = out / "train_log.csv"
    if args.resume is None:
        _guard([log_path], args.force)
    corpus = load_corpus(cfg.corpus_path)
    cfg.train.validate(corpus.num_cameras)
    resume = None
    if args.resume is not None:
        resume = Path(args.resume)
        if not resume.is_file():
            raise FileNotFoundError(f"checkpoint {resume} not found")
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved(cfg, "train")

    pair_fh = open(out / "pairs.csv", "w", encoding="utf-8") if cfg.io.dump_pairs else None
    aff_fh = open(out / "affinity.csv", "w", encoding="utf-8") if cfg.eval.dump_affinity else None
    if pair_fh:
        pair_fh.write("epoch,cam_a,idx_a,cam_b,idx_b,distance\n")
    if aff_fh:
        aff_fh.write("epoch,camera,i,j,value\n")

    def progress(record, snap, reprs):
        if pair_fh:
            pair_fh.writelines(line + "\n" for line in pair_lines(record.epoch, snap.matches, reprs))
        if aff_fh:
            for t, A in enumerate(snap.affinity):
                aff_fh.writelines(f"{record.epoch},{line}\n" for line in sparse_triples(t, A))

    try:
        result = train(corpus, cfg.train, out / "checkpoints", resume, _workers(), progress)
    finally:
        for fh in (pair_fh, aff_fh):
            if fh:
                fh.close()

    log_path.write_text(result.log.to_csv(), encoding="utf-8")
    metrics = {"epochs": len(result.log), "final_pctd_loss": result.log.records[-1].pctd_loss if len(result.log) else None}
    if corpus.has_ground_truth:
        report = evaluate_model(result.model, corpus)
        metrics.update(report.to_dict())
        if cfg.io.figures:
            plotting.plot_cmc(report, out / "figures" / "cmc.png")
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n", encoding="utf-8")
    if cfg.io.figures:
        plotting.plot_training(result.log, out / "figures", ccta_start_epoch(cfg.train))
    print(f"epochs={len(result.log)} checkpoint={result.checkpoints[-1]}")
    return 0


def _load_checkpoint_arg(args):
    if args.checkpoint is None:
        raise ConfigError("--checkpoint", "required for this command")
    path = Path(args.checkpoint)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    return load_checkpoint(path)


def cmd_eval(cfg: RunConfig, args) -> int:
    model, _, _, _ = _load_checkpoint_arg(args)
    out = cfg.out_dir / "eval_metrics.json"
    _guard([out], args.force)
    corpus = load_corpus(cfg.corpus_path)
    feats = tracklet_features(model, corpus)
    cams = np.concatenate([np.full(len(f), t) for t, f in enumerate(feats)])
    ids = np.concatenate([corpus.identities(t) for t in range(corpus.num_cameras)])
    report = cmc_map(np.concatenate(feats), cams, ids, cfg.eval.max_rank)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    _write_resolved(cfg, "eval")
    text = json.dumps(report.to_dict(), indent=2)
    out.write_text(text + "\n", encoding="utf-8")
    if cfg.io.figures:
        plotting.plot_cmc(report, cfg.out_dir / "figures" / "eval_cmc.png")
    print(text)
    return 0


def cmd_merge(cfg: RunConfig, args) -> int:
    _, _, arrays, meta = _load_checkpoint_arg(args)
    out = cfg.out_dir / "merge_report.csv"
    _guard([out], args.force)
    corpus = load_corpus(cfg.corpus_path)
    reprs = [arrays[f"repr{t}"] for t in range(corpus.num_cameras)]
    threshold = args.threshold if args.threshold is not None else cfg.eval.threshold
    K = cfg.eval.merge_k if cfg.eval.merge_k is not None else int(meta.get("config", {}).get("K", cfg.train.K))
    report = merge_and_score(corpus, reprs, K, threshold)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    _write_resolved(cfg, "merge")
    text = report.to_csv()
    out.write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "merge": cmd_merge}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="utal", description="Tracklet association learning on multi-camera corpora.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="INI run config")
    parser.add_argument("--force", action="store_true", help="overwrite existing outputs")
    parser.add_argument("--resume", help="checkpoint to resume training from")
    parser.add_argument("--checkpoint", help="checkpoint for eval/merge")
    parser.add_argument("--threshold", type=float, help="merge affinity threshold (default 0.5)")
    parser.add_argument("--seed", type=int, help="override the seed of the section the command uses")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config)
        if args.seed is not None:
            if args.command == "gen":
                cfg.gen["seed"] = args.seed
            else:
                cfg.train.seed = args.seed
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, CorpusFormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
