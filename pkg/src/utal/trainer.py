"""Joint training loop.

Per epoch: refresh per-camera soft labels and cross-camera matches from the
tracklet representation banks, then run balanced mini-batches.  Each batch
takes one Adam step on the classification loss plus (once the association
phase has started) the weighted pull loss, and then folds the batch
embeddings into the representation banks.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from utal.batch import Batch
from utal.ccta import MODES, MatchSet, batch_ccta_loss, discover_matches
from utal.datagen import Corpus
from utal.embedding import AdamState, EmbeddingModel, adam_step, load_checkpoint, save_checkpoint
from utal.errors import ConfigError, ModeError, NumericError
from utal.evaluation import evaluate_model, mps, pair_precision
from utal.pctd import build_affinity, pctd_batch_loss, soft_labels, update_repr

__all__ = [
    "EpochRecord",
    "StepResult",
    "TrainConfig",
    "TrainLog",
    "TrainResult",
    "ccta_start_epoch",
    "sample_batch",
    "total_loss",
    "train",
    "train_weakly_supervised",
]

TRAIN_MODES = ("unsupervised", "weakly_supervised")
REPR_UPDATES = ("pre_step", "post_step")


@dataclass(kw_only=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    frames_per_tracklet: int = 4
    lam: float = 10.0
    alpha: float = 1.0
    K: int = 4
    ccta_mode: str = "two_way_1nn"
    ccta_k: int = 1
    ccta_start_fraction: float = 0.5
    mode: str = "unsupervised"
    seed: int = 0
    lr: float = 3.5e-4
    hidden_dim: int = 64
    embed_dim: int = 32
    activation: str = "tanh"
    repr_update: str = "pre_step"
    eval_every: int = 10
    checkpoint_every: int = 25

    def validate(self, num_cameras: int | None = None):
        for name in ("epochs", "K", "eval_every", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be >= 0")
        for name in ("batch_size", "frames_per_tracklet", "hidden_dim", "embed_dim", "ccta_k"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if self.lam < 0:
            raise ConfigError("lambda", "must be >= 0")
        if self.alpha < 0:
            raise ConfigError("alpha", "must be >= 0")
        if self.lr <= 0:
            raise ConfigError("lr", "must be > 0")
        if not 0.0 <= self.ccta_start_fraction <= 1.0:
            raise ConfigError("ccta_start_fraction", "must lie in [0, 1]")
        if self.ccta_mode not in MODES:
            raise ConfigError("ccta_mode", f"expected one of {MODES}")
        if self.mode not in TRAIN_MODES:
            raise ConfigError("mode", f"expected one of {TRAIN_MODES}")
        if self.repr_update not in REPR_UPDATES:
            raise ConfigError("repr_update", f"expected one of {REPR_UPDATES}")
        if self.activation not in ("tanh", "identity"):
            raise ConfigError("activation", "expected 'tanh' or 'identity'")
        if num_cameras is not None:
            unit = num_cameras * self.frames_per_tracklet
            if self.batch_size % unit:
                raise ConfigError(
                    "batch_size",
                    f"{self.batch_size} is not divisible by cameras x frames_per_tracklet = {unit}",
                )


@dataclass
class EpochRecord:
    epoch: int
    pctd_loss: float
    ccta_loss: float
    num_pairs: int
    pair_precision: float | None = None
    mps: float | None = None
    rank1: float | None = None
    map: float | None = None


CSV_COLUMNS = [f.name for f in fields(EpochRecord)]


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord):
        if self.records and record.epoch != self.records[-1].epoch + 1:
            raise ValueError("log records must be appended in epoch order")
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return [getattr(r, name) for r in self.records]

    def to_csv(self) -> str:
        lines = [",".join(CSV_COLUMNS)]
        lines += [",".join(_fmt(getattr(r, c)) for c in CSV_COLUMNS) for r in self.records]
        return "\n".join(lines) + "\n"

    def to_rows(self) -> list[dict]:
        return [asdict(r) for r in self.records]

    @classmethod
    def from_rows(cls, rows) -> "TrainLog":
        return cls([EpochRecord(**row) for row in rows])


@dataclass
class StepResult:
    loss: float
    pctd_loss: float
    ccta_loss: float
    num_matched: int
    grads: dict
    embeddings: np.ndarray


@dataclass
class TrainResult:
    model: EmbeddingModel
    reprs: list[np.ndarray]
    log: TrainLog
    checkpoints: list[Path]
    optimizer: AdamState
    matches: MatchSet
    targets: list[np.ndarray]


def ccta_start_epoch(cfg: TrainConfig) -> int:
    return math.ceil(cfg.ccta_start_fraction * cfg.epochs)


def epoch_length(corpus: Corpus, cfg: TrainConfig) -> int:
    return max(1, math.ceil(corpus.num_frames / cfg.batch_size))


def _pick_frames(n, count, rng):
    if n >= count:
        return rng.choice(n, size=count, replace=False)
    # short tracklet: every frame repeated evenly, remainder drawn without replacement
    reps, rest = divmod(count, n)
    return np.concatenate([np.tile(np.arange(n), reps), rng.choice(n, size=rest, replace=False)])


def sample_batch(corpus: Corpus, cfg: TrainConfig, rng, class_maps=None) -> Batch:
    """Same number of tracklets per camera, ``frames_per_tracklet`` frames each."""
    T = corpus.num_cameras
    F = cfg.frames_per_tracklet
    cfg.validate(T)
    per_cam = cfg.batch_size // (T * F)
    cams, labels, classes, xs = [], [], [], []
    for t, cam in enumerate(corpus.cameras):
        m = cam.num_tracklets
        chosen = rng.choice(m, size=per_cam, replace=m < per_cam)
        for i in chosen.tolist():
            tr = cam.tracklets[i]
            rows = _pick_frames(tr.num_frames, F, rng)
            xs.append(tr.frames[rows])
            cams += [t] * F
            labels += [i] * F
            classes += [i if class_maps is None else int(class_maps[t][i])] * F
    return Batch(np.array(cams), np.array(labels), np.array(classes), np.concatenate(xs))


def total_loss(model, batch: Batch, targets, matches: MatchSet | None, reprs, lam: float, ccta_active: bool) -> StepResult:
    """Classification loss plus ``lam`` times the pull loss (when active)."""
    emb = model.forward(batch.x)
    l_pctd, g_logits = pctd_batch_loss(model, batch, targets, emb)
    l_ccta, n_matched = 0.0, 0
    g_emb = np.zeros_like(emb)
    if ccta_active and matches is not None:
        l_ccta, g_ccta, n_matched = batch_ccta_loss(batch, emb, matches, reprs)
        g_emb = lam * g_ccta
    loss = l_pctd + lam * l_ccta if ccta_active else l_pctd
    grads = model.backward(batch.x, batch.cameras, g_emb, g_logits)
    return StepResult(loss, l_pctd, l_ccta, n_matched, grads, emb)


def _effective_k(corpus: Corpus, K: int) -> list[int]:
    out = []
    for t, m in enumerate(corpus.tracklets_per_camera):
        k = min(K, m - 1)
        if k != K:
            warnings.warn(f"camera {t} has {m} tracklet(s); using K={k} instead of {K}", stacklevel=3)
        out.append(k)
    return out


def _affinities(reprs, ks, workers=1):
    jobs = list(zip(reprs, ks))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda job: build_affinity(*job), jobs))
    return [build_affinity(r, k) for r, k in jobs]


def initial_reprs(model, corpus: Corpus) -> list[np.ndarray]:
    return [np.stack([model.forward(tr.frames).mean(axis=0) for tr in cam.tracklets]) for cam in corpus.cameras]


def _class_maps(corpus: Corpus, weakly: bool):
    if not weakly:
        return None, corpus.tracklets_per_camera
    if not corpus.has_ground_truth:
        raise ModeError("mode", "weakly_supervised training needs gt_identity on every tracklet")
    maps, counts = [], []
    for t in range(corpus.num_cameras):
        ids = corpus.identities(t)
        distinct = np.unique(ids)
        maps.append(np.searchsorted(distinct, ids))
        counts.append(len(distinct))
    return maps, counts


class _Refresh:
    """Epoch-boundary snapshot: affinities, classification targets, matches."""

    def __init__(self, reprs, ks, cfg, num_classes, weakly, workers):
        self.affinity = _affinities(reprs, ks, workers)
        self.soft = [soft_labels(A) for A in self.affinity]
        self.targets = [np.eye(c) for c in num_classes] if weakly else self.soft
        self.matches = discover_matches(reprs, cfg.ccta_mode, cfg.ccta_k)


def _checkpoint(path, model, opt, reprs, rng, log, cfg, epoch):
    arrays = {f"repr{t}": r for t, r in enumerate(reprs)}
    meta = {"epoch": epoch, "rng": rng.bit_generator.state, "log": log.to_rows(), "config": asdict(cfg)}
    save_checkpoint(path, model, opt, arrays, meta)
    return Path(path)


def _run(corpus: Corpus, cfg: TrainConfig, weakly: bool, checkpoint_dir=None, resume=None, workers=1, progress=None):
    cfg.validate(corpus.num_cameras)
    class_maps, num_classes = _class_maps(corpus, weakly)
    ks = _effective_k(corpus, cfg.K)
    rng = np.random.default_rng(cfg.seed)

    if resume is not None:
        model, opt, arrays, meta = load_checkpoint(resume)
        if [h.shape[1] for h in model.heads] != list(num_classes):
            raise ConfigError("resume", "checkpoint heads do not match the corpus label spaces")
        reprs = [arrays[f"repr{t}"] for t in range(corpus.num_cameras)]
        rng.bit_generator.state = meta["rng"]
        log = TrainLog.from_rows(meta["log"])
        start = int(meta["epoch"])
        opt.lr = cfg.lr
    else:
        model = EmbeddingModel.init(
            corpus.raw_dim, num_classes, rng, cfg.hidden_dim, cfg.embed_dim, cfg.activation
        )
        opt = AdamState.for_model(model, lr=cfg.lr)
        reprs = initial_reprs(model, corpus)
        log = TrainLog()
        start = 0

    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    checkpoints: list[Path] = []
    gt = corpus.has_ground_truth
    boundary = ccta_start_epoch(cfg)
    n_batches = epoch_length(corpus, cfg)
    snap = _Refresh(reprs, ks, cfg, num_classes, weakly, workers)

    for epoch in range(start, cfg.epochs):
        active = epoch >= boundary
        p_sum = c_sum = 0.0
        c_count = 0
        for _ in range(n_batches):
            batch = sample_batch(corpus, cfg, rng, class_maps)
            try:
                step = total_loss(model, batch, snap.targets, snap.matches if active else None, reprs, cfg.lam, active)
                if not (math.isfinite(step.loss) and math.isfinite(step.pctd_loss) and math.isfinite(step.ccta_loss)):
                    raise NumericError(f"pctd={step.pctd_loss} ccta={step.ccta_loss}")
                adam_step(model, opt, step.grads)
            except NumericError as exc:
                raise NumericError(f"non-finite value at epoch {epoch}: {exc}") from exc
            emb = step.embeddings if cfg.repr_update == "pre_step" else model.forward(batch.x)
            for t, i, rows in batch.groups():
                reprs[t][i] = update_repr(reprs[t][i], emb[rows], cfg.alpha)
            p_sum += step.pctd_loss
            if step.num_matched:
                c_sum += step.ccta_loss
                c_count += 1

        snap = _Refresh(reprs, ks, cfg, num_classes, weakly, workers)
        record = EpochRecord(epoch, p_sum / n_batches, c_sum / c_count if c_count else 0.0, len(snap.matches))
        if gt:
            record.pair_precision = pair_precision(snap.matches, corpus)[1]
            record.mps = mps(snap.soft, corpus)
            last = epoch == cfg.epochs - 1
            if last or (cfg.eval_every and (epoch + 1) % cfg.eval_every == 0):
                report = evaluate_model(model, corpus)
                record.rank1, record.map = report.rank1, report.map
        log.append(record)
        if progress is not None:
            progress(record, snap, reprs)
        if ckpt_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            path = ckpt_dir / f"epoch{epoch + 1:04d}.npz"
            checkpoints.append(_checkpoint(path, model, opt, reprs, rng, log, cfg, epoch + 1))

    if ckpt_dir is not None:
        checkpoints.append(_checkpoint(ckpt_dir / "final.npz", model, opt, reprs, rng, log, cfg, max(start, cfg.epochs)))
    return TrainResult(model, reprs, log, checkpoints, opt, snap.matches, snap.targets)


def train(corpus: Corpus, cfg: TrainConfig, checkpoint_dir=None, resume=None, workers=1, progress=None) -> TrainResult:
    """Train on ``corpus``; dispatches on ``cfg.mode``.

    ``progress(record, snapshot, reprs)`` is called after every epoch with
    the refreshed affinities, targets and matches.

    In unsupervised mode nothing on the optimisation path reads
    ``gt_identity``; it only feeds the logged diagnostics.
    """
    if cfg.mode == "weakly_supervised":
        return train_weakly_supervised(corpus, cfg, checkpoint_dir, resume, workers, progress)
    return _run(corpus, cfg, False, checkpoint_dir, resume, workers, progress)


def train_weakly_supervised(corpus: Corpus, cfg: TrainConfig, checkpoint_dir=None, resume=None, workers=1, progress=None) -> TrainResult:
    """Hard one-hot classification over per-camera identity classes, same association loss."""
    return _run(corpus, cfg, True, checkpoint_dir, resume, workers, progress)
