"""Downstream evaluation: k-NN retrieval, fine-tuned classification, ablations.

Retrieval embeds every video with a deterministic center clip (RGB view,
speed 1, no augmentation), L2-normalizes the backbone feature, and scores a
query as correct at depth k when any of its k nearest training videos by
cosine similarity shares the query's class. Classification appends a fresh
two-layer head to the backbone and fine-tunes every parameter.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import data as dsets
from . import model as nets
from . import train as training
from .autodiff import Tensor
from .model import ArchConfig, ParameterStore
from .seeding import derive_seed, substream

K_GRID = (1, 5, 10, 20, 50)
_CHUNK = 64


@dataclass(frozen=True)
class EvalConfig:
    finetune_epochs: int = 10
    finetune_lr: float = 0.005
    finetune_batch: int = 16
    finetune_momentum: float = 0.9
    finetune_weight_decay: float = 1e-4
    clips_per_video: int = 1
    clip_len: int = 16
    augment: bool = True
    ks: tuple[int, ...] = K_GRID


@dataclass
class FeatureBank:
    features: np.ndarray  # (N, D), unit rows
    labels: np.ndarray
    ids: np.ndarray
    split: str

    def __len__(self):
        return len(self.ids)


@dataclass
class RetrievalResult:
    query_id: int
    neighbor_ids: np.ndarray  # descending similarity, ties to the lower id
    hits: dict[int, bool]


@dataclass
class Metrics:
    topk: dict[int, float] = field(default_factory=dict)
    classify_top1: float | None = None
    fingerprint: str = ""


# ---- feature extraction ----------------------------------------------------------


def _center_clips(record: dsets.VideoRecord, length: int, count: int) -> np.ndarray:
    T = record.frames.shape[0]
    if count == 1:
        starts = [(T - length) // 2]
    else:
        starts = [round(i * (T - length) / (count - 1)) for i in range(count)]
    return np.stack([dsets.sample_clip(record, s, 1, length).data for s in starts])


def extract_features(store: dsets.DatasetStore, params: ParameterStore,
                     arch: ArchConfig = ArchConfig(),
                     cfg: EvalConfig = EvalConfig(), threads: int = 1,
                     ) -> FeatureBank:
    """One embedding per video from the frozen encoder, ordered by video id."""
    records = sorted(store.records, key=lambda r: r.id)
    clips = np.concatenate(
        [_center_clips(r, cfg.clip_len, cfg.clips_per_video) for r in records])

    def embed(chunk: np.ndarray) -> np.ndarray:
        return nets.encode(params, chunk, arch, training=False).data

    chunks = [clips[i:i + _CHUNK] for i in range(0, len(clips), _CHUNK)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            feats = np.concatenate(list(pool.map(embed, chunks)))
    else:
        feats = np.concatenate([embed(c) for c in chunks])
    if cfg.clips_per_video > 1:
        feats = feats.reshape(len(records), cfg.clips_per_video, -1).mean(axis=1)
    norms = np.sqrt((feats * feats).sum(axis=1, keepdims=True))
    if np.any(norms == 0):
        raise ValueError("degenerate zero feature in bank")
    return FeatureBank(features=feats / norms,
                       labels=np.array([r.label for r in records]),
                       ids=np.array([r.id for r in records]),
                       split=store.split)


# ---- k-NN retrieval ------------------------------------------------------------------


def _ranked_ids(sims: np.ndarray, bank: FeatureBank, exclude_id: int) -> np.ndarray:
    keep = bank.ids != exclude_id
    # primary key: similarity descending; ties broken by the lower video id
    order = np.lexsort((bank.ids[keep], -sims[keep]))
    return np.flatnonzero(keep)[order]


def retrieve(query: np.ndarray, bank: FeatureBank, k: int, query_id: int = -1,
             query_label: int | None = None,
             ks: tuple[int, ...] = K_GRID) -> RetrievalResult:
    if len(bank) == 0:
        raise ValueError("bank is empty")
    if k > len(bank):
        raise ValueError(f"k={k} exceeds bank size {len(bank)}")
    sims = bank.features @ np.asarray(query)
    ranked = _ranked_ids(sims, bank, query_id)[:k]
    hits = {}
    if query_label is not None:
        ranked_labels = bank.labels[ranked]
        hits = {kk: bool((ranked_labels[:kk] == query_label).any())
                for kk in ks if kk <= k}
    return RetrievalResult(query_id=query_id, neighbor_ids=bank.ids[ranked],
                           hits=hits)


def retrieval_accuracy(queries: FeatureBank, bank: FeatureBank,
                       ks: tuple[int, ...] = K_GRID) -> Metrics:
    """Fraction of queries with a same-class video among the k nearest."""
    if len(queries) == 0 or len(bank) == 0:
        raise ValueError("empty split")
    ks = tuple(k for k in ks if k <= len(bank))
    sims_all = queries.features @ bank.features.T
    hit_counts = {k: 0 for k in ks}
    kmax = max(ks)
    for i in range(len(queries)):
        ranked = _ranked_ids(sims_all[i], bank, int(queries.ids[i]))[:kmax]
        ranked_labels = bank.labels[ranked]
        for k in ks:
            if (ranked_labels[:k] == queries.labels[i]).any():
                hit_counts[k] += 1
    return Metrics(topk={k: hit_counts[k] / len(queries) for k in ks})


def permuted_label_control(queries: FeatureBank, bank: FeatureBank, seed: int,
                           ks: tuple[int, ...] = K_GRID) -> Metrics:
    """Retrieval with shuffled bank labels; sound features must fall to chance."""
    rng = substream(seed, "label-permutation")
    shuffled = FeatureBank(features=bank.features,
                           labels=rng.permutation(bank.labels),
                           ids=bank.ids, split=bank.split)
    return retrieval_accuracy(queries, shuffled, ks)


# ---- fine-tuned classification --------------------------------------------------------


def _cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    n, c = logits.data.shape
    m = logits.max(axis=1, keepdims=True)
    lse = (logits - m).exp().sum(axis=1).log() + m.reshape(n)
    onehot = np.zeros((n, c), dtype=logits.data.dtype)
    onehot[np.arange(n), labels] = 1.0
    picked = (logits * onehot).sum(axis=1)
    return (lse - picked).mean()


def _eval_top1(params: ParameterStore, store: dsets.DatasetStore,
               arch: ArchConfig, cfg: EvalConfig) -> float:
    records = sorted(store.records, key=lambda r: r.id)
    labels = np.array([r.label for r in records])
    correct = 0
    for i in range(0, len(records), _CHUNK):
        part = records[i:i + _CHUNK]
        clips = np.stack([
            dsets.sample_clip(r, (r.frames.shape[0] - cfg.clip_len) // 2, 1,
                              cfg.clip_len).data for r in part])
        feats = nets.encode(params, clips, arch, training=False)
        logits = nets.classify(params, feats).data
        correct += int((np.argmax(logits, axis=1) == labels[i:i + _CHUNK]).sum())
    return correct / len(records)


def finetune_classify(pretrained: ParameterStore | None,
                      train_store: dsets.DatasetStore,
                      test_store: dsets.DatasetStore,
                      cfg: EvalConfig = EvalConfig(),
                      arch: ArchConfig = ArchConfig(),
                      seed: int = 0) -> tuple[Metrics, ParameterStore]:
    """Appends a fresh 2-layer head and fine-tunes the whole model.

    `pretrained=None` trains from random init under the identical protocol
    (the no-pretraining baseline).
    """
    num_classes = int(train_store.labels().max()) + 1
    if pretrained is None:
        params = nets.init_params(derive_seed(seed, "scratch"), arch)
    else:
        params = pretrained.snapshot()
    params.velocity = {}
    nets.add_classifier(params, derive_seed(seed, "head"), num_classes, arch)

    n = len(train_store)
    b = min(cfg.finetune_batch, n)
    steps = n // b
    for epoch in range(cfg.finetune_epochs):
        order = substream(seed, "ft-order", epoch).permutation(n)
        for step in range(steps):
            picks = order[step * b:(step + 1) * b]
            clips, labels = [], []
            for idx in picks:
                rec = train_store.records[int(idx)]
                rng = substream(seed, "ft-clip", epoch, step, rec.id)
                start = int(rng.integers(0, rec.frames.shape[0] - cfg.clip_len + 1))
                clip = dsets.sample_clip(rec, start, 1, cfg.clip_len)
                if cfg.augment:
                    clip = dsets.augment(
                        clip, derive_seed(seed, "ft-aug", epoch, step, rec.id))
                clips.append(clip.data)
                labels.append(rec.label)
            feats = nets.encode(params, np.stack(clips), arch, training=True)
            loss = _cross_entropy(nets.classify(params, feats), np.array(labels))
            if not np.isfinite(float(loss)):
                raise training.TrainingDiverged(
                    f"fine-tuning diverged at epoch {epoch} step {step}",
                    training.Checkpoint(params, epoch, [], ""))
            params.zero_grad()
            loss.backward()
            training.sgd_step(params, cfg.finetune_lr, cfg.finetune_momentum,
                              cfg.finetune_weight_decay)
    top1 = _eval_top1(params, test_store, arch, cfg)
    return Metrics(classify_top1=top1), params


# ---- ablation harness ------------------------------------------------------------------


TABLE2_ROWS = (
    ("w/o pre-training", "-"),
    ("w/ CIP only", "different speed"),
    ("w/ MIP only", "-"),
    ("MIP + CIP", "random speed"),
    ("MIP + CIP", "same speed"),
    ("MIP + CIP", "different speed"),
)


def _fmt(x: float) -> str:
    return "nan" if x != x else format(x, ".6g")


def _cell_cfg(base: training.TrainConfig, run_seed: int,
              **overrides) -> training.TrainConfig:
    # one shared pretrain seed across cells isolates the ablated factor
    return replace(base, seed=derive_seed(run_seed, "ablate-pretrain"),
                   **overrides)


def ablate(train_store: dsets.DatasetStore, test_store: dsets.DatasetStore,
           base: training.TrainConfig, eval_cfg: EvalConfig, arch: ArchConfig,
           run_seed: int, out_dir, progress=None) -> list[str]:
    """Re-runs pretrain+evaluate over the ablation grids and writes the CSVs.

    A failing cell is recorded as nan and the grid continues; failures land
    in ablate_errors.log. Returns the list of files written.
    """
    errors: list[str] = []
    cache: dict[str, tuple] = {}
    finetune_seed = derive_seed(run_seed, "ablate-finetune")

    def run_cell(tag: str, cfg: training.TrainConfig | None):
        key = "none" if cfg is None else training.config_fingerprint(cfg, arch)
        if key in cache:
            return cache[key]
        if progress is not None:
            progress(tag)
        try:
            if cfg is None:
                metrics, _ = finetune_classify(
                    None, train_store, test_store, eval_cfg, arch,
                    seed=finetune_seed)
                result = (float("nan"), metrics.classify_top1, None)
            else:
                ckpt = training.pretrain(train_store, cfg, arch)
                bank = extract_features(train_store, ckpt.params, arch, eval_cfg)
                queries = extract_features(test_store, ckpt.params, arch, eval_cfg)
                retr = retrieval_accuracy(queries, bank, eval_cfg.ks)
                cls, _ = finetune_classify(
                    ckpt.params, train_store, test_store, eval_cfg, arch,
                    seed=finetune_seed)
                result = (retr.topk.get(1, float("nan")), cls.classify_top1, retr)
        except Exception as exc:  # cell failure must not kill the grid
            errors.append(f"{tag}: {exc!r}")
            result = (float("nan"), float("nan"), None)
        cache[key] = result
        return result

    default_cfg = _cell_cfg(base, run_seed, branch_mode="JOINT",
                            cip_speed_mode="DIFFERENT", view_mode="LONG_RES",
                            t=4)

    table1 = ["setting,t,retrieval_top1,classify_top1"]
    for t in range(1, 6):
        cfg = _cell_cfg(base, run_seed, branch_mode="JOINT",
                        cip_speed_mode="DIFFERENT", view_mode="LONG_RES", t=t)
        r1, c1, _ = run_cell(f"t={t}", cfg)
        table1.append(f"t={t},{t},{_fmt(r1)},{_fmt(c1)}")

    table2 = ["method,configuration,classify_top1"]
    cells2 = {
        ("w/o pre-training", "-"): None,
        ("w/ CIP only", "different speed"): _cell_cfg(
            base, run_seed, branch_mode="CIP_ONLY", cip_speed_mode="DIFFERENT"),
        ("w/ MIP only", "-"): _cell_cfg(base, run_seed, branch_mode="MIP_ONLY"),
        ("MIP + CIP", "random speed"): _cell_cfg(
            base, run_seed, branch_mode="JOINT", cip_speed_mode="RANDOM"),
        ("MIP + CIP", "same speed"): _cell_cfg(
            base, run_seed, branch_mode="JOINT", cip_speed_mode="SAME"),
        ("MIP + CIP", "different speed"): default_cfg,
    }
    for method, config in TABLE2_ROWS:
        _, c1, _ = run_cell(f"{method}/{config}", cells2[(method, config)])
        table2.append(f"{method},{config},{_fmt(c1)}")

    table3 = ["view,classify_top1"]
    for view, mode in (("Residual", "RESIDUAL"), ("LongRes", "LONG_RES")):
        cfg = _cell_cfg(base, run_seed, branch_mode="JOINT",
                        cip_speed_mode="DIFFERENT", view_mode=mode, t=4)
        _, c1, _ = run_cell(f"view={view}", cfg)
        table3.append(f"{view},{_fmt(c1)}")

    retrieval_rows = ["k,accuracy"]
    _, _, retr = run_cell("t=4", default_cfg)
    if retr is not None:
        for k in sorted(retr.topk):
            retrieval_rows.append(f"{k},{_fmt(retr.topk[k])}")

    written = []
    for name, rows in (("table1.csv", table1), ("table2.csv", table2),
                       ("table3.csv", table3), ("retrieval.csv", retrieval_rows)):
        (out_dir / name).write_text("\n".join(rows) + "\n")
        written.append(name)
    if errors:
        (out_dir / "ablate_errors.log").write_text("\n".join(errors) + "\n")
        written.append("ablate_errors.log")
    return written
