"""Downstream evaluation: embeddings, linear probes, fine-tuning, weighted k-NN, metrics."""

from __future__ import annotations

import copy
import csv
import io
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import nn

from .augment import eval_tokens, resize_tokens
from .channel_sim import Dataset
from .encoder import EncoderConfig, MLPHead, WiTEncoder
from .errors import CheckpointError, InvalidArgument, ShapeMismatch
from .nn_core import AdamW, load_arrays, load_module_arrays

STREAM_SPLIT = 21
STREAM_HEAD = 22
STREAM_SHUFFLE = 23

MODES = ("linear", "finetune", "knn")
TASKS = ("location", "spot", "pathloss")


@dataclass(frozen=True)
class EvalConfig:
    mode: str = "linear"
    task: str = "location"
    train_size: int | None = None  # None: train_fraction of the dataset
    test_size: int | None = None  # None: everything not used for training
    train_fraction: float = 0.8
    epochs: int | None = None  # None: 500 for linear, 150 for finetune
    batch_size: int | None = None  # None: 128 for linear, 512 for finetune
    lr: float = 3e-4
    weight_decay: float = 0.01
    k: int = 20
    head_hidden: int | None = None  # None: embedding width
    token_len: int = 36
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidArgument(f"mode must be one of {MODES}")
        if self.task not in TASKS:
            raise InvalidArgument(f"task must be one of {TASKS}")
        if self.k < 1:
            raise InvalidArgument("k must be >= 1")
        if not 0 < self.train_fraction < 1:
            raise InvalidArgument("train_fraction must lie in (0, 1)")
        if self.epochs is not None and self.epochs < 0:
            raise InvalidArgument("epochs must be >= 0")

    @property
    def num_epochs(self) -> int:
        if self.epochs is not None:
            return self.epochs
        return 150 if self.mode == "finetune" else 500

    @property
    def batch(self) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 512 if self.mode == "finetune" else 128


@dataclass
class MetricsReport:
    mae: float | None = None
    p95: float | None = None
    rmse: float | None = None
    top1: float | None = None
    top5: float | None = None
    runtime: float = 0.0

    def __post_init__(self):
        for f in ("mae", "p95", "rmse", "top1", "top5"):
            v = getattr(self, f)
            if v is not None and not v >= 0:
                raise InvalidArgument(f"{f} must be >= 0, got {v}")
        if self.top1 is not None and self.top5 is not None and self.top5 < self.top1:
            raise InvalidArgument("top5 < top1")


METRIC_FIELDS = ("mae", "p95", "rmse", "top1", "top5")


# --- embeddings and splits ------------------------------------------------------


def downstream_tokens(channels: np.ndarray, deltas, token_len: int) -> np.ndarray:
    """Normalized, un-augmented tokens resized to the global view length."""
    return resize_tokens(eval_tokens(channels, deltas), token_len)


@torch.no_grad()
def extract_embeddings(encoder: WiTEncoder, tokens: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """LID representations (R, D) of token sequences (R, C_tok, 3N_r)."""
    if tokens.ndim != 3:
        raise ShapeMismatch(f"expected (R, C_tok, width) tokens, got shape {tokens.shape}")
    dtype = next(encoder.parameters()).dtype
    out = []
    for i in range(0, len(tokens), batch_size):
        chunk = torch.as_tensor(tokens[i : i + batch_size], dtype=dtype)
        out.append(encoder.lid_embedding(chunk).numpy())
    return np.concatenate(out).astype(np.float64)


def _quotas(counts: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder allocation of ``total`` proportional to ``counts``."""
    share = counts * total / counts.sum()
    q = np.floor(share).astype(int)
    rest = total - q.sum()
    order = np.lexsort((np.arange(len(counts)), -(share - q)))
    q[order[:rest]] += 1
    return np.minimum(q, counts)


def stratified_split(
    strata: np.ndarray, train_size: int, test_size: int | None, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint train/test index sets drawn without replacement, per-stratum proportional."""
    strata = np.asarray(strata)
    n = len(strata)
    test_size = n - train_size if test_size is None else test_size
    if train_size < 1 or test_size < 1 or train_size + test_size > n:
        raise InvalidArgument(f"cannot draw {train_size} + {test_size} samples from {n}")
    classes = np.unique(strata)
    pools = [rng.permutation(np.flatnonzero(strata == c)) for c in classes]
    counts = np.array([len(p) for p in pools])
    q_train = _quotas(counts, train_size)
    q_test = _quotas(counts - q_train, test_size)
    train = np.concatenate([p[:a] for p, a in zip(pools, q_train)])
    test = np.concatenate([p[a : a + b] for p, a, b in zip(pools, q_train, q_test)])
    return np.sort(train), np.sort(test)


def task_labels(dataset: Dataset, task: str) -> np.ndarray:
    if task == "location":
        return dataset.positions[:, :2].astype(np.float64)
    if task == "pathloss":
        return dataset.pathloss_db.astype(np.float64)[:, None]
    if task == "spot":
        return dataset.spot_labels.astype(np.int64)
    raise InvalidArgument(f"unknown task {task!r}")


# --- metrics --------------------------------------------------------------------


def metrics(pred: np.ndarray, true: np.ndarray) -> MetricsReport:
    """MAE, 95th percentile and RMSE of per-sample Euclidean errors."""
    errors = sample_errors(pred, true)
    return MetricsReport(
        mae=float(errors.mean()),
        p95=float(np.percentile(errors, 95, method="linear")),
        rmse=float(math.sqrt(np.mean(errors**2))),
    )


def sample_errors(pred: np.ndarray, true: np.ndarray) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if pred.shape != true.shape:
        raise InvalidArgument(f"prediction shape {pred.shape} != truth shape {true.shape}")
    if len(pred) == 0:
        raise InvalidArgument("no samples")
    if pred.ndim == 1:
        return np.abs(pred - true)
    return np.linalg.norm(pred - true, axis=-1)


def rank_classes(scores: np.ndarray) -> np.ndarray:
    """Classes ordered by descending score per row; ties go to the lower class id."""
    return np.argsort(-scores, axis=1, kind="stable")


def topk_accuracy(scores: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    ranked = rank_classes(scores)
    top1 = np.mean(ranked[:, 0] == labels)
    top5 = np.mean((ranked[:, :5] == labels[:, None]).any(axis=1))
    return 100.0 * float(top1), 100.0 * float(top5)


# --- k-NN -----------------------------------------------------------------------


def knn_scores(train_emb, train_labels, test_emb, k: int, num_classes: int) -> np.ndarray:
    """Class votes (R_test, num_classes) from the k most cosine-similar train rows.

    Each neighbour votes with weight max(similarity, 0).
    """
    train_emb = np.asarray(train_emb, dtype=np.float64)
    test_emb = np.asarray(test_emb, dtype=np.float64)
    if k < 1 or k > len(train_emb):
        raise InvalidArgument(f"k={k} must lie in [1, {len(train_emb)}]")
    if train_emb.shape[1:] != test_emb.shape[1:]:
        raise ShapeMismatch("train and test embeddings differ in width")

    def unit(x):
        return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)

    sims = unit(test_emb) @ unit(train_emb).T
    nearest = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    weights = np.maximum(np.take_along_axis(sims, nearest, axis=1), 0.0)
    votes = np.zeros((len(test_emb), num_classes))
    rows = np.repeat(np.arange(len(test_emb)), k)
    np.add.at(votes, (rows, np.asarray(train_labels)[nearest].ravel()), weights.ravel())
    return votes


def knn_eval(train_emb, train_labels, test_emb, test_labels, k: int = 20, num_classes: int | None = None):
    """Weighted k-NN top-1 / top-5 accuracy in percent."""
    train_labels = np.asarray(train_labels, dtype=np.int64)
    test_labels = np.asarray(test_labels, dtype=np.int64)
    if num_classes is None:
        num_classes = int(max(train_labels.max(), test_labels.max())) + 1
    votes = knn_scores(train_emb, train_labels, test_emb, k, num_classes)
    return topk_accuracy(votes, test_labels)


# --- supervised heads -------------------------------------------------------------


class LabelScaler:
    """Per-column min-max map to [0, 1]; a zero-width column only gets shifted."""

    def __init__(self, labels: np.ndarray):
        labels = np.asarray(labels, dtype=np.float64)
        if labels.size == 0 or not np.all(np.isfinite(labels)):
            raise InvalidArgument("labels must be finite and non-empty")
        self.low = labels.min(axis=0)
        span = labels.max(axis=0) - self.low
        self.span = np.where(span > 0, span, 1.0)

    def transform(self, y):
        return (np.asarray(y, dtype=np.float64) - self.low) / self.span

    def inverse(self, y):
        return np.asarray(y, dtype=np.float64) * self.span + self.low


def _seed_for(seed: int, stream: int) -> int:
    return int(np.random.default_rng([seed, stream]).integers(0, 2**63 - 1))


def fit(
    model: nn.Module,
    inputs: torch.Tensor,
    targets: torch.Tensor,
    classify: bool,
    epochs: int,
    batch_size: int,
    lr: float,
    weight_decay: float,
    seed: int,
) -> list[float]:
    """Minibatch AdamW training; returns the mean loss per epoch."""
    opt = AdamW(dict(model.named_parameters()))
    rng = np.random.default_rng([seed, STREAM_SHUFFLE])
    loss_fn = nn.functional.cross_entropy if classify else nn.functional.mse_loss
    history = []
    model.train()
    for _ in range(epochs):
        perm = rng.permutation(len(inputs))
        total = 0.0
        for i in range(0, len(perm), batch_size):
            idx = torch.as_tensor(perm[i : i + batch_size])
            loss = loss_fn(model(inputs[idx]), targets[idx])
            model.zero_grad(set_to_none=True)
            loss.backward()
            opt.step(lr, weight_decay)
            total += loss.item() * len(idx)
        history.append(total / len(perm))
    model.eval()
    return history


@dataclass
class EvalResult:
    report: MetricsReport
    predictions: np.ndarray
    truth: np.ndarray
    errors: np.ndarray | None = None
    history: list[float] = field(default_factory=list)
    model: nn.Module | None = None


def _finish(task: str, outputs: np.ndarray, truth: np.ndarray, scaler: LabelScaler | None) -> tuple:
    if task == "spot":
        top1, top5 = topk_accuracy(outputs, truth)
        return MetricsReport(top1=top1, top5=top5), rank_classes(outputs)[:, 0], None
    pred = scaler.inverse(outputs)
    if task == "pathloss":
        pred, truth = pred[:, 0], truth[:, 0]
    return metrics(pred, truth), pred, sample_errors(pred, truth)


def _targets(task: str, labels: np.ndarray, scaler: LabelScaler | None, dtype) -> torch.Tensor:
    if task == "spot":
        return torch.as_tensor(labels, dtype=torch.int64)
    return torch.as_tensor(scaler.transform(labels), dtype=dtype)


def _out_dim(task: str, train_labels: np.ndarray, num_classes: int | None) -> int:
    if task == "spot":
        return num_classes if num_classes is not None else int(train_labels.max()) + 1
    return train_labels.shape[1]


def linear_probe(
    train_emb: np.ndarray,
    train_labels: np.ndarray,
    test_emb: np.ndarray,
    test_labels: np.ndarray,
    task: str,
    config: EvalConfig,
    num_classes: int | None = None,
) -> EvalResult:
    """Train one linear layer on frozen embeddings."""
    start = time.perf_counter()
    scaler = None if task == "spot" else LabelScaler(train_labels)
    dtype = torch.float64
    torch.manual_seed(_seed_for(config.seed, STREAM_HEAD))
    head = MLPHead(train_emb.shape[1], _out_dim(task, train_labels, num_classes)).to(dtype)
    x = torch.as_tensor(train_emb, dtype=dtype)
    history = fit(
        head,
        x,
        _targets(task, train_labels, scaler, dtype),
        task == "spot",
        config.num_epochs,
        config.batch,
        config.lr,
        config.weight_decay,
        config.seed,
    )
    with torch.no_grad():
        outputs = head(torch.as_tensor(test_emb, dtype=dtype)).numpy()
    report, pred, errors = _finish(task, outputs, np.asarray(test_labels), scaler)
    report.runtime = time.perf_counter() - start
    return EvalResult(report, pred, np.asarray(test_labels), errors, history, head)


class _Tuned(nn.Module):
    def __init__(self, encoder: WiTEncoder, head: MLPHead):
        super().__init__()
        self.encoder = encoder
        self.head = head

    def forward(self, tokens):
        return self.head(self.encoder.lid_embedding(tokens))


def fine_tune(
    encoder: WiTEncoder,
    train_tokens: np.ndarray,
    train_labels: np.ndarray,
    test_tokens: np.ndarray,
    test_labels: np.ndarray,
    task: str,
    config: EvalConfig,
    num_classes: int | None = None,
) -> EvalResult:
    """Train a copy of ``encoder`` together with a fresh one-hidden-layer head.

    Test predictions are made one sample at a time.
    """
    start = time.perf_counter()
    scaler = None if task == "spot" else LabelScaler(train_labels)
    enc = copy.deepcopy(encoder)
    for p in enc.parameters():
        p.requires_grad_(True)
    dtype = next(enc.parameters()).dtype
    d = enc.config.embed_dim
    torch.manual_seed(_seed_for(config.seed, STREAM_HEAD))
    head = MLPHead(d, _out_dim(task, train_labels, num_classes), hidden=config.head_hidden or d).to(dtype)
    model = _Tuned(enc, head)
    history = fit(
        model,
        torch.as_tensor(train_tokens, dtype=dtype),
        _targets(task, train_labels, scaler, dtype),
        task == "spot",
        config.num_epochs,
        config.batch,
        config.lr,
        config.weight_decay,
        config.seed,
    )
    with torch.no_grad():
        outputs = np.concatenate(
            [model(torch.as_tensor(t[None], dtype=dtype)).double().numpy() for t in test_tokens]
        )
    report, pred, errors = _finish(task, outputs, np.asarray(test_labels), scaler)
    report.runtime = time.perf_counter() - start
    return EvalResult(report, pred, np.asarray(test_labels), errors, history, model)


# --- end-to-end evaluation --------------------------------------------------------


def split_dataset(dataset: Dataset, config: EvalConfig) -> tuple[np.ndarray, np.ndarray]:
    n = len(dataset)
    train_size = config.train_size if config.train_size is not None else int(round(config.train_fraction * n))
    rng = np.random.default_rng([config.seed, STREAM_SPLIT])
    return stratified_split(dataset.spot_labels, train_size, config.test_size, rng)


def evaluate(encoder: WiTEncoder, dataset: Dataset, config: EvalConfig) -> EvalResult:
    """Run the mode/task pair of ``config`` on ``dataset`` with ``encoder``."""
    if encoder.config.token_width != 3 * dataset.num_antennas:
        raise ShapeMismatch(
            f"encoder expects {encoder.config.token_width // 3} antennas, dataset has {dataset.num_antennas}"
        )
    train, test = split_dataset(dataset, config)
    tokens = downstream_tokens(dataset.channels, dataset.deltas, config.token_len)
    labels = task_labels(dataset, config.task)
    classes = dataset.spot_count
    if config.mode == "finetune":
        return fine_tune(
            encoder, tokens[train], labels[train], tokens[test], labels[test], config.task, config, classes
        )
    start = time.perf_counter()
    emb = extract_embeddings(encoder, tokens)
    if config.mode == "knn":
        if config.task != "spot":
            raise InvalidArgument("k-NN evaluation is defined for the spot task only")
        votes = knn_scores(emb[train], labels[train], emb[test], config.k, classes)
        top1, top5 = topk_accuracy(votes, labels[test])
        report = MetricsReport(top1=top1, top5=top5, runtime=time.perf_counter() - start)
        return EvalResult(report, rank_classes(votes)[:, 0], labels[test])
    return linear_probe(emb[train], labels[train], emb[test], labels[test], config.task, config, classes)


def pathloss_transfer(encoder: WiTEncoder, dataset: Dataset, config: EvalConfig | None = None) -> EvalResult:
    """Linear path-loss head on frozen embeddings with a 0.8 / 0.2 split."""
    cfg = replace(
        config or EvalConfig(),
        mode="linear",
        task="pathloss",
        train_size=None,
        test_size=None,
        train_fraction=0.8,
    )
    return evaluate(encoder, dataset, cfg)


# --- CSV output ---------------------------------------------------------------------

REPORT_HEADER = ("run", "mode", "task", "n_train", "n_test", "seed") + METRIC_FIELDS


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def report_row(run: str, config: EvalConfig, result: EvalResult, n_train: int) -> dict:
    row = {
        "run": run,
        "mode": config.mode,
        "task": config.task,
        "n_train": n_train,
        "n_test": len(result.truth),
        "seed": config.seed,
    }
    row.update({f: _fmt(getattr(result.report, f)) for f in METRIC_FIELDS})
    return row


def format_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(header), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def format_sample_errors(result: EvalResult) -> str:
    """Per-sample CSV: index, prediction and truth columns, error (blank for classification)."""
    pred = np.asarray(result.predictions)
    truth = np.asarray(result.truth)
    pred2 = pred.reshape(len(pred), -1)
    truth2 = truth.reshape(len(truth), -1)
    width = pred2.shape[1]
    header = ["index"] + [f"pred_{i}" for i in range(width)] + [f"true_{i}" for i in range(width)] + ["error"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for i in range(len(pred2)):
        err = "" if result.errors is None else repr(float(result.errors[i]))
        w.writerow([i] + [repr(p.item()) for p in pred2[i]] + [repr(t.item()) for t in truth2[i]] + [err])
    return buf.getvalue()


# --- checkpoints ---------------------------------------------------------------------

ENCODER_PREFIXES = ("encoder/", "target/encoder/")


def encoder_from_arrays(arrays: dict, base: EncoderConfig) -> WiTEncoder:
    """Rebuild an encoder from checkpoint arrays.

    Shapes (width, D, positions, depth, MLP ratio, shared projections) come
    from the arrays; heads, norm constants and final-norm flag from ``base``.
    """
    prefix = next((p for p in ENCODER_PREFIXES if f"{p}embedding" in arrays), None)
    if prefix is None:
        raise CheckpointError("checkpoint holds no encoder")
    own = {k[len(prefix) :]: v for k, v in arrays.items() if k.startswith(prefix)}
    width, d = own["embedding"].shape
    depth = len({k.split(".")[1] for k in own if k.startswith("blocks.")})
    config = replace(
        base,
        token_width=width,
        embed_dim=d,
        max_positions=own["positions"].shape[0],
        num_blocks=depth,
        mlp_ratio=own["blocks.0.fc1.weight"].shape[1] // d if depth else base.mlp_ratio,
        shared_qkv="blocks.0.attn.w_qkv" in own if depth else base.shared_qkv,
    )
    encoder = WiTEncoder(config)
    load_module_arrays(encoder, arrays, prefix.rstrip("/"))
    encoder.eval()
    return encoder


def load_encoder(path, base: EncoderConfig | None = None) -> WiTEncoder:
    return encoder_from_arrays(load_arrays(path), base or EncoderConfig())
