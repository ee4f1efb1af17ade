"""Pretraining loop, AdamW, learning-rate schedule and downstream probing."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import streams
from . import tensorad as ad
from .checkpoint import Checkpoint, OptimizerState
from .config import TrainConfig
from .errors import ConfigurationError, NumericError
from .layout import BatchLayout, sample_layout
from .model import Net, gather_targets, init_params
from .tokenizer import cubify_array, normalize_cubes
from .videodata import generate_corpus, read_corpus

log = logging.getLogger(__name__)

METRICS_HEADER = "step,loss,lr,seconds"


# --------------------------------------------------------------------------- optimizer


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState,
               lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0,
               decay=None):
    """One in-place AdamW update with bias correction.

    Weight decay is decoupled: decayed parameters are first scaled by
    ``1 - lr * weight_decay``.  ``decay`` names the parameters that are
    decayed (all of them when None).  Parameters without a gradient entry get
    a zero gradient.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ConfigurationError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            v = state.v[name] = np.zeros_like(p)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if weight_decay and (decay is None or name in decay):
            p *= 1.0 - lr * weight_decay
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return params, state


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Learning rate for 0-based update ``step``: linear warmup then optional cosine decay."""
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    if not cfg.cosine:
        return cfg.lr
    span = max(1, cfg.steps - cfg.warmup_steps)
    progress = min(1.0, (step - cfg.warmup_steps) / span)
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + math.cos(math.pi * progress))


def decayed_names(params) -> set[str]:
    """Matrices are decayed; biases, norm parameters and the decoder query are not."""
    return {k for k, v in params.items() if v.ndim >= 2}


# --------------------------------------------------------------------------- data


@dataclass
class Corpus:
    """Cubified videos plus their regression targets and labels."""

    cubes: np.ndarray  # (V, N, cube_dim)
    targets: np.ndarray  # (V, N, cube_dim)
    labels: np.ndarray  # (V,)

    @property
    def train_indices(self) -> np.ndarray:
        return np.array([i for i in range(len(self.labels)) if i % 10 != 0])

    @property
    def test_indices(self) -> np.ndarray:
        return np.array([i for i in range(len(self.labels)) if i % 10 == 0])


def load_corpus(cfg: TrainConfig, videos: np.ndarray | None = None, labels: np.ndarray | None = None) -> Corpus:
    """Cubify the configured corpus (directory, explicit arrays, or synthetic task)."""
    if videos is None:
        if cfg.data_dir:
            videos, labels = read_corpus(cfg.data_dir)
        else:
            videos, labels = generate_corpus(cfg.task_spec(), cfg.num_videos)
    cubes = cubify_array(np.asarray(videos), cfg.cube_spec).astype(cfg.dtype)
    if cfg.normalize_targets:
        targets = normalize_cubes(cubes, cfg.norm_eps)[0].astype(cfg.dtype)
    else:
        targets = cubes
    if labels is None:
        labels = np.zeros(len(cubes), dtype=np.int64)
    return Corpus(cubes, targets, np.asarray(labels))


# --------------------------------------------------------------------------- pretraining


def initial_checkpoint(cfg: TrainConfig) -> Checkpoint:
    params = init_params(cfg.model_config(), cfg.seed, cfg.dtype)
    return Checkpoint(cfg, params, OptimizerState(), 0)


def batch_layout(cfg: TrainConfig, step: int, batch: int | None = None) -> BatchLayout:
    """Layouts for every slot of training step ``step``; each slot has its own streams."""
    batch = cfg.batch_size if batch is None else batch
    plans = [sample_layout(cfg.scheme, cfg.policy, cfg.mask_ratio, cfg.seed, step, slot, targets=cfg.targets)
             for slot in range(batch)]
    return BatchLayout.stack(plans)


def batch_indices(cfg: TrainConfig, corpus: Corpus, step: int) -> np.ndarray:
    pool = corpus.train_indices
    rng = streams.substream(cfg.seed, streams.BATCH, step)
    return pool[rng.choice(len(pool), size=min(cfg.batch_size, len(pool)), replace=False)]


def loss_and_grads(cfg: TrainConfig, params: dict, cubes: np.ndarray, targets: np.ndarray,
                   layout: BatchLayout):
    """Pretraining loss of one batch and its gradients keyed by parameter name."""
    tape = ad.Tape()
    net = Net(cfg.model_config(), params, tape)
    out, _ = net.encode(cubes, layout)
    pred = net.decode(out, layout)
    loss = ad.mse(pred, gather_targets(targets, layout))
    grads = ad.backward(tape, loss)
    return float(loss.data), {k: grads[t] for k, t in net.p.items()}


@dataclass
class MetricRow:
    step: int
    loss: float
    lr: float
    seconds: float

    def csv(self) -> str:
        return f"{self.step},{self.loss!r},{self.lr!r},{self.seconds:.6f}"


def pretrain_loop(cfg: TrainConfig, *, resume: Checkpoint | None = None, stop_at: int | None = None,
                  corpus: Corpus | None = None, metrics_path=None) -> tuple[Checkpoint, list[MetricRow]]:
    """Run optimizer steps ``resume.step .. stop_at`` (default ``cfg.steps``).

    Every random draw is keyed by ``(cfg.seed, step, ...)``, so a run resumed
    from a checkpoint continues exactly as the uninterrupted run would.
    """
    ckpt = resume if resume is not None else initial_checkpoint(cfg)
    if resume is not None and resume.config != cfg:
        raise ConfigurationError("resume checkpoint was written with a different configuration")
    corpus = corpus if corpus is not None else load_corpus(cfg)
    stop = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    params = ckpt.params
    decay = decayed_names(params)
    rows: list[MetricRow] = []
    t0 = time.perf_counter()
    for step in range(ckpt.step, stop):
        idx = batch_indices(cfg, corpus, step)
        layout = batch_layout(cfg, step, len(idx))
        where = f"reproduce with seed={cfg.seed} step={step} batch={idx.tolist()}"
        try:
            loss, grads = loss_and_grads(cfg, params, corpus.cubes[idx], corpus.targets[idx], layout)
        except NumericError as exc:
            raise NumericError(f"{exc} at step {step}; {where}") from exc
        if not math.isfinite(loss):
            raise NumericError(f"non-finite loss at step {step}; {where}")
        lr = lr_at(step, cfg)
        adamw_step(params, grads, ckpt.opt, lr, (cfg.beta1, cfg.beta2), cfg.eps, cfg.weight_decay, decay)
        rows.append(MetricRow(step + 1, loss, lr, time.perf_counter() - t0))
        log.debug("step=%d loss=%.6f lr=%.3e", step + 1, loss, lr)
    ckpt.step = max(ckpt.step, stop)
    if metrics_path is not None:
        write_metrics(metrics_path, rows)
    return ckpt, rows


def write_metrics(path, rows, append: bool = False) -> None:
    path = Path(path)
    lines = [r.csv() for r in rows]
    if append and path.exists():
        with path.open("a") as fh:
            fh.write("".join(line + "\n" for line in lines))
    else:
        path.write_text("\n".join([METRICS_HEADER, *lines]) + "\n")


# --------------------------------------------------------------------------- probing


@dataclass
class ProbeResult:
    accuracy: float
    train_accuracy: float
    correct: int
    total: int


def encoder_features(params: dict, cfg: TrainConfig, cubes: np.ndarray, chunk: int = 64) -> np.ndarray:
    net = Net(cfg.model_config(), params)
    feats = [net.features(cubes[i:i + chunk])[0].data for i in range(0, len(cubes), chunk)]
    return np.concatenate(feats)


def probe_finetune(ckpt: Checkpoint, mode: str = "linear", corpus: Corpus | None = None,
                   seed: int | None = None) -> ProbeResult:
    """Train a classifier on the encoder and report held-out top-1 accuracy.

    ``linear`` freezes the encoder and fits only the classifier on
    standardized mean-pooled features; ``full`` trains the encoder and the
    classifier together.  The decoder is never used.  Samples with
    ``index % 10 == 0`` form the held-out split.
    """
    if mode not in ("linear", "full"):
        raise ConfigurationError(f"probe mode must be linear or full, got {mode!r}")
    cfg = ckpt.config
    seed = cfg.seed if seed is None else seed
    corpus = corpus if corpus is not None else load_corpus(cfg)
    if corpus.labels.max(initial=0) >= cfg.num_directions:
        raise ConfigurationError("labels exceed the classifier's class count")
    train, test = corpus.train_indices, corpus.test_indices
    params = {k: v.copy() for k, v in ckpt.params.items()}
    mcfg = cfg.model_config()

    if mode == "linear":
        feats = encoder_features(params, cfg, corpus.cubes)
        mu = feats[train].mean(axis=0)
        sd = feats[train].std(axis=0) + 1e-6
        feats = ((feats - mu) / sd).astype(cfg.dtype)
        head = {"cls.w": params["cls.w"], "cls.b": params["cls.b"]}

        def step_grads(idx):
            tape = ad.Tape()
            w, b = tape.leaf(head["cls.w"]), tape.leaf(head["cls.b"])
            logits = ad.add(ad.matmul(ad.const(feats[idx]), w), b)
            loss = ad.cross_entropy(logits, corpus.labels[idx])
            g = ad.backward(tape, loss)
            return {"cls.w": g[w], "cls.b": g[b]}

        def predict(idx):
            return (feats[idx] @ head["cls.w"] + head["cls.b"]).argmax(axis=1)

        trained = head
    else:
        trainable = {k for k in params if k.startswith(("embed.", "enc.", "cls."))}
        trained = {k: params[k] for k in sorted(trainable)}

        def step_grads(idx):
            tape = ad.Tape()
            net = Net(mcfg, params, tape, trainable)
            loss = ad.cross_entropy(net.classify(corpus.cubes[idx]), corpus.labels[idx])
            g = ad.backward(tape, loss)
            return {k: g[net.p[k]] for k in trainable}

        def predict(idx):
            net = Net(mcfg, params)
            return np.concatenate([net.classify(corpus.cubes[idx[i:i + 64]]).data.argmax(axis=1)
                                   for i in range(0, len(idx), 64)])

    state = OptimizerState()
    probe_cfg = cfg.replace(steps=cfg.probe_steps, lr=cfg.probe_lr, warmup_steps=min(cfg.warmup_steps, cfg.probe_steps))
    decay = decayed_names(trained)
    for step in range(cfg.probe_steps):
        rng = streams.substream(seed, streams.PROBE, step)
        idx = train[rng.choice(len(train), size=min(cfg.probe_batch, len(train)), replace=False)]
        grads = step_grads(idx)
        adamw_step(trained, grads, state, lr_at(step, probe_cfg), (cfg.beta1, cfg.beta2), cfg.eps,
                   cfg.probe_weight_decay, decay)

    correct = int((predict(test) == corpus.labels[test]).sum())
    train_acc = float((predict(train) == corpus.labels[train]).mean())
    return ProbeResult(correct / len(test), train_acc, correct, len(test))


# --------------------------------------------------------------------------- gradient check


def gradcheck(cfg: TrainConfig, count: int = 20, h: float = 1e-4, tol: float = 1e-5, scale: float = 1.0,
              corpus: Corpus | None = None, min_grad: float = 1e-6) -> ad.FiniteDiffReport:
    """Central-difference check of the full pretraining loss on ``count`` random parameter entries.

    Runs in float64 at the initial parameters on the first batch of ``cfg``
    (weight matrices optionally multiplied by ``scale``).  Entries are drawn
    uniformly over all parameters from the ``CHECK`` substream, skipping
    those with ``|grad| < min_grad``, where the quotient would measure
    roundoff rather than the gradient.  The default ``h`` keeps roundoff
    (about ``eps * loss / h``) well below the truncation error.
    """
    cfg = cfg.replace(precision=64)
    corpus = corpus if corpus is not None else load_corpus(cfg)
    params = initial_checkpoint(cfg).params
    for name, p in params.items():
        if p.ndim >= 2:
            p *= scale
    idx = batch_indices(cfg, corpus, 0)
    layout = batch_layout(cfg, 0, len(idx))
    cubes, targets = corpus.cubes[idx], corpus.targets[idx]
    _, grads = loss_and_grads(cfg, params, cubes, targets, layout)

    names = sorted(params)
    sizes = np.array([params[n].size for n in names])
    rng = streams.substream(cfg.seed, streams.CHECK)
    picks: list[tuple[str, tuple]] = []
    seen = set()
    for _ in range(100 * count):
        if len(picks) == count:
            break
        flat = int(rng.integers(sizes.sum()))
        k = int(np.searchsorted(np.cumsum(sizes), flat, side="right"))
        name = names[k]
        ix = tuple(int(i) for i in np.unravel_index(flat - int(sizes[:k].sum()), params[name].shape))
        if (name, ix) in seen or abs(grads[name][ix]) < min_grad:
            continue
        seen.add((name, ix))
        picks.append((name, ix))

    def f(p):
        return loss_and_grads_value(cfg, p, cubes, targets, layout)

    return ad.finite_diff_check(f, params, grads, h=h, tol=tol, picks=picks)


def loss_and_grads_value(cfg: TrainConfig, params: dict, cubes, targets, layout) -> float:
    """Forward-only pretraining loss."""
    net = Net(cfg.model_config(), params)
    out, _ = net.encode(cubes, layout)
    return float(ad.mse(net.decode(out, layout), gather_targets(targets, layout)).data)
