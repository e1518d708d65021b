"""Time-summed cross-entropy loss, adam, and the mini-batch trainer."""

import csv
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import network
from .network import trainable_items
from .scenegen import to_model_input

PROB_CLAMP = 1e-7


@dataclass
class TrainConfig:
    preset: str = "BLT"
    stereo: bool = True
    learning_rate: float = 0.003
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    epochs: int = 25
    batch_size: int = 500
    seed: int = 0
    tau: int = 4
    classes: int = 10
    limit: int | None = None        # cap on training samples, smoke runs
    val_fraction: float = 0.02
    dtype: str = "float32"
    checkpoint_every: int = 1

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm needs it)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


def _check_one_hot(target):
    if not np.all((target == 0) | (target == 1)) or not np.all(target.sum(axis=1) == 1):
        raise ValueError("target must be one-hot")


def loss_time_summed(outputs, target):
    """Cross-entropy summed over time steps and output units, batch mean.

    J = -sum_t sum_i [y_i log p_i + (1 - y_i) log(1 - p_i)], with the
    (1 - y) terms applied to the softmax outputs as well; probabilities
    are clamped to [1e-7, 1 - 1e-7].
    """
    _check_one_hot(target)
    total = 0.0
    for probs in outputs:
        p = np.clip(probs, PROB_CLAMP, 1 - PROB_CLAMP)
        total += -(target * np.log(p) + (1 - target) * np.log1p(-p)).sum()
    return float(total) / target.shape[0]


def loss_grads(outputs, target):
    """Per-step gradients of loss_time_summed w.r.t. the softmax outputs."""
    _check_one_hot(target)
    b = target.shape[0]
    grads = []
    for probs in outputs:
        p = np.clip(probs, PROB_CLAMP, 1 - PROB_CLAMP)
        g = -(target / p - (1 - target) / (1 - p)) / b
        # clamped entries sit on a flat of the clipped loss
        g[(probs < PROB_CLAMP) | (probs > 1 - PROB_CLAMP)] = 0.0
        grads.append(g.astype(probs.dtype))
    return grads


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def create(cls, named_params):
        return cls(m={n: np.zeros_like(p) for n, p in named_params},
                   v={n: np.zeros_like(p) for n, p in named_params})


def adam_step(named_params, grads, state, config):
    """Bias-corrected adam update, in place on the parameter arrays."""
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for name, p in named_params:
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.adam_epsilon)).astype(p.dtype)


def one_hot(labels, classes, dtype=np.float64):
    out = np.zeros((len(labels), classes), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1
    return out


def _evaluate_slice(spec, params, x, labels, target, batch_size):
    """Inference-mode loss and last-step accuracy over a data slice."""
    losses = []
    correct = 0
    for i in range(0, len(x), batch_size):
        xb = x[i:i + batch_size]
        trace = network.forward_unrolled(spec, params, xb, training=False)
        losses.append(loss_time_summed(trace.softmax_out, target[i:i + batch_size]) * len(xb))
        correct += int((trace.softmax_out[-1].argmax(axis=1) == labels[i:i + batch_size]).sum())
    return sum(losses) / len(x), correct / len(x)


def train(config, dataset, out_dir, resume_from=None, log=print):
    """Train one preset on a generated dataset split.

    dataset: the dict from scenegen.load_dataset (train split). Writes
    metrics.csv, per-epoch checkpoints and final.ckpt into out_dir;
    returns the metrics rows. Deterministic given (config, dataset).
    """
    os.makedirs(out_dir, exist_ok=True)
    dtype = np.dtype(config.dtype).type
    channels = 2 if config.stereo else 1
    x = to_model_input(dataset["left"], dataset["right"], config.stereo, dtype=dtype)
    labels = dataset["labels"].astype(np.int64)
    if config.limit is not None:
        x, labels = x[:config.limit], labels[:config.limit]
    n = len(x)
    target = one_hot(labels, config.classes, dtype=dtype)

    spec = network.preset(config.preset, input_channels=channels,
                          classes=config.classes, tau=config.tau)
    start_epoch = 0
    if resume_from is not None:
        spec, params, _, extra = network.load_checkpoint(resume_from, dtype=dtype)
        named = trainable_items(spec, params)
        state = OptimizerState.create(named)
        for name, _ in named:
            state.m[name] = extra[f"adam_m.{name}"].astype(dtype)
            state.v[name] = extra[f"adam_v.{name}"].astype(dtype)
        state.step = int(extra["adam_step"][()] if extra["adam_step"].shape == ()
                         else extra["adam_step"][0])
        start_epoch = int(extra["epoch"][0])
    else:
        params = network.init_params(spec, config.seed, dtype=dtype)
        state = OptimizerState.create(trainable_items(spec, params))

    perm = np.random.default_rng([config.seed, 1]).permutation(n)
    n_val = max(int(round(n * config.val_fraction)), 0)
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    metrics_path = os.path.join(out_dir, "metrics.csv")
    rows = []
    mode = "a" if resume_from is not None and os.path.exists(metrics_path) else "w"
    with open(metrics_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(["epoch", "split", "loss", "accuracy_last_step", "wallclock_s"])
        t0 = time.time()
        for epoch in range(start_epoch, config.epochs):
            order = np.random.default_rng([config.seed, 2, epoch]).permutation(train_idx)
            batch_losses = []
            correct = seen = 0
            for start in range(0, len(order) - config.batch_size + 1, config.batch_size):
                idx = order[start:start + config.batch_size]
                xb, tb = x[idx], target[idx]
                trace = network.forward_unrolled(spec, params, xb, training=True)
                loss = loss_time_summed(trace.softmax_out, tb)
                if not np.isfinite(loss):
                    raise FloatingPointError(
                        f"non-finite loss {loss} at epoch {epoch}, "
                        f"batch {start // config.batch_size}")
                grads = network.backward_bptt(spec, params, xb, trace,
                                              loss_grads(trace.softmax_out, tb))
                adam_step(trainable_items(spec, params), grads, state, config)
                batch_losses.append(loss)
                correct += int((trace.softmax_out[-1].argmax(axis=1) == labels[idx]).sum())
                seen += len(idx)
            if not batch_losses:
                raise ValueError(f"no full batch of {config.batch_size} in {len(order)} samples")
            rows.append([epoch, "train", float(np.mean(batch_losses)),
                         correct / seen, time.time() - t0])
            writer.writerow(rows[-1])
            if n_val:
                vloss, vacc = _evaluate_slice(spec, params, x[val_idx], labels[val_idx],
                                              target[val_idx], config.batch_size)
                rows.append([epoch, "val", vloss, vacc, time.time() - t0])
                writer.writerow(rows[-1])
            fh.flush()
            log(f"epoch {epoch}: " + ", ".join(
                f"{r[1]} loss {r[2]:.4f} acc {r[3]:.4f}" for r in rows[-1 - bool(n_val):]))
            if (epoch + 1) % config.checkpoint_every == 0 or epoch == config.epochs - 1:
                _save(os.path.join(out_dir, f"epoch_{epoch:03d}.ckpt"),
                      spec, params, state, epoch + 1, config)
        _save(os.path.join(out_dir, "final.ckpt"), spec, params, state,
              config.epochs, config)
    return rows


def _save(path, spec, params, state, next_epoch, config):
    extra = {f"adam_m.{n}": m for n, m in state.m.items()}
    extra.update({f"adam_v.{n}": v for n, v in state.v.items()})
    extra["adam_step"] = np.array([state.step], dtype=np.float32)
    extra["epoch"] = np.array([next_epoch], dtype=np.float32)
    network.save_checkpoint(path, spec, params, preset_name=config.preset, extra=extra)
