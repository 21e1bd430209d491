"""Approximate maximum-likelihood training.

Each batch runs sequential posterior inference per example, takes one
ascent step on the latent-completed objective (the inferred latents held
constant), and one descent step on the selection head's binary cross-entropy
against multi-hot labels (gold plus the posterior pick). Validation loss is
the same surrogate objective on held-out data under a fixed per-epoch seed;
the best checkpoint is the epoch with the lowest validation loss.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .config import (SEED_SHUFFLE, SEED_TRAIN, SEED_VALID, SpiConfig,
                     derived_rng)
from .errors import ContractError, NumericError
from .fsio import dump_json_line, atomic_write_text
from .inference import (candidate_encodings, langevin_infer_z,
                        select_knowledge, sequential_posterior_infer)
from .model import (INITIALIZER_HEAD, KNOWLEDGE_PRIOR_HEAD, DialogueExample,
                    LatentPair, ModelParams, _sigmoid_and_logs,
                    decode_logprob, encode_context, knowledge_prior_logits,
                    latent_prior_log_density, latent_prior_mean)

log = logging.getLogger(__name__)


def surrogate_objective(params: ModelParams, example: DialogueExample, s: int,
                        z: np.ndarray, prior: str) -> ad.Tensor:
    """Latent-completed objective for one example: latent prior log-density
    plus response log-likelihood, plus the knowledge prior log-probability in
    learnable mode. ``z`` and ``s`` enter as constants."""
    encoded = encode_context(params, example, s)
    mu = latent_prior_mean(params, example, s, encoded=encoded)
    zt = Tensor(np.asarray(z, dtype=np.float64))
    obj = ad.add(latent_prior_log_density(mu, zt),
                 decode_logprob(params, example, s, zt, encoded=encoded))
    if prior == "learnable":
        logits = knowledge_prior_logits(params, example, prior="learnable")
        obj = ad.add(obj, ad.gather_rows(ad.log(ad.softmax(logits)), s))
    elif prior != "uniform":
        raise ContractError(f"unknown prior mode {prior!r}")
    return obj


def _frozen_heads(prior: str) -> tuple[str, ...]:
    if prior == "uniform":
        return INITIALIZER_HEAD + KNOWLEDGE_PRIOR_HEAD
    return INITIALIZER_HEAD


def mle_step(params: ModelParams, batch: list[DialogueExample], config: SpiConfig,
             latents: list[LatentPair] | None = None,
             rngs: list[np.random.Generator] | None = None) -> float:
    """One ascent step on the batch-mean surrogate objective.

    Infers (s, z) per example unless ``latents`` provides them. Returns the
    surrogate loss (negative mean objective). The selection heads never move
    here in uniform mode; the initializer head never moves in either mode.
    """
    if not batch:
        raise ContractError("mle_step needs a non-empty batch")
    if latents is not None and len(latents) != len(batch):
        raise ContractError("latents must align with the batch")
    total = 0.0
    grad_sum: dict[str, np.ndarray] = {}
    frozen = set(_frozen_heads(config.prior))
    for i, example in enumerate(batch):
        if latents is None:
            rng = rngs[i] if rngs is not None else None
            pair = sequential_posterior_infer(params, example, config, rng=rng)
        else:
            pair = latents[i]
        with Tape() as tape:
            obj = surrogate_objective(params, example, pair.s, pair.z, config.prior)
            grads = ad.backward(tape, obj)
        total += float(obj.data)
        for name, grad in grads.items():
            if name in frozen:
                continue
            held = grad_sum.get(name)
            grad_sum[name] = grad.copy() if held is None else held + grad
    if config.lr_model != 0.0:
        inv = 1.0 / len(batch)
        for name, grad in grad_sum.items():
            params.tensors[name].data += config.lr_model * inv * grad
    return -total / len(batch)


def multi_hot_labels(example: DialogueExample, selected: int) -> np.ndarray:
    """Selection labels: gold and the posterior pick (one or two ones)."""
    labels = np.zeros(len(example.candidates))
    labels[selected] = 1.0
    if example.gold_index is not None:
        labels[example.gold_index] = 1.0
    return labels


def head_ce_loss(params: ModelParams, batch: list[DialogueExample],
                 labels: list[np.ndarray], head: str,
                 encodings_batch=None) -> Tensor:
    """Batch-mean binary cross-entropy of one selection head against
    multi-hot labels. The candidate encodings enter as constants, so the
    gradient touches only the head."""
    if not batch:
        raise ContractError("cross-entropy needs a non-empty batch")
    if len(labels) != len(batch):
        raise ContractError("labels must align with the batch")
    w_name, b_name = params.head_names(head)
    loss: Tensor | None = None
    for i, example in enumerate(batch):
        y = labels[i]
        if len(y) != len(example.candidates):
            raise ContractError("label vector length must match the candidate count")
        encs = (encodings_batch[i] if encodings_batch is not None
                else candidate_encodings(params, example))
        for j in range(len(example.candidates)):
            pooled = Tensor(encs[j].pooled.data)  # constant copy
            logit = ad.add(ad.matmul(pooled, params.tensors[w_name]),
                           params.tensors[b_name])
            _, log_sig, log_one_minus = _sigmoid_and_logs(logit)
            term = log_sig if y[j] == 1.0 else log_one_minus
            loss = term if loss is None else ad.add(loss, term)
    return ad.scale(loss, -1.0 / len(batch))


def _head_ce_step(params: ModelParams, batch: list[DialogueExample],
                  labels: list[np.ndarray], lr: float, head: str,
                  encodings_batch=None) -> float:
    """Shared binary-CE descent on one selection head."""
    with Tape() as tape:
        loss = head_ce_loss(params, batch, labels, head, encodings_batch)
        grads = ad.backward(tape, loss)
    if lr != 0.0:
        for name in params.head_names(head):
            params.tensors[name].data -= lr * grads[name]
    return float(loss.data)


def initializer_ce_step(params: ModelParams, batch: list[DialogueExample],
                        labels: list[np.ndarray], lr: float,
                        encodings_batch=None) -> float:
    """Descent on the initializer head (uniform-prior mode); returns the
    batch-mean cross-entropy."""
    return _head_ce_step(params, batch, labels, lr, "initializer", encodings_batch)


def prior_ce_step(params: ModelParams, batch: list[DialogueExample],
                  labels: list[np.ndarray], lr: float,
                  encodings_batch=None) -> float:
    """Same multi-label update applied to the learnable prior head."""
    return _head_ce_step(params, batch, labels, lr, "knowledge_prior", encodings_batch)


def surrogate_value(params: ModelParams, example: DialogueExample, s: int,
                    z: np.ndarray, prior: str) -> float:
    return float(surrogate_objective(params, example, s, z, prior).data)


def validation_loss(params: ModelParams, examples: list[DialogueExample],
                    config: SpiConfig, epoch: int) -> float:
    """Mean surrogate loss on held-out data with the run's own inference
    settings under a fixed per-epoch seed."""
    if not examples:
        raise ContractError("validation set is empty")
    total = 0.0
    for idx, example in enumerate(examples):
        rng = derived_rng(config.seed, SEED_VALID, epoch, idx)
        pair = _infer_with_cache(params, example, config, rng)[0]
        total += surrogate_value(params, example, pair.s, pair.z, config.prior)
    return -total / len(examples)


def _infer_with_cache(params: ModelParams, example: DialogueExample,
                      config: SpiConfig, rng: np.random.Generator):
    """Posterior inference that reuses candidate encodings; returns the pair
    and the encodings for downstream reuse."""
    encodings = candidate_encodings(params, example)
    m = len(example.candidates)
    top_s = min(config.top_s, m) if config.prior == "uniform" else None
    outcome = select_knowledge(params, example, prior=config.prior,
                               mode=config.selection, top_s=top_s,
                               temperature=config.temperature, rng=rng,
                               encodings=encodings)
    trace = langevin_infer_z(params, example, outcome.chosen,
                             steps=config.langevin_steps,
                             step_size=config.step_size, rng=rng,
                             noise=config.langevin_noise,
                             grad_clamp=config.grad_clamp,
                             encoded=encodings[outcome.chosen])
    return LatentPair(s=outcome.chosen, z=trace.final), encodings


@dataclass
class TrainResult:
    params: ModelParams            # final weights
    best_params: ModelParams       # lowest validation loss
    best_epoch: int
    best_validation_loss: float
    records: list[dict]            # one metrics record per epoch
    epoch_seconds: list[float]     # training pass only, wall clock
    batch_losses: list[list[float]]  # surrogate loss per batch, per epoch


def train(train_examples: list[DialogueExample],
          valid_examples: list[DialogueExample], config: SpiConfig,
          log_path=None, quiet: bool = False) -> TrainResult:
    """Full training loop; deterministic given the config seed.

    Writes the metrics log (config line, then one JSON record per epoch) to
    ``log_path`` if given. Wall-clock timings stay out of the log so equal
    seeds produce byte-identical files.
    """
    config.validate()
    if not train_examples:
        raise ContractError("training set is empty")
    from .generation import select_for_generation  # late import, no cycle at call time
    params = ModelParams.init(config.model, seed=config.seed)
    records: list[dict] = []
    epoch_seconds: list[float] = []
    all_batch_losses: list[list[float]] = []
    best_loss = np.inf
    best_epoch = -1
    best_params = params.copy()
    pool = ThreadPoolExecutor(max_workers=config.threads) if config.threads > 1 else None
    try:
        for epoch in range(config.epochs):
            start = time.perf_counter()
            order = derived_rng(config.seed, SEED_SHUFFLE, epoch).permutation(
                len(train_examples))
            batch_losses: list[float] = []
            ce_losses: list[float] = []
            for lo in range(0, len(order), config.batch_size):
                idxs = [int(i) for i in order[lo:lo + config.batch_size]]
                batch = [train_examples[i] for i in idxs]
                rngs = [derived_rng(config.seed, SEED_TRAIN, epoch, i) for i in idxs]

                def infer(pos: int):
                    return _infer_with_cache(params, batch[pos], config, rngs[pos])

                try:
                    if pool is not None:
                        inferred = list(pool.map(infer, range(len(batch))))
                    else:
                        inferred = [infer(pos) for pos in range(len(batch))]
                    latents = [pair for pair, _ in inferred]
                    encodings_batch = [encs for _, encs in inferred]
                    loss = mle_step(params, batch, config, latents=latents)
                    labels = [multi_hot_labels(batch[i], latents[i].s)
                              for i in range(len(batch))]
                    if config.prior == "uniform":
                        ce = initializer_ce_step(params, batch, labels, config.lr_head,
                                                 encodings_batch)
                    else:
                        ce = prior_ce_step(params, batch, labels, config.lr_head,
                                           encodings_batch)
                except NumericError as err:
                    raise NumericError(
                        f"epoch {epoch}, batch {lo // config.batch_size}: {err}") from err
                batch_losses.append(loss)
                ce_losses.append(ce)
            epoch_seconds.append(time.perf_counter() - start)
            all_batch_losses.append(batch_losses)

            val_loss = (validation_loss(params, valid_examples, config, epoch)
                        if valid_examples else float(np.mean(batch_losses)))
            if valid_examples:
                hits = sum(1 for ex in valid_examples
                           if ex.gold_index is not None
                           and select_for_generation(params, ex, prior=config.prior)
                           == ex.gold_index)
                denom = sum(1 for ex in valid_examples if ex.gold_index is not None)
                val_acc = hits / denom if denom else 0.0
            else:
                val_acc = 0.0
            record = {"epoch": epoch,
                      "surrogate_loss": float(np.mean(batch_losses)),
                      "ce_loss": float(np.mean(ce_losses)),
                      "validation_loss": float(val_loss),
                      "selection_accuracy": float(val_acc)}
            records.append(record)
            if not quiet:
                log.info("epoch %d: surrogate %.4f ce %.4f val %.4f acc %.3f (%.1fs)",
                         epoch, record["surrogate_loss"], record["ce_loss"],
                         val_loss, val_acc, epoch_seconds[-1])
            if val_loss < best_loss:
                best_loss = float(val_loss)
                best_epoch = epoch
                best_params = params.copy()
            if log_path is not None:
                lines = [dump_json_line({"config": config.to_dict()})]
                lines += [dump_json_line(r) for r in records]
                atomic_write_text(log_path, "\n".join(lines) + "\n")
    finally:
        if pool is not None:
            pool.shutdown()
    if best_epoch < 0:
        best_params = params.copy()
        best_epoch = 0
        best_loss = float("nan")
    return TrainResult(params=params, best_params=best_params, best_epoch=best_epoch,
                       best_validation_loss=float(best_loss), records=records,
                       epoch_seconds=epoch_seconds, batch_losses=all_batch_losses)
