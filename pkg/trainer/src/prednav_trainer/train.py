"""Training loop, fine-tuning, and checkpoints."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import DECODER_FILTERS, ENCODER_FILTERS
from .augment import augment_rotate
from .loss import class_balanced_loss
from .model import MapExpansionNet, one_hot_batch


class DivergenceDetectedError(RuntimeError):
    """Training loss became non-finite."""


@dataclass
class TrainConfig:
    occupied_weight: float = 5.0
    learning_rate: float = 2e-4
    epochs: int = 100
    batch_size: int = 10
    augment: bool = True
    seed: int = 0
    # explicit per-class weights take precedence over occupied_weight
    class_weights: tuple = field(default=None)
    # weight by effective number of samples instead of the flat scheme
    effective_number_beta: float | None = None

    def weights(self, dataset=None):
        if self.class_weights is not None:
            return self.class_weights
        if self.effective_number_beta is not None:
            if dataset is None:
                raise ValueError("effective-number weighting needs the dataset")
            from .loss import effective_number_weights

            targets = np.stack([s.target for s in dataset])
            return effective_number_weights(targets, self.effective_number_beta)
        return (1.0, self.occupied_weight, 1.0)


def build_model(encoder_filters=ENCODER_FILTERS, decoder_filters=DECODER_FILTERS, seed=0):
    torch.manual_seed(seed)
    return MapExpansionNet(encoder_filters, decoder_filters)


def checkpoint_from_model(model: MapExpansionNet, loss_history=()):
    return {
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "encoder_filters": tuple(model.encoder_filters),
        "decoder_filters": tuple(model.decoder_filters),
        "loss_history": list(loss_history),
    }


def model_from_checkpoint(ckpt) -> MapExpansionNet:
    model = MapExpansionNet(ckpt["encoder_filters"], ckpt["decoder_filters"])
    model.load_state_dict(ckpt["state_dict"])
    return model


def _epoch_batches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        idx = order[i : i + batch_size]
        if len(idx) == 1:
            idx = np.concatenate([idx, idx])  # batch-norm needs >1 value/channel
        yield idx


def _run_training(model, dataset, cfg: TrainConfig, log=None):
    torch.manual_seed(cfg.seed + 1)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    weights = cfg.weights(dataset)
    inputs = np.stack([s.input for s in dataset])
    targets = np.stack([s.target for s in dataset])
    history = []
    model.train()
    for epoch in range(cfg.epochs):
        losses = []
        for idx in _epoch_batches(len(dataset), cfg.batch_size, rng):
            if cfg.augment:
                batch = [
                    augment_rotate(dataset[i], float(rng.uniform(0.0, 2.0 * np.pi)))
                    for i in idx
                ]
                bi = np.stack([s.input for s in batch])
                bt = np.stack([s.target for s in batch])
            else:
                bi, bt = inputs[idx], targets[idx]
            x = one_hot_batch(bi)
            y = torch.as_tensor(bt, dtype=torch.long)
            opt.zero_grad()
            scores = model(x)
            loss = class_balanced_loss(scores, y, weights)
            if not torch.isfinite(loss):
                raise DivergenceDetectedError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        mean_loss = float(np.mean(losses))
        history.append(mean_loss)
        if log is not None:
            log(epoch, mean_loss)
    model.eval()
    return history


def train(dataset, cfg: TrainConfig, encoder_filters=ENCODER_FILTERS,
          decoder_filters=DECODER_FILTERS, log=None):
    """Train from scratch; returns a checkpoint dict."""
    if not dataset:
        raise ValueError("empty dataset")
    model = build_model(encoder_filters, decoder_filters, seed=cfg.seed)
    history = _run_training(model, dataset, cfg, log=log) if cfg.epochs > 0 else []
    return checkpoint_from_model(model, history)


def fine_tune(checkpoint, dataset, cfg: TrainConfig, log=None):
    """Continue training from a checkpoint; returns a new checkpoint."""
    if not dataset:
        raise ValueError("empty dataset")
    model = model_from_checkpoint(checkpoint)
    history = list(checkpoint.get("loss_history", []))
    if cfg.epochs > 0:
        history += _run_training(model, dataset, cfg, log=log)
    return checkpoint_from_model(model, history)


def pixel_accuracy(checkpoint, dataset) -> float:
    model = model_from_checkpoint(checkpoint)
    model.eval()
    correct = 0
    total = 0
    with torch.no_grad():
        for i in range(0, len(dataset), 10):
            batch = dataset[i : i + 10]
            x = one_hot_batch(np.stack([s.input for s in batch]))
            y = np.stack([s.target for s in batch])
            pred = model(x).argmax(dim=1).numpy()
            correct += int((pred == y).sum())
            total += y.size
    return correct / total
