"""Latent neural process meta-model for topology-conditioned power flow.

A deterministic encoder summarises a topology's context pairs into ``r_C``;
a latent encoder gives a diagonal Gaussian over the global latent ``z``; the
decoder maps ``(xi, r_C, z)`` to a Gaussian over the voltage magnitudes.
The topology enters only through its context set and its scaler.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import neural as nn
from .neural import MLP, OptimizerState, ParameterSet, Tensor, adam_step
from .scenario import Dataset, Episode, EpisodeBatch, Scaler, make_episodes

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass
class NPConfig:
    x_dim: int
    y_dim: int
    r_dim: int = 32
    z_dim: int = 32
    hidden: int = 32
    layers: int = 4
    n_context: int = 30
    n_target: int = 30
    batch: int = 4
    lr: float = 3e-4
    epochs: int = 1000
    # optimizer steps (episode batches) per epoch
    batches_per_epoch: int = 50
    activation: str = "relu"
    sigma_floor: float = 1e-3

    def __post_init__(self):
        for name in ("x_dim", "y_dim", "r_dim", "z_dim", "hidden", "layers", "n_context",
                     "n_target", "batch"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_context > self.n_target:
            raise ValueError("n_context must not exceed n_target")


@dataclass
class LatentState:
    mu: np.ndarray
    sigma: np.ndarray


@dataclass
class ElboTerms:
    loss: Tensor
    reconstruction: float
    kl: np.ndarray  # per episode


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    kl: list[float] = field(default_factory=list)
    min_kl: float = math.inf
    seconds: float = 0.0


class NPModel:
    def __init__(self, config: NPConfig, seed: int = 0,
                 scalers: Optional[dict[int, Scaler]] = None):
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        c = config
        pair = c.x_dim + c.y_dim
        hid = [c.hidden] * (c.layers - 1)
        act = c.activation
        self.det_encoder = MLP([pair, *hid, c.r_dim], rng, act, "det")
        self.latent_encoder = MLP([pair, *hid, c.hidden], rng, act, "lat")
        self.latent_head = MLP([c.hidden, 2 * c.z_dim], rng, act, "lat_head")
        self.decoder = MLP([c.x_dim + c.r_dim + c.z_dim, *hid, 2 * c.y_dim], rng, act, "dec")
        self.params = ParameterSet(
            self.det_encoder.parameters() + self.latent_encoder.parameters()
            + self.latent_head.parameters() + self.decoder.parameters())
        self.scalers: dict[int, Scaler] = dict(scalers or {})
        self.optimizer = OptimizerState(lr=c.lr)

    # graph builders on (batch, points, features) arrays

    def _positive(self, raw: Tensor) -> Tensor:
        return nn.add(nn.softplus(raw), self.config.sigma_floor)

    def _det(self, pairs) -> Tensor:
        return nn.mean_over_set(self.det_encoder(pairs))

    def _latent(self, pairs) -> tuple[Tensor, Tensor]:
        s = nn.mean_over_set(self.latent_encoder(pairs))
        mu, raw = nn.split(self.latent_head(s), [self.config.z_dim, self.config.z_dim])
        return mu, self._positive(raw)

    def _decode(self, xt, r, z) -> tuple[Tensor, Tensor]:
        n = np.shape(xt.value if isinstance(xt, Tensor) else xt)[-2]
        h = nn.concat([xt, nn.expand(r, n), nn.expand(z, n)])
        mu, raw = nn.split(self.decoder(h), [self.config.y_dim, self.config.y_dim])
        return mu, self._positive(raw)

    def parameters(self) -> list[Tensor]:
        return self.params.tensors


# --------------------------------------------------------------------- path operations

def _pairs(xi, v) -> np.ndarray:
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    if len(xi) == 0:
        raise ValueError("context set is empty")
    if len(xi) != len(v):
        raise ValueError("context inputs and outputs differ in length")
    return np.concatenate([xi, v], axis=-1)


def encode_deterministic(model: NPModel, xi_context, v_context) -> np.ndarray:
    """Aggregated deterministic representation ``r_C`` (normalised inputs)."""
    return model._det(_pairs(xi_context, v_context)).value


def encode_latent(model: NPModel, xi, v) -> LatentState:
    mu, sigma = model._latent(_pairs(xi, v))
    return LatentState(mu.value, sigma.value)


def sample_z(latent: LatentState, rng: np.random.Generator) -> np.ndarray:
    """Reparameterised draw ``mu + sigma * eps``."""
    eps = rng.standard_normal(np.shape(latent.mu))
    return latent.mu + latent.sigma * eps


def decode(model: NPModel, xi_target, r, z) -> tuple[np.ndarray, np.ndarray]:
    xi_target = np.atleast_2d(np.asarray(xi_target, dtype=float))
    if xi_target.shape[-1] != model.config.x_dim:
        raise ValueError(f"expected {model.config.x_dim} input features")
    mu, sigma = model._decode(Tensor(xi_target), Tensor(r), Tensor(z))
    return mu.value, sigma.value


def elbo_terms(model: NPModel, batch: EpisodeBatch | Episode, rng: Optional[np.random.Generator] = None,
               eps: Optional[np.ndarray] = None) -> ElboTerms:
    """Negative ELBO averaged over the episodes of a batch.

    Per episode: minus the Gaussian log-likelihood of the targets summed over
    points and buses, plus KL(q(z|targets) || q(z|context)). ``z`` is one
    reparameterised draw from the target-conditioned posterior; pass ``eps``
    to fix it.
    """
    if isinstance(batch, Episode):
        batch = batch.as_batch()
    b = len(batch)
    ctx = np.concatenate([batch.xi_context, batch.v_context], axis=-1)
    tgt = np.concatenate([batch.xi_target, batch.v_target], axis=-1)
    r_c = model._det(ctx)
    mu_c, sig_c = model._latent(ctx)
    if ctx.shape == tgt.shape and np.array_equal(ctx, tgt):
        # context is the whole target set: both posteriors are the same node
        mu_t, sig_t = mu_c, sig_c
    else:
        mu_t, sig_t = model._latent(tgt)
    if eps is None:
        rng = rng if rng is not None else np.random.default_rng()
        eps = rng.standard_normal(mu_t.shape)
    z = nn.add(mu_t, nn.mul(sig_t, eps))
    mu_y, sig_y = model._decode(Tensor(batch.xi_target), r_c, z)
    log_lik = nn.total(nn.gaussian_log_pdf(batch.v_target, mu_y, sig_y))
    kl_el = nn.kl_diag_gaussian(mu_t, sig_t, mu_c, sig_c)
    kl = nn.total(kl_el)
    loss = nn.scale(nn.sub(kl, log_lik), 1.0 / b)
    return ElboTerms(loss, -log_lik.item() / b, kl_el.value.sum(axis=-1))


def elbo_loss(model: NPModel, batch, rng=None, eps=None) -> Tensor:
    return elbo_terms(model, batch, rng, eps).loss


# --------------------------------------------------------------------- training

def train(model: NPModel, dataset: Dataset, config: Optional[NPConfig] = None, seed: int = 0,
          topology_ids: Optional[Sequence[int]] = None,
          callback: Optional[Callable[[int, TrainHistory], None]] = None) -> tuple[NPModel, TrainHistory]:
    """Meta-train on episodes drawn from the given topologies.

    Raises :class:`TrainingError` on a non-finite loss or gradient, or on a
    negative KL term.
    """
    cfg = config or model.config
    ids = list(topology_ids) if topology_ids is not None else sorted(dataset.topologies)
    for tid in ids:
        model.scalers[tid] = dataset.topologies[tid].scaler
    history = TrainHistory()
    if cfg.epochs <= 0:
        return model, history
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    stream = make_episodes(dataset, cfg.n_context, cfg.n_target, cfg.batch,
                           np.random.SeedSequence([seed, 2]), ids)
    model.optimizer.lr = cfg.lr
    flat = [model.params.flat]
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        total_loss = 0.0
        total_kl = 0.0
        for _ in range(cfg.batches_per_epoch):
            terms = elbo_terms(model, next(stream), rng)
            value = terms.loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}")
            kl_min = float(terms.kl.min())
            if kl_min < -1e-9:
                raise TrainingError(f"negative KL {kl_min} at epoch {epoch}")
            history.min_kl = min(history.min_kl, kl_min)
            model.params.zero_grad()
            terms.loss.backward()
            grad = model.params.flat_grad()
            adam_step(flat, [grad], model.optimizer)
            total_loss += value
            total_kl += float(terms.kl.mean())
        if not (np.all(np.isfinite(model.params.flat)) and np.all(np.isfinite(grad))):
            raise TrainingError(f"non-finite parameters or gradients after epoch {epoch}")
        history.loss.append(total_loss / cfg.batches_per_epoch)
        history.kl.append(total_kl / cfg.batches_per_epoch)
        if callback is not None:
            callback(epoch, history)
    history.seconds = time.perf_counter() - start
    return model, history


# --------------------------------------------------------------------- prediction

def predict(model: NPModel, topology_id: int, xi_context, v_context, xi_target,
            mode: str = "mean", rng: Optional[np.random.Generator] = None) -> tuple[np.ndarray, np.ndarray]:
    """Predictive mean and standard deviation in per-unit.

    Inputs are raw per-unit values; normalisation uses the scaler of
    ``topology_id``. ``mode="mean"`` decodes at the latent mean; ``"mc:S"``
    mixes ``S`` sampled latents.
    """
    if topology_id not in model.scalers:
        raise KeyError(f"no scaler for topology {topology_id}")
    sc = model.scalers[topology_id]
    xc = sc.transform_xi(np.atleast_2d(xi_context))
    vc = sc.transform_v(np.atleast_2d(v_context))
    xt = sc.transform_xi(np.atleast_2d(xi_target))
    pairs = _pairs(xc, vc)
    r = model._det(pairs).value
    latent = encode_latent(model, xc, vc)
    if mode == "mean":
        mu, sigma = decode(model, xt, r, latent.mu)
    elif mode.startswith("mc:"):
        draws = int(mode[3:])
        if draws < 1:
            raise ValueError("mc mode needs at least one sample")
        rng = rng if rng is not None else np.random.default_rng()
        mus, second = [], []
        for _ in range(draws):
            m, s = decode(model, xt, r, sample_z(latent, rng))
            mus.append(m)
            second.append(s * s + m * m)
        mu = np.mean(mus, axis=0)
        sigma = np.sqrt(np.maximum(np.mean(second, axis=0) - mu * mu, 0.0))
    else:
        raise ValueError(f"unknown prediction mode {mode!r}")
    return sc.inverse_v(mu), sigma * sc.v_std


def sample_context(dataset: Dataset, topology_id: int, n_context: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Draw a context set from the topology's training pool (raw per-unit)."""
    td = dataset.topologies[topology_id]
    rng = np.random.default_rng(seed)
    rows = rng.choice(len(td.xi_train), size=min(n_context, len(td.xi_train)), replace=False)
    return td.xi_train[rows], td.v_train[rows]


# --------------------------------------------------------------------- checkpoints

def save_checkpoint(model: NPModel, path: str | Path, history: Optional[TrainHistory] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    opt = model.optimizer
    doc = {
        "version": CHECKPOINT_VERSION,
        "arch": dataclasses.asdict(model.config),
        "params": {t.name: {"shape": list(t.value.shape), "data": t.value.ravel().tolist()}
                   for t in model.parameters()},
        "optimizer": {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
                      "step": opt.step,
                      "m": [a.tolist() for a in opt.m], "v": [a.tolist() for a in opt.v]},
        "rng_seed": model.seed,
        "scalers": {str(k): s.to_dict() for k, s in model.scalers.items()},
    }
    if history is not None:
        doc["history"] = {"loss": history.loss, "kl": history.kl, "seconds": history.seconds}
    path.write_text(json.dumps(doc))
    return path


def load_checkpoint(path: str | Path) -> NPModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    doc = json.loads(path.read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    model = NPModel(NPConfig(**doc["arch"]), seed=doc.get("rng_seed", 0),
                    scalers={int(k): Scaler.from_dict(v) for k, v in doc["scalers"].items()})
    named = model.params.named()
    for name, rec in doc["params"].items():
        named[name].value[...] = np.asarray(rec["data"], dtype=float).reshape(rec["shape"])
    o = doc["optimizer"]
    model.optimizer = OptimizerState(o["lr"], o["beta1"], o["beta2"], o["eps"], o["step"],
                                     [np.asarray(a) for a in o["m"]], [np.asarray(a) for a in o["v"]])
    return model
