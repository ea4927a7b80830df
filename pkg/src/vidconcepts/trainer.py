"""Overall objective, optimization loop, metrics log and checkpoints."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
import torch

from .bottleneck import diversity_loss, fidelity_loss
from .checkpoint import save_checkpoint
from .conceptspace import alignment_loss, soft_codes_for
from .errors import InvalidInputError, TrainingDivergenceError
from .localcontrast import LocalContrastConfig, local_loss_total, valid_masks
from .model import build_model
from .videokit import triplet_batch

log = logging.getLogger(__name__)

TERMS = ("l_aln", "l_loc", "l_fid", "l_div")
METRICS_NAME = "metrics.jsonl"
LAST_CHECKPOINT = "checkpoint.npz"


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.01
    warmup_epochs: int = 5

    @classmethod
    def from_config(cls, tr):
        return cls(tr.alpha, tr.beta, tr.gamma, tr.warmup_epochs)

    def effective(self, epoch):
        """Per-term multipliers at ``epoch`` (the local term is off during warmup)."""
        alpha = self.alpha if epoch >= self.warmup_epochs else 0.0
        return {"l_aln": 1.0, "l_loc": alpha, "l_fid": self.beta, "l_div": self.gamma}


@dataclass
class LossBundle:
    l_aln: float
    l_loc: float
    l_fid: float
    l_div: float
    total: float
    epoch: int

    def as_dict(self):
        return asdict(self)


def total_loss(components, weights: LossWeights, epoch):
    """Weighted sum of the four terms. Zero-weighted terms are left out of the
    sum entirely, so they contribute no gradient at all."""
    factors = weights.effective(epoch)
    for name in TERMS:
        value = components[name]
        if not math.isfinite(float(value.detach() if torch.is_tensor(value) else value)):
            raise TrainingDivergenceError(
                f"non-finite {name} at epoch {epoch}",
                {k: float(torch.as_tensor(components[k]).detach()) for k in TERMS})
    total = 0.0
    for name in TERMS:
        if factors[name] != 0.0:
            total = total + factors[name] * components[name]
    if not torch.is_tensor(total):
        total = torch.as_tensor(float(total))
    return total


def compute_losses(model, out, cfg, frozen=None):
    """Evaluate the four unweighted loss terms on a forward pass.

    Everything the objective treats as constant (soft codes, valid-concept
    masks, reconstruction targets) is returned in ``frozen``; passing it back
    reuses those constants, which is what finite-difference checks need.
    """
    k_s = model.k_static
    q = out.codes
    bad = [k for k in q if not bool(torch.isfinite(q[k]).all())]
    if bad:
        raise TrainingDivergenceError(f"non-finite codes for {', '.join(bad)}",
                                      {f"finite_{k}": k not in bad for k in q})
    if frozen is None:
        frozen = {
            "soft": soft_codes_for(q["s"], q["d"], q["v"], k_s, cfg.conceptspace.alignment()),
            "targets": {k: out.vecs[k].detach().clone() for k in out.vecs},
        }
        if out.local:
            frozen["masks"] = valid_masks(q["s"], q["d"], q["v"], k_s, cfg.localcontrast.K_top)
    comps = {
        "l_aln": alignment_loss(q["s"], q["d"], q["v"], frozen["soft"], k_s,
                                cfg.conceptspace.alignment()),
        "l_fid": fidelity_loss(q, frozen["targets"], model.heads),
        "l_div": diversity_loss(q["s"], q["d"], q["v"]),
    }
    if out.local:
        lc = LocalContrastConfig(cfg.localcontrast.K_top, cfg.localcontrast.margin)
        comps["l_loc"] = local_loss_total(out.local["s"], out.local["v"], out.local["d"],
                                          q["s"], q["v"], q["d"], k_s, lc, frozen["masks"])
    else:
        comps["l_loc"] = q["v"].new_zeros(())
    return comps, frozen


def objective(model, batch, cfg, epoch, frozen=None):
    """Forward pass plus the overall loss: (total, components, frozen)."""
    v, s, d = batch
    weights = LossWeights.from_config(cfg.trainer)
    out = model(v, s, d, with_local=True)
    comps, frozen = compute_losses(model, out, cfg, frozen)
    return total_loss(comps, weights, epoch), comps, frozen


def make_optimizer(model, tr):
    protos = [p for n, p in model.named_parameters() if n.startswith("prototypes.")]
    rest = [p for n, p in model.named_parameters() if not n.startswith("prototypes.")]
    return torch.optim.SGD([
        {"params": rest, "weight_decay": tr.weight_decay},
        {"params": protos, "weight_decay": 0.0},
    ], lr=tr.lr, momentum=tr.momentum)


def train_step(model, optimizer, batch, cfg, epoch):
    model.train()
    optimizer.zero_grad(set_to_none=True)
    total, comps, _ = objective(model, batch, cfg, epoch)
    total.backward()
    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.trainer.grad_clip)
    optimizer.step()
    return LossBundle(*(float(comps[k].detach()) for k in TERMS), float(total.detach()), epoch)


def set_deterministic(flag=True):
    if flag:
        torch.set_num_threads(1)
    torch.use_deterministic_algorithms(flag)


@dataclass
class TrainResult:
    model: torch.nn.Module
    checkpoint: Path
    metrics: Path
    history: list = field(default_factory=list)


def _epoch_order(n, seed, epoch):
    return np.random.default_rng([seed, epoch, 7]).permutation(n)


def train(dataset, cfg, out_dir, seed=None, deterministic=False, model=None, on_epoch=None):
    """SGD over ``dataset`` (a ``ClipDataset``) writing metrics and checkpoints to
    ``out_dir``. Returns the trained model and per-epoch mean ``LossBundle``s.

    ``on_epoch(epoch, model, bundle)`` is called after each epoch's checkpoint.
    """
    if len(dataset) == 0:
        raise InvalidInputError("empty dataset")
    seed = cfg.seed if seed is None else seed
    if deterministic:
        set_deterministic(True)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tr = cfg.trainer
    if model is None:
        model = build_model(cfg, seed)
    optimizer = make_optimizer(model, tr)
    aug = cfg.videokit.augment()
    dtype = next(model.parameters()).dtype
    metrics_path = out / METRICS_NAME
    ckpt_path = out / LAST_CHECKPOINT
    history, step = [], 0
    with open(metrics_path, "w") as fh:
        for epoch in range(tr.epochs):
            order = _epoch_order(len(dataset), seed, epoch)
            bundles = []
            for start in range(0, len(order), tr.batch_size):
                idx = order[start:start + tr.batch_size]
                batch = tuple(x.to(dtype) for x in
                              triplet_batch(dataset.clips, idx, seed, epoch, aug))
                try:
                    bundle = train_step(model, optimizer, batch, cfg, epoch)
                except TrainingDivergenceError as exc:
                    exc.diagnostics.update(epoch=epoch, step=step,
                                           last_good_checkpoint=str(ckpt_path))
                    (out / "divergence.json").write_text(json.dumps(exc.diagnostics, indent=2))
                    raise
                bundles.append(bundle)
                fh.write(json.dumps({"kind": "step", "step": step, **bundle.as_dict(),
                                     "lr": tr.lr}) + "\n")
                step += 1
            mean = LossBundle(*(float(np.mean([getattr(b, k) for b in bundles]))
                                for k in TERMS + ("total",)), epoch)
            history.append(mean)
            fh.write(json.dumps({"kind": "epoch", "step": step, **mean.as_dict(),
                                 "lr": tr.lr}) + "\n")
            fh.flush()
            log.info("epoch %d total %.4f aln %.4f loc %.4f fid %.4f div %.4f", epoch,
                     mean.total, mean.l_aln, mean.l_loc, mean.l_fid, mean.l_div)
            save_checkpoint(ckpt_path, model, cfg, optimizer, epoch + 1, step)
            if (epoch + 1) % tr.checkpoint_every == 0 or epoch + 1 == tr.epochs:
                save_checkpoint(out / f"epoch_{epoch + 1:03d}.npz", model, cfg, optimizer,
                                epoch + 1, step)
            if on_epoch is not None:
                on_epoch(epoch, model, mean)
    return TrainResult(model, ckpt_path, metrics_path, history)
