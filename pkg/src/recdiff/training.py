"""The four training losses, their weighted multi-task combination, and the
optimizer loop with scheduled prototype refits, early stopping, and
checkpointing."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import ConfigError, ExperimentConfig
from .data import InteractionDataset, load_prompt_records
from .diffusion import diffusion_loss, make_schedule, sample_augmentation
from .embeddings import (SemanticMatrix, load_semantic_matrix, pseudo_semantic_matrix,
                         stable_seed)
from .intent import IntentPrototypes, assign_intent, kmeans_fit, segment_prefixes
from .model import RecDiffModel, pad_batch, save_checkpoint


@dataclass
class LossWeights:
    lambda_rec: float = 1.0
    lambda_diff: float = 1.0
    lambda_cl: float = 0.1
    lambda_align: float = 0.1

    def __post_init__(self):
        if self.lambda_rec <= 0:
            raise ConfigError(f"lambda_rec must be > 0, got {self.lambda_rec}")
        for name in ("lambda_diff", "lambda_cl", "lambda_align"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")


def rec_loss(h: torch.Tensor, targets: torch.Tensor, scoring_table: torch.Tensor) -> torch.Tensor:
    """Mean full-vocabulary cross entropy of the next-item targets."""
    num_items = scoring_table.shape[0]
    if targets.numel() == 0:
        raise ValueError("rec_loss needs a non-empty batch")
    if targets.min().item() < 0 or targets.max().item() >= num_items:
        raise ValueError(f"targets must be real item indices in [0, {num_items}); "
                         "padding targets must be masked by the caller")
    logits = h @ scoring_table.T
    return F.cross_entropy(logits, targets)


def infonce_loss(h_orig: torch.Tensor, h_aug: torch.Tensor,
                 temperature: float) -> torch.Tensor:
    """Symmetric in-batch InfoNCE over temperature-scaled cosine similarities;
    row i of each view is the positive for row i of the other."""
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    if h_orig.shape != h_aug.shape or h_orig.ndim != 2:
        raise ValueError(f"views must be equal-shaped (B, d) batches, got "
                         f"{tuple(h_orig.shape)} vs {tuple(h_aug.shape)}")
    bsz = h_orig.shape[0]
    if bsz < 2:
        raise ValueError("InfoNCE needs a batch of at least 2 (no negatives otherwise)")
    a = F.normalize(h_orig, dim=-1)
    b = F.normalize(h_aug, dim=-1)
    sims = a @ b.T / temperature
    labels = torch.arange(bsz, device=sims.device)
    return 0.5 * (F.cross_entropy(sims, labels) + F.cross_entropy(sims.T, labels))


def align_loss(e_id: torch.Tensor, e_sem_adapted: torch.Tensor) -> torch.Tensor:
    """Mean (1 - cosine similarity) between paired embedding rows."""
    if e_id.shape != e_sem_adapted.shape:
        raise ValueError(f"alignment inputs must share a shape, got "
                         f"{tuple(e_id.shape)} vs {tuple(e_sem_adapted.shape)}")
    na = e_id.norm(dim=-1)
    nb = e_sem_adapted.norm(dim=-1)
    if (na == 0).any() or (nb == 0).any():
        raise ValueError("alignment loss is undefined for zero vectors")
    cos = (e_id * e_sem_adapted).sum(dim=-1) / (na * nb)
    return (1.0 - cos).mean()


def total_loss(components: dict[str, torch.Tensor], weights: LossWeights) -> torch.Tensor:
    """Weighted sum of the provided loss components (keys: rec, diff, cl, align)."""
    lam = {"rec": weights.lambda_rec, "diff": weights.lambda_diff,
           "cl": weights.lambda_cl, "align": weights.lambda_align}
    unknown = set(components) - set(lam)
    if unknown:
        raise ValueError(f"unknown loss components: {sorted(unknown)}")
    total = None
    for name, value in components.items():
        if not torch.isfinite(value).all():
            raise ValueError(f"non-finite {name} loss")
        term = lam[name] * value
        total = term if total is None else total + term
    if total is None:
        raise ValueError("total_loss needs at least one component")
    return total


def resolve_semantic_matrix(cfg: ExperimentConfig, ds: InteractionDataset) -> SemanticMatrix:
    """Load the configured semantic matrix file, or pseudo-embed prompts; with
    neither configured, pseudo-embed the raw item identifiers."""
    if cfg.data.semantic_path:
        return load_semantic_matrix(cfg.data.semantic_path, expected_items=ds.num_items)
    if cfg.data.prompts_path:
        records = load_prompt_records(cfg.data.prompts_path)
        if len(records) != ds.num_items:
            raise ValueError(f"prompt file has {len(records)} records, expected {ds.num_items}")
        prompts = [r.prompt for r in records]
    else:
        prompts = list(ds.item_vocab)
    return pseudo_semantic_matrix(prompts, cfg.semantic.d_prime, cfg.seeds.semantic)


@dataclass
class FitResult:
    model: RecDiffModel
    prototypes: IntentPrototypes | None
    history: list[dict]
    best_epoch: int
    best_val_ndcg10: float
    refit_steps: list[int] = field(default_factory=list)
    checkpoint_path: str = ""
    log_path: str = ""


def _training_pairs(ds: InteractionDataset) -> list[tuple[int, int]]:
    """(user, boundary) pairs: the prefix train[:boundary] predicts train[boundary]."""
    pairs = []
    for u in range(ds.num_users):
        train_len = len(ds.train_prefix(u))
        for boundary in range(1, train_len):
            pairs.append((u, boundary))
    return pairs


def _encode_prefixes(model: RecDiffModel, ds: InteractionDataset,
                     refs, batch_size: int = 512) -> np.ndarray:
    """Eval-mode encodings of the given prefix references (no grad)."""
    was_training = model.training
    model.eval()
    outs = []
    with torch.no_grad():
        fused = model.fused_item_embeddings()
        for start in range(0, len(refs), batch_size):
            chunk = refs[start:start + batch_size]
            seqs = [ds.train_prefix(r.user)[:r.length] for r in chunk]
            indices, lengths = pad_batch(seqs, ds.padding_index)
            _, h = model.encode(indices, lengths, fused=fused)
            outs.append(h.detach().cpu().numpy().astype(np.float64))
    if was_training:
        model.train()
    return np.concatenate(outs, axis=0)


def _refit_prototypes(model: RecDiffModel, ds: InteractionDataset, cfg: ExperimentConfig,
                      refit_count: int, step: int) -> IntentPrototypes:
    refs = segment_prefixes(ds, cfg.intent.min_prefix)
    if not refs:
        raise RuntimeError(f"no training prefixes of length >= {cfg.intent.min_prefix}; "
                           "cannot fit intent prototypes")
    if len(refs) > cfg.intent.max_fit_points:
        rng = np.random.default_rng(stable_seed(cfg.seeds.clustering, "sample", refit_count))
        chosen = np.sort(rng.choice(len(refs), size=cfg.intent.max_fit_points, replace=False))
        refs = [refs[i] for i in chosen]
    points = _encode_prefixes(model, ds, refs)
    k_eff = min(cfg.intent.k, points.shape[0])  # tiny datasets: fit what is supportable
    return kmeans_fit(points, k_eff, max_iters=cfg.intent.kmeans_iters,
                      seed=stable_seed(cfg.seeds.clustering, refit_count) % (2 ** 32),
                      fit_step=step)


def _validation_metrics(model: RecDiffModel, ds: InteractionDataset,
                        batch_size: int = 512) -> tuple[float, float]:
    """HR@10 / NDCG@10 of the validation item ranked from the training prefix."""
    from .evaluation import hr_at_k, ndcg_at_k, ranks_from_scores

    was_training = model.training
    model.eval()
    ranks = []
    with torch.no_grad():
        fused = model.fused_item_embeddings()
        table = model.scoring_table(fused)
        users = list(range(ds.num_users))
        for start in range(0, len(users), batch_size):
            chunk = users[start:start + batch_size]
            seqs = [ds.train_prefix(u) for u in chunk]
            targets = [ds.valid_item(u) for u in chunk]
            indices, lengths = pad_batch(seqs, ds.padding_index)
            _, h = model.encode(indices, lengths, fused=fused)
            scores = h @ table.T
            ranks.extend(ranks_from_scores(scores.cpu().numpy(), targets))
    if was_training:
        model.train()
    return hr_at_k(ranks, 10), ndcg_at_k(ranks, 10)


def fit(ds: InteractionDataset, cfg: ExperimentConfig,
        semantic: SemanticMatrix | None = None,
        out_dir: str | Path | None = None) -> FitResult:
    """Train on the dataset's training prefixes under the weighted four-term
    objective; returns the best-validation model.

    Per optimizer step: prototypes are refit when `step % clustering_interval
    == 0` (only if the diffusion or contrastive term is active), a fresh
    diffusion augmentation is sampled per sequence for the contrastive term,
    and one Adam update is applied. Per epoch: validation NDCG@10 drives early
    stopping. A non-finite total loss aborts with the offending step.
    """
    torch.manual_seed(stable_seed(cfg.seeds.init, "torch-global") % (2 ** 63))
    if semantic is None:
        semantic = resolve_semantic_matrix(cfg, ds)
    model = RecDiffModel(ds.num_items, cfg, semantic, max_len=ds.max_len + 1)
    model.reset_parameters(cfg.seeds.init)
    model.train()
    dtype = torch.float64 if cfg.model.dtype == "float64" else torch.float32

    weights = LossWeights(cfg.loss.lambda_rec, cfg.loss.lambda_diff,
                          cfg.loss.lambda_cl, cfg.loss.lambda_align)
    need_intent = weights.lambda_diff > 0 or weights.lambda_cl > 0
    schedule = make_schedule(cfg.diffusion.steps, cfg.diffusion.beta_start,
                             cfg.diffusion.beta_end)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.train.lr)
    data_rng = np.random.default_rng(stable_seed(cfg.seeds.data, "shuffle"))
    noise_gen = torch.Generator().manual_seed(stable_seed(cfg.seeds.noise, "noise") % (2 ** 63))

    pairs = _training_pairs(ds)
    if not pairs:
        raise RuntimeError("no training pairs: every user needs a training prefix of length >= 2")

    log_path = None
    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.jsonl"
        log_fh = open(log_path, "w", encoding="utf-8")

    prototypes: IntentPrototypes | None = None
    refit_steps: list[int] = []
    refit_count = 0
    step = 0
    history: list[dict] = []
    best_metric = float("-inf")
    best_epoch = -1
    best_state = None
    best_prototypes = None
    stale_epochs = 0

    try:
        for epoch in range(1, cfg.train.epochs + 1):
            order = data_rng.permutation(len(pairs))
            sums = {"rec": 0.0, "diff": 0.0, "cl": 0.0, "align": 0.0, "total": 0.0}
            batches = 0
            for start in range(0, len(order), cfg.train.batch_size):
                chosen = order[start:start + cfg.train.batch_size]
                if len(chosen) < 2:
                    continue  # a single leftover row has no in-batch negatives
                if need_intent and step % cfg.intent.clustering_interval == 0:
                    prototypes = _refit_prototypes(model, ds, cfg, refit_count, step)
                    refit_steps.append(step)
                    refit_count += 1

                seqs, targets = [], []
                for pair_idx in chosen:
                    u, boundary = pairs[pair_idx]
                    train = ds.train_prefix(u)
                    seqs.append(train[:boundary])
                    targets.append(train[boundary])
                indices, lengths = pad_batch(seqs, ds.padding_index)
                target_tensor = torch.tensor(targets, dtype=torch.long)

                adapted = model.adapter(model.semantic)
                fused = model.fusion(model.collaborative.weight, adapted) * model.pad_mask[:, None]
                _, h = model.encode(indices, lengths, fused=fused)

                components = {"rec": rec_loss(h, target_tensor, model.scoring_table(fused))}
                if need_intent:
                    _, cents = assign_intent(h.detach().cpu().numpy(), prototypes)
                    signal = torch.from_numpy(cents).to(dtype)
                    if weights.lambda_diff > 0:
                        components["diff"] = diffusion_loss(h.detach(), signal, model.denoiser,
                                                            schedule, generator=noise_gen)
                    if weights.lambda_cl > 0:
                        with torch.no_grad():
                            x_t = torch.randn(h.shape, dtype=dtype, generator=noise_gen)
                            aug = sample_augmentation(x_t, signal, model.denoiser, schedule,
                                                      generator=noise_gen)
                        components["cl"] = infonce_loss(h, aug, cfg.loss.temperature)
                if weights.lambda_align > 0:
                    flat = indices[indices != ds.padding_index]
                    components["align"] = align_loss(model.collaborative.weight[flat],
                                                     adapted[flat])

                try:
                    loss = total_loss(components, weights)
                except ValueError as exc:
                    raise RuntimeError(f"{exc} at step {step}") from None
                if not torch.isfinite(loss):
                    raise RuntimeError(f"non-finite total loss at step {step}")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                step += 1
                batches += 1
                for name in ("rec", "diff", "cl", "align"):
                    if name in components:
                        sums[name] += float(components[name].detach())
                sums["total"] += float(loss.detach())

            val_hr10, val_ndcg10 = _validation_metrics(model, ds)
            denom = max(batches, 1)
            record = {
                "epoch": epoch,
                "step": step,
                "losses": {name: sums[name] / denom
                           for name in ("rec", "diff", "cl", "align", "total")},
                "val_hr10": val_hr10,
                "val_ndcg10": val_ndcg10,
            }
            history.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record, sort_keys=True))
                log_fh.write("\n")
                log_fh.flush()

            if val_ndcg10 > best_metric:
                best_metric = val_ndcg10
                best_epoch = epoch
                best_state = copy.deepcopy(model.state_dict())
                best_prototypes = copy.deepcopy(prototypes)
                stale_epochs = 0
            else:
                stale_epochs += 1
                if stale_epochs >= cfg.train.patience:
                    break
    finally:
        if log_fh is not None:
            log_fh.close()

    if best_state is not None:
        model.load_state_dict(best_state)
        prototypes = best_prototypes
    model.eval()

    result = FitResult(model=model, prototypes=prototypes, history=history,
                       best_epoch=best_epoch, best_val_ndcg10=best_metric,
                       refit_steps=refit_steps,
                       log_path=str(log_path) if log_path else "")
    if out_dir is not None:
        ckpt_path = Path(out_dir) / "checkpoint.pt"
        save_checkpoint(ckpt_path, model, prototypes,
                        extra={"best_epoch": best_epoch, "best_val_ndcg10": best_metric,
                               "steps": step})
        result.checkpoint_path = str(ckpt_path)
    return result
