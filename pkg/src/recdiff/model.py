"""Composite recommender: collaborative + semantic tables, adapter, fusion,
sequence encoder, denoiser, and self-contained checkpoint archives."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import ExperimentConfig, config_from_dict, config_to_dict
from .diffusion import DiffusionDenoiser
from .embeddings import SemanticAdapter, SemanticMatrix, make_collaborative_table, stable_seed
from .encoder import EncoderSettings, SequenceEncoder
from .fusion import WeightedFusion, build_fusion
from .intent import IntentPrototypes

CHECKPOINT_TAG = "recdiff-checkpoint-v1"


class RecDiffModel(nn.Module):
    """num_items real items plus one padding row at index num_items."""

    def __init__(self, num_items: int, cfg: ExperimentConfig, semantic: SemanticMatrix,
                 max_len: int):
        super().__init__()
        if semantic.num_items != num_items:
            raise ValueError(f"semantic matrix covers {semantic.num_items} items, "
                             f"dataset has {num_items}")
        self.num_items = num_items
        self.cfg = cfg
        self.semantic_source = semantic.source_tag
        d = cfg.model.d

        self.collaborative = make_collaborative_table(num_items, d)
        self.register_buffer("semantic", semantic.matrix.clone())
        self.adapter = SemanticAdapter(semantic.d_prime, d, layers=cfg.model.adapter_layers,
                                       activation=cfg.model.adapter_activation)
        self.fusion = build_fusion(cfg.fusion, d)
        self.encoder = SequenceEncoder(EncoderSettings(
            d=d, layers=cfg.model.layers, heads=cfg.model.heads,
            dropout=cfg.model.dropout, max_len=max_len))
        self.denoiser = DiffusionDenoiser(d, hidden_width=cfg.diffusion.hidden_width,
                                          time_embed_width=cfg.diffusion.time_embed_width)
        if not cfg.model.tie_scoring:
            self.output_emb = nn.Embedding(num_items, d)
        pad_mask = torch.ones(num_items + 1)
        pad_mask[num_items] = 0.0
        self.register_buffer("pad_mask", pad_mask)
        if cfg.model.dtype == "float64":
            self.double()

    def reset_parameters(self, seed: int) -> None:
        """Deterministic per-parameter init keyed by (seed, parameter name), so
        shared components are bit-identical across fusion/ablation variants."""
        preserved = {}
        if isinstance(self.fusion, WeightedFusion) and self.fusion.learnable:
            preserved["fusion.raw_alpha"] = self.fusion.raw_alpha.detach().clone()
        with torch.no_grad():
            for name, param in sorted(self.named_parameters()):
                if name in preserved:
                    param.copy_(preserved[name])
                    continue
                gen = torch.Generator().manual_seed(stable_seed(seed, name) % (2 ** 63))
                if name.endswith(".bias") or "norm" in name.lower():
                    if name.endswith(".weight"):
                        param.fill_(1.0)
                    else:
                        param.zero_()
                else:
                    values = torch.empty(param.shape, dtype=torch.float32)
                    values.normal_(0.0, 0.02, generator=gen)
                    param.copy_(values.to(param.dtype))
            self.collaborative.weight[self.num_items].zero_()
            if hasattr(self.fusion, "gate"):
                self.fusion.gate.bias.fill_(self.cfg.fusion.gate_bias_init)

    def fused_item_embeddings(self) -> torch.Tensor:
        """(num_items + 1, d) fused table; the padding row is forced to zero."""
        adapted = self.adapter(self.semantic)
        fused = self.fusion(self.collaborative.weight, adapted)
        return fused * self.pad_mask[:, None]

    def scoring_table(self, fused: torch.Tensor | None = None) -> torch.Tensor:
        """(num_items, d) candidate rows used by the ranking head."""
        if not self.cfg.model.tie_scoring:
            return self.output_emb.weight
        if fused is None:
            fused = self.fused_item_embeddings()
        return fused[: self.num_items]

    def encode(self, item_indices: torch.Tensor, lengths: torch.Tensor,
               fused: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """Right-padded (B, L) index batch -> (per-position states, summaries)."""
        if fused is None:
            fused = self.fused_item_embeddings()
        emb = fused[item_indices]
        return self.encoder(emb, lengths)

    def score(self, h: torch.Tensor, fused: torch.Tensor | None = None) -> torch.Tensor:
        return h @ self.scoring_table(fused).T


def pad_batch(sequences: list[list[int]], padding_index: int,
              dtype=torch.long) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad variable-length index lists into a (B, Lmax) tensor."""
    if not sequences:
        raise ValueError("cannot pad an empty batch")
    lengths = torch.tensor([len(s) for s in sequences], dtype=torch.long)
    max_len = int(lengths.max())
    out = torch.full((len(sequences), max_len), padding_index, dtype=dtype)
    for i, seq in enumerate(sequences):
        out[i, :len(seq)] = torch.tensor(seq, dtype=dtype)
    return out, lengths


def save_checkpoint(path: str | Path, model: RecDiffModel,
                    prototypes: IntentPrototypes | None = None,
                    extra: dict | None = None) -> None:
    payload = {
        "format": CHECKPOINT_TAG,
        "config": config_to_dict(model.cfg),
        "num_items": model.num_items,
        "max_len": model.encoder.settings.max_len,
        "semantic_source": model.semantic_source,
        "model_state": model.state_dict(),
        "prototypes": None,
        "extra": extra or {},
    }
    if prototypes is not None:
        payload["prototypes"] = {
            "k": prototypes.k,
            "fit_step": prototypes.fit_step,
            "centroids": prototypes.centroids.astype(np.float64),
        }
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[RecDiffModel, IntentPrototypes | None, dict]:
    path = Path(path)
    if not path.exists():
        raise ValueError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_TAG:
        raise ValueError(f"{path}: not a {CHECKPOINT_TAG} archive")
    cfg = config_from_dict(payload["config"])
    num_items = int(payload["num_items"])
    sem_state = payload["model_state"]["semantic"]
    semantic = SemanticMatrix(matrix=sem_state.to(torch.float32),
                              source_tag=payload.get("semantic_source", "unknown"))
    model = RecDiffModel(num_items, cfg, semantic, max_len=int(payload["max_len"]))
    model.load_state_dict(payload["model_state"])
    model.eval()
    prototypes = None
    if payload.get("prototypes") is not None:
        proto = payload["prototypes"]
        prototypes = IntentPrototypes(k=int(proto["k"]),
                                      centroids=np.asarray(proto["centroids"], dtype=np.float64),
                                      fit_step=int(proto["fit_step"]))
    return model, prototypes, payload.get("extra", {})
