import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

from recdiff.config import ExperimentConfig, validate_config
from recdiff.data import Interaction, build_dataset


def tiny_config(**section_overrides) -> ExperimentConfig:
    """Small dims and short schedules so unit tests stay fast."""
    cfg = ExperimentConfig()
    cfg.model.d = 16
    cfg.model.layers = 1
    cfg.model.heads = 2
    cfg.model.dropout = 0.1
    cfg.semantic.d_prime = 8
    cfg.intent.k = 3
    cfg.intent.clustering_interval = 8
    cfg.intent.kmeans_iters = 20
    cfg.diffusion.steps = 5
    cfg.diffusion.hidden_width = 32
    cfg.diffusion.time_embed_width = 8
    cfg.train.batch_size = 32
    cfg.train.epochs = 2
    for section, table in section_overrides.items():
        obj = getattr(cfg, section)
        for key, value in table.items():
            setattr(obj, key, value)
    validate_config(cfg)
    return cfg


def random_dataset(num_users=30, num_items=20, seq_len=8, seed=0, min_count=5, max_len=10):
    rng = np.random.default_rng(seed)
    rows = []
    for u in range(num_users):
        items = rng.choice(num_items, size=seq_len, replace=False)
        for j, it in enumerate(items):
            rows.append(Interaction(f"u{u}", f"i{it}", j))
    return build_dataset(rows, min_count=min_count, max_len=max_len)
