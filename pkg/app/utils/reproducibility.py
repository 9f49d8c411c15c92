import random
import logging

import numpy as np
import torch

logger = logging.getLogger(__name__)


def seed_everything(seed: int) -> torch.Generator:
    """
    Seed every random source the pipeline touches.

    Args:
        seed (int): Run seed, recorded in the effective config

    Returns:
        torch.Generator: A generator seeded with the same value, for callers
            that need an isolated stream
    """
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.cuda.manual_seed_all(seed)
    torch.backends.cudnn.deterministic = True
    torch.backends.cudnn.benchmark = False
    logger.debug(f"Seeded all random sources with {seed}")
    return torch.Generator().manual_seed(seed)
