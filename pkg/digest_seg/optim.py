from typing import Any, Callable, Dict, Iterable, List, Optional

import torch
from torch.optim import Optimizer

from .logger_config import get_training_logger, log_info

logger = get_training_logger()

OPTIMIZER_KINDS = ("ranger", "adam")


class Lookahead:
    """
    Lookahead wrapper: every ``k`` inner steps the slow weights move ``alpha``
    of the way toward the fast weights, and the fast weights are reset to them.

    Wrapping RAdam gives the "ranger" optimizer.
    """

    def __init__(self, optimizer: Optimizer, k: int = 6, alpha: float = 0.5):
        if k < 1:
            raise ValueError(f"Lookahead k must be >= 1, got {k}")
        if not 0.0 < alpha <= 1.0:
            raise ValueError(f"Lookahead alpha must be in (0, 1], got {alpha}")
        self.optimizer = optimizer
        self.k = k
        self.alpha = alpha
        self.step_count = 0
        self.slow_weights: List[List[torch.Tensor]] = [
            [p.detach().clone() for p in group["params"]] for group in optimizer.param_groups
        ]

    @property
    def param_groups(self) -> List[Dict[str, Any]]:
        return self.optimizer.param_groups

    def zero_grad(self, set_to_none: bool = True) -> None:
        self.optimizer.zero_grad(set_to_none=set_to_none)

    @torch.no_grad()
    def _sync(self) -> None:
        for group, slow_group in zip(self.optimizer.param_groups, self.slow_weights):
            for fast, slow in zip(group["params"], slow_group):
                slow.add_(fast.detach() - slow, alpha=self.alpha)
                fast.copy_(slow)

    def step(self, closure: Optional[Callable[[], float]] = None):
        loss = self.optimizer.step(closure)
        self.step_count += 1
        if self.step_count % self.k == 0:
            self._sync()
        return loss


def build_optimizer(
    params: Iterable[torch.nn.Parameter],
    kind: str,
    lr: float,
    weight_decay: float = 0.0,
    lookahead_k: int = 6,
    lookahead_alpha: float = 0.5,
):
    """Create a ``ranger`` (Lookahead over RAdam) or plain ``adam`` optimizer."""
    params = list(params)
    if kind == "ranger":
        inner = torch.optim.RAdam(params, lr=lr, weight_decay=weight_decay)
        optimizer = Lookahead(inner, k=lookahead_k, alpha=lookahead_alpha)
    elif kind == "adam":
        optimizer = torch.optim.Adam(params, lr=lr, weight_decay=weight_decay)
    else:
        raise ValueError(f"optimizer_kind must be one of {OPTIMIZER_KINDS}, got {kind!r}")
    log_info(logger, f"Optimizer {kind} (lr={lr}, weight_decay={weight_decay})")
    return optimizer


def set_learning_rate(optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr
