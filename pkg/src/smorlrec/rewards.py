"""Per-step reward vector [accuracy, diversity, novelty]."""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .data import ItemCatalog

OBJECTIVES = ("acc", "div", "nov")


class RewardVector(NamedTuple):
    acc: float
    div: float
    nov: float


def accuracy_reward(action) -> float:
    return 1.0


def accuracy_rewards(actions) -> np.ndarray:
    return np.ones(len(actions))


def diversity_rewards(last, pred, e_div) -> np.ndarray:
    """1 - cos(e_last, e_pred) row-wise; zero-norm rows count as uncorrelated (1.0)."""
    a = e_div[np.asarray(last)]
    b = e_div[np.asarray(pred)]
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    denom = na * nb
    dot = np.sum(a * b, axis=-1)
    safe = np.where(denom > 0, denom, 1.0)
    cos = np.where(denom > 0, dot / safe, 0.0)
    # rounding can push |cos| a hair above 1
    out = 1.0 - np.clip(cos, -1.0, 1.0)
    out = np.where(np.asarray(last) == np.asarray(pred), np.where(denom > 0, 0.0, 1.0), out)
    return out


def diversity_reward(last: int, pred: int, e_div) -> float:
    return float(diversity_rewards(np.array([last]), np.array([pred]), e_div)[0])


def novelty_rewards(pred, catalog: ItemCatalog) -> np.ndarray:
    pred = np.asarray(pred)
    if pred.size and (pred.min() < 1 or pred.max() > catalog.n_items):
        raise IndexError(f"item index outside [1, {catalog.n_items}]")
    return np.where(catalog.popular[pred], 0.0, 1.0)


def novelty_reward(pred: int, catalog: ItemCatalog) -> float:
    return float(novelty_rewards(np.array([pred]), catalog)[0])


def stack_rewards(actions, last, pred, e_div, catalog: ItemCatalog) -> np.ndarray:
    """Rewards (B, 3) in column order [acc, div, nov].

    Accuracy uses the logged action; diversity and novelty use the model's
    top prediction. ``e_div=None`` yields zero diversity reward.
    """
    acc = accuracy_rewards(actions)
    div = np.zeros(len(acc)) if e_div is None else diversity_rewards(last, pred, e_div)
    nov = novelty_rewards(pred, catalog)
    r = np.stack([acc, div, nov], axis=-1)
    if not (np.all((div >= 0.0) & (div <= 2.0)) and np.all((nov == 0.0) | (nov == 1.0))):
        raise ValueError("reward vector out of bounds")
    return r


def reward_vector(action, last, pred, e_div, catalog) -> RewardVector:
    r = stack_rewards(np.array([action]), np.array([last]), np.array([pred]), e_div, catalog)[0]
    return RewardVector(*map(float, r))
