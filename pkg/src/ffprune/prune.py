"""Prunable-unit inventory, Wanda-style structured importance, and policy application."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .lm import ActivationCapture, ModelConfig, Site, TinyLM, all_sites

ATTENTION = "attention_heads"
FFN = "ffn_channels"


@dataclass(frozen=True)
class PrunableUnit:
    unit_index: int
    layer: int
    kind: str
    element_count: int
    param_count: int

    @property
    def params_per_element(self) -> int:
        return self.param_count // self.element_count


def unit_inventory(config: ModelConfig) -> list[PrunableUnit]:
    """Two units per layer, ordered (layer 0 attention, layer 0 FFN, layer 1 attention, ...)."""
    units = []
    d = config.d_model
    for layer in range(config.n_layers):
        units.append(PrunableUnit(len(units), layer, ATTENTION, config.n_heads, 4 * d * d))
        units.append(PrunableUnit(len(units), layer, FFN, config.d_ff, 2 * d * config.d_ff))
    return units


def unit_weights(units: Sequence[PrunableUnit]) -> np.ndarray:
    return np.array([u.param_count for u in units], dtype=np.float64)


def required_sites(config: ModelConfig) -> list[Site]:
    return all_sites(config.n_layers)


def _abs(linear: torch.nn.Linear) -> np.ndarray:
    return linear.weight.detach().to(torch.float64).abs().numpy()


def wanda_scores(model: TinyLM, captures: dict[Site, ActivationCapture]) -> list[np.ndarray]:
    """Per-element importance: the sum of |W_ij| * ||X_j||_2 over every weight the element owns.

    An FFN channel owns its up-projection row (inputs: the normalized residual)
    and its down-projection column (input: the channel itself). A head owns its
    Q/K/V row slices and the O-projection column slice fed by its outputs.
    """
    config = model.config
    hd = config.head_dim
    for site in required_sites(config):
        if site not in captures:
            raise ValueError(f"missing activation capture for site {site}")
    scores: list[np.ndarray] = []
    for unit in unit_inventory(config):
        block = model.blocks[unit.layer]
        if unit.kind == ATTENTION:
            n_in = captures[Site(unit.layer, "attn_in")].column_norms
            n_heads = captures[Site(unit.layer, "attn_heads")].column_norms
            attn = block.attn
            rows = sum(_abs(p) for p in (attn.q, attn.k, attn.v)) @ n_in  # per output row of Q,K,V
            cols = _abs(attn.o).sum(axis=0) * n_heads  # per input column of O
            per_channel = rows + cols
            scores.append(per_channel.reshape(attn.n_heads, hd).sum(axis=1))
        else:
            n_in = captures[Site(unit.layer, "ffn_in")].column_norms
            n_hidden = captures[Site(unit.layer, "ffn_hidden")].column_norms
            ffn = block.ffn
            scores.append(_abs(ffn.up) @ n_in + _abs(ffn.down).sum(axis=0) * n_hidden)
    return scores


def kept_count(rate: float, element_count: int) -> int:
    """ceil(rate * element_count), guarded against floating noise just above an integer."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"retention rate {rate} outside [0, 1]")
    k = math.ceil(round(rate * element_count, 9))
    if k < 1:
        raise ValueError(f"retention rate {rate} keeps no elements of {element_count}")
    return k


def top_elements(scores: np.ndarray, k: int) -> list[int]:
    """Indices of the k highest scores (ties to the lower index), returned ascending."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    return sorted(int(i) for i in order[:k])


@dataclass
class PruneMask:
    kept: list[list[int]]

    def kept_params(self, units: Sequence[PrunableUnit]) -> int:
        return sum(len(k) * u.params_per_element for k, u in zip(self.kept, units))

    def to_json(self) -> list[dict]:
        return [{"unit_index": i, "kept_element_indices": list(k)} for i, k in enumerate(self.kept)]

    @classmethod
    def from_json(cls, entries: list[dict]) -> "PruneMask":
        entries = sorted(entries, key=lambda e: e["unit_index"])
        if [e["unit_index"] for e in entries] != list(range(len(entries))):
            raise ValueError("prune mask unit indices must be contiguous from 0")
        return cls([list(map(int, e["kept_element_indices"])) for e in entries])

    def dumps(self) -> str:
        return json.dumps(self.to_json())


@dataclass
class PrunedModel:
    model: TinyLM
    mask: PruneMask
    rates: list[float] = field(default_factory=list)

    @property
    def config(self) -> ModelConfig:
        return self.model.config

    def prunable_param_count(self) -> int:
        total = 0
        for block in self.model.blocks:
            for lin in (block.attn.q, block.attn.k, block.attn.v, block.attn.o, block.ffn.up, block.ffn.down):
                total += lin.weight.numel()
        return total


def materialize(dense: TinyLM, mask: PruneMask) -> TinyLM:
    """Build the reduced model that keeps exactly the elements listed in ``mask``."""
    config = dense.config
    units = unit_inventory(config)
    if len(mask.kept) != len(units):
        raise ValueError(f"mask covers {len(mask.kept)} units, model has {len(units)}")
    hd = config.head_dim
    heads = [len(mask.kept[2 * layer]) for layer in range(config.n_layers)]
    widths = [len(mask.kept[2 * layer + 1]) for layer in range(config.n_layers)]
    out = TinyLM(config, heads, widths).to(next(dense.parameters()).dtype)
    with torch.no_grad():
        for name in ("tok_emb", "pos_emb", "ln_f", "head"):
            getattr(out, name).load_state_dict(getattr(dense, name).state_dict())
        for layer, (src, dst) in enumerate(zip(dense.blocks, out.blocks)):
            dst.ln1.load_state_dict(src.ln1.state_dict())
            dst.ln2.load_state_dict(src.ln2.state_dict())
            head_ids = mask.kept[2 * layer]
            chan = torch.tensor([h * hd + j for h in head_ids for j in range(hd)], dtype=torch.long)
            for proj in ("q", "k", "v"):
                getattr(dst.attn, proj).weight.copy_(getattr(src.attn, proj).weight[chan])
            dst.attn.o.weight.copy_(src.attn.o.weight[:, chan])
            ff = torch.tensor(mask.kept[2 * layer + 1], dtype=torch.long)
            dst.ffn.up.weight.copy_(src.ffn.up.weight[ff])
            dst.ffn.down.weight.copy_(src.ffn.down.weight[:, ff])
    out.eval()
    return out


def build_mask(rates: Sequence[float], scores: Sequence[np.ndarray], units: Sequence[PrunableUnit]) -> PruneMask:
    if len(rates) != len(units):
        raise ValueError(f"policy has {len(rates)} rates, inventory has {len(units)} units")
    if len(scores) != len(units):
        raise ValueError(f"scores cover {len(scores)} units, inventory has {len(units)} units")
    kept = []
    for rate, score, unit in zip(rates, scores, units):
        if len(score) != unit.element_count:
            raise ValueError(f"unit {unit.unit_index}: {len(score)} scores for {unit.element_count} elements")
        kept.append(top_elements(score, kept_count(float(rate), unit.element_count)))
    return PruneMask(kept)


def apply_policy(model: TinyLM, policy, scores: Sequence[np.ndarray]) -> PrunedModel:
    """Keep the top-ceil(rate * count) elements of every unit by score.

    ``policy`` is a :class:`~ffprune.budget.RetentionPolicy` or a plain
    sequence of per-unit rates.
    """
    rates = [float(r) for r in getattr(policy, "rates", policy)]
    mask = build_mask(rates, scores, unit_inventory(model.config))
    return PrunedModel(materialize(model, mask), mask, rates)
