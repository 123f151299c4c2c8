"""Multi-objective loss: task fidelity, architecture sparsity, covertness.

Sparsity couples the two paths block-wise:

    L_sp = sum_l [ beta * (|u_l^ste| + |u_l^exp|)
                   + gamma * w_l * KL(q_l^ste || q_l^exp) ],

where q are the temperature-1 action distributions and w_l = (L - l) / L for
1-indexed l, so earlier blocks pay more for diverging and the final block
pays nothing.

Covertness is an InfoNCE term over paired explicit/stego features,

    L_cts = -(1/N) sum_i log  exp(s_ii / tau) / sum_j exp(s_ij / tau),

with s the cosine similarity of flattened features. Identical batches give
exactly ln N; a single pair gives exactly 0. The mutual-information proxy
reported alongside is 1 - L_cts, unclipped, so it can exceed 1 or go
negative; it is a trend indicator, not an MI estimate.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from . import gating
from .encoder import GateVector
from .errors import ConfigurationError

# Features with norm below this are degenerate for cosine similarity.
_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """Scalar weights of the total objective."""

    lambda_c: float = 1.0
    lambda_cts: float = 1.0
    beta: float = 0.001
    gamma: float = 0.01
    cts_temperature: float = 0.1

    def __post_init__(self):
        for name in ("lambda_c", "lambda_cts", "beta", "gamma"):
            if getattr(self, name) < 0.0:
                raise ConfigurationError(f"{name} must be >= 0")
        if not self.cts_temperature > 0.0:
            raise ConfigurationError("cts_temperature must be positive")


@dataclass
class LossBreakdown:
    """Every term of the objective plus the weighted total."""

    l_p_exp: object
    l_p_ste: object
    l_c_ste: object
    l_sparsity: object
    l_cts: object
    l_total: object

    def detached(self):
        """Plain-float dict for logging."""
        out = {}
        for name in ("l_p_exp", "l_p_ste", "l_c_ste", "l_sparsity", "l_cts", "l_total"):
            val = getattr(self, name)
            out[name] = float(val.detach()) if isinstance(val, torch.Tensor) else float(val)
        return out


def _gate_values(gates, num_blocks):
    values = gates.values if isinstance(gates, GateVector) else torch.as_tensor(gates)
    if values.dim() != 1 or values.shape[0] != num_blocks:
        raise ConfigurationError(f"expected {num_blocks} gate values, got shape {tuple(values.shape)}")
    return values


def sparsity_loss(policy, gates_exp, gates_ste, beta=0.01, gamma=0.01):
    """Gate L1 plus depth-weighted KL between the paths' action distributions.

    The gate vectors are consumed as given (soft during policy learning, hard
    during retraining); the KL always uses the current logits.
    """
    if beta < 0.0 or gamma < 0.0:
        raise ConfigurationError("beta and gamma must be >= 0")
    num = policy.num_blocks
    u_exp = _gate_values(gates_exp, num)
    u_ste = _gate_values(gates_ste, num)

    l1 = u_ste.abs().sum() + u_exp.abs().sum()

    q_ste = gating.activation_distributions(policy, gating.STEGO)
    q_exp = gating.activation_distributions(policy, gating.EXPLICIT)
    kl_per_block = (q_ste * (q_ste.log() - q_exp.log())).sum(dim=1)
    # 1-indexed depth weight (L - l) / L: first block (L-1)/L, last block 0.
    weights = torch.arange(num - 1, -1, -1, dtype=kl_per_block.dtype) / num
    kl = (weights * kl_per_block).sum()

    return beta * l1 + gamma * kl


def _stack_features(features):
    if isinstance(features, torch.Tensor):
        if features.dim() < 2:
            raise ConfigurationError("need a batch dimension plus at least one feature axis")
        if features.shape[0] == 0:
            raise ConfigurationError("empty feature batch")
        return features.reshape(features.shape[0], -1)
    tensors = [f.data if hasattr(f, "data") and not isinstance(f, torch.Tensor) else f for f in features]
    if len(tensors) == 0:
        raise ConfigurationError("empty feature batch")
    return torch.stack([t.reshape(-1) for t in tensors])


def contrastive_loss(anchors, candidates, tau=0.1, stop_gradient_anchor=False):
    """InfoNCE over paired features; anchors[i] matches candidates[i].

    Accepts stacked tensors (N, ...) or lists of feature maps. Each feature is
    flattened and L2-normalized; similarities are divided by tau and the
    per-row log-sum-exp is max-stabilized (torch.logsumexp).
    """
    if not tau > 0.0:
        raise ConfigurationError("tau must be positive")
    a = _stack_features(anchors)
    c = _stack_features(candidates)
    if a.shape != c.shape:
        raise ConfigurationError(f"anchor batch {tuple(a.shape)} != candidate batch {tuple(c.shape)}")
    if a.shape[0] == 0:
        raise ConfigurationError("empty feature batch")

    a_norm = a.norm(dim=1, keepdim=True)
    c_norm = c.norm(dim=1, keepdim=True)
    if (a_norm <= _NORM_FLOOR).any() or (c_norm <= _NORM_FLOOR).any():
        raise ConfigurationError("zero-norm feature: cosine similarity is degenerate")
    a = a / a_norm
    c = c / c_norm
    if stop_gradient_anchor:
        a = a.detach()

    sim = (a @ c.T) / tau
    pos = sim.diagonal()
    return (torch.logsumexp(sim, dim=1) - pos).mean()


def mi_proxy(l_cts):
    """Alignment indicator 1 - L_cts, reported unclipped."""
    value = float(l_cts.detach()) if isinstance(l_cts, torch.Tensor) else float(l_cts)
    return 1.0 - value


def total_loss(l_p_exp, l_p_ste, l_c_ste, l_sparsity, l_cts, weights):
    """Weighted sum of all terms; the breakdown always satisfies

    l_total == l_p_exp + l_p_ste + lambda_c * l_c_ste + l_sparsity
               + lambda_cts * l_cts.
    """
    total = (
        l_p_exp
        + l_p_ste
        + weights.lambda_c * l_c_ste
        + l_sparsity
        + weights.lambda_cts * l_cts
    )
    return LossBreakdown(
        l_p_exp=l_p_exp,
        l_p_ste=l_p_ste,
        l_c_ste=l_c_ste,
        l_sparsity=l_sparsity,
        l_cts=l_cts,
        l_total=total,
    )
