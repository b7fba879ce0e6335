#!/usr/bin/env python3
"""
Recurrent Dueling Q-Network for the AnimaRL Simulator
Encoder + GRU + dueling heads + adversarial treatment head, loss terms and checkpoints
"""

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field
from torch.autograd import Function

from chase_env import N_ACTIONS

METHODS = ("dqn", "bc", "dqaas", "dqdil", "dqcil")
PHASES = ("offline", "online")

CHECKPOINT_FORMAT_VERSION = 1
PROB_CLAMP = 1e-7
DTYPE = torch.float64


class NumericalFailureError(RuntimeError):
    """Raised when a loss or gradient becomes non-finite"""

    def __init__(self, param_name: str, message: str = "non-finite gradient"):
        super().__init__(f"{message} in parameter '{param_name}'")
        self.param_name = param_name


class CheckpointMismatchError(ValueError):
    """Raised when a checkpoint disagrees with its manifest"""


class LossWeights(BaseModel):
    """Weights of the loss terms plus the DTW mixing weight and discount"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    lambda1: float = Field(default=1e-5, ge=0, description="l2 penalty weight")
    lambda2: float = Field(default=0.0, ge=0, description="Treatment (counterfactual) weight")
    lambda3: float = Field(default=0.0, ge=0, description="Action-supervision weight (DQAAS)")
    alpha: float = Field(default=0.0, ge=0, description="DTW pseudo-reward mixing weight")
    gamma: float = Field(default=0.99, gt=0, le=1, description="Discount factor")

    @classmethod
    def for_method(cls, method: str, phase: str) -> "LossWeights":
        """
        Agent-domain defaults per method and phase

        Offline: alpha=10, lambda2=10, lambda3=50. Online: alpha=1, lambda2=1, lambda3=10.
        """
        if method not in METHODS:
            raise ValueError(f"Unknown method '{method}', expected one of {METHODS}")
        if phase not in PHASES:
            raise ValueError(f"Unknown phase '{phase}', expected one of {PHASES}")
        offline = phase == "offline"
        return cls(
            alpha=(10.0 if offline else 1.0) if method in ("dqdil", "dqcil") else 0.0,
            lambda2=(10.0 if offline else 1.0) if method == "dqcil" else 0.0,
            lambda3=(50.0 if offline else 10.0) if method == "dqaas" else 0.0
        )


class GradientReversalFunction(Function):
    """Identity forward; backward multiplies the incoming gradient by -alpha"""

    @staticmethod
    def forward(ctx, x, alpha):
        ctx.alpha = alpha
        return x.clone()

    @staticmethod
    def backward(ctx, grads):
        alpha = grads.new_tensor(ctx.alpha)
        return -alpha * grads, None


class GradientReversal(nn.Module):
    def __init__(self, alpha: float = 1.0, enabled: bool = True):
        super().__init__()
        self.alpha = alpha
        self.enabled = enabled

    def forward(self, x):
        if not self.enabled:
            return x
        return GradientReversalFunction.apply(x, self.alpha)


def dueling_combine(value: torch.Tensor, advantage: torch.Tensor) -> torch.Tensor:
    """Q = V + A - mean_a A"""
    return value + advantage - advantage.mean(dim=-1, keepdim=True)


@dataclass
class QOutput:
    q_values: torch.Tensor
    treatment_prob: torch.Tensor
    hidden: torch.Tensor
    value: torch.Tensor
    advantage: torch.Tensor


class QNetwork(nn.Module):
    """
    Recurrent dueling Q-network with a treatment-prediction head

    obs -> FC(32) -> FC(32) -> GRU(32) = h_t
    h_t -> value head (32 -> 1) and advantage head (32 -> |A|), combined as dueling Q
    h_t -> gradient reversal -> treatment head (8 -> 1) -> sigmoid
    """

    def __init__(
        self,
        obs_dim: int,
        n_actions: int = N_ACTIONS,
        hidden_size: int = 32,
        treatment_hidden: int = 8,
        reversal: bool = True
    ):
        super().__init__()
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        self.hidden_size = hidden_size

        self.encoder = nn.Sequential(
            nn.Linear(obs_dim, hidden_size), nn.ReLU(),
            nn.Linear(hidden_size, hidden_size), nn.ReLU()
        )
        self.gru = nn.GRUCell(hidden_size, hidden_size)
        self.value_head = nn.Sequential(
            nn.Linear(hidden_size, hidden_size), nn.ReLU(), nn.Linear(hidden_size, 1)
        )
        self.advantage_head = nn.Sequential(
            nn.Linear(hidden_size, hidden_size), nn.ReLU(), nn.Linear(hidden_size, n_actions)
        )
        self.reversal = GradientReversal(enabled=reversal)
        self.treatment_head = nn.Sequential(
            nn.Linear(hidden_size, treatment_hidden), nn.ReLU(), nn.Linear(treatment_hidden, 1)
        )

        self.reset_parameters()
        self.to(DTYPE)

    def reset_parameters(self):
        """Uniform init in +/- 1/sqrt(fan_in) for every layer"""
        with torch.no_grad():
            for module in self.modules():
                if isinstance(module, nn.Linear):
                    bound = 1.0 / math.sqrt(module.in_features)
                    module.weight.uniform_(-bound, bound)
                    module.bias.uniform_(-bound, bound)
                elif isinstance(module, nn.GRUCell):
                    for name, param in module.named_parameters():
                        fan_in = module.input_size if name == "weight_ih" else module.hidden_size
                        bound = 1.0 / math.sqrt(fan_in)
                        param.uniform_(-bound, bound)

    @property
    def shared_parameter_names(self) -> List[str]:
        """Parameters upstream of the gradient reversal (encoder and GRU)"""
        return [n for n, _ in self.named_parameters() if n.startswith(("encoder.", "gru."))]

    @property
    def treatment_parameter_names(self) -> List[str]:
        return [n for n, _ in self.named_parameters() if n.startswith("treatment_head.")]

    def initial_hidden(self, batch_size: Optional[int] = None) -> torch.Tensor:
        shape = (self.hidden_size,) if batch_size is None else (batch_size, self.hidden_size)
        return torch.zeros(shape, dtype=DTYPE)

    def heads(self, h: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        value = self.value_head(h)
        advantage = self.advantage_head(h)
        q = dueling_combine(value, advantage)
        treatment = torch.sigmoid(self.treatment_head(self.reversal(h))).squeeze(-1)
        return q, treatment, value, advantage

    def forward(self, obs: torch.Tensor, hidden: Optional[torch.Tensor] = None) -> QOutput:
        """
        One recurrent step

        Args:
            obs: (obs_dim,) or (B, obs_dim)
            hidden: Previous hidden state, zeros when None

        Returns:
            QOutput with Q-values, treatment probability and the new hidden state
        """
        obs = torch.as_tensor(obs, dtype=DTYPE)
        if obs.shape[-1] != self.obs_dim:
            raise ValueError(f"Observation dimension {obs.shape[-1]} does not match encoder input {self.obs_dim}")
        single = obs.dim() == 1
        if single:
            obs = obs.unsqueeze(0)
        if hidden is None:
            hidden = self.initial_hidden(obs.shape[0])
        elif hidden.dim() == 1:
            hidden = hidden.unsqueeze(0)

        h = self.gru(self.encoder(obs), hidden)
        q, treatment, value, advantage = self.heads(h)
        if single:
            return QOutput(q[0], treatment[0], h[0], value[0], advantage[0])
        return QOutput(q, treatment, h, value, advantage)


def unroll(
    net: QNetwork,
    obs_sequence: Union[np.ndarray, torch.Tensor],
    hidden: Optional[torch.Tensor] = None
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Run the network over a whole episode

    Returns:
        q (T, |A|), treatment (T,), hiddens (T + 1, H) where hiddens[t] is the
        state before step t (hiddens[0] is the start state)
    """
    obs_sequence = torch.as_tensor(obs_sequence, dtype=DTYPE)
    h = net.initial_hidden() if hidden is None else hidden
    qs, treatments, hiddens = [], [], [h]
    for obs in obs_sequence:
        out = net(obs, h)
        h = out.hidden
        qs.append(out.q_values)
        treatments.append(out.treatment_prob)
        hiddens.append(h)
    if not qs:
        return (
            torch.zeros((0, net.n_actions), dtype=DTYPE),
            torch.zeros(0, dtype=DTYPE),
            torch.stack(hiddens)
        )
    return torch.stack(qs), torch.stack(treatments), torch.stack(hiddens)


def hard_update(target: nn.Module, source: nn.Module):
    """Copy every parameter of source into target"""
    target.load_state_dict(source.state_dict())


@dataclass
class TransitionBatch:
    """
    Replayed transitions as float64 tensors

    hidden is the recurrent state before obs; expert_actions is -1 where no
    supervision target exists.
    """
    obs: torch.Tensor
    actions: torch.Tensor
    rewards: torch.Tensor
    next_obs: torch.Tensor
    terminals: torch.Tensor
    conditions: torch.Tensor
    hidden: torch.Tensor
    weights: Optional[torch.Tensor] = None
    expert_actions: Optional[torch.Tensor] = None

    @classmethod
    def from_arrays(
        cls,
        obs,
        actions,
        rewards,
        next_obs,
        terminals,
        conditions,
        hidden,
        weights=None,
        expert_actions=None
    ) -> "TransitionBatch":
        as_float = lambda x: torch.as_tensor(np.asarray(x, dtype=float), dtype=DTYPE)
        return cls(
            obs=as_float(obs),
            actions=torch.as_tensor(np.asarray(actions, dtype=np.int64)),
            rewards=as_float(rewards),
            next_obs=as_float(next_obs),
            terminals=as_float(terminals),
            conditions=as_float(conditions),
            hidden=as_float(hidden),
            weights=None if weights is None else as_float(weights),
            expert_actions=None if expert_actions is None else torch.as_tensor(np.asarray(expert_actions, dtype=np.int64))
        )

    def __len__(self) -> int:
        return int(self.actions.shape[0])


def double_q_targets(
    rewards: torch.Tensor,
    terminals: torch.Tensor,
    q_next_online: torch.Tensor,
    q_next_target: torch.Tensor,
    gamma: float
) -> torch.Tensor:
    """y = R + gamma * Q_target(s', argmax_a Q_online(s', a)), y = R at terminals"""
    a_max = q_next_online.argmax(dim=-1, keepdim=True)
    bootstrap = q_next_target.gather(-1, a_max).squeeze(-1)
    return rewards + gamma * (1.0 - terminals) * bootstrap


@dataclass
class TDLossResult:
    loss: torch.Tensor
    td_errors: np.ndarray
    output: QOutput


def td_loss(
    batch: TransitionBatch,
    online: QNetwork,
    target: QNetwork,
    gamma: float,
    output: Optional[QOutput] = None
) -> TDLossResult:
    """
    Double-Q temporal-difference loss, importance-weighted when batch.weights is set

    The next-state argmax continues the online recurrence from h_t; the target
    network replays the same stored hidden state without gradients.

    Returns:
        TDLossResult with the scalar loss and |y - Q(s, a)| per transition
    """
    if len(batch) == 0:
        raise ValueError("td_loss called with an empty batch")

    out = output if output is not None else online(batch.obs, batch.hidden)
    q_taken = out.q_values.gather(-1, batch.actions.unsqueeze(-1)).squeeze(-1)

    with torch.no_grad():
        q_next_online = online(batch.next_obs, out.hidden.detach()).q_values
        target_hidden = target(batch.obs, batch.hidden).hidden
        q_next_target = target(batch.next_obs, target_hidden).q_values
        y = double_q_targets(batch.rewards, batch.terminals, q_next_online, q_next_target, gamma)

    errors = y - q_taken
    squared = errors ** 2
    if batch.weights is not None:
        squared = batch.weights * squared
    return TDLossResult(
        loss=squared.mean(),
        td_errors=errors.detach().abs().numpy().copy(),
        output=out
    )


def treatment_loss(c, c_hat) -> torch.Tensor:
    """Binary cross-entropy -(c log c_hat + (1 - c) log(1 - c_hat)), mean over the batch"""
    c = torch.as_tensor(c, dtype=DTYPE)
    c_hat = torch.as_tensor(c_hat, dtype=DTYPE).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    return (-(c * torch.log(c_hat) + (1.0 - c) * torch.log(1.0 - c_hat))).mean()


def action_supervision_loss(q_values: torch.Tensor, expert_actions: torch.Tensor) -> torch.Tensor:
    """Cross-entropy with Q-values as logits; entries with expert action -1 are ignored"""
    mask = expert_actions >= 0
    if not bool(mask.any()):
        return q_values.sum() * 0.0
    return F.cross_entropy(q_values[mask], expert_actions[mask])


def l2_penalty(net: nn.Module) -> torch.Tensor:
    return sum((p ** 2).sum() for p in net.parameters())


@dataclass
class LossTerms:
    total: torch.Tensor
    td: float
    l2: float
    treatment: float
    supervision: float
    td_errors: Optional[np.ndarray] = None

    def as_dict(self) -> Dict[str, float]:
        return {
            "td_loss": self.td,
            "l2_loss": self.l2,
            "treatment_loss": self.treatment,
            "supervision_loss": self.supervision,
            "total_loss": float(self.total.detach())
        }


def total_objective(
    online: QNetwork,
    target: QNetwork,
    batch: TransitionBatch,
    weights: LossWeights,
    method: str = "dqcil"
) -> LossTerms:
    """
    Method-specific training objective

        bc:          J_AS + lambda1 J_l2
        dqn, dqdil:  J_DQ + lambda1 J_l2
        dqaas:       J_DQ + lambda1 J_l2 + lambda3 J_AS (DTW-aligned expert actions)
        dqcil:       J_DQ + lambda1 J_l2 + lambda2 J_tr (reversed into encoder and GRU)
    """
    if method not in METHODS:
        raise ValueError(f"Unknown method '{method}', expected one of {METHODS}")

    l2 = l2_penalty(online)
    out = online(batch.obs, batch.hidden)
    td_value = supervision_value = treatment_value = 0.0
    td_errors = None

    if method == "bc":
        supervision = action_supervision_loss(out.q_values, batch.actions)
        supervision_value = float(supervision.detach())
        total = supervision + weights.lambda1 * l2
    else:
        result = td_loss(batch, online, target, weights.gamma, output=out)
        td_value = float(result.loss.detach())
        td_errors = result.td_errors
        total = result.loss + weights.lambda1 * l2

        if method == "dqaas" and batch.expert_actions is not None:
            supervision = action_supervision_loss(out.q_values, batch.expert_actions)
            supervision_value = float(supervision.detach())
            total = total + weights.lambda3 * supervision

        if method == "dqcil":
            treatment = treatment_loss(batch.conditions, out.treatment_prob)
            treatment_value = float(treatment.detach())
            total = total + weights.lambda2 * treatment

    return LossTerms(
        total=total,
        td=td_value,
        l2=float(l2.detach()),
        treatment=treatment_value,
        supervision=supervision_value,
        td_errors=td_errors
    )


def backward_with_reversal(
    net: QNetwork,
    target: QNetwork,
    weights: LossWeights,
    batch: TransitionBatch,
    method: str = "dqcil"
) -> Tuple[LossTerms, Dict[str, torch.Tensor]]:
    """
    Backpropagate the method objective through the gradient-reversal layer

    Treatment-head gradients are those of +lambda2 J_tr; encoder and GRU
    receive the reversed -lambda2 J_tr gradient.

    Returns:
        (loss terms, parameter name -> gradient). Gradients are also left in .grad.

    Raises:
        NumericalFailureError: a loss or gradient is not finite
    """
    net.zero_grad(set_to_none=True)
    terms = total_objective(net, target, batch, weights, method)
    if not bool(torch.isfinite(terms.total)):
        raise NumericalFailureError("total_loss", message=f"non-finite loss {float(terms.total)}")
    terms.total.backward()

    grads = {}
    for name, param in net.named_parameters():
        grad = param.grad if param.grad is not None else torch.zeros_like(param)
        if not bool(torch.isfinite(grad).all()):
            raise NumericalFailureError(name)
        grads[name] = grad.detach().clone()
    return terms, grads


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def manifest_path(checkpoint_path: Union[str, Path]) -> Path:
    return Path(checkpoint_path).with_suffix(".manifest.txt")


def save_checkpoint(
    net: QNetwork,
    path: Union[str, Path],
    metadata: Optional[Dict] = None
) -> Path:
    """
    Save the network and write a text manifest (layers, shapes, SHA-256)

    Args:
        net: Network to save
        path: Checkpoint file
        metadata: Extra JSON-compatible values stored with the weights

    Returns:
        Checkpoint path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "obs_dim": net.obs_dim,
        "n_actions": net.n_actions,
        "hidden_size": net.hidden_size,
        "state_dict": net.state_dict(),
        "metadata": metadata or {}
    }
    torch.save(payload, path)

    lines = [
        "# AnimaRL Q-network checkpoint manifest",
        f"format_version: {CHECKPOINT_FORMAT_VERSION}",
        f"checkpoint: {path.name}",
        f"sha256: {_sha256(path)}",
        f"obs_dim: {net.obs_dim}",
        f"n_actions: {net.n_actions}",
        "layers:"
    ]
    for name, tensor in net.state_dict().items():
        shape = "x".join(str(s) for s in tensor.shape)
        lines.append(f"  {name} {shape}")
    with open(manifest_path(path), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    return path


def read_manifest(path: Union[str, Path]) -> Dict:
    """Parse a manifest into its header fields and a layer -> shape mapping"""
    fields: Dict = {"layers": {}}
    in_layers = False
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.startswith("#") or not line.strip():
                continue
            if in_layers and line.startswith("  "):
                name, shape = line.split()
                fields["layers"][name] = tuple(int(s) for s in shape.split("x") if s)
                continue
            key, _, value = line.partition(":")
            if key == "layers":
                in_layers = True
            else:
                fields[key.strip()] = value.strip()
    return fields


def load_checkpoint(path: Union[str, Path]) -> Tuple[QNetwork, Dict]:
    """
    Load a checkpoint after verifying it against its manifest

    Raises:
        FileNotFoundError: checkpoint missing
        CheckpointMismatchError: manifest missing, checksum or layer shapes differ,
            or unsupported format version
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    manifest_file = manifest_path(path)
    if not manifest_file.exists():
        raise CheckpointMismatchError(f"Manifest not found for checkpoint {path}: {manifest_file}")

    manifest = read_manifest(manifest_file)
    actual = _sha256(path)
    if manifest.get("sha256") != actual:
        raise CheckpointMismatchError(
            f"Checksum mismatch for {path}: manifest {manifest.get('sha256')}, file {actual}"
        )

    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointMismatchError(
            f"Unsupported checkpoint format {payload.get('format_version')}, expected {CHECKPOINT_FORMAT_VERSION}"
        )

    state_dict = payload["state_dict"]
    shapes = {name: tuple(t.shape) for name, t in state_dict.items()}
    if shapes != manifest["layers"]:
        raise CheckpointMismatchError(f"Layer names or shapes in {path} differ from its manifest")

    net = QNetwork(
        obs_dim=int(payload["obs_dim"]),
        n_actions=int(payload["n_actions"]),
        hidden_size=int(payload["hidden_size"])
    )
    net.load_state_dict(state_dict)
    return net, dict(payload.get("metadata", {}))
