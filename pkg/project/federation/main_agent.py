"""
MLaaS federation engine.

Provider selection agent: combinatorial soft actor-critic.

The actor emits a continuous proto-action in (0, 1)^N that is mapped to
the nearest non-zero binary provider selection. Critics score the
proto-action so the actor can be trained through them.

Created by Matua Doc.
Created on 2026-10-19.
"""

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.distributions.normal import Normal

from main_environment import FederationEnv, run_test_episode
from main_evaluation import evaluate_dataset
from main_model import CheckpointMissing, NonFiniteGradient, NonFiniteState

logger = logging.getLogger(__name__)

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0

# Keeps squashed proto-actions strictly inside (0, 1).
PROTO_EPSILON = 1e-6

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class SacHyperparams:
    """Settings of the SAC learner."""

    gamma: float = 0.9
    alpha: float = 0.2
    rho: float = 0.995
    lr: float = 1e-4
    batch_size: int = 1000
    update_every: int = 50
    updates_per_round: int = 50
    start_steps: int = 1000
    update_after: int = 1000
    capacity: int = 1_000_000
    hidden_sizes: tuple[int, int] = (256, 256)

    def __post_init__(self) -> None:
        """Check the ranges of the hyperparameters."""
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")
        if self.alpha < 0.0:
            raise ValueError("alpha cannot be negative")
        if not 0.0 < self.rho < 1.0:
            raise ValueError("rho must be in (0, 1)")
        if self.lr <= 0.0:
            raise ValueError("lr must be positive")
        for name in ("batch_size", "update_every", "updates_per_round",
                     "capacity"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")


@dataclass(frozen=True)
class TrainingSeeds:
    """Named seeds for every source of randomness in training."""

    env_seed: int = 0
    init_seed: int = 0
    explore_seed: int = 0


def nearest_binary_action(proto: np.ndarray) -> np.ndarray:
    """
    Return the non-zero binary vector nearest to a proto-action.

    Rounding each coordinate at 0.5 gives the nearest binary vector. If
    that selects nothing, the single provider with the largest proto value
    is switched on (ties: lowest index), which is the nearest vector among
    the non-zero ones.
    """
    proto = np.asarray(proto, dtype=np.float64)
    if proto.ndim != 1 or len(proto) < 1:
        raise ValueError("A proto-action is a non-empty vector")
    action = (proto >= 0.5).astype(np.int64)
    if not action.any():
        action[int(np.argmax(proto))] = 1
    return action


class Mlp(nn.Module):
    """A fully connected network with two ReLU hidden layers."""

    def __init__(self, sizes: tuple[int, int, int, int],
                 output_scale: float = 1.0) -> None:
        """
        Create the layers with uniform fan-in initialization.

        The output layer is multiplied by output_scale after
        initialization.
        """
        super().__init__()
        self.sizes = sizes
        self.layers = nn.ModuleList(
            nn.Linear(fan_in, fan_out)
            for fan_in, fan_out in zip(sizes[:-1], sizes[1:]))

        for layer in self.layers:
            bound = 1.0 / math.sqrt(layer.in_features)
            nn.init.uniform_(layer.weight, -bound, bound)
            nn.init.uniform_(layer.bias, -bound, bound)
        with torch.no_grad():
            self.layers[-1].weight.mul_(output_scale)
            self.layers[-1].bias.mul_(output_scale)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Run the network."""
        for layer in self.layers[:-1]:
            x = F.relu(layer(x))
        return self.layers[-1](x)


@dataclass
class PolicyOutput:
    """The actor's distribution and one sample from it."""

    mean: torch.Tensor
    log_std: torch.Tensor
    proto: torch.Tensor
    log_prob: torch.Tensor


def squashed_log_prob(u: torch.Tensor, mean: torch.Tensor,
                      std: torch.Tensor) -> torch.Tensor:
    """
    Return the log-density of (tanh(u) + 1) / 2 for u ~ N(mean, std).

    The change of variables subtracts log(1/2 * (1 - tanh(u)^2)) per
    coordinate, written with softplus to stay finite for large |u|.
    """
    gaussian = Normal(mean, std).log_prob(u)
    log_jacobian = (math.log(0.5)
                    + 2.0 * (math.log(2.0) - u - F.softplus(-2.0 * u)))
    return (gaussian - log_jacobian).sum(dim=-1)


class Actor(nn.Module):
    """Squashed-Gaussian policy over proto-actions."""

    def __init__(self, state_dim: int, n_providers: int,
                 hidden_sizes: tuple[int, int]) -> None:
        """Create the policy network."""
        super().__init__()
        self.n_providers = n_providers
        self.body = Mlp((state_dim, *hidden_sizes, 2 * n_providers),
                        output_scale=0.01)

    def forward(self, state: torch.Tensor,
                deterministic: bool = False,
                generator: torch.Generator | None = None,
                noise: torch.Tensor | None = None) -> PolicyOutput:
        """
        Sample a proto-action for each state.

        Stochastic mode uses the reparameterized sample mean + std * noise;
        noise is drawn from generator unless given. Deterministic mode
        uses the mean.
        """
        mean, log_std = self.body(state).chunk(2, dim=-1)
        log_std = torch.clamp(log_std, LOG_STD_MIN, LOG_STD_MAX)
        std = log_std.exp()

        if deterministic:
            u = mean
        else:
            if noise is None:
                noise = torch.randn(mean.shape, generator=generator,
                                    dtype=mean.dtype, device=mean.device)
            u = mean + std * noise

        proto = (torch.tanh(u) + 1.0) / 2.0
        proto = torch.clamp(proto, PROTO_EPSILON, 1.0 - PROTO_EPSILON)
        return PolicyOutput(mean, log_std, proto,
                            squashed_log_prob(u, mean, std))


class Critic(nn.Module):
    """Soft Q-network over (state, proto-action) pairs."""

    def __init__(self, state_dim: int, n_providers: int,
                 hidden_sizes: tuple[int, int]) -> None:
        """Create the Q-network."""
        super().__init__()
        self.body = Mlp((state_dim + n_providers, *hidden_sizes, 1))

    def forward(self, state: torch.Tensor,
                proto: torch.Tensor) -> torch.Tensor:
        """Return Q(s, a) as a vector."""
        return self.body(torch.cat([state, proto], dim=-1)).squeeze(-1)


@dataclass
class Transition:
    """One step as stored in the replay buffer."""

    state: np.ndarray
    action: np.ndarray
    proto: np.ndarray
    reward: float
    next_state: np.ndarray
    done: int


@dataclass
class Batch:
    """Transitions stacked into tensors."""

    states: torch.Tensor
    actions: torch.Tensor
    protos: torch.Tensor
    rewards: torch.Tensor
    next_states: torch.Tensor
    dones: torch.Tensor

    def __len__(self) -> int:
        """Return the number of transitions."""
        return len(self.rewards)


class ReplayBuffer:
    """A fixed-capacity ring of transitions with seeded uniform sampling."""

    def __init__(self, capacity: int, seed: int | None = None,
                 dtype: torch.dtype = torch.float32) -> None:
        """Create an empty buffer."""
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self._capacity = capacity
        self._items: list[Transition] = []
        self._next = 0
        self._rng = np.random.default_rng(seed)
        self._dtype = dtype

    def __len__(self) -> int:
        """Return the number of stored transitions."""
        return len(self._items)

    @property
    def capacity(self) -> int:
        """The most transitions the buffer holds."""
        return self._capacity

    def store(self, transition: Transition) -> None:
        """Add a transition, overwriting the oldest when full."""
        if len(self._items) < self._capacity:
            self._items.append(transition)
        else:
            self._items[self._next] = transition
        self._next = (self._next + 1) % self._capacity

    def items(self) -> list[Transition]:
        """Return the stored transitions, oldest first."""
        if len(self._items) < self._capacity:
            return list(self._items)
        return self._items[self._next:] + self._items[:self._next]

    def sample_indices(self, batch_size: int) -> np.ndarray:
        """Draw batch_size indices uniformly, with replacement."""
        if not self._items:
            raise ValueError("Cannot sample from an empty buffer")
        return self._rng.integers(0, len(self._items), size=batch_size)

    def sample(self, batch_size: int) -> Batch:
        """Draw a batch of transitions."""
        chosen = [self._items[i] for i in self.sample_indices(batch_size)]

        def stack(values: list[Any]) -> torch.Tensor:
            """Stack one field of the chosen transitions."""
            return torch.as_tensor(np.asarray(values), dtype=self._dtype)

        return Batch(stack([item.state for item in chosen]),
                     stack([item.action for item in chosen]),
                     stack([item.proto for item in chosen]),
                     stack([item.reward for item in chosen]),
                     stack([item.next_state for item in chosen]),
                     stack([item.done for item in chosen]))

    def get_state(self) -> dict[str, Any]:
        """Return the contents and generator state."""
        return {"items": self._items, "next": self._next,
                "rng": self._rng.bit_generator.state}

    def set_state(self, state: dict[str, Any]) -> None:
        """Restore a state returned by get_state()."""
        self._items = list(state["items"])
        self._next = int(state["next"])
        self._rng.bit_generator.state = state["rng"]


def soft_bellman_target(reward: torch.Tensor, done: torch.Tensor,
                        min_q: torch.Tensor, log_prob: torch.Tensor,
                        gamma: float, alpha: float) -> torch.Tensor:
    """Return y = r + gamma * (1 - d) * (min_q - alpha * log_prob)."""
    return reward + gamma * (1.0 - done) * (min_q - alpha * log_prob)


def polyak_update(targets: nn.Module, mains: nn.Module, rho: float) -> None:
    """Move target parameters toward the mains: t <- rho t + (1 - rho) m."""
    with torch.no_grad():
        for target, main in zip(targets.parameters(), mains.parameters()):
            if target.shape != main.shape:
                raise ValueError("Target and main shapes differ")
            target.mul_(rho)
            target.add_((1.0 - rho) * main)


def _check_finite(value: torch.Tensor, parameters: list[nn.Parameter],
                  what: str) -> None:
    """Raise NonFiniteGradient if a loss or any gradient is not finite."""
    if not torch.isfinite(value).all():
        raise NonFiniteGradient(f"{what} loss is {value.item()}")
    for parameter in parameters:
        if parameter.grad is not None and not torch.isfinite(
                parameter.grad).all():
            raise NonFiniteGradient(f"{what} gradient is not finite")


class SacAgent:
    """The actor, twin critics, their targets and optimizers."""

    def __init__(self, state_dim: int, n_providers: int,
                 hyper: SacHyperparams = SacHyperparams(),
                 init_seed: int = 0, explore_seed: int = 0,
                 dtype: torch.dtype = torch.float32) -> None:
        """Create the five parameter sets; targets start as copies."""
        self.state_dim = state_dim
        self.n_providers = n_providers
        self.hyper = hyper
        self.dtype = dtype

        torch.manual_seed(init_seed)
        hidden = tuple(hyper.hidden_sizes)
        self.actor = Actor(state_dim, n_providers, hidden).to(dtype)
        self.q1 = Critic(state_dim, n_providers, hidden).to(dtype)
        self.q2 = Critic(state_dim, n_providers, hidden).to(dtype)
        self.q1_targ = copy.deepcopy(self.q1)
        self.q2_targ = copy.deepcopy(self.q2)
        for parameter in [*self.q1_targ.parameters(),
                          *self.q2_targ.parameters()]:
            parameter.requires_grad_(False)

        self.q_parameters = [*self.q1.parameters(), *self.q2.parameters()]
        self.actor_optimizer = torch.optim.Adam(self.actor.parameters(),
                                                lr=hyper.lr)
        self.q_optimizer = torch.optim.Adam(self.q_parameters, lr=hyper.lr)
        self.generator = torch.Generator().manual_seed(explore_seed)

    def as_tensor(self, values: Any) -> torch.Tensor:
        """Convert an array to a tensor of the agent's dtype."""
        return torch.as_tensor(np.asarray(values), dtype=self.dtype)

    def policy_forward(self, state: torch.Tensor,
                       deterministic: bool = False,
                       noise: torch.Tensor | None = None) -> PolicyOutput:
        """Run the actor, refusing states with NaN or infinity."""
        if not torch.isfinite(state).all():
            raise NonFiniteState("State contains NaN or infinity")
        return self.actor(state, deterministic, self.generator, noise)

    def act(self, state: np.ndarray, deterministic: bool = False
            ) -> np.ndarray:
        """Return a proto-action for one state."""
        with torch.no_grad():
            output = self.policy_forward(self.as_tensor(state)[None],
                                         deterministic)
        return output.proto[0].cpu().numpy().astype(np.float64)

    def select_action(self, state: np.ndarray) -> np.ndarray:
        """Return the binary action of the deterministic policy."""
        return nearest_binary_action(self.act(state, deterministic=True))

    def q_target(self, batch: Batch) -> torch.Tensor:
        """Return the soft Bellman targets of a batch, detached."""
        with torch.no_grad():
            sample = self.policy_forward(batch.next_states)
            min_q = torch.min(self.q1_targ(batch.next_states, sample.proto),
                              self.q2_targ(batch.next_states, sample.proto))
            return soft_bellman_target(batch.rewards, batch.dones, min_q,
                                       sample.log_prob, self.hyper.gamma,
                                       self.hyper.alpha)

    def critic_losses(self, batch: Batch, y: torch.Tensor
                      ) -> tuple[torch.Tensor, torch.Tensor]:
        """Return the mean squared errors of both critics."""
        loss_q1 = ((self.q1(batch.states, batch.protos) - y) ** 2).mean()
        loss_q2 = ((self.q2(batch.states, batch.protos) - y) ** 2).mean()
        return loss_q1, loss_q2

    def update_critics(self, batch: Batch, y: torch.Tensor) -> float:
        """Take one gradient step on both critics; return the mean MSE."""
        loss_q1, loss_q2 = self.critic_losses(batch, y.detach())
        loss = loss_q1 + loss_q2

        self.q_optimizer.zero_grad()
        loss.backward()
        _check_finite(loss, self.q_parameters, "Critic")
        self.q_optimizer.step()
        return float(loss.item()) / 2.0

    def actor_objective(self, states: torch.Tensor,
                        noise: torch.Tensor | None = None) -> torch.Tensor:
        """Return mean(min_i Q_i(s, a~) - alpha * log pi(a~ | s))."""
        sample = self.policy_forward(states, noise=noise)
        min_q = torch.min(self.q1(states, sample.proto),
                          self.q2(states, sample.proto))
        return (min_q - self.hyper.alpha * sample.log_prob).mean()

    def update_actor(self, batch: Batch) -> float:
        """Take one gradient ascent step on the actor with critics frozen."""
        for parameter in self.q_parameters:
            parameter.requires_grad_(False)
        try:
            objective = self.actor_objective(batch.states)
            self.actor_optimizer.zero_grad()
            (-objective).backward()
            _check_finite(objective, list(self.actor.parameters()), "Actor")
            self.actor_optimizer.step()
        finally:
            for parameter in self.q_parameters:
                parameter.requires_grad_(True)
        return float(objective.item())

    def update(self, batch: Batch) -> tuple[float, float]:
        """Run one round of target, critic, actor and polyak updates."""
        y = self.q_target(batch)
        critic_loss = self.update_critics(batch, y)
        actor_objective = self.update_actor(batch)
        polyak_update(self.q1_targ, self.q1, self.hyper.rho)
        polyak_update(self.q2_targ, self.q2, self.hyper.rho)
        return critic_loss, actor_objective

    def get_state(self) -> dict[str, Any]:
        """Return every parameter set, optimizer and the noise generator."""
        return {"actor": self.actor.state_dict(),
                "q1": self.q1.state_dict(),
                "q2": self.q2.state_dict(),
                "q1_targ": self.q1_targ.state_dict(),
                "q2_targ": self.q2_targ.state_dict(),
                "actor_optimizer": self.actor_optimizer.state_dict(),
                "q_optimizer": self.q_optimizer.state_dict(),
                "generator": self.generator.get_state()}

    def set_state(self, state: dict[str, Any]) -> None:
        """Restore a state returned by get_state()."""
        self.actor.load_state_dict(state["actor"])
        self.q1.load_state_dict(state["q1"])
        self.q2.load_state_dict(state["q2"])
        self.q1_targ.load_state_dict(state["q1_targ"])
        self.q2_targ.load_state_dict(state["q2_targ"])
        self.actor_optimizer.load_state_dict(state["actor_optimizer"])
        self.q_optimizer.load_state_dict(state["q_optimizer"])
        self.generator.set_state(state["generator"])


@dataclass
class EpochRecord:
    """One row of the training log."""

    epoch: int
    test_ap50: float
    test_map: float
    test_reward: float
    episode_cost: float
    selection_counts: list[int]
    critic_loss: float
    actor_objective: float
    wall_seconds: float


@dataclass
class TrainingLog:
    """The per-epoch test results of a run."""

    provider_names: list[str]
    rows: list[EpochRecord] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        """Return the log as a table, one count column per provider."""
        table = []
        for row in self.rows:
            entry = asdict(row)
            counts = entry.pop("selection_counts")
            for name, count in zip(self.provider_names, counts):
                entry[f"count_{name}"] = count
            table.append(entry)
        return pd.DataFrame(table)

    def save_csv(self, path: Path) -> None:
        """Write the log as CSV."""
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.6f")


def save_checkpoint(path: Path, agent: SacAgent, buffer: ReplayBuffer,
                    env: FederationEnv, log: TrainingLog, state: np.ndarray,
                    step: int, epoch: int, seeds: TrainingSeeds,
                    explore_rng: np.random.Generator) -> None:
    """Write everything needed to resume training after an epoch."""
    path.parent.mkdir(parents=True, exist_ok=True)
    temporary = path.with_suffix(".tmp")
    torch.save({"version": CHECKPOINT_VERSION,
                "hyper": asdict(agent.hyper),
                "seeds": asdict(seeds),
                "state_dim": agent.state_dim,
                "n_providers": agent.n_providers,
                "state": state,
                "step": step,
                "epoch": epoch,
                "agent": agent.get_state(),
                "buffer": buffer.get_state(),
                "env": env.get_state(),
                "explore_rng": explore_rng.bit_generator.state,
                "log": [asdict(row) for row in log.rows]}, temporary)
    temporary.replace(path)


def load_checkpoint(path: Path) -> dict[str, Any]:
    """Read a checkpoint, raising CheckpointMissing if it is absent."""
    if not path.exists():
        raise CheckpointMissing(f"No checkpoint at {path}")
    return torch.load(path, weights_only=False)


def agent_from_checkpoint(path: Path,
                          dtype: torch.dtype = torch.float32) -> SacAgent:
    """Rebuild a trained agent from a checkpoint file."""
    checkpoint = load_checkpoint(path)
    hyper_fields = dict(checkpoint["hyper"])
    hyper_fields["hidden_sizes"] = tuple(hyper_fields["hidden_sizes"])
    agent = SacAgent(checkpoint["state_dim"], checkpoint["n_providers"],
                     SacHyperparams(**hyper_fields), dtype=dtype)
    agent.set_state(checkpoint["agent"])
    return agent


@dataclass
class TrainingResult:
    """A trained agent and its log."""

    agent: SacAgent
    log: TrainingLog


def train(env: FederationEnv,
          hyper: SacHyperparams = SacHyperparams(),
          seeds: TrainingSeeds = TrainingSeeds(),
          epochs: int = 100,
          steps_per_epoch: int = 2000,
          checkpoint_path: Path | None = None,
          resume: bool = False) -> TrainingResult:
    """
    Train the agent on the environment.

    The first start_steps actions come from uniform random proto-actions,
    the rest from the stochastic policy. Every update_every steps (after
    update_after) the agent runs updates_per_round update rounds. After
    each epoch a deterministic test episode over the trace in order is
    logged and a checkpoint is written.

    With resume, training continues from the checkpoint at
    checkpoint_path and reproduces the log of an uninterrupted run.
    """
    if epochs < 1 or steps_per_epoch < 1:
        raise ValueError("epochs and steps_per_epoch must be positive")

    agent = SacAgent(env.feature_dim, env.n_providers, hyper,
                     seeds.init_seed, seeds.explore_seed)
    buffer = ReplayBuffer(hyper.capacity, seeds.explore_seed + 1)
    explore_rng = np.random.default_rng(seeds.explore_seed)
    log = TrainingLog(list(env.trace.header.provider_names))
    step = 0
    first_epoch = 1
    state = env.reset(seed=seeds.env_seed, shuffle=True)

    if resume:
        if checkpoint_path is None:
            raise CheckpointMissing("Resume needs a checkpoint path")
        checkpoint = load_checkpoint(checkpoint_path)
        agent.set_state(checkpoint["agent"])
        buffer.set_state(checkpoint["buffer"])
        env.set_state(checkpoint["env"])
        explore_rng.bit_generator.state = checkpoint["explore_rng"]
        log.rows = [EpochRecord(**row) for row in checkpoint["log"]]
        step = int(checkpoint["step"])
        first_epoch = int(checkpoint["epoch"]) + 1
        state = checkpoint["state"]
        logger.info("Resumed at epoch %d, step %d", first_epoch, step)

    for epoch in range(first_epoch, epochs + 1):
        started = time.perf_counter()
        critic_losses: list[float] = []
        actor_objectives: list[float] = []

        for _ in range(steps_per_epoch):
            if step < hyper.start_steps:
                proto = explore_rng.uniform(size=env.n_providers)
            else:
                proto = agent.act(state)
            action = nearest_binary_action(proto)
            outcome = env.step(action)
            buffer.store(Transition(state, action, proto, outcome.reward,
                                    outcome.next_state, outcome.done))
            state = outcome.next_state
            if outcome.done:
                state = env.reset(shuffle=True)
            step += 1

            if step >= hyper.update_after and step % hyper.update_every == 0:
                for _ in range(hyper.updates_per_round):
                    batch = buffer.sample(hyper.batch_size)
                    critic_loss, actor_objective = agent.update(batch)
                    critic_losses.append(critic_loss)
                    actor_objectives.append(actor_objective)

        summary = run_test_episode(
            env, lambda index, test_state: agent.select_action(test_state))
        metrics = evaluate_dataset(summary.predictions,
                                   env.evaluation_ground_truth())
        record = EpochRecord(
            epoch, metrics.ap50, metrics.map, summary.mean_reward,
            summary.episode_cost, summary.selection_counts.tolist(),
            float(np.mean(critic_losses)) if critic_losses else 0.0,
            float(np.mean(actor_objectives)) if actor_objectives else 0.0,
            time.perf_counter() - started)
        log.rows.append(record)
        logger.info("Epoch %d: AP50 %.4f, mAP %.4f, cost %.3f, counts %s",
                    epoch, record.test_ap50, record.test_map,
                    record.episode_cost, record.selection_counts)

        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, agent, buffer, env, log, state,
                            step, epoch, seeds, explore_rng)

    return TrainingResult(agent, log)
