"""Actor-critic networks: a graph-convolution + self-attention embedding of
the static instruction graph, a dense embedding of the dynamic device state,
and MLP heads emitting masked placement logits and a state value.

Actor and critic share no parameters; each owns its own graph module.  A
baseline mode bypasses the graph module entirely, feeding zeros in place of
the graph embedding.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .env import Observation
from .ir_graph import NODE_FEATURE_NAMES, IRGraph, node_features

NUM_NODE_FEATURES = len(NODE_FEATURE_NAMES)


class CheckpointMismatchError(ValueError):
    """Checkpoint is incompatible with the requested device/model shape."""


@dataclass
class ActorCriticOutput:
    """One policy evaluation: masked placement logits (None on a dead end),
    the critic's state value, and the attention matrix for inspection."""

    logits: torch.Tensor | None
    value: float
    attention_scores: np.ndarray | None


@dataclass(frozen=True)
class ModelConfig:
    action_dim: int
    gnn_hidden: int = 64
    embed_width: int = 128
    attention_heads: int = 4
    mlp_hidden: int = 256
    use_gga: bool = True

    def __post_init__(self) -> None:
        for name in ("action_dim", "gnn_hidden", "embed_width", "attention_heads", "mlp_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.embed_width % self.attention_heads:
            raise ValueError("attention_heads must divide embed_width")


class GraphData:
    """Static per-graph tensors: node features and the symmetric
    degree-normalized adjacency with self-loops."""

    def __init__(self, g: IRGraph, dtype: torch.dtype = torch.float32):
        if g.num_nodes == 0:
            raise ValueError("empty graph")
        self.num_nodes = g.num_nodes
        self.features = torch.tensor(node_features(g), dtype=dtype)
        adj = torch.eye(g.num_nodes, dtype=dtype)
        for u, v in g.edges:
            adj[u, v] = 1.0
            adj[v, u] = 1.0
        d_inv_sqrt = adj.sum(dim=1).pow(-0.5)
        self.adj_norm = d_inv_sqrt.unsqueeze(1) * adj * d_inv_sqrt.unsqueeze(0)


class GraphConv(nn.Module):
    """Simplified graph convolution: normalized neighborhood aggregation,
    linear transform, rectifier."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.lin = nn.Linear(in_dim, out_dim)

    def forward(self, adj_norm: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.lin(adj_norm @ x))


class AttentionEncoderLayer(nn.Module):
    """Single transformer-style encoder layer over node embeddings that also
    exposes its (head-averaged) attention matrix."""

    def __init__(self, dim: int, heads: int, ff_mult: int = 2):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.query = nn.Linear(dim, dim)
        self.key = nn.Linear(dim, dim)
        self.value = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(
            nn.Linear(dim, ff_mult * dim),
            nn.ReLU(),
            nn.Linear(ff_mult * dim, dim),
        )

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        n, dim = x.shape
        q = self.query(x).view(n, self.heads, self.head_dim).transpose(0, 1)
        k = self.key(x).view(n, self.heads, self.head_dim).transpose(0, 1)
        v = self.value(x).view(n, self.heads, self.head_dim).transpose(0, 1)
        scores = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        mixed = (scores @ v).transpose(0, 1).reshape(n, dim)
        x = self.norm1(x + self.out(mixed))
        x = self.norm2(x + self.ff(x))
        return x, scores.mean(dim=0)


class GlobalGraphAttention(nn.Module):
    """Two graph convolutions, one attention encoder layer, and an
    attention-weighted pool conditioned on the node being placed."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.conv1 = GraphConv(NUM_NODE_FEATURES, cfg.gnn_hidden)
        self.conv2 = GraphConv(cfg.gnn_hidden, cfg.embed_width)
        self.encoder = AttentionEncoderLayer(cfg.embed_width, cfg.attention_heads)

    def node_embeddings(self, gd: GraphData) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.conv1(gd.adj_norm, gd.features)
        h = self.conv2(gd.adj_norm, h)
        return self.encoder(h)

    def forward(self, gd: GraphData, current_node: int) -> tuple[torch.Tensor, torch.Tensor]:
        z, attn = self.node_embeddings(gd)
        return attn[current_node] @ z, attn


class StateHead(nn.Module):
    """Dense embedding of the dynamic state concatenated with the graph
    embedding, followed by a three-layer MLP."""

    def __init__(self, cfg: ModelConfig, out_dim: int):
        super().__init__()
        self.cfg = cfg
        self.gga = GlobalGraphAttention(cfg)
        self.dyn = nn.Linear(cfg.action_dim + 1, cfg.mlp_hidden)
        self.fc1 = nn.Linear(cfg.mlp_hidden + cfg.embed_width, cfg.mlp_hidden)
        self.fc2 = nn.Linear(cfg.mlp_hidden, cfg.mlp_hidden)
        self.head = nn.Linear(cfg.mlp_hidden, out_dim)
        for layer in (self.dyn, self.fc1, self.fc2):
            nn.init.orthogonal_(layer.weight, gain=math.sqrt(2))
            nn.init.zeros_(layer.bias)

    def forward(self, dyn_vec: torch.Tensor, graph_emb: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.dyn(dyn_vec))
        x = torch.cat([x, graph_emb], dim=-1)
        x = F.relu(self.fc1(x))
        x = F.relu(self.fc2(x))
        return self.head(x)


def masked_logits(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Set masked-out entries to -inf so softmax gives them exactly zero
    probability and their pre-mask logits receive exactly zero gradient."""
    return logits.masked_fill(mask == 0, float("-inf"))


def masked_entropy(logits_masked: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Entropy over the valid-action support only."""
    valid = mask != 0
    logp = F.log_softmax(logits_masked, dim=-1)
    logp_safe = torch.where(valid, logp, torch.zeros_like(logp))
    p = torch.where(valid, logp.exp(), torch.zeros_like(logp))
    return -(p * logp_safe).sum(dim=-1)


class ActorCritic(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.actor = StateHead(cfg, cfg.action_dim)
        self.critic = StateHead(cfg, 1)
        # Zero policy head: the initial policy is uniform over valid actions.
        nn.init.zeros_(self.actor.head.weight)
        nn.init.zeros_(self.actor.head.bias)
        nn.init.orthogonal_(self.critic.head.weight, gain=1.0)
        nn.init.zeros_(self.critic.head.bias)
        self._graph_cache: dict[tuple[IRGraph, torch.dtype], GraphData] = {}

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def graph_data(self, g: IRGraph) -> GraphData:
        key = (g, self.dtype)
        if key not in self._graph_cache:
            self._graph_cache[key] = GraphData(g, dtype=self.dtype)
        return self._graph_cache[key]

    def _graph_embedding(
        self,
        head: StateHead,
        gd: GraphData,
        current_nodes: Sequence[int],
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        """Pooled embeddings for a batch of current nodes on one graph."""
        if not self.cfg.use_gga:
            zeros = torch.zeros(
                (len(current_nodes), self.cfg.embed_width), dtype=self.dtype
            )
            return zeros, None
        z, attn = head.gga.node_embeddings(gd)
        idx = torch.as_tensor(list(current_nodes), dtype=torch.long)
        return attn[idx] @ z, attn

    def actor_logits(
        self, obs: Observation, mask: np.ndarray | torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        """Masked logits for one observation, or a dead-end sentinel (None)
        when the mask has no support."""
        mask_t = torch.as_tensor(np.asarray(mask), dtype=torch.bool)
        if not bool(mask_t.any()):
            return None, None  # type: ignore[return-value]
        gd = self.graph_data(obs.graph)
        emb, attn = self._graph_embedding(self.actor, gd, [obs.current_node])
        dyn = torch.as_tensor(obs.dynamic_vector(), dtype=self.dtype).unsqueeze(0)
        logits = self.actor(dyn, emb)[0]
        return masked_logits(logits, mask_t), attn

    @torch.no_grad()
    def value(self, obs: Observation) -> float:
        gd = self.graph_data(obs.graph)
        emb, _ = self._graph_embedding(self.critic, gd, [obs.current_node])
        dyn = torch.as_tensor(obs.dynamic_vector(), dtype=self.dtype).unsqueeze(0)
        return float(self.critic(dyn, emb)[0, 0])

    @torch.no_grad()
    def outputs(self, obs: Observation, mask: np.ndarray) -> ActorCriticOutput:
        """Masked logits, value and attention for one observation."""
        logits, attn = self.actor_logits(obs, mask)
        return ActorCriticOutput(
            logits=logits,
            value=self.value(obs),
            attention_scores=attn.numpy() if attn is not None else None,
        )

    @torch.no_grad()
    def act(
        self,
        obs: Observation,
        mask: np.ndarray,
        rng: np.random.Generator,
        *,
        deterministic: bool = False,
    ) -> tuple[int | None, float, float]:
        """Sample (or argmax) an action; (None, 0, value) on an empty mask."""
        value = self.value(obs)
        logits, _ = self.actor_logits(obs, mask)
        if logits is None:
            return None, 0.0, value
        logp = F.log_softmax(logits, dim=-1)
        if deterministic:
            action = int(torch.argmax(logp))
        else:
            probs = logp.exp().double().numpy()
            probs = probs / probs.sum()
            action = int(rng.choice(len(probs), p=probs))
        return action, float(logp[action]), value

    def attention_for(self, g: IRGraph) -> np.ndarray:
        """Actor-side attention matrix, for inspection dumps."""
        gd = self.graph_data(g)
        with torch.no_grad():
            _, attn = self.actor.gga.node_embeddings(gd)
        return attn.numpy()

    def evaluate_actions(
        self,
        graphs: Sequence[IRGraph],
        graph_idx: torch.Tensor,
        current_nodes: torch.Tensor,
        dyn_vecs: torch.Tensor,
        masks: torch.Tensor,
        actions: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Log-probs, valid-support entropies and values for a step batch.

        Raises if any action falls on a masked entry (corrupted buffer).
        """
        batch = dyn_vecs.shape[0]
        if bool((torch.gather(masks, 1, actions.view(-1, 1)) == 0).any()):
            raise ValueError("buffer contains an action outside its stored mask")
        emb_a = torch.zeros((batch, self.cfg.embed_width), dtype=self.dtype)
        emb_c = torch.zeros((batch, self.cfg.embed_width), dtype=self.dtype)
        if self.cfg.use_gga:
            for gi in torch.unique(graph_idx):
                rows = (graph_idx == gi).nonzero(as_tuple=True)[0]
                gd = self.graph_data(graphs[int(gi)])
                cur = current_nodes[rows]
                za, attn_a = self.actor.gga.node_embeddings(gd)
                emb_a[rows] = attn_a[cur] @ za
                zc, attn_c = self.critic.gga.node_embeddings(gd)
                emb_c[rows] = attn_c[cur] @ zc
        logits = masked_logits(self.actor(dyn_vecs, emb_a), masks)
        logp = F.log_softmax(logits, dim=-1)
        log_probs = logp.gather(1, actions.view(-1, 1)).squeeze(1)
        entropies = masked_entropy(logits, masks)
        values = self.critic(dyn_vecs, emb_c).squeeze(-1)
        return log_probs, entropies, values


def rollout_policy(ac: ActorCritic, *, deterministic: bool = False):
    """Adapt an ActorCritic to the environment's policy-callable protocol."""

    def policy(obs: Observation, mask: np.ndarray, rng: np.random.Generator):
        action, log_prob, value = ac.act(obs, mask, rng, deterministic=deterministic)
        if action is None:
            raise RuntimeError("policy invoked on an empty mask")
        return action, log_prob, value

    return policy


def save_checkpoint(path, ac: ActorCritic, train_step: int) -> None:
    payload = {
        "format_version": 1,
        "model_config": asdict(ac.cfg),
        "actor_state": ac.actor.state_dict(),
        "critic_state": ac.critic.state_dict(),
        "train_step": int(train_step),
        "torch_rng_state": torch.get_rng_state(),
    }
    torch.save(payload, path)


def load_checkpoint(
    path,
    *,
    expect_action_dim: int | None = None,
    expect_embed_width: int | None = None,
) -> tuple[ActorCritic, int]:
    payload = torch.load(path, weights_only=True)
    if payload.get("format_version") != 1:
        raise CheckpointMismatchError(f"unsupported checkpoint version {payload.get('format_version')}")
    cfg = ModelConfig(**payload["model_config"])
    if expect_action_dim is not None and cfg.action_dim != expect_action_dim:
        raise CheckpointMismatchError(
            f"checkpoint action_dim {cfg.action_dim} does not match device action space {expect_action_dim}"
        )
    if expect_embed_width is not None and cfg.embed_width != expect_embed_width:
        raise CheckpointMismatchError(
            f"checkpoint embed_width {cfg.embed_width} does not match requested {expect_embed_width}"
        )
    ac = ActorCritic(cfg)
    ac.actor.load_state_dict(payload["actor_state"])
    ac.critic.load_state_dict(payload["critic_state"])
    return ac, int(payload["train_step"])
