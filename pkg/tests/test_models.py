import math

from hypothesis import given, settings
from hypothesis import strategies as st

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from se_mapper.device import DeviceConfig
from se_mapper.env import MappingEnv, Observation
from se_mapper.ir_graph import IRGraph
from se_mapper.models import (
    ActorCritic,
    CheckpointMismatchError,
    GraphData,
    ModelConfig,
    load_checkpoint,
    masked_entropy,
    masked_logits,
    save_checkpoint,
)


def tiny_config(action_dim=24, use_gga=True):
    return ModelConfig(
        action_dim=action_dim, gnn_hidden=16, embed_width=16, attention_heads=2,
        mlp_hidden=32, use_gga=use_gga,
    )


def make_obs(g, cfg, current=0):
    return Observation(
        ts_occupancy=np.zeros(cfg.action_dim, dtype=np.float32), current_node=current, graph=g
    )


@pytest.fixture
def device4():
    return DeviceConfig(num_tiles=4, num_slots=6, ii=3)


@pytest.fixture
def ac(device4):
    torch.manual_seed(0)
    return ActorCritic(tiny_config(device4.action_dim))


class TestGlobalGraphAttention:
    def test_single_node_graph(self, ac):
        g = IRGraph.build("one", [(0, "a", [])], [])
        gd = ac.graph_data(g)
        with torch.no_grad():
            z, attn = ac.actor.gga.node_embeddings(gd)
            pooled, attn2 = ac.actor.gga(gd, 0)
        assert attn.shape == (1, 1)
        assert float(attn[0, 0]) == pytest.approx(1.0)
        assert torch.allclose(pooled, z[0])

    def test_empty_graph_rejected(self):
        g = IRGraph(name="empty", nodes=(), edges=())
        with pytest.raises(ValueError, match="empty"):
            GraphData(g)

    def test_attention_rows_stochastic(self, ac, fft_graph):
        gd = ac.graph_data(fft_graph)
        with torch.no_grad():
            _, attn = ac.actor.gga.node_embeddings(gd)
        sums = attn.sum(dim=1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)

    def test_permutation_invariance(self, ac):
        nodes = [(0, "a", []), (1, "b", []), (2, "c", []), (3, "d", [])]
        edges = [(0, 1), (0, 2), (1, 3), (2, 3)]
        g = IRGraph.build("perm", nodes, edges)
        perm = {0: 2, 1: 0, 2: 3, 3: 1}
        g2 = IRGraph.build(
            "perm2",
            [(perm[i], op, list(v)) for i, op, v in nodes],
            [(perm[u], perm[v]) for u, v in edges],
        )
        with torch.no_grad():
            pooled_a, _ = ac.actor.gga(ac.graph_data(g), 1)
            pooled_b, _ = ac.actor.gga(ac.graph_data(g2), perm[1])
        assert torch.allclose(pooled_a, pooled_b, atol=1e-5)

    def test_duplicated_components_pool_identically(self, ac):
        single = IRGraph.build(
            "single", [(0, "a", []), (1, "b", []), (2, "c", [])], [(0, 1), (0, 2)]
        )
        doubled = IRGraph.build(
            "doubled",
            [(i, op, []) for i, op, _ in [(0, "a", []), (1, "b", []), (2, "c", [])]]
            + [(i + 3, op, []) for i, op, _ in [(0, "a", []), (1, "b", []), (2, "c", [])]],
            [(0, 1), (0, 2), (3, 4), (3, 5)],
        )
        with torch.no_grad():
            pooled_one, _ = ac.actor.gga(ac.graph_data(single), 1)
            pooled_two, _ = ac.actor.gga(ac.graph_data(doubled), 1)
        assert torch.allclose(pooled_one, pooled_two, atol=1e-5)


class TestActor:
    def test_single_valid_action_certain(self, ac, device4, chain2):
        obs = make_obs(chain2, device4)
        mask = np.zeros(device4.action_dim, dtype=np.int8)
        mask[7] = 1
        with torch.no_grad():
            logits, _ = ac.actor_logits(obs, mask)
        probs = F.softmax(logits, dim=-1)
        assert float(probs[7]) == pytest.approx(1.0)
        action, log_prob, _ = ac.act(obs, mask, np.random.default_rng(0))
        assert action == 7 and log_prob == pytest.approx(0.0)

    def test_fresh_policy_uniform_chi_squared(self, ac, device4, chain2):
        from scipy import stats

        obs = make_obs(chain2, device4)
        mask = np.ones(device4.action_dim, dtype=np.int8)
        with torch.no_grad():
            logits, _ = ac.actor_logits(obs, mask)
        probs = F.softmax(logits, dim=-1).double().numpy()
        probs = probs / probs.sum()
        rng = np.random.default_rng(42)
        draws = rng.choice(device4.action_dim, size=10_000, p=probs)
        counts = np.bincount(draws, minlength=device4.action_dim)
        result = stats.chisquare(counts)
        assert result.pvalue > 0.01

    def test_masked_probabilities_exactly_zero(self, ac, device4, chain2):
        obs = make_obs(chain2, device4)
        rng = np.random.default_rng(3)
        for _ in range(20):
            mask = (rng.random(device4.action_dim) < 0.4).astype(np.int8)
            if not mask.any():
                mask[0] = 1
            with torch.no_grad():
                logits, _ = ac.actor_logits(obs, mask)
            probs = F.softmax(logits, dim=-1).numpy()
            assert (probs[mask == 0] == 0.0).all()

    def test_sampled_actions_respect_mask(self, ac, device4, chain2):
        obs = make_obs(chain2, device4)
        rng = np.random.default_rng(4)
        mask = np.zeros(device4.action_dim, dtype=np.int8)
        mask[[1, 5, 9]] = 1
        for _ in range(200):
            action, _, _ = ac.act(obs, mask, rng)
            assert action in (1, 5, 9)

    def test_empty_mask_dead_end_sentinel(self, ac, device4, chain2):
        obs = make_obs(chain2, device4)
        action, log_prob, value = ac.act(
            obs, np.zeros(device4.action_dim, dtype=np.int8), np.random.default_rng(0)
        )
        assert action is None and log_prob == 0.0 and math.isfinite(value)

    def test_masked_logit_gradient_exactly_zero(self):
        logits = torch.randn(10, requires_grad=True)
        mask = torch.tensor([1, 0, 1, 0, 1, 1, 0, 0, 1, 0])
        out = masked_logits(logits, mask)
        loss = -F.log_softmax(out, dim=-1)[2]
        loss.backward()
        assert (logits.grad[mask == 0] == 0.0).all()
        assert logits.grad[mask == 1].abs().sum() > 0


class TestCritic:
    def test_deterministic(self, ac, device4, chain2):
        obs = make_obs(chain2, device4)
        assert ac.value(obs) == ac.value(obs)

    def test_fresh_value_bounded(self, ac, device4, chain2):
        assert abs(ac.value(make_obs(chain2, device4))) < 1e3

    def test_regression_to_constant_return(self, device4, chain2):
        torch.manual_seed(1)
        ac = ActorCritic(tiny_config(device4.action_dim))
        gd_graphs = [chain2]
        dyn = torch.zeros((4, device4.action_dim + 1))
        dyn[:, -1] = 0.5
        gidx = torch.zeros(4, dtype=torch.long)
        cur = torch.zeros(4, dtype=torch.long)
        mask = torch.ones((4, device4.action_dim), dtype=torch.int8)
        actions = torch.zeros(4, dtype=torch.long)
        target = torch.full((4,), -7.0)
        opt = torch.optim.Adam(ac.critic.parameters(), lr=1e-2)
        for _ in range(500):
            _, _, values = ac.evaluate_actions(gd_graphs, gidx, cur, dyn, mask, actions)
            loss = ((values - target) ** 2).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
        assert float(values.detach().mean()) == pytest.approx(-7.0, abs=0.5)


class TestEvaluateActions:
    def _batch(self, ac, device4, g, mask_rows, actions):
        n = len(actions)
        dyn = torch.zeros((n, device4.action_dim + 1))
        dyn[:, -1] = 0.5
        return (
            [g],
            torch.zeros(n, dtype=torch.long),
            torch.zeros(n, dtype=torch.long),
            dyn,
            torch.as_tensor(np.stack(mask_rows)),
            torch.as_tensor(actions, dtype=torch.long),
        )

    def test_single_valid_action(self, ac, device4, chain2):
        mask = np.zeros(device4.action_dim, dtype=np.int8)
        mask[3] = 1
        log_probs, entropies, _ = ac.evaluate_actions(*self._batch(ac, device4, chain2, [mask], [3]))
        assert float(log_probs.detach()[0]) == pytest.approx(0.0)
        assert float(entropies.detach()[0]) == pytest.approx(0.0)

    def test_uniform_entropy_is_ln_k(self, ac, device4, chain2):
        # The fresh policy head is zeroed, so logits are equal and the
        # masked distribution is uniform over its support.
        for k in (2, 5, 12):
            mask = np.zeros(device4.action_dim, dtype=np.int8)
            mask[:k] = 1
            _, entropies, _ = ac.evaluate_actions(*self._batch(ac, device4, chain2, [mask], [0]))
            assert float(entropies.detach()[0]) == pytest.approx(math.log(k), abs=1e-6)

    def test_entropy_matches_direct_summation(self, device4, chain2):
        torch.manual_seed(7)
        ac = ActorCritic(tiny_config(device4.action_dim))
        torch.nn.init.normal_(ac.actor.head.weight, std=0.5)
        torch.nn.init.normal_(ac.actor.head.bias, std=0.5)
        mask = np.ones(device4.action_dim, dtype=np.int8)
        obs = make_obs(chain2, device4)
        with torch.no_grad():
            logits, _ = ac.actor_logits(obs, mask)
        p = F.softmax(logits, dim=-1).double().numpy()
        expected = -(p * np.log(p)).sum()
        _, entropies, _ = ac.evaluate_actions(*self._batch(ac, device4, chain2, [mask], [0]))
        assert float(entropies.detach()[0]) == pytest.approx(expected, abs=1e-5)

    def test_action_outside_mask_raises(self, ac, device4, chain2):
        mask = np.zeros(device4.action_dim, dtype=np.int8)
        mask[1] = 1
        with pytest.raises(ValueError, match="outside its stored mask"):
            ac.evaluate_actions(*self._batch(ac, device4, chain2, [mask], [2]))


class TestBaselineMlpMode:
    def test_graph_embedding_ignored(self, device4, chain2, diamond):
        torch.manual_seed(2)
        ac = ActorCritic(tiny_config(device4.action_dim, use_gga=False))
        torch.nn.init.normal_(ac.actor.head.weight, std=0.5)
        mask = np.ones(device4.action_dim, dtype=np.int8)
        # chain2 node 0 and diamond node 1 share the normalized-id scalar
        # (1/2 and 2/4), so the dynamic inputs coincide exactly.
        with torch.no_grad():
            la, _ = ac.actor_logits(make_obs(chain2, device4, current=0), mask)
            lb, _ = ac.actor_logits(make_obs(diamond, device4, current=1), mask)
        assert torch.allclose(la, lb)

    def test_gga_mode_distinguishes_graphs(self, device4, chain2, diamond):
        torch.manual_seed(2)
        ac = ActorCritic(tiny_config(device4.action_dim, use_gga=True))
        torch.nn.init.normal_(ac.actor.head.weight, std=0.5)
        mask = np.ones(device4.action_dim, dtype=np.int8)
        with torch.no_grad():
            la, _ = ac.actor_logits(make_obs(chain2, device4, current=0), mask)
            lb, _ = ac.actor_logits(make_obs(diamond, device4, current=1), mask)
        assert not torch.allclose(la, lb)


class TestCheckpoint:
    def test_round_trip(self, ac, device4, chain2, tmp_path):
        path = tmp_path / "ckpt.pt"
        save_checkpoint(path, ac, train_step=17)
        loaded, step = load_checkpoint(path, expect_action_dim=device4.action_dim)
        assert step == 17
        mask = np.ones(device4.action_dim, dtype=np.int8)
        obs = make_obs(chain2, device4)
        with torch.no_grad():
            la, _ = ac.actor_logits(obs, mask)
            lb, _ = loaded.actor_logits(obs, mask)
        assert torch.equal(la, lb)
        assert ac.value(obs) == pytest.approx(loaded.value(obs))

    def test_action_dim_mismatch_rejected(self, ac, tmp_path):
        path = tmp_path / "ckpt.pt"
        save_checkpoint(path, ac, train_step=0)
        with pytest.raises(CheckpointMismatchError, match="action_dim"):
            load_checkpoint(path, expect_action_dim=384)

    def test_embed_width_mismatch_rejected(self, ac, tmp_path):
        path = tmp_path / "ckpt.pt"
        save_checkpoint(path, ac, train_step=0)
        with pytest.raises(CheckpointMismatchError, match="embed_width"):
            load_checkpoint(path, expect_embed_width=999)


class TestOutputs:
    def test_combined_forward(self, ac, device4, chain2):
        mask = np.ones(device4.action_dim, dtype=np.int8)
        mask[5:] = 0
        out = ac.outputs(make_obs(chain2, device4), mask)
        probs = F.softmax(out.logits, dim=-1)
        assert (probs[5:] == 0.0).all()
        assert math.isfinite(out.value)
        assert np.allclose(out.attention_scores.sum(axis=1), 1.0, atol=1e-6)

    def test_dead_end_sentinel(self, ac, device4, chain2):
        out = ac.outputs(make_obs(chain2, device4), np.zeros(device4.action_dim, dtype=np.int8))
        assert out.logits is None


class TestMaskedHelpers:
    def test_masked_entropy_all_valid_matches_categorical(self):
        logits = torch.randn(3, 8)
        mask = torch.ones(3, 8, dtype=torch.int8)
        ent = masked_entropy(masked_logits(logits, mask), mask)
        ref = torch.distributions.Categorical(logits=logits).entropy()
        assert torch.allclose(ent, ref, atol=1e-6)

    @settings(max_examples=60, deadline=None)
    @given(
        raw=st.lists(st.floats(-20, 20), min_size=2, max_size=16),
        mask_bits=st.lists(st.booleans(), min_size=2, max_size=16),
        data=st.data(),
    )
    def test_masked_distribution_invariants(self, raw, mask_bits, data):
        n = min(len(raw), len(mask_bits))
        logits = torch.tensor(raw[:n], dtype=torch.float64)
        mask = torch.tensor(mask_bits[:n], dtype=torch.int8)
        if not mask.any():
            mask[data.draw(st.integers(0, n - 1))] = 1
        out = masked_logits(logits, mask)
        probs = F.softmax(out, dim=-1)
        assert (probs[mask == 0] == 0.0).all()
        assert float(probs.sum()) == pytest.approx(1.0, abs=1e-9)
        ent = float(masked_entropy(out, mask))
        assert -1e-9 <= ent <= math.log(int(mask.sum())) + 1e-9
