"""Recurrent policy over module-block genomes, trained with REINFORCE.

The policy emits 8 categorical decisions per genome: for each cell and each
subcell, an input selector then an operation. The input head of cell c has
exactly c logits, so sampled genomes are valid by construction. A moving
average of past rewards serves as the REINFORCE baseline.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dten
from .optim import Adam, clip_global_norm
from .search_space import DEFAULT_SPACE, Genome, SearchSpaceSpec, SubcellGene, validate
from .tensor import Tensor, buffer, log_softmax, matmul, param, sigmoid, softmax, tanh

__all__ = ["Controller", "SampledArch"]


@dataclass(frozen=True)
class SampledArch:
    genome: Genome
    log_prob: float
    entropy: float


_GATES = ("i", "f", "g", "o")


class Controller:
    """Single-layer LSTM policy with per-decision embeddings and heads.

    Decision order is fixed (cell 1 subcell 1 input, its op, cell 1
    subcell 2 input, op, then cell 2 likewise); log-probabilities are sums
    over that sequence.
    """

    def __init__(self, space: SearchSpaceSpec = DEFAULT_SPACE, hidden: int = 64,
                 temperature: float = 1.0, entropy_weight: float = 1e-4,
                 baseline_decay: float = 0.95, lr: float = 0.05,
                 grad_clip: float = 5.0, seed: int = 0):
        if temperature <= 0:
            raise ValueError(f"temperature must be positive, got {temperature}")
        self.space = space
        self.hidden = hidden
        self.temperature = temperature
        self.entropy_weight = entropy_weight
        self.baseline_decay = baseline_decay
        self.grad_clip = grad_clip
        self.baseline = 0.0
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(seed))
        self.adam = Adam(list(self.params.values()), lr=lr)

    # -- parameters ---------------------------------------------------------

    def _init_params(self, rng: np.random.Generator) -> None:
        h = self.hidden
        n_ops = len(self.space.ops)

        def uniform(shape):
            return param(rng.uniform(-0.1, 0.1, shape))

        self.params["start_emb"] = uniform((1, h))
        self.params["emb_op"] = uniform((n_ops, h))
        self.params["emb_input"] = uniform((self.space.n_cells, h))
        for gate in _GATES:
            self.params[f"lstm.W{gate}"] = uniform((h, h))
            self.params[f"lstm.U{gate}"] = uniform((h, h))
            self.params[f"lstm.b{gate}"] = param(np.zeros(h))
        # zero-initialized heads make a fresh policy exactly uniform
        self.params["head_op.W"] = param(np.zeros((h, n_ops)))
        self.params["head_op.b"] = param(np.zeros(n_ops))
        for cell in range(1, self.space.n_cells + 1):
            self.params[f"head_in{cell}.W"] = param(np.zeros((h, cell)))
            self.params[f"head_in{cell}.b"] = param(np.zeros(cell))

    def _lstm_step(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        p = self.params
        gates = {}
        for gate in _GATES:
            z = matmul(x, p[f"lstm.W{gate}"]) + matmul(h, p[f"lstm.U{gate}"]) + p[f"lstm.b{gate}"]
            gates[gate] = tanh(z) if gate == "g" else sigmoid(z)
        c_new = gates["f"] * c + gates["i"] * gates["g"]
        h_new = gates["o"] * tanh(c_new)
        return h_new, c_new

    # -- rollout --------------------------------------------------------------

    def _rollout(self, actions: list[int] | None = None,
                 rng: np.random.Generator | None = None,
                 argmax: bool = False):
        """Run the decision sequence; sample, follow given actions, or argmax.

        Returns (genome, total log-prob Tensor, total entropy Tensor, actions).
        """
        h = Tensor(np.zeros((1, self.hidden)))
        c = Tensor(np.zeros((1, self.hidden)))
        x = self.params["start_emb"]
        chosen: list[int] = []
        log_prob_total = None
        entropy_total = None
        cells = []
        step = 0
        for cell in range(1, self.space.n_cells + 1):
            genes = []
            for _ in range(self.space.n_subcells):
                sel, lp, ent, h, c, x = self._decide(
                    x, h, c, f"head_in{cell}", "emb_input",
                    actions, chosen, rng, argmax, step)
                step += 1
                log_prob_total = lp if log_prob_total is None else log_prob_total + lp
                entropy_total = ent if entropy_total is None else entropy_total + ent
                op_idx, lp, ent, h, c, x = self._decide(
                    x, h, c, "head_op", "emb_op",
                    actions, chosen, rng, argmax, step)
                step += 1
                log_prob_total = log_prob_total + lp
                entropy_total = entropy_total + ent
                genes.append(SubcellGene(sel, self.space.ops[op_idx]))
            cells.append(tuple(genes))
        return Genome(tuple(cells)), log_prob_total, entropy_total, chosen

    def _decide(self, x, h, c, head: str, emb: str, actions, chosen, rng, argmax, step):
        h, c = self._lstm_step(x, h, c)
        logits = matmul(h, self.params[head + ".W"]) + self.params[head + ".b"]
        if self.temperature != 1.0:
            logits = logits * (1.0 / self.temperature)
        logp = log_softmax(logits, axis=-1)
        probs = softmax(logits, axis=-1)
        n = logits.shape[1]
        if actions is not None:
            a = actions[step]
        elif argmax:
            a = int(np.argmax(logp.data[0]))
        else:
            pvec = probs.data[0].astype(np.float64)
            a = int(rng.choice(n, p=pvec / pvec.sum()))
        chosen.append(a)
        onehot = np.zeros((1, n), dtype=logp.data.dtype)
        onehot[0, a] = 1.0
        lp = (logp * Tensor(onehot)).sum()
        ent = -(probs * logp).sum()
        table = self.params[emb]
        emb_onehot = np.zeros((1, table.shape[0]), dtype=logp.data.dtype)
        emb_onehot[0, a] = 1.0
        x_next = matmul(Tensor(emb_onehot), table)
        return a, lp, ent, h, c, x_next

    # -- public API -------------------------------------------------------------

    def sample(self, rng: np.random.Generator) -> SampledArch:
        """Draw one genome; decisions are masked to legal choices by design."""
        genome, lp, ent, _ = self._rollout(rng=rng)
        return SampledArch(genome, float(lp.data), float(ent.data))

    def argmax_genome(self) -> Genome:
        """Deterministic genome from per-step max-probability actions."""
        genome, _, _, _ = self._rollout(argmax=True)
        return genome

    def score(self, genome: Genome) -> tuple[Tensor, Tensor]:
        """Recompute (log_prob, entropy) of a genome with graph attached."""
        problems = validate(genome, self.space)
        if problems:
            raise ValueError("invalid genome: " + "; ".join(problems))
        actions = []
        for cell in genome.cells:
            for gene in cell:
                actions.append(gene.input_sel)
                actions.append(int(gene.op))
        _, lp, ent, _ = self._rollout(actions=actions)
        return lp, ent

    def reinforce_step(self, batch: list[tuple[SampledArch, float]]) -> dict:
        """One policy-gradient ascent step on advantage-weighted log-probs
        plus an entropy bonus; the reward baseline updates afterwards."""
        if not batch:
            raise ValueError("reinforce_step requires a non-empty batch")
        loss = None
        entropies = []
        for arch, reward in batch:
            lp, ent = self.score(arch.genome)
            advantage = reward - self.baseline
            term = lp * (-advantage) - ent * self.entropy_weight
            loss = term if loss is None else loss + term
            entropies.append(float(ent.data))
        loss.backward()
        grad_norm = clip_global_norm(list(self.params.values()), self.grad_clip)
        self.adam.step()
        self.adam.zero_grad()
        rewards = [r for _, r in batch]
        mean_reward = float(np.mean(rewards))
        self.baseline = (
            self.baseline_decay * self.baseline + (1 - self.baseline_decay) * mean_reward
        )
        return {
            "mean_reward": mean_reward,
            "baseline": self.baseline,
            "mean_entropy": float(np.mean(entropies)),
            "loss": float(loss.data),
            "grad_norm": grad_norm,
        }

    # -- persistence -----------------------------------------------------------

    def save(self, directory: str | Path, seed: int | None = None) -> None:
        meta = {
            "hidden": self.hidden,
            "temperature": self.temperature,
            "entropy_weight": self.entropy_weight,
            "baseline_decay": self.baseline_decay,
            "grad_clip": self.grad_clip,
            "baseline": self.baseline,
            "lr": self.adam.lr,
            "seed": seed,
        }
        dten.save_arrays(directory, {k: t.data for k, t in self.params.items()}, meta)

    @classmethod
    def load(cls, directory: str | Path) -> "Controller":
        arrays, meta = dten.load_arrays(directory)
        ctrl = cls(
            hidden=meta["hidden"],
            temperature=meta["temperature"],
            entropy_weight=meta["entropy_weight"],
            baseline_decay=meta["baseline_decay"],
            lr=meta["lr"],
            grad_clip=meta["grad_clip"],
        )
        ctrl.baseline = meta["baseline"]
        if set(arrays) != set(ctrl.params):
            raise dten.DtenError(f"{directory}: controller checkpoint does not match")
        for name, t in ctrl.params.items():
            t.data = arrays[name].astype(t.data.dtype)
            t.grad = np.zeros_like(t.data)
        return ctrl
