"""Fine-tuning from pairwise human feedback: ILHF, Ensemble-ILHF and REINFORCE+KL."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Protocol

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from .agent import (
    AdamConfig,
    AgentParams,
    adam_update,
    grad_loglik_from_states,
    init_agent,
    loglik_from_states,
    pretrain,
    sample_responses,
    encode_prompt,
)
from .datagen import (
    ProcessParams,
    PromptBatch,
    bradley_terry_label,
    generate_prompts,
    ideal_log_likelihood,
)


class ZeroWeightWarning(UserWarning):
    """Every record in a batch carried zero weight; the update is a no-op."""


@dataclass
class InteractionBatch:
    prompts: PromptBatch
    responses: np.ndarray  # (N, 2, tau) in {-1, +1}
    states: np.ndarray  # (N, 2, tau, D) agent states paired with response tokens
    labels: np.ndarray  # (N,) in {0, 1}; 1 means response 1 was preferred
    ideal_loglik: np.ndarray  # (N, 2) log-likelihoods under the ideal process (oracle rewards)
    member: np.ndarray | None = None  # (N,) ensemble index that generated each pair

    def __len__(self) -> int:
        return self.responses.shape[0]


# ---------------------------------------------------------------- environments


class Environment(Protocol):
    tau: int

    def sample_prompts(self, n: int, rng: np.random.Generator) -> PromptBatch: ...

    def ideal_loglik(self, prompts: PromptBatch, responses: np.ndarray) -> np.ndarray: ...


@dataclass
class TokenProcessEnv:
    """Prompts from the shadow process; preferences and rewards from the ideal one."""

    ideal: ProcessParams
    shadow: ProcessParams
    tau: int

    def sample_prompts(self, n: int, rng: np.random.Generator) -> PromptBatch:
        return generate_prompts(self.shadow, self.tau, n, rng)

    def ideal_loglik(self, prompts: PromptBatch, responses: np.ndarray) -> np.ndarray:
        return ideal_log_likelihood(self.ideal, prompts, responses)


@dataclass
class DidacticEnv:
    """One fixed all-ones prompt and single-token responses.

    Humans prefer -1 over +1 two to one, generated by the logits
    ``{-1: ln sqrt 2, +1: -ln sqrt 2}``; those logits double as REINFORCE rewards.
    """

    prompt_length: int = 10
    tau: int = 1
    logit_minus: float = float(np.log(np.sqrt(2.0)))
    logit_plus: float = float(-np.log(np.sqrt(2.0)))

    @property
    def prompt(self) -> np.ndarray:
        return np.ones(self.prompt_length, dtype=np.int8)

    def sample_prompts(self, n: int, rng: np.random.Generator) -> PromptBatch:
        tokens = np.ones((n, self.prompt_length), dtype=np.int8)
        return PromptBatch(tokens, np.zeros((n, 1)), np.zeros((n, self.prompt_length, 1)))

    def ideal_loglik(self, prompts: PromptBatch, responses: np.ndarray) -> np.ndarray:
        return np.where(np.asarray(responses) < 0, self.logit_minus, self.logit_plus).sum(axis=-1)

    @property
    def target_p_plus(self) -> float:
        """Population preference for +1."""
        return float(expit(self.logit_plus - self.logit_minus))

    def ideal_token_log_probs(self) -> tuple[float, float]:
        """Normalised (log P(-1), log P(+1)) of the preference distribution."""
        z = logsumexp([self.logit_minus, self.logit_plus])
        return self.logit_minus - z, self.logit_plus - z


def didactic_setup(
    rng: np.random.Generator,
    D: int = 2,
    p_minus: float = 0.77,
    corpus_size: int = 1000,
    epochs: int = 200,
    tolerance: float = 0.005,
    max_epochs: int = 2000,
    adam: AdamConfig | None = None,
) -> tuple[DidacticEnv, AgentParams]:
    """Build the didactic environment and an agent pretrained to emit -1 w.p. ``p_minus``.

    The corpus holds exactly ``round(p_minus * corpus_size)`` documents ending in -1,
    so behavioural cloning on the response token converges to ``p_minus``.
    Training runs ``epochs`` epochs and continues until within ``tolerance``.
    """
    env = DidacticEnv()
    n_minus = int(round(p_minus * corpus_size))
    last = np.where(np.arange(corpus_size) < n_minus, -1, 1)
    rng.shuffle(last)
    corpus = np.concatenate(
        [np.ones((corpus_size, env.prompt_length), dtype=np.int8), last[:, None].astype(np.int8)], axis=1
    )
    mask = np.zeros(env.prompt_length + 1)
    mask[-1] = 1.0  # clone the response token only

    def close_enough(agent: AgentParams) -> bool:
        p_plus = expit(agent.phi @ encode_prompt(agent, env.prompt))
        return abs((1.0 - p_plus) - p_minus) < tolerance

    agent = pretrain(
        init_agent(rng, D), corpus, epochs, rng, adam=adam, token_weights=mask,
        until=close_enough, max_epochs=max_epochs,
    )
    return env, agent


# -------------------------------------------------------------- losses


def ilhf_losses_and_grads(
    phis: np.ndarray,
    states: np.ndarray,
    responses: np.ndarray,
    labels: np.ndarray,
    weights: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """ILHF loss and gradient for a stack of emission vectors (M, D) on one batch.

    ``weights`` is (N,) or (M, N), one bootstrap draw per member.
    """
    phis = np.atleast_2d(phis)
    labels = np.asarray(labels)
    n = labels.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    M = phis.shape[0]
    w = np.ones((M, n)) if weights is None else np.broadcast_to(np.asarray(weights, dtype=float), (M, n))
    if np.any(w < 0):
        raise ValueError("bootstrap weights must be nonnegative")
    dead = ~np.any(w > 0, axis=1)
    if np.any(dead):
        warnings.warn("all record weights are zero; skipping update", ZeroWeightWarning, stacklevel=2)

    logits = states @ phis.T  # (N, 2, tau, M)
    x = np.asarray(responses, dtype=float)[..., None]
    ll = log_expit(x * logits).sum(axis=2)  # (N, 2, M)
    rows = np.arange(n)
    chosen = ll[rows, labels].T  # (M, N)
    other = ll[rows, 1 - labels].T
    # -(ll_b - logsumexp(ll_0, ll_1)) = -log sigmoid(ll_b - ll_other)
    losses = -np.sum(w * log_expit(chosen - other), axis=1) / n

    # d loss / d ll_{n,b} = -w q_other for the chosen response, +w q_other for the other
    q = w * expit(other - chosen)  # (M, N)
    coeff = np.empty((n, 2, M))
    coeff[rows, labels] = -q.T
    coeff[rows, 1 - labels] = q.T
    resid = (x + 1.0) / 2.0 - expit(logits)  # d ll / d logit
    k = resid.shape[0] * resid.shape[1] * resid.shape[2]
    g = (coeff[:, :, None, :] * resid).reshape(k, M)
    grads = g.T @ states.reshape(k, -1) / n
    losses[dead] = 0.0
    grads[dead] = 0.0
    return losses, grads


def ilhf_loss_and_grad(
    phi: np.ndarray,
    states: np.ndarray,
    responses: np.ndarray,
    labels: np.ndarray,
    weights: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Mean KL between one-hot labels and the model's pairwise preference distribution.

    ``loss = -(1/N) sum_i w_i [ll_{i,b_i} - logsumexp(ll_{i,0}, ll_{i,1})]``.
    """
    losses, grads = ilhf_losses_and_grads(np.asarray(phi)[None], states, responses, labels, weights)
    return float(losses[0]), grads[0]


def binary_kl_logits(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """KL(Bern(sigmoid(a)) || Bern(sigmoid(b)))."""
    p = expit(a)
    return p * (log_expit(a) - log_expit(b)) + (1.0 - p) * (log_expit(-a) - log_expit(-b))


def reinforce_loss_and_grad(
    phi: np.ndarray,
    states: np.ndarray,
    responses: np.ndarray,
    rewards: np.ndarray,
    phi_pre: np.ndarray,
    beta: float,
) -> tuple[float, np.ndarray]:
    """Monte-Carlo policy gradient on oracle rewards plus a token-level KL penalty.

    The penalty is the mean, over every response state, of the exact binary KL
    from the current next-token distribution to the pretrained one.
    """
    if beta < 0:
        raise ValueError(f"KL coefficient must be >= 0, got {beta}")
    rewards = np.asarray(rewards, dtype=float)
    n = rewards.shape[0]
    ll = loglik_from_states(phi, states, responses)
    loss = -np.sum(ll * rewards) / n
    grad = -np.einsum("nb,nbd->d", rewards, grad_loglik_from_states(phi, states, responses)) / n
    if beta > 0:
        a = states @ phi
        b = states @ phi_pre
        loss += beta * float(np.mean(binary_kl_logits(a, b)))
        p = expit(a)
        coef = p * (1.0 - p) * (a - b)
        grad = grad + beta * np.einsum("nbt,nbtd->d", coef, states) / coef.size
    return float(loss), grad


def double_or_nothing(n: int, rng: np.random.Generator) -> np.ndarray:
    """Per-record bootstrap weights: 2 or 0 with equal probability."""
    if n < 1:
        raise ValueError("batch must be nonempty")
    return 2.0 * (rng.random(n) < 0.5)


# -------------------------------------------------------------- learners


class Learner:
    """Common response generation; subclasses own their parameters and update rule."""

    name: str = "learner"

    def __init__(self, agent: AgentParams, temperature: float = 1.0, adam: AdamConfig | None = None):
        self.agent = agent  # W_hat, U_hat frozen; agent.phi is the pretrained phi
        self.temperature = temperature
        self.adam = adam or AdamConfig()

    @property
    def phis(self) -> np.ndarray:
        """(M, D) emission vectors whose uniform mixture is the agent's policy."""
        raise NotImplementedError

    def choose_members(self, n: int, rng: np.random.Generator | None) -> np.ndarray | None:
        return None

    def respond(
        self,
        prompt_tokens: np.ndarray,
        tau: int,
        rng: np.random.Generator,
        member_rng: np.random.Generator | None = None,
        n_per_prompt: int = 2,
        temperature: float | None = None,
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
        n = np.atleast_2d(prompt_tokens).shape[0]
        member = self.choose_members(n, member_rng)
        phis = self.phis
        per_prompt = np.repeat(phis[:1], n, axis=0) if member is None else phis[member]
        temp = self.temperature if temperature is None else temperature
        responses, states = sample_responses(
            self.agent, prompt_tokens, tau, rng, temp, phis=per_prompt, n_per_prompt=n_per_prompt
        )
        return responses, states, member

    def update(self, batch: InteractionBatch, rng: np.random.Generator | None = None) -> float:
        raise NotImplementedError


class ILHFLearner(Learner):
    name = "ilhf"

    def __init__(self, agent: AgentParams, temperature: float = 1.0, adam: AdamConfig | None = None):
        super().__init__(agent, temperature, adam)
        self.phi = agent.phi.copy()
        self.opt = self.adam.init(self.phi)

    @property
    def phis(self) -> np.ndarray:
        return self.phi[None]

    def update(self, batch: InteractionBatch, rng: np.random.Generator | None = None) -> float:
        losses, grads = ilhf_losses_and_grads(self.phi[None], batch.states, batch.responses, batch.labels)
        self.phi, self.opt = adam_update(self.phi, grads[0], self.opt)
        return float(losses[0])


@dataclass
class EnsembleState:
    members: np.ndarray  # (M, D)
    anchors: np.ndarray  # (M, D), fixed after initialisation
    prior_scale: float
    eta: float

    @property
    def M(self) -> int:
        return self.members.shape[0]


def ensemble_init(
    phi_pre: np.ndarray, M: int, prior_scale: float, rng: np.random.Generator, eta: float = 1.0
) -> EnsembleState:
    """Members and their anchors drawn i.i.d. from N(phi_pre, prior_scale^2 I)."""
    if M < 1:
        raise ValueError(f"ensemble size must be >= 1, got {M}")
    if prior_scale < 0:
        raise ValueError(f"prior_scale must be >= 0, got {prior_scale}")
    draws = phi_pre + prior_scale * rng.standard_normal((M, phi_pre.shape[0]))
    return EnsembleState(draws.copy(), draws.copy(), prior_scale, eta)


class EnsembleILHFLearner(Learner):
    """Ensemble sampling: each prompt is answered by a uniformly drawn member;
    every member then takes one step on its own bootstrap of the batch, pulled
    towards its own anchor."""

    def __init__(
        self,
        agent: AgentParams,
        M: int,
        init_rng: np.random.Generator,
        prior_scale: float = 0.01,
        eta: float = 1.0,
        temperature: float = 1.0,
        adam: AdamConfig | None = None,
        bootstrap: bool = True,
    ):
        super().__init__(agent, temperature, adam)
        self.state = ensemble_init(agent.phi, M, prior_scale, init_rng, eta)
        self.opt = self.adam.init(self.state.members)
        self.bootstrap = bootstrap
        self.name = f"ensemble_{M}"

    @property
    def phis(self) -> np.ndarray:
        return self.state.members

    def choose_members(self, n: int, rng: np.random.Generator | None) -> np.ndarray:
        if rng is None:
            raise ValueError("ensemble learner needs a member-selection rng")
        return rng.integers(self.state.M, size=n)

    def update(self, batch: InteractionBatch, rng: np.random.Generator | None = None) -> float:
        n, M, eta = len(batch), self.state.M, self.state.eta
        w = np.stack([double_or_nothing(n, rng) for _ in range(M)]) if self.bootstrap else None
        members = self.state.members
        losses, grads = ilhf_losses_and_grads(members, batch.states, batch.responses, batch.labels, w)
        if eta != 0.0:
            offset = members - self.state.anchors
            losses = losses + eta * np.sum(offset * offset, axis=1)
            grads = grads + 2.0 * eta * offset
        self.state.members, self.opt = adam_update(members, grads, self.opt)
        return float(np.mean(losses))


class ReinforceLearner(Learner):
    def __init__(
        self, agent: AgentParams, beta: float, temperature: float = 1.0, adam: AdamConfig | None = None
    ):
        if beta < 0:
            raise ValueError(f"KL coefficient must be >= 0, got {beta}")
        super().__init__(agent, temperature, adam)
        self.beta = beta
        self.phi_pre = agent.phi.copy()
        self.phi = agent.phi.copy()
        self.opt = self.adam.init(self.phi)
        self.name = f"reinforce_{beta:g}"

    @property
    def phis(self) -> np.ndarray:
        return self.phi[None]

    def update(self, batch: InteractionBatch, rng: np.random.Generator | None = None) -> float:
        loss, grad = reinforce_loss_and_grad(
            self.phi, batch.states, batch.responses, batch.ideal_loglik, self.phi_pre, self.beta
        )
        self.phi, self.opt = adam_update(self.phi, grad, self.opt)
        return loss


# -------------------------------------------------------------- episodes


@dataclass
class EpisodeStreams:
    prompts: np.random.Generator
    responses: np.random.Generator
    labels: np.random.Generator
    members: np.random.Generator | None = None
    bootstrap: np.random.Generator | None = None


def collect_batch(learner: Learner, env: Environment, n: int, streams: EpisodeStreams) -> InteractionBatch:
    """Prompt, respond twice, and query the simulated human for each of ``n`` prompts."""
    prompts = env.sample_prompts(n, streams.prompts)
    responses, states, member = learner.respond(prompts.tokens, env.tau, streams.responses, streams.members)
    ll = env.ideal_loglik(prompts, responses)
    labels = bradley_terry_label(ll[:, 0], ll[:, 1], streams.labels)
    return InteractionBatch(prompts, responses, states, np.atleast_1d(labels), ll, member)


def run_episode(learner: Learner, env: Environment, n: int, streams: EpisodeStreams) -> InteractionBatch:
    """One interaction episode: collect ``n`` labelled pairs, then one optimizer step."""
    batch = collect_batch(learner, env, n, streams)
    learner.update(batch, streams.bootstrap)
    return batch


def ilhf_episode(learner: ILHFLearner, env: Environment, n: int, streams: EpisodeStreams) -> InteractionBatch:
    return run_episode(learner, env, n, streams)


def ensemble_episode(
    learner: EnsembleILHFLearner, env: Environment, n: int, streams: EpisodeStreams
) -> InteractionBatch:
    return run_episode(learner, env, n, streams)


def interaction_rows(episode: int, batch: InteractionBatch, learner: Learner) -> list[dict]:
    """Rows for the interaction log CSV; rewards are left blank unless the learner used them."""
    uses_rewards = isinstance(learner, ReinforceLearner)
    rows = []
    for i in range(len(batch)):
        rows.append(
            {
                "episode": episode,
                "prompt_id": i,
                "ensemble_index": "" if batch.member is None else int(batch.member[i]),
                "label": int(batch.labels[i]),
                "loglik0": float(batch.ideal_loglik[i, 0]),
                "loglik1": float(batch.ideal_loglik[i, 1]),
                "reward0": float(batch.ideal_loglik[i, 0]) if uses_rewards else "",
                "reward1": float(batch.ideal_loglik[i, 1]) if uses_rewards else "",
            }
        )
    return rows
