"""Evaluation: KL to the ideal process, an exact enumeration oracle, and head-to-head scores."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from .agent import AgentParams, encode_prompt, loglik_from_states, response_states
from .datagen import (
    ProcessParams,
    PromptBatch,
    PromptRecord,
    generate_batch,
    ideal_log_likelihood,
    pre_states,
    token_log_probs,
)

MAX_ENUMERATION_TAU = 12


@dataclass
class MetricSeries:
    name: str
    values: list[float]  # index 0 is the pre-fine-tuning point
    seed: int
    fingerprint: str = ""


@dataclass
class HeadToHeadResult:
    candidate: str
    reference: str
    score_candidate: float
    score_reference: float
    ratio: float
    stderr: float


def mixture_loglik(phis: np.ndarray, states: np.ndarray, responses: np.ndarray) -> np.ndarray:
    """Log-likelihood under the uniform mixture over emission vectors ``phis`` (M, D)."""
    phis = np.atleast_2d(phis)
    if phis.shape[0] == 1:
        return loglik_from_states(phis[0], states, responses)
    logits = states @ phis.T  # (..., tau, M)
    per_member = log_expit(np.asarray(responses, dtype=float)[..., None] * logits).sum(axis=-2)
    return logsumexp(per_member, axis=-1) - np.log(phis.shape[0])


@dataclass
class KLEvalSet:
    """Ideal-process sequences and their agent states, reusable across episodes.

    Agent states depend only on the frozen recurrence, so once built, each
    evaluation is a dot product per token.
    """

    ideal_loglik: np.ndarray  # (n,)
    responses: np.ndarray  # (n, tau)
    agent_states: np.ndarray  # (n, tau, D)
    prompts: PromptBatch  # first half of each sequence, with its true states

    @classmethod
    def build(
        cls, ideal: ProcessParams, agent: AgentParams, tau: int, n_eval: int, rng: np.random.Generator
    ) -> "KLEvalSet":
        if n_eval < 1:
            raise ValueError("n_eval must be >= 1")
        s0 = rng.standard_normal((n_eval, ideal.d))
        seqs, _ = generate_batch(ideal, s0, 2 * tau, rng)
        true_states = pre_states(ideal.W, ideal.U, s0, seqs)
        responses = seqs[:, tau:]
        ideal_ll = token_log_probs(ideal.emission, true_states[:, tau:], responses).sum(axis=-1)
        hat = pre_states(agent.W_hat, agent.U_hat, np.zeros((n_eval, agent.D)), seqs)
        prompts = PromptBatch(seqs[:, :tau], s0, true_states[:, 1 : tau + 1])
        return cls(ideal_ll, responses, hat[:, tau:], prompts)

    def samples(self, phis: np.ndarray) -> np.ndarray:
        return self.ideal_loglik - mixture_loglik(phis, self.agent_states, self.responses)

    def kl(self, phis: np.ndarray) -> float:
        return float(np.mean(self.samples(phis)))


def kl_metric(
    ideal: ProcessParams,
    agent: AgentParams,
    tau: int,
    n_eval: int,
    rng: np.random.Generator,
    phis: np.ndarray | None = None,
    return_stderr: bool = False,
):
    """Monte-Carlo KL from the ideal response distribution to the agent's.

    Sequences of length ``2 tau`` are drawn from the ideal process; the second
    half is scored under both models. ``phis`` replaces ``agent.phi`` (a stack of
    rows is scored as a uniform mixture).
    """
    evalset = KLEvalSet.build(ideal, agent, tau, n_eval, rng)
    x = evalset.samples(agent.phi[None] if phis is None else phis)
    mean = float(np.mean(x))
    if not return_stderr:
        return mean
    stderr = float(np.std(x, ddof=1) / np.sqrt(len(x))) if len(x) > 1 else float("nan")
    return mean, stderr


def all_responses(tau: int) -> np.ndarray:
    if tau > MAX_ENUMERATION_TAU:
        raise ValueError(f"refusing to enumerate 2^{tau} responses (limit tau <= {MAX_ENUMERATION_TAU})")
    return np.array(list(itertools.product((-1, 1), repeat=tau)), dtype=np.int8).reshape(-1, tau)


def exact_response_kl(
    ideal: ProcessParams,
    agent: AgentParams,
    prompt: PromptRecord | PromptBatch,
    tau: int,
    phis: np.ndarray | None = None,
):
    """KL(ideal || agent) over responses to a prompt, by enumerating all 2^tau of them.

    A ``PromptBatch`` gives one value per prompt.
    """
    ys = all_responses(tau)
    single = isinstance(prompt, PromptRecord)
    tokens = np.atleast_2d(prompt.tokens)
    ys_b = np.broadcast_to(ys, (tokens.shape[0],) + ys.shape)
    lp_ideal = ideal_log_likelihood(ideal, prompt, ys if single else ys_b)
    states = response_states(agent, tokens, ys_b)
    if single:
        states = states[0]
    lp_agent = mixture_loglik(agent.phi[None] if phis is None else phis, states, ys if single else ys_b)
    kl = np.sum(np.exp(lp_ideal) * (lp_ideal - lp_agent), axis=-1)
    return float(kl) if single else kl


def inclusive_score_ratio(
    candidate,
    reference,
    env,
    T: int,
    rng: np.random.Generator,
    candidate_id: str | None = None,
    reference_id: str | None = None,
) -> HeadToHeadResult:
    """Head-to-head on ``T`` shared prompts, one temperature-1 response per agent.

    Each agent's score is the geometric mean over prompts of the Bradley-Terry
    probability that a human prefers its response to the opponent's, using the
    ideal log-likelihoods. ``stderr`` is the delta-method error over prompts.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    prompts = env.sample_prompts(T, rng)
    resp_c, _, _ = candidate.respond(prompts.tokens, env.tau, rng, rng, n_per_prompt=1, temperature=1.0)
    resp_r, _, _ = reference.respond(prompts.tokens, env.tau, rng, rng, n_per_prompt=1, temperature=1.0)
    ll_c = env.ideal_loglik(prompts, resp_c[:, 0])
    ll_r = env.ideal_loglik(prompts, resp_r[:, 0])
    delta = ll_c - ll_r
    log_score_c = float(np.mean(np.log(expit(delta))))
    log_score_r = float(np.mean(np.log(expit(-delta))))
    ratio = float(np.exp(log_score_c - log_score_r))
    stderr = ratio * float(np.std(delta, ddof=1) / np.sqrt(T)) if T > 1 else float("nan")
    return HeadToHeadResult(
        candidate_id or getattr(candidate, "name", "candidate"),
        reference_id or getattr(reference, "name", "reference"),
        float(np.exp(log_score_c)),
        float(np.exp(log_score_r)),
        ratio,
        stderr,
    )


def didactic_token_prob(agent: AgentParams, prompt_tokens: np.ndarray, phi: np.ndarray | None = None) -> float:
    """Exact P(response = +1) for a single-token response."""
    phi = agent.phi if phi is None else phi
    return float(expit(phi @ encode_prompt(agent, prompt_tokens)))


@dataclass
class DidacticEvalSet:
    """Single-token draws from the preference distribution, fixed across episodes."""

    lp_ideal: np.ndarray  # (n,) log-probability of each draw under the ideal distribution
    plus: np.ndarray  # (n,) bool, draw was +1
    state: np.ndarray  # (D,) agent state after the fixed prompt

    @classmethod
    def build(cls, env, agent: AgentParams, n_eval: int, rng: np.random.Generator) -> "DidacticEvalSet":
        if n_eval < 1:
            raise ValueError("n_eval must be >= 1")
        log_minus, log_plus = env.ideal_token_log_probs()
        plus = rng.random(n_eval) < np.exp(log_plus)
        return cls(np.where(plus, log_plus, log_minus), plus, encode_prompt(agent, env.prompt))

    def kl(self, phis: np.ndarray) -> float:
        # the agent is the uniform mixture of Bernoullis over members
        p_plus = float(np.mean(expit(np.atleast_2d(phis) @ self.state)))
        lp_agent = np.where(self.plus, np.log(p_plus), np.log1p(-p_plus))
        return float(np.mean(self.lp_ideal - lp_agent))


def didactic_kl(
    env, agent: AgentParams, n_eval: int, rng: np.random.Generator, phis: np.ndarray | None = None
) -> float:
    """Monte-Carlo KL for the single-token didactic problem, same estimator as ``kl_metric``."""
    evalset = DidacticEvalSet.build(env, agent, n_eval, rng)
    return evalset.kl(agent.phi[None] if phis is None else phis)
