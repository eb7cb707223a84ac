"""The agent's recurrent language model, its gradients and the Adam optimizer."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import expit, log_expit

from .datagen import pre_states, recur, token_log_probs


@dataclass
class AgentParams:
    phi: np.ndarray  # (D,)
    W_hat: np.ndarray  # (D, D)
    U_hat: np.ndarray  # (D,)

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=float)
        self.W_hat = np.asarray(self.W_hat, dtype=float)
        self.U_hat = np.asarray(self.U_hat, dtype=float)
        D = self.phi.shape[0]
        if self.W_hat.shape != (D, D) or self.U_hat.shape != (D,):
            raise ValueError(
                f"inconsistent shapes: phi {self.phi.shape}, W_hat {self.W_hat.shape}, U_hat {self.U_hat.shape}"
            )

    @property
    def D(self) -> int:
        return self.phi.shape[0]

    def copy(self) -> "AgentParams":
        return AgentParams(self.phi.copy(), self.W_hat.copy(), self.U_hat.copy())

    def with_phi(self, phi: np.ndarray) -> "AgentParams":
        return AgentParams(phi, self.W_hat, self.U_hat)

    def to_dict(self, meta: dict | None = None) -> dict:
        return {
            "D": self.D,
            "phi": self.phi.tolist(),
            "W_hat": self.W_hat.tolist(),
            "U_hat": self.U_hat.tolist(),
            "meta": meta or {},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "AgentParams":
        agent = cls(doc["phi"], doc["W_hat"], doc["U_hat"])
        if agent.D != int(doc["D"]):
            raise ValueError(f"declared D={doc['D']} but phi has length {agent.D}")
        return agent

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        Path(path).write_text(json.dumps(self.to_dict(meta)))

    @classmethod
    def load(cls, path: str | Path) -> "AgentParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


def init_agent(rng: np.random.Generator, D: int) -> AgentParams:
    bound = np.sqrt(1.0 / D)
    W_hat = rng.uniform(-bound, bound, size=(D, D))
    U_hat = rng.uniform(-1.0, 1.0, size=D)
    phi = rng.standard_normal(D)
    return AgentParams(phi, W_hat, U_hat)


def encode_prompt(agent: AgentParams, prompt_tokens: np.ndarray) -> np.ndarray:
    """Agent state after reading the prompt from a zero initial state; (..., tau) -> (..., D)."""
    prompt_tokens = np.asarray(prompt_tokens)
    if prompt_tokens.shape[-1] == 0:
        return np.zeros(prompt_tokens.shape[:-1] + (agent.D,))
    s0 = np.zeros(prompt_tokens.shape[:-1] + (agent.D,))
    return recur(agent.W_hat, agent.U_hat, s0, prompt_tokens)[..., -1, :]


def response_states(agent: AgentParams, prompt_tokens: np.ndarray, responses: np.ndarray) -> np.ndarray:
    """Agent states paired with each response token.

    ``prompt_tokens`` is (n, tau_p); ``responses`` is (n, ..., tau). States depend
    only on W_hat, U_hat and the tokens, never on phi.
    """
    responses = np.asarray(responses)
    s0 = encode_prompt(agent, prompt_tokens)
    extra = responses.ndim - np.asarray(prompt_tokens).ndim
    s0 = s0.reshape(s0.shape[:-1] + (1,) * extra + s0.shape[-1:])
    return pre_states(agent.W_hat, agent.U_hat, s0, responses)


def sample_responses(
    agent: AgentParams,
    prompt_tokens: np.ndarray,
    tau: int,
    rng: np.random.Generator,
    temperature: float = 1.0,
    phis: np.ndarray | None = None,
    n_per_prompt: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``n_per_prompt`` responses per prompt.

    ``phis`` optionally gives a per-prompt emission vector (n, D). Returns tokens
    (n, n_per_prompt, tau) and the paired states (n, n_per_prompt, tau, D).
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    prompt_tokens = np.atleast_2d(prompt_tokens)
    n = prompt_tokens.shape[0]
    if phis is None:
        phis = np.broadcast_to(agent.phi, (n, agent.D))
    s = np.repeat(encode_prompt(agent, prompt_tokens)[:, None, :], n_per_prompt, axis=1)
    tokens = np.empty((n, n_per_prompt, tau), dtype=np.int8)
    states = np.empty((n, n_per_prompt, tau, agent.D))
    for t in range(tau):
        logits = np.einsum("nkd,nd->nk", s, phis)
        x = np.where(rng.random((n, n_per_prompt)) < expit(logits / temperature), 1, -1)
        tokens[:, :, t] = x
        states[:, :, t] = s
        s = np.tanh(s @ agent.W_hat.T + x[..., None] * agent.U_hat)
    return tokens, states


def sample_response(agent: AgentParams, prompt_tokens: np.ndarray, tau: int, temperature: float, rng: np.random.Generator):
    tokens, states = sample_responses(agent, np.asarray(prompt_tokens)[None], tau, rng, temperature)
    return tokens[0, 0], states[0, 0]


def loglik_from_states(phi: np.ndarray, states: np.ndarray, responses: np.ndarray) -> np.ndarray:
    return token_log_probs(phi, states, responses).sum(axis=-1)


def grad_loglik_from_states(phi: np.ndarray, states: np.ndarray, responses: np.ndarray) -> np.ndarray:
    """d/dphi of the response log-likelihood: sum_t (x~_t - sigmoid(phi.s_t)) s_t."""
    indicator = (np.asarray(responses, dtype=float) + 1.0) / 2.0
    resid = indicator - expit(states @ phi)
    return np.einsum("...t,...td->...d", resid, states)


def response_log_likelihood(agent: AgentParams, prompt_tokens: np.ndarray, response: np.ndarray) -> np.ndarray:
    prompt_tokens = np.asarray(prompt_tokens)
    states = response_states(agent, prompt_tokens[None], np.asarray(response)[None])[0]
    return loglik_from_states(agent.phi, states, response)


def grad_loglik_phi(agent: AgentParams, prompt_tokens: np.ndarray, response: np.ndarray) -> np.ndarray:
    prompt_tokens = np.asarray(prompt_tokens)
    states = response_states(agent, prompt_tokens[None], np.asarray(response)[None])[0]
    return grad_loglik_from_states(agent.phi, states, response)


@dataclass
class Gradients:
    phi: np.ndarray
    W_hat: np.ndarray
    U_hat: np.ndarray


def document_nll(agent: AgentParams, documents: np.ndarray, token_weights: np.ndarray | None = None) -> float:
    """Mean over documents of the (weighted) negative log-likelihood, first token read from the zero state."""
    docs = np.atleast_2d(documents)
    s0 = np.zeros((docs.shape[0], agent.D))
    states = pre_states(agent.W_hat, agent.U_hat, s0, docs)
    lp = token_log_probs(agent.phi, states, docs)
    if token_weights is not None:
        lp = lp * token_weights
    return float(-lp.sum(axis=-1).mean())


def bptt_gradients(
    agent: AgentParams, documents: np.ndarray, token_weights: np.ndarray | None = None
) -> tuple[float, Gradients]:
    """Mean document NLL and its exact gradient by backpropagation through time.

    ``documents`` is (L,) or (n, L). ``token_weights`` (broadcastable to (n, L))
    masks which tokens contribute to the loss; the default counts every token.
    """
    docs = np.atleast_2d(np.asarray(documents))
    n, L = docs.shape
    if L < 1:
        raise ValueError("documents must have at least one token")
    x = docs.astype(float)
    weights = np.ones((n, L)) if token_weights is None else np.broadcast_to(token_weights, (n, L)).astype(float)
    W, U, phi = agent.W_hat, agent.U_hat, agent.phi

    H = np.zeros((n, L + 1, agent.D))  # H[:, t] is the state after t tokens
    for t in range(L):
        H[:, t + 1] = np.tanh(H[:, t] @ W.T + x[:, t, None] * U)
    if not np.all(np.isfinite(H)):
        raise FloatingPointError("non-finite hidden state in BPTT forward pass")

    a = H[:, :L] @ phi
    nll = -np.sum(weights * log_expit(x * a)) / n
    g_a = weights * (expit(a) - (x + 1.0) / 2.0) / n  # dNLL/da_t

    g_phi = np.einsum("nt,ntd->d", g_a, H[:, :L])
    g_W = np.zeros_like(W)
    g_U = np.zeros_like(U)
    carry = np.zeros((n, agent.D))
    # H[:, 0] is a constant, so the sweep stops at t = 1.
    for t in range(L - 1, 0, -1):
        dh = g_a[:, t, None] * phi + carry
        dz = dh * (1.0 - H[:, t] ** 2)
        g_W += dz.T @ H[:, t - 1]
        g_U += dz.T @ x[:, t - 1]
        carry = dz @ W
    return float(nll), Gradients(g_phi, g_W, g_U)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, block: np.ndarray, **config) -> "AdamState":
        return cls(np.zeros_like(block, dtype=float), np.zeros_like(block, dtype=float), **config)


def adam_update(block: np.ndarray, grad: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam step; returns new arrays and leaves the inputs untouched."""
    grad = np.asarray(grad, dtype=float)
    if grad.shape != block.shape or state.m.shape != block.shape:
        raise ValueError(f"shape mismatch: block {block.shape}, grad {grad.shape}, moments {state.m.shape}")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_block = block - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_block, AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def init(self, block: np.ndarray) -> AdamState:
        return AdamState.zeros_like(block, lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)


@dataclass
class PretrainLog:
    epoch_loss: list[float] = field(default_factory=list)


def pretrain(
    agent_init: AgentParams,
    corpus: np.ndarray,
    epochs: int,
    rng: np.random.Generator,
    adam: AdamConfig | None = None,
    batch_size: int = 64,
    token_weights: np.ndarray | None = None,
    log: PretrainLog | None = None,
    until: Callable[[AgentParams], bool] | None = None,
    max_epochs: int | None = None,
) -> AgentParams:
    """Minimise the mean document NLL over phi, W_hat and U_hat jointly.

    Each epoch is one shuffled pass over the corpus in minibatches. With
    ``until``, training continues past ``epochs`` (up to ``max_epochs``) until
    the predicate holds.
    """
    corpus = np.atleast_2d(np.asarray(corpus))
    if corpus.shape[0] == 0 or corpus.size == 0:
        raise ValueError("pretraining corpus is empty")
    adam = adam or AdamConfig()
    agent = agent_init.copy()
    states = {name: adam.init(getattr(agent, name)) for name in ("phi", "W_hat", "U_hat")}
    n = corpus.shape[0]
    limit = epochs if until is None else max(epochs, max_epochs or epochs)
    for epoch in range(limit):
        if epoch >= epochs and until(agent):
            break
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            w = None if token_weights is None else np.broadcast_to(token_weights, corpus.shape)[idx]
            nll, grads = bptt_gradients(agent, corpus[idx], w)
            total += nll * len(idx)
            for name in states:
                block, states[name] = adam_update(getattr(agent, name), getattr(grads, name), states[name])
                setattr(agent, name, block)
        if log is not None:
            log.epoch_loss.append(total / n)
    return agent
