"""Ideal and shadow token-generating processes, prompts and simulated labelers.

Tokens live in {-1, +1}. A token is always paired with the state that preceded
its emission, so ``log P(x | s) = log sigmoid(x * emission @ s)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.special import expit, log_expit


@dataclass
class ProcessParams:
    emission: np.ndarray  # mu (ideal) or theta (shadow), shape (d,)
    W: np.ndarray  # (d, d)
    U: np.ndarray  # (d,)

    def __post_init__(self):
        self.emission = np.asarray(self.emission, dtype=float)
        self.W = np.asarray(self.W, dtype=float)
        self.U = np.asarray(self.U, dtype=float)
        d = self.emission.shape[0] if self.emission.ndim == 1 else -1
        if d < 1 or self.W.shape != (d, d) or self.U.shape != (d,):
            raise ValueError(
                f"inconsistent shapes: emission {self.emission.shape}, W {self.W.shape}, U {self.U.shape}"
            )
        for name in ("emission", "W", "U"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} has non-finite entries")

    @property
    def d(self) -> int:
        return self.emission.shape[0]

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "emission": self.emission.tolist(),
            "W": self.W.tolist(),
            "U": self.U.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ProcessParams":
        params = cls(doc["emission"], doc["W"], doc["U"])
        if params.d != int(doc["d"]):
            raise ValueError(f"declared d={doc['d']} but emission has length {params.d}")
        return params

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "ProcessParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class PromptRecord:
    """A prompt with the true-process state after each of its tokens."""

    tokens: np.ndarray  # (tau,)
    initial_state: np.ndarray  # (d,)
    states: np.ndarray  # (tau, d)

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]


@dataclass
class PromptBatch:
    tokens: np.ndarray  # (n, tau)
    initial_states: np.ndarray  # (n, d)
    states: np.ndarray  # (n, tau, d)

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def __getitem__(self, i: int) -> PromptRecord:
        return PromptRecord(self.tokens[i], self.initial_states[i], self.states[i])

    @property
    def final_states(self) -> np.ndarray:
        return self.states[:, -1]

    @classmethod
    def from_records(cls, records: Iterable[PromptRecord]) -> "PromptBatch":
        records = list(records)
        return cls(
            np.stack([r.tokens for r in records]),
            np.stack([r.initial_state for r in records]),
            np.stack([r.states for r in records]),
        )


def sample_process_params(
    rng: np.random.Generator, d: int = 2, perturbation_variance: float = 0.3
) -> tuple[ProcessParams, ProcessParams]:
    """Draw an (ideal, shadow) pair sharing W and U."""
    if d < 1:
        raise ValueError(f"d must be positive, got {d}")
    if perturbation_variance < 0:
        raise ValueError(f"perturbation_variance must be >= 0, got {perturbation_variance}")
    bound = np.sqrt(1.0 / d)
    W = rng.uniform(-bound, bound, size=(d, d))
    U = rng.uniform(-1.0, 1.0, size=d)
    mu = rng.standard_normal(d)
    theta = mu + np.sqrt(perturbation_variance) * rng.standard_normal(d)
    return ProcessParams(mu, W, U.copy()), ProcessParams(theta, W.copy(), U.copy())


def _check_state(params: ProcessParams, state: np.ndarray) -> np.ndarray:
    state = np.asarray(state, dtype=float)
    if state.shape[-1] != params.d:
        raise ValueError(f"state dimension {state.shape[-1]} does not match d={params.d}")
    if not np.all(np.isfinite(state)):
        raise ValueError("state has non-finite entries")
    return state


def recur(W: np.ndarray, U: np.ndarray, s0: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    """States after each token: ``s_{t+1} = tanh(W s_t + U x_{t+1})``.

    ``s0`` is (..., d), ``tokens`` is (..., L); returns (..., L, d).
    """
    tokens = np.asarray(tokens, dtype=float)
    s = np.asarray(s0, dtype=float)
    out = np.empty(tokens.shape + (W.shape[0],))
    for t in range(tokens.shape[-1]):
        s = np.tanh(s @ W.T + tokens[..., t, None] * U)
        out[..., t, :] = s
    return out


def pre_states(W: np.ndarray, U: np.ndarray, s0: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    """States paired with each token, i.e. the state before its emission."""
    tokens = np.asarray(tokens)
    s0 = np.broadcast_to(np.asarray(s0, dtype=float), tokens.shape[:-1] + (W.shape[0],))
    if tokens.shape[-1] == 0:
        return np.empty(tokens.shape + (W.shape[0],))
    after = recur(W, U, s0, tokens[..., :-1])
    return np.concatenate([s0[..., None, :], after], axis=-2)


def token_log_probs(emission: np.ndarray, states: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    """``log P(x_t | s_t)`` elementwise; equals the Bernoulli term on (x + 1) / 2."""
    return log_expit(np.asarray(tokens, dtype=float) * (states @ emission))


def step(params: ProcessParams, state: np.ndarray, rng: np.random.Generator) -> tuple[int, np.ndarray]:
    state = _check_state(params, state)
    p_plus = expit(params.emission @ state)
    token = 1 if rng.random() < p_plus else -1
    return token, np.tanh(params.W @ state + params.U * token)


def generate_batch(
    params: ProcessParams, s0: np.ndarray, length: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Roll out ``len(s0)`` independent sequences; returns tokens (n, L) and states after each token (n, L, d)."""
    if length < 0:
        raise ValueError(f"length must be >= 0, got {length}")
    s = _check_state(params, np.atleast_2d(s0))
    n = s.shape[0]
    tokens = np.empty((n, length), dtype=np.int8)
    states = np.empty((n, length, params.d))
    for t in range(length):
        u = rng.random(n)
        x = np.where(u < expit(s @ params.emission), 1, -1)
        s = np.tanh(s @ params.W.T + x[:, None] * params.U)
        tokens[:, t] = x
        states[:, t] = s
    return tokens, states


def generate_sequence(
    params: ProcessParams, s0: np.ndarray, length: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    tokens, states = generate_batch(params, np.asarray(s0, dtype=float)[None], length, rng)
    return tokens[0], states[0]


def generate_prompts(shadow: ProcessParams, tau: int, n: int, rng: np.random.Generator) -> PromptBatch:
    if tau < 1:
        raise ValueError(f"tau must be >= 1, got {tau}")
    s0 = rng.standard_normal((n, shadow.d))
    tokens, states = generate_batch(shadow, s0, tau, rng)
    return PromptBatch(tokens, s0, states)


def generate_prompt(shadow: ProcessParams, tau: int, rng: np.random.Generator) -> PromptRecord:
    return generate_prompts(shadow, tau, 1, rng)[0]


def generate_corpus(process: ProcessParams, n_docs: int, length: int, rng: np.random.Generator) -> np.ndarray:
    """Pretraining documents (n_docs, length), each from a fresh standard-normal initial state."""
    s0 = rng.standard_normal((n_docs, process.d))
    return generate_batch(process, s0, length, rng)[0]


def ideal_log_likelihood(ideal: ProcessParams, prompt: PromptRecord | PromptBatch, response: np.ndarray) -> np.ndarray:
    """Log-likelihood of responses continuing from the prompt's final true state.

    ``response`` may carry extra leading axes after the batch axis, e.g. (n, 2, tau)
    for response pairs; the result drops the token axis.
    """
    response = np.asarray(response)
    final = prompt.final_state if isinstance(prompt, PromptRecord) else prompt.final_states
    final = np.asarray(final, dtype=float)
    extra = response.ndim - 1 - (final.ndim - 1)
    if extra < 0:
        raise ValueError(f"response shape {response.shape} incompatible with prompt states {final.shape}")
    if final.shape[-1] != ideal.d:
        raise ValueError(f"prompt state dimension {final.shape[-1]} does not match d={ideal.d}")
    s0 = final.reshape(final.shape[:-1] + (1,) * extra + final.shape[-1:])
    states = pre_states(ideal.W, ideal.U, s0, response)
    return token_log_probs(ideal.emission, states, response).sum(axis=-1)


oracle_reward = ideal_log_likelihood


def bradley_terry_prob(loglik0, loglik1):
    """P(b = 1) = l1 / (l0 + l1), evaluated from log-likelihoods."""
    return expit(np.asarray(loglik1, dtype=float) - np.asarray(loglik0, dtype=float))


def bradley_terry_label(loglik0, loglik1, rng: np.random.Generator):
    loglik0 = np.asarray(loglik0, dtype=float)
    loglik1 = np.asarray(loglik1, dtype=float)
    if not (np.all(np.isfinite(loglik0)) and np.all(np.isfinite(loglik1))):
        raise ValueError("Bradley-Terry label needs finite log-likelihoods")
    p1 = bradley_terry_prob(loglik0, loglik1)
    labels = (rng.random(p1.shape) < p1).astype(np.int8)
    return labels if labels.ndim else int(labels)


def autocorrelation(logits, k: int, normalize: bool = False) -> float:
    """Lag-``k`` autocorrelation of a logit series.

    By default the sum of window-centred cross products carries a ``1/(tau - k)``
    prefactor, so lag 0 gives ``1/tau``. ``normalize=True`` drops the prefactor
    and returns the Pearson correlation of the two windows (lag 0 gives 1).
    """
    a = np.asarray(logits, dtype=float)
    tau = a.shape[0]
    if not 0 <= k < tau:
        raise ValueError(f"lag must satisfy 0 <= k < {tau}, got {k}")
    head = a[: tau - k] - a[: tau - k].mean()
    tail = a[k:] - a[k:].mean()
    denom = np.sqrt(np.sum(head**2) * np.sum(tail**2))
    if denom == 0.0:
        raise ValueError("autocorrelation undefined: a window has zero variance")
    r = np.sum(head * tail) / denom
    return float(r if normalize else r / (tau - k))


def process_logits(params: ProcessParams, s0: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    """Emission logits along one rollout, the series used for the autocorrelation diagnostic."""
    tokens, states = generate_sequence(params, s0, length, rng)
    return pre_states(params.W, params.U, s0, tokens) @ params.emission


def write_corpus(path: str | Path, corpus: np.ndarray) -> None:
    lines = (" ".join("+1" if x > 0 else "-1" for x in doc) for doc in corpus)
    Path(path).write_text("\n".join(lines) + "\n")


def read_corpus(path: str | Path) -> np.ndarray:
    docs = [
        [int(tok) for tok in line.split()]
        for line in Path(path).read_text().splitlines()
        if line.strip()
    ]
    return np.asarray(docs, dtype=np.int8)
