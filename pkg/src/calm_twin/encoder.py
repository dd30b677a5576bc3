"""Bi-encoder used to score candidate trajectories against a target history.

Texts are featurized with hashed character trigrams plus word unigrams and
projected by a learned matrix; the projection of each tower is trained with
the InfoNCE objective on examples labelled by simulation quality.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import softmax
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.feature_extraction.text import HashingVectorizer
from sklearn.preprocessing import normalize

from .codec import encode_actions, encode_states
from .core import Trajectory

logger = logging.getLogger(__name__)

TARGET, CANDIDATE = "target", "candidate"
CHECKPOINT_VERSION = 1
CHECKPOINT_MAGIC = b"CALM-TWIN-ENCODER\n"
TRENDS = ("increasing", "decreasing", "stable")

SUMMARY_PROMPT = (
    "For each variable in this time-series, write <VARIABLE NAME>: <TREND>, where <TREND> is a "
    "list of one or more descriptive words that summarises the series in chunks. Decide how to "
    "chunk each variable based on when its trend changes. Neighbouring chunks should not have the "
    "same description. Each <TREND> each word is either [increasing, decreasing, stable]. There "
    "should be fewer chunks than points in the time-series. Time-series: {trajectory_str}"
)


class TrainingDiverged(RuntimeError):
    pass


# -- features ----------------------------------------------------------------

# rows depend only on the text, so they are shared across encoders
_CACHE_SIZE = 50_000
_feature_cache: dict[int, OrderedDict] = {}
_cache_lock = threading.Lock()


@lru_cache(maxsize=8)
def _vectorizers(n_features: int):
    common = dict(n_features=n_features, alternate_sign=False, norm=None, lowercase=False)
    chars = HashingVectorizer(analyzer="char", ngram_range=(3, 3), **common)
    words = HashingVectorizer(analyzer="word", token_pattern=r"[^\s,:|\[\]]+", **common)
    return chars, words


def featurize(texts, n_features: int = 4096) -> sp.csr_matrix:
    """Hashed trigram + unigram counts, L2-normalized per row.

    Accepts a single string (one row) or a sequence of strings.
    """
    if isinstance(texts, str):
        texts = [texts]
    texts = list(texts)
    if not texts:
        return sp.csr_matrix((0, n_features))
    with _cache_lock:
        cache = _feature_cache.setdefault(n_features, OrderedDict())
        missing = list(dict.fromkeys(t for t in texts if t not in cache))
    if missing:
        chars, words = _vectorizers(n_features)
        feats = normalize((chars.transform(missing) + words.transform(missing)).tocsr(),
                          norm="l2")
        with _cache_lock:
            for i, t in enumerate(missing):
                cache[t] = feats[i]
            while len(cache) > _CACHE_SIZE:
                cache.popitem(last=False)
        fresh = {t: feats[i] for i, t in enumerate(missing)}
    else:
        fresh = {}
    with _cache_lock:
        rows = [fresh[t] if t in fresh else cache[t] for t in texts]
    return sp.vstack(rows, format="csr")


# -- encoder -----------------------------------------------------------------

@dataclass
class HashingEncoder:
    dimension: int = 256
    n_features: int = 4096
    tower: str = TARGET
    weights: np.ndarray = field(default=None, repr=False)
    seed: int = 0

    def __post_init__(self):
        if self.tower not in (TARGET, CANDIDATE):
            raise ValueError(f"tower must be {TARGET!r} or {CANDIDATE!r}")
        if self.weights is None:
            rng = np.random.default_rng(self.seed)
            self.weights = rng.normal(0.0, 1.0 / np.sqrt(self.dimension),
                                      size=(self.n_features, self.dimension))
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (self.n_features, self.dimension):
            raise ValueError(f"weights shape {self.weights.shape} does not match "
                             f"({self.n_features}, {self.dimension})")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite")

    def project(self, features: sp.spmatrix) -> np.ndarray:
        return np.asarray(features @ self.weights)

    def embed(self, texts, return_flags: bool = False):
        """Unit-norm embeddings, one row per text.

        A text whose projection vanishes maps to the basis vector e_0; the
        returned flags mark those rows.
        """
        z = self.project(featurize(texts, self.n_features))
        norms = np.linalg.norm(z, axis=1)
        degenerate = norms == 0
        out = np.zeros_like(z)
        out[~degenerate] = z[~degenerate] / norms[~degenerate, None]
        out[degenerate, 0] = 1.0
        return (out, degenerate) if return_flags else out

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.weights).tobytes()).hexdigest()


# -- objective ---------------------------------------------------------------

def _scores(t_emb, pos_emb, neg_embs):
    t_emb = np.asarray(t_emb, float)
    neg_embs = np.atleast_2d(np.asarray(neg_embs, float))
    s = np.concatenate([[np.dot(t_emb, pos_emb)], neg_embs @ t_emb])
    if not np.all(np.isfinite(s)):
        raise ValueError("non-finite similarity")
    return s, t_emb, neg_embs


def info_nce(t_emb, pos_emb, neg_embs, tau: float) -> float:
    """Contrastive loss of one target against one positive and B negatives."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    s, _, _ = _scores(t_emb, pos_emb, neg_embs)
    return float(_loss_from_margins((s[1:] - s[0]) / tau))


def _loss_from_margins(d):
    # log(1 + sum exp(d)), accurate when the loss is tiny
    d = np.asarray(d, float)
    m = d.max(axis=-1, keepdims=True)
    if np.all(m <= 0):
        return np.log1p(np.exp(d).sum(axis=-1))
    m = np.maximum(m, 0.0)
    return m[..., 0] + np.log(np.exp(-m[..., 0]) + np.exp(d - m).sum(axis=-1))


def info_nce_grad(t_emb, pos_emb, neg_embs, tau: float):
    """Gradients of :func:`info_nce` w.r.t. target, positive and negatives."""
    s, t_emb, neg_embs = _scores(t_emb, pos_emb, neg_embs)
    p = softmax(s / tau)
    coef = p.copy()
    coef[0] -= 1.0
    coef /= tau
    g_t = coef[0] * np.asarray(pos_emb, float) + coef[1:] @ neg_embs
    g_pos = coef[0] * t_emb
    g_neg = coef[1:, None] * t_emb[None, :]
    return g_t, g_pos, g_neg


def _normalize_backward(z, e, g):
    # d(z/|z|)/dz applied to g
    norm = np.linalg.norm(z, axis=-1, keepdims=True)
    return (g - e * np.sum(e * g, axis=-1, keepdims=True)) / norm


def _unit(z):
    return z / np.linalg.norm(z, axis=-1, keepdims=True)


def batch_loss_and_grads(W_t, W_c, F_t, F_pos, F_neg, tau):
    """Mean InfoNCE over a batch and its gradients w.r.t. both projections.

    ``F_neg`` holds the negatives of example ``i`` in rows ``i*B .. i*B+B-1``.
    """
    n = F_t.shape[0]
    B = F_neg.shape[0] // n
    z_t = np.asarray(F_t @ W_t)
    z_p = np.asarray(F_pos @ W_c)
    z_n = np.asarray(F_neg @ W_c).reshape(n, B, -1)
    e_t, e_p, e_n = _unit(z_t), _unit(z_p), _unit(z_n)
    s = np.concatenate([np.sum(e_t * e_p, axis=1)[:, None],
                        np.einsum("nbd,nd->nb", e_n, e_t)], axis=1) / tau
    losses = _loss_from_margins(s[:, 1:] - s[:, :1])
    coef = softmax(s, axis=1)
    coef[:, 0] -= 1.0
    coef /= tau * n
    g_et = coef[:, :1] * e_p + np.einsum("nb,nbd->nd", coef[:, 1:], e_n)
    g_ep = coef[:, :1] * e_t
    g_en = coef[:, 1:, None] * e_t[:, None, :]
    g_zt = _normalize_backward(z_t, e_t, g_et)
    g_zp = _normalize_backward(z_p, e_p, g_ep)
    g_zn = _normalize_backward(z_n, e_n, g_en).reshape(n * B, -1)
    grad_t = np.asarray(F_t.T @ g_zt)
    grad_c = np.asarray(F_pos.T @ g_zp) + np.asarray(F_neg.T @ g_zn)
    return losses, grad_t, grad_c


# -- training ----------------------------------------------------------------

@dataclass(frozen=True)
class ContrastiveExample:
    target_text: str
    positive_text: str
    negative_texts: tuple[str, ...]
    scores: tuple[float, ...] = ()
    target_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "negative_texts", tuple(self.negative_texts))
        object.__setattr__(self, "scores", tuple(self.scores))
        if not self.negative_texts:
            raise ValueError("at least one negative is required")

    def to_dict(self) -> dict:
        return {"target_id": self.target_id, "target_text": self.target_text,
                "positive_text": self.positive_text, "negative_texts": list(self.negative_texts),
                "scores": list(self.scores)}

    @classmethod
    def from_dict(cls, d) -> "ContrastiveExample":
        return cls(d["target_text"], d["positive_text"], tuple(d["negative_texts"]),
                   tuple(d.get("scores", ())), d.get("target_id", ""))


@dataclass(frozen=True)
class TrainConfig:
    temperature: float = 0.07
    learning_rate: float = 1e-2
    epochs: int = 8
    batch_size: int = 16
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


class _AdamW:
    def __init__(self, shape, lr, weight_decay, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.wd, self.betas, self.eps = lr, weight_decay, betas, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, w, g):
        b1, b2 = self.betas
        self.t += 1
        self.m = b1 * self.m + (1 - b1) * g
        self.v = b2 * self.v + (1 - b2) * g * g
        m_hat = self.m / (1 - b1 ** self.t)
        v_hat = self.v / (1 - b2 ** self.t)
        if self.wd:
            w *= 1 - self.lr * self.wd
        w -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def train(target: HashingEncoder, candidate: HashingEncoder,
          examples: Sequence[ContrastiveExample], cfg: TrainConfig = TrainConfig()):
    """Fine-tune both towers in place; returns ``(target, candidate, loss_curve)``.

    ``loss_curve[k]`` is the mean per-example loss seen during epoch ``k``.
    """
    if not examples:
        raise ValueError("no training examples")
    B = len(examples[0].negative_texts)
    if any(len(ex.negative_texts) != B for ex in examples):
        raise ValueError("all examples must carry the same number of negatives")
    nf = target.n_features
    F_t = featurize([ex.target_text for ex in examples], nf)
    F_p = featurize([ex.positive_text for ex in examples], nf)
    F_n = featurize([t for ex in examples for t in ex.negative_texts], nf)
    opt_t = _AdamW(target.weights.shape, cfg.learning_rate, cfg.weight_decay)
    opt_c = _AdamW(candidate.weights.shape, cfg.learning_rate, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    curve = []
    n = len(examples)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            neg_idx = (idx[:, None] * B + np.arange(B)).ravel()
            losses, g_t, g_c = batch_loss_and_grads(
                target.weights, candidate.weights, F_t[idx], F_p[idx], F_n[neg_idx],
                cfg.temperature)
            if not np.all(np.isfinite(losses)) or not np.all(np.isfinite(g_t)) \
                    or not np.all(np.isfinite(g_c)):
                raise TrainingDiverged(f"non-finite loss or gradient at epoch {epoch}, "
                                       f"batch starting {start}")
            total += float(losses.sum())
            opt_t.step(target.weights, g_t)
            opt_c.step(candidate.weights, g_c)
        curve.append(total / n)
        logger.info("epoch %d mean loss %.5f", epoch, curve[-1])
    return target, candidate, curve


# -- trend summaries ---------------------------------------------------------

def _trend_labels(values: Sequence[float], rel_threshold: float = 0.01) -> list[str]:
    x = np.asarray(values, float)
    span = x.max() - x.min()
    labels = []
    for d in np.diff(x):
        if span == 0 or abs(d) <= rel_threshold * span:
            label = "stable"
        else:
            label = "increasing" if d > 0 else "decreasing"
        if not labels or labels[-1] != label:
            labels.append(label)
    return labels


def summarize_trends(traj: Trajectory, mode: str = "rule", backend=None, schemas=None) -> str:
    """Per-variable trend summary, e.g. ``x: [increasing, stable]``.

    ``mode="llm"`` sends the summary prompt to ``backend`` and returns its
    reply verbatim (stripped).
    """
    if len(traj) < 2:
        raise ValueError("trend summary needs at least two steps")
    if mode == "llm":
        if backend is None:
            raise ValueError("llm mode needs a backend")
        from .llm import PromptBundle
        prompt = SUMMARY_PROMPT.format(trajectory_str=encode_states(traj, schemas))
        return backend.complete(PromptBundle(system_text="", user_text=prompt))[0].strip()
    if mode != "rule":
        raise ValueError(f"unknown summary mode {mode!r}")
    lines = []
    for name in traj.state_names:
        labels = _trend_labels([s.state[name] for s in traj.steps])
        lines.append(f"{name}: [{', '.join(labels)}]")
    return "\n".join(lines)


def compose_retrieval_text(traj: Trajectory, summary: str | None, schemas=None) -> str:
    text = encode_states(traj, schemas) + "\n" + encode_actions(traj, schemas)
    if summary:
        text += "\n" + summary
    return text


def retrieval_text(traj: Trajectory, schemas=None, use_summary: bool = True) -> str:
    """Codec text plus rule summary, memoized on the (immutable) trajectory."""
    try:
        key = (tuple(schemas) if schemas is not None else None, use_summary)
        hash(key)
    except TypeError:
        key = None
    memo = traj.__dict__.setdefault("_retrieval_text", {})
    if key is not None and key in memo:
        return memo[key]
    summary = summarize_trends(traj) if use_summary and len(traj) >= 2 else None
    text = compose_retrieval_text(traj, summary, schemas)
    if key is not None:
        memo[key] = text
    return text


# -- estimator ---------------------------------------------------------------

class BiEncoderRetriever(TransformerMixin, BaseEstimator):
    """Target/candidate encoder pair with a scikit-learn style interface.

    ``fit`` trains on :class:`ContrastiveExample` objects; ``transform`` embeds
    texts with the target tower. Call :meth:`initialize` to get an untrained
    pair (the no-fine-tuning ablation).
    """

    def __init__(self, dimension=256, n_features=4096, temperature=0.07, learning_rate=1e-2,
                 epochs=8, batch_size=16, weight_decay=0.0, use_summary=True, random_state=0):
        self.dimension = dimension
        self.n_features = n_features
        self.temperature = temperature
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.use_summary = use_summary
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(self.temperature, self.learning_rate, self.epochs, self.batch_size,
                           self.weight_decay, self.random_state)

    def initialize(self):
        seed = 0 if self.random_state is None else int(self.random_state)
        self.target_encoder_ = HashingEncoder(self.dimension, self.n_features, TARGET, seed=seed)
        self.candidate_encoder_ = HashingEncoder(self.dimension, self.n_features, CANDIDATE,
                                                 seed=seed)
        self.loss_curve_ = []
        self.config_digest_ = self._train_config().digest()
        return self

    def fit(self, examples, y=None):
        cfg = self._train_config()
        self.initialize()
        if cfg.epochs:
            _, _, self.loss_curve_ = train(self.target_encoder_, self.candidate_encoder_,
                                           list(examples), cfg)
        return self

    def _check(self):
        if not hasattr(self, "target_encoder_"):
            raise NotFittedError("call fit() or initialize() first")

    def transform(self, texts):
        self._check()
        return self.target_encoder_.embed(list(texts))

    def embed_candidates(self, texts):
        self._check()
        return self.candidate_encoder_.embed(list(texts))

    def text(self, traj: Trajectory, schemas=None) -> str:
        return retrieval_text(traj, schemas, self.use_summary)

    def select(self, history, pairs, c, schemas=None):
        from .retrieval import select_context

        self._check()
        return select_context(history, pairs, self.target_encoder_, self.candidate_encoder_, c,
                              to_text=lambda t: self.text(t, schemas))

    def digest(self) -> str:
        self._check()
        h = hashlib.sha256()
        h.update(self.target_encoder_.digest().encode())
        h.update(self.candidate_encoder_.digest().encode())
        return h.hexdigest()

    # checkpoint layout: magic line, JSON header line, raw little-endian float64
    # target weights then candidate weights
    def save(self, path) -> None:
        self._check()
        header = {"version": CHECKPOINT_VERSION, "dimension": self.dimension,
                  "d_feat": self.n_features, "towers": [TARGET, CANDIDATE],
                  "params": self.get_params(), "training_config_digest": self.config_digest_,
                  "loss_curve": list(self.loss_curve_), "weights_digest": self.digest()}
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            for enc in (self.target_encoder_, self.candidate_encoder_):
                fh.write(np.ascontiguousarray(enc.weights, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "BiEncoderRetriever":
        with open(path, "rb") as fh:
            if fh.readline() != CHECKPOINT_MAGIC:
                raise ValueError(f"{path} is not an encoder checkpoint")
            header = json.loads(fh.readline())
            body = fh.read()
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        est = cls(**header["params"])
        shape = (est.n_features, est.dimension)
        size = shape[0] * shape[1]
        flat = np.frombuffer(body, dtype="<f8")
        if flat.size != 2 * size:
            raise ValueError(f"{path}: truncated checkpoint")
        est.target_encoder_ = HashingEncoder(est.dimension, est.n_features, TARGET,
                                             weights=flat[:size].reshape(shape).copy())
        est.candidate_encoder_ = HashingEncoder(est.dimension, est.n_features, CANDIDATE,
                                                weights=flat[size:].reshape(shape).copy())
        est.loss_curve_ = header.get("loss_curve", [])
        est.config_digest_ = header.get("training_config_digest", "")
        if header.get("weights_digest") and header["weights_digest"] != est.digest():
            raise ValueError(f"{path}: weight digest mismatch")
        return est
