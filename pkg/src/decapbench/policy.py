"""Attention-based sequential placement policy.

Encoder: per-port linear node embedding plus a probe-relative positional
embedding, followed by L blocks of multi-head attention and feed-forward,
each batch-normalized (residual additions optional). Decoder: a context
query built from the probe embedding and the previously selected port's
embedding, one attention layer, and pointer-style per-port logits, so the
same checkpoint runs on any board size and any placement length.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .env import Problem, State, encode_features, feasible_actions
from .errors import ContractViolation


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 3
    d_model: int = 128
    ff_dim: int = 512
    n_heads: int = 8
    ppe_mode: str = "norm"  # "norm" or "delta-and-norm"
    use_ppe: bool = True
    use_pcn: bool = True
    use_rcn: bool = True
    residual: bool = True
    init_seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ContractViolation("n_heads must divide d_model")
        if self.ppe_mode not in ("norm", "delta-and-norm"):
            raise ContractViolation("unknown ppe_mode")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


def toy_config(**overrides) -> ModelConfig:
    base = dict(n_layers=1, d_model=32, ff_dim=64, n_heads=4, init_seed=0)
    base.update(overrides)
    return ModelConfig(**base)


def ppe_features(problem: Problem, mode: str = "norm") -> np.ndarray:
    """Per-port position relative to the probe, in normalized coordinates."""
    feats = encode_features(problem)
    xy = feats[:, :2]
    delta = xy - xy[problem.probe]
    norm = np.sqrt((delta ** 2).sum(axis=1, keepdims=True))
    if mode == "norm":
        return norm
    return np.concatenate([delta, norm], axis=1)


def init_params(cfg: ModelConfig) -> ad.ParamStore:
    rng = np.random.Generator(np.random.PCG64(cfg.init_seed))
    store = ad.ParamStore()
    d, ff = cfg.d_model, cfg.ff_dim

    def lin(name, fan_in, fan_out, bias=True):
        store.add(name + ".w", ad.xavier_uniform(rng, fan_in, fan_out))
        if bias:
            store.add(name + ".b", np.zeros(fan_out))

    lin("node", 5, d)
    if cfg.use_ppe:
        lin("ppe", 1 if cfg.ppe_mode == "norm" else 3, d)
    for layer in range(cfg.n_layers):
        pre = f"enc{layer}"
        for name in ("wq", "wk", "wv", "wo"):
            store.add(f"{pre}.{name}", ad.xavier_uniform(rng, d, d))
        lin(f"{pre}.ff1", d, ff)
        lin(f"{pre}.ff2", ff, d)
        for bn in ("bn1", "bn2"):
            store.add(f"{pre}.{bn}.gamma", np.ones(d))
            store.add(f"{pre}.{bn}.beta", np.zeros(d))
            store.add_buffer(f"{pre}.{bn}.mean", np.zeros(d))
            store.add_buffer(f"{pre}.{bn}.var", np.ones(d))
    if cfg.use_pcn:
        lin("pcn1", d, d)
        lin("pcn2", d, d)
    if cfg.use_rcn:
        lin("rcn1", d, d)
        lin("rcn2", d, d)
        store.add("start", ad.xavier_uniform(rng, 1, d, shape=(d,)))
    lin("ctx", d, d)
    for name in ("wq", "wk", "wv", "wo"):
        store.add(f"dec.{name}", ad.xavier_uniform(rng, d, d))
    store.add("dec.key", ad.xavier_uniform(rng, d, d))
    return store


def _batch_inputs(problems, cfg: ModelConfig):
    feats = np.stack([encode_features(p) for p in problems])
    ppe = np.stack([ppe_features(p, cfg.ppe_mode) for p in problems])
    return feats, ppe


def encode(problems, store: ad.ParamStore, cfg: ModelConfig,
           training: bool = False, update_running: bool = True) -> ad.Tensor:
    """Per-port embeddings, shape (B, N, d). Problems must share a board."""
    if len({(p.n_rows, p.n_cols) for p in problems}) != 1:
        raise ContractViolation("batch must share one board size")
    feats, ppe = _batch_inputs(problems, cfg)
    h = ad.linear(ad.Tensor(feats), store["node.w"], store["node.b"])
    if cfg.use_ppe:
        h = h + ad.linear(ad.Tensor(ppe), store["ppe.w"], store["ppe.b"])
    for layer in range(cfg.n_layers):
        pre = f"enc{layer}"
        a = ad.mha(h, h, h, store[f"{pre}.wq"], store[f"{pre}.wk"],
                   store[f"{pre}.wv"], store[f"{pre}.wo"], cfg.n_heads)
        h = ad.batch_norm(h + a if cfg.residual else a,
                          store[f"{pre}.bn1.gamma"], store[f"{pre}.bn1.beta"],
                          store.buffers, f"{pre}.bn1", training,
                          update_running=update_running)
        f = ad.linear(ad.relu(ad.linear(h, store[f"{pre}.ff1.w"],
                                        store[f"{pre}.ff1.b"])),
                      store[f"{pre}.ff2.w"], store[f"{pre}.ff2.b"])
        h = ad.batch_norm(h + f if cfg.residual else f,
                          store[f"{pre}.bn2.gamma"], store[f"{pre}.bn2.beta"],
                          store.buffers, f"{pre}.bn2", training,
                          update_running=update_running)
    return h


def _mlp(x, store, p1, p2):
    return ad.linear(ad.relu(ad.linear(x, store[p1 + ".w"], store[p1 + ".b"])),
                     store[p2 + ".w"], store[p2 + ".b"])


def context_query(h: ad.Tensor, probe_idx, prev: ad.Tensor | None,
                  store: ad.ParamStore, cfg: ModelConfig) -> ad.Tensor:
    """Decoder query, shape (B, d).

    prev is the previously selected port's embedding (None at t=1, where a
    learned start embedding is used). With both context networks disabled
    the query falls back to the mean port embedding.
    """
    parts = []
    if cfg.use_pcn:
        h_probe = ad.take_rows(h, np.asarray(probe_idx))
        parts.append(_mlp(h_probe, store, "pcn1", "pcn2"))
    if cfg.use_rcn:
        h_prev = prev if prev is not None \
            else ad.reshape(store["start"], (1, cfg.d_model))
        parts.append(_mlp(h_prev, store, "rcn1", "rcn2"))
    if not parts:
        parts.append(ad.mean(h, axis=1))
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return ad.linear(total, store["ctx.w"], store["ctx.b"])


def decode_step(h: ad.Tensor, query: ad.Tensor, mask: np.ndarray,
                store: ad.ParamStore, cfg: ModelConfig) -> ad.Tensor:
    """Per-port log-probabilities (B, N); masked ports carry NEG_INF
    (their probability is exactly zero)."""
    if not mask.any(axis=-1).all():
        raise ContractViolation("no feasible port left")
    bsz, d = query.shape[0], cfg.d_model
    q3 = ad.reshape(query, (bsz, 1, d))
    glimpse = ad.mha(q3, h, h, store["dec.wq"], store["dec.wk"],
                     store["dec.wv"], store["dec.wo"], cfg.n_heads)
    keys = ad.linear(h, store["dec.key"])
    logits = ad.scale(ad.matmul(glimpse, ad.transpose(keys, (0, 2, 1))),
                      1.0 / np.sqrt(d))
    logits = ad.reshape(logits, (bsz, h.shape[1]))
    return ad.masked_log_softmax(logits, mask)


def step_probabilities(logp: ad.Tensor) -> np.ndarray:
    """Exact probability view of a decode step (masked entries are 0.0)."""
    return np.exp(logp.data)


def initial_mask(problems) -> np.ndarray:
    n = problems[0].n_ports
    mask = np.ones((len(problems), n), dtype=bool)
    for i, p in enumerate(problems):
        mask[i, p.probe] = False
        mask[i, list(p.keepout)] = False
    return mask


def sequence_log_prob(problems, placements, store: ad.ParamStore,
                      cfg: ModelConfig, training: bool = False,
                      update_running: bool = True) -> ad.Tensor:
    """Teacher-forced log pi(a|x) per batch item, shape (B,)."""
    placements = [tuple(int(a) for a in pl) for pl in placements]
    ks = {len(pl) for pl in placements}
    if len(ks) != 1:
        raise ContractViolation("batch placements must share one length")
    k = ks.pop()
    h = encode(problems, store, cfg, training, update_running)
    mask = initial_mask(problems)
    probes = np.array([p.probe for p in problems])
    prev = None
    total = None
    for t in range(k):
        actions = np.array([pl[t] for pl in placements])
        if not mask[np.arange(len(problems)), actions].all():
            raise ContractViolation("placement contains an infeasible step")
        q = context_query(h, probes, prev, store, cfg)
        logp = decode_step(h, q, mask, store, cfg)
        picked = ad.take_rows(logp, actions)
        total = picked if total is None else total + picked
        mask = mask.copy()
        mask[np.arange(len(problems)), actions] = False
        prev = ad.take_rows(h, actions)
    return total


def log_prob(problem: Problem, placement, store: ad.ParamStore,
             cfg: ModelConfig) -> float:
    """Exact sequence log-probability under the policy (inference mode)."""
    return float(sequence_log_prob([problem], [placement], store, cfg,
                                   training=False).data[0])


def rollout_batch(problems, store: ad.ParamStore, cfg: ModelConfig,
                  mode: str, k: int, rng=None):
    """Autoregressive decode for a batch; returns [(placement, logp), ...].

    Greedy mode breaks ties toward the lowest port index.
    """
    if mode not in ("greedy", "sample"):
        raise ContractViolation("mode must be 'greedy' or 'sample'")
    if mode == "sample" and rng is None:
        raise ContractViolation("sampling requires an rng")
    for p in problems:
        if len(feasible_actions(State(p))) < k:
            raise ContractViolation("fewer feasible ports than K")
    bsz = len(problems)
    h = encode(problems, store, cfg, training=False)
    mask = initial_mask(problems)
    probes = np.array([p.probe for p in problems])
    prev = None
    chosen = [[] for _ in range(bsz)]
    logps = np.zeros(bsz)
    for _ in range(k):
        q = context_query(h, probes, prev, store, cfg)
        logp = decode_step(h, q, mask, store, cfg)
        probs = step_probabilities(logp)
        if mode == "greedy":
            actions = np.argmax(probs, axis=1)
        else:
            actions = np.empty(bsz, dtype=np.int64)
            for i in range(bsz):
                p = probs[i] / probs[i].sum()
                actions[i] = rng.choice(len(p), p=p)
        logps += logp.data[np.arange(bsz), actions]
        for i, a in enumerate(actions):
            chosen[i].append(int(a))
        mask = mask.copy()
        mask[np.arange(bsz), actions] = False
        prev = ad.take_rows(h, actions)
    return [(tuple(c), float(lp)) for c, lp in zip(chosen, logps)]


def rollout(problem: Problem, store: ad.ParamStore, cfg: ModelConfig,
            mode: str, k: int, seed: int | None = None):
    rng = None if seed is None else np.random.Generator(np.random.PCG64(seed))
    return rollout_batch([problem], store, cfg, mode, k, rng)[0]


class DevFormerPolicy:
    """Inference wrapper: sampling and exact sequence probabilities."""

    def __init__(self, store: ad.ParamStore, cfg: ModelConfig):
        self.store = store
        self.cfg = cfg

    def sample_placement(self, problem: Problem, k: int, rng):
        return rollout_batch([problem], self.store, self.cfg, "sample", k, rng)[0]

    def greedy_placement(self, problem: Problem, k: int):
        return rollout_batch([problem], self.store, self.cfg, "greedy", k)[0]

    def placement_log_prob(self, problem: Problem, placement) -> float:
        return log_prob(problem, placement, self.store, self.cfg)


def save_policy(path, store: ad.ParamStore, cfg: ModelConfig, meta=None):
    ad.save_checkpoint(path, store, cfg.to_dict(), meta)


def load_policy(path):
    """Returns (DevFormerPolicy, meta). Refuses tampered config hashes."""
    store, cfg_dict, meta = ad.load_checkpoint(path)
    cfg = ModelConfig.from_dict(cfg_dict)
    return DevFormerPolicy(store, cfg), meta
