"""Symmetry-exploiting training for the placement policy.

Two loss terms: teacher-forced imitation on a permutation-augmented expert
dataset, and a self-term that penalizes the probability gap between a
trajectory sampled from a frozen snapshot of the policy and a random
reordering of it. The self-term is exactly the order-bias metric under the
snapshot's own trajectory distribution; its raw magnitude is a product of
step probabilities, hence the very large weight (the paper-scale preset
stores lambda * 1e32 as a single number).
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, asdict, field

import numpy as np

from . import autodiff as ad
from . import policy as pol
from .env import (Evaluator, Problem, State, feasible_actions, gen_problem,
                  gen_problem_set)
from .errors import ContractViolation, NumericFailure
from .search import ExpertRecord

TRAIN_LOG_COLUMNS = ("step", "train_nll", "self_loss", "val_J", "order_bias")


# --- action-order transformations ------------------------------------------

def ap_transform(placement, rng) -> tuple:
    """Uniformly random reordering of the action sequence (same port set)."""
    placement = tuple(placement)
    perm = rng.permutation(len(placement))
    return tuple(placement[i] for i in perm)


def augment(records, p: int, seed: int) -> list:
    """Each expert record plus p reordered copies; size len(records)*(p+1)."""
    if p < 0:
        raise ContractViolation("p must be >= 0")
    rng = np.random.Generator(np.random.PCG64(seed))
    out = []
    for rec in records:
        out.append(rec)
        for _ in range(p):
            out.append(ExpertRecord(rec.problem,
                                    ap_transform(rec.placement, rng),
                                    rec.score, rec.budget, rec.seed))
    return out


# --- losses -----------------------------------------------------------------

def expert_loss(batch, store: ad.ParamStore, cfg: pol.ModelConfig) -> ad.Tensor:
    """Mean teacher-forced negative log-likelihood of expert placements."""
    problems = [r.problem for r in batch]
    placements = [r.placement for r in batch]
    lps = pol.sequence_log_prob(problems, placements, store, cfg, training=True)
    return ad.scale(ad.mean(lps), -1.0)


def self_loss(problems, store: ad.ParamStore, frozen: ad.ParamStore,
              cfg: pol.ModelConfig, k: int, rng,
              transforms_per_sample: int = 1) -> ad.Tensor:
    """Mean |pi_frozen(a'|x) - pi_theta(t(a')|x)| over sampled trajectories.

    Both sequence probabilities are computed along the same batched
    training-mode path, so with frozen == store and identity transforms the
    loss is exactly zero. The absolute gap is evaluated as
    e^c * |e^(l1-c) - e^(l2-c)| with c = max(l1, l2) to avoid underflow.
    Gradients flow only through store.
    """
    samples = pol.rollout_batch(problems, frozen, cfg, "sample", k, rng)
    placements = [s[0] for s in samples]
    rep_problems, rep_transformed = [], []
    for prob, placement in zip(problems, placements):
        for _ in range(transforms_per_sample):
            rep_problems.append(prob)
            rep_transformed.append(ap_transform(placement, rng))
    l_frozen = pol.sequence_log_prob(
        [p for p in problems for _ in range(transforms_per_sample)],
        [pl for pl in placements for _ in range(transforms_per_sample)],
        frozen, cfg, training=True, update_running=False).data
    l_theta = pol.sequence_log_prob(rep_problems, rep_transformed, store, cfg,
                                    training=True, update_running=False)
    c = np.maximum(l_frozen, l_theta.data)
    gap = ad.absolute(ad.Tensor(np.exp(l_frozen - c))
                      - ad.exp(l_theta + ad.Tensor(-c)))
    return ad.mean(ad.mul(ad.Tensor(np.exp(c)), gap))


def total_loss(batch, problems, store, frozen, cfg: pol.ModelConfig,
               k: int, lambda_eff: float, rng) -> tuple:
    """(loss tensor, expert component, self component)."""
    l_exp = expert_loss(batch, store, cfg)
    if lambda_eff == 0.0:
        return l_exp, float(l_exp.data), 0.0
    l_self = self_loss(problems, store, frozen, cfg, k, rng)
    return (l_exp + ad.scale(l_self, lambda_eff),
            float(l_exp.data), float(l_self.data))


# --- optimizer ----------------------------------------------------------------

class Adam:
    def __init__(self, store: ad.ParamStore, lr: float,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(t.data) for n, t in store.params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in store.params.items()}

    def step(self) -> None:
        self.t += 1
        for name, t in self.store.params.items():
            g = t.grad
            if g is None:
                continue
            m = self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            v = self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            t.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# --- training configuration ---------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 100
    permutations: int = 4          # reordered copies per expert label
    lambda_eff: float = 5e32       # weight on the self term (lambda * 1e32)
    k: int = 20
    n_train: int = 2000
    val_size: int = 100
    max_steps: int = 2000
    val_interval: int = 50
    patience: int = 20             # validation rounds without improvement
    seed: int = 0
    n_rows: int = 10
    n_cols: int = 10
    keepout_max: int = 15
    theta_refresh_every: int = 1
    self_batch: int | None = None  # defaults to batch_size

    def to_dict(self) -> dict:
        return asdict(self)


def paper_train_config(**overrides) -> TrainConfig:
    return TrainConfig(**overrides)


def toy_train_config(**overrides) -> TrainConfig:
    base = dict(learning_rate=1e-3, batch_size=25, permutations=4,
                lambda_eff=1e3, k=4, n_train=50, val_size=20,
                max_steps=800, val_interval=100, patience=20,
                n_rows=5, n_cols=5, keepout_max=4, self_batch=16)
    base.update(overrides)
    return TrainConfig(**base)


# --- order bias ----------------------------------------------------------------

@dataclass(frozen=True)
class OrderBiasEstimate:
    value: float
    sample_width: int
    seed: int


def order_bias_estimate(policy, problems, s: int, seed: int,
                        k: int) -> OrderBiasEstimate:
    """Monte Carlo order bias: mean |pi(a|x) - pi(t(a)|x)| over s draws of
    (problem uniform, a ~ pi, t uniform). One triple per draw."""
    if s < 1:
        raise ContractViolation("sample width must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    terms = []
    for _ in range(s):
        prob = problems[int(rng.integers(len(problems)))]
        placement, lp = policy.sample_placement(prob, k, rng)
        transformed = ap_transform(placement, rng)
        lp2 = policy.placement_log_prob(prob, transformed)
        terms.append(abs(math.exp(lp) - math.exp(lp2)))
    return OrderBiasEstimate(float(np.mean(terms)), s, seed)


class SequentialUniformPolicy:
    """Uniform over feasible ports at every step; exactly order-unbiased."""

    def sample_placement(self, problem: Problem, k: int, rng):
        state = State(problem)
        lp = 0.0
        chosen = []
        for _ in range(k):
            feas = sorted(feasible_actions(state))
            a = int(feas[int(rng.integers(len(feas)))])
            lp += math.log(1.0 / len(feas))
            chosen.append(a)
            state = State(problem, state.chosen + (a,))
        return tuple(chosen), lp

    def placement_log_prob(self, problem: Problem, placement) -> float:
        m = len(feasible_actions(State(problem)))
        if len(set(placement)) != len(placement):
            raise ContractViolation("placement must be distinct")
        return float(sum(math.log(1.0 / (m - t)) for t in range(len(placement))))


@dataclass(frozen=True)
class TheoremReport:
    order_bias: float
    is_symmetric: bool
    n_trajectories: int
    counterexample: tuple | None
    consistent: bool


def theorem_check(policy, problem: Problem, k: int,
                  trajectory_weights=None,
                  transform_weights=None) -> TheoremReport:
    """Exact order bias by full enumeration on a tiny board.

    Asserts the equivalence: bias is zero iff the policy assigns equal
    probability to every reordering of every trajectory. Weight
    distributions must be strictly positive.
    """
    feas = sorted(feasible_actions(State(problem)))
    if len(feas) > 6 or k > 3:
        raise ContractViolation("board too large for exhaustive check")
    trajectories = list(itertools.permutations(feas, k))
    transforms = list(itertools.permutations(range(k)))
    if trajectory_weights is None:
        trajectory_weights = [1.0 / len(trajectories)] * len(trajectories)
    if transform_weights is None:
        transform_weights = [1.0 / len(transforms)] * len(transforms)
    if len(trajectory_weights) != len(trajectories) or \
            len(transform_weights) != len(transforms):
        raise ContractViolation("weight vector length mismatch")
    if any(w <= 0 for w in trajectory_weights) or \
            any(w <= 0 for w in transform_weights):
        raise ContractViolation("theorem requires strictly positive distributions")

    probs = {a: math.exp(policy.placement_log_prob(problem, a))
             for a in trajectories}
    bias = 0.0
    counterexample = None
    symmetric = True
    for a, wa in zip(trajectories, trajectory_weights):
        for t, wt in zip(transforms, transform_weights):
            ta = tuple(a[i] for i in t)
            gap = abs(probs[a] - probs[ta])
            bias += wa * wt * gap
            if gap != 0.0 and counterexample is None:
                counterexample = (a, t)
                symmetric = False
    return TheoremReport(order_bias=bias, is_symmetric=symmetric,
                         n_trajectories=len(trajectories),
                         counterexample=counterexample,
                         consistent=(bias == 0.0) == symmetric)


# --- training loop ---------------------------------------------------------------

@dataclass
class TrainResult:
    store: ad.ParamStore
    model_config: pol.ModelConfig
    train_config: TrainConfig
    log_rows: list = field(default_factory=list)
    best_val: float = -np.inf
    steps_run: int = 0
    final_store: ad.ParamStore | None = None  # parameters at the last step run


def _self_problem_stream(cfg: TrainConfig, excluded_hashes, rng):
    while True:
        p = gen_problem(rng, cfg.n_rows, cfg.n_cols, cfg.keepout_max)
        if p.canonical_hash() in excluded_hashes:
            continue
        yield p


def train(records, tcfg: TrainConfig, mcfg: pol.ModelConfig,
          evaluator: Evaluator, val_problems, store=None,
          order_bias_samples: int = 32, diagnostics_path=None) -> TrainResult:
    """Mini-batch descent on the combined loss with greedy validation and
    early stopping on the best validation score. Deterministic per seed."""
    if not val_problems:
        raise ContractViolation("need validation problems")
    val_hashes = {p.canonical_hash() for p in val_problems}
    for rec in records:
        if rec.problem.canonical_hash() in val_hashes:
            raise ContractViolation("training and validation problems overlap")

    data = augment(records, tcfg.permutations, seed=tcfg.seed)
    rng = np.random.Generator(np.random.PCG64(tcfg.seed + 1))
    stream = _self_problem_stream(tcfg, val_hashes, rng)
    if store is None:
        store = pol.init_params(mcfg)
    opt = Adam(store, tcfg.learning_rate)
    result = TrainResult(store=store, model_config=mcfg, train_config=tcfg)
    best_store = store.copy()
    rounds_since_best = 0
    frozen = store.copy()
    order = []
    self_batch = tcfg.self_batch or tcfg.batch_size

    for step_i in range(1, tcfg.max_steps + 1):
        if len(order) < tcfg.batch_size:
            order = list(rng.permutation(len(data)))
        batch = [data[order.pop()] for _ in range(tcfg.batch_size)]
        if (step_i - 1) % tcfg.theta_refresh_every == 0:
            frozen = store.copy()
        problems = [next(stream) for _ in range(self_batch)] \
            if tcfg.lambda_eff else []
        loss, l_exp, l_self = total_loss(batch, problems, store, frozen,
                                         mcfg, tcfg.k, tcfg.lambda_eff, rng)
        if not np.isfinite(loss.data):
            state = {"step": step_i, "expert_loss": l_exp, "self_loss": l_self,
                     "train_config": tcfg.to_dict()}
            if diagnostics_path:
                with open(diagnostics_path, "w") as fh:
                    json.dump(state, fh, indent=2, sort_keys=True)
            raise NumericFailure(f"non-finite loss at step {step_i}: {state}")
        store.zero_grad()
        loss.backward()
        opt.step()
        result.steps_run = step_i

        if step_i % tcfg.val_interval == 0 or step_i == tcfg.max_steps:
            val_j = validate(store, mcfg, evaluator, val_problems, tcfg.k)
            bias = order_bias_estimate(pol.DevFormerPolicy(store, mcfg),
                                       val_problems, order_bias_samples,
                                       seed=tcfg.seed + 2, k=tcfg.k)
            result.log_rows.append({"step": step_i, "train_nll": l_exp,
                                    "self_loss": l_self, "val_J": val_j,
                                    "order_bias": bias.value})
            if val_j > result.best_val:
                result.best_val = val_j
                best_store = store.copy()
                rounds_since_best = 0
            else:
                rounds_since_best += 1
                if rounds_since_best >= tcfg.patience:
                    break

    result.final_store = store
    result.store = best_store
    return result


def validate(store, mcfg, evaluator: Evaluator, problems, k: int) -> float:
    """Mean objective of one greedy rollout per problem (single-shot)."""
    outs = pol.rollout_batch(list(problems), store, mcfg, "greedy", k)
    scores = [evaluator.evaluate(p, placement)
              for p, (placement, _) in zip(problems, outs)]
    return float(np.mean(scores))


def write_train_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(TRAIN_LOG_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(repr(row[c]) for c in TRAIN_LOG_COLUMNS) + "\n")


def make_validation_problems(tcfg: TrainConfig, seed: int,
                             exclude_hashes=()) -> list:
    return gen_problem_set(seed, tcfg.val_size, tcfg.n_rows, tcfg.n_cols,
                           tcfg.keepout_max, exclude_hashes)
