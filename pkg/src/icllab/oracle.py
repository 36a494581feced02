"""Exact Bayesian predictions in finite-concept worlds.

A world holds a finite concept set with a prior and explicit conditional
tables, so posteriors, in-context predictive distributions, and
misclassification risks are all exact finite sums. This is the reference
against which the theory is verified: the in-context predictive is a
posterior-weighted mixture of per-concept conditionals, and its induced
classifier can never beat the classifier that conditions on the true
concept directly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .tasks import Direction, Prompt, TaskSpec, TokenSeq, parse_demo_stream

_ATOL = 1e-12

DemoPair = tuple[TokenSeq, int]


@dataclass(frozen=True)
class ExactWorld:
    """Finite concept set with explicit conditional tables.

    For DIRECT worlds ``cond[j, ix, y]`` is P(Y=y | theta_j, x) and ``px``
    is the concept-independent input marginal. For CHANNEL worlds
    ``cond[j, y, ix]`` is P(X=x | theta_j, y) and ``py`` is the label
    prior. The input marginal (DIRECT) and label prior (CHANNEL) being
    single tables is what makes test-side evidence cancel from concept
    posteriors.
    """

    direction: Direction
    theta_names: tuple[str, ...]
    prior: np.ndarray
    x_space: tuple[TokenSeq, ...]
    n_labels: int
    cond: np.ndarray
    px: np.ndarray | None = None
    py: np.ndarray | None = None

    def __post_init__(self) -> None:
        if len(self.x_space) == 0:
            raise ValueError("x_space must be non-empty")
        if abs(self.prior.sum() - 1.0) > _ATOL:
            raise ValueError("prior must sum to 1")
        rows = self.cond.sum(axis=-1)
        if not np.all(np.abs(rows - 1.0) <= 1e-9):
            raise ValueError("conditional rows must sum to 1")
        if self.direction is Direction.DIRECT:
            if self.px is None or abs(self.px.sum() - 1.0) > _ATOL:
                raise ValueError("DIRECT worlds need a normalized input marginal px")
        else:
            if self.py is None or abs(self.py.sum() - 1.0) > _ATOL:
                raise ValueError("CHANNEL worlds need a normalized label prior py")
        for arr in (self.prior, self.cond, self.px, self.py):
            if arr is not None:
                arr.flags.writeable = False

    @property
    def n_theta(self) -> int:
        return len(self.theta_names)

    def x_index(self, x: TokenSeq) -> int:
        try:
            return self._x_lookup[x]
        except AttributeError:
            object.__setattr__(self, "_x_lookup", {v: i for i, v in enumerate(self.x_space)})
            return self._x_lookup[x]

    def to_json(self) -> str:
        obj = {
            "direction": self.direction.value,
            "theta_names": list(self.theta_names),
            "prior": self.prior.tolist(),
            "x_space": [list(x) for x in self.x_space],
            "n_labels": self.n_labels,
            "cond": self.cond.tolist(),
            "px": None if self.px is None else self.px.tolist(),
            "py": None if self.py is None else self.py.tolist(),
        }
        return json.dumps(obj, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "ExactWorld":
        obj = json.loads(text)
        return ExactWorld(
            direction=Direction(obj["direction"]),
            theta_names=tuple(obj["theta_names"]),
            prior=np.asarray(obj["prior"], dtype=float),
            x_space=tuple(tuple(x) for x in obj["x_space"]),
            n_labels=int(obj["n_labels"]),
            cond=np.asarray(obj["cond"], dtype=float),
            px=None if obj["px"] is None else np.asarray(obj["px"], dtype=float),
            py=None if obj["py"] is None else np.asarray(obj["py"], dtype=float),
        )


@dataclass(frozen=True)
class LabelDist:
    probs: np.ndarray

    def __post_init__(self) -> None:
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > _ATOL:
            raise ValueError("not a probability vector")


@dataclass(frozen=True)
class ThetaPosterior:
    probs: np.ndarray

    def __post_init__(self) -> None:
        if abs(self.probs.sum() - 1.0) > _ATOL:
            raise ValueError("not a probability vector")


def _demo_likelihoods(world: ExactWorld, demos: list[DemoPair]) -> np.ndarray:
    """Per-concept likelihood of the demonstration list (product over demos)."""
    lik = np.ones(world.n_theta)
    for x, y in demos:
        ix = world.x_index(x)
        if world.direction is Direction.DIRECT:
            lik = lik * world.cond[:, ix, y]
        else:
            lik = lik * world.cond[:, y, ix]
    return lik


def posterior_theta(
    world: ExactWorld, demos: list[DemoPair], test_x: TokenSeq | None = None
) -> ThetaPosterior:
    """Bayes posterior over concepts given demonstrations.

    ``test_x`` may be supplied to mirror the conditioning set of the
    in-context predictive; its likelihood is the concept-independent
    marginal (a single table in this world), so it cancels and the
    posterior is returned unchanged.
    """
    if test_x is not None:
        world.x_index(test_x)  # must be a valid input value
    w = world.prior * _demo_likelihoods(world, demos)
    total = w.sum()
    if total <= 0.0:
        raise ValueError("posterior undefined: zero likelihood under every concept")
    return ThetaPosterior(probs=w / total)


def icl_predictive(world: ExactWorld, demos: list[DemoPair], test_x: TokenSeq) -> LabelDist:
    """Posterior-mixture label distribution for a DIRECT world."""
    if world.direction is not Direction.DIRECT:
        raise ValueError("use channel_predictive for CHANNEL worlds")
    post = posterior_theta(world, demos).probs
    ix = world.x_index(test_x)
    return LabelDist(probs=post @ world.cond[:, ix, :])


def channel_predictive(world: ExactWorld, demos: list[DemoPair], test_y: int) -> np.ndarray:
    """Posterior-mixture input distribution for a CHANNEL world."""
    if world.direction is not Direction.CHANNEL:
        raise ValueError("use icl_predictive for DIRECT worlds")
    if not (0 <= test_y < world.n_labels):
        raise ValueError(f"label {test_y} out of range")
    post = posterior_theta(world, demos).probs
    return post @ world.cond[:, test_y, :]


def bayes_classifier(world: ExactWorld, theta_idx: int) -> np.ndarray:
    """Per-input argmax classifier under one concept; ties go to the smaller label.

    CHANNEL worlds require a balanced label prior: only then is the
    per-label input likelihood argmax the posterior argmax.
    """
    if world.direction is Direction.CHANNEL:
        if world.py is None or not np.allclose(world.py, 1.0 / world.n_labels, atol=_ATOL):
            raise ValueError("balanced labels required")
        table = world.cond[theta_idx].T  # (x, y)
    else:
        table = world.cond[theta_idx]  # (x, y)
    return np.argmax(table, axis=1)


def risk(world: ExactWorld, theta_idx: int, classifier: np.ndarray) -> float:
    """Misclassification probability of a per-input classifier under one concept."""
    classifier = np.asarray(classifier)
    if classifier.shape != (len(world.x_space),):
        raise ValueError("classifier must assign a label to every input value")
    if world.direction is Direction.DIRECT:
        correct = np.take_along_axis(world.cond[theta_idx], classifier[:, None], axis=1)[:, 0]
        return float(np.sum(world.px * (1.0 - correct)))
    # CHANNEL: expectation over the joint P(y) P(x | theta, y).
    joint = world.py[:, None] * world.cond[theta_idx]  # (y, x)
    wrong = classifier[None, :] != np.arange(world.n_labels)[:, None]
    return float(np.sum(joint * wrong))


@dataclass(frozen=True)
class TheoremReport:
    """Per-demo-set comparison of the in-context classifier against Bayes."""

    n_sets: int
    bayes_risk: float
    icl_risk: np.ndarray
    posterior_mass_on_true: np.ndarray
    argmax_agrees: np.ndarray
    n_violations: int
    max_violation: float
    n_equality_mismatches: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "n_sets": self.n_sets,
                "bayes_risk": self.bayes_risk,
                "n_violations": self.n_violations,
                "max_violation": self.max_violation,
                "n_equality_mismatches": self.n_equality_mismatches,
                "icl_risk_min": float(self.icl_risk.min()) if self.n_sets else None,
                "icl_risk_max": float(self.icl_risk.max()) if self.n_sets else None,
                "mean_posterior_mass_on_true": float(self.posterior_mass_on_true.mean())
                if self.n_sets
                else None,
                "n_argmax_agrees": int(self.argmax_agrees.sum()),
            },
            sort_keys=True,
        )


def _posteriors_for_sets(
    world: ExactWorld, demo_sets: list[list[DemoPair]]
) -> np.ndarray:
    """Stacked posteriors, one row per demo set (vectorized over equal-k groups)."""
    n_pairs = len(world.x_space) * world.n_labels
    if world.direction is Direction.DIRECT:
        pair_lik = world.cond.reshape(world.n_theta, n_pairs)  # (j, x*y)
        pair_of = lambda x, y: world.x_index(x) * world.n_labels + y
    else:
        pair_lik = np.transpose(world.cond, (0, 2, 1)).reshape(world.n_theta, n_pairs)
        pair_of = lambda x, y: world.x_index(x) * world.n_labels + y
    with np.errstate(divide="ignore"):
        log_pair = np.log(pair_lik)
        log_prior = np.log(world.prior)
    out = np.empty((len(demo_sets), world.n_theta))
    by_k: dict[int, list[int]] = {}
    for i, ds in enumerate(demo_sets):
        by_k.setdefault(len(ds), []).append(i)
    for k, idxs in by_k.items():
        if k == 0:
            out[idxs] = world.prior
            continue
        pairs = np.array(
            [[pair_of(x, y) for x, y in demo_sets[i]] for i in idxs], dtype=int
        )  # (s, k)
        loglik = log_pair[:, pairs].sum(axis=-1).T  # (s, j)
        logw = loglik + log_prior
        m = logw.max(axis=1, keepdims=True)
        if not np.all(np.isfinite(m)):
            raise ValueError("posterior undefined: zero likelihood under every concept")
        w = np.exp(logw - m)
        out[idxs] = w / w.sum(axis=1, keepdims=True)
    return out


def verify_theorem1(
    world: ExactWorld, theta_idx: int, demo_sets: list[list[DemoPair]], *, atol: float = 1e-12
) -> TheoremReport:
    """Check icl_risk >= bayes_risk on every demo set, with equality when
    the posterior fully concentrates on the true concept.

    Equality can also occur without concentration whenever the mixture
    argmax happens to agree with the Bayes argmax everywhere; agreement is
    reported per set rather than asserted as necessary.
    """
    bayes = bayes_classifier(world, theta_idx)
    bayes_r = risk(world, theta_idx, bayes)
    post = _posteriors_for_sets(world, demo_sets)  # (s, j)
    if world.direction is Direction.DIRECT:
        pred = np.einsum("sj,jxy->sxy", post, world.cond)
    else:
        pred = np.einsum("sj,jyx->sxy", post, world.cond)
    cls = np.argmax(pred, axis=2)  # (s, x); np.argmax ties to the smaller label
    mass_true = post[:, theta_idx]
    if world.direction is Direction.DIRECT:
        correct = np.take_along_axis(world.cond[theta_idx], cls.T, axis=1)  # (x, s)
        icl_r = ((1.0 - correct) * world.px[:, None]).sum(axis=0)
    else:
        joint = world.py[:, None] * world.cond[theta_idx]  # (y, x)
        wrong = cls[:, None, :] != np.arange(world.n_labels)[None, :, None]  # (s, y, x)
        icl_r = (joint[None] * wrong).sum(axis=(1, 2))
    agrees = np.all(cls == bayes[None, :], axis=1)
    gap = bayes_r - icl_r  # positive gap would violate the theorem
    violations = gap > atol
    concentrated = np.abs(mass_true - 1.0) <= atol
    equality_mismatch = concentrated & (np.abs(icl_r - bayes_r) > atol)
    return TheoremReport(
        n_sets=len(demo_sets),
        bayes_risk=bayes_r,
        icl_risk=icl_r,
        posterior_mass_on_true=mass_true,
        argmax_agrees=agrees,
        n_violations=int(violations.sum()),
        max_violation=float(gap.max(initial=0.0)),
        n_equality_mismatches=int(equality_mismatch.sum()),
    )


def enumerate_demo_sets(
    world: ExactWorld, theta_idx: int, k_max: int, *, max_sets_per_k: int | None = None, seed: int = 0
) -> list[list[DemoPair]]:
    """All demonstration tuples up to k_max with positive probability under
    the true concept (optionally subsampled per k, deterministically)."""
    pairs: list[DemoPair] = []
    for ix, x in enumerate(world.x_space):
        for y in range(world.n_labels):
            if world.direction is Direction.DIRECT:
                p = world.px[ix] * world.cond[theta_idx, ix, y]
            else:
                p = world.py[y] * world.cond[theta_idx, y, ix]
            if p > 0.0:
                pairs.append((x, y))
    sets: list[list[DemoPair]] = [[]]
    rng = np.random.default_rng(seed)
    for k in range(1, k_max + 1):
        total = len(pairs) ** k
        if max_sets_per_k is not None and total > max_sets_per_k:
            draws = rng.integers(0, len(pairs), size=(max_sets_per_k, k))
            sets.extend([[pairs[j] for j in row] for row in draws])
        else:
            idx = np.indices((len(pairs),) * k).reshape(k, -1).T
            sets.extend([[pairs[j] for j in row] for row in idx])
    return sets


def sample_demos(
    world: ExactWorld, theta_idx: int, k: int, rng: np.random.Generator
) -> list[DemoPair]:
    """k i.i.d. demonstrations from the true concept's joint distribution."""
    out: list[DemoPair] = []
    for _ in range(k):
        if world.direction is Direction.DIRECT:
            ix = int(rng.choice(len(world.x_space), p=world.px))
            y = int(rng.choice(world.n_labels, p=world.cond[theta_idx, ix]))
        else:
            y = int(rng.choice(world.n_labels, p=world.py))
            ix = int(rng.choice(len(world.x_space), p=world.cond[theta_idx, y]))
        out.append((world.x_space[ix], y))
    return out


class OracleScorer:
    """Span scorer backed by an exact world instead of a neural model.

    Parses in-context prompts built for ``spec`` back into demonstrations
    and a test query, then returns the exact mixture log-probability.
    Lets the evaluation path be cross-checked against enumeration.
    """

    def __init__(self, world: ExactWorld, spec: TaskSpec):
        if world.direction is not spec.direction:
            raise ValueError("world and spec directions differ")
        self.world = world
        self.spec = spec

    def span_logprob(self, prompt: Prompt) -> float:
        start, end = prompt.target_span
        spec = self.spec
        L = spec.gen.seq_len
        inv = {tok: y for y, tok in enumerate(spec.label_map)}
        if spec.direction is Direction.DIRECT:
            if (end - start) != 1 or end != len(prompt.tokens):
                raise ValueError("DIRECT prompts query a single trailing label slot")
            test_x = prompt.tokens[start - L : start]
            demos = parse_demo_stream(prompt.tokens[: start - L], spec)
            y = inv[prompt.tokens[start]]
            dist = icl_predictive(self.world, demos, test_x)
            return float(np.log(dist.probs[y]))
        if end != len(prompt.tokens) or (end - start) != L:
            raise ValueError("CHANNEL prompts query the trailing input span")
        test_x = prompt.tokens[start:end]
        y = inv[prompt.tokens[start - 1]]
        demos = parse_demo_stream(prompt.tokens[: start - 1], spec)
        dist = channel_predictive(self.world, demos, y)
        return float(np.log(dist[self.world.x_index(test_x)]))
