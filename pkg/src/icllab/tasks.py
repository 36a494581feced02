"""Token inventory, synthetic tasks, data generation, and prompt rendering.

A task couples a causal direction with a generator:

* ``DIRECT`` (inputs cause labels): x is an i.i.d.-uniform token sequence
  and the label is the argmax of per-label weights applied to the token
  counts of x, flipped to a uniformly chosen other label with probability
  ``eps_flip``. The true label conditional is therefore available in
  closed form.
* ``CHANNEL`` (labels cause inputs): y is uniform and x is emitted by a
  per-label first-order Markov chain over the base tokens, with emission
  rows smoothed toward uniform by ``eps_flip``. The sequence likelihood
  is an explicit product of transition probabilities.

Both render into flat token sequences: label tokens and a per-task
delimiter live in dedicated vocabulary ranges above the base tokens, and
concept tokens (added later by vocabulary extension) live above those.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from .seeding import derive_rng

TokenSeq = tuple[int, ...]


class Direction(enum.Enum):
    DIRECT = "direct"    # x -> y, concept parameterizes the label map
    CHANNEL = "channel"  # y -> x, concept parameterizes the emission chain


@dataclass(frozen=True)
class Vocab:
    """Token id layout: base ids, then per-task label ids, then delimiters.

    ``concept_region_start`` equals the total size at construction time;
    ids at or above it are reserved for concept tokens added later.
    """

    n_base: int
    label_tokens: tuple[tuple[int, ...], ...]
    delimiter_tokens: tuple[int | None, ...]
    concept_region_start: int

    @property
    def size(self) -> int:
        return self.concept_region_start


def build_vocab(n_base: int, tasks: list[tuple[int, bool]]) -> Vocab:
    """Allocate disjoint id ranges for base tokens, labels, and delimiters.

    ``tasks`` is a list of (n_labels, needs_delimiter) pairs, one per task
    slot, allocated in order after the base range [0, n_base).
    """
    if not tasks:
        raise ValueError("empty task set")
    if n_base < 2:
        raise ValueError(f"n_base must be >= 2, got {n_base}")
    labels: list[tuple[int, ...]] = []
    delims: list[int | None] = []
    nxt = n_base
    for n_labels, needs_delim in tasks:
        if n_labels < 2:
            raise ValueError(f"n_labels must be >= 2, got {n_labels}")
        labels.append(tuple(range(nxt, nxt + n_labels)))
        nxt += n_labels
        if needs_delim:
            delims.append(nxt)
            nxt += 1
        else:
            delims.append(None)
    return Vocab(
        n_base=n_base,
        label_tokens=tuple(labels),
        delimiter_tokens=tuple(delims),
        concept_region_start=nxt,
    )


@dataclass(frozen=True)
class GeneratorParams:
    """Concept parameter and noise for one task.

    ``theta_true`` is (n_labels, n_base) label weights for DIRECT and
    (n_labels, n_base, n_base) Markov transition rows for CHANNEL.
    """

    theta_true: np.ndarray
    seq_len: int
    noise: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.noise < 0.5):
            raise ValueError(f"noise too high: eps_flip must be in [0, 0.5), got {self.noise}")
        if not np.all(np.isfinite(self.theta_true)):
            raise ValueError("theta_true must be finite")
        if self.theta_true.ndim == 3:
            rows = self.theta_true.sum(axis=-1)
            if not np.allclose(rows, 1.0, atol=1e-12):
                raise ValueError("transition rows must sum to 1")
        self.theta_true.flags.writeable = False


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    direction: Direction
    n_labels: int
    label_map: tuple[int, ...]   # label index -> token id (injective)
    delimiter: int | None
    gen: GeneratorParams

    def __post_init__(self) -> None:
        if len(set(self.label_map)) != len(self.label_map):
            raise ValueError("label_map must be injective")
        if len(self.label_map) != self.n_labels:
            raise ValueError("label_map size must equal n_labels")


@dataclass(frozen=True)
class Example:
    x: TokenSeq
    y: int
    task_id: int


@dataclass(frozen=True)
class Prompt:
    """Token sequence plus the half-open index span whose probability is queried."""

    tokens: TokenSeq
    target_span: tuple[int, int]

    def __post_init__(self) -> None:
        start, end = self.target_span
        if not (0 <= start < end <= len(self.tokens)):
            raise ValueError(f"target_span {self.target_span} out of bounds for {len(self.tokens)} tokens")


@dataclass(frozen=True)
class TaskGenConfig:
    """Serializable generator configuration (one task)."""

    direction: Direction
    n_labels: int
    n_base: int
    seq_len: int
    eps_flip: float

    def to_json(self, seed: int) -> str:
        return json.dumps(
            {
                "direction": self.direction.value,
                "n_labels": self.n_labels,
                "n_base": self.n_base,
                "seq_len": self.seq_len,
                "eps_flip": self.eps_flip,
                "seed": seed,
            },
            sort_keys=True,
        )

    @staticmethod
    def from_json(text: str) -> tuple["TaskGenConfig", int]:
        obj = json.loads(text)
        cfg = TaskGenConfig(
            direction=Direction(obj["direction"]),
            n_labels=int(obj["n_labels"]),
            n_base=int(obj["n_base"]),
            seq_len=int(obj["seq_len"]),
            eps_flip=float(obj["eps_flip"]),
        )
        return cfg, int(obj["seed"])


def sample_task(
    cfg: TaskGenConfig,
    seed: int,
    *,
    task_id: int = 0,
    label_map: tuple[int, ...] | None = None,
    delimiter: int | None = None,
) -> TaskSpec:
    """Draw a concept parameter for one task, deterministically from seed.

    Token ids default to the canonical single-task layout (labels directly
    above the base range, delimiter after them); suites that share or
    reorder token ranges pass them explicitly.
    """
    if not (0.0 <= cfg.eps_flip < 0.5):
        raise ValueError(f"noise too high: eps_flip must be in [0, 0.5), got {cfg.eps_flip}")
    if label_map is None:
        label_map = tuple(range(cfg.n_base, cfg.n_base + cfg.n_labels))
        if delimiter is None:
            delimiter = cfg.n_base + cfg.n_labels
    rng = derive_rng(seed, "task-theta", task_id)
    if cfg.direction is Direction.DIRECT:
        theta = rng.standard_normal((cfg.n_labels, cfg.n_base))
    else:
        # Dirichlet(1) rows: uniform over the simplex, normalized exactly.
        raw = rng.gamma(1.0, 1.0, size=(cfg.n_labels, cfg.n_base, cfg.n_base))
        theta = raw / raw.sum(axis=-1, keepdims=True)
    return TaskSpec(
        task_id=task_id,
        direction=cfg.direction,
        n_labels=cfg.n_labels,
        label_map=label_map,
        delimiter=delimiter,
        gen=GeneratorParams(theta_true=theta, seq_len=cfg.seq_len, noise=cfg.eps_flip),
    )


def direct_argmax_label(spec: TaskSpec, x: TokenSeq) -> int:
    """Noise-free label for a DIRECT task: argmax of weights applied to token counts."""
    n_base = spec.gen.theta_true.shape[1]
    counts = np.bincount(np.asarray(x), minlength=n_base)
    scores = spec.gen.theta_true @ counts
    return int(np.argmax(scores))  # ties break toward the smaller label


def direct_label_conditional(spec: TaskSpec, x: TokenSeq) -> np.ndarray:
    """P(Y | theta_true, x) for a DIRECT task, including flip noise."""
    eps = spec.gen.noise
    probs = np.full(spec.n_labels, eps / (spec.n_labels - 1))
    probs[direct_argmax_label(spec, x)] = 1.0 - eps
    return probs


def channel_transition(spec: TaskSpec, y: int) -> np.ndarray:
    """Smoothed transition matrix of the label-y emission chain."""
    n_base = spec.gen.theta_true.shape[1]
    eps = spec.gen.noise
    return (1.0 - eps) * spec.gen.theta_true[y] + eps / n_base


def channel_sequence_logprob(spec: TaskSpec, y: int, x: TokenSeq) -> float:
    """log P(x | theta_true, y): uniform start state, then chain transitions."""
    n_base = spec.gen.theta_true.shape[1]
    trans = channel_transition(spec, y)
    logp = -np.log(n_base)
    for prev, cur in zip(x[:-1], x[1:]):
        logp += np.log(trans[prev, cur])
    return float(logp)


def gen_example(spec: TaskSpec, seed: int) -> Example:
    """Sample one example from the task's structural equation."""
    rng = derive_rng(seed, "example", spec.task_id)
    n_base = spec.gen.theta_true.shape[1]
    L = spec.gen.seq_len
    if spec.direction is Direction.DIRECT:
        x = tuple(int(t) for t in rng.integers(0, n_base, size=L))
        y = direct_argmax_label(spec, x)
        if spec.gen.noise > 0 and rng.random() < spec.gen.noise:
            others = [lbl for lbl in range(spec.n_labels) if lbl != y]
            y = int(others[rng.integers(0, len(others))])
        return Example(x=x, y=y, task_id=spec.task_id)
    y = int(rng.integers(0, spec.n_labels))
    trans = channel_transition(spec, y)
    seq = [int(rng.integers(0, n_base))]
    for _ in range(L - 1):
        seq.append(int(rng.choice(n_base, p=trans[seq[-1]])))
    return Example(x=tuple(seq), y=y, task_id=spec.task_id)


def gen_dataset(spec: TaskSpec, n: int, seed: int) -> list[Example]:
    """n examples from one task, each from an independent sub-stream."""
    base = derive_rng(seed, "dataset", spec.task_id).integers(0, 2**31 - 1)
    return [gen_example(spec, int(base) + i) for i in range(n)]


def _label_token(spec: TaskSpec, y: int) -> int:
    if not (0 <= y < spec.n_labels):
        raise ValueError(f"label {y} not in map of size {spec.n_labels}")
    return spec.label_map[y]


def render_demo(ex: Example, spec: TaskSpec) -> TokenSeq:
    """One demonstration as tokens: input, mapped label, delimiter (direction-ordered)."""
    if ex.task_id != spec.task_id:
        raise ValueError(f"example task {ex.task_id} does not match spec task {spec.task_id}")
    tail = () if spec.delimiter is None else (spec.delimiter,)
    if spec.direction is Direction.DIRECT:
        return ex.x + (_label_token(spec, ex.y),) + tail
    return (_label_token(spec, ex.y),) + ex.x + tail


def parse_demo_stream(tokens: TokenSeq, spec: TaskSpec) -> list[tuple[TokenSeq, int]]:
    """Invert render_demo over a concatenation of demonstrations.

    Relies on the fixed per-task sequence length; raises if the stream is
    not an exact concatenation.
    """
    demo_len = spec.gen.seq_len + 1 + (0 if spec.delimiter is None else 1)
    if len(tokens) % demo_len != 0:
        raise ValueError("token stream is not a whole number of demonstrations")
    inv = {tok: y for y, tok in enumerate(spec.label_map)}
    out: list[tuple[TokenSeq, int]] = []
    for i in range(0, len(tokens), demo_len):
        chunk = tokens[i : i + demo_len]
        if spec.delimiter is not None:
            if chunk[-1] != spec.delimiter:
                raise ValueError("missing delimiter")
            chunk = chunk[:-1]
        if spec.direction is Direction.DIRECT:
            x, label_tok = chunk[:-1], chunk[-1]
        else:
            label_tok, x = chunk[0], chunk[1:]
        if label_tok not in inv:
            raise ValueError(f"token {label_tok} is not a label token")
        out.append((x, inv[label_tok]))
    return out


class Query(enum.Enum):
    LABEL = "label"  # ask for the label slot (DIRECT)
    INPUT = "input"  # ask for the input span (CHANNEL)


def build_icl_prompt(demos: list[Example], test: Example, spec: TaskSpec, query: Query) -> Prompt:
    """Concatenated demonstrations followed by the queried test portion.

    DIRECT/LABEL appends the test input and a single label slot
    (initialized to the first label token; substitute a candidate before
    scoring). CHANNEL/INPUT appends the test label token followed by the
    test input span.
    """
    for d in demos:
        if d.task_id != spec.task_id:
            raise ValueError("mixed task ids in prompt")
    if test.task_id != spec.task_id:
        raise ValueError("mixed task ids in prompt")
    if spec.direction is Direction.DIRECT and query is not Query.LABEL:
        raise ValueError("DIRECT tasks take query=LABEL")
    if spec.direction is Direction.CHANNEL and query is not Query.INPUT:
        raise ValueError("CHANNEL tasks take query=INPUT")
    prefix: list[int] = []
    for d in demos:
        prefix.extend(render_demo(d, spec))
    if query is Query.LABEL:
        tokens = tuple(prefix) + test.x + (spec.label_map[0],)
        return Prompt(tokens=tokens, target_span=(len(tokens) - 1, len(tokens)))
    tokens = tuple(prefix) + (_label_token(spec, test.y),) + test.x
    start = len(prefix) + 1
    return Prompt(tokens=tokens, target_span=(start, start + len(test.x)))


class ConceptPromptMode(enum.Enum):
    TRAIN = "train"  # concept tokens as prefix, task target scored
    SCORE = "score"  # concept tokens as suffix target


def build_concept_prompt(
    ex: Example, concept_ids: TokenSeq, spec: TaskSpec, mode: ConceptPromptMode,
    *, concept_region_start: int | None = None,
) -> Prompt:
    """Concept-token prompt for training (prefix) or scoring (suffix target).

    Scoring places the concept tokens after the rendered example, which is
    legitimate with a tied embedding: the same rows serve input lookup and
    output prediction.
    """
    if len(concept_ids) == 0:
        raise ValueError("need at least one concept token")
    if concept_region_start is not None and any(t < concept_region_start for t in concept_ids):
        raise ValueError("concept ids must lie in the concept region")
    return _concept_prompt_tokens(ex, concept_ids, spec, mode)


def _concept_prompt_tokens(
    ex: Example, concept_ids: TokenSeq, spec: TaskSpec, mode: ConceptPromptMode
) -> Prompt:
    # Shared layout; the public wrapper adds the concept-region check so the
    # random-token control can reuse this with ordinary vocabulary ids.
    concept_ids = tuple(concept_ids)
    label = _label_token(spec, ex.y)
    c = len(concept_ids)
    if mode is ConceptPromptMode.TRAIN:
        if spec.direction is Direction.DIRECT:
            tokens = concept_ids + ex.x + (label,)
            return Prompt(tokens=tokens, target_span=(len(tokens) - 1, len(tokens)))
        tokens = concept_ids + (label,) + ex.x
        return Prompt(tokens=tokens, target_span=(c + 1, c + 1 + len(ex.x)))
    if spec.direction is Direction.DIRECT:
        tokens = ex.x + (label,) + concept_ids
    else:
        tokens = (label,) + ex.x + concept_ids
    return Prompt(tokens=tokens, target_span=(len(tokens) - c, len(tokens)))


def build_pretrain_corpus(
    specs: list[TaskSpec],
    n_sequences: int,
    seed: int,
    *,
    ctx_len: int,
    min_demos: int = 1,
    max_demos: int = 16,
) -> list[TokenSeq]:
    """Rendered demo sequences over a task mixture, for LM pretraining.

    Each sequence concatenates a random number of demonstrations from a
    single task, truncated to fit the context window.
    """
    if not specs:
        raise ValueError("empty task mixture")
    rng = derive_rng(seed, "corpus")
    corpus: list[TokenSeq] = []
    for i in range(n_sequences):
        spec = specs[int(rng.integers(0, len(specs)))]
        m = int(rng.integers(min_demos, max_demos + 1))
        ex_seed = int(rng.integers(0, 2**31 - 1))
        toks: list[int] = []
        for j in range(m):
            demo = render_demo(gen_example(spec, ex_seed + j), spec)
            if len(toks) + len(demo) > ctx_len:
                break
            toks.extend(demo)
        corpus.append(tuple(toks))
    return corpus


def example_to_json(ex: Example) -> str:
    return json.dumps({"task": ex.task_id, "x": list(ex.x), "y": ex.y}, sort_keys=True)


def example_from_json(line: str) -> Example:
    obj = json.loads(line)
    return Example(x=tuple(int(t) for t in obj["x"]), y=int(obj["y"]), task_id=int(obj["task"]))
