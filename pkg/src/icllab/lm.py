"""A small causal transformer LM in f64 numpy with hand-written backprop.

Pre-LN GPT-style blocks, learned positional embeddings, and a single
embedding matrix tied between input lookup and the output projection
(logits are hidden states times the embedding transpose). The tied matrix
is what lets freshly added vocabulary rows be both conditioned on (as a
prompt prefix) and predicted (as a suffix target).

Two numerical properties are load-bearing and covered by tests:

* Per-position distributions are causal and prefix-stable: evaluating a
  prefix yields bit-identical log-probabilities. Attention reductions are
  padded to a fixed width so the accumulation order cannot depend on the
  prompt length.
* Gradients of the loss with respect to embedding rows match central
  finite differences to ~1e-6 relative in f64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .optim import TrainConfig, clip_by_global_norm, make_optimizer
from .seeding import derive_rng
from .tasks import Prompt, TokenSeq

_LN_EPS = 1e-5
_INIT_STD = 0.02
_GELU_C = math.sqrt(2.0 / math.pi)
_PAIRWISE_BLOCK = 128  # numpy sums are sequential up to this length


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    ctx_len: int = 256
    seed: int = 0

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.vocab_size < 1 or self.ctx_len < 1:
            raise ValueError("vocab_size and ctx_len must be positive")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "ctx_len": self.ctx_len,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(obj: dict) -> "ModelConfig":
        return ModelConfig(**{k: int(v) for k, v in obj.items()})


def param_names(cfg: ModelConfig) -> list[str]:
    """Canonical parameter order (also the checkpoint tensor order)."""
    names = ["emb", "pos"]
    for i in range(cfg.n_layers):
        names += [
            f"l{i}.ln1_g", f"l{i}.ln1_b",
            f"l{i}.w_qkv", f"l{i}.b_qkv",
            f"l{i}.w_o", f"l{i}.b_o",
            f"l{i}.ln2_g", f"l{i}.ln2_b",
            f"l{i}.w_fc", f"l{i}.b_fc",
            f"l{i}.w_proj", f"l{i}.b_proj",
        ]
    names += ["lnf_g", "lnf_b"]
    return names


def param_shape(cfg: ModelConfig, name: str) -> tuple[int, ...]:
    D, F = cfg.d_model, cfg.d_ff
    leaf = name.split(".")[-1]
    return {
        "emb": (cfg.vocab_size, D),
        "pos": (cfg.ctx_len, D),
        "ln1_g": (D,), "ln1_b": (D,), "ln2_g": (D,), "ln2_b": (D,),
        "lnf_g": (D,), "lnf_b": (D,),
        "w_qkv": (D, 3 * D), "b_qkv": (3 * D,),
        "w_o": (D, D), "b_o": (D,),
        "w_fc": (D, F), "b_fc": (F,),
        "w_proj": (F, D), "b_proj": (D,),
    }[leaf]


@dataclass
class LmParams:
    """Model weights; ``tensors`` is keyed by the canonical parameter names."""

    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def copy(self) -> "LmParams":
        return LmParams(config=self.config, tensors={k: v.copy() for k, v in self.tensors.items()})

    def num_params(self) -> int:
        return sum(v.size for v in self.tensors.values())


def init(config: ModelConfig) -> LmParams:
    """Deterministic initialization: N(0, 0.02^2) weights, zero biases, unit gains."""
    rng = derive_rng(config.seed, "init")
    tensors: dict[str, np.ndarray] = {}
    for name in param_names(config):
        shape = param_shape(config, name)
        leaf = name.split(".")[-1]
        if leaf.startswith("b_") or leaf.endswith("_b"):
            tensors[name] = np.zeros(shape)
        elif leaf.endswith("_g"):
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = rng.normal(0.0, _INIT_STD, size=shape)
    return LmParams(config=config, tensors=tensors)


def _layernorm_fwd(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def _layernorm_bwd(dy: np.ndarray, cache) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, inv, g = cache
    dg = np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1)))
    db = np.sum(dy, axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def _gelu_fwd(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """tanh-approximation GELU; returns (activation, tanh term) for backward reuse."""
    t = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
    return 0.5 * x * (1.0 + t), t


def _gelu_bwd(x: np.ndarray, t: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 0.134145 * x * x)


def _forward(params: LmParams, tok: np.ndarray, want_cache: bool, *, fixed_shape: bool = False):
    """Run the network on an int token batch (B, T); returns logits and cache.

    With ``fixed_shape`` the sequence is right-padded to ctx_len before any
    compute, so every reduction and GEMM has a length-independent geometry.
    BLAS kernel choice varies with operand shape and perturbs results at
    the ulp level, so this is the only way to honor the bit-exact
    prefix-invariance contract of ``logprobs``. The causal mask guarantees
    the pad positions cannot influence the real ones.
    """
    cfg = params.config
    t = params.tensors
    B, T_real = tok.shape
    if T_real > cfg.ctx_len:
        raise ValueError(f"context overflow: {T_real} tokens > ctx_len {cfg.ctx_len}")
    if fixed_shape and T_real < cfg.ctx_len:
        tok = np.concatenate(
            [tok, np.zeros((B, cfg.ctx_len - T_real), dtype=tok.dtype)], axis=1
        )
    T = tok.shape[1]
    D, H = cfg.d_model, cfg.n_heads
    dh = D // H
    x = t["emb"][tok] + t["pos"][:T][None, :, :]
    mask = np.tril(np.ones((T, T), dtype=bool))
    addmask = np.where(mask, 0.0, -np.inf)
    layers = []
    for i in range(cfg.n_layers):
        pre = f"l{i}."
        a1, ln1_cache = _layernorm_fwd(x, t[pre + "ln1_g"], t[pre + "ln1_b"])
        qkv = a1.reshape(B * T, D) @ t[pre + "w_qkv"] + t[pre + "b_qkv"]
        q, k, v = [
            m.reshape(B, T, H, dh).transpose(0, 2, 1, 3) for m in np.split(qkv, 3, axis=-1)
        ]
        s = (q @ k.transpose(0, 1, 3, 2)) / math.sqrt(dh)
        s += addmask
        s -= s.max(axis=-1, keepdims=True)
        p = np.exp(s)
        p /= p.sum(axis=-1, keepdims=True)
        z = (p @ v).transpose(0, 2, 1, 3).reshape(B, T, D)
        attn = z.reshape(B * T, D) @ t[pre + "w_o"] + t[pre + "b_o"]
        x_mid = x + attn.reshape(B, T, D)
        a2, ln2_cache = _layernorm_fwd(x_mid, t[pre + "ln2_g"], t[pre + "ln2_b"])
        h_fc = a2.reshape(B * T, D) @ t[pre + "w_fc"] + t[pre + "b_fc"]
        h_act, h_tanh = _gelu_fwd(h_fc)
        proj = h_act @ t[pre + "w_proj"] + t[pre + "b_proj"]
        x_out = x_mid + proj.reshape(B, T, D)
        if want_cache:
            layers.append(
                (x, a1, ln1_cache, q, k, v, p, z, x_mid, a2, ln2_cache, h_fc, h_tanh, h_act)
            )
        x = x_out
    hf, lnf_cache = _layernorm_fwd(x, t["lnf_g"], t["lnf_b"])
    logits = (hf.reshape(B * T, D) @ t["emb"].T).reshape(B, T, -1)
    if fixed_shape:
        logits = logits[:, :T_real]
        hf = hf[:, :T_real]
    cache = (tok, layers, hf, lnf_cache) if want_cache else None
    return logits, cache


def _backward(params: LmParams, cache, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    cfg = params.config
    t = params.tensors
    tok, layers, hf, lnf_cache = cache
    B, T = tok.shape
    D, H = cfg.d_model, cfg.n_heads
    dh = D // H
    grads = {name: np.zeros_like(arr) for name, arr in t.items()}

    dl2 = dlogits.reshape(B * T, -1)
    grads["emb"] += dl2.T @ hf.reshape(B * T, D)
    dhf = (dl2 @ t["emb"]).reshape(B, T, D)
    dx, grads["lnf_g"], grads["lnf_b"] = _layernorm_bwd(dhf, lnf_cache)

    for i in reversed(range(cfg.n_layers)):
        pre = f"l{i}."
        (x_in, a1, ln1_cache, q, k, v, p, z, x_mid, a2, ln2_cache, h_fc, h_tanh,
         h_act) = layers[i]
        # MLP branch
        dproj = dx.reshape(B * T, D)
        grads[pre + "w_proj"] += h_act.T @ dproj
        grads[pre + "b_proj"] += dproj.sum(axis=0)
        dh_act = dproj @ t[pre + "w_proj"].T
        dh_fc = dh_act * _gelu_bwd(h_fc, h_tanh)
        grads[pre + "w_fc"] += a2.reshape(B * T, D).T @ dh_fc
        grads[pre + "b_fc"] += dh_fc.sum(axis=0)
        da2 = (dh_fc @ t[pre + "w_fc"].T).reshape(B, T, D)
        dx_mid, grads[pre + "ln2_g"], grads[pre + "ln2_b"] = _layernorm_bwd(da2, ln2_cache)
        dx_mid = dx_mid + dx
        # attention branch
        dattn = dx_mid.reshape(B * T, D)
        grads[pre + "w_o"] += z.reshape(B * T, D).T @ dattn
        grads[pre + "b_o"] += dattn.sum(axis=0)
        dz = (dattn @ t[pre + "w_o"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        p = np.ascontiguousarray(p)
        dp = dz @ v.transpose(0, 1, 3, 2)
        dv = p.transpose(0, 1, 3, 2) @ dz
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        ds = ds / math.sqrt(dh)
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dqkv = np.concatenate(
            [m.transpose(0, 2, 1, 3).reshape(B * T, D) for m in (dq, dk, dv)], axis=-1
        )
        grads[pre + "w_qkv"] += a1.reshape(B * T, D).T @ dqkv
        grads[pre + "b_qkv"] += dqkv.sum(axis=0)
        da1 = (dqkv @ t[pre + "w_qkv"].T).reshape(B, T, D)
        dx_branch, grads[pre + "ln1_g"], grads[pre + "ln1_b"] = _layernorm_bwd(da1, ln1_cache)
        dx = dx_mid + dx_branch

    np.add.at(grads["emb"], tok, dx)
    grads["pos"][:T] += dx.sum(axis=0)
    return grads


def _pad_batch(prompts: list[Prompt], ctx_len: int) -> tuple[np.ndarray, list[tuple[int, int]]]:
    spans = []
    for p in prompts:
        if p.target_span[0] == 0:
            raise ValueError("span must start after at least one context token")
        if len(p.tokens) > ctx_len:
            raise ValueError(f"context overflow: {len(p.tokens)} tokens > ctx_len {ctx_len}")
        spans.append(p.target_span)
    T = max(len(p.tokens) for p in prompts)
    tok = np.zeros((len(prompts), T), dtype=np.int64)
    for b, p in enumerate(prompts):
        tok[b, : len(p.tokens)] = p.tokens
    return tok, spans


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return logits - m - np.log(e.sum(axis=-1, keepdims=True))


def loss_only(params: LmParams, prompts: list[Prompt]) -> float:
    """Batch loss: mean over prompts of the summed span negative log-likelihood."""
    tok, spans = _pad_batch(prompts, params.config.ctx_len)
    logits, _ = _forward(params, tok, want_cache=False)
    logp = _log_softmax(logits)
    total = 0.0
    for b, (start, end) in enumerate(spans):
        targets = tok[b, start:end]
        total -= logp[b, np.arange(start - 1, end - 1), targets].sum()
    return float(total / len(prompts))


def loss_and_grads(params: LmParams, prompts: list[Prompt]) -> tuple[float, dict[str, np.ndarray], float]:
    """Loss, full parameter gradients, and the per-token cross entropy.

    The optimized loss is the batch mean of per-prompt span sums; the
    per-token value is reported for curves where prompts vary in length.
    """
    tok, spans = _pad_batch(prompts, params.config.ctx_len)
    B = len(prompts)
    logits, cache = _forward(params, tok, want_cache=True)
    logp = _log_softmax(logits)
    probs = np.exp(logp)
    dlogits = np.zeros_like(logits)
    total = 0.0
    n_targets = 0
    for b, (start, end) in enumerate(spans):
        out_pos = np.arange(start - 1, end - 1)
        targets = tok[b, start:end]
        total -= logp[b, out_pos, targets].sum()
        n_targets += len(targets)
        dlogits[b, out_pos] = probs[b, out_pos]
        dlogits[b, out_pos, targets] -= 1.0
    dlogits /= B
    grads = _backward(params, cache, dlogits)
    return float(total / B), grads, float(total / n_targets)


def logprobs(params: LmParams, tokens: TokenSeq) -> np.ndarray:
    """Per-position next-token log-distributions, shape (T, vocab).

    Row t is log P(. | tokens[0..t]), so it depends only on the prefix
    through position t.
    """
    tok = np.asarray([tokens], dtype=np.int64)
    if tok.shape[1] == 0:
        raise ValueError("empty token sequence")
    logits, _ = _forward(params, tok, want_cache=False)
    return _log_softmax(logits)[0]


def span_logprob(params: LmParams, prompt: Prompt) -> float:
    """Summed log-probability of the span tokens given everything before them."""
    lp = logprobs(params, prompt.tokens)
    start, end = prompt.target_span
    if start == 0:
        raise ValueError("span must start after at least one context token")
    targets = np.asarray(prompt.tokens[start:end])
    return float(lp[np.arange(start - 1, end - 1), targets].sum())


def span_logprobs_batch(params: LmParams, prompts: list[Prompt], *, chunk: int = 32) -> np.ndarray:
    """Batched span_logprob over many prompts (same values, one forward per chunk)."""
    out = np.empty(len(prompts))
    for lo in range(0, len(prompts), chunk):
        part = prompts[lo : lo + chunk]
        tok, spans = _pad_batch(part, params.config.ctx_len)
        logits, _ = _forward(params, tok, want_cache=False)
        logp = _log_softmax(logits)
        for b, (start, end) in enumerate(spans):
            targets = tok[b, start:end]
            out[lo + b] = logp[b, np.arange(start - 1, end - 1), targets].sum()
    return out


def hidden_states(params: LmParams, tokens: TokenSeq) -> np.ndarray:
    """Final-layer (post-norm) hidden states, shape (T, d_model)."""
    cfg = params.config
    tok = np.asarray([tokens], dtype=np.int64)
    logits, cache = _forward(params, tok, want_cache=True)
    _, _, hf, _ = cache
    return hf[0]


def extend_vocab(params: LmParams, n_new: int, seed: int) -> LmParams:
    """Append n_new randomly initialized embedding rows; nothing else changes."""
    if n_new < 1:
        raise ValueError("n_new must be >= 1")
    rng = derive_rng(seed, "extend-vocab")
    new_rows = rng.normal(0.0, _INIT_STD, size=(n_new, params.config.d_model))
    out = params.copy()
    out.tensors["emb"] = np.concatenate([out.tensors["emb"], new_rows], axis=0)
    out.config = replace(params.config, vocab_size=params.config.vocab_size + n_new)
    return out


def grad_embedding(params: LmParams, prompts: list[Prompt], mask: set[int]) -> np.ndarray:
    """Loss gradient restricted to the masked embedding rows.

    The backward pass runs through every layer; only the requested rows
    are returned, ordered by ascending row index. Both the input-lookup
    and output-projection contributions of the tied matrix are included.
    """
    if not mask:
        raise ValueError("mask must be non-empty")
    rows = sorted(mask)
    if rows[0] < 0 or rows[-1] >= params.config.vocab_size:
        raise ValueError("mask rows outside vocabulary")
    _, grads, _ = loss_and_grads(params, prompts)
    return grads["emb"][rows]


def grad_check(params: LmParams, prompt: Prompt, mask: set[int], eps: float = 1e-4) -> float:
    """Max relative error of grad_embedding against central finite differences."""
    if not mask:
        raise ValueError("mask must be non-empty")
    if eps <= 0:
        raise ValueError("eps must be positive")
    for arr in params.tensors.values():
        if arr.dtype != np.float64:
            raise ValueError("grad_check requires float64 parameters")
    rows = sorted(mask)
    analytic = grad_embedding(params, [prompt], mask)
    work = params.copy()
    emb = work.tensors["emb"]
    worst = 0.0
    for i, r in enumerate(rows):
        for d in range(params.config.d_model):
            orig = emb[r, d]
            emb[r, d] = orig + eps
            hi = loss_only(work, [prompt])
            emb[r, d] = orig - eps
            lo = loss_only(work, [prompt])
            emb[r, d] = orig
            numeric = (hi - lo) / (2.0 * eps)
            a = analytic[i, d]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst


def pretrain(
    params: LmParams, corpus: list[TokenSeq], cfg: TrainConfig
) -> tuple[LmParams, np.ndarray]:
    """Next-token training over rendered demo sequences; returns new params
    and the per-step mean per-token cross-entropy curve."""
    if not corpus:
        raise ValueError("empty corpus")
    for seq in corpus:
        if len(seq) > params.config.ctx_len:
            raise ValueError("corpus sequence exceeds ctx_len")
        if len(seq) < 2:
            raise ValueError("corpus sequences need at least two tokens")
    out = params.copy()
    opt = make_optimizer(cfg)
    rng = derive_rng(cfg.seed, "pretrain-batches")
    curve = np.empty(cfg.steps)
    for step in range(cfg.steps):
        idx = rng.integers(0, len(corpus), size=cfg.batch_size)
        batch = [Prompt(tokens=corpus[i], target_span=(1, len(corpus[i]))) for i in idx]
        loss, grads, per_token = loss_and_grads(out, batch)
        grads = clip_by_global_norm(grads, cfg.clip_norm)
        opt.step(out.tensors, grads)
        curve[step] = per_token
    return out, curve


class LmScorer:
    """Span-scoring adapter around LmParams (duck-typed with OracleScorer)."""

    def __init__(self, params: LmParams):
        self.params = params

    def span_logprob(self, prompt: Prompt) -> float:
        return span_logprob(self.params, prompt)

    def span_logprobs(self, prompts: list[Prompt]) -> np.ndarray:
        return span_logprobs_batch(self.params, prompts)
