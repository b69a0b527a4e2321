"""Toy rationale policy: a small causal decoder plus a scoring head.

The decoder vocabulary is purely structural (section markers, decision tokens,
attribute tokens), contexts are serialized as attribute token runs, and the
scoring head maps the final generated token's last-layer hidden state to a raw
ranking score. Forward passes exist twice: once on the autodiff tape for
training, and once in plain numpy with incremental attention state for
sampling. A teacher-forced re-evaluation test pins the two together.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

import plrank.autodiff as ad
from .autodiff import NEG_MASK, Tape, Tensor
from .errors import ConfigError, ContractViolation, DataFormatError
from .world import CandidateItem, UserContext

CHECKPOINT_MAGIC = b"PLRK"
CHECKPOINT_VERSION = 1


class Vocab:
    """Structural tokens, decision tokens, and one token per (dim, bucket)."""

    BOS = 0
    EOS = 1
    SEP = 2
    SEC_REASON = 3
    SEC_SELFCHECK = 4
    SEC_CONCLUDE = 5
    RECOMMEND = 6
    NOT_RECOMMEND = 7
    _BASE = 8

    def __init__(self, m: int, buckets: int):
        if m < 1 or buckets < 2:
            raise ConfigError("vocab needs m >= 1 and buckets >= 2")
        self.m = m
        self.buckets = buckets
        self.size = self._BASE + m * buckets

    def attr(self, dim: int, bucket: int) -> int:
        if not 0 <= dim < self.m:
            raise ContractViolation(f"attribute dim {dim} out of range [0, {self.m})")
        if not 0 <= bucket < self.buckets:
            raise ContractViolation(f"bucket {bucket} out of range [0, {self.buckets})")
        return self._BASE + dim * self.buckets + bucket

    def attr_parts(self, token: int) -> tuple[int, int] | None:
        if token < self._BASE or token >= self.size:
            return None
        rel = token - self._BASE
        return rel // self.buckets, rel % self.buckets

    def is_decision(self, token: int) -> bool:
        return token in (self.RECOMMEND, self.NOT_RECOMMEND)

    def decision_token(self, decision: int) -> int:
        return self.RECOMMEND if decision else self.NOT_RECOMMEND

    def decision_value(self, token: int) -> int | None:
        if token == self.RECOMMEND:
            return 1
        if token == self.NOT_RECOMMEND:
            return 0
        return None


@dataclass(frozen=True)
class PolicyConfig:
    m: int
    buckets: int
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 64
    max_len: int = 256
    max_gen: int = 24
    head_hidden: int = 32
    init_std: float = 0.1

    def validate(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if min(self.d_model, self.n_layers, self.n_heads, self.d_ff, self.head_hidden) < 1:
            raise ConfigError("model dimensions must be positive")
        if self.max_gen < 2 or self.max_gen > self.max_len:
            raise ConfigError("need 2 <= max_gen <= max_len")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def vocab(self) -> Vocab:
        return Vocab(self.m, self.buckets)


def serialize_context(ctx: UserContext, item: CandidateItem, vocab: Vocab) -> np.ndarray:
    """[profile attrs] [history attrs, SEP between events] SEP [candidate attrs] BOS."""
    if len(ctx.profile_tokens) != vocab.m or len(item.tokens) != vocab.m:
        raise ContractViolation(
            f"profile/candidate need exactly m={vocab.m} attribute tokens"
        )
    out: list[int] = [vocab.attr(d, b) for d, b in enumerate(ctx.profile_tokens)]
    for i, ev in enumerate(ctx.history):
        if len(ev.tokens) != vocab.m:
            raise ContractViolation(f"history event {i} needs m={vocab.m} attribute tokens")
        if i > 0:
            out.append(vocab.SEP)
        out.extend(vocab.attr(d, b) for d, b in enumerate(ev.tokens))
    out.append(vocab.SEP)
    out.extend(vocab.attr(d, b) for d, b in enumerate(item.tokens))
    out.append(vocab.BOS)
    return np.asarray(out, dtype=np.int64)


def init_params(cfg: PolicyConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """All weights N(0, init_std), all biases zero."""
    cfg.validate()
    v = cfg.vocab().size
    d, ff, dh = cfg.d_model, cfg.d_ff, cfg.head_hidden
    std = cfg.init_std

    def w(*shape):
        return rng.normal(0.0, std, size=shape)

    params: dict[str, np.ndarray] = {
        "emb": w(v, d),
        "pos": w(cfg.max_len, d),
        "out.w": w(d, v),
        "out.b": np.zeros(v),
    }
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        for name in ("wq", "wk", "wv", "wo"):
            params[p + name] = w(d, d)
        for name in ("bq", "bk", "bv", "bo"):
            params[p + name] = np.zeros(d)
        params[p + "w1"] = w(d, ff)
        params[p + "b1"] = np.zeros(ff)
        params[p + "w2"] = w(ff, d)
        params[p + "b2"] = np.zeros(d)
    params["head.w1"] = w(d, dh)
    params["head.b1"] = np.zeros(dh)
    params["head.w2"] = w(dh, 1)
    params["head.b2"] = np.zeros(1)
    return params


def is_head_param(name: str) -> bool:
    return name.startswith("head.")


def clone_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in params.items()}


# ---------------------------------------------------------------------------
# Tape forward (training path)
# ---------------------------------------------------------------------------


def lift_params(
    tape: Tape,
    params: dict[str, np.ndarray],
    train_policy: bool = True,
    train_head: bool = True,
) -> dict[str, Tensor]:
    lifted = {}
    for name, arr in params.items():
        requires = train_head if is_head_param(name) else train_policy
        lifted[name] = tape.leaf(arr, requires_grad=requires)
    return lifted


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    y = ad.matmul(x, w)
    bias = ad.broadcast_to(ad.reshape(b, (1,) * (len(y.shape) - 1) + b.shape), y.shape)
    return ad.add(y, bias)


def forward_hidden_tape(pt: dict[str, Tensor], ids: np.ndarray, cfg: PolicyConfig) -> Tensor:
    """Last-layer hidden states (B, T, d) for token ids (B, T)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2:
        raise ContractViolation(f"ids must be (B, T), got shape {ids.shape}")
    b, t = ids.shape
    if t > cfg.max_len:
        raise ContractViolation(f"sequence length {t} exceeds max_len {cfg.max_len}")
    tape = pt["emb"].tape
    d, h, e = cfg.d_model, cfg.n_heads, cfg.head_dim
    tok = ad.index_select(pt["emb"], ids)
    pos = ad.index_select(pt["pos"], np.arange(t))
    x = ad.add(tok, ad.broadcast_to(ad.reshape(pos, (1, t, d)), (b, t, d)))
    causal = tape.constant(np.triu(np.full((t, t), NEG_MASK), k=1).reshape(1, 1, t, t))

    def heads(z: Tensor) -> Tensor:
        return ad.swapaxes(ad.reshape(z, (b, t, h, e)), 1, 2)

    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        q = heads(_linear(x, pt[p + "wq"], pt[p + "bq"]))
        k = heads(_linear(x, pt[p + "wk"], pt[p + "bk"]))
        v = heads(_linear(x, pt[p + "wv"], pt[p + "bv"]))
        scores = ad.scale(ad.matmul(q, ad.swapaxes(k, -1, -2)), e ** -0.5)
        scores = ad.add(scores, ad.broadcast_to(causal, (b, h, t, t)))
        ctx = ad.matmul(ad.softmax(scores, axis=-1), v)
        merged = ad.reshape(ad.swapaxes(ctx, 1, 2), (b, t, d))
        x = ad.add(x, _linear(merged, pt[p + "wo"], pt[p + "bo"]))
        inner = ad.relu(_linear(x, pt[p + "w1"], pt[p + "b1"]))
        x = ad.add(x, _linear(inner, pt[p + "w2"], pt[p + "b2"]))
    return x


def gather_positions_tape(x: Tensor, rows: np.ndarray, positions: np.ndarray) -> Tensor:
    """x (B, T, ...) -> (N, ...) picking (rows[i], positions[i])."""
    b, t = x.shape[0], x.shape[1]
    flat = ad.reshape(x, (b * t,) + tuple(x.shape[2:]))
    return ad.index_select(flat, rows * t + positions)


def sequence_log_probs_tape(
    pt: dict[str, Tensor],
    ids: np.ndarray,
    prefix_len: int,
    gen_len: int,
    cfg: PolicyConfig,
    hidden: Tensor | None = None,
) -> tuple[Tensor, Tensor]:
    """Teacher-forced log-probs of the generated span.

    Returns (log_probs (B, gen_len), hidden (B, T, d)). Positions past a
    row's actual generation are garbage and must be masked by the caller.
    """
    if hidden is None:
        hidden = forward_hidden_tape(pt, ids, cfg)
    b = ids.shape[0]
    v = cfg.vocab().size
    rows = np.repeat(np.arange(b), gen_len)
    pred_pos = np.tile(np.arange(prefix_len - 1, prefix_len - 1 + gen_len), b)
    picked = gather_positions_tape(hidden, rows, pred_pos)  # (B*gen_len, d)
    logits = _linear(picked, pt["out.w"], pt["out.b"])
    log_probs = ad.log_softmax(logits, axis=-1)
    targets = ids[rows, pred_pos + 1]
    onehot = np.zeros((b * gen_len, v))
    onehot[np.arange(b * gen_len), targets] = 1.0
    lp = ad.asum(ad.mul(log_probs, log_probs.tape.constant(onehot)), axis=-1)
    return ad.reshape(lp, (b, gen_len)), hidden


def head_score_tape(pt: dict[str, Tensor], hidden_vecs: Tensor) -> Tensor:
    """Scoring head on (N, d) hidden vectors -> (N,) raw scores."""
    inner = ad.tanh(_linear(hidden_vecs, pt["head.w1"], pt["head.b1"]))
    return ad.reshape(_linear(inner, pt["head.w2"], pt["head.b2"]), (hidden_vecs.shape[0],))


# ---------------------------------------------------------------------------
# Numpy forward (sampling path)
# ---------------------------------------------------------------------------


def _np_linear(x, w, b):
    return x @ w + b


def _np_log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


class DecodeState:
    """Per-layer attention inputs for already-processed positions."""

    def __init__(self, cfg: PolicyConfig, batch: int):
        self.length = 0
        self.keys = [
            np.empty((batch, cfg.n_heads, cfg.max_len, cfg.head_dim)) for _ in range(cfg.n_layers)
        ]
        self.values = [
            np.empty((batch, cfg.n_heads, cfg.max_len, cfg.head_dim)) for _ in range(cfg.n_layers)
        ]


def _np_forward(params, ids: np.ndarray, cfg: PolicyConfig, state: DecodeState | None = None):
    """Full-sequence numpy forward; optionally records attention state.

    Returns last-layer hidden states (B, T, d).
    """
    ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
    b, t = ids.shape
    if t > cfg.max_len:
        raise ContractViolation(f"sequence length {t} exceeds max_len {cfg.max_len}")
    d, h, e = cfg.d_model, cfg.n_heads, cfg.head_dim
    x = params["emb"][ids] + params["pos"][:t]
    causal = np.triu(np.full((t, t), NEG_MASK), k=1)
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        q = _np_linear(x, params[p + "wq"], params[p + "bq"]).reshape(b, t, h, e).transpose(0, 2, 1, 3)
        k = _np_linear(x, params[p + "wk"], params[p + "bk"]).reshape(b, t, h, e).transpose(0, 2, 1, 3)
        v = _np_linear(x, params[p + "wv"], params[p + "bv"]).reshape(b, t, h, e).transpose(0, 2, 1, 3)
        if state is not None:
            state.keys[i][:, :, :t] = k
            state.values[i][:, :, :t] = v
        scores = q @ k.transpose(0, 1, 3, 2) * (e ** -0.5) + causal
        scores -= scores.max(axis=-1, keepdims=True)
        attn = np.exp(scores)
        attn /= attn.sum(axis=-1, keepdims=True)
        merged = (attn @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
        x = x + _np_linear(merged, params[p + "wo"], params[p + "bo"])
        x = x + _np_linear(
            np.maximum(_np_linear(x, params[p + "w1"], params[p + "b1"]), 0.0),
            params[p + "w2"],
            params[p + "b2"],
        )
    if state is not None:
        state.length = t
    return x


def _np_decode_step(params, state: DecodeState, tokens: np.ndarray, cfg: PolicyConfig):
    """Process one new token per row; returns hidden (B, d) at the new position."""
    b = tokens.shape[0]
    d, h, e = cfg.d_model, cfg.n_heads, cfg.head_dim
    t = state.length
    if t + 1 > cfg.max_len:
        raise ContractViolation(f"decode past max_len {cfg.max_len}")
    x = params["emb"][tokens] + params["pos"][t]
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        q = _np_linear(x, params[p + "wq"], params[p + "bq"]).reshape(b, h, e)
        k = _np_linear(x, params[p + "wk"], params[p + "bk"]).reshape(b, h, e)
        v = _np_linear(x, params[p + "wv"], params[p + "bv"]).reshape(b, h, e)
        state.keys[i][:, :, t] = k
        state.values[i][:, :, t] = v
        keys = state.keys[i][:, :, : t + 1]
        values = state.values[i][:, :, : t + 1]
        scores = np.einsum("bhe,bhte->bht", q, keys) * (e ** -0.5)
        scores -= scores.max(axis=-1, keepdims=True)
        attn = np.exp(scores)
        attn /= attn.sum(axis=-1, keepdims=True)
        merged = np.einsum("bht,bhte->bhe", attn, values).reshape(b, d)
        x = x + _np_linear(merged, params[p + "wo"], params[p + "bo"])
        x = x + _np_linear(
            np.maximum(_np_linear(x, params[p + "w1"], params[p + "b1"]), 0.0),
            params[p + "w2"],
            params[p + "b2"],
        )
    state.length = t + 1
    return x


@dataclass
class Rationale:
    """One generated rationale plus everything training needs to replay it."""

    tokens: np.ndarray          # (T_gen,) sampled tokens, ends with EOS unless truncated
    token_logprobs: np.ndarray  # (T_gen,) log-probs under the temperature-1 policy
    final_hidden: np.ndarray    # (d,) last-layer hidden at the last generated token
    truncated: bool

    def decision(self, vocab: Vocab) -> int | None:
        """The unique decision value, or None if absent/ambiguous."""
        found = [vocab.decision_value(int(t)) for t in self.tokens if vocab.is_decision(int(t))]
        if len(found) != 1:
            return None
        return found[0]


def generate(
    params: dict[str, np.ndarray],
    prefix: np.ndarray,
    rngs,
    cfg: PolicyConfig,
    vocab: Vocab,
    mode: str = "cot",
    temperature: float = 1.0,
    max_gen: int | None = None,
) -> list[Rationale]:
    """Sample one rationale per prefix row.

    `prefix` is (B, T_p) with a shared prefix length; `rngs` is one Generator
    per row (ignored when temperature == 0, which means argmax decoding).
    Recorded token log-probs are always the temperature-1 policy's, which is
    what PPO ratios and teacher-forced re-evaluation use.
    """
    if mode not in ("cot", "decision_only"):
        raise ContractViolation(f"unknown generation mode {mode!r}")
    if temperature < 0.0:
        raise ContractViolation(f"temperature must be >= 0, got {temperature}")
    prefix = np.atleast_2d(np.asarray(prefix, dtype=np.int64))
    b, t_p = prefix.shape
    g_max = cfg.max_gen if max_gen is None else int(max_gen)
    if t_p + g_max > cfg.max_len:
        raise ContractViolation(
            f"prefix length {t_p} + max_gen {g_max} exceeds max_len {cfg.max_len}"
        )
    if temperature > 0.0 and (rngs is None or len(rngs) != b):
        raise ContractViolation("need one rng per row for stochastic decoding")
    state = DecodeState(cfg, b)
    hidden = _np_forward(params, prefix, cfg, state=state)[:, -1, :]
    tokens = [[] for _ in range(b)]
    logprobs = [[] for _ in range(b)]
    final_hidden = np.zeros((b, cfg.d_model))
    truncated = np.zeros(b, dtype=bool)
    active = np.ones(b, dtype=bool)
    decided = np.zeros(b, dtype=bool)
    decision_ids = (vocab.RECOMMEND, vocab.NOT_RECOMMEND)
    for step in range(g_max):
        logits = _np_linear(hidden, params["out.w"], params["out.b"])
        lp1 = _np_log_softmax(logits)
        masked = logits.copy()
        if mode == "decision_only":
            allow = np.zeros((b, vocab.size), dtype=bool)
            allow[:, vocab.EOS] = True
            allow[~decided, vocab.RECOMMEND] = True
            allow[~decided, vocab.NOT_RECOMMEND] = True
            masked[~allow] = NEG_MASK
        chosen = np.full(b, vocab.EOS, dtype=np.int64)
        if temperature == 0.0:
            chosen_active = np.argmax(masked, axis=-1)
            chosen[active] = chosen_active[active]
        else:
            z = masked / temperature
            z -= z.max(axis=-1, keepdims=True)
            probs = np.exp(z)
            cdf = np.cumsum(probs, axis=-1)
            for row in np.nonzero(active)[0]:
                u = rngs[row].random() * cdf[row, -1]
                chosen[row] = min(int((cdf[row] <= u).sum()), vocab.size - 1)
        for row in np.nonzero(active)[0]:
            tok = int(chosen[row])
            tokens[row].append(tok)
            logprobs[row].append(float(lp1[row, tok]))
            if tok in decision_ids:
                decided[row] = True
        hidden = _np_decode_step(params, state, chosen, cfg)
        just_finished = active & (chosen == vocab.EOS)
        last_step = step == g_max - 1
        for row in np.nonzero(active)[0]:
            if just_finished[row] or last_step:
                final_hidden[row] = hidden[row]
                if not just_finished[row]:
                    truncated[row] = True
        active &= ~just_finished
        if not active.any():
            break
    return [
        Rationale(
            tokens=np.asarray(tokens[row], dtype=np.int64),
            token_logprobs=np.asarray(logprobs[row]),
            final_hidden=final_hidden[row].copy(),
            truncated=bool(truncated[row]),
        )
        for row in range(b)
    ]


def token_log_probs(
    params: dict[str, np.ndarray],
    prefix: np.ndarray,
    tokens: np.ndarray,
    cfg: PolicyConfig,
) -> np.ndarray:
    """Teacher-forced temperature-1 log-probs of `tokens` given `prefix`."""
    prefix = np.asarray(prefix, dtype=np.int64).reshape(-1)
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if tokens.size == 0:
        return np.zeros(0)
    ids = np.concatenate([prefix, tokens])[None, :]
    hidden = _np_forward(params, ids, cfg)
    positions = np.arange(prefix.size - 1, prefix.size - 1 + tokens.size)
    logits = _np_linear(hidden[0, positions], params["out.w"], params["out.b"])
    return _np_log_softmax(logits)[np.arange(tokens.size), tokens]


def score(params: dict[str, np.ndarray], rationale: Rationale) -> float:
    """Scoring head applied to a rationale's final hidden state."""
    return float(score_hidden(params, rationale.final_hidden[None, :])[0])


def score_hidden(params: dict[str, np.ndarray], hidden: np.ndarray) -> np.ndarray:
    inner = np.tanh(_np_linear(hidden, params["head.w1"], params["head.b1"]))
    return _np_linear(inner, params["head.w2"], params["head.b2"])[:, 0]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: dict[str, np.ndarray], config_hash: str, seed: int) -> None:
    """Binary format: magic, version, seed, config hash, named float64 tensors."""
    hash_bytes = config_hash.encode("ascii")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQI", CHECKPOINT_VERSION, seed, len(hash_bytes)))
        fh.write(hash_bytes)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype=np.float64)
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], str, int]:
    def read(fh, n, what):
        data = fh.read(n)
        if len(data) != n:
            raise DataFormatError(f"checkpoint truncated while reading {what}")
        return data

    with open(path, "rb") as fh:
        if read(fh, 4, "magic") != CHECKPOINT_MAGIC:
            raise DataFormatError("not a checkpoint: bad magic")
        version, seed, hash_len = struct.unpack("<IQI", read(fh, 16, "header"))
        if version != CHECKPOINT_VERSION:
            raise DataFormatError(f"unsupported checkpoint version {version}")
        config_hash = read(fh, hash_len, "config hash").decode("ascii")
        (count,) = struct.unpack("<I", read(fh, 4, "tensor count"))
        params: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", read(fh, 4, "name length"))
            name = read(fh, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", read(fh, 4, "rank"))
            shape = struct.unpack(f"<{rank}Q", read(fh, 8 * rank, "dims"))
            n_elem = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(read(fh, 8 * n_elem, f"tensor {name}"), dtype="<f8")
            params[name] = data.reshape(shape).copy()
        if fh.read(1):
            raise DataFormatError("trailing bytes after final tensor")
    return params, config_hash, seed
