"""Decoder-only GPT model built on the diffcore ops.

Pre-LayerNorm residual blocks, learned absolute position embeddings, tied
embedding/unembedding by default. The six linear matrices per block (the
Q/K/V/output attention projections and the two feed-forward matrices) are the
"sparsifiable" set: when a mask set is supplied they are multiplied
elementwise by their mask at use time, so gradients at masked positions are
exactly zero by the chain rule. Embeddings, layernorm parameters and biases
are never masked.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .diffcore import (
    CrossEntropy,
    EmbeddingLookup,
    Gelu,
    LayerNorm,
    Matmul,
    Param,
    Softmax,
    check_finite,
)
from .errors import ConfigError, InputError

INIT_STD = 0.02
NEG_BIG = -1e9  # additive attention mask; exp() underflows to exactly 0.0

SPARSIFIABLE_SUFFIXES = ("attn.wq", "attn.wk", "attn.wv", "attn.wo", "ffn.w1", "ffn.w2")


@dataclass
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_head: int
    vocab_size: int
    context_window: int
    d_ff: int = 0  # 0 -> derived as 4 * d_model
    tie_embeddings: bool = True

    def __post_init__(self):
        if self.d_ff == 0:
            self.d_ff = 4 * self.d_model
        if self.n_layers < 1 or self.d_model < 1:
            raise ConfigError("n_layers and d_model must be positive")
        if self.d_model != self.n_heads * self.d_head:
            raise ConfigError(
                f"d_model ({self.d_model}) != n_heads*d_head ({self.n_heads}*{self.d_head})"
            )
        if self.d_ff != 4 * self.d_model:
            raise ConfigError(f"d_ff must equal 4*d_model, got {self.d_ff}")
        if self.context_window < 1:
            raise ConfigError("context_window must be >= 1")
        if self.vocab_size < 0:
            raise ConfigError("vocab_size must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def count_sparsifiable_params(config: ModelConfig) -> int:
    # 4 attention d*d matrices + d*4d + 4d*d feed-forward = 12*d^2 per layer
    return config.n_layers * 12 * config.d_model**2


def count_params(config: ModelConfig) -> int:
    d, v, t, l, dff = (
        config.d_model,
        config.vocab_size,
        config.context_window,
        config.n_layers,
        config.d_ff,
    )
    per_layer = 12 * d * d + 4 * d + (dff + d) + 4 * d  # matrices + attn biases + ffn biases + 2 LN
    total = v * d + t * d + l * per_layer + 2 * d
    if not config.tie_embeddings:
        total += v * d
    return total


@dataclass
class GenConfig:
    """Decode settings; defaults are documented conventions, not table values."""

    max_new_tokens: int = 64
    beam_size: int = 10
    length_penalty: float = 0.9
    no_repeat_ngram: int = 4
    eot_id: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


class _Block:
    """One pre-LN transformer block; op instances are reused between the
    forward pass and the immediately following backward pass."""

    def __init__(self, model: "GptModel", index: int):
        self.m = model
        self.i = index
        self.ln1 = LayerNorm()
        self.ln2 = LayerNorm()
        self.mm_q = Matmul()
        self.mm_k = Matmul()
        self.mm_v = Matmul()
        self.mm_scores = Matmul()
        self.mm_ctx = Matmul()
        self.mm_o = Matmul()
        self.mm_f1 = Matmul()
        self.mm_f2 = Matmul()
        self.softmax = Softmax(axis=-1)
        self.act = Gelu()

    def _p(self, suffix: str) -> Param:
        return self.m.params[f"h{self.i}.{suffix}"]

    def _w(self, suffix: str) -> np.ndarray:
        return self.m._effective_weight(f"h{self.i}.{suffix}")

    def forward(self, x: np.ndarray, causal_mask: np.ndarray) -> np.ndarray:
        cfg = self.m.config
        b, t, d = x.shape
        h, dh = cfg.n_heads, cfg.d_head

        a = self.ln1.forward(x, self._p("ln1.g").value, self._p("ln1.b").value)
        a2 = a.reshape(b * t, d)
        q = (self.mm_q.forward(a2, self._w("attn.wq")) + self._p("attn.bq").value)
        k = (self.mm_k.forward(a2, self._w("attn.wk")) + self._p("attn.bk").value)
        v = (self.mm_v.forward(a2, self._w("attn.wv")) + self._p("attn.bv").value)
        q = q.reshape(b, t, h, dh).transpose(0, 2, 1, 3)
        k = k.reshape(b, t, h, dh).transpose(0, 2, 1, 3)
        v = v.reshape(b, t, h, dh).transpose(0, 2, 1, 3)

        self.scale = 1.0 / np.sqrt(dh)
        scores = self.mm_scores.forward(q, np.swapaxes(k, -1, -2)) * self.scale
        att = self.softmax.forward(scores + causal_mask[:t, :t])
        ctx = self.mm_ctx.forward(att, v)  # (b, h, t, dh)
        ctx = np.ascontiguousarray(ctx.transpose(0, 2, 1, 3)).reshape(b * t, d)
        attn_out = self.mm_o.forward(ctx, self._w("attn.wo")) + self._p("attn.bo").value
        x = x + attn_out.reshape(b, t, d)

        f = self.ln2.forward(x, self._p("ln2.g").value, self._p("ln2.b").value)
        f2 = f.reshape(b * t, d)
        hmid = self.act.forward(self.mm_f1.forward(f2, self._w("ffn.w1")) + self._p("ffn.b1").value)
        ffn_out = self.mm_f2.forward(hmid, self._w("ffn.w2")) + self._p("ffn.b2").value
        return x + ffn_out.reshape(b, t, d)

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        cfg = self.m.config
        b, t, d = d_out.shape
        h, dh = cfg.n_heads, cfg.d_head
        acc = self.m._accumulate_weight_grad

        # feed-forward branch
        d_ffn = d_out.reshape(b * t, d)
        d_hmid, d_w2 = self.mm_f2.backward(d_ffn)
        acc(f"h{self.i}.ffn.w2", d_w2)
        self._p("ffn.b2").accumulate(d_ffn.sum(axis=0))
        d_pre = self.act.backward(d_hmid)
        d_f2, d_w1 = self.mm_f1.backward(d_pre)
        acc(f"h{self.i}.ffn.w1", d_w1)
        self._p("ffn.b1").accumulate(d_pre.sum(axis=0))
        d_x, d_g2, d_b2 = self.ln2.backward(d_f2.reshape(b, t, d))
        self._p("ln2.g").accumulate(d_g2)
        self._p("ln2.b").accumulate(d_b2)
        d_x = d_x + d_out  # residual

        # attention branch
        d_attn_out = d_x.reshape(b * t, d)
        d_ctx, d_wo = self.mm_o.backward(d_attn_out)
        acc(f"h{self.i}.attn.wo", d_wo)
        self._p("attn.bo").accumulate(d_attn_out.sum(axis=0))
        d_ctx = d_ctx.reshape(b, t, h, dh).transpose(0, 2, 1, 3)
        d_att, d_v = self.mm_ctx.backward(d_ctx)
        d_scores = self.softmax.backward(d_att) * self.scale
        d_q, d_kt = self.mm_scores.backward(d_scores)
        d_k = np.swapaxes(d_kt, -1, -2)

        def heads_to_flat(g):
            return np.ascontiguousarray(g.transpose(0, 2, 1, 3)).reshape(b * t, d)

        d_a = np.zeros((b * t, d), dtype=d_out.dtype)
        for mm, name, bname, g in (
            (self.mm_q, "attn.wq", "attn.bq", heads_to_flat(d_q)),
            (self.mm_k, "attn.wk", "attn.bk", heads_to_flat(d_k)),
            (self.mm_v, "attn.wv", "attn.bv", heads_to_flat(d_v)),
        ):
            d_in, d_w = mm.backward(g)
            acc(f"h{self.i}.{name}", d_w)
            self._p(bname).accumulate(g.sum(axis=0))
            d_a += d_in
        d_x2, d_g1, d_b1 = self.ln1.backward(d_a.reshape(b, t, d))
        self._p("ln1.g").accumulate(d_g1)
        self._p("ln1.b").accumulate(d_b1)
        return d_x + d_x2  # residual


class GptModel:
    def __init__(self, config: ModelConfig, params: dict[str, Param]):
        self.config = config
        self.params = params
        self._blocks = [_Block(self, i) for i in range(config.n_layers)]
        self._mask_set = None
        self._cache = None

    # ---------------------------------------------------------------- init

    @classmethod
    def init(cls, config: ModelConfig, seed: int, dtype=np.float32) -> "GptModel":
        """Fresh model: weights ~ N(0, 0.02^2), residual-output projections
        scaled by 1/sqrt(2*n_layers), biases zero; deterministic per seed."""
        if config.vocab_size < 1:
            raise ConfigError("vocab_size must be >= 1 to initialize a model")
        rng = np.random.default_rng(seed)
        d, v, t, dff = config.d_model, config.vocab_size, config.context_window, config.d_ff
        res_std = INIT_STD / np.sqrt(2.0 * config.n_layers)

        def normal(name, shape, std, decay=True):
            return Param(name, rng.normal(0.0, std, size=shape).astype(dtype), decay=decay)

        def zeros(name, shape):
            return Param(name, np.zeros(shape, dtype=dtype), decay=False)

        def ones(name, shape):
            return Param(name, np.ones(shape, dtype=dtype), decay=False)

        params: dict[str, Param] = {}

        def add(p):
            params[p.name] = p

        add(normal("wte", (v, d), INIT_STD))
        add(normal("wpe", (t, d), INIT_STD))
        for i in range(config.n_layers):
            add(ones(f"h{i}.ln1.g", (d,)))
            add(zeros(f"h{i}.ln1.b", (d,)))
            add(normal(f"h{i}.attn.wq", (d, d), INIT_STD))
            add(zeros(f"h{i}.attn.bq", (d,)))
            add(normal(f"h{i}.attn.wk", (d, d), INIT_STD))
            add(zeros(f"h{i}.attn.bk", (d,)))
            add(normal(f"h{i}.attn.wv", (d, d), INIT_STD))
            add(zeros(f"h{i}.attn.bv", (d,)))
            add(normal(f"h{i}.attn.wo", (d, d), res_std))
            add(zeros(f"h{i}.attn.bo", (d,)))
            add(ones(f"h{i}.ln2.g", (d,)))
            add(zeros(f"h{i}.ln2.b", (d,)))
            add(normal(f"h{i}.ffn.w1", (d, dff), INIT_STD))
            add(zeros(f"h{i}.ffn.b1", (dff,)))
            add(normal(f"h{i}.ffn.w2", (dff, d), res_std))
            add(zeros(f"h{i}.ffn.b2", (d,)))
        add(ones("lnf.g", (d,)))
        add(zeros("lnf.b", (d,)))
        if not config.tie_embeddings:
            add(normal("wun", (v, d), INIT_STD))
        return cls(config, params)

    # ------------------------------------------------------------- queries

    def sparsifiable_names(self) -> list[str]:
        return [
            f"h{i}.{suf}" for i in range(self.config.n_layers) for suf in SPARSIFIABLE_SUFFIXES
        ]

    @property
    def dtype(self):
        return self.params["wte"].value.dtype

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def param_values(self) -> dict[str, np.ndarray]:
        return {name: p.value for name, p in self.params.items()}

    # ------------------------------------------------------------- masking

    def _effective_weight(self, name: str) -> np.ndarray:
        w = self.params[name].value
        if self._mask_set is not None and name in self._mask_set.masks:
            return w * self._mask_set.masks[name]
        return w

    def _accumulate_weight_grad(self, name: str, g: np.ndarray) -> None:
        if self._mask_set is not None and name in self._mask_set.masks:
            g = g * self._mask_set.masks[name]
        self.params[name].accumulate(g)

    # ------------------------------------------------------------- forward

    def _causal_mask(self, t: int, dtype) -> np.ndarray:
        m = np.zeros((t, t), dtype=dtype)
        m[np.triu_indices(t, k=1)] = NEG_BIG
        return m

    def forward_logits(self, tokens: np.ndarray, mask_set=None) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        b, t = tokens.shape
        if t > self.config.context_window:
            raise InputError(f"sequence length {t} > context window {self.config.context_window}")
        self._mask_set = mask_set
        dtype = self.dtype

        tok_lookup = EmbeddingLookup()
        x = tok_lookup.forward(self.params["wte"].value, tokens)
        x = x + self.params["wpe"].value[:t]
        causal = self._causal_mask(t, dtype)
        for blk in self._blocks:
            x = blk.forward(x, causal)
        lnf = LayerNorm()
        xf = lnf.forward(x, self.params["lnf.g"].value, self.params["lnf.b"].value)
        unembed = "wte" if self.config.tie_embeddings else "wun"
        mm_logits = Matmul()
        logits = mm_logits.forward(
            xf.reshape(b * t, -1), self.params[unembed].value.T
        ).reshape(b, t, self.config.vocab_size)
        self._cache = (tokens, tok_lookup, lnf, mm_logits, unembed, (b, t))
        return check_finite(logits, "logits")

    def forward_loss(self, tokens: np.ndarray, mask_set=None, loss_mask=None):
        """Next-token loss: logits[:, :-1] predict tokens[:, 1:].

        ``loss_mask`` is an optional (B, T-1) boolean array over prediction
        positions; False positions contribute no loss (fine-tuning uses this
        to restrict loss to target tokens).
        """
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.shape[1] < 2:
            raise InputError("need at least 2 tokens for a next-token loss")
        logits = self.forward_logits(tokens, mask_set=mask_set)
        targets = tokens[:, 1:].astype(np.int64)
        if loss_mask is not None:
            loss_mask = np.asarray(loss_mask, dtype=bool)
            if loss_mask.shape != targets.shape:
                raise InputError(f"loss_mask shape {loss_mask.shape} != {targets.shape}")
            targets = np.where(loss_mask, targets, -1)
        self._ce = CrossEntropy(ignore_index=-1)
        loss = self._ce.forward(logits[:, :-1, :], targets)
        return loss, logits

    def backward(self, d_loss: float = 1.0) -> None:
        """Accumulate parameter gradients for the last forward_loss call."""
        tokens, tok_lookup, lnf, mm_logits, unembed, (b, t) = self._cache
        d_pred = self._ce.backward(d_loss)  # (b, t-1, v)
        d_logits = np.zeros((b, t, self.config.vocab_size), dtype=self.dtype)
        d_logits[:, :-1, :] = d_pred
        d_xf_flat, d_unembed_t = mm_logits.backward(d_logits.reshape(b * t, -1))
        self.params[unembed].accumulate(d_unembed_t.T)
        d_x, d_g, d_bv = lnf.backward(d_xf_flat.reshape(b, t, -1))
        self.params["lnf.g"].accumulate(d_g)
        self.params["lnf.b"].accumulate(d_bv)
        for blk in reversed(self._blocks):
            d_x = blk.backward(d_x)
        self.params["wpe"].grad[:t] += d_x.sum(axis=0)
        self.params["wte"].accumulate(tok_lookup.backward(d_x))

    # ------------------------------------------------------------ generate

    def generate(self, prompt, gen_config: GenConfig, mask_set=None) -> np.ndarray:
        """Greedy (beam_size=1) or beam-search decoding.

        Returns the full token sequence (prompt included, terminating eot
        stripped). Deterministic: ties break toward the lower token id /
        earlier beam. Stops at ``eot_id`` or when the context window fills.
        """
        prompt = np.asarray(prompt, dtype=np.int64).ravel()
        if prompt.size == 0:
            raise InputError("empty prompt")
        if prompt.size >= self.config.context_window:
            raise InputError("prompt must be shorter than the context window")
        if gen_config.beam_size < 1:
            raise ConfigError("beam_size must be >= 1")
        max_new = min(gen_config.max_new_tokens, self.config.context_window - prompt.size)
        if gen_config.beam_size == 1:
            out = self.generate_greedy_batch(prompt[None, :], gen_config, mask_set=mask_set)[0]
            return np.concatenate([prompt, np.asarray(out, dtype=np.int64)])
        seq = self._beam_search(prompt, gen_config, max_new, mask_set)
        if gen_config.eot_id is not None and seq.size and seq[-1] == gen_config.eot_id:
            seq = seq[:-1]
        return seq

    def generate_greedy_batch(self, prompts, gen_config: GenConfig, mask_set=None):
        """Greedy decode a batch of (possibly variable-length) prompts;
        returns one generated-token list per prompt (prompt and eot excluded).

        Rows are right-padded and track their own end position. This is
        exactly equivalent to decoding each prompt alone: causal attention
        never lets a row see positions at or beyond its own end, so pad
        columns influence nothing. Finished rows drop out of the batch.
        """
        arrs = [np.asarray(p, dtype=np.int64).ravel() for p in prompts]
        if not arrs or any(a.size == 0 for a in arrs):
            raise InputError("empty prompt")
        ctx = self.config.context_window
        if any(a.size >= ctx for a in arrs):
            raise InputError("prompt must be shorter than the context window")
        eot = gen_config.eot_id
        pad = eot if eot is not None else 0
        lens = np.array([a.size for a in arrs])
        limits = np.minimum(lens + max(gen_config.max_new_tokens, 0), ctx)
        buf = np.full((len(arrs), int(limits.max())), pad, dtype=np.int64)
        for i, a in enumerate(arrs):
            buf[i, : a.size] = a
        ends = lens.copy()
        active = [i for i in range(len(arrs)) if ends[i] < limits[i]]
        while active:
            act = np.asarray(active)
            w = int(ends[act].max())
            logits = self.forward_logits(buf[act, :w], mask_set=mask_set)
            step_logits = logits[np.arange(len(act)), ends[act] - 1, :]
            if gen_config.no_repeat_ngram > 0:
                for j, i in enumerate(act):
                    banned = _banned_ngram_tokens(buf[i, : ends[i]], gen_config.no_repeat_ngram)
                    if banned:
                        step_logits[j, banned] = -np.inf
            nxt = step_logits.argmax(axis=-1)
            still = []
            for j, i in enumerate(act):
                buf[i, ends[i]] = nxt[j]
                ends[i] += 1
                if not ((eot is not None and nxt[j] == eot) or ends[i] >= limits[i]):
                    still.append(int(i))
            active = still
        outs = []
        for i, a in enumerate(arrs):
            gen = buf[i, a.size : ends[i]].tolist()
            if eot is not None and gen and gen[-1] == eot:
                gen = gen[:-1]
            outs.append(gen)
        return outs

    def _beam_search(self, prompt, cfg: GenConfig, max_new: int, mask_set) -> np.ndarray:
        k = cfg.beam_size
        eot = cfg.eot_id
        beams = prompt[None, :].copy()  # (n_live, len)
        scores = np.zeros(1)
        finished: list[tuple[float, np.ndarray]] = []
        for _ in range(max_new):
            logits = self.forward_logits(beams, mask_set=mask_set)[:, -1, :].astype(np.float64)
            logp = logits - _logsumexp(logits)
            if cfg.no_repeat_ngram > 0:
                for r in range(beams.shape[0]):
                    banned = _banned_ngram_tokens(beams[r], cfg.no_repeat_ngram)
                    if banned:
                        logp[r, banned] = -np.inf
                        if not np.isfinite(logp[r]).any():
                            # everything banned: fall back to ending the beam
                            allow = eot if eot is not None else 0
                            logp[r, allow] = 0.0
            cand = scores[:, None] + logp
            flat = cand.ravel()
            order = np.argsort(-flat, kind="stable")[: 2 * k]
            new_beams, new_scores = [], []
            gen_len = beams.shape[1] - prompt.size + 1
            for idx in order:
                r, tok = divmod(int(idx), logp.shape[1])
                if not np.isfinite(flat[idx]):
                    continue
                seq = np.concatenate([beams[r], [tok]])
                if eot is not None and tok == eot:
                    finished.append((flat[idx] / gen_len**cfg.length_penalty, seq))
                elif len(new_beams) < k:
                    new_beams.append(seq)
                    new_scores.append(flat[idx])
            if not new_beams:
                break
            beams = np.stack(new_beams)
            scores = np.asarray(new_scores)
            if len(finished) >= k:
                break
        if not finished:
            gen_len = max(beams.shape[1] - prompt.size, 1)
            finished = [
                (scores[r] / gen_len**cfg.length_penalty, beams[r]) for r in range(beams.shape[0])
            ]
        finished.sort(key=lambda sb: (-sb[0], len(sb[1])))
        return np.asarray(finished[0][1], dtype=np.int64)


def _logsumexp(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def _banned_ngram_tokens(seq: np.ndarray, n: int) -> list[int]:
    """Tokens that would complete an n-gram already present in seq."""
    seq = [int(v) for v in seq]
    if n <= 0 or len(seq) < n - 1:
        return []
    seen: dict[tuple, list[int]] = {}
    for j in range(len(seq) - n + 1):
        key = tuple(seq[j : j + n - 1])
        seen.setdefault(key, []).append(seq[j + n - 1])
    return seen.get(tuple(seq[len(seq) - n + 1 :]), [])


def init_model(config: ModelConfig, seed: int, dtype=np.float32) -> GptModel:
    return GptModel.init(config, seed, dtype=dtype)
