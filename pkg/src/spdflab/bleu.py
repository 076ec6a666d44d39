"""Corpus-level BLEU with clipped n-gram precisions and brevity penalty,
plus generation scoring of a model over a test set.

Classic definition: per-hypothesis n-gram counts clipped to the maximum
reference count, pooled over the corpus; geometric mean of p1..p4 times
BP = exp(1 - r/c) when the hypothesis corpus is shorter than the effective
reference length (closest reference length per pair, ties toward shorter).
No smoothing by default: any zero precision gives BLEU 0.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

from .errors import InputError


@dataclass
class EvalReport:
    bleu: float  # 0..100
    precisions: list[float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    n_items: int
    perplexity: float | None = None

    def to_dict(self) -> dict:
        return {
            "bleu": self.bleu,
            "precisions": list(self.precisions),
            "brevity_penalty": self.brevity_penalty,
            "hyp_len": self.hyp_len,
            "ref_len": self.ref_len,
            "n_items": self.n_items,
            "perplexity": self.perplexity,
        }

    def render(self) -> str:
        parts = [
            f"BLEU = {self.bleu:.2f}",
            "p1..p4 = " + "/".join(f"{p * 100:.1f}" for p in self.precisions),
            f"BP = {self.brevity_penalty:.3f}",
            f"len = {self.hyp_len}/{self.ref_len}",
            f"n = {self.n_items}",
        ]
        if self.perplexity is not None:
            parts.append(f"PPL = {self.perplexity:.3f}")
        return ", ".join(parts)


def _tokens(text) -> list[str]:
    if isinstance(text, str):
        return text.split()
    return list(text)


def _ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses, reference_lists, max_n: int = 4, smooth_eps: float = 0.0) -> EvalReport:
    """hypotheses: list of strings (whitespace-tokenized) or token lists;
    reference_lists: one nonempty list of references per hypothesis."""
    if len(hypotheses) == 0:
        raise InputError("no hypotheses to score")
    if len(hypotheses) != len(reference_lists):
        raise InputError(
            f"{len(hypotheses)} hypotheses vs {len(reference_lists)} reference lists"
        )
    matched = [0] * max_n
    possible = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, refs in zip(hypotheses, reference_lists):
        if not refs:
            raise InputError("empty reference list")
        h = _tokens(hyp)
        rs = [_tokens(r) for r in refs]
        hyp_len += len(h)
        ref_len += min((abs(len(r) - len(h)), len(r)) for r in rs)[1]
        for n in range(1, max_n + 1):
            counts = _ngram_counts(h, n)
            if not counts:
                continue
            max_ref = Counter()
            for r in rs:
                for ng, c in _ngram_counts(r, n).items():
                    if c > max_ref[ng]:
                        max_ref[ng] = c
            matched[n - 1] += sum(min(c, max_ref[ng]) for ng, c in counts.items())
            possible[n - 1] += sum(counts.values())
    precisions = []
    for m, p in zip(matched, possible):
        if smooth_eps > 0.0:
            precisions.append((m + smooth_eps) / (p + smooth_eps) if p else 0.0)
        else:
            precisions.append(m / p if p else 0.0)
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / max(hyp_len, 1))
    if hyp_len == 0 or any(p == 0.0 for p in precisions):
        bleu = 0.0
    else:
        bleu = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / max_n)
    return EvalReport(
        bleu=bleu,
        precisions=precisions,
        brevity_penalty=bp,
        hyp_len=hyp_len,
        ref_len=ref_len,
        n_items=len(hypotheses),
    )


def score_run(model, examples, references, vocab, gen_config, mask_set=None) -> EvalReport:
    """Generate for every test prompt, strip the prompt, and score corpus
    BLEU plus perplexity on the gold targets.

    ``examples`` are PromptTarget items (prompts + gold target tokens) and
    ``references`` the matching reference strings. Prompts are batched by
    equal length, which is exactly equivalent to one-by-one decoding. A
    failed generation is recorded as an empty hypothesis and scoring
    continues.
    """
    from .train import evaluate_nll  # local import to avoid a cycle

    cfg = gen_config
    if cfg.eot_id is None:
        from dataclasses import replace

        cfg = replace(gen_config, eot_id=vocab.eot_id)
    hypotheses: list[str] = [""] * len(examples)
    outs = None
    if cfg.beam_size == 1:
        try:
            outs = model.generate_greedy_batch(
                [ex.prompt_ids for ex in examples], cfg, mask_set=mask_set
            )
        except Exception:
            outs = None
    if outs is None:
        outs = []
        for ex in examples:
            try:
                seq = model.generate(ex.prompt_ids, cfg, mask_set=mask_set)
                outs.append(seq[len(ex.prompt_ids) :].tolist())
            except Exception:
                outs.append([])
    for i, out in enumerate(outs):
        hypotheses[i] = vocab.decode(out).strip()
    nll = evaluate_nll(model, examples, mask_set=mask_set)
    report = corpus_bleu(hypotheses, [[r] for r in references])
    report.perplexity = math.exp(nll)
    return report
