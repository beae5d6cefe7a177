"""Alignment metrics (BLEU, ROUGE-1/2/L) and syntactic-conformance metrics
(TMA, TED-3), plus the aggregated evaluation report.

Tokenization is the corpus whitespace tokenization; no stemming or case
folding. ROUGE scores are averaged per example, BLEU is corpus-level.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import List, Optional, Sequence

from .errors import ContractError, EmptyBatchError
from .parse import is_failure, parse_sentence, prune_to_height, ted, template


@dataclass
class MetricsReport:
    bleu: float
    rouge1: float
    rouge2: float
    rougeL: float
    tma: float
    ted3: float
    n_examples: int
    n_parse_failures: int


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: List[Sequence[str]], references: List[Sequence[str]]) -> float:
    """Corpus BLEU-4 with uniform weights and brevity penalty.

    Modified n-gram precisions are aggregated over the corpus. For n >= 2 a
    zero match count is smoothed by adding one to both the match count and
    the candidate total; unigram precision is left unsmoothed so disjoint
    corpora score 0.
    """
    if len(candidates) != len(references):
        raise ContractError(
            f"bleu needs paired corpora, got {len(candidates)} vs {len(references)}"
        )
    if not candidates:
        raise EmptyBatchError("bleu of an empty corpus")
    matches = [0] * 5
    totals = [0] * 5
    cand_len = 0
    ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, 5):
            cand_counts = _ngrams(cand, n)
            ref_counts = _ngrams(ref, n)
            totals[n] += sum(cand_counts.values())
            matches[n] += sum(
                min(c, ref_counts[g]) for g, c in cand_counts.items()
            )
    if cand_len == 0:
        return 0.0
    if matches[1] == 0:
        return 0.0
    log_sum = math.log(matches[1] / totals[1])
    for n in range(2, 5):
        m, t = matches[n], totals[n]
        if m == 0:
            m, t = m + 1, t + 1
        log_sum += math.log(m / t)
    bp = min(1.0, math.exp(1.0 - ref_len / cand_len))
    return bp * math.exp(log_sum / 4.0)


def _f1(match: int, cand_total: int, ref_total: int) -> float:
    if cand_total == 0 or ref_total == 0 or match == 0:
        return 0.0
    p = match / cand_total
    r = match / ref_total
    return 2.0 * p * r / (p + r)


def rouge_n(candidate: Sequence[str], reference: Sequence[str], n: int) -> float:
    if n not in (1, 2):
        raise ContractError(f"rouge_n supports n in {{1, 2}}, got {n}")
    cand_counts = _ngrams(candidate, n)
    ref_counts = _ngrams(reference, n)
    match = sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
    return _f1(match, sum(cand_counts.values()), sum(ref_counts.values()))


def _lcs_len(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[str], reference: Sequence[str]) -> float:
    return _f1(_lcs_len(candidate, reference), len(candidate), len(reference))


def tma(generated_parses, target_parses, template_height: int = 2) -> float:
    """Percentage of examples whose pruned parse template matches the
    target's; parse failures count as non-matches.
    """
    if len(generated_parses) != len(target_parses):
        raise ContractError(
            f"tma needs aligned parses, got {len(generated_parses)} "
            f"vs {len(target_parses)}"
        )
    if not target_parses:
        raise EmptyBatchError("tma of an empty corpus")
    hits = 0
    for gen, tgt in zip(generated_parses, target_parses):
        if is_failure(gen) or gen is None:
            continue
        if template(gen, template_height) == template(tgt, template_height):
            hits += 1
    return 100.0 * hits / len(target_parses)


def ted3(generated_parses, target_parses) -> float:
    """Mean edit distance between parses pruned to height 3; a failed parse
    scores the full distance from the empty tree to the pruned target.
    """
    if len(generated_parses) != len(target_parses):
        raise ContractError(
            f"ted3 needs aligned parses, got {len(generated_parses)} "
            f"vs {len(target_parses)}"
        )
    if not target_parses:
        raise EmptyBatchError("ted3 of an empty corpus")
    total = 0
    for gen, tgt in zip(generated_parses, target_parses):
        pruned_tgt = prune_to_height(tgt, 3)
        if is_failure(gen) or gen is None:
            total += ted(None, pruned_tgt)
        else:
            total += ted(prune_to_height(gen, 3), pruned_tgt)
    return total / len(target_parses)


def build_report(
    generations: List[Sequence[str]],
    examples,
    grammar,
    template_height: int = 2,
) -> MetricsReport:
    """Score generated word sequences against their examples.

    `generations[i]` is the detokenized output for `examples[i]`; targets and
    gold parses come from the examples, and generations are re-parsed with
    the corpus grammar.
    """
    if len(generations) != len(examples):
        raise ContractError(
            f"build_report needs one generation per example, got "
            f"{len(generations)} vs {len(examples)}"
        )
    if not generations:
        raise EmptyBatchError("build_report of an empty corpus")
    references = [ex.tgt for ex in examples]
    target_parses = [ex.target_parse for ex in examples]
    gen_parses = [parse_sentence(g, grammar) for g in generations]
    n_failures = sum(1 for p in gen_parses if is_failure(p))
    return MetricsReport(
        bleu=bleu(generations, references),
        rouge1=sum(rouge_n(g, r, 1) for g, r in zip(generations, references))
        / len(generations),
        rouge2=sum(rouge_n(g, r, 2) for g, r in zip(generations, references))
        / len(generations),
        rougeL=sum(rouge_l(g, r) for g, r in zip(generations, references))
        / len(generations),
        tma=tma(gen_parses, target_parses, template_height),
        ted3=ted3(gen_parses, target_parses),
        n_examples=len(generations),
        n_parse_failures=n_failures,
    )


_COLUMNS = ("BLEU", "ROUGE-1", "ROUGE-2", "ROUGE-L", "TMA", "TED-3")


def _row_values(report: MetricsReport):
    return (
        f"{report.bleu:.4f}",
        f"{report.rouge1:.4f}",
        f"{report.rouge2:.4f}",
        f"{report.rougeL:.4f}",
        f"{report.tma:.2f}",
        f"{report.ted3:.4f}",
    )


def format_report_table(report: MetricsReport, label: Optional[str] = None) -> str:
    """Aligned plain-text table in the standard column order."""
    return format_comparison_table([label or "model"], [report])


def format_comparison_table(labels, reports, params=None) -> str:
    """Multi-row table; optional params column holds trainable counts."""
    header = ["mode"] + (["# Params"] if params else []) + list(_COLUMNS)
    rows = []
    for i, (label, report) in enumerate(zip(labels, reports)):
        row = [label]
        if params:
            row.append(str(params[i]))
        row.extend(_row_values(report))
        rows.append(row)
    widths = [
        max(len(header[c]), *(len(r[c]) for r in rows)) for c in range(len(header))
    ]
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip(),
    ]
    for row in rows:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip())
    return "\n".join(lines)


def format_report_kv(report: MetricsReport) -> str:
    """Machine-readable key=value block; floats keep full precision."""
    fields = (
        ("bleu", report.bleu),
        ("rouge1", report.rouge1),
        ("rouge2", report.rouge2),
        ("rougeL", report.rougeL),
        ("tma", report.tma),
        ("ted3", report.ted3),
        ("n_examples", report.n_examples),
        ("n_parse_failures", report.n_parse_failures),
    )
    return "\n".join(f"{k}={v!r}" for k, v in fields)
