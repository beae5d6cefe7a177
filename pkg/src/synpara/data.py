"""Synthetic paraphrase corpus with gold constituency parses.

One semantic frame (agent, action, patient, manner) is rendered by two
different surface templates; the pair plus the target template's parse tree
makes one example. Four clause templates over a closed lexicon give 8736
distinct frames, so splits can be frame-disjoint. Verbs are irregular
(distinct past and participle forms) to keep the word-to-POS lexicon a
function, which the deterministic parser requires.

Also holds the token vocabulary and corpus/vocab file I/O. Corpus files are
UTF-8 TSV, one example per line: source sentence, target sentence,
linearized target parse, all space-joined. LF endings.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

from .errors import CapacityError, CorpusFormatError, LengthError, ValidationError
from .parse import ParseTree, linearize, parse_linearized
from .seeding import substream

PAD, BOS, EOS, SEP, UNK = 0, 1, 2, 3, 4
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<sep>", "<unk>")


@dataclass(frozen=True)
class VerbForms:
    lemma: str
    past: str
    participle: str


@dataclass(frozen=True)
class Frame:
    agent: str
    verb: VerbForms
    patient: str
    manner: str


@dataclass(frozen=True)
class Template:
    name: str
    render: Callable[[Frame], Tuple[str, ...]]
    schema: Callable[[], ParseTree]


@dataclass(frozen=True)
class Grammar:
    lexicon: Dict[str, str]  # surface word -> POS class
    content_lemma: Dict[str, str]  # content word -> lemma (verb forms collapse)
    nouns: Tuple[str, ...]
    verbs: Tuple[VerbForms, ...]
    adverbs: Tuple[str, ...]
    templates: Tuple[Template, ...]

    @property
    def frame_capacity(self) -> int:
        return len(self.nouns) * (len(self.nouns) - 1) * len(self.verbs) * len(self.adverbs)


@dataclass(frozen=True)
class ParaphraseExample:
    src: Tuple[str, ...]
    tgt: Tuple[str, ...]
    target_parse: ParseTree

    def __post_init__(self):
        object.__setattr__(self, "src", tuple(self.src))
        object.__setattr__(self, "tgt", tuple(self.tgt))
        if self.src == self.tgt:
            raise ValidationError("paraphrase pair with identical source and target")
        if not self.src or not self.tgt:
            raise ValidationError("paraphrase pair with an empty side")


# ---------------------------------------------------------------------------
# the grammar

_NOUNS = (
    "dog", "cat", "fox", "bird", "horse", "sheep", "wolf", "bear",
    "mouse", "rabbit", "farmer", "child", "thief", "artist",
)
_VERBS = (
    VerbForms("take", "took", "taken"),
    VerbForms("eat", "ate", "eaten"),
    VerbForms("see", "saw", "seen"),
    VerbForms("break", "broke", "broken"),
    VerbForms("steal", "stole", "stolen"),
    VerbForms("hide", "hid", "hidden"),
    VerbForms("shake", "shook", "shaken"),
    VerbForms("bite", "bit", "bitten"),
)
_ADVERBS = ("quickly", "slowly", "quietly", "eagerly", "gladly", "calmly")


def _pre(label: str) -> ParseTree:
    return ParseTree(label)


def _np_schema() -> ParseTree:
    return ParseTree("NP", (_pre("DT"), _pre("NN")))


def _advp_schema() -> ParseTree:
    return ParseTree("ADVP", (_pre("RB"),))


def _render_active(f: Frame):
    return ("the", f.agent, f.verb.past, "the", f.patient, f.manner)


def _schema_active() -> ParseTree:
    vp = ParseTree("VP", (_pre("VBD"), _np_schema(), _advp_schema()))
    return ParseTree("S", (_np_schema(), vp))


def _render_passive(f: Frame):
    return ("the", f.patient, "was", f.verb.participle, "by", "the", f.agent, f.manner)


def _schema_passive() -> ParseTree:
    pp = ParseTree("PP", (_pre("IN"), _np_schema()))
    vp = ParseTree("VP", (_pre("VBN"), pp, _advp_schema()))
    return ParseTree("S", (_np_schema(), _pre("AUX"), vp))


def _render_fronted(f: Frame):
    return (f.manner, "the", f.agent, f.verb.past, "the", f.patient)


def _schema_fronted() -> ParseTree:
    vp = ParseTree("VP", (_pre("VBD"), _np_schema()))
    return ParseTree("S", (_advp_schema(), _np_schema(), vp))


def _render_cleft(f: Frame):
    return ("it", "was", "the", f.agent, "that", f.verb.past, "the", f.patient, f.manner)


def _schema_cleft() -> ParseTree:
    vp = ParseTree("VP", (_pre("VBD"), _np_schema(), _advp_schema()))
    sbar = ParseTree("SBAR", (_pre("IN"), vp))
    return ParseTree("S", (_pre("PRP"), _pre("AUX"), _np_schema(), sbar))


def build_grammar() -> Grammar:
    lexicon = {"the": "DT", "was": "AUX", "by": "IN", "that": "IN", "it": "PRP"}
    content_lemma = {}
    for noun in _NOUNS:
        lexicon[noun] = "NN"
        content_lemma[noun] = noun
    for verb in _VERBS:
        lexicon[verb.past] = "VBD"
        lexicon[verb.participle] = "VBN"
        content_lemma[verb.past] = verb.lemma
        content_lemma[verb.participle] = verb.lemma
    for adverb in _ADVERBS:
        lexicon[adverb] = "RB"
        content_lemma[adverb] = adverb
    templates = (
        Template("active", _render_active, _schema_active),
        Template("passive", _render_passive, _schema_passive),
        Template("fronted", _render_fronted, _schema_fronted),
        Template("cleft", _render_cleft, _schema_cleft),
    )
    return Grammar(
        lexicon=lexicon,
        content_lemma=content_lemma,
        nouns=_NOUNS,
        verbs=_VERBS,
        adverbs=_ADVERBS,
        templates=templates,
    )


DEFAULT_GRAMMAR = build_grammar()


# ---------------------------------------------------------------------------
# corpus generation

def _frame_from_index(idx: int, grammar: Grammar) -> Frame:
    n_adv = len(grammar.adverbs)
    n_verb = len(grammar.verbs)
    n_noun = len(grammar.nouns)
    idx, adv = divmod(idx, n_adv)
    idx, verb = divmod(idx, n_verb)
    agent, patient_slot = divmod(idx, n_noun - 1)
    patient = patient_slot + 1 if patient_slot >= agent else patient_slot
    return Frame(
        agent=grammar.nouns[agent],
        verb=grammar.verbs[verb],
        patient=grammar.nouns[patient],
        manner=grammar.adverbs[adv],
    )


_TEMPLATE_PAIRS = [(i, j) for i in range(4) for j in range(4) if i != j]


def make_example(frame: Frame, src_template: Template, tgt_template: Template) -> ParaphraseExample:
    return ParaphraseExample(
        src=src_template.render(frame),
        tgt=tgt_template.render(frame),
        target_parse=tgt_template.schema(),
    )


def generate_corpus(seed: int, n_train: int, n_dev: int, n_test: int, grammar: Grammar = DEFAULT_GRAMMAR):
    """Three frame-disjoint ParaphraseExample lists, deterministic per seed."""
    for name, n in (("n_train", n_train), ("n_dev", n_dev), ("n_test", n_test)):
        if n < 1:
            raise ValidationError(f"{name} must be >= 1, got {n}")
    total = n_train + n_dev + n_test
    capacity = grammar.frame_capacity
    if total > capacity:
        raise CapacityError(
            f"requested {total} examples but only {capacity} distinct frames exist"
        )
    rng = substream(seed, "data")
    frame_ids = rng.choice(capacity, size=total, replace=False)
    pair_ids = rng.integers(0, len(_TEMPLATE_PAIRS), size=total)
    examples = []
    for frame_id, pair_id in zip(frame_ids, pair_ids):
        frame = _frame_from_index(int(frame_id), grammar)
        src_t, tgt_t = _TEMPLATE_PAIRS[int(pair_id)]
        examples.append(
            make_example(frame, grammar.templates[src_t], grammar.templates[tgt_t])
        )
    return (
        examples[:n_train],
        examples[n_train : n_train + n_dev],
        examples[n_train + n_dev :],
    )


def content_words(words: Sequence[str], grammar: Grammar):
    """Multiset of content lemmas (frame words); function words drop out."""
    out = {}
    for w in words:
        lemma = grammar.content_lemma.get(w)
        if lemma is not None:
            out[lemma] = out.get(lemma, 0) + 1
    return out


# ---------------------------------------------------------------------------
# vocabulary

class Vocab:
    """Token <-> id bijection with fixed reserved ids 0..4."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:5]) != RESERVED_TOKENS:
            raise ValidationError(
                f"vocab must start with the reserved tokens {RESERVED_TOKENS}"
            )
        if len(set(tokens)) != len(tokens):
            raise ValidationError("vocab contains duplicate tokens")
        self.tokens = tokens
        self.token_to_id = {tok: i for i, tok in enumerate(tokens)}

    @property
    def size(self) -> int:
        return len(self.tokens)

    def encode(self, words: Sequence[str]) -> List[int]:
        return [self.token_to_id.get(w, UNK) for w in words]

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.tokens[i] for i in ids]


def build_vocab(grammar: Grammar = DEFAULT_GRAMMAR) -> Vocab:
    words = sorted(grammar.lexicon.keys())
    labels = set()
    for tmpl in grammar.templates:
        for tok in linearize(tmpl.schema()):
            if tok not in ("(", ")"):
                labels.add(tok)
    return Vocab(list(RESERVED_TOKENS) + words + ["(", ")"] + sorted(labels))


def write_vocab(vocab: Vocab, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for tok in vocab.tokens:
            fh.write(tok + "\n")


def read_vocab(path) -> Vocab:
    with open(path, "r", encoding="utf-8") as fh:
        tokens = [line.rstrip("\n") for line in fh]
    try:
        return Vocab(tokens)
    except ValidationError as exc:
        raise CorpusFormatError(f"bad vocab file {path}: {exc}", 0, 0) from exc


# ---------------------------------------------------------------------------
# model input assembly

def build_model_input(example: ParaphraseExample, vocab: Vocab, max_len=None) -> List[int]:
    """Encoder token ids: source words, SEP, linearized target parse."""
    ids = (
        vocab.encode(example.src)
        + [SEP]
        + vocab.encode(linearize(example.target_parse))
    )
    if max_len is not None and len(ids) > max_len:
        raise LengthError(
            f"encoder input of {len(ids)} tokens exceeds max_len {max_len}"
        )
    return ids


# ---------------------------------------------------------------------------
# corpus file I/O

def write_corpus(examples: Sequence[ParaphraseExample], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(
                " ".join(ex.src)
                + "\t"
                + " ".join(ex.tgt)
                + "\t"
                + " ".join(linearize(ex.target_parse))
                + "\n"
            )


def read_corpus(path) -> List[ParaphraseExample]:
    examples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            fields = line.split("\t")
            if len(fields) != 3:
                raise CorpusFormatError(
                    f"expected 3 tab-separated fields, got {len(fields)}",
                    lineno,
                    len(fields),
                )
            src, tgt, parse_text = fields
            try:
                tree = parse_linearized(parse_text.split())
            except Exception as exc:
                raise CorpusFormatError(
                    f"bad linearized parse: {exc}", lineno, 3
                ) from exc
            try:
                examples.append(
                    ParaphraseExample(tuple(src.split()), tuple(tgt.split()), tree)
                )
            except ValidationError as exc:
                raise CorpusFormatError(str(exc), lineno, 2) from exc
    return examples
