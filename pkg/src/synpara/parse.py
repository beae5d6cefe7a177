"""Constituency-tree algorithms.

Trees are ordered and labeled, carry no terminal words (the parse is a pure
syntax signal), and are immutable so they can key caches and memo tables.
Includes linearization and its strict inverse, height pruning, template
extraction, the Zhang-Shasha tree edit distance, a brute-force edit-distance
oracle for tests, and the deterministic parser for the synthetic grammar.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence, Tuple, Union

from .errors import TreeParseError, TreeSizeError, ValidationError


@dataclass(frozen=True)
class ParseTree:
    label: str
    children: Tuple["ParseTree", ...] = ()

    def __post_init__(self):
        if not self.label or any(c in self.label for c in " \t\n()"):
            raise ValidationError(f"invalid tree label {self.label!r}")
        object.__setattr__(self, "children", tuple(self.children))


@dataclass(frozen=True)
class ParseFailure:
    """Non-fatal outcome of parse_sentence for out-of-grammar input."""

    kind: str  # "lexicon" or "syntax"
    reason: str


def is_failure(x) -> bool:
    return isinstance(x, ParseFailure)


def height(tree: ParseTree) -> int:
    if not tree.children:
        return 1
    return 1 + max(height(c) for c in tree.children)


def node_count(tree: Optional[ParseTree]) -> int:
    if tree is None:
        return 0
    return 1 + sum(node_count(c) for c in tree.children)


def linearize(tree: ParseTree):
    """Depth-first token emission: "(", label, children..., ")"."""
    out = []

    def walk(node):
        out.append("(")
        out.append(node.label)
        for c in node.children:
            walk(c)
        out.append(")")

    walk(tree)
    return out


def parse_linearized(tokens: Sequence[str]) -> ParseTree:
    """Strict inverse of linearize; reports the offending token index."""
    if not tokens:
        raise TreeParseError("empty token sequence", 0)

    def parse_node(i: int):
        if i >= len(tokens):
            raise TreeParseError("unbalanced parentheses at end of input", len(tokens))
        if tokens[i] != "(":
            raise TreeParseError(f"expected '(' but found {tokens[i]!r}", i)
        if i + 1 >= len(tokens):
            raise TreeParseError("unbalanced parentheses at end of input", len(tokens))
        label = tokens[i + 1]
        if label in ("(", ")"):
            raise TreeParseError("missing label", i + 1)
        j = i + 2
        children = []
        while j < len(tokens) and tokens[j] == "(":
            child, j = parse_node(j)
            children.append(child)
        if j >= len(tokens):
            raise TreeParseError("unbalanced parentheses at end of input", len(tokens))
        if tokens[j] != ")":
            raise TreeParseError(f"expected ')' but found {tokens[j]!r}", j)
        return ParseTree(label, tuple(children)), j + 1

    tree, end = parse_node(0)
    if end != len(tokens):
        raise TreeParseError("trailing tokens after complete tree", end)
    return tree


def prune_to_height(tree: ParseTree, h: int) -> ParseTree:
    """Keep nodes at depth <= h (the root has depth 1)."""
    if h < 1:
        raise ValidationError(f"prune height must be >= 1, got {h}")
    if h == 1 or not tree.children:
        return ParseTree(tree.label)
    return ParseTree(tree.label, tuple(prune_to_height(c, h - 1) for c in tree.children))


def template(tree: ParseTree, h: int = 2) -> str:
    return " ".join(linearize(prune_to_height(tree, h)))


# ---------------------------------------------------------------------------
# tree edit distance

MaybeTree = Optional[ParseTree]  # None is the explicit empty-tree sentinel


def _postorder(root: ParseTree):
    """1-based postorder labels and leftmost-leaf-descendant indices."""
    labels = [None]
    lml = [0]

    def walk(node):
        first_leaf = None
        for c in node.children:
            leaf = walk(c)
            if first_leaf is None:
                first_leaf = leaf
        idx = len(labels)
        labels.append(node.label)
        lml.append(first_leaf if first_leaf is not None else idx)
        return first_leaf if first_leaf is not None else idx

    walk(root)
    return labels, lml


def _keyroots(lml):
    seen = set()
    roots = []
    for k in range(len(lml) - 1, 0, -1):
        if lml[k] not in seen:
            seen.add(lml[k])
            roots.append(k)
    return sorted(roots)


def ted(t1: MaybeTree, t2: MaybeTree) -> int:
    """Minimum unit-cost insertions, deletions, and relabelings between
    ordered trees, by the Zhang-Shasha keyroots dynamic program.
    """
    if t1 is None or t2 is None:
        return node_count(t1) + node_count(t2)
    labels1, lml1 = _postorder(t1)
    labels2, lml2 = _postorder(t2)
    n, m = len(labels1) - 1, len(labels2) - 1
    td = [[0] * (m + 1) for _ in range(n + 1)]

    for k1 in _keyroots(lml1):
        for k2 in _keyroots(lml2):
            li, lj = lml1[k1], lml2[k2]
            rows, cols = k1 - li + 2, k2 - lj + 2
            fd = [[0] * cols for _ in range(rows)]
            for di in range(1, rows):
                fd[di][0] = fd[di - 1][0] + 1
            for dj in range(1, cols):
                fd[0][dj] = fd[0][dj - 1] + 1
            for di in range(1, rows):
                i1 = li + di - 1
                row, above = fd[di], fd[di - 1]
                for dj in range(1, cols):
                    j1 = lj + dj - 1
                    if lml1[i1] == li and lml2[j1] == lj:
                        cost = 0 if labels1[i1] == labels2[j1] else 1
                        row[dj] = min(
                            above[dj] + 1, row[dj - 1] + 1, above[dj - 1] + cost
                        )
                        td[i1][j1] = row[dj]
                    else:
                        row[dj] = min(
                            above[dj] + 1,
                            row[dj - 1] + 1,
                            fd[lml1[i1] - li][lml2[j1] - lj] + td[i1][j1],
                        )
    return td[n][m]


def ted_bruteforce(t1: MaybeTree, t2: MaybeTree) -> int:
    """Oracle edit distance by memoized recursion over ordered forests.

    No keyroot machinery is shared with ted; capped at 8 combined nodes
    because the recursion is exponential in principle.
    """
    if node_count(t1) + node_count(t2) > 8:
        raise TreeSizeError("ted_bruteforce is capped at 8 combined nodes")

    @lru_cache(maxsize=None)
    def forest_dist(f1: Tuple[ParseTree, ...], f2: Tuple[ParseTree, ...]) -> int:
        if not f1 and not f2:
            return 0
        if not f1:
            return sum(node_count(t) for t in f2)
        if not f2:
            return sum(node_count(t) for t in f1)
        a, b = f1[-1], f2[-1]
        delete = forest_dist(f1[:-1] + a.children, f2) + 1
        insert = forest_dist(f1, f2[:-1] + b.children) + 1
        match = (
            forest_dist(f1[:-1], f2[:-1])
            + forest_dist(a.children, b.children)
            + (0 if a.label == b.label else 1)
        )
        return min(delete, insert, match)

    f1 = () if t1 is None else (t1,)
    f2 = () if t2 is None else (t2,)
    result = forest_dist(f1, f2)
    forest_dist.cache_clear()
    return result


# ---------------------------------------------------------------------------
# deterministic parser for the synthetic grammar

def _pre(label: str) -> ParseTree:
    return ParseTree(label)


def _np() -> ParseTree:
    return ParseTree("NP", (_pre("DT"), _pre("NN")))


class _Mismatch(Exception):
    pass


class _Cursor:
    def __init__(self, pos_tags):
        self.tags = pos_tags
        self.i = 0

    def peek(self):
        return self.tags[self.i] if self.i < len(self.tags) else None

    def take(self, tag: str):
        if self.peek() != tag:
            raise _Mismatch(f"expected {tag} at position {self.i}")
        self.i += 1


def parse_sentence(words: Sequence[str], grammar) -> Union[ParseTree, ParseFailure]:
    """Recursive-descent parse of one sentence under the synthetic grammar.

    The grammar's four clause shapes are distinguished by single-token
    lookahead at each decision point, so the parse is deterministic. Returns
    a ParseFailure value (never raises) for out-of-grammar input.
    """
    tags = []
    for w in words:
        tag = grammar.lexicon.get(w)
        if tag is None:
            return ParseFailure("lexicon", f"unknown word {w!r}")
        tags.append(tag)
    cur = _Cursor(tags)
    try:
        tree = _parse_clause(cur)
    except _Mismatch as exc:
        return ParseFailure("syntax", str(exc))
    if cur.i != len(tags):
        return ParseFailure("syntax", f"trailing words at position {cur.i}")
    return tree


def _parse_np(cur: _Cursor) -> ParseTree:
    cur.take("DT")
    cur.take("NN")
    return _np()


def _parse_advp(cur: _Cursor) -> ParseTree:
    cur.take("RB")
    return ParseTree("ADVP", (_pre("RB"),))


def _parse_clause(cur: _Cursor) -> ParseTree:
    head = cur.peek()
    if head == "PRP":
        # cleft: "it was the X that V the Y adv"
        cur.take("PRP")
        cur.take("AUX")
        subj = _parse_np(cur)
        cur.take("IN")
        cur.take("VBD")
        obj = _parse_np(cur)
        advp = _parse_advp(cur)
        sbar = ParseTree(
            "SBAR", (_pre("IN"), ParseTree("VP", (_pre("VBD"), obj, advp)))
        )
        return ParseTree("S", (_pre("PRP"), _pre("AUX"), subj, sbar))
    if head == "RB":
        # adverb-fronted: "adv the X V the Y"
        advp = _parse_advp(cur)
        subj = _parse_np(cur)
        cur.take("VBD")
        obj = _parse_np(cur)
        vp = ParseTree("VP", (_pre("VBD"), obj))
        return ParseTree("S", (advp, subj, vp))
    if head == "DT":
        subj = _parse_np(cur)
        nxt = cur.peek()
        if nxt == "AUX":
            # passive: "the Y was Ved by the X adv"
            cur.take("AUX")
            cur.take("VBN")
            cur.take("IN")
            agent = _parse_np(cur)
            advp = _parse_advp(cur)
            pp = ParseTree("PP", (_pre("IN"), agent))
            vp = ParseTree("VP", (_pre("VBN"), pp, advp))
            return ParseTree("S", (subj, _pre("AUX"), vp))
        if nxt == "VBD":
            # active: "the X V the Y adv"
            cur.take("VBD")
            obj = _parse_np(cur)
            advp = _parse_advp(cur)
            vp = ParseTree("VP", (_pre("VBD"), obj, advp))
            return ParseTree("S", (subj, vp))
        raise _Mismatch(f"expected AUX or VBD at position {cur.i}")
    raise _Mismatch(f"no clause starts with {head} at position {cur.i}")
