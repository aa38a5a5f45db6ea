"""Parser for block-string architecture descriptions.

The mini-language assembles a sequential network from four block letters:

    a   relative multi-head attention
    q   quasi-recurrent layer
    f   feed-forward boom block
    |   whole-feature dropout on the hidden sequence

Letters concatenate left to right; ``+`` separates segments (purely visual);
``n×(...)`` or ``nx(...)`` repeats a parenthesized segment n times. Whitespace
is ignored everywhere.

Example: ``| + 3×(q|f) + (qafff)`` flattens to ``|q|fq|fq|fqafff``.

After flattening, every ``q`` whose next non-``|`` neighbor is an ``f`` forms
a residual group with that ``f``: one residual connection and one layer-norm
wrap the pair (the recurrence plus its boom projection), the way a lone ``f``
wraps itself. A ``q`` followed by anything else stays bare: no residual, no
norm.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ArchitectureError

TOKENS = frozenset("aqf|")


@dataclass(frozen=True)
class ArchitectureSpec:
    """Flattened token sequence plus the q..f spans that share one residual."""

    tokens: tuple
    residual_groups: tuple  # (start, end) index pairs into tokens, inclusive
    source: str = ""

    def count(self, token):
        return self.tokens.count(token)

    @property
    def counts(self):
        return {t: self.tokens.count(t) for t in "aqf|"}

    def __str__(self):
        return "".join(self.tokens)


def _find_groups(tokens):
    """Pair each q with the next f, skipping interleaved |, first match wins."""
    groups = []
    i = 0
    n = len(tokens)
    while i < n:
        if tokens[i] == "q":
            j = i + 1
            while j < n and tokens[j] == "|":
                j += 1
            if j < n and tokens[j] == "f":
                groups.append((i, j))
                i = j + 1
                continue
        i += 1
    return tuple(groups)


def parse_architecture(spec: str) -> ArchitectureSpec:
    """Flatten an architecture string into a token list with residual groups.

    Raises ``ArchitectureError`` (with the offending character position in the
    original string) for unknown tokens, unbalanced parentheses, or a zero
    repetition count.
    """
    tokens = []
    i = 0
    n = len(spec)

    def parse_sequence(depth):
        nonlocal i
        while i < n:
            ch = spec[i]
            if ch.isspace() or ch == "+":
                i += 1
            elif ch in TOKENS:
                tokens.append(ch)
                i += 1
            elif ch.isdigit():
                start = i
                while i < n and spec[i].isdigit():
                    i += 1
                count = int(spec[start:i])
                if count == 0:
                    raise ArchitectureError("repetition count must be positive", start)
                if i < n and spec[i] in ("x", "×"):
                    i += 1
                if i >= n or spec[i] != "(":
                    raise ArchitectureError("expected '(' after repetition count", i)
                mark = len(tokens)
                i += 1
                parse_sequence(depth + 1)
                repeated = tokens[mark:]
                tokens.extend(repeated * (count - 1))
            elif ch == "(":
                i += 1
                parse_sequence(depth + 1)
            elif ch == ")":
                if depth == 0:
                    raise ArchitectureError("unbalanced ')'", i)
                i += 1
                return
            else:
                raise ArchitectureError(f"unknown token {ch!r}", i)
        if depth > 0:
            raise ArchitectureError("unbalanced '(': missing ')'", n)

    parse_sequence(0)
    if not tokens:
        raise ArchitectureError("empty architecture string", 0)
    return ArchitectureSpec(tuple(tokens), _find_groups(tokens), source=spec)


# Named layouts: a dropout stem, then mixes of recurrence, attention, and boom
# layers in the three published arrangements.
NAMED_ARCHITECTURES = {
    "attn-qrnn": "| + 3x(q|f) + (qafff)",
    "par": "| + 4x(afff) + 5x(f)",
    "hybrid": "(|q|qf) + 4x(afff) + 3x(f)",
}


def named_architecture(name: str) -> ArchitectureSpec:
    try:
        return parse_architecture(NAMED_ARCHITECTURES[name])
    except KeyError:
        known = ", ".join(sorted(NAMED_ARCHITECTURES))
        raise ArchitectureError(f"unknown architecture {name!r}; known: {known}") from None
