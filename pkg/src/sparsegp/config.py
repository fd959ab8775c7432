"""Parser for the nested key/value configuration format.

The grammar, documented in the README:

    # comment
    key = value
    section { entries }            # sugar for section = section { ... }

    value := number | true | false | bare-word
           | [ value, value, ... ]
           | tag { entries }

Entries are separated by newlines or commas.  A tagged node parses to a dict
carrying its tag under the "tag" key; bare words parse to strings, so
``mean = zero`` and ``mean = constant { value = 1.0 }`` both work.
"""

from __future__ import annotations

import re

from .errors import ConfigError

_TOKEN = re.compile(
    r"""
    (?P<ws>[ \t]+)
  | (?P<comment>\#[^\n]*)
  | (?P<newline>\n)
  | (?P<punct>[{}\[\]=,])
  | (?P<number>[+-]?(\d+\.\d*|\.\d+|\d+)([eE][+-]?\d+)?)
  | (?P<word>[A-Za-z_][A-Za-z0-9_.\-]*)
    """,
    re.VERBOSE,
)


def _tokenize(text: str):
    tokens = []
    pos = 0
    line = 1
    while pos < len(text):
        match = _TOKEN.match(text, pos)
        if match is None:
            raise ConfigError(f"line {line}: unexpected character {text[pos]!r}")
        kind = match.lastgroup
        value = match.group()
        pos = match.end()
        if kind == "newline":
            tokens.append(("sep", "\n", line))
            line += 1
        elif kind == "punct":
            tokens.append(("sep" if value == "," else value, value, line))
        elif kind == "number":
            tokens.append(("number", value, line))
        elif kind == "word":
            tokens.append(("word", value, line))
        # whitespace and comments are dropped
    return tokens


class _Parser:
    def __init__(self, tokens):
        self.tokens = tokens
        self.index = 0

    def peek(self):
        while self.index < len(self.tokens):
            return self.tokens[self.index]
        return ("eof", "", -1)

    def next(self):
        token = self.peek()
        if token[0] != "eof":
            self.index += 1
        return token

    def skip_separators(self):
        while self.peek()[0] == "sep":
            self.next()

    def expect(self, kind):
        token = self.next()
        if token[0] != kind:
            raise ConfigError(
                f"line {token[2]}: expected {kind!r}, got {token[1]!r}"
            )
        return token

    def parse_entries(self, stop):
        out = {}
        while True:
            self.skip_separators()
            token = self.peek()
            if token[0] == stop:
                self.next()
                return out
            if token[0] == "eof":
                if stop == "eof":
                    return out
                raise ConfigError("unexpected end of input inside a block")
            key = self.expect("word")[1]
            if key in out:
                raise ConfigError(f"line {token[2]}: duplicate key {key!r}")
            nxt = self.peek()
            if nxt[0] == "=":
                self.next()
                out[key] = self.parse_value()
            elif nxt[0] == "{":
                self.next()
                node = self.parse_entries("}")
                node["tag"] = key
                out[key] = node
            else:
                raise ConfigError(
                    f"line {nxt[2]}: expected '=' or '{{' after {key!r}"
                )

    def parse_value(self):
        token = self.next()
        kind, text, line = token
        if kind == "number":
            return float(text) if re.search(r"[.eE]", text) else int(text)
        if kind == "word":
            if text == "true":
                return True
            if text == "false":
                return False
            if self.peek()[0] == "{":
                self.next()
                node = self.parse_entries("}")
                node["tag"] = text
                return node
            return text
        if kind == "[":
            items = []
            while True:
                self.skip_separators()
                if self.peek()[0] == "]":
                    self.next()
                    return items
                if self.peek()[0] == "eof":
                    raise ConfigError("unterminated list")
                items.append(self.parse_value())
        raise ConfigError(f"line {line}: unexpected token {text!r}")


def parse_config(text: str) -> dict:
    """Parse a configuration document into a nested dict tree."""
    parser = _Parser(_tokenize(text))
    return parser.parse_entries("eof")


def load_config(path) -> dict:
    with open(path, "r", encoding="utf-8") as handle:
        return parse_config(handle.read())
