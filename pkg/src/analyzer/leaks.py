"""Sensitive-value matching with an Aho-Corasick automaton."""

import base64
import binascii
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Tuple
from urllib.parse import unquote_to_bytes

import ahocorasick

logger = logging.getLogger("flowtap.analyzer.leaks")

_BASE64_RUN = re.compile(rb"[A-Za-z0-9+/_-]{8,}={0,2}")


@dataclass(frozen=True)
class LeakMatch:
    name: str
    value: str
    offset: int  # in the scanned view
    encoding: str = "plain"  # plain | gzip | base64 | urlencoded
    source_offset: Optional[int] = None  # first encoded character of the occurrence


class PatternSet:
    """Named sensitive strings compiled into one automaton.

    Matching works on latin-1 text so byte offsets and character offsets
    coincide.
    """

    def __init__(self, patterns: Optional[Mapping[str, str]] = None):
        self._by_value: Dict[str, List[str]] = {}
        self._automaton = ahocorasick.Automaton()
        for name, value in (patterns or {}).items():
            self._add(name, value)
        if self._by_value:
            self._automaton.make_automaton()

    def _add(self, name: str, value: str) -> None:
        if not value:
            raise ValueError(f"pattern {name!r} is empty")
        text = value.encode("utf-8").decode("latin-1")
        names = self._by_value.setdefault(text, [])
        names.append(name)
        self._automaton.add_word(text, text)

    @classmethod
    def from_file(cls, path: Path) -> "PatternSet":
        """Load ``name = value`` lines; ``#`` starts a comment."""
        patterns: Dict[str, str] = {}
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'name = value'")
            name, value = (part.strip() for part in line.split("=", 1))
            patterns[name] = value
        logger.info("Loaded %d leak patterns from %s", len(patterns), path)
        return cls(patterns)

    def __len__(self) -> int:
        return sum(len(names) for names in self._by_value.values())

    def __bool__(self) -> bool:
        return bool(self._by_value)

    def names(self) -> List[str]:
        return sorted(n for names in self._by_value.values() for n in names)

    def search(self, data: bytes) -> List[Tuple[str, str, int]]:
        """Every (name, value, start offset) occurrence, overlaps included."""
        if not self._by_value:
            return []
        text = data.decode("latin-1")
        hits = []
        for end, value in self._automaton.iter(text):
            start = end - len(value) + 1
            for name in self._by_value[value]:
                hits.append((name, value.encode("latin-1").decode("utf-8", "replace"), start))
        hits.sort(key=lambda h: (h[2], h[0]))
        return hits


def _base64_views(data: bytes) -> Iterable[Tuple[int, bytes]]:
    """(source offset, decoded bytes) for every base64 run, at all four alignments.

    A token glued to other alphabet characters (``token=x<b64>``, path
    segments) only decodes cleanly from its own start, which can sit at any
    offset inside the run.
    """
    for m in _BASE64_RUN.finditer(data):
        run = m.group().rstrip(b"=")
        if b"-" in run or b"_" in run:
            run = run.replace(b"-", b"+").replace(b"_", b"/")
        for shift in range(4):
            part = run[shift:]
            if len(part) < 8:
                break
            if len(part) % 4 == 1:
                part = part[:-1]
            try:
                decoded = base64.b64decode(part + b"=" * (-len(part) % 4), validate=True)
            except (binascii.Error, ValueError):
                continue
            yield m.start() + shift, decoded


def _percent_view(data: bytes) -> Tuple[bytes, List[int]]:
    """Percent-decoded copy of ``data`` plus the source offset of every output byte."""
    out = bytearray()
    origin: List[int] = []
    i = 0
    while i < len(data):
        byte = data[i]
        if byte == 0x25 and _is_hex(data[i + 1 : i + 3]):
            out.append(int(data[i + 1 : i + 3], 16))
            origin.append(i)
            i += 3
            continue
        out.append(0x20 if byte == 0x2B else byte)
        origin.append(i)
        i += 1
    return bytes(out), origin


def _is_hex(pair: bytes) -> bool:
    return len(pair) == 2 and all(c in b"0123456789abcdefABCDEF" for c in pair)


def scan_for_leaks(
    cleartext: bytes, patterns: PatternSet, encoding: str = "plain"
) -> List[LeakMatch]:
    """Every occurrence in the buffer plus its base64- and percent-decoded views.

    ``encoding`` labels plain matches, so a body that had to be inflated
    first reports ``gzip``. A decoded-view hit that is just a plain
    occurrence seen again is not reported twice.
    """
    if not patterns:
        return []
    matches = [
        LeakMatch(name, value, offset, encoding)
        for name, value, offset in patterns.search(cleartext)
    ]

    if b"%" in cleartext:
        decoded, origin = _percent_view(cleartext)
        for name, value, offset in patterns.search(decoded):
            start = origin[offset]
            end = origin[offset + len(value.encode("utf-8")) - 1] + 1
            if cleartext[start:end] == decoded[offset : offset + end - start]:
                continue  # nothing was encoded in this span
            matches.append(LeakMatch(name, value, offset, "urlencoded", source_offset=start))

    seen = set()
    for start, decoded in _base64_views(cleartext):
        for name, value, offset in patterns.search(decoded):
            # position of the 4-character group holding the first value byte
            source = start + (offset // 3) * 4
            if (name, source) in seen:
                continue
            seen.add((name, source))
            matches.append(LeakMatch(name, value, offset, "base64", source_offset=source))
    return matches
