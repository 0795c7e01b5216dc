"""Flavour identifiers and the per-game flavour tables."""

from __future__ import annotations

import re
from dataclasses import dataclass

GAMES = ("mini_crossing", "mini_invaders")

FLAVOUR_TABLE: dict[str, tuple[tuple[int, int], ...]] = {
    "mini_crossing": ((0, 0), (1, 0), (1, 1), (4, 0)),
    "mini_invaders": ((0, 0), (1, 0), (1, 1), (9, 0)),
}

_PATTERN = re.compile(r"^(?P<game>[a-z_]+):m(?P<mode>\d+)d(?P<difficulty>\d+)$")


class UnknownFlavourError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class Flavour:
    game: str
    mode: int = 0
    difficulty: int = 0

    def __post_init__(self):
        if self.game not in FLAVOUR_TABLE:
            raise UnknownFlavourError(f"unknown game {self.game!r}; known games: {', '.join(GAMES)}")
        if (self.mode, self.difficulty) not in FLAVOUR_TABLE[self.game]:
            raise UnknownFlavourError(f"{self.game} has no flavour m{self.mode}d{self.difficulty}")

    @property
    def tag(self) -> str:
        return f"m{self.mode}d{self.difficulty}"

    def __str__(self):
        return f"{self.game}:{self.tag}"

    @classmethod
    def parse(cls, text: str) -> "Flavour":
        """Parse ``"mini_crossing:m1d0"``."""
        m = _PATTERN.match(text.strip())
        if not m:
            raise UnknownFlavourError(f"cannot parse flavour {text!r}; expected <game>:m<mode>d<difficulty>")
        return cls(m["game"], int(m["mode"]), int(m["difficulty"]))


def enumerate_flavours(game: str) -> list[Flavour]:
    if game not in FLAVOUR_TABLE:
        raise UnknownFlavourError(f"unknown game {game!r}; known games: {', '.join(GAMES)}")
    return [Flavour(game, m, d) for m, d in FLAVOUR_TABLE[game]]


def default_flavour(game: str) -> Flavour:
    return Flavour(game, 0, 0)
