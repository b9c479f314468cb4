"""Plain record types shared by the data, encoder and harness modules."""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ValidationError

CLS_ID = 0
SEP_ID = 1
PAD_ID = 2
UNK_ID = 3
RESERVED = ("[CLS]", "[SEP]", "[PAD]", "[UNK]")


@dataclass(frozen=True)
class AttributedText:
    """A text (X or Y) with its typed attributes, all as vocabulary ids."""

    tokens: tuple[int, ...]
    attributes: tuple[tuple[str, tuple[int, ...]], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        object.__setattr__(
            self,
            "attributes",
            tuple((str(kind), tuple(int(t) for t in toks)) for kind, toks in self.attributes),
        )
        if not self.tokens:
            raise ValidationError("text must contain at least one token")
        for kind, toks in self.attributes:
            if not toks:
                raise ValidationError(f"attribute {kind!r} has no tokens")

    @property
    def n_attrs(self) -> int:
        return len(self.attributes)

    def without_type(self, attr_type: str) -> AttributedText:
        return AttributedText(self.tokens, tuple(a for a in self.attributes if a[0] != attr_type))


@dataclass(frozen=True)
class MatchExample:
    x: AttributedText
    y: AttributedText
    label: int
    latent_x: tuple[int, ...] = ()
    latent_y: tuple[int, ...] = ()
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValidationError(f"label must be 0 or 1, got {self.label!r}")
        object.__setattr__(self, "latent_x", tuple(sorted(int(i) for i in self.latent_x)))
        object.__setattr__(self, "latent_y", tuple(sorted(int(i) for i in self.latent_y)))
