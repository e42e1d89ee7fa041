"""Chain geometry, species pattern and van-der-Waals couplings."""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

import numpy as np

from .errors import InvalidArgument

SPECIES = ("A", "B")
NN_SPACING_UM = 5.3

# MHz um^6. Only the interspecies value is measured; the intraspecies ones are
# fixed by the quoted next-nearest-neighbour shifts at twice the spacing.
DEFAULT_C6 = {
    "AB": 662e3,
    "AA": 0.3 * (2 * NN_SPACING_UM) ** 6,
    "BB": 0.2 * (2 * NN_SPACING_UM) ** 6,
}


def pair_key(a: str, b: str) -> str:
    return "".join(sorted((a, b)))


def _normalize_c6(c6: Mapping[str, float] | None) -> Mapping[str, float]:
    table = dict(DEFAULT_C6)
    for key, value in (c6 or {}).items():
        if len(key) != 2 or any(s not in SPECIES for s in key):
            raise InvalidArgument(f"bad species pair {key!r} in c6 table")
        table[pair_key(key[0], key[1])] = float(value)
    for key, value in table.items():
        if not value >= 0:
            raise InvalidArgument(f"c6[{key}] must be non-negative, got {value}")
    return MappingProxyType(table)


@dataclass(frozen=True)
class ChainSpec:
    n_sites: int
    spacing: float
    pattern: tuple[str, ...]
    c6: Mapping[str, float] = field(default_factory=lambda: MappingProxyType(dict(DEFAULT_C6)))

    def __post_init__(self):
        if int(self.n_sites) < 1:
            raise InvalidArgument("n_sites must be >= 1")
        if not self.spacing > 0:
            raise InvalidArgument("spacing must be positive")
        pattern = tuple(self.pattern)
        if len(pattern) != self.n_sites:
            raise InvalidArgument("pattern length must equal n_sites")
        if any(p not in SPECIES for p in pattern):
            raise InvalidArgument(f"species tags must be one of {SPECIES}")
        object.__setattr__(self, "pattern", pattern)
        object.__setattr__(self, "c6", _normalize_c6(self.c6))

    def sites_of(self, species: str) -> tuple[int, ...]:
        return tuple(i for i, s in enumerate(self.pattern) if s == species)

    def has_species(self, species: str) -> bool:
        return species in self.pattern

    def c6_between(self, i: int, j: int) -> float:
        return self.c6[pair_key(self.pattern[i], self.pattern[j])]

    def positions(self) -> np.ndarray:
        """Site coordinates in um, shape (n_sites, 3), chain along x."""
        pos = np.zeros((self.n_sites, 3))
        pos[:, 0] = np.arange(self.n_sites) * self.spacing
        return pos

    def with_c6(self, **overrides: float) -> "ChainSpec":
        table = dict(self.c6)
        table.update(overrides)
        return ChainSpec(self.n_sites, self.spacing, self.pattern, table)

    def to_dict(self) -> dict:
        return {
            "n_sites": self.n_sites,
            "spacing_um": self.spacing,
            "pattern": "".join(self.pattern),
            "c6": dict(self.c6),
        }


def build_alternating_chain(n_sites: int, spacing: float = NN_SPACING_UM, first_species: str = "A",
                            c6: Mapping[str, float] | None = None) -> ChainSpec:
    if int(n_sites) < 1:
        raise InvalidArgument("n_sites must be >= 1")
    if not spacing > 0:
        raise InvalidArgument("spacing must be positive")
    if first_species not in SPECIES:
        raise InvalidArgument(f"unknown species {first_species!r}")
    other = "B" if first_species == "A" else "A"
    pattern = tuple(first_species if k % 2 == 0 else other for k in range(n_sites))
    return ChainSpec(int(n_sites), float(spacing), pattern, c6 or {})


def interaction(chain: ChainSpec, i: int, j: int) -> float:
    """Van-der-Waals shift C6 / r^6 in MHz between sites i and j of the ideal grid."""
    n = chain.n_sites
    if not (0 <= i < n and 0 <= j < n):
        raise InvalidArgument(f"site index out of range: ({i}, {j})")
    if i == j:
        raise InvalidArgument("interaction needs two distinct sites")
    r = abs(i - j) * chain.spacing
    return chain.c6_between(i, j) / r**6


def interaction_matrix(chain: ChainSpec, positions: np.ndarray | None = None,
                       max_range: int | None = None) -> np.ndarray:
    """Symmetric matrix of pair shifts (MHz); zero diagonal.

    ``positions`` lets callers pass perturbed coordinates; ``max_range`` drops
    couplings between sites further apart than that many lattice steps.
    """
    pos = chain.positions() if positions is None else np.asarray(positions, dtype=float)
    n = chain.n_sites
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            if max_range is not None and j - i > max_range:
                continue
            r = np.linalg.norm(pos[i] - pos[j])
            out[i, j] = out[j, i] = chain.c6_between(i, j) / r**6
    return out


def chain_from_dict(block: Mapping) -> ChainSpec:
    """Build a chain from a config block.

    Accepted keys: n_sites, spacing_um, first_species or pattern, c6 (pair -> value).
    """
    try:
        spacing = float(block.get("spacing_um", NN_SPACING_UM))
        c6 = block.get("c6", {})
        if "pattern" in block:
            pattern = tuple(str(block["pattern"]))
            n = int(block.get("n_sites", len(pattern)))
            return ChainSpec(n, spacing, pattern, c6)
        return build_alternating_chain(int(block["n_sites"]), spacing,
                                       str(block.get("first_species", "A")), c6)
    except KeyError as exc:
        raise InvalidArgument(f"chain block missing key {exc}") from None
