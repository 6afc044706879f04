"""Restricted SMILES parsing and categorical featurization.

Supported: organic-subset atoms (aliphatic and aromatic), bracket atoms with
hydrogen count and charge, branches, ring-bond digits (``1``-``9`` and
``%nn``) and the bond symbols ``- = # :``. Stereo markers, multi-fragment
input and the rest of the SMILES grammar are rejected explicitly.
"""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import (
    SmilesSyntaxError,
    UnbalancedParenthesis,
    UnclosedRing,
    UnknownToken,
    UnsupportedFeature,
)


class BondOrder(enum.IntEnum):
    SINGLE = 0
    DOUBLE = 1
    TRIPLE = 2
    AROMATIC = 3


BOND_SYMBOLS = {"-": BondOrder.SINGLE, "=": BondOrder.DOUBLE, "#": BondOrder.TRIPLE, ":": BondOrder.AROMATIC}
_BOND_TO_SYMBOL = {v: k for k, v in BOND_SYMBOLS.items()}

ORGANIC_SUBSET = {"B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I"}
AROMATIC_ORGANIC = {"b", "c", "n", "o", "p", "s"}
AROMATIC_BRACKET = AROMATIC_ORGANIC | {"se", "as", "te"}

ELEMENTS = frozenset("""
H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni Cu
Zn Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe Cs
Ba La Ce Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt Au Hg Tl
Pb Bi Po At Rn Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm Md No Lr Rf Db Sg Bh
Hs Mt Ds Rg Cn Nh Fl Mc Lv Ts Og
""".split())

ELEMENT_VOCAB = ("H", "C", "N", "O", "F", "P", "S", "Cl", "Br", "I")
OTHER_ELEMENT = len(ELEMENT_VOCAB)
N_ELEMENT_CLASSES = OTHER_ELEMENT + 1
MAX_DEGREE = 6
N_DEGREE_CLASSES = MAX_DEGREE + 1
N_BOND_CLASSES = len(BondOrder)


class Atom(NamedTuple):
    element: str  # capitalised symbol, e.g. "C" for both C and c
    aromatic: bool = False
    charge: int = 0


class Bond(NamedTuple):
    begin: int
    end: int
    order: BondOrder


@dataclass(frozen=True)
class MolecularGraph:
    atoms: tuple[Atom, ...]
    bonds: tuple[Bond, ...]

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def n_bonds(self) -> int:
        return len(self.bonds)

    def degrees(self) -> list[int]:
        deg = [0] * len(self.atoms)
        for b in self.bonds:
            deg[b.begin] += 1
            deg[b.end] += 1
        return deg


@dataclass(frozen=True)
class FeaturizedMolecule:
    """Categorical atom/bond indices ready for embedding lookup."""

    element_ids: np.ndarray      # (n_atoms,) int
    degree_ids: np.ndarray       # (n_atoms,) int, capped at MAX_DEGREE
    edge_index: np.ndarray       # (n_bonds, 2) int, one row per unordered pair
    bond_ids: np.ndarray         # (n_bonds,) int

    @property
    def n_atoms(self) -> int:
        return int(self.element_ids.shape[0])

    @property
    def n_bonds(self) -> int:
        return int(self.bond_ids.shape[0])


_BRACKET_RE = re.compile(
    r"^(?P<isotope>\d+)?"
    r"(?P<symbol>[A-Z][a-z]?|[a-z][a-z]?)"
    r"(?P<chiral>@+)?"
    r"(?P<hcount>H\d*)?"
    r"(?P<charge>[+-]+\d*)?"
    r"(?P<cls>:\d+)?$"
)


def _parse_bracket(body: str, smiles: str, pos: int) -> Atom:
    if "@" in body:
        raise UnsupportedFeature("chirality markers are not supported", smiles, pos)
    m = _BRACKET_RE.match(body)
    if m is None:
        raise UnknownToken(f"cannot parse bracket atom [{body}]", smiles, pos)
    if m.group("isotope"):
        raise UnsupportedFeature("isotopes are not supported", smiles, pos)
    if m.group("cls"):
        raise UnsupportedFeature("atom classes are not supported", smiles, pos)
    symbol = m.group("symbol")
    if symbol[0].islower():
        if symbol not in AROMATIC_BRACKET:
            raise UnknownToken(f"unknown aromatic atom [{body}]", smiles, pos)
        element, aromatic = symbol.capitalize(), True
    else:
        if symbol not in ELEMENTS:
            raise UnknownToken(f"unknown element {symbol!r}", smiles, pos)
        element, aromatic = symbol, False
    charge = 0
    text = m.group("charge")
    if text:
        sign = 1 if text[0] == "+" else -1
        signs = text.rstrip("0123456789")
        digits = text[len(signs):]
        if len(set(signs)) != 1 or (digits and len(signs) != 1):
            raise UnknownToken(f"malformed charge {text!r}", smiles, pos)
        charge = sign * (int(digits) if digits else len(signs))
    return Atom(element, aromatic, charge)


def parse_smiles(s: str) -> MolecularGraph:
    """Parse a single-fragment SMILES string into a :class:`MolecularGraph`."""
    if not isinstance(s, str) or not s:
        raise SmilesSyntaxError("SMILES must be a non-empty string", s, 0)
    if not s.isascii():
        raise UnknownToken("non-ASCII character", s, 0)

    atoms: list[Atom] = []
    bonds: list[Bond] = []
    bonded: set[tuple[int, int]] = set()
    branch_stack: list[tuple[int, int]] = []  # (anchor atom, '(' position)
    open_rings: dict[int, tuple[int, BondOrder | None, int]] = {}
    prev: int | None = None
    pending: BondOrder | None = None
    pending_pos = 0
    branch_empty = False

    def connect(a: int, b: int, order: BondOrder | None, pos: int):
        if a == b:
            raise SmilesSyntaxError("atom bonded to itself", s, pos)
        key = (min(a, b), max(a, b))
        if key in bonded:
            raise SmilesSyntaxError("duplicate bond between the same atoms", s, pos)
        if order is None:
            both_aromatic = atoms[a].aromatic and atoms[b].aromatic
            order = BondOrder.AROMATIC if both_aromatic else BondOrder.SINGLE
        bonded.add(key)
        bonds.append(Bond(a, b, order))

    def add_atom(atom: Atom, pos: int):
        nonlocal prev, pending, branch_empty
        idx = len(atoms)
        atoms.append(atom)
        if prev is not None:
            connect(prev, idx, pending, pos)
        elif pending is not None:
            raise SmilesSyntaxError("bond symbol before the first atom", s, pending_pos)
        prev = idx
        pending = None
        branch_empty = False

    i, n = 0, len(s)
    while i < n:
        c = s[i]
        if c == "[":
            j = s.find("]", i + 1)
            if j < 0:
                raise UnknownToken("unterminated bracket atom", s, i)
            add_atom(_parse_bracket(s[i + 1:j], s, i), i)
            i = j + 1
        elif c in "BCNOPSFI":
            if s.startswith("Cl", i) or s.startswith("Br", i):
                add_atom(Atom(s[i:i + 2]), i)
                i += 2
            else:
                add_atom(Atom(c), i)
                i += 1
        elif c in AROMATIC_ORGANIC:
            add_atom(Atom(c.upper(), True), i)
            i += 1
        elif c in BOND_SYMBOLS:
            if pending is not None:
                raise SmilesSyntaxError("two consecutive bond symbols", s, i)
            if prev is None:
                raise SmilesSyntaxError("bond symbol before the first atom", s, i)
            pending, pending_pos = BOND_SYMBOLS[c], i
            i += 1
        elif c == "(":
            if prev is None:
                raise SmilesSyntaxError("branch before the first atom", s, i)
            if pending is not None:
                raise SmilesSyntaxError("bond symbol before a branch", s, i)
            branch_stack.append((prev, i))
            branch_empty = True
            i += 1
        elif c == ")":
            if not branch_stack:
                raise UnbalancedParenthesis("')' without matching '('", s, i)
            if branch_empty:
                raise SmilesSyntaxError("empty branch", s, i)
            if pending is not None:
                raise SmilesSyntaxError("dangling bond at end of branch", s, pending_pos)
            prev, _ = branch_stack.pop()
            i += 1
        elif c.isdigit() or c == "%":
            if c == "%":
                digits = s[i + 1:i + 3]
                if len(digits) != 2 or not digits.isdigit():
                    raise UnknownToken("'%' must be followed by two digits", s, i)
                ring, width = int(digits), 3
            else:
                ring, width = int(c), 1
            if prev is None:
                raise SmilesSyntaxError("ring bond before the first atom", s, i)
            if ring in open_rings:
                start, order, _ = open_rings.pop(ring)
                if order is not None and pending is not None and order != pending:
                    raise SmilesSyntaxError("conflicting ring-closure bond symbols", s, i)
                connect(prev, start, pending if pending is not None else order, i)
            else:
                open_rings[ring] = (prev, pending, i)
            pending = None
            i += width
        elif c in "/\\":
            raise UnsupportedFeature("directional (cis/trans) bonds are not supported", s, i)
        elif c == ".":
            raise UnsupportedFeature("multi-fragment SMILES are not supported", s, i)
        elif c in "*$@":
            raise UnsupportedFeature(f"{c!r} is not supported", s, i)
        else:
            raise UnknownToken(f"unexpected character {c!r}", s, i)

    if branch_stack:
        raise UnbalancedParenthesis("'(' never closed", s, branch_stack[-1][1])
    if open_rings:
        ring, (_, _, pos) = next(iter(open_rings.items()))
        raise UnclosedRing(f"ring bond {ring} never closed", s, pos)
    if pending is not None:
        raise SmilesSyntaxError("dangling bond at end of input", s, pending_pos)
    return MolecularGraph(tuple(atoms), tuple(bonds))


def featurize(g: MolecularGraph) -> FeaturizedMolecule:
    lookup = {sym: k for k, sym in enumerate(ELEMENT_VOCAB)}
    element_ids = np.array([lookup.get(a.element, OTHER_ELEMENT) for a in g.atoms], dtype=np.intp)
    degree_ids = np.minimum(np.array(g.degrees(), dtype=np.intp), MAX_DEGREE)
    if g.bonds:
        edge_index = np.array([(b.begin, b.end) for b in g.bonds], dtype=np.intp)
        bond_ids = np.array([int(b.order) for b in g.bonds], dtype=np.intp)
    else:
        edge_index = np.zeros((0, 2), dtype=np.intp)
        bond_ids = np.zeros(0, dtype=np.intp)
    return FeaturizedMolecule(element_ids, degree_ids, edge_index, bond_ids)


def _atom_token(atom: Atom) -> str:
    symbol = atom.element.lower() if atom.aromatic else atom.element
    if atom.charge == 0:
        return f"[{symbol}]"
    sign = "+" if atom.charge > 0 else "-"
    mag = abs(atom.charge)
    return f"[{symbol}{sign}{mag if mag > 1 else ''}]"


def _ring_label(k: int) -> str:
    return str(k) if k < 10 else f"%{k:02d}"


def to_smiles(g: MolecularGraph) -> str:
    """Debug serializer: every atom bracketed, every bond symbol explicit.

    Not canonical; re-parsing the output reproduces the same atoms and bonds
    up to a relabelling of atom indices.
    """
    if not g.atoms:
        return ""
    adj: list[list[tuple[int, BondOrder]]] = [[] for _ in g.atoms]
    for b in g.bonds:
        adj[b.begin].append((b.end, b.order))
        adj[b.end].append((b.begin, b.order))

    # DFS spanning tree; non-tree bonds become ring closures
    visited = [False] * len(g.atoms)
    tree_children: list[list[tuple[int, BondOrder]]] = [[] for _ in g.atoms]
    order_seen: list[int] = []
    tree_edges = set()
    stack = [(0, None, None)]
    while stack:
        node, parent, bo = stack.pop()
        if visited[node]:
            continue
        visited[node] = True
        order_seen.append(node)
        if parent is not None:
            tree_children[parent].append((node, bo))
            tree_edges.add((min(node, parent), max(node, parent)))
        for nb, nbo in reversed(adj[node]):
            if not visited[nb]:
                stack.append((nb, node, nbo))
    if not all(visited):
        raise ValueError("to_smiles requires a connected graph")

    ring_open: dict[int, list[tuple[int, BondOrder]]] = {i: [] for i in range(len(g.atoms))}
    ring_close: dict[int, list[tuple[int, BondOrder]]] = {i: [] for i in range(len(g.atoms))}
    rank = {node: k for k, node in enumerate(order_seen)}
    label = 0
    for b in g.bonds:
        key = (min(b.begin, b.end), max(b.begin, b.end))
        if key in tree_edges:
            continue
        first, second = sorted((b.begin, b.end), key=rank.__getitem__)
        label += 1
        if label > 99:
            raise ValueError("to_smiles supports at most 99 ring closures")
        ring_open[first].append((label, b.order))
        ring_close[second].append((label, b.order))

    out: list[str] = []

    def emit(node: int):
        out.append(_atom_token(g.atoms[node]))
        for lab, bo in ring_close[node]:
            out.append(_BOND_TO_SYMBOL[bo] + _ring_label(lab))
        for lab, bo in ring_open[node]:
            out.append(_BOND_TO_SYMBOL[bo] + _ring_label(lab))
        kids = tree_children[node]
        for k, (child, bo) in enumerate(kids):
            last = k == len(kids) - 1
            if not last:
                out.append("(")
            out.append(_BOND_TO_SYMBOL[bo])
            emit(child)
            if not last:
                out.append(")")

    emit(order_seen[0])
    return "".join(out)
