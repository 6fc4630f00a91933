"""A practical SMILES subset parser and a fixed atom/bond featurizer.

Aromaticity is syntactic (lowercase atoms, ``:`` bonds); there is no
kekulization, canonicalization or stereo handling. Dot-separated components
stay in one disconnected graph.

Node features (width 28): element one-hot (B C N O P S F Cl Br I other),
degree 0-5, formal charge -2..2 (clipped), aromatic flag, hydrogen count 0-4.
Edge features (width 5): bond order one-hot (single, double, triple,
aromatic) and an in-ring flag.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParseError
from .graph import MolecularGraph

ELEMENTS = ("B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I")
DEFAULT_VALENCE = {"B": 3, "C": 4, "N": 3, "O": 2, "P": 3, "S": 2,
                   "F": 1, "Cl": 1, "Br": 1, "I": 1}
BOND_ORDERS = ("single", "double", "triple", "aromatic")
NODE_WIDTH = len(ELEMENTS) + 1 + 6 + 5 + 1 + 5
EDGE_WIDTH = len(BOND_ORDERS) + 1

_PERIODIC = (
    "H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni Cu Zn "
    "Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe Cs Ba La Ce "
    "Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt Au Hg Tl Pb Bi Po At Rn "
    "Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm Md No Lr Rf Db Sg Bh Hs Mt Ds Rg Cn Nh Fl "
    "Mc Lv Ts Og"
).split()
_PERIODIC_SET = frozenset(_PERIODIC)
_ORGANIC = ("Cl", "Br", "B", "C", "N", "O", "P", "S", "F", "I")
_AROMATIC_ORGANIC = ("b", "c", "n", "o", "p", "s")
_AROMATIC_BRACKET = ("se", "as", "te", "b", "c", "n", "o", "p", "s")
_BOND_SYMBOLS = {"-": "single", "/": "single", "\\": "single",
                 "=": "double", "#": "triple", ":": "aromatic"}
_ORDER_VALUE = {"single": 1.0, "double": 2.0, "triple": 3.0, "aromatic": 1.5}


@dataclass
class Atom:
    element: str
    aromatic: bool = False
    charge: int = 0
    explicit_h: int | None = None
    degree: int = 0

    @property
    def feature_element(self):
        return self.element if self.element in DEFAULT_VALENCE else "other"


@dataclass
class Bond:
    begin: int
    end: int
    order: str
    implicit: bool = False


class _Parser:
    def __init__(self, text):
        self.s = text
        self.i = 0
        self.atoms = []
        self.bonds = []
        self.pairs = set()

    def fail(self, message, offset=None):
        raise ParseError(message, self.i if offset is None else offset)

    def parse(self):
        s = self.s
        prev = None
        pending = None  # (bond symbol, offset)
        branches = []
        rings = {}
        while self.i < len(s):
            ch = s[self.i]
            if ch == "(":
                if prev is None:
                    self.fail("branch opened without a preceding atom")
                if pending is not None:
                    self.fail("bond symbol before a branch", pending[1])
                branches.append((prev, self.i))
                self.i += 1
            elif ch == ")":
                if not branches:
                    self.fail("unbalanced ')'")
                if pending is not None:
                    self.fail("bond to nonexistent atom", self.i)
                prev = branches.pop()[0]
                self.i += 1
            elif ch in _BOND_SYMBOLS:
                if pending is not None:
                    self.fail("two consecutive bond symbols")
                if prev is None:
                    self.fail("bond to nonexistent atom")
                pending = (ch, self.i)
                self.i += 1
            elif ch == ".":
                if pending is not None:
                    self.fail("bond to nonexistent atom", pending[1])
                if prev is None:
                    self.fail("empty component")
                prev = None
                self.i += 1
            elif ch.isdigit() or ch == "%":
                start = self.i
                if ch == "%":
                    digits = s[self.i + 1:self.i + 3]
                    if len(digits) != 2 or not digits.isdigit():
                        self.fail("'%' must be followed by two digits")
                    number = int(digits)
                    self.i += 3
                else:
                    number = int(ch)
                    self.i += 1
                if prev is None:
                    self.fail("ring closure without an atom", start)
                symbol = pending[0] if pending else None
                pending = None
                if number in rings:
                    other, other_symbol, other_offset = rings.pop(number)
                    if symbol and other_symbol and _BOND_SYMBOLS[symbol] != _BOND_SYMBOLS[other_symbol]:
                        self.fail(f"conflicting bond orders on ring closure {number}", start)
                    self.add_bond(other, prev, symbol or other_symbol, start)
                else:
                    rings[number] = (prev, symbol, start)
            else:
                atom = self.read_atom()
                idx = len(self.atoms)
                self.atoms.append(atom)
                if prev is not None:
                    self.add_bond(prev, idx, pending[0] if pending else None, self.i)
                pending = None
                prev = idx
        if pending is not None:
            self.fail("bond to nonexistent atom", len(s))
        if branches:
            self.fail("unclosed branch", len(s))
        if rings:
            number, (_, _, offset) = min(rings.items(), key=lambda kv: kv[1][2])
            self.fail(f"unmatched ring-closure index {number}", offset)
        if not self.atoms:
            self.fail("no atoms", 0)
        return self.atoms, self.bonds

    def add_bond(self, a, b, symbol, offset):
        if a == b:
            self.fail("atom bonded to itself", offset)
        key = (min(a, b), max(a, b))
        if key in self.pairs:
            self.fail("duplicate bond between the same atoms", offset)
        self.pairs.add(key)
        if symbol is None:
            both = self.atoms[a].aromatic and self.atoms[b].aromatic
            self.bonds.append(Bond(a, b, "aromatic" if both else "single", implicit=True))
        else:
            self.bonds.append(Bond(a, b, _BOND_SYMBOLS[symbol]))

    def read_atom(self):
        s = self.s
        ch = s[self.i]
        if ch == "[":
            return self.read_bracket()
        if ch == "*":
            self.i += 1
            return Atom("*", explicit_h=0)
        for sym in _ORGANIC:
            if s.startswith(sym, self.i):
                self.i += len(sym)
                return Atom(sym)
        if ch in _AROMATIC_ORGANIC:
            self.i += 1
            return Atom(ch.upper(), aromatic=True)
        self.fail(f"unknown atom token {ch!r}")

    def read_bracket(self):
        s = self.s
        start = self.i
        close = s.find("]", start)
        if close < 0:
            self.fail("unclosed '['", start)
        body = s[start + 1:close]
        j = 0
        while j < len(body) and body[j].isdigit():
            j += 1  # isotope, discarded
        aromatic = False
        element = None
        if body[j:j + 1] == "*":
            element = "*"
            j += 1
        else:
            for sym in _AROMATIC_BRACKET:
                if body.startswith(sym, j):
                    element, aromatic = sym.capitalize(), True
                    j += len(sym)
                    break
            if element is None:
                two, one = body[j:j + 2], body[j:j + 1]
                if len(two) == 2 and two[1].islower() and two in _PERIODIC_SET:
                    element = two
                elif one in _PERIODIC_SET:
                    element = one
                else:
                    self.fail(f"unknown atom token [{body}]", start)
                j += len(element)
        while j < len(body) and body[j] == "@":
            j += 1
            while j < len(body) and body[j].isalnum() and body[j] != "H":
                j += 1
        h = 0
        if body[j:j + 1] == "H":
            j += 1
            k = j
            while j < len(body) and body[j].isdigit():
                j += 1
            h = int(body[k:j]) if j > k else 1
        charge = 0
        if body[j:j + 1] in ("+", "-"):
            sign = 1 if body[j] == "+" else -1
            j += 1
            k = j
            while j < len(body) and body[j].isdigit():
                j += 1
            if j > k:
                charge = sign * int(body[k:j])
            else:
                charge = sign
                while j < len(body) and body[j] == body[j - 1]:
                    charge += sign
                    j += 1
        if body[j:j + 1] == ":":
            j += 1
            k = j
            while j < len(body) and body[j].isdigit():
                j += 1
            if j == k:
                self.fail("atom class needs digits", start + 1 + j)
        if j != len(body):
            self.fail(f"unexpected {body[j]!r} inside bracket atom", start + 1 + j)
        if not -4 <= charge <= 4:
            self.fail(f"charge {charge} outside [-4, 4]", start)
        self.i = close + 1
        return Atom(element, aromatic=aromatic, charge=charge, explicit_h=h)


def _bridges(n, bonds):
    """Indices of bonds whose removal disconnects the graph (iterative Tarjan)."""
    adj = [[] for _ in range(n)]
    for k, b in enumerate(bonds):
        adj[b.begin].append((b.end, k))
        adj[b.end].append((b.begin, k))
    disc = [-1] * n
    low = [0] * n
    timer = 0
    found = set()
    for root in range(n):
        if disc[root] >= 0:
            continue
        disc[root] = low[root] = timer
        timer += 1
        stack = [(root, -1, iter(adj[root]))]
        while stack:
            v, via, it = stack[-1]
            advanced = False
            for w, k in it:
                if k == via:
                    continue
                if disc[w] < 0:
                    disc[w] = low[w] = timer
                    timer += 1
                    stack.append((w, k, iter(adj[w])))
                    advanced = True
                    break
                low[v] = min(low[v], disc[w])
            if advanced:
                continue
            stack.pop()
            if stack:
                parent = stack[-1][0]
                low[parent] = min(low[parent], low[v])
                if low[v] > disc[parent]:
                    found.add(via)
    return found


def parse_smiles(text):
    """Parse a SMILES string into an (unfeaturized) :class:`MolecularGraph`."""
    if not isinstance(text, str) or not text.strip():
        raise ParseError("empty SMILES string", 0)
    atoms, bonds = _Parser(text.strip()).parse()
    bridges = _bridges(len(atoms), bonds)
    ring = [k not in bridges for k in range(len(bonds))]
    for k, b in enumerate(bonds):
        # an unmarked bond between aromatic atoms is aromatic only inside a ring
        if b.implicit and b.order == "aromatic" and not ring[k]:
            b.order = "single"
        atoms[b.begin].degree += 1
        atoms[b.end].degree += 1
    edges = [(b.begin, b.end, np.zeros(EDGE_WIDTH)) for b in bonds]
    g = MolecularGraph.from_undirected(np.zeros((len(atoms), NODE_WIDTH)), edges, EDGE_WIDTH, id=text)
    g.atoms = atoms
    g.bonds = bonds
    g.edge_features[:, -1] = np.repeat(np.array(ring, dtype=np.float64), 2)
    return g


def hydrogen_count(atom, bond_order_sum):
    if atom.explicit_h is not None:
        return atom.explicit_h
    valence = DEFAULT_VALENCE.get(atom.element)
    if valence is None:
        return 0
    return max(0, valence - math.floor(bond_order_sum) - abs(atom.charge))


def featurize(g):
    """Fill node and edge feature matrices in place and return ``g``."""
    order_sum = [0.0] * len(g.atoms)
    for b in g.bonds:
        order_sum[b.begin] += _ORDER_VALUE[b.order]
        order_sum[b.end] += _ORDER_VALUE[b.order]
    X = np.zeros((len(g.atoms), NODE_WIDTH))
    for v, atom in enumerate(g.atoms):
        col = ELEMENTS.index(atom.feature_element) if atom.feature_element in ELEMENTS else len(ELEMENTS)
        X[v, col] = 1.0
        off = len(ELEMENTS) + 1
        X[v, off + min(atom.degree, 5)] = 1.0
        off += 6
        X[v, off + min(max(atom.charge, -2), 2) + 2] = 1.0
        off += 5
        X[v, off] = float(atom.aromatic)
        off += 1
        X[v, off + min(hydrogen_count(atom, order_sum[v]), 4)] = 1.0
    g.node_features = X
    for k, b in enumerate(g.bonds):
        onehot = np.zeros(len(BOND_ORDERS))
        onehot[BOND_ORDERS.index(b.order)] = 1.0
        g.edge_features[2 * k, :4] = onehot
        g.edge_features[2 * k + 1, :4] = onehot
    return g


def smiles_to_graph(text, label=None):
    g = featurize(parse_smiles(text))
    g.label = label
    return g
