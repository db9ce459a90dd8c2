"""Small arithmetic grammar for scenario densities and potentials.

Expressions are plain text over the coordinates x1 (and x2 in 2D), the
constant pi, the operators + - * / ^ with unary sign, and the functions
exp, cos, sin, abs.  Parsing walks the Python ast and rejects anything
outside that whitelist by naming the offending token, so scenario files
can never smuggle in arbitrary code.  The accepted tree is rebuilt as a
sympy expression, which supplies both a vectorized evaluator and exact
gradients for potential drifts.
"""

from __future__ import annotations

import ast

import numpy as np
import sympy

from .core import ExpressionError

__all__ = ["ScalarExpression", "parse_expression"]

_FUNCTIONS = {
    "exp": sympy.exp,
    "cos": sympy.cos,
    "sin": sympy.sin,
    "abs": sympy.Abs,
}

_BINARY = {
    ast.Add: lambda a, b: a + b,
    ast.Sub: lambda a, b: a - b,
    ast.Mult: lambda a, b: a * b,
    ast.Div: lambda a, b: a / b,
    ast.Pow: lambda a, b: a**b,
}

_OP_NAMES = {
    ast.BitXor: "^",
    ast.Mod: "%",
    ast.FloorDiv: "//",
    ast.MatMult: "@",
    ast.LShift: "<<",
    ast.RShift: ">>",
    ast.BitOr: "|",
    ast.BitAnd: "&",
}


class ScalarExpression:
    """Parsed expression over box coordinates with exact derivatives.

    Parameters
    ----------
    text : str
        Source in the scenario grammar.
    dim : int
        Number of coordinates in scope: 1 allows x1, 2 allows x1 and x2.
    """

    def __init__(self, text: str, dim: int):
        if dim not in (1, 2):
            raise ExpressionError(f"dim must be 1 or 2, got {dim}")
        self.text = text
        self.dim = dim
        self.symbols = tuple(sympy.Symbol(f"x{k + 1}") for k in range(dim))
        # caret is the grammar's power operator; Python's ^ has XOR
        # precedence, so rewrite before parsing to get power binding
        source = text.replace("^", "**")
        try:
            tree = ast.parse(source, mode="eval")
        except SyntaxError as exc:
            raise ExpressionError(f"could not parse {text!r}: {exc.msg}")
        self.expr = self._convert(tree.body)
        self._fn = sympy.lambdify(self.symbols, self.expr, modules="numpy")

    def _convert(self, node):
        if isinstance(node, ast.Constant):
            if isinstance(node.value, (int, float)) and not isinstance(
                    node.value, bool):
                return sympy.Float(node.value) if isinstance(node.value, float) \
                    else sympy.Integer(node.value)
            raise ExpressionError(f"constant {node.value!r} not allowed")
        if isinstance(node, ast.Name):
            if node.id in ("pi", "π"):
                return sympy.pi
            for sym in self.symbols:
                if node.id == sym.name:
                    return sym
            raise ExpressionError(f"unknown symbol {node.id!r}")
        if isinstance(node, ast.BinOp):
            op = _BINARY.get(type(node.op))
            if op is None:
                name = _OP_NAMES.get(type(node.op), type(node.op).__name__)
                raise ExpressionError(f"operator {name!r} not allowed")
            return op(self._convert(node.left), self._convert(node.right))
        if isinstance(node, ast.UnaryOp):
            if isinstance(node.op, ast.USub):
                return -self._convert(node.operand)
            if isinstance(node.op, ast.UAdd):
                return self._convert(node.operand)
            raise ExpressionError(
                f"operator {type(node.op).__name__!r} not allowed")
        if isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name):
                raise ExpressionError("only plain function names may be called")
            if node.func.id not in _FUNCTIONS:
                raise ExpressionError(f"unknown function {node.func.id!r}")
            if len(node.args) != 1 or node.keywords:
                raise ExpressionError(
                    f"{node.func.id} takes exactly one positional argument")
            return _FUNCTIONS[node.func.id](self._convert(node.args[0]))
        raise ExpressionError(
            f"syntax element {type(node).__name__!r} not allowed")

    def evaluate(self, *coords) -> np.ndarray:
        """Evaluate on coordinate arrays, one per axis, with broadcasting."""
        if len(coords) != self.dim:
            raise ExpressionError(
                f"expected {self.dim} coordinate arrays, got {len(coords)}")
        arrays = [np.asarray(c, dtype=float) for c in coords]
        shape = np.broadcast_shapes(*(a.shape for a in arrays))
        with np.errstate(all="ignore"):
            out = self._fn(*arrays)
        return np.broadcast_to(np.asarray(out, dtype=float), shape).copy()

    __call__ = evaluate

    def gradient(self):
        """Partial-derivative evaluators, one per coordinate."""
        fns = [sympy.lambdify(self.symbols, sympy.diff(self.expr, sym),
                              modules="numpy")
               for sym in self.symbols]

        def make(fn):
            def partial(*coords):
                arrays = [np.asarray(c, dtype=float) for c in coords]
                shape = np.broadcast_shapes(*(a.shape for a in arrays))
                with np.errstate(all="ignore"):
                    out = fn(*arrays)
                return np.broadcast_to(np.asarray(out, dtype=float),
                                       shape).copy()
            return partial

        return tuple(make(fn) for fn in fns)


def parse_expression(text: str, dim: int) -> ScalarExpression:
    """Parse text in the scenario grammar; raises ExpressionError."""
    if not isinstance(text, str) or not text.strip():
        raise ExpressionError("expression must be a nonempty string")
    return ScalarExpression(text, dim)
