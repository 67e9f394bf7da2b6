"""Dense tensors with tape-based reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array (float32 for training, float64 for gradient
checking). Primitive operations optionally record themselves on the active
``Tape``; ``backward`` replays the tape in exact reverse order to accumulate
vector-Jacobian products. There is no batch axis anywhere: 4-d activations are
ordered (feature, depth, height, width) and training works on one patch at a
time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import ContractViolationError, DomainError, NumericError, ShapeError

DEFAULT_DTYPE = np.float32

Scalar = Union[int, float]


class Tensor:
    """Dense n-dimensional array, row-major, immutable through the public API."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolationError(
                f"item() requires a single-element tensor, got shape {self.shape}"
            )
        return float(self.data.reshape(-1)[0])

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"

    # arithmetic sugar; all routed through the primitive ops below
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def zeros(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))

def ones(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype))

def full(shape, value, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype))


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

# (input tensor, vector-Jacobian product taking the output adjoint)
Pull = tuple[Tensor, Callable[[np.ndarray], np.ndarray]]

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of primitive operations applied to tracked tensors.

    Used as a context manager: operations executed inside the ``with`` block
    whose inputs require gradients are recorded. Replaying the records in
    reverse order (``backward``) yields gradients for every watched leaf.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Pull, ...]]] = []
        self._watched: list[Tensor] = []
        self._output_ids: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False

    def watch(self, *tensors: Tensor) -> None:
        """Mark leaves whose gradients backward() must report."""
        for t in tensors:
            t.requires_grad = True
            if not any(w is t for w in self._watched):
                self._watched.append(t)

    def record(self, out: Tensor, pulls: Sequence[Pull]) -> None:
        self._records.append((out, tuple(pulls)))
        self._output_ids.add(id(out))

    @property
    def num_records(self) -> int:
        return len(self._records)


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def trace(out: Tensor, pulls: Sequence[Pull]) -> Tensor:
    """Record ``out`` on the active tape if any input is tracked.

    Every differentiable primitive (here and in :mod:`voxelseg.layers`) funnels
    through this helper so the recording policy lives in one place.
    """
    tracked = [(t, fn) for t, fn in pulls if t.requires_grad]
    if tracked:
        out.requires_grad = True
        tape = active_tape()
        if tape is not None:
            tape.record(out, tracked)
    return out


def backward(loss: Tensor, tape: Tape) -> dict[Tensor, Tensor]:
    """Gradients of a scalar loss for every watched leaf of the tape.

    Records are replayed in exact reverse order of recording; adjoints are
    accumulated in a fixed order, so repeated calls on the same tape are
    bit-identical. Watched leaves the loss never touched get zero gradients.
    """
    if loss.data.size != 1:
        raise ContractViolationError(
            f"backward needs a scalar loss, got shape {loss.shape}"
        )
    watched = any(w is loss for w in tape._watched)
    if id(loss) not in tape._output_ids and not watched:
        raise ContractViolationError("loss was not produced through this tape")

    grads: dict[int, np.ndarray] = {
        id(loss): np.ones_like(loss.data)
    }
    for out, pulls in reversed(tape._records):
        g = grads.get(id(out))
        if g is None:
            continue
        for inp, vjp in pulls:
            contribution = vjp(g)
            slot = grads.get(id(inp))
            if slot is None:
                grads[id(inp)] = contribution
            else:
                grads[id(inp)] = slot + contribution

    result: dict[Tensor, Tensor] = {}
    for leaf in tape._watched:
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros_like(leaf.data)
        result[leaf] = Tensor(np.asarray(g, dtype=leaf.data.dtype))
    return result


# ---------------------------------------------------------------------------
# Elementwise primitives
# ---------------------------------------------------------------------------

def _as_operands(a: Tensor, b) -> tuple[Tensor, Optional[Tensor], Optional[float]]:
    """Split a binary op's right operand into tensor-or-scalar form."""
    if isinstance(b, Tensor):
        if b.data.shape == ():
            return a, b, None
        if b.data.shape != a.data.shape:
            raise ShapeError(
                f"operand shapes differ: {a.data.shape} vs {b.data.shape} "
                "(only scalar broadcasting is supported)"
            )
        return a, b, None
    return a, None, float(b)


def _sum_if_scalar(g: np.ndarray, ref: Tensor) -> np.ndarray:
    if ref.data.shape == () and g.shape != ():
        return np.asarray(g.sum(), dtype=g.dtype)
    return g


def add(a: Tensor, b) -> Tensor:
    a, bt, bs = _as_operands(a, b)
    if bt is None:
        out = Tensor(a.data + bs)
        return trace(out, [(a, lambda g: g)])
    out = Tensor(a.data + bt.data)
    return trace(out, [(a, lambda g: g), (bt, lambda g: _sum_if_scalar(g, bt))])


def sub(a: Tensor, b) -> Tensor:
    a, bt, bs = _as_operands(a, b)
    if bt is None:
        out = Tensor(a.data - bs)
        return trace(out, [(a, lambda g: g)])
    out = Tensor(a.data - bt.data)
    return trace(out, [(a, lambda g: g), (bt, lambda g: _sum_if_scalar(-g, bt))])


def mul(a: Tensor, b) -> Tensor:
    """Hadamard product (or scalar scaling when b is a scalar)."""
    a, bt, bs = _as_operands(a, b)
    if bt is None:
        return scale(a, bs)
    out = Tensor(a.data * bt.data)
    return trace(
        out,
        [
            (a, lambda g: g * bt.data),
            (bt, lambda g: _sum_if_scalar(g * a.data, bt)),
        ],
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * a.data.dtype.type(c))
    return trace(out, [(a, lambda g: g * c)])


def texp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    out = Tensor(out_data)
    return trace(out, [(a, lambda g: g * out_data)])


def tlog(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        bad = np.unravel_index(int(np.argmax(a.data <= 0)), a.data.shape)
        raise DomainError(f"log of non-positive value at coordinate {bad}")
    out = Tensor(np.log(a.data))
    return trace(out, [(a, lambda g: g / a.data)])


def max0(a: Tensor) -> Tensor:
    """Rectifier max(0, x); the subgradient at exactly 0 is 0."""
    keep = a.data > 0
    out = Tensor(np.where(keep, a.data, a.data.dtype.type(0)))
    return trace(out, [(a, lambda g: g * keep)])


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "exp": lambda a, b=None: texp(a),
    "log": lambda a, b=None: tlog(a),
    "max0": lambda a, b=None: max0(a),
}


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Name-dispatched elementwise arithmetic; see the per-op functions."""
    if op not in _ELEMENTWISE:
        raise ContractViolationError(f"unknown elementwise op {op!r}")
    if op in ("add", "sub", "mul", "scale"):
        if b is None:
            raise ContractViolationError(f"{op} needs a second operand")
        return _ELEMENTWISE[op](a, b)
    return _ELEMENTWISE[op](a)


def reduce_sum(a: Tensor, axes: Optional[Iterable[int]] = None) -> Tensor:
    """Sum over the given axes (or all axes); gradient broadcasts ones back."""
    if axes is None:
        out = Tensor(np.asarray(a.data.sum(), dtype=a.data.dtype))

        def vjp_all(g: np.ndarray) -> np.ndarray:
            return np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=True)

        return trace(out, [(a, vjp_all)])

    if isinstance(axes, (int, np.integer)):
        axes = (int(axes),)
    axes = tuple(int(ax) for ax in axes)
    for ax in axes:
        if ax < -a.data.ndim or ax >= a.data.ndim:
            raise ContractViolationError(
                f"axis {ax} invalid for shape {a.data.shape}"
            )
    norm = tuple(sorted(ax % a.data.ndim for ax in axes))
    if len(set(norm)) != len(norm):
        raise ContractViolationError(f"duplicate axes in {axes}")
    out = Tensor(a.data.sum(axis=norm))
    kept_shape = tuple(
        1 if i in norm else n for i, n in enumerate(a.data.shape)
    )

    def vjp(g: np.ndarray) -> np.ndarray:
        return np.broadcast_to(g.reshape(kept_shape), a.data.shape).astype(
            a.data.dtype, copy=True
        )

    return trace(out, [(a, vjp)])


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Result of comparing tape gradients against central differences."""

    max_rel_error: float
    worst_coord: Optional[tuple]
    checked: int
    kinks: list = field(default_factory=list)

    def __str__(self) -> str:
        return (
            f"max_rel_error={self.max_rel_error:.3e} at {self.worst_coord} "
            f"({self.checked} coords checked, {len(self.kinks)} kinks skipped)"
        )


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckReport:
    """Max relative error between tape gradients of ``f`` and central differences.

    ``f`` maps a tensor to a scalar tensor and must be deterministic. The check
    runs coordinate by coordinate; pass ``coords`` to check a random subset on
    large inputs. Coordinates where the one-sided difference quotients disagree
    (non-differentiable kinks, e.g. max0 at exactly 0) are excluded from the
    maximum and reported instead.
    """
    if x.data.dtype != np.float64:
        raise ContractViolationError("finite_diff_check requires a float64 tensor")

    with Tape() as tape:
        tape.watch(x)
        y = f(x)
    if y.data.size != 1:
        raise ContractViolationError("f must return a scalar tensor")
    analytic = backward(y, tape)[x].data

    def evaluate(values: np.ndarray) -> float:
        out = f(Tensor(values, dtype=np.float64))
        return float(out.data.reshape(-1)[0])

    f0 = evaluate(x.data)
    if not np.isfinite(f0):
        raise NumericError("f is non-finite at the unperturbed point")

    all_coords = list(np.ndindex(*x.data.shape)) if x.data.ndim else [()]
    if coords is not None and coords < len(all_coords):
        rng = rng or np.random.default_rng(0)
        picked = rng.choice(len(all_coords), size=coords, replace=False)
        all_coords = [all_coords[i] for i in sorted(picked)]

    max_rel = 0.0
    worst = None
    kinks: list[tuple] = []
    for c in all_coords:
        perturbed = x.data.copy()
        perturbed[c] += eps
        fp = evaluate(perturbed)
        perturbed[c] -= 2 * eps
        fm = evaluate(perturbed)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"f is non-finite at perturbed coordinate {c}")
        forward = (fp - f0) / eps
        backward_q = (f0 - fm) / eps
        if abs(forward - backward_q) > 1e-2 * max(1.0, abs(forward), abs(backward_q)):
            kinks.append(c)
            continue
        numeric = (fp - fm) / (2 * eps)
        a = analytic[c]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        if rel > max_rel:
            max_rel = rel
            worst = c
    return GradCheckReport(
        max_rel_error=max_rel,
        worst_coord=worst,
        checked=len(all_coords) - len(kinks),
        kinks=kinks,
    )
