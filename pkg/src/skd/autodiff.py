"""Reverse-mode automatic differentiation over dense float64 arrays.

The engine is a define-by-run tape: every operation returns a new
:class:`Tensor` holding the forward value and a closure that maps the output
adjoint to input adjoints. Two derivative rules beyond the elementwise/matmul
basics are provided because the rest of the library depends on them:

* ``pinv`` — Moore-Penrose pseudo-inverse with the three-term differential
  d(A+) = -A+ dA A+ + A+ A+^T dA^T (I - A A+) + (I - A+ A) dA^T A+^T A+.
* ``eig`` — eigenvalues of a real square matrix, with the adjoint of each
  eigenvalue mapped back through the left/right eigenvector outer product
  divided by the normalizer u_i v_i. Eigenvector gradients are not provided.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError, StateError

# Relative singular-value cutoff for the pseudo-inverse: sigma_i <= tau * sigma_max
# is treated as zero. Matches the double-precision SVD noise floor.
PINV_CUTOFF = 1e-10

# Eigenvalue adjoints whose normalizer |u_i v_i| falls below this are skipped
# (clamping near a Jordan block would produce a meaningless direction).
EIG_SKIP_TOL = 1e-10


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` over broadcast axes so it matches `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A dense float64 array node on the differentiation tape.

    Values are validated finite at construction; NaN/Inf anywhere raises
    :class:`NumericError`. Tensors are immutable by convention: no op mutates
    `value`, so instances are safe to share across threads.
    """

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad=False, _parents=(), _backward=None):
        value = np.asarray(value, dtype=np.float64)
        # a single sum is one vectorized pass with no bool temporary; NaN and
        # Inf both propagate into it, so finiteness of the sum certifies the
        # whole array (float64 entries below ~1e300 cannot overflow a sum)
        if not np.isfinite(value.sum()):
            raise NumericError("tensor contains NaN or Inf")
        self.value = value
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self._parents = tuple(p for p in _parents if p.requires_grad) if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def _accum(self, g: np.ndarray) -> None:
        g = _unbroadcast(np.asarray(g, dtype=np.float64), self.value.shape)
        if self.grad is None:
            # backward handlers always pass freshly allocated arrays, so the
            # gradient can alias g; accumulation below never mutates in place
            self.grad = g
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Run the reverse pass from this scalar node, filling `.grad` fields."""
        if self.value.size != 1:
            raise StateError("backward requires a scalar loss")
        if not self.requires_grad:
            raise StateError("backward called on a tensor with no recorded graph")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.value)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- elementwise / structural ops ------------------------------------

    def __add__(self, other):
        other = ensure_tensor(other)
        out = Tensor(self.value + other.value, _parents=(self, other))
        if out.requires_grad:
            def bw(g, a=self, b=other):
                if a.requires_grad:
                    a._accum(g)
                if b.requires_grad:
                    b._accum(g)
            out._backward = bw
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.value, _parents=(self,))
        if out.requires_grad:
            out._backward = lambda g, a=self: a._accum(-g)
        return out

    def __sub__(self, other):
        return self + (-ensure_tensor(other))

    def __rsub__(self, other):
        return ensure_tensor(other) + (-self)

    def __mul__(self, other):
        other = ensure_tensor(other)
        out = Tensor(self.value * other.value, _parents=(self, other))
        if out.requires_grad:
            def bw(g, a=self, b=other):
                if a.requires_grad:
                    a._accum(g * b.value)
                if b.requires_grad:
                    b._accum(g * a.value)
            out._backward = bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = ensure_tensor(other)
        return self * other ** -1.0

    def __rtruediv__(self, other):
        return ensure_tensor(other) * self ** -1.0

    def __pow__(self, p: float):
        p = float(p)
        out = Tensor(self.value ** p, _parents=(self,))
        if out.requires_grad:
            out._backward = lambda g, a=self: a._accum(g * p * a.value ** (p - 1.0))
        return out

    def __matmul__(self, other):
        other = ensure_tensor(other)
        out = Tensor(self.value @ other.value, _parents=(self, other))
        if out.requires_grad:
            def bw(g, a=self, b=other):
                if a.requires_grad:
                    a._accum(g @ b.value.swapaxes(-1, -2))
                if b.requires_grad:
                    b._accum(a.value.swapaxes(-1, -2) @ g)
            out._backward = bw
        return out

    def __getitem__(self, idx):
        out = Tensor(self.value[idx], _parents=(self,))
        if out.requires_grad:
            def bw(g, a=self, idx=idx):
                full = np.zeros_like(a.value)
                full[idx] += g
                a._accum(full)
            out._backward = bw
        return out

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.value.reshape(shape), _parents=(self,))
        if out.requires_grad:
            out._backward = lambda g, a=self: a._accum(g.reshape(a.value.shape))
        return out

    @property
    def T(self):
        out = Tensor(self.value.T, _parents=(self,))
        if out.requires_grad:
            out._backward = lambda g, a=self: a._accum(g.T)
        return out

    def sum(self):
        out = Tensor(self.value.sum(), _parents=(self,))
        if out.requires_grad:
            out._backward = lambda g, a=self: a._accum(np.broadcast_to(g, a.value.shape))
        return out

    def mean(self):
        return self.sum() * (1.0 / self.value.size)

    def tanh(self):
        y = np.tanh(self.value)
        out = Tensor(y, _parents=(self,))
        if out.requires_grad:
            out._backward = lambda g, a=self, y=y: a._accum(g * (1.0 - y * y))
        return out

    def sigmoid(self):
        y = 1.0 / (1.0 + np.exp(-self.value))
        out = Tensor(y, _parents=(self,))
        if out.requires_grad:
            out._backward = lambda g, a=self, y=y: a._accum(g * y * (1.0 - y))
        return out

    def relu(self):
        mask = self.value > 0.0
        out = Tensor(np.where(mask, self.value, 0.0), _parents=(self,))
        if out.requires_grad:
            out._backward = lambda g, a=self, m=mask: a._accum(g * m)
        return out

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"


def ensure_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def pinv(a: Tensor | np.ndarray, cutoff: float = PINV_CUTOFF) -> Tensor:
    """Moore-Penrose pseudo-inverse via SVD, differentiable.

    Singular values sigma_i <= cutoff * sigma_max are zeroed. Raises
    :class:`ShapeError` on non-2-D input and :class:`NumericError` if the
    SVD iteration fails to converge.
    """
    a = ensure_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"pinv expects a 2-D tensor, got shape {a.shape}")
    try:
        u, s, vt = np.linalg.svd(a.value, full_matrices=False)
    except np.linalg.LinAlgError as e:
        raise NumericError(f"SVD did not converge: {e}") from e
    smax = s[0] if s.size else 0.0
    s_inv = np.where(s > cutoff * smax, np.divide(1.0, s, out=np.zeros_like(s), where=s > 0), 0.0)
    p = (vt.T * s_inv) @ u.T
    out = Tensor(p, _parents=(a,))
    if out.requires_grad:
        av = a.value
        r, c = av.shape

        def bw(g, a=a, p=p, av=av, r=r, c=c):
            # adjoint of the three-term pseudo-inverse differential; matmuls
            # are associated to keep every intermediate r x c or smaller
            # (never r x r), so cost stays O(r c^2) for tall batches
            gbar = np.asarray(g)
            term1 = -p.T @ gbar @ p.T
            t = gbar.T @ (p @ p.T)               # r x c
            term2 = t - av @ (p @ t)             # (I - A P) gbar^T (P P^T)
            s = gbar.T - (gbar.T @ p) @ av       # r x c
            term3 = p.T @ (p @ s)                # (P^T P) gbar^T (I - P A)
            a._accum(term1 + term2 + term3)
        out._backward = bw
    return out


@dataclass
class EigResult:
    """Eigendecomposition of a real square matrix C.

    `values[i]` pairs with right eigenvector `V[:, i]` and left eigenvector
    `U[i, :]` (rows of U = V^-1). Ordering is deterministic: (Re desc,
    |Im| desc), conjugate pairs adjacent with the positive-imaginary member
    first. `re` / `im` are tape nodes carrying eigenvalue gradients back to C.
    """

    values: np.ndarray   # (k,) complex128
    V: np.ndarray        # (k, k) complex128, right eigenvectors as columns
    U: np.ndarray        # (k, k) complex128, U = V^-1
    re: Tensor
    im: Tensor
    skipped_gradients: int = 0


def eig(a: Tensor | np.ndarray) -> EigResult:
    """Eigendecomposition with differentiable eigenvalues.

    Gradient contributions whose normalizer |u_i v_i| < EIG_SKIP_TOL are
    skipped with a warning; eigenvector gradients are not provided.
    """
    a = ensure_tensor(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"eig expects a square matrix, got shape {a.shape}")
    try:
        lam, v = np.linalg.eig(a.value)
    except np.linalg.LinAlgError as e:
        raise NumericError(f"eigendecomposition did not converge: {e}") from e
    # deterministic order: Re desc, |Im| desc, conjugate pair +Im first
    order = np.lexsort((-lam.imag, -np.abs(lam.imag), -lam.real))
    lam = lam[order]
    v = v[:, order]
    try:
        u = np.linalg.inv(v)
    except np.linalg.LinAlgError as e:
        raise NumericError(f"eigenvector matrix is singular: {e}") from e

    result = EigResult(values=lam, V=v, U=u,
                       re=Tensor(lam.real, _parents=(a,)),
                       im=Tensor(lam.imag, _parents=(a,)))

    if a.requires_grad:
        norms = np.einsum("ij,ji->i", u, v)   # u_i v_i per eigenpair
        usable = np.abs(norms) >= EIG_SKIP_TOL
        n_skipped = int((~usable).sum())
        if n_skipped:
            result.skipped_gradients = n_skipped
            warnings.warn(
                f"eig: skipped {n_skipped} near-defective eigenvalue gradient(s)",
                RuntimeWarning,
            )
        safe = np.where(usable, norms, 1.0)

        def bw_part(g, take_real, a=a, u=u, v=v, safe=safe, usable=usable):
            # dL/dA += sum_i g_i * part(outer(u_i, v_i) / (u_i v_i))
            w = np.where(usable, np.asarray(g) / safe, 0.0)
            m = u.T @ (w[:, None] * v.T)
            a._accum(m.real if take_real else m.imag)

        result.re._backward = lambda g: bw_part(g, True)
        result.im._backward = lambda g: bw_part(g, False)
    return result
