"""Dense linear algebra on the two-qubit Hilbert space.

States are complex arrays of shape ``(4,)`` and operators are ``(4, 4)``
arrays, both expressed in the fixed basis ``|g,g>, |g,e>, |e,g>, |e,e>``
(qubit 1 is the left tensor factor). Module-level constants are
read-only arrays so they can be shared freely between workers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DIM = 4
BASIS_LABELS = ("gg", "ge", "eg", "ee")
BASIS_ORDER = "|g,g>, |g,e>, |e,g>, |e,e> (qubit 1 = left tensor factor)"


@dataclass(frozen=True)
class Tolerances:
    """Numerical tolerances shared by every module."""

    algebraic: float = 1e-12
    trace: float = 1e-9
    positivity: float = 1e-10


TOL = Tolerances()


class DegenerateStateError(ValueError):
    """Raised when a state or density matrix has zero norm or trace."""


class DimensionError(ValueError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=complex)
    a.setflags(write=False)
    return a


# single-qubit basis: index 0 = g, index 1 = e
ID2 = _frozen(np.eye(2))
SIGMA_Z = _frozen([[-1, 0], [0, 1]])
SIGMA_MINUS = _frozen([[0, 1], [0, 0]])  # |g><e|
SIGMA_PLUS = _frozen([[0, 0], [1, 0]])  # |e><g|


def tensor_product(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Kronecker product ``a (x) b`` of two single-qubit operators."""
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    if a.shape != (2, 2) or b.shape != (2, 2):
        raise DimensionError(f"expected two 2x2 operators, got {a.shape} and {b.shape}")
    return _frozen(np.kron(a, b))


def basis_state(label: str) -> np.ndarray:
    """Computational basis ket, e.g. ``basis_state("eg")`` for |e,g>."""
    psi = np.zeros(DIM, dtype=complex)
    psi[BASIS_LABELS.index(label)] = 1.0
    return _frozen(psi)


GG = basis_state("gg")
GE = basis_state("ge")
EG = basis_state("eg")
EE = basis_state("ee")

SZ1 = tensor_product(SIGMA_Z, ID2)
SZ2 = tensor_product(ID2, SIGMA_Z)
SM1 = tensor_product(SIGMA_MINUS, ID2)
SM2 = tensor_product(ID2, SIGMA_MINUS)
SP1 = tensor_product(SIGMA_PLUS, ID2)
SP2 = tensor_product(ID2, SIGMA_PLUS)
N1 = _frozen(SP1 @ SM1)
N2 = _frozen(SP2 @ SM2)
IDENTITY = _frozen(np.eye(DIM))


def bell_states() -> tuple[np.ndarray, np.ndarray]:
    """Return ``(|Psi+>, |Psi->)`` with ``|Psi+-> = (|e,g> +- |g,e>)/sqrt(2)``."""
    s = 1 / np.sqrt(2)
    return _frozen(s * (EG + GE)), _frozen(s * (EG - GE))


PSI_PLUS, PSI_MINUS = bell_states()


def _check_state(psi: np.ndarray) -> np.ndarray:
    psi = np.asarray(psi, dtype=complex)
    if psi.shape != (DIM,):
        raise DimensionError(f"state must have shape ({DIM},), got {psi.shape}")
    return psi


def _check_operator(op: np.ndarray) -> np.ndarray:
    op = np.asarray(op, dtype=complex)
    if op.shape != (DIM, DIM):
        raise DimensionError(f"operator must have shape ({DIM}, {DIM}), got {op.shape}")
    return op


def norm2(psi: np.ndarray) -> float:
    psi = _check_state(psi)
    return float(np.real(np.vdot(psi, psi)))


def normalize(psi: np.ndarray) -> np.ndarray:
    n = norm2(psi)
    if not n > 0.0:
        raise DegenerateStateError("degenerate state: zero norm")
    return np.asarray(psi, dtype=complex) / np.sqrt(n)


def expectation(op: np.ndarray, psi: np.ndarray) -> complex:
    """``<psi|op|psi> / <psi|psi>``; works on unnormalized states."""
    op = _check_operator(op)
    n = norm2(psi)
    if not n > 0.0:
        raise DegenerateStateError("degenerate state: zero norm")
    return complex(np.vdot(psi, op @ psi) / n)


def apply(op: np.ndarray, psi: np.ndarray) -> np.ndarray:
    return _check_operator(op) @ _check_state(psi)


def adjoint(op: np.ndarray) -> np.ndarray:
    return _check_operator(op).conj().T


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _check_operator(a) @ _check_operator(b)


def projector(psi: np.ndarray) -> np.ndarray:
    """``|psi><psi|`` for a (not necessarily normalized) ket."""
    psi = _check_state(psi)
    return np.outer(psi, psi.conj())


def dm_expectation(op: np.ndarray, rho: np.ndarray) -> complex:
    """``Tr[op rho] / Tr[rho]``."""
    op = _check_operator(op)
    rho = _check_operator(rho)
    tr = np.trace(rho)
    if abs(tr) == 0.0:
        raise DegenerateStateError("degenerate density matrix: zero trace")
    return complex(np.trace(op @ rho) / tr)


def is_hermitian(op: np.ndarray, tol: float = TOL.algebraic) -> bool:
    op = _check_operator(op)
    return bool(np.max(np.abs(op - op.conj().T)) <= tol)


def check_density_matrix(rho: np.ndarray, tol: Tolerances = TOL) -> None:
    """Raise ``ValueError`` unless ``rho`` is Hermitian, unit-trace and PSD."""
    rho = _check_operator(rho)
    if not is_hermitian(rho, tol.algebraic):
        raise ValueError("density matrix is not Hermitian")
    if abs(np.trace(rho) - 1.0) > tol.trace:
        raise ValueError(f"density matrix trace {np.trace(rho).real!r} differs from 1")
    if np.min(np.linalg.eigvalsh(rho)) < -tol.positivity:
        raise ValueError("density matrix has negative eigenvalues")


def excitation_number_operator() -> np.ndarray:
    return _frozen(N1 + N2)
