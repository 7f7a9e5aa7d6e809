"""Koopman layer and spectral machinery.

Estimates the batch operator C = Zp+ Zf, shapes its spectrum with the
static/dynamic eigenvalue penalties, and provides the eigenbasis toolbox:
partitioning, projection coefficients, factor swapping and convex-hull
sampling. All operations are pure functions of their inputs.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff
from .autodiff import Tensor, ensure_tensor
from .errors import ConfigError, IntegrityError, NumericError, PreconditionError

log = logging.getLogger(__name__)

# conjugate-pair matching tolerance, relative to |lambda|
_PAIR_RTOL = 1e-12


@dataclass
class LatentBatch:
    """Latent sequences Z of shape (b, t+1, k) with past/future views.

    Row i*t + j of `zp` is Z[i, j, :]; the same row of `zf` is Z[i, j+1, :].
    """

    z: Tensor

    def __post_init__(self):
        self.z = ensure_tensor(self.z)
        if self.z.ndim != 3:
            raise ConfigError(f"latent batch must be (b, t+1, k), got {self.z.shape}")
        b, t1, k = self.z.shape
        if b < 1 or t1 < 2 or k < 2:
            raise ConfigError(f"latent batch needs b >= 1, t >= 1, k >= 2, got {self.z.shape}")

    @property
    def b(self) -> int:
        return self.z.shape[0]

    @property
    def t(self) -> int:
        return self.z.shape[1] - 1

    @property
    def k(self) -> int:
        return self.z.shape[2]

    @property
    def zp(self) -> Tensor:
        b, t, k = self.b, self.t, self.k
        return self.z[:, :-1, :].reshape(b * t, k)

    @property
    def zf(self) -> Tensor:
        b, t, k = self.b, self.t, self.k
        return self.z[:, 1:, :].reshape(b * t, k)


def spectral_groups(values: np.ndarray) -> list[tuple[int, ...]]:
    """Group eigenvalue indices into spectral groups.

    A real eigenvalue is a group of one; a conjugate pair (adjacent in the
    canonical ordering, positive-imaginary first) is a group of two.
    """
    groups: list[tuple[int, ...]] = []
    i = 0
    k = len(values)
    while i < k:
        lam = values[i]
        if lam.imag > 0 and i + 1 < k:
            scale = max(1.0, abs(lam))
            if abs(values[i + 1] - np.conj(lam)) <= _PAIR_RTOL * scale:
                groups.append((i, i + 1))
                i += 2
                continue
        groups.append((i,))
        i += 1
    return groups


def partner_map(groups: list[tuple[int, ...]], k: int) -> np.ndarray:
    """partner[i] = conjugate partner of index i (self for real eigenvalues)."""
    partner = np.arange(k)
    for g in groups:
        if len(g) == 2:
            partner[g[0]], partner[g[1]] = g[1], g[0]
    return partner


@dataclass
class KoopmanSpectrum:
    """The operator C with its eigendecomposition.

    V holds right eigenvectors as columns, U = V^-1 (rows of U are the left
    eigenvectors up to scaling). `re`/`im` are tape nodes so spectral losses
    can flow gradients back into C and onward to the latent codes.
    """

    c: Tensor
    values: np.ndarray
    V: np.ndarray
    U: np.ndarray
    re: Tensor
    im: Tensor
    groups: list[tuple[int, ...]] = field(default_factory=list)

    @classmethod
    def from_matrix(cls, c: Tensor | np.ndarray) -> "KoopmanSpectrum":
        c = ensure_tensor(c)
        dec = autodiff.eig(c)
        return cls(c=c, values=dec.values, V=dec.V, U=dec.U, re=dec.re, im=dec.im,
                   groups=spectral_groups(dec.values))

    @property
    def k(self) -> int:
        return len(self.values)

    @property
    def partner(self) -> np.ndarray:
        return partner_map(self.groups, self.k)

    def validate(self, tol: float = 1e-8) -> None:
        """Check the decomposition residuals; raises IntegrityError on failure."""
        cv = self.c.value
        r1 = np.abs(cv @ self.V - self.V * self.values[None, :]).max()
        scale = max(1.0, np.abs(cv).max())
        if r1 > tol * scale:
            raise IntegrityError(f"eigendecomposition residual {r1:.3e} exceeds tolerance")
        r2 = np.abs(self.U @ self.V - np.eye(self.k)).max()
        if r2 > tol:
            raise IntegrityError(f"U V - I residual {r2:.3e} exceeds tolerance")
        if abs(self.values.sum().imag) > 1e-10 * scale:
            raise IntegrityError("eigenvalues are not closed under conjugation")


@dataclass
class SpectralPartition:
    """Disjoint static/dynamic index sets over the k eigenpairs."""

    i_stat: tuple[int, ...]
    i_dyn: tuple[int, ...]
    k_s: int
    k_d: int
    factors: dict[str, tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        s, d = set(self.i_stat), set(self.i_dyn)
        if s & d:
            raise ConfigError("static and dynamic index sets overlap")
        if s | d != set(range(len(s) + len(d))):
            raise ConfigError("static/dynamic sets do not cover all indices")
        for name, idx in self.factors.items():
            if not (set(idx) <= s or set(idx) <= d):
                raise ConfigError(f"factor {name!r} spans both static and dynamic sets")


@dataclass
class ProjectionCoefficients:
    """Koopman projection coefficients zbar = z^T V, shape (b, t+1, k)."""

    zbar: np.ndarray

    def __post_init__(self):
        self.zbar = np.asarray(self.zbar, dtype=np.complex128)
        if self.zbar.ndim != 3:
            raise ConfigError(f"coefficients must be (b, t+1, k), got {self.zbar.shape}")
        if not np.all(np.isfinite(self.zbar)):
            raise NumericError("projection coefficients contain NaN or Inf")


def estimate_operator(latent: LatentBatch) -> KoopmanSpectrum:
    """Least-squares Koopman operator C = Zp+ Zf, recomputed per batch.

    C is never a trainable parameter; gradients flow to Zp and Zf through the
    pseudo-inverse and matmul rules.
    """
    zp, zf = latent.zp, latent.zf
    if np.abs(zp.value).max() == 0.0:
        raise NumericError("Zp is identically zero; operator undefined")
    bt, k = zp.shape
    if bt < k:
        warnings.warn(
            f"Zp has {bt} rows for {k} latent dims; operator is underdetermined "
            "(minimum-norm solution used)", RuntimeWarning)
    c = autodiff.pinv(zp) @ zf
    return KoopmanSpectrum.from_matrix(c)


def predict(z: np.ndarray, spectrum: KoopmanSpectrum, r: int) -> np.ndarray:
    """Advance a latent state r steps: z^T C^r by repeated matrix-vector products."""
    if r < 1:
        raise ConfigError("prediction horizon r must be >= 1")
    out = np.asarray(z, dtype=np.float64)
    cv = spectrum.c.value
    for _ in range(r):
        out = out @ cv
    return out


def _group_key(values: np.ndarray, group: tuple[int, ...], selection: str):
    lam = values[group[0]]
    if selection == "distance":
        primary = abs(lam - 1.0)
    elif selection == "modulus":
        primary = -abs(lam)
    else:
        raise ConfigError(f"unknown static-selection rule {selection!r}")
    # deterministic tie-break: Re desc, Im desc
    return (primary, -lam.real, -lam.imag)


def select_static(spectrum: KoopmanSpectrum, k_s: int,
                  selection: str = "distance") -> tuple[int, ...]:
    """Greedy group-respecting choice of the static eigenvalue indices.

    Whole spectral groups are taken in ascending distance to 1+0i (or by
    modulus under the ablation rule) until at least k_s eigenvalues are
    covered, so the result may overshoot k_s by one for a straddling pair.
    """
    k = spectrum.k
    if not 1 <= k_s < k:
        raise ConfigError(f"k_s must satisfy 1 <= k_s < k, got k_s={k_s}, k={k}")
    groups = sorted(spectrum.groups, key=lambda g: _group_key(spectrum.values, g, selection))
    chosen: list[int] = []
    for g in groups:
        if len(chosen) >= k_s:
            break
        chosen.extend(g)
    if len(chosen) > k_s:
        log.info("static set overshoots k_s=%d by %d (conjugate pair kept whole)",
                 k_s, len(chosen) - k_s)
    return tuple(chosen)


@dataclass
class SpectralLoss:
    stat: Tensor
    dyn: Tensor
    eig: Tensor
    static_indices: tuple[int, ...]


def spectral_loss(spectrum: KoopmanSpectrum, k_s: int, eps: float,
                  mode: str = "default", selection: str = "distance",
                  delta: float = 0.1) -> SpectralLoss:
    """Static/dynamic eigenvalue penalties L_stat, L_dyn and their sum L_eig.

    L_stat averages |lambda - 1|^2 over the selected static eigenvalues.
    mode="default" thresholds the dynamic moduli at eps (strictly greater
    contributes its modulus); "measure-preserving" drives dynamic moduli to 1
    while excluding a delta-ball around 1+0i; "growing" keeps the exclusion
    ball only. The static-set selection is a constant within each step.
    """
    k = spectrum.k
    if mode == "default" and not 0.0 < eps < 1.0:
        raise ConfigError(f"eps must be in (0, 1) for default mode, got {eps}")
    static = select_static(spectrum, k_s, selection)
    mask_s = np.zeros(k)
    mask_s[list(static)] = 1.0
    mask_d = 1.0 - mask_s
    k_d = k - k_s

    re, im = spectrum.re, spectrum.im
    dist_sq = (re - 1.0) ** 2 + im ** 2
    l_stat = (dist_sq * mask_s).sum() * (1.0 / k_s)

    modulus = (re ** 2 + im ** 2) ** 0.5
    if mode == "default":
        over = (modulus.value > eps).astype(float)   # strict; subgradient 0 at the boundary
        l_dyn = (modulus * (mask_d * over)).sum() * (1.0 / k_d)
    elif mode == "measure-preserving":
        dist1 = dist_sq ** 0.5
        xi = (modulus - 1.0) ** 2 + (delta - dist1).relu()
        l_dyn = (xi * mask_d).sum() * (1.0 / k_d)
    elif mode == "growing":
        dist1 = dist_sq ** 0.5
        l_dyn = ((delta - dist1).relu() * mask_d).sum() * (1.0 / k_d)
    else:
        raise ConfigError(f"unknown spectral loss mode {mode!r}")
    return SpectralLoss(stat=l_stat, dyn=l_dyn, eig=l_stat + l_dyn, static_indices=static)


def partition_spectrum(spectrum: KoopmanSpectrum, k_s: int,
                       selection: str = "distance") -> SpectralPartition:
    """Split the spectrum into static/dynamic index sets (group-respecting)."""
    static = select_static(spectrum, k_s, selection)
    i_dyn = tuple(i for i in range(spectrum.k) if i not in set(static))
    return SpectralPartition(i_stat=static, i_dyn=i_dyn,
                             k_s=len(static), k_d=len(i_dyn))


def project(latent: LatentBatch | np.ndarray, spectrum: KoopmanSpectrum) -> ProjectionCoefficients:
    """Projection coefficients zbar^T = z^T V for every frame."""
    z = latent.z.value if isinstance(latent, LatentBatch) else np.asarray(latent)
    return ProjectionCoefficients(zbar=z @ spectrum.V)


def reconstruct(coeffs: ProjectionCoefficients, spectrum: KoopmanSpectrum) -> np.ndarray:
    """Latent frames Z = Re(zbar U); the imaginary residue must be negligible.

    Residue above 1e-8 warns; above 1e-6 raises IntegrityError (conjugate
    symmetry was broken upstream).
    """
    full = coeffs.zbar @ spectrum.U
    residue = float(np.abs(full.imag).max())
    if residue > 1e-6:
        raise IntegrityError(
            f"imaginary residue {residue:.3e} > 1e-6; coefficient edits broke "
            "conjugate symmetry")
    if residue > 1e-8:
        warnings.warn(f"reconstruction imaginary residue {residue:.3e}", RuntimeWarning)
    return full.real


def check_conjugate_closed(indices, partner: np.ndarray) -> None:
    idx = set(int(i) for i in indices)
    for i in idx:
        if int(partner[i]) not in idx:
            raise PreconditionError(
                f"index set is not conjugate-closed: {i} present without partner "
                f"{int(partner[i])}")


def swap_factors(coeffs: ProjectionCoefficients, u: int, v: int, indices,
                 spectrum: KoopmanSpectrum) -> ProjectionCoefficients:
    """Exchange the coefficients at `indices` between samples u and v."""
    b = coeffs.zbar.shape[0]
    if not (0 <= u < b and 0 <= v < b and u != v):
        raise PreconditionError(f"invalid sample indices u={u}, v={v} for batch of {b}")
    check_conjugate_closed(indices, spectrum.partner)
    idx = list(indices)
    out = coeffs.zbar.copy()
    out[u, :, idx], out[v, :, idx] = coeffs.zbar[v, :, idx], coeffs.zbar[u, :, idx]
    return ProjectionCoefficients(zbar=out)


def sample_convex(coeffs: ProjectionCoefficients, indices,
                  alpha: np.ndarray | None = None,
                  seed: int | None = None,
                  spectrum: KoopmanSpectrum | None = None) -> ProjectionCoefficients:
    """Replace the `indices` coefficients of every sample by a convex combination.

    `alpha` must lie on the simplex over samples; when absent, it is drawn
    from the seed (flat Dirichlet). When a spectrum is supplied, the index set
    is validated for conjugate closure before any coefficients change.
    """
    if spectrum is not None:
        check_conjugate_closed(indices, spectrum.partner)
    b = coeffs.zbar.shape[0]
    if alpha is None:
        alpha = np.random.default_rng(seed).dirichlet(np.ones(b))
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (b,) or np.any(alpha < -1e-12) or abs(alpha.sum() - 1.0) > 1e-9:
        raise PreconditionError("weights must be non-negative and sum to 1 over samples")
    combo = np.tensordot(alpha, coeffs.zbar, axes=(0, 0))   # (t+1, k)
    out = coeffs.zbar.copy()
    out[:, :, list(indices)] = combo[None, :, list(indices)]
    return ProjectionCoefficients(zbar=out)
