"""Conditional Gaussian systems, the energy-conserving quadratic form and triad presets.

A conditional Gaussian system couples observed variables ``u_I`` and hidden
variables ``u_II``::

    du_I  = (A0(t, u_I) + A1(t, u_I) u_II) dt + Sigma_I(t, u_I) dW_I
    du_II = (a0(t, u_I) + a1(t, u_I) u_II) dt + Sigma_II(t, u_I) dW_II

The dynamics are linear in ``u_II`` given the observed path, which is what
makes the posterior ``p(u_II | u_I(s <= t))`` exactly Gaussian.

State vectors are always ordered ``(u_I, u_II)``.  Coefficient evaluators are
batched: they take ``t`` and ``uI`` of shape ``(batch, N_I)`` and return arrays
with a leading batch axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

Evaluator = Callable[[float, np.ndarray], np.ndarray]


class ModelError(ValueError):
    """Invalid model construction or parameters."""


@dataclass(frozen=True)
class ConditionalGaussianModel:
    """Coefficient evaluators of a conditional Gaussian system.

    Parameters
    ----------
    n_obs, n_hidden : int
        Dimensions ``N_I`` and ``N_II``.
    A0, A1, a0, a1, sigma_I, sigma_II : callable
        Batched evaluators ``f(t, uI)`` with ``uI`` of shape ``(B, N_I)``,
        returning shapes ``(B, N_I)``, ``(B, N_I, N_II)``, ``(B, N_II)``,
        ``(B, N_II, N_II)``, ``(B, N_I, N_I)`` and ``(B, N_II, N_II)``.
    names : tuple of str, optional
        Component labels in state order ``(u_I, u_II)``.
    quadratic : EnergyConservingModel, optional
        Set when the model has constant noise and a drift that is a quadratic
        polynomial of the state; enables the compiled ensemble kernels.
    """

    n_obs: int
    n_hidden: int
    A0: Evaluator
    A1: Evaluator
    a0: Evaluator
    a1: Evaluator
    sigma_I: Evaluator
    sigma_II: Evaluator
    names: tuple = ()
    label: str = "custom"
    quadratic: "EnergyConservingModel | None" = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if int(self.n_obs) < 1 or int(self.n_hidden) < 1:
            raise ModelError("n_obs and n_hidden must be positive")
        if not self.names:
            names = tuple(f"uI{k + 1}" for k in range(self.n_obs)) + tuple(
                f"uII{k + 1}" for k in range(self.n_hidden))
            object.__setattr__(self, "names", names)
        if len(self.names) != self.dim:
            raise ModelError("names must have one entry per state component")

    @property
    def dim(self) -> int:
        return self.n_obs + self.n_hidden

    def coefficients(self, t: float, uI) -> dict:
        """Evaluate all six coefficients at a batch of observed states.

        A 1-D ``uI`` is treated as a batch of one and the batch axis is kept.
        Shapes are validated against the declared dimensions.
        """
        uI = np.atleast_2d(np.asarray(uI, dtype=float))
        B = uI.shape[0]
        n1, n2 = self.n_obs, self.n_hidden
        if uI.shape[1] != n1:
            raise ModelError(f"uI has {uI.shape[1]} components, model expects {n1}")
        out = {
            "A0": np.asarray(self.A0(t, uI), dtype=float),
            "A1": np.asarray(self.A1(t, uI), dtype=float),
            "a0": np.asarray(self.a0(t, uI), dtype=float),
            "a1": np.asarray(self.a1(t, uI), dtype=float),
            "sigma_I": np.asarray(self.sigma_I(t, uI), dtype=float),
            "sigma_II": np.asarray(self.sigma_II(t, uI), dtype=float),
        }
        expected = {"A0": (B, n1), "A1": (B, n1, n2), "a0": (B, n2), "a1": (B, n2, n2),
                    "sigma_I": (B, n1, n1), "sigma_II": (B, n2, n2)}
        for key, shape in expected.items():
            if out[key].shape != shape:
                raise ModelError(f"{key} returned shape {out[key].shape}, expected {shape}")
        return out

    def drift(self, t: float, u) -> np.ndarray:
        """Full drift at states ``u`` of shape ``(B, N)`` (or ``(N,)``)."""
        u = np.asarray(u, dtype=float)
        single = u.ndim == 1
        u = np.atleast_2d(u)
        n1 = self.n_obs
        c = self.coefficients(t, u[:, :n1])
        uII = u[:, n1:]
        dI = c["A0"] + np.einsum("bij,bj->bi", c["A1"], uII)
        dII = c["a0"] + np.einsum("bij,bj->bi", c["a1"], uII)
        out = np.concatenate([dI, dII], axis=1)
        return out[0] if single else out


def _norm2(M) -> float:
    M = np.atleast_2d(M)
    return float(np.linalg.norm(M, 2)) if M.size else 0.0


@dataclass(frozen=True)
class EnergyConservingModel:
    """Quadratic system ``du = (-Lambda u + B(u, u) + F) dt + Sigma dW``.

    The interaction is stored as a tensor ``interaction[k, i, j]`` with
    ``B(u, v)_k = sum_ij interaction[k, i, j] u_i v_j``.  State order is
    ``(u_I, u_II)`` with ``n_obs`` observed components; the noise is
    block diagonal ``diag(sigma_I, sigma_II)``.

    For the system to be conditional Gaussian, ``B`` must not contain
    products of two hidden components; this is checked on construction.
    """

    n_obs: int
    damping: np.ndarray
    interaction: np.ndarray
    forcing: np.ndarray
    sigma_I: np.ndarray
    sigma_II: np.ndarray

    def __post_init__(self):
        lam = np.array(self.damping, dtype=float)
        T = np.array(self.interaction, dtype=float)
        F = np.array(self.forcing, dtype=float)
        sI = np.atleast_2d(np.array(self.sigma_I, dtype=float))
        sII = np.atleast_2d(np.array(self.sigma_II, dtype=float))
        N = lam.shape[0]
        n1 = int(self.n_obs)
        if lam.shape != (N, N) or T.shape != (N, N, N) or F.shape != (N,):
            raise ModelError("damping, interaction and forcing shapes are inconsistent")
        if not 1 <= n1 < N:
            raise ModelError("n_obs must be between 1 and N-1")
        if sI.shape != (n1, n1) or sII.shape != (N - n1, N - n1):
            raise ModelError("noise blocks have wrong shapes")
        if np.any(T[:, n1:, n1:] != 0.0):
            raise ModelError("interaction has hidden-hidden products; the system is not conditional Gaussian")
        for name, arr in (("damping", lam), ("interaction", T), ("forcing", F),
                          ("sigma_I", sI), ("sigma_II", sII)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def dim(self) -> int:
        return self.damping.shape[0]

    @property
    def n_hidden(self) -> int:
        return self.dim - self.n_obs

    @property
    def lambda_blocks(self) -> dict:
        n1 = self.n_obs
        lam = self.damping
        return {"I0": lam[:n1, :n1], "I1": lam[:n1, n1:], "II0": lam[n1:, :n1], "II1": lam[n1:, n1:]}

    @property
    def noise(self) -> np.ndarray:
        """Full block-diagonal noise matrix."""
        n1, N = self.n_obs, self.dim
        S = np.zeros((N, N))
        S[:n1, :n1] = self.sigma_I
        S[n1:, n1:] = self.sigma_II
        return S

    # block views of the bilinear form -------------------------------------
    def B(self, u, v) -> np.ndarray:
        """Bilinear form, batched over leading axes."""
        return np.einsum("kij,...i,...j->...k", self.interaction, u, v)

    def B_I0(self, uI) -> np.ndarray:
        n1 = self.n_obs
        return np.einsum("kij,...i,...j->...k", self.interaction[:n1, :n1, :n1], uI, uI)

    def B_II0(self, uI) -> np.ndarray:
        n1 = self.n_obs
        return np.einsum("kij,...i,...j->...k", self.interaction[n1:, :n1, :n1], uI, uI)

    def _linear_block(self, rows, uI) -> np.ndarray:
        n1 = self.n_obs
        T = self.interaction[rows]
        M = T[:, :n1, n1:] + np.swapaxes(T[:, n1:, :n1], 1, 2)
        return np.einsum("kip,...i->...kp", M, uI)

    def B_I1(self, uI) -> np.ndarray:
        """Matrix ``B_I1(u_I)`` of shape ``(..., N_I, N_II)``."""
        return self._linear_block(slice(0, self.n_obs), uI)

    def B_II1(self, uI) -> np.ndarray:
        """Matrix ``B_II1(u_I)`` of shape ``(..., N_II, N_II)``."""
        return self._linear_block(slice(self.n_obs, None), uI)

    def as_conditional_gaussian(self, names=(), label: str = "quadratic") -> ConditionalGaussianModel:
        n1, n2 = self.n_obs, self.n_hidden
        lb = self.lambda_blocks
        F = self.forcing
        sI, sII = self.sigma_I, self.sigma_II

        def A0(t, uI):
            return F[:n1] - uI @ lb["I0"].T + self.B_I0(uI)

        def A1(t, uI):
            return -lb["I1"] + self.B_I1(uI)

        def a0(t, uI):
            return F[n1:] - uI @ lb["II0"].T + self.B_II0(uI)

        def a1(t, uI):
            return -lb["II1"] + self.B_II1(uI)

        def sig_I(t, uI):
            return np.broadcast_to(sI, (uI.shape[0], n1, n1)).copy()

        def sig_II(t, uI):
            return np.broadcast_to(sII, (uI.shape[0], n2, n2)).copy()

        return ConditionalGaussianModel(n1, n2, A0, A1, a0, a1, sig_I, sig_II,
                                        names=tuple(names), label=label, quadratic=self)


# --------------------------------------------------------------------------
# triad family

@dataclass(frozen=True)
class TriadParams:
    """Parameters of the triad model.

    ``du1 = (A1 u2 u3 - d1 u1) dt + epsilon dW1``,
    ``du2 = (A2 u3 u1 - d2 u2) dt + sigma2 dW2``,
    ``du3 = (A3 u1 u2 - d3 u3) dt + sigma3 dW3``.
    """

    A1: float
    A2: float
    A3: float
    d2: float
    d3: float
    sigma2: float
    sigma3: float
    d1: float = 0.0
    epsilon: float = 0.0

    def validate(self) -> "TriadParams":
        if self.A1 + self.A2 + self.A3 != 0.0:
            raise ModelError(f"A1+A2+A3 must be 0 for energy conservation, got {self.A1 + self.A2 + self.A3!r}")
        if not (self.d2 > 0 and self.d3 > 0):
            raise ModelError("d2 and d3 must be positive")
        if self.d1 < 0:
            raise ModelError("d1 must be nonnegative")
        if self.epsilon < 0 or self.sigma2 < 0 or self.sigma3 < 0:
            raise ModelError("noise amplitudes must be nonnegative")
        return self


REGIMES = {
    "I": dict(A1=-2.5, A2=1.0, A3=1.5, d2=1.0, d3=0.5, sigma2=1.0, sigma3=1.0),
    "II": dict(A1=-0.5, A2=-1.0, A3=1.5, d2=1.0, d3=0.5, sigma2=1.0, sigma3=1.0),
}

PRESETS = {
    "triad": dict(epsilon=0.0, d1=0.0),
    "triad_modified": dict(epsilon=0.1, d1=0.0),
    "triad_damped": dict(epsilon=0.1, d1=0.1),
}

TRIAD_NAMES = ("u2", "u3", "u1")


def triad_params(regime: str = "I", preset: str = "triad_modified", **overrides) -> TriadParams:
    """Build TriadParams from a regime ("I" or "II"), a preset name and overrides."""
    if regime not in REGIMES:
        raise ModelError(f"unknown regime {regime!r}; choose from {sorted(REGIMES)}")
    if preset not in PRESETS:
        raise ModelError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    kw = dict(REGIMES[regime])
    kw.update(PRESETS[preset])
    kw.update(overrides)
    return TriadParams(**kw).validate()


def triad_energy_model(params: TriadParams) -> EnergyConservingModel:
    """Quadratic form of the triad with state order (u2, u3, u1)."""
    p = params.validate()
    # indices in state order (u2, u3, u1)
    i2, i3, i1 = 0, 1, 2
    T = np.zeros((3, 3, 3))
    T[i1, i2, i3] = p.A1
    T[i2, i3, i1] = p.A2
    T[i3, i1, i2] = p.A3
    lam = np.diag([p.d2, p.d3, p.d1])
    return EnergyConservingModel(
        n_obs=2, damping=lam, interaction=T, forcing=np.zeros(3),
        sigma_I=np.diag([p.sigma2, p.sigma3]), sigma_II=np.array([[p.epsilon]]))


def triad_model(params: TriadParams) -> ConditionalGaussianModel:
    """Triad model as a conditional Gaussian system with u_I=(u2,u3), u_II=u1.

    ``A0 = (-d2 u2, -d3 u3)``, ``A1 = (A2 u3, A3 u2)^T``, ``a0 = A1 u2 u3``,
    ``a1 = -d1``, ``Sigma_I = diag(sigma2, sigma3)``, ``Sigma_II = epsilon``.
    """
    p = params.validate()
    if p.sigma2 <= 0 or p.sigma3 <= 0:
        raise ModelError("sigma2 and sigma3 must be positive (Sigma_I must be invertible)")
    em = triad_energy_model(p)

    def A0(t, uI):
        return np.stack([-p.d2 * uI[:, 0], -p.d3 * uI[:, 1]], axis=1)

    def A1(t, uI):
        return np.stack([p.A2 * uI[:, 1], p.A3 * uI[:, 0]], axis=1)[:, :, None]

    def a0(t, uI):
        return (p.A1 * uI[:, 0] * uI[:, 1])[:, None]

    def a1(t, uI):
        return np.full((uI.shape[0], 1, 1), -p.d1)

    sI = np.diag([p.sigma2, p.sigma3])

    def sig_I(t, uI):
        return np.broadcast_to(sI, (uI.shape[0], 2, 2)).copy()

    def sig_II(t, uI):
        return np.full((uI.shape[0], 1, 1), p.epsilon)

    return ConditionalGaussianModel(2, 1, A0, A1, a0, a1, sig_I, sig_II,
                                    names=TRIAD_NAMES, label="triad", quadratic=em)


def ou_model(d: float = 1.0, sigma: float = 1.0, n_obs: int = 1, d_obs: float = 1.0,
             sigma_obs: float = 1.0, coupling: float = 0.0) -> ConditionalGaussianModel:
    """Linear test model: one observed and one hidden Ornstein-Uhlenbeck component.

    ``du_I = (-d_obs u_I + coupling u_II) dt + sigma_obs dW_I``,
    ``du_II = -d u_II dt + sigma dW_II``.
    """
    if n_obs != 1:
        raise ModelError("ou_model supports n_obs=1")
    em = EnergyConservingModel(
        n_obs=1, damping=np.array([[d_obs, -coupling], [0.0, d]]),
        interaction=np.zeros((2, 2, 2)), forcing=np.zeros(2),
        sigma_I=np.array([[sigma_obs]]), sigma_II=np.array([[sigma]]))
    return em.as_conditional_gaussian(names=("x", "y"), label="ou")


# --------------------------------------------------------------------------
# structural checks

@dataclass(frozen=True)
class GaussianSpec:
    """Gaussian measure with labelled components."""

    mean: np.ndarray
    covariance: np.ndarray
    names: tuple = ()

    def __post_init__(self):
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-14 * max(1.0, np.abs(cov).max())):
            raise ModelError("covariance must be symmetric")
        if np.linalg.eigvalsh(cov).min() < -1e-12 * max(1.0, np.abs(cov).max()):
            raise ModelError("covariance must be positive semidefinite")
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))

    def variances(self) -> np.ndarray:
        return np.diag(self.covariance).copy()


def triad_invariant_measure(params: TriadParams) -> GaussianSpec | None:
    """Gaussian invariant measure of the undamped, noise-free-u1 triad, if it exists.

    ``E2 = sigma2^2/(2 d2)``, ``E3 = sigma3^2/(2 d3)``,
    ``E1 = -A1 E2 E3 / (A2 E3 + A3 E2)``; the measure exists when ``E1 > 0``.
    Returned in state order (u2, u3, u1).
    """
    p = params.validate()
    if p.d1 != 0.0 or p.epsilon != 0.0:
        raise ModelError("the invariant-measure formula applies only with d1 = 0 and epsilon = 0")
    E2 = p.sigma2**2 / (2.0 * p.d2)
    E3 = p.sigma3**2 / (2.0 * p.d3)
    den = p.A2 * E3 + p.A3 * E2
    if E2 == 0.0 or E3 == 0.0 or den == 0.0:
        return None
    E1 = -p.A1 * E2 * E3 / den
    if not E1 > 0.0:
        return None
    return GaussianSpec(np.zeros(3), np.diag([E2, E3, E1]), names=TRIAD_NAMES)


def triad_E1(params: TriadParams) -> float:
    """Value of the E1 formula, whatever its sign (nan when undefined)."""
    E2 = params.sigma2**2 / (2.0 * params.d2)
    E3 = params.sigma3**2 / (2.0 * params.d3)
    den = params.A2 * E3 + params.A3 * E2
    return float(-params.A1 * E2 * E3 / den) if den != 0 else float("nan")


def check_energy_conservation(model: EnergyConservingModel, n_points: int = 1000,
                              seed: int = 0) -> dict:
    """Maximum violation of the three energy identities at random states.

    The identities are ``uI.B_I0(uI,uI) = 0``, ``uII.B_II1(uI) uII = 0`` and
    ``uI.B_I1(uI) uII + uII.B_II0(uI,uI) = 0``.  States are standard normal.
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    rng = np.random.default_rng(seed)
    n1 = model.n_obs
    u = rng.standard_normal((n_points, model.dim))
    uI, uII = u[:, :n1], u[:, n1:]
    v1 = np.einsum("bi,bi->b", uI, model.B_I0(uI))
    v2 = np.einsum("bp,bpq,bq->b", uII, model.B_II1(uI), uII)
    v3 = (np.einsum("bi,bip,bp->b", uI, model.B_I1(uI), uII)
          + np.einsum("bp,bp->b", uII, model.B_II0(uI)))
    viol = np.abs(np.stack([v1, v2, v3]))
    return {
        "max_violation": float(viol.max()),
        "per_identity": [float(x) for x in viol.max(axis=1)],
        "n_points": int(n_points),
        "seed": int(seed),
    }


def _sphere_points(dim: int, n_points: int, rng) -> np.ndarray:
    """Unit vectors: the 2*dim axis directions plus random directions."""
    axes = np.concatenate([np.eye(dim), -np.eye(dim)])
    rand = rng.standard_normal((max(0, n_points), dim))
    rand /= np.linalg.norm(rand, axis=1, keepdims=True)
    return np.concatenate([axes, rand])


def check_dissipativity(model: ConditionalGaussianModel, n_points: int = 2000,
                        radius: float = 50.0, seed: int = 0, n_shells: int = 20,
                        t: float = 0.0) -> dict:
    """Empirical fit of ``drift(u).u <= -rho |u|^2 + D_e``.

    States are placed on ``n_shells`` spheres of radii up to ``radius``
    (axis directions plus ``n_points`` random directions per shell).  For each
    shell the worst case ``M_j = max drift.u`` is kept.  ``rho_hat`` is minus
    the least-squares slope of ``M_j`` against ``r_j^2`` over the outer half
    of the shells; ``De_hat = max_j (M_j + rho_hat r_j^2)`` floored at 0.
    """
    if n_points < 1 or radius <= 0:
        raise ValueError("n_points >= 1 and radius > 0 required")
    rng = np.random.default_rng(seed)
    dirs = _sphere_points(model.dim, n_points, rng)
    radii = radius * np.arange(1, n_shells + 1) / n_shells
    worst = np.empty(n_shells)
    for j, r in enumerate(radii):
        u = r * dirs
        worst[j] = np.max(np.einsum("bi,bi->b", model.drift(t, u), u))
    outer = slice(n_shells // 2, None)
    slope = np.polyfit(radii[outer] ** 2, worst[outer], 1)[0]
    rho = -float(slope)
    # tiny negative or positive rho from roundoff on a neutral direction is not dissipation
    tol = 1e-9 * max(1.0, float(np.max(np.abs(worst))) / radius**2)
    if abs(rho) <= tol:
        rho = 0.0
    De = float(max(0.0, np.max(worst + rho * radii**2)))
    return {"rho_hat": rho, "De_hat": De, "satisfied": bool(rho > 0.0),
            "radius": float(radius), "n_points": int(n_points), "seed": int(seed)}


def _sup_linear_map_norm(M: np.ndarray, n_dirs: int = 4096, seed: int = 0) -> float:
    """sup over unit u of ||sum_i u_i M[i]|| (spectral), by dense sampling plus axes."""
    n = M.shape[0]
    if n == 0 or not np.any(M):
        return 0.0
    rng = np.random.default_rng(seed)
    dirs = _sphere_points(n, n_dirs, rng)
    mats = np.einsum("bi,ipq->bpq", dirs, M)
    return float(np.max(np.linalg.norm(mats, ord=2, axis=(1, 2))))


def energy_model_constants(model: EnergyConservingModel, v: float = 1.0, m: float = 1.0) -> dict:
    """Constants of the quadratic-model controllability estimates.

    Returns lambda_minus (min eigenvalue of the symmetric part of Lambda),
    lambda_plus (spectral norm of Lambda), lambda_B (sup of ||B_I1(u)|| and
    ||B_II1(u)|| over unit u), noise bounds, the dissipation pair
    ``rho = lambda_minus/2``, ``D_e = |F|^2/(2 lambda_minus)`` and ``D_c``.
    ``applicable`` is False when lambda_minus <= 0 or Sigma_II is singular.
    """
    lam = model.damping
    lam_minus = float(np.linalg.eigvalsh(0.5 * (lam + lam.T)).min())
    lam_plus = _norm2(lam)
    n1 = model.n_obs
    T = model.interaction
    M_I = np.stack([T[:n1, i, n1:] + T[:n1, n1:, i] for i in range(n1)])
    M_II = np.stack([T[n1:, i, n1:] + T[n1:, n1:, i] for i in range(n1)])
    lam_B = max(_sup_linear_map_norm(M_I), _sup_linear_map_norm(M_II))
    sI = np.linalg.svd(model.sigma_I, compute_uv=False)
    sII = np.linalg.svd(model.sigma_II, compute_uv=False)
    s_I_minus = float(sI.min())
    s_II_minus, s_II_plus = float(sII.min()), float(sII.max())
    applicable = lam_minus > 0.0 and s_II_minus > 0.0 and s_I_minus > 0.0
    out = {
        "lambda_minus": lam_minus, "lambda_plus": lam_plus, "lambda_B": lam_B,
        "sigma_I_minus": s_I_minus, "sigma_II_minus": s_II_minus, "sigma_II_plus": s_II_plus,
        "v": float(v), "m": float(m), "applicable": bool(applicable),
    }
    if lam_minus > 0.0:
        out["rho"] = lam_minus / 2.0
        out["De"] = float(np.sum(model.forcing**2) / (2.0 * lam_minus))
    else:
        out["rho"] = 0.0
        out["De"] = float("inf")
    if applicable:
        terms = [
            1.0,
            2.0 * lam_plus * s_II_minus**-2 / (1.0 - np.exp(-2.0 * lam_plus)),
            s_II_plus**2 / (2.0 * lam_minus),
            2.0 * lam_plus**2 * s_I_minus**-2,
            2.0 * lam_B**2 * s_I_minus**-2,
            float(np.exp(2.0 * lam_plus)),
        ]
        out["Dc_terms"] = [float(x) for x in terms]
        out["Dc"] = float(max(terms))
    else:
        out["Dc_terms"] = []
        out["Dc"] = float("inf")
    return out


__all__ = [
    "ConditionalGaussianModel", "EnergyConservingModel", "TriadParams", "GaussianSpec",
    "ModelError", "REGIMES", "PRESETS", "TRIAD_NAMES", "triad_params", "triad_model",
    "triad_energy_model", "ou_model", "triad_invariant_measure", "triad_E1",
    "check_energy_conservation", "check_dissipativity", "energy_model_constants",
]
