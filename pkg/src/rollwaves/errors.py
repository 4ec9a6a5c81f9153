"""Exception types raised across the package.

Every failure mode that a caller might want to catch gets its own class;
they all derive from RollWaveError so `except RollWaveError` catches any
domain failure while letting programming errors propagate.
"""


class RollWaveError(Exception):
    """Base class for all domain errors."""


class ConfigError(RollWaveError):
    """Malformed or inconsistent experiment configuration."""


# --- system / base-wave construction ---

class NotStrictlyHyperbolic(RollWaveError):
    """Complex or nearly-coincident eigenvalues of the flux Jacobian."""


class NotLax(RollWaveError):
    """No characteristic family satisfies both Lax inequality chains."""


class Characteristic(RollWaveError):
    """A characteristic speed coincides with the shock speed."""


class NoRollWave(RollWaveError):
    """Parameter regime does not admit a periodic roll-wave."""


# --- profile solver ---

class NoConnection(RollWaveError):
    """Heteroclinic shooting failed to connect the rest states."""


class FitFailed(RollWaveError):
    """Log-linear decay fit did not converge to a credible rate."""


class NoDecay(RollWaveError):
    """A quantity required to decay is not small at the domain edge."""


# --- correctors ---

class Unbounded(RollWaveError):
    """Inner corrector grew without bound (resonance / failed spectral hypothesis)."""


class MajdaLiuDegenerate(RollWaveError):
    """Shock-coupling determinant vanishes; linearized system not solvable."""


class CharacteristicCollision(RollWaveError):
    """Two same-family characteristics cross before the final time."""


class MatchFailure(RollWaveError):
    """Inner/outer matching condition violated at the truncation boundary."""


# --- assembly / scaling ---

class NotMonotone(RollWaveError):
    """Shock-fixing map is not increasing (shock drift too large)."""


class Disagreement(RollWaveError):
    """Two independent computations of the same quantity disagree."""


class ScalingViolation(RollWaveError):
    """A measured log-log slope falls below its required exponent."""


# --- viscous solver ---

class Blowup(RollWaveError):
    """Solution magnitude exceeded the blow-up guard."""


class CFLViolation(RollWaveError):
    """Advective CFL constraint violated."""


class NonMonotone(RollWaveError):
    """Convergence-study norms failed to decrease with epsilon."""


# --- Green's function ---

class UnboundedGrowth(RollWaveError):
    """Green's-function norms grow across the epsilon sweep."""


# --- Evans function ---

class SplittingFailure(RollWaveError):
    """Stable/unstable dimension counts at the two ends are not complementary."""


class IntegrationOverflow(RollWaveError):
    """The wedge integration over/underflowed despite exponential rescaling."""


class UnstableSpectrum(RollWaveError):
    """Nonzero winding number: eigenvalues in the closed right half-plane."""


class DegenerateZero(RollWaveError):
    """Derivative of the Evans function at the origin is numerically zero."""
