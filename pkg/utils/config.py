import os
from dataclasses import asdict, dataclass, field

from services.errors import ConfigError

THREADS_ENV = "FE_THREADS"


@dataclass(frozen=True)
class SolverSettings:
    """Numerical knobs shared by the curve solvers and the eta search."""

    ba_tol: float = 1e-9
    ba_max_iter: int = 10_000
    # hitting the iteration cap with a gap above this is reported as non-convergence
    ba_accept_gap: float = 1e-6
    bisection_tol: float = 1e-13
    golden_tol: float = 1e-10
    grid_points: int = 10_001

    def __post_init__(self):
        for name in ("ba_tol", "ba_accept_gap", "bisection_tol", "golden_tol"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.ba_max_iter < 1 or self.grid_points < 3:
            raise ConfigError("ba_max_iter must be >= 1 and grid_points >= 3")


DEFAULT_SETTINGS = SolverSettings()


def worker_threads(override: int | None = None) -> int:
    """Number of simulator worker threads, capped by FE_THREADS when set."""
    raw = os.environ.get(THREADS_ENV)
    cap = None
    if raw:
        try:
            cap = max(1, int(raw))
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}")
    if override is not None:
        return max(1, min(override, cap) if cap else override)
    return cap or 1


def parse_rate_grid(spec: str) -> tuple[float, float, int]:
    """Parse a ``lo:hi:n`` grid specification."""
    parts = spec.split(":")
    if len(parts) != 3:
        raise ConfigError(f"rate grid must look like lo:hi:n, got {spec!r}")
    try:
        lo, hi, n = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise ConfigError(f"rate grid must look like lo:hi:n, got {spec!r}")
    if n < 1:
        raise ConfigError("rate grid needs at least one point")
    if not 0 < lo <= hi:
        raise ConfigError(f"rate grid bounds must satisfy 0 < lo <= hi, got {lo}, {hi}")
    return lo, hi, n


@dataclass(frozen=True)
class RunConfig:
    """Everything a CLI command needs; recorded verbatim in every output."""

    command: str
    channel: str
    power: float | None = None
    rate: float | None = None
    rate_grid: str | None = None
    ell: int | None = None
    eta: float | None = None
    trials: int = 10_000
    seed: int = 0
    out: str | None = None
    format: str = "csv"
    verify: bool = False
    kappa: float = 0.1
    m_cap: int = 4096
    alpha: float = 0.1
    threads: int | None = None
    append_limit: bool = False
    solver: SolverSettings = field(default_factory=SolverSettings)

    def __post_init__(self):
        if self.power is not None and self.power < 0:
            raise ConfigError("--power must be non-negative")
        if self.rate is not None and self.rate <= 0:
            raise ConfigError("--rate must be positive")
        if self.ell is not None and self.ell < 2:
            raise ConfigError("--ell must be at least 2")
        if self.eta is not None and not 0 < self.eta < 1:
            raise ConfigError("--eta must lie in (0, 1)")
        if self.trials < 1:
            raise ConfigError("--trials must be at least 1")
        if self.seed < 0:
            raise ConfigError("--seed must be non-negative")
        if self.format not in ("csv", "json"):
            raise ConfigError("--format must be csv or json")
        if not 0 <= self.kappa < 1:
            raise ConfigError("--kappa must lie in [0, 1)")
        if self.m_cap < 2:
            raise ConfigError("--m-cap must be at least 2")
        if not 0 < self.alpha < 0.5:
            raise ConfigError("--alpha must lie in (0, 1/2)")

    def to_dict(self) -> dict:
        return asdict(self)
