"""Multi-agent trajectory forecasting with selective state-space blocks on a small numpy autodiff engine."""

__version__ = "0.1.0"
