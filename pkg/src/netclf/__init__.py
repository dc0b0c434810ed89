"""netclf: data-driven ISS controller and Lyapunov synthesis for polynomial networks."""

__version__ = "0.1.0"
