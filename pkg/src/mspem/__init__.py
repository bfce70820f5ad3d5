"""Marginal structural piecewise-exponential models for workload and injury data.

Subpackages by task:

- ``basis``, ``glm``: B-splines and penalized IRLS.
- ``survdata``: ingestion, counting-process records, PED rows, Kaplan-Meier.
- ``wce``, ``ipw``, ``model``: lagged exposure, weights, the unified fit.
- ``cox``: Andersen-Gill Cox model, Schoenfeld tests, E-values.
- ``simlab``: healthy-worker simulation harness.
- ``cluster``: workload tiers.
"""

__version__ = "0.1.0"
