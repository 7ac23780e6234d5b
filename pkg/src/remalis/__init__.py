"""Cooperative multi-agent coordination engine with intention propagation.

Subpackages cover the differentiable substrate (:mod:`remalis.numerics`),
the intention data model and wire codec (:mod:`remalis.intent`), the
propagation channel (:mod:`remalis.channel`), grounding with confusion
tracking (:mod:`remalis.grounding`), dependency-aware planning
(:mod:`remalis.planning`), specialized execution policies
(:mod:`remalis.execution`), the training loop (:mod:`remalis.trainer`),
two simulated task environments (:mod:`remalis.envs`) and the CLI /
experiment harness (:mod:`remalis.harness`, :mod:`remalis.cli`).
"""

__version__ = "0.1.0"
