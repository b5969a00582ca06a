"""groundkit: build person-grounding benchmarks and train a context-object-aware grounder.

The package splits into independent layers:

- ``core``      domain types and the on-disk dataset / feature formats
- ``geometry``  axis-aligned box arithmetic (IoU, location features)
- ``rulekit``   declarative QA-to-statement rewriting and dataset filters
- ``numcore``   dense numeric kernel with reverse-mode differentiation
- ``grounder``  the grounding model, its losses, and the training loop
- ``benchkit``  heuristic baselines, evaluation, synthetic scenes
- ``cli``       one entry point exposing everything as subcommands
"""

__version__ = "0.1.0"
