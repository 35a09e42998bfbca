"""coreselect: weighted data summaries for twice-differentiable models.

The library solves cardinality-constrained bilevel problems: pick a small
weighted subset such that a model trained on the subset stays good on the full
data. Submodules: data (datasets and generators), models (weighted ERM inner
problems), hypergrad (implicit-gradient engine), select (selection algorithms),
proxy (kernel feature maps), expdesign (closed-form design objectives),
compsense (measurement selection), streaming (merge-reduce buffer and scenario
runner), baselines (model-agnostic selectors) and cli (experiment runner).
"""

__version__ = "0.1.0"
