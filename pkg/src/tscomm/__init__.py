"""Decentralized traffic signal control with one-step arrival communication.

Modules, bottom-up: ``roadnet`` (network model and scenario files),
``microsim`` (queue simulator), ``env`` (multi-agent facade), ``tensor``
(autodiff kernel), ``unicomm`` and ``unilight`` (the two networks),
``trainer`` (shared-parameter DQN), ``harness`` (baselines, metrics,
evaluation) and ``cli``.
"""

__version__ = "0.1.0"
