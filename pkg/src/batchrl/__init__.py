"""Batch reinforcement learning on an industrial control benchmark surrogate.

Modules: ``env`` (surrogate dynamics), ``swarm`` (particle swarm optimizer),
``model`` (recurrent system model), ``psop`` (swarm planning on the model),
``nfq`` (fitted Q-iteration), ``rcnn`` (policy trained through the model) and
``harness`` (experiments, oracle and result tables).
"""

__version__ = "0.1.0"
