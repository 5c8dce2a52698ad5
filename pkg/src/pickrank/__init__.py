"""Simulated package-picking workbench with a learned pick-success model.

Modules: ``scene`` (belt scenes), ``perception`` (heightmap, segments,
planes, adjacency graph), ``eoat`` (suction tool and candidate picks),
``features``, ``oracle`` (ground-truth success model and datasets), ``gbdt``
(boosted trees), ``ranking`` (pick rankers and scene clearing),
``evaluation`` (AUC, bootstrap, A/B tests), ``config`` and ``cli``.
"""

__version__ = "0.1.0"
