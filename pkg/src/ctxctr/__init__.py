"""Online field-aware FM click prediction with an auxiliary context-CTR model.

Modules: ``core_model`` (FFM + AdaGrad), ``context_model`` (projection,
bucketing, integration modes), ``datagen`` (hashing, synthetic logs, JSONL),
``evaluation`` (RIG, AUC, lifts, FLOPs change), ``serving_sim`` (replay,
serving counters, experiments) and ``cli``.
"""

__version__ = "0.1.0"
