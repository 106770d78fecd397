"""mjlab: routing tokens among the PEFT adapters a transformer already has.

Small frozen causal transformer + LoRA/LoRA-FA/Propulsion adapters, with
gradient-free clustering-based routing (k-means init, EMA-tracked centers),
a learned-router MoE baseline, and numerical oracles for the rank and
parameter-count claims.
"""

__version__ = "0.1.0"
