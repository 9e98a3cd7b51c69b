"""Budget-adaptive curriculum training on a synthetic verifiable-reasoning
environment: a budget-conditioned policy, a pass-rate-driven budget
scheduler, truncation-aware dense rewards, and selectable advantage
estimators (fixed-budget group mean, per-budget group mean, and a learned
budget-conditioned value baseline).
"""

__version__ = "0.1.0"
