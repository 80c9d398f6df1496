# Counterfactual robustness under model change
__version__ = "0.1.0"
