"""cfagent: an agentic runtime for counterfactual image explanations.

A reasoning loop drives independent tool servers over a JSON frame protocol,
generates candidate counterfactual edits, scores them with classifier and
similarity metrics, and selects the best candidate under a fixed budget.
Synthetic stub tools make every behavior deterministic and oracle-checkable.
"""

__version__ = "0.1.0"
