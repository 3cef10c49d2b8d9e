"""Factor-scoped LLM program evolution engine.

Evolves region-tagged programs by asking a chat-model editor to revise one
functional factor at a time, enforcing factor-local feasibility with a
line-based diff, archiving elites in an islanded MAP-Elites store, and
reporting search-dynamics metrics from JSONL traces.
"""

__version__ = "0.1.0"
