"""Global distance-distribution separation laboratory."""
