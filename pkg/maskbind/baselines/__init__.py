"""Non-learned comparison baselines."""
