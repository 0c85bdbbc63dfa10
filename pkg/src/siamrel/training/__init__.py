"""Episode construction, losses, schedule and the training loop."""
