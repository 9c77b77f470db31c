"""Self-supervised wireless transformer: simulation, augmentation, pretraining, evaluation."""
