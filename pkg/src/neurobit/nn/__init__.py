"""Neural network layers, recurrent cells, training and checkpoints."""
