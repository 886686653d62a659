"""Small CNN stack, training and the external embedding protocol."""
