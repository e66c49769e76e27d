"""Twin-experiment harness, oracles and command-line interface."""
