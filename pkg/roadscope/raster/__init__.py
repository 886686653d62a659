"""Scene container and tile extraction."""
