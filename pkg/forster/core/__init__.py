"""Core numerical substrate: errors, RNG streams, dense linear algebra, operators."""
