"""Modules package - Barthe objective, Newton driver, clique machinery, sparsifier, smoothed analysis."""
