"""Package data: mesh layout tables."""
