"""Pre-print defect screening for FFF G-code."""
