"""Flow-level stability of RIS-assisted cell-free uplinks."""
