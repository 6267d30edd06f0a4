class SimulationAbort(RuntimeError):
    """A run produced non-finite values or broke a conservation guard."""
