"""Safe stabilization of stochastic time-delay systems."""
