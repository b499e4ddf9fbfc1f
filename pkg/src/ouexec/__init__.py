"""Optimal execution and statistical arbitrage under multivariate OU prices."""
