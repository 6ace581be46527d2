"""Singular-terminal BSDE solvers and their verification."""
