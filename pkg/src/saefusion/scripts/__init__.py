"""
Long-running suites for saefusion.

Run modules via ``python -m saefusion.scripts.<name>``.
"""
