# Shared library modules for KOVA policy evaluation
