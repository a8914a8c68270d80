# Keep version in a tiny module with no third-party imports.
# This is used by setuptools during build without importing occkit/__init__.py.
__version__ = "0.1.0"
