"""Deep matrix factorization for matrix completion, with tools to study its
saddle-to-saddle training dynamics."""

__version__ = "0.1.0"
