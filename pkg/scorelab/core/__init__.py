from scorelab.core.registry import LabRegistry  # noqa: F401
