__version__ = "0.1.0dev"
__author__ = "ScoreLab contributors"
__author_email__ = "scorelab@users.noreply.github.com"
__license__ = 'Apache-2.0'
__copyright__ = f"Copyright (c) 2026, {__author__}."
__homepage__ = "https://github.com/scorelab/scorelab"
__docs__ = "A desk-scale laboratory for the sample complexity of score-based diffusion models"
__long_doc__ = """
ScoreLab trains and samples score-based diffusion models on Gaussian-mixture targets whose time-t scores are known
exactly, so that every error term of the sample-complexity analysis (approximation, statistical, optimization,
discretization, initialization and truncation) can be measured in isolation and checked against its predicted rate.
"""

__all__ = [
    "__author__",
    "__author_email__",
    "__copyright__",
    "__docs__",
    "__homepage__",
    "__license__",
    "__version__",
]
