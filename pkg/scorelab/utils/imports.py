from pytorch_lightning.utilities.imports import _module_available

_MATPLOTLIB_AVAILABLE = _module_available("matplotlib")
_TQDM_AVAILABLE = _module_available("tqdm")
