"""Pre-trained backdoor toolkit: stylized triggers, context-free poisoning,
backdoored backbones, and their transfer to downstream tasks.

.. include:: ../../README.md
   :start-line: 2
"""

# pkg
from .attrdict import __pdoc__ as doc1
from .attrdict import AttrDict

from .errors import TrojanboxError
from .errors import ConfigurationError
from .errors import DependencyError

from .env import load_env
from .config import build_config
from .config import load_config
from .config import parse_docopt

from .metrics import MetricsReport
from .poison import PoisonSpec
from .poison import TriggerPattern
from .stylizer import StylizerConfig


__version__ = "0.1.0"
__all__ = (
    "__version__",
    "AttrDict",
    "TrojanboxError",
    "ConfigurationError",
    "DependencyError",
    "load_env",
    "build_config",
    "load_config",
    "parse_docopt",
    "MetricsReport",
    "PoisonSpec",
    "TriggerPattern",
    "StylizerConfig",
)

# Update pdoc at all levels.
__pdoc__ = {}
for doc in [doc1]:
    __pdoc__.update(doc)
