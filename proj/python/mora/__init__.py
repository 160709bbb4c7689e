"""Model-reweighing attacks against toy ensemble defenses."""

from ._mora import *  # noqa: F401,F403
from ._mora import __version__  # noqa: F401
