"""Make the suite runnable from a clean checkout without installation."""

import sys
from pathlib import Path

try:
    import mixfem  # noqa: F401
except ImportError:
    sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))
