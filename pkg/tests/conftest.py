# Pytest configuration for test suite

import sys
from pathlib import Path

# Add project root to Python path
# so the flat modules (model.py, operators.py, ...)
# import without installing anything

project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))
