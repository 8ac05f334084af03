"""
mvocc - multi-view occupancy reconstruction
Occupancy-field reconstruction from posed RGB views with geometry-aware,
variance-conditioned feature aggregation
"""

# Export the entry points for easy importing
from .main import main, run_app

__version__ = '1.0.0'

__all__ = ['main', 'run_app', '__version__']
