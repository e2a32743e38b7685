"""
Habitat-aware joint abundance estimation from standardized and opportunistic counts
"""

__version__ = "1.0.0"
__description__ = "Habitat-stratified Poisson models of standardized and opportunistic species counts"
