"""
相對線索目標語音擷取核心模組
"""

__version__ = "0.1.0"
