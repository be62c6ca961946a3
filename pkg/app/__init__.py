"""
Behavior Sequence Transformer CTR 엔진
"""

__version__ = "1.0.0"
