"""Loop-detector incident detection toolkit.

Pipeline: synthetic corpus generation -> preprocessing -> weak-supervision
labeling -> LSTM classification -> deep-ensemble uncertainty -> offline and
streaming incident detection scored by detection rate / false alarm rate.
"""

__version__ = "0.1.0"
