"""Permissioned ledger for ICS device logs with a multi-source BLSTM anomaly detector."""

__version__ = "0.1.0"
