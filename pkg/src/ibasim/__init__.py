"""
ibasim: NG-EPON upstream simulator

A discrete-event model of a two-wavelength 50G EPON upstream with IPACT-style
first-fit DBA and a SARSA agent that tunes one ONU's grant cap for latency.
"""

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "sim",
    "traffic",
    "pon",
    "rl",
    "metrics",
    "config",
    "harness",
]
