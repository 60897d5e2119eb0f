"""Portfolio-allocation research engine.

Two strategy families under one backtest harness: a policy-gradient agent
trained on market-replay environments with a differential-Sharpe reward,
and a rolling mean-variance (max-Sharpe) solver with covariance shrinkage.
"""

__version__ = "0.1.0"

from . import backtest, cli, diff_sharpe, market_data, mvo, neural, ppo, protocol, replay_env

__all__ = [
    "backtest", "cli", "diff_sharpe", "market_data", "mvo", "neural", "ppo",
    "protocol", "replay_env", "__version__",
]
