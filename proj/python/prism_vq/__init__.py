"""Python bindings for the PRISM-VQ stock-ranking pipeline."""

from ._core import (
    PrismError,
    SyntheticMarket,
    backtest,
    config_keys,
    config_text,
    fit_predict,
    max_drawdown,
    portfolio_metrics,
    rank_ic,
    spearman,
    synthetic_market,
    topk_dropn,
    wilcoxon,
)

__all__ = [
    "PrismError",
    "SyntheticMarket",
    "backtest",
    "config_keys",
    "config_text",
    "fit_predict",
    "max_drawdown",
    "portfolio_metrics",
    "rank_ic",
    "spearman",
    "synthetic_market",
    "topk_dropn",
    "wilcoxon",
]
