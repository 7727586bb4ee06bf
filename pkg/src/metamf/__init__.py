"""Meta matrix factorization (MetaMF / NoMetaMF) with privacy-budget evaluation."""

__version__ = "0.1.0"
