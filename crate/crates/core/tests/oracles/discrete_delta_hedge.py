"""Brute-force discrete delta-hedge simulation (numpy), independent of the Rust code.

Short one call on 100 shares, daily rebalancing to 100 * Delta, settlement at
intrinsic value, final unwind of the stock position. Prints mean, std and
kurtosis of the total hedging cost (positive = loss).
"""
import numpy as np
from scipy.stats import norm


def bs(S, K, tau, sig):
    if tau <= 0:
        return np.maximum(S - K, 0.0), (S > K) + 0.5 * (S == K)
    d1 = (np.log(S / K) + 0.5 * sig**2 * tau) / (sig * np.sqrt(tau))
    d2 = d1 - sig * np.sqrt(tau)
    return S * norm.cdf(d1) - K * norm.cdf(d2), norm.cdf(d1)


def simulate(n, mu=0.05, sig=0.2, s0=100.0, k=100.0, steps=30, alpha=0.0, beta=0.01, mult=100, seed=1):
    rng = np.random.default_rng(seed)
    dt = 1 / 365
    T = steps * dt
    S = np.full(n, s0)
    H = np.zeros(n)
    cash = np.zeros(n)
    C, D = bs(S, k, T, sig)
    cash += mult * C  # premium received
    for i in range(steps):
        target = D * mult
        dh = target - H
        cash -= dh * S + alpha * S * (np.abs(dh) + beta * dh**2)
        H = target
        S = S * np.exp((mu - 0.5 * sig**2) * dt + sig * np.sqrt(dt) * rng.standard_normal(n))
        _, D = bs(S, k, T - (i + 1) * dt, sig)
    cash += H * S - alpha * S * (np.abs(H) + beta * H**2)
    cash -= mult * np.maximum(S - k, 0.0)
    cost = -cash
    return cost


if __name__ == "__main__":
    for a in (0.0, 0.01):
        c = simulate(1_000_000, alpha=a)
        kurt = ((c - c.mean()) ** 4).mean() / c.var() ** 2
        print(f"alpha={a} mean={c.mean():.6f} std={c.std(ddof=1):.6f} kurtosis={kurt:.4f}")
    c = simulate(1_000_000, sig=0.4)
    print(f"sigma=0.4 mean={c.mean():.6f} std={c.std(ddof=1):.6f}")
