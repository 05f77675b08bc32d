"""Show how the threshold policy's share of the reward-mass bound falls to 1/2
on the two-period worst-case family, against 1/(2 - eps)."""
from prophet_match.prophet import prophet_report, tight_instance

print(f"{'eps':>8} {'E[V]/R':>10} {'1/(2-eps)':>10} {'E[V]/E[OFF]':>12}")
for eps in (0.9, 0.5, 0.2, 0.1, 0.05, 0.01, 0.001):
    rep = prophet_report(tight_instance(eps))
    print(f"{eps:>8g} {rep['ratio_to_bound']:>10.6f} {1 / (2 - eps):>10.6f} {rep['ratio']:>12.6f}")
