"""Energy, savings and CO2e columns recomputed from the published per-run energies."""
from terrai import green

PUBLISHED_J = {"small": 16619.0, "baseline": 33172.0, "large": 52769.0}

if __name__ == "__main__":
    rows = green.green_report({k: green.EnergySample(k, v) for k, v in PUBLISHED_J.items()})
    print(f"{'variant':<10}{'J':>8}{'kWh':>12}{'dE kWh':>12}{'CO2e g':>9}{'gain %':>9}")
    for r in rows:
        d = f"{r.savings_vs_baseline_kwh:.3e}" if r.savings_vs_baseline_kwh is not None else "-"
        co2 = f"{r.co2e_g:.3f}" if r.co2e_g is not None else "-"
        gain = f"{r.efficiency_gain_pct:.2f}" if r.efficiency_gain_pct is not None else "-"
        print(f"{r.variant:<10}{r.joules:>8.0f}{r.kwh:>12.4e}{d:>12}{co2:>9}{gain:>9}")
