"""Efficiency tables: width variants, the ablation lattice and the comparison against published baselines.

    python3 scripts/reproduce_tables.py [--bench] [--out DIR]
"""
import argparse
from pathlib import Path

from unext.analysis import REFERENCE_ABLATION, REFERENCE_WIDTHS, bench_latency, count_flops, emit_comparison
from unext.arch import CANONICAL, build_model, table2_variants


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--bench", action="store_true", help="also time 10 forwards per model (slow-ish)")
    ap.add_argument("--out", default="results")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    lines = ["| config | params (M) | published | GMAC | published | ms | published |", "|---|---:|---:|---:|---:|---:|---:|"]
    for name, cfg in CANONICAL.items():
        rep = count_flops(cfg)
        ms = bench_latency(build_model(cfg).eval()).mean_ms if args.bench else None
        p_ref, ms_ref, g_ref = REFERENCE_WIDTHS[name]
        lines.append(f"| {name} | {rep.params / 1e6:.3f} | {p_ref} | {rep.gflops_mac_convention:.3f} | {g_ref} | "
                     f"{'-' if ms is None else f'{ms:.1f}'} | {ms_ref} |")
        (out / f"cost_{name}.csv").write_text(rep.to_csv())
    widths = "\n".join(lines)

    lines = ["| variant | params (M) | published | GMAC | published |", "|---|---:|---:|---:|---:|"]
    for (label, cfg), ref in zip(table2_variants(), REFERENCE_ABLATION):
        rep = count_flops(cfg)
        lines.append(f"| {label} | {rep.params / 1e6:.3f} | {ref[1]} | {rep.gflops_mac_convention:.3f} | {ref[3]} |")
    ablation = "\n".join(lines)

    model = build_model(CANONICAL["unext"]).eval()
    cmp = emit_comparison(count_flops(model), bench_latency(model) if args.bench else None)
    (out / "comparison.csv").write_text(cmp.to_csv())

    text = f"## Widths\n\n{widths}\n\n## Ablation lattice\n\n{ablation}\n\n## Comparison\n\n{cmp.to_markdown()}\n"
    (out / "tables.md").write_text(text)
    print(text)


if __name__ == "__main__":
    main()
