"""Build every model configuration and look at sizes and causality.

Two families share one layout. The first uses a learned filterbank on raw
20 ms frames; the second masks compressed STFT magnitudes. Each family has
an echo-only model, a personalized model without far-end input, and three
joint variants: a naive one that simply concatenates inputs, one with an
align-block and a bypass output, and the same plus the attention-weight
skip connection into the second stage.

    python3 demos/02_model_family.py
"""
from pseaec.models import ModelConfig, build_model, causality_check, param_breakdown, param_count

rows = [("aec", None), ("pse", None), ("pse_aec", "naive"), ("pse_aec", "no_sc"), ("pse_aec", "sc")]

for variant in ("e3net", "vfl"):
    print(variant)
    for task, ablation in rows:
        model = build_model(ModelConfig(variant=variant, task=task, ablation=ablation), seed=0)
        paths = ["full", "bypass"] if model.has_bypass else ["full"]
        diff = max(causality_check(model, trials=2, path=p) for p in paths)
        print(f"  {model.config.describe():<22} {param_count(model) / 1e6:6.2f} M  "
              f"paths={'+'.join(paths):<11} future-leak={diff:.1e}")

# where the parameters sit in the default joint model
model = build_model(ModelConfig(), seed=0)
print("\nbreakdown of", model.config.describe())
for name, n in param_breakdown(model).items():
    print(f"  {name:<12} {n / 1e6:6.3f} M")
