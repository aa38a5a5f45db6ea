"""The block-string mini-language and the three named stacks.

Architectures are written as strings over the four block letters plus
grouping: ``(...)`` makes the span share one residual connection and
``Nx(...)`` repeats it. Three stacks come named out of the box:

    attn-qrnn   | + 3x(q|f) + (qafff)     recurrence below, one late attention
    par         | + 4x(afff) + 5x(f)      no recurrence at all
    hybrid      (|q|qf) + 4x(afff) + 3x(f)  recurrent bottom, attention top

This script parses each one, tallies its blocks, and sizes the resulting
models at full scale to show where the parameters live.
"""

import numpy as np

from hybridlm.arch import NAMED_ARCHITECTURES, parse_architecture
from hybridlm.errors import ArchitectureError
from hybridlm.model import ModelConfig, build_model, count_params

print("-- parsing --")
for name, text in NAMED_ARCHITECTURES.items():
    spec = parse_architecture(text)
    tally = ", ".join(f"{spec.count(t)} {t}" for t in "qaf|")
    print(f"{name:<10} {text:<26} -> {tally}")

# Errors point at the offending character.
print("\nbad strings fail with a position:")
for bad in ("(qf", "3x(qz)", "()"):
    try:
        parse_architecture(bad)
    except ArchitectureError as exc:
        print(f"  {bad!r:<10} {exc}")

# Size the three stacks with their published dimensions over a byte-sized
# character vocabulary. The non-embedding count ignores the embedding and
# the output head, leaving only the stack between them.
print("\n-- parameters at full scale (vocabulary 257) --")
full_dims = {
    "attn-qrnn": dict(embed_dim=768, boom_dim=3072, num_heads=12,
                      train_attn_len=1024),
    "par": dict(embed_dim=512, boom_dim=2048, num_heads=8, train_attn_len=768),
    "hybrid": dict(embed_dim=512, boom_dim=2048, num_heads=8, train_attn_len=768),
}
counts = {}
for name, dims in full_dims.items():
    cfg = ModelConfig(vocab_size=257, **dims)
    model = build_model(parse_architecture(NAMED_ARCHITECTURES[name]), cfg, 0)
    inner = count_params(model, include_embeddings=False)
    counts[name] = inner
    print(f"{name:<10} total {count_params(model):>12,}   "
          f"non-embedding {inner:>12,}")

print("\nordering attn-qrnn < par < hybrid:",
      counts["attn-qrnn"] < counts["par"] < counts["hybrid"])
spread = abs(counts["par"] - counts["hybrid"]) / counts["hybrid"]
print(f"par and hybrid sit {spread:.1%} apart despite different layer mixes")

# The same letters compose freely: a custom stack is one string away.
print("\n-- a custom stack --")
custom = "(|qf) + 2x(af) + (f)"
spec = parse_architecture(custom)
model = build_model(spec, ModelConfig(vocab_size=257, embed_dim=128,
                                      boom_dim=512, num_heads=4), 0)
print(f"{custom}  ->  {count_params(model):,} parameters")
for i, layer in enumerate(model.layers, start=1):
    kind = type(layer).__name__
    size = sum(p.data.size for p in layer.parameters())
    print(f"  layer {i}: {kind:<18} {size:>9,}")
