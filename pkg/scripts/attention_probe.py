"""Per-layer attention mass on trigger tokens, backdoored encoder vs its clean twin.

    python scripts/attention_probe.py --scenes 200 --out runs/probe

Prints one row per layer. With --out, also writes per-layer saliency maps
(PGM, one cell per patch) for the first scene of each encoder.
"""

import argparse
from pathlib import Path

import numpy as np

from trigger_erasure import afm, btf
from trigger_erasure import pipeline as P
from trigger_erasure import testbed as tb
from trigger_erasure.config import PipelineConfig
from trigger_erasure.numeric import RandomStream


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--scenes", type=int, default=200)
    ap.add_argument("--trigger", default=tb.CHECKERBOARD, choices=tb.TRIGGER_TYPES)
    ap.add_argument("--fraction", type=float, default=0.10)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    models = P.build_models(PipelineConfig(seed=args.seed))
    rng = RandomStream.from_seed(args.seed).child(99)
    scenes = [tb.generate_scene(rng.child(i), i % len(tb.TASKS), args.trigger, args.fraction) for i in range(args.scenes)]
    images = np.stack([img for _, img, _ in scenes])
    touched = [np.flatnonzero(tb.patch_coverage(tb.render(s)[1]) > 0) for s, _, _ in scenes]

    outs = {}
    for name, enc in (("backdoored", models.encoder), ("clean twin", models.clean_twin)):
        out = tb.encoder_forward(enc, images)
        outs[name] = out
        mass = np.mean([tb.trigger_attention_mass(out.attentions[i], touched[i]) for i in range(len(scenes))], axis=0)
        print(f"{name:>10}: " + "  ".join(f"L{l + 1} {m:.3f}" for l, m in enumerate(mass)))

    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        g = models.encoder.grid
        for name, out in outs.items():
            single = tb.EncoderOutput(out.attentions[0], out.tokens[0], out.cls[0], out.pooled[0], out.detector[0])
            stack = tb.attention_stack(models.encoder, single)
            for l in sorted(stack.layers):
                v = afm.token_saliency(afm.mean_attention(stack, l), stack.image_cols)
                btf.write_pgm(out_dir / f"{name.replace(' ', '-')}-layer{l}.pgm", v.reshape(g, g))
        btf.write_ppm(out_dir / "scene.ppm", images[0])


if __name__ == "__main__":
    main()
