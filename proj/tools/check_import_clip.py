#!/usr/bin/env python3
"""Cross-check import_clip.py against open_clip on a small random CLIP.

Builds an OpenAI-layout CLIP with open_clip, perturbs every parameter,
converts it, and compares zero-shot pair scores from the vlq binary with
scores computed by open_clip on the same pixels and prompts.

usage: check_import_clip.py VLQ_BINARY WORK_DIR
exit 0 on agreement, 1 on mismatch, 77 when torch/open_clip are missing.
"""

import subprocess
import sys
from pathlib import Path

try:
    import numpy as np
    import open_clip
    import torch
    from PIL import Image
except ImportError as e:
    print(f"skipping: {e}")
    sys.exit(77)

sys.path.insert(0, str(Path(__file__).resolve().parent))
import import_clip  # noqa: E402

TEMPERATURE = 50.0
TOLERANCE = 1e-5


def build_model():
    torch.manual_seed(0)
    model = open_clip.model.CLIP(
        embed_dim=24,
        vision_cfg=open_clip.model.CLIPVisionCfg(layers=2, width=64, head_width=32, patch_size=16, image_size=48),
        text_cfg=open_clip.model.CLIPTextCfg(context_length=77, vocab_size=49408, width=64, heads=2, layers=2),
        quick_gelu=True,
    )
    with torch.no_grad():
        for name, p in model.named_parameters():
            if "logit" in name:
                continue
            p.add_(0.05 * torch.randn_like(p))
    return model.eval()


def reference_scores(model, images, good, bad):
    tok = open_clip.get_tokenizer("ViT-B-32")
    mean = torch.tensor(import_clip.CLIP_MEAN).view(1, 3, 1, 1).float()
    std = torch.tensor(import_clip.CLIP_STD).view(1, 3, 1, 1).float()
    with torch.no_grad():
        t = model.encode_text(tok([good, bad])).double()
        t = t / t.norm(dim=-1, keepdim=True)
        out = []
        for path in images:
            px = torch.from_numpy(np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0)
            px = (px.permute(2, 0, 1).unsqueeze(0) - mean) / std
            v = model.encode_image(px).double()[0]
            v = v / v.norm()
            s = t @ v
            out.append(float(1.0 / (1.0 + torch.exp(TEMPERATURE * (s[1] - s[0])))))
    return out


def main():
    vlq, work = Path(sys.argv[1]), Path(sys.argv[2])
    work.mkdir(parents=True, exist_ok=True)
    model = build_model()
    torch.save(model.state_dict(), work / "clip.pt")
    merges = Path(open_clip.__file__).parent / "bpe_simple_vocab_16e6.txt.gz"
    # the test model uses 32-wide heads, so the width / 64 default does not apply
    import_clip.main([str(work / "clip.pt"), str(merges), str(work / "backbone.vlqt"),
                      "--vision-heads", "2", "--text-heads", "2"])

    rng = np.random.default_rng(1)
    images = []
    for i in range(4):
        path = work / f"img{i}.png"
        Image.fromarray(rng.integers(0, 256, size=(48, 48, 3), dtype=np.uint8)).save(path)
        images.append(path)

    common = [str(vlq), "--backbone", str(work / "backbone.vlqt"), "--out-dir", str(work / "run"),
              "--textual-prompts", "0", "--visual-prompts", "0", "--conditioning", "0", "--auxiliary-task", "0",
              "--temperature", str(TEMPERATURE), "--eval-crops", "1"]
    subprocess.run(common + ["synth", "--images", "4", "--groups", "2"], check=True, stdout=subprocess.DEVNULL)
    subprocess.run(common + ["--manifest", str(work / "run" / "manifest.csv"), "--epochs", "0", "train"], check=True,
                   stdout=subprocess.DEVNULL)
    out = subprocess.run(common + ["predict", "--state", str(work / "run" / "state.ckpt")] + [str(p) for p in images],
                         check=True, capture_output=True, text=True).stdout
    got = [float(line.split(",")[-1]) for line in out.strip().splitlines() if not line.startswith("image")]
    want = reference_scores(model, images, "Good photo.", "Bad photo.")

    worst = max(abs(a - b) for a, b in zip(got, want))
    for a, b in zip(got, want):
        print(f"vlq {a:.6f}  open_clip {b:.6f}")
    print(f"max abs diff {worst:.2e} (tolerance {TOLERANCE:g})")
    return 0 if len(got) == len(want) and worst < TOLERANCE else 1


if __name__ == "__main__":
    sys.exit(main())
