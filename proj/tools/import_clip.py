#!/usr/bin/env python3
"""Convert an OpenAI-layout CLIP ViT checkpoint into a vlq backbone container.

Accepted inputs:
  * the TorchScript archives published with the original CLIP release
    (e.g. ViT-B-32.pt),
  * a pickled state dict or .safetensors file with the same key layout
    (open_clip checkpoints for the OpenAI architecture use it).

The BPE merge list (bpe_simple_vocab_16e6.txt or .txt.gz) is copied next to
the output as merges.txt and referenced from the container header, so keep
the two files together.

Conversions applied:
  * visual.conv1 (d, 3, p, p) is flattened to (d, 3*p*p), which matches the
    (channel, row, col) patch order of the C++ side,
  * attn.in_proj_{weight,bias} is split into q/k/v,
  * visual.proj and text_projection are transposed to (joint, width),
  * vectors become 1 x n rows.

The text tower keeps CLIP's causal mask. CLIP pools the end-of-text token,
which the vlq tokenizer always places last, so no padding is emitted.

Needs numpy, plus torch for .pt inputs or safetensors for .safetensors inputs.
"""

import argparse
import gzip
import json
import re
import shutil
import struct
import sys
from pathlib import Path

import numpy as np

CLIP_MEAN = [0.48145466, 0.4578275, 0.40821073]
CLIP_STD = [0.26862954, 0.26130258, 0.27577711]
CONTAINER_VERSION = 1
BACKBONE_FORMAT_VERSION = 1
BLOCK_KEYS = [
    "ln_1.weight", "ln_1.bias",
    "attn.q_proj.weight", "attn.q_proj.bias",
    "attn.k_proj.weight", "attn.k_proj.bias",
    "attn.v_proj.weight", "attn.v_proj.bias",
    "attn.out_proj.weight", "attn.out_proj.bias",
    "ln_2.weight", "ln_2.bias",
    "mlp.c_fc.weight", "mlp.c_fc.bias",
    "mlp.c_proj.weight", "mlp.c_proj.bias",
]


def load_state_dict(path):
    if path.suffix == ".safetensors":
        from safetensors.numpy import load_file
        return {k: np.asarray(v) for k, v in load_file(str(path)).items()}
    import torch
    try:
        sd = torch.jit.load(str(path), map_location="cpu").state_dict()
    except RuntimeError:
        sd = torch.load(str(path), map_location="cpu", weights_only=True)
        if "state_dict" in sd:
            sd = sd["state_dict"]
    out = {}
    for k, v in sd.items():
        k = k[len("module."):] if k.startswith("module.") else k
        out[k] = v.detach().float().cpu().numpy()
    return out


def as_row(v):
    return np.asarray(v, dtype=np.float32).reshape(1, -1)


def count_layers(sd, prefix):
    pat = re.compile(re.escape(prefix) + r"(\d+)\.")
    return len({int(m.group(1)) for k in sd for m in [pat.match(k)] if m})


def convert_block(sd, src, dst, width):
    w = sd[src + "attn.in_proj_weight"]
    b = sd[src + "attn.in_proj_bias"]
    t = {
        "ln_1.weight": as_row(sd[src + "ln_1.weight"]),
        "ln_1.bias": as_row(sd[src + "ln_1.bias"]),
        "attn.q_proj.weight": w[:width],
        "attn.q_proj.bias": as_row(b[:width]),
        "attn.k_proj.weight": w[width:2 * width],
        "attn.k_proj.bias": as_row(b[width:2 * width]),
        "attn.v_proj.weight": w[2 * width:],
        "attn.v_proj.bias": as_row(b[2 * width:]),
        "attn.out_proj.weight": sd[src + "attn.out_proj.weight"],
        "attn.out_proj.bias": as_row(sd[src + "attn.out_proj.bias"]),
        "ln_2.weight": as_row(sd[src + "ln_2.weight"]),
        "ln_2.bias": as_row(sd[src + "ln_2.bias"]),
        "mlp.c_fc.weight": sd[src + "mlp.c_fc.weight"],
        "mlp.c_fc.bias": as_row(sd[src + "mlp.c_fc.bias"]),
        "mlp.c_proj.weight": sd[src + "mlp.c_proj.weight"],
        "mlp.c_proj.bias": as_row(sd[src + "mlp.c_proj.bias"]),
    }
    return [(dst + k, t[k]) for k in BLOCK_KEYS]


def convert(sd, vision_heads=None, text_heads=None, num_merges=48894):
    if "visual.conv1.weight" not in sd:
        raise SystemExit("not a CLIP ViT checkpoint (visual.conv1.weight missing; ResNet towers are unsupported)")
    conv = sd["visual.conv1.weight"]
    dv, _, patch, _ = conv.shape
    dl = sd["ln_final.weight"].shape[0]
    v_layers = count_layers(sd, "visual.transformer.resblocks.")
    t_layers = count_layers(sd, "transformer.resblocks.")
    if v_layers != t_layers:
        raise SystemExit(f"towers differ in depth ({v_layers} vs {t_layers}); the C++ backbone needs equal depth")
    grid = round((sd["visual.positional_embedding"].shape[0] - 1) ** 0.5)
    mlp_v = sd["visual.transformer.resblocks.0.mlp.c_fc.weight"].shape[0]
    mlp_t = sd["transformer.resblocks.0.mlp.c_fc.weight"].shape[0]
    if mlp_v * dl != mlp_t * dv or mlp_v % dv:
        raise SystemExit(f"unsupported MLP widths {mlp_v}/{mlp_t}")

    config = {
        "num_layers": v_layers,
        "vision_width": int(dv),
        "text_width": int(dl),
        "joint_dim": int(sd["text_projection"].shape[1]),
        "patch_count": grid * grid,
        "image_size": int(grid * patch),
        "vocab_size": int(sd["token_embedding.weight"].shape[0]),
        "max_text_len": int(sd["positional_embedding"].shape[0]),
        "vision_heads": vision_heads or max(1, dv // 64),
        "text_heads": text_heads or max(1, dl // 64),
        "mlp_ratio": mlp_v // dv,
        "causal_text": True,
        "pixel_mean": CLIP_MEAN,
        "pixel_std": CLIP_STD,
    }

    tensors = [
        ("visual.patch_embedding.weight", conv.reshape(dv, -1)),
        ("visual.class_embedding", as_row(sd["visual.class_embedding"])),
        ("visual.positional_embedding", sd["visual.positional_embedding"]),
        ("visual.ln_pre.weight", as_row(sd["visual.ln_pre.weight"])),
        ("visual.ln_pre.bias", as_row(sd["visual.ln_pre.bias"])),
    ]
    for i in range(v_layers):
        tensors += convert_block(sd, f"visual.transformer.resblocks.{i}.", f"visual.blocks.{i}.", dv)
    tensors += [
        ("visual.ln_post.weight", as_row(sd["visual.ln_post.weight"])),
        ("visual.ln_post.bias", as_row(sd["visual.ln_post.bias"])),
        ("visual.proj", sd["visual.proj"].T),
        ("text.token_embedding", sd["token_embedding.weight"]),
        ("text.positional_embedding", sd["positional_embedding"]),
    ]
    for i in range(t_layers):
        tensors += convert_block(sd, f"transformer.resblocks.{i}.", f"text.blocks.{i}.", dl)
    tensors += [
        ("text.ln_final.weight", as_row(sd["ln_final.weight"])),
        ("text.ln_final.bias", as_row(sd["ln_final.bias"])),
        ("text.proj", sd["text_projection"].T),
    ]
    metadata = {
        "config": config,
        "tokenizer": {"type": "clip_bpe", "merges": "merges.txt", "num_merges": num_merges},
    }
    return metadata, tensors


def write_container(path, metadata, tensors):
    entries, chunks, offset = [], [], 0
    for name, value in tensors:
        arr = np.ascontiguousarray(value, dtype="<f4")
        if arr.ndim != 2:
            raise SystemExit(f"tensor {name} is not 2-d after conversion: {arr.shape}")
        data = arr.tobytes()
        entries.append({"name": name, "dtype": "f32", "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = json.dumps({
        "format_version": BACKBONE_FORMAT_VERSION,
        "kind": "backbone",
        "metadata": metadata,
        "tensors": entries,
    }).encode("utf-8")
    with open(path, "wb") as f:
        f.write(b"VLQT")
        f.write(struct.pack("<IQ", CONTAINER_VERSION, len(header)))
        f.write(header)
        for c in chunks:
            f.write(c)


def copy_merges(src, dst):
    opener = gzip.open if src.suffix == ".gz" else open
    with opener(src, "rb") as fin, open(dst, "wb") as fout:
        shutil.copyfileobj(fin, fout)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("checkpoint", type=Path, help="CLIP checkpoint (.pt TorchScript, state dict, or .safetensors)")
    ap.add_argument("merges", type=Path, help="bpe_simple_vocab_16e6.txt or .txt.gz")
    ap.add_argument("output", type=Path, help="backbone container to write")
    ap.add_argument("--vision-heads", type=int, help="override (default: width / 64)")
    ap.add_argument("--text-heads", type=int, help="override (default: width / 64)")
    ap.add_argument("--num-merges", type=int, default=48894,
                    help="merge lines to use; must match the token embedding rows (vocab = 512 + merges + 2)")
    args = ap.parse_args(argv)

    sd = load_state_dict(args.checkpoint)
    metadata, tensors = convert(sd, args.vision_heads, args.text_heads, args.num_merges)
    vocab = metadata["config"]["vocab_size"]
    if 512 + args.num_merges + 2 > vocab:
        raise SystemExit(f"{args.num_merges} merges need {512 + args.num_merges + 2} token rows, checkpoint has {vocab}")
    args.output.parent.mkdir(parents=True, exist_ok=True)
    write_container(args.output, metadata, tensors)
    copy_merges(args.merges, args.output.parent / "merges.txt")
    cfg = metadata["config"]
    print(f"wrote {args.output}: {cfg['num_layers']} layers, vision {cfg['vision_width']}, text {cfg['text_width']}, "
          f"joint {cfg['joint_dim']}, {cfg['image_size']}px / {cfg['patch_count']} patches, {len(tensors)} tensors")
    return 0


if __name__ == "__main__":
    sys.exit(main())
