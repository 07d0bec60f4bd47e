"""Convert a torch state dict (e.g. torchvision ResNet-50 weights) into the
weight-file format read by ``--config pretrained=...``.

    python3 scripts/convert_torch_state_dict.py resnet50.pth weights/resnet50 --drop fc.

The CNN encoder uses the standard ResNet parameter names, so torchvision
checkpoints map over key for key once the classifier (``fc.``) is dropped.
Pass ``--check-cnn`` to verify the result loads into the full-scale encoder.
"""

import argparse

import torch

from t2dm_screen.kernels import CnnConfig, ResidualCNN, load_weights, save_weights


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("src", help="file readable by torch.load")
    p.add_argument("dst", help="output stem; writes <dst>.json and <dst>.bin")
    p.add_argument("--drop", nargs="*", default=["fc."], help="key prefixes to discard")
    p.add_argument("--strip", default="", help="prefix removed from every key (e.g. 'module.')")
    p.add_argument("--check-cnn", action="store_true")
    args = p.parse_args()

    state = torch.load(args.src, map_location="cpu", weights_only=True)
    if "state_dict" in state:
        state = state["state_dict"]
    out = {}
    for k, v in state.items():
        if args.strip and k.startswith(args.strip):
            k = k[len(args.strip):]
        if any(k.startswith(d) for d in args.drop):
            continue
        out[k] = v
    save_weights(out, args.dst, meta={"source": args.src})
    print(f"wrote {len(out)} tensors to {args.dst}.json/.bin")
    if args.check_cnn:
        load_weights(ResidualCNN(CnnConfig.resnet50()), args.dst)
        print("loads into the full-scale CNN encoder")


if __name__ == "__main__":
    main()
