"""Walk through one-pass encoding and two-pass decoding on a single image.

Shows that the encoder's single context pass and the decoder's two passes
produce the same entropy parameters, how the bitstream splits into anchor
and non-anchor substreams, and how many parameter-network calls each
context kind needs to decode.

    python demos/two_pass_decoding.py --size 256
"""

import argparse

import numpy as np

from checkerboard import codec, ops
from checkerboard import network as net
from checkerboard.data import synthetic_image
from checkerboard.tensor import Tensor, no_grad


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--size", type=int, default=256)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    x = synthetic_image(np.random.default_rng(args.seed), args.size)
    weights = net.ModelWeights.init(net.ModelConfig(context_kind="checkerboard"), seed=args.seed)

    enc = codec.encode_image(x, weights, details=True)
    c = enc.container
    print(f"latent grid {enc.y_hat.shape[1]}x{enc.y_hat.shape[2]}, {enc.y_hat.shape[0]} channels")
    print(f"streams: z {len(c.z_stream)} B, anchors {len(c.anchor_stream)} B, non-anchors {len(c.nonanchor_stream)} B")

    # the encoder's one pass against the decoder's two passes
    with no_grad():
        hyper = net.hyper_synthesize(weights, Tensor(enc.z_hat[None]))
        one = net.entropy_params_one_pass(weights, hyper, Tensor(enc.y_hat[None])).data
        anchor = net.entropy_params_anchor(weights, hyper).data
        y_half = ops.mux(enc.y_hat[None], np.zeros_like(enc.y_hat[None])).data
        nonanchor = net.entropy_params_nonanchor(weights, hyper, Tensor(y_half)).data
    two = np.where(ops.anchor_mask(*enc.y_hat.shape[-2:]), anchor, nonanchor)
    print(f"one-pass == two-pass parameters, bitwise: {np.array_equal(one, two)}")

    dec = codec.decode_image(c.to_bytes(), weights, details=True)
    print(f"decoded latents identical: {np.array_equal(dec.y_hat, enc.y_hat)}")
    print(f"payload {enc.payload_bits} bits vs estimate {enc.estimated_total_bits:.0f} bits")

    print("\nparameter-network calls per decode:")
    for kind in ("none", "checkerboard", "serial"):
        w = net.ModelWeights.init(net.ModelConfig(context_kind=kind), seed=args.seed)
        res = codec.decode_image(codec.encode_image(x, w), w, details=True)
        print(f"  {kind:12s} {res.calls['g_ep']:6d}   ({1000 * res.seconds['total']:.1f} ms)")


if __name__ == "__main__":
    main()
