"""Regenerate tests/data/tiny_gap.onnx: two convolutions and global average
pooling, 32x32x3 input, 12 outputs. Seeded, so reruns give the same weights.

    python3 tools/python/make_tiny_onnx.py tests/data/tiny_gap.onnx
"""

import sys

from export_onnx import export


def main(argv):
    out = argv[1] if len(argv) > 1 else "tiny_gap.onnx"
    import tensorflow as tf

    tf.keras.utils.set_random_seed(7)
    inp = tf.keras.Input((32, 32, 3))
    x = tf.keras.layers.Conv2D(8, 3, activation="relu")(inp)
    x = tf.keras.layers.Conv2D(12, 3, strides=2, activation="relu")(x)
    x = tf.keras.layers.GlobalAveragePooling2D()(x)
    export(tf.keras.Model(inp, x), 32, out, "nchw")
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
