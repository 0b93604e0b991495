"""Convert a Keras ImageNet backbone into the ONNX feature extractor the
C++ backend loads: global-average-pooled output, NCHW float input, opset 11.

    python3 tools/python/export_onnx.py --arch DenseNet121 --out models/DenseNet121.onnx

Pass --weights none to export randomly initialised weights (no download).
"""

import argparse
import sys

import onnx

ARCHS = {
    # name: (keras.applications attribute, input side)
    "MobileNet": ("MobileNet", 224),
    "DenseNet121": ("DenseNet121", 224),
    "DenseNet201": ("DenseNet201", 224),
    "Xception": ("Xception", 224),
    "InceptionV3": ("InceptionV3", 224),
    "InceptionResNetV2": ("InceptionResNetV2", 224),
    "ResNet50": ("ResNet50", 224),
    "ResNet152": ("ResNet152", 224),
    "VGG16": ("VGG16", 224),
    "VGG19": ("VGG19", 224),
    "NASNetLarge": ("NASNetLarge", 331),
    "NASNetMobile": ("NASNetMobile", 224),
    "ResNet50V2": ("ResNet50V2", 224),
    "ResNet101V2": ("ResNet101V2", 224),
    "ResNet152V2": ("ResNet152V2", 224),
}


def strip_identity(model: onnx.ModelProto) -> onnx.ModelProto:
    """OpenCV 4.5's importer trips over some Identity chains; rewire around them."""
    graph = model.graph
    outputs = {o.name for o in graph.output}
    rename = {}
    keep = []
    for node in graph.node:
        if node.op_type == "Identity" and node.output[0] not in outputs:
            rename[node.output[0]] = node.input[0]
        else:
            keep.append(node)

    def resolve(name):
        while name in rename:
            name = rename[name]
        return name

    for node in keep:
        for i, name in enumerate(node.input):
            node.input[i] = resolve(name)
    del graph.node[:]
    graph.node.extend(keep)
    return model


def export(keras_model, side, out_path, layout):
    import tensorflow as tf
    import tf2onnx

    spec = (tf.TensorSpec((None, side, side, 3), tf.float32, name="input"),)
    kwargs = {"inputs_as_nchw": ["input"]} if layout == "nchw" else {}
    proto, _ = tf2onnx.convert.from_keras(keras_model, input_signature=spec, opset=11, **kwargs)
    proto = strip_identity(proto)
    onnx.checker.check_model(proto)
    onnx.save(proto, out_path)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--arch", required=True, choices=sorted(ARCHS))
    ap.add_argument("--out", required=True)
    ap.add_argument("--weights", default="imagenet", choices=["imagenet", "none"])
    ap.add_argument("--layout", default="nchw", choices=["nchw", "nhwc"])
    args = ap.parse_args(argv)

    import tensorflow as tf

    attr, side = ARCHS[args.arch]
    ctor = getattr(tf.keras.applications, attr)
    model = ctor(
        weights=None if args.weights == "none" else "imagenet",
        include_top=False,
        pooling="avg",
        input_shape=(side, side, 3),
    )
    export(model, side, args.out, args.layout)
    print(f"{args.arch}: {model.output_shape[-1]} features, input {side}x{side}, wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
