"""Spearman rho after each cascading-randomization stage, for several methods on the zoo models."""


from esegeta import attribution as A
from esegeta.evaluation import cascading_randomization
from esegeta.models import ModelConfig, build_model
from esegeta.synthetic import tube_volume
from esegeta.wrappers import PixelwiseWrapper

METHODS = {
    "saliency": lambda m, t, x: A.saliency(m, t, x),
    "input_x_gradient": lambda m, t, x: A.input_x_gradient(m, t, x),
    "integrated_gradients": lambda m, t, x: A.integrated_gradients(m, t, x, steps=16),
    "guided_backprop": lambda m, t, x: A.guided_backprop(m, t, x),
    "gradcam": lambda m, t, x: A.gradcam(m, t, x, "dec0.conv1"),
}


def main():
    for dims, shape in ((2, (32, 32)), (3, (12, 12, 12))):
        x = tube_volume(shape, seed=0)[None, None]
        for variant in ("unet", "unet_mss"):
            model = build_model(ModelConfig(dims=dims, variant=variant, seed=0))
            print(f"\n{dims}D {variant}  input {shape}")
            print(f"{'method':<22}" + "".join(f"{s:>10}" for s in ("none", "head", "decoder", "encoder")))
            for name, fn in METHODS.items():
                res = cascading_randomization(model, PixelwiseWrapper(1), fn, x, seed=1)
                print(f"{name:<22}" + "".join(f"{r:>10.3f}" for r in res.rhos))


if __name__ == "__main__":
    main()
