"""seedpc: compress colored point clouds into diffusion-decodable seed streams.

The pipeline in one breath: normalize a cloud into [-1, 1]^3, split it over a
uniform grid, tune a small set of conditioning seeds per patch against a
denoiser, entropy-code the quantized seeds into a byte stream, and decode by
running the reverse diffusion sampler conditioned on those seeds.
"""

from .codec import (
    DecodedStream,
    QuantizedSeeds,
    decode_stream,
    dequantize_seeds,
    encode_stream,
    measure_bits,
    quantize_seeds,
)
from .diffusion import (
    ConditionalDenoiser,
    NoiseSchedule,
    OracleDenoiser,
    SeedAnchorDenoiser,
    add_noise,
    make_schedule,
    rounds_for,
    sample_patch,
)
from .metrics import RdCurve, bd_psnr, bpp, chamfer, psnr_color, psnr_geometry
from .patching import PatchGrid, cell_indices, divide, select_level
from .pointset import (
    ColoredPointCloud,
    NormalizationScale,
    denormalize,
    load_ply,
    normalize,
    random_sample,
    save_ply,
)
from .toydenoiser import (
    ToyDenoiser,
    ToyDenoiserParams,
    ToyTrainConfig,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .tuning import SeedWeights, TuneConfig, TuneResult, bdsam, init_weights, tune

__version__ = "0.1.0"

__all__ = [
    "ColoredPointCloud",
    "ConditionalDenoiser",
    "DecodedStream",
    "NoiseSchedule",
    "NormalizationScale",
    "OracleDenoiser",
    "PatchGrid",
    "QuantizedSeeds",
    "RdCurve",
    "SeedAnchorDenoiser",
    "SeedWeights",
    "ToyDenoiser",
    "ToyDenoiserParams",
    "ToyTrainConfig",
    "TuneConfig",
    "TuneResult",
    "add_noise",
    "bd_psnr",
    "bdsam",
    "bpp",
    "cell_indices",
    "chamfer",
    "decode_stream",
    "denormalize",
    "dequantize_seeds",
    "divide",
    "encode_stream",
    "init_weights",
    "load_checkpoint",
    "load_ply",
    "make_schedule",
    "measure_bits",
    "normalize",
    "psnr_color",
    "psnr_geometry",
    "quantize_seeds",
    "random_sample",
    "rounds_for",
    "sample_patch",
    "save_checkpoint",
    "save_ply",
    "select_level",
    "train",
    "tune",
    "__version__",
]
