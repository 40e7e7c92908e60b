"""Image-based IPv6 target generation with per-subclass PixelCNNs."""

from .addr import Address, Prefix, PrefixTable, SeedSet, format_address, load_hitlist, parse_address, parse_prefix
from .baseline import EntropyTreeGenerator
from .imgcode import AddressImageEncoder, decode, encode, set_entropy
from .metrics import conversion_gain, conversion_rate, cover_num, hit_rate
from .oracle import SyntheticProber, SyntheticUniverse, build_universe
from .pipeline import RunConfig, run_6vision, run_ablation, run_two_stage
from .pixelgen import GatedPixelCNN, PixelCNNGenerator
from .vaecluster import VaeKMeans

__version__ = "0.1.0"

__all__ = [
    "Address", "Prefix", "PrefixTable", "SeedSet", "format_address", "load_hitlist", "parse_address",
    "parse_prefix", "EntropyTreeGenerator", "AddressImageEncoder", "decode", "encode", "set_entropy",
    "conversion_gain", "conversion_rate", "cover_num", "hit_rate", "SyntheticProber", "SyntheticUniverse",
    "build_universe", "RunConfig", "run_6vision", "run_ablation", "run_two_stage", "GatedPixelCNN",
    "PixelCNNGenerator", "VaeKMeans",
]
